//! Data model: users with paired search and recommendation histories, JSONL
//! corpus files, leave-one-out splitting, sparsity grouping, and a seeded
//! synthetic corpus generator for desk-scale experiments.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(thiserror::Error, Debug)]
pub enum DataError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path} line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path} line {line}: duplicate user \"{user}\"")]
    DuplicateUser { path: String, line: usize, user: String },
    #[error("{path} line {line}: duplicate item \"{item}\"")]
    DuplicateItem { path: String, line: usize, item: String },
    #[error("{path} line {line}: reference to undeclared item \"{item}\"")]
    UnknownItem { path: String, line: usize, item: String },
    #[error("{path} line {line}: empty query text")]
    EmptyQuery { path: String, line: usize },
    #[error("{path} line {line}: duplicate clicked item \"{item}\" in one search record")]
    DuplicateClick { path: String, line: usize, item: String },
    #[error("synthetic config invalid: {0}")]
    BadSynthConfig(String),
}

/// Recommendation interaction split label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// The two interaction channels every user carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Search,
    Rec,
}

impl Channel {
    pub const BOTH: [Channel; 2] = [Channel::Search, Channel::Rec];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Search => "search",
            Channel::Rec => "rec",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub key: String,
    pub text: String,
}

/// Interned query: ordered word ids into the dataset vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub words: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecEvent {
    pub item: usize,
    pub ts: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchEvent {
    pub query: usize,
    pub clicked: Vec<usize>,
    pub ts: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserHistory {
    pub user_id: usize,
    pub key: String,
    pub rec: Vec<RecEvent>,
    pub search: Vec<SearchEvent>,
    /// Parallel to `rec`; populated by [`Dataset::leave_one_out_split`].
    pub splits: Vec<Split>,
}

impl UserHistory {
    pub fn n_rec(&self) -> usize {
        self.rec.len()
    }

    pub fn n_search(&self) -> usize {
        self.search.len()
    }

    /// Every item the user touched in either channel (rec clicks plus
    /// search clicks). Used to exclude candidates from negative sampling.
    pub fn interacted_items(&self) -> BTreeSet<usize> {
        let mut set = BTreeSet::new();
        for e in &self.rec {
            set.insert(e.item);
        }
        for s in &self.search {
            set.extend(s.clicked.iter().copied());
        }
        set
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub users: Vec<UserHistory>,
    pub items: Vec<Item>,
    pub vocab: Vec<String>,
    pub queries: Vec<Query>,
}

/// One labeled evaluation/training row: the rec interaction at `rec_pos`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRow {
    pub user_id: usize,
    pub rec_pos: usize,
    pub target_item: usize,
}

impl Dataset {
    /// (users, items, distinct queries, vocabulary words)
    pub fn stats(&self) -> (usize, usize, usize, usize) {
        (self.users.len(), self.items.len(), self.queries.len(), self.vocab.len())
    }

    /// Labels each user's last rec interaction test and second-to-last
    /// valid when the user has at least 3; shorter users are train-only.
    /// Idempotent.
    pub fn leave_one_out_split(&mut self) {
        for u in &mut self.users {
            let n = u.rec.len();
            u.splits = vec![Split::Train; n];
            if n >= 3 {
                u.splits[n - 1] = Split::Test;
                u.splits[n - 2] = Split::Valid;
            }
        }
    }

    /// All rows carrying the given label, in (user, position) order.
    pub fn split_rows(&self, split: Split) -> Vec<SplitRow> {
        let mut rows = Vec::new();
        for u in &self.users {
            for (p, lab) in u.splits.iter().enumerate() {
                if *lab == split {
                    rows.push(SplitRow {
                        user_id: u.user_id,
                        rec_pos: p,
                        target_item: u.rec[p].item,
                    });
                }
            }
        }
        rows
    }

    /// History context for the rec interaction at `rec_pos`: the most
    /// recent `max_rec` earlier rec events (same channel, earlier
    /// positions) and the most recent `max_search` search events with
    /// strictly earlier timestamps. Cross-channel timestamp ties are
    /// excluded so a search on the target's own timestamp never leaks in.
    pub fn context(
        &self,
        user_id: usize,
        rec_pos: usize,
        max_rec: usize,
        max_search: usize,
    ) -> (Vec<&RecEvent>, Vec<&SearchEvent>) {
        let u = &self.users[user_id];
        // rec_pos == rec.len() means "score after the full history": every
        // search event is fair game
        let target_ts = if rec_pos == u.rec.len() { i64::MAX } else { u.rec[rec_pos].ts };
        let rec_start = rec_pos.saturating_sub(max_rec);
        let rec_ctx: Vec<&RecEvent> = u.rec[rec_start..rec_pos].iter().collect();
        let eligible: Vec<&SearchEvent> =
            u.search.iter().filter(|s| s.ts < target_ts).collect();
        let s_start = eligible.len().saturating_sub(max_search);
        (rec_ctx, eligible[s_start..].to_vec())
    }

    fn check_invariants(&self) {
        for u in &self.users {
            debug_assert!(u.rec.windows(2).all(|w| w[0].ts <= w[1].ts));
            debug_assert!(u.search.windows(2).all(|w| w[0].ts <= w[1].ts));
            debug_assert_eq!(u.splits.len(), u.rec.len());
        }
        for q in &self.queries {
            debug_assert!(!q.words.is_empty());
            debug_assert!(q.words.iter().all(|w| *w < self.vocab.len()));
        }
    }
}

/// Quantile partition of users by search-history length.
#[derive(Clone, Debug, Serialize)]
pub struct SparsityGrouping {
    /// Ascending thresholds; group g = count of boundaries strictly below
    /// the user's search count, so boundary values fall in the lower group.
    pub boundaries: Vec<usize>,
    /// user_id → group index.
    pub assignment: Vec<usize>,
    pub num_groups: usize,
}

impl SparsityGrouping {
    pub fn group_of(&self, user_id: usize) -> usize {
        self.assignment[user_id]
    }
}

/// Partitions users into `num_groups` quantile buckets of search count.
/// When fewer distinct counts exist than requested groups, collapses to one
/// group per distinct value and logs a warning.
pub fn group_users_by_search_count(dataset: &Dataset, num_groups: usize) -> SparsityGrouping {
    assert!(num_groups >= 2, "need at least 2 groups");
    let counts: Vec<usize> = dataset.users.iter().map(|u| u.n_search()).collect();
    let mut sorted = counts.clone();
    sorted.sort_unstable();
    let n = sorted.len();
    assert!(n > 0, "empty dataset");

    let mut distinct = sorted.clone();
    distinct.dedup();

    let mut boundaries: Vec<usize> = if num_groups > distinct.len() {
        log::warn!(
            "requested {} sparsity groups but only {} distinct search counts; collapsing",
            num_groups,
            distinct.len()
        );
        distinct[..distinct.len() - 1].to_vec()
    } else {
        (1..num_groups)
            .map(|g| {
                let idx = (n * g).div_ceil(num_groups) - 1;
                sorted[idx]
            })
            .collect()
    };
    boundaries.dedup();
    if boundaries.len() + 1 < num_groups && num_groups <= distinct.len() {
        log::warn!(
            "quantile boundaries collapsed to {} groups (skewed search counts)",
            boundaries.len() + 1
        );
    }

    let assignment: Vec<usize> =
        counts.iter().map(|c| boundaries.iter().filter(|b| *b < c).count()).collect();
    SparsityGrouping { num_groups: boundaries.len() + 1, boundaries, assignment }
}

// ---- wire format ----

#[derive(Serialize, Deserialize)]
struct WireRec {
    item: String,
    ts: i64,
}

#[derive(Serialize, Deserialize)]
struct WireSearch {
    query: String,
    clicked: Vec<String>,
    ts: i64,
}

#[derive(Serialize, Deserialize)]
struct WireUser {
    user: String,
    rec: Vec<WireRec>,
    search: Vec<WireSearch>,
}

#[derive(Serialize, Deserialize)]
struct WireItem {
    item: String,
    text: String,
}

/// Derives the sibling item-table path for a dataset file:
/// `dir/name.jsonl` → `dir/name.items.jsonl`.
pub fn items_path_for(data_path: &Path) -> std::path::PathBuf {
    let stem = data_path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    data_path.with_file_name(format!("{stem}.items.jsonl"))
}

/// Loads a user corpus plus its sibling item table. Integer ids are
/// assigned by first appearance: items by item-file line order, users by
/// corpus line order, words and queries by scan order through search
/// records. Histories are stably sorted by timestamp.
pub fn load_dataset(data_path: &Path, items_path: &Path) -> Result<Dataset, DataError> {
    let ipath = items_path.display().to_string();
    let mut items = Vec::new();
    let mut item_ids: HashMap<String, usize> = HashMap::new();
    let f = fs::File::open(items_path)?;
    for (ln, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let w: WireItem = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: ipath.clone(),
            line: ln + 1,
            msg: e.to_string(),
        })?;
        if item_ids.contains_key(&w.item) {
            return Err(DataError::DuplicateItem { path: ipath, line: ln + 1, item: w.item });
        }
        item_ids.insert(w.item.clone(), items.len());
        items.push(Item { key: w.item, text: w.text });
    }

    let dpath = data_path.display().to_string();
    let mut users = Vec::new();
    let mut user_keys: HashMap<String, usize> = HashMap::new();
    let mut vocab: Vec<String> = Vec::new();
    let mut word_ids: HashMap<String, usize> = HashMap::new();
    let mut queries: Vec<Query> = Vec::new();
    let mut query_ids: HashMap<Vec<usize>, usize> = HashMap::new();

    let f = fs::File::open(data_path)?;
    for (ln, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let w: WireUser = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: dpath.clone(),
            line: ln + 1,
            msg: e.to_string(),
        })?;
        if user_keys.contains_key(&w.user) {
            return Err(DataError::DuplicateUser { path: dpath, line: ln + 1, user: w.user });
        }

        let mut rec = Vec::with_capacity(w.rec.len());
        for r in w.rec {
            let item = *item_ids.get(&r.item).ok_or_else(|| DataError::UnknownItem {
                path: dpath.clone(),
                line: ln + 1,
                item: r.item.clone(),
            })?;
            rec.push(RecEvent { item, ts: r.ts });
        }
        rec.sort_by_key(|e| e.ts);

        let mut search = Vec::with_capacity(w.search.len());
        for s in w.search {
            let tokens: Vec<&str> = s.query.split_whitespace().collect();
            if tokens.is_empty() {
                return Err(DataError::EmptyQuery { path: dpath, line: ln + 1 });
            }
            let words: Vec<usize> = tokens
                .iter()
                .map(|t| {
                    *word_ids.entry((*t).to_string()).or_insert_with(|| {
                        vocab.push((*t).to_string());
                        vocab.len() - 1
                    })
                })
                .collect();
            let query = *query_ids.entry(words.clone()).or_insert_with(|| {
                queries.push(Query { words });
                queries.len() - 1
            });
            let mut clicked = Vec::with_capacity(s.clicked.len());
            let mut seen = BTreeSet::new();
            for c in s.clicked {
                let item = *item_ids.get(&c).ok_or_else(|| DataError::UnknownItem {
                    path: dpath.clone(),
                    line: ln + 1,
                    item: c.clone(),
                })?;
                if !seen.insert(item) {
                    return Err(DataError::DuplicateClick { path: dpath, line: ln + 1, item: c });
                }
                clicked.push(item);
            }
            search.push(SearchEvent { query, clicked, ts: s.ts });
        }
        search.sort_by_key(|e| e.ts);

        let user_id = users.len();
        user_keys.insert(w.user.clone(), user_id);
        users.push(UserHistory { user_id, key: w.user, rec, search, splits: Vec::new() });
    }

    let mut ds = Dataset { users, items, vocab, queries };
    ds.leave_one_out_split();
    ds.check_invariants();
    Ok(ds)
}

/// Writes the corpus and sibling item table in the wire format. Queries are
/// rendered by joining vocabulary words with single spaces, which
/// round-trips exactly under whitespace tokenization.
pub fn save_dataset(ds: &Dataset, data_path: &Path, items_path: &Path) -> Result<(), DataError> {
    let mut out = BufWriter::new(fs::File::create(items_path)?);
    for it in &ds.items {
        let w = WireItem { item: it.key.clone(), text: it.text.clone() };
        serde_json::to_writer(&mut out, &w).map_err(io_from_json)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    let mut out = BufWriter::new(fs::File::create(data_path)?);
    for u in &ds.users {
        let w = WireUser {
            user: u.key.clone(),
            rec: u
                .rec
                .iter()
                .map(|e| WireRec { item: ds.items[e.item].key.clone(), ts: e.ts })
                .collect(),
            search: u
                .search
                .iter()
                .map(|s| WireSearch {
                    query: ds.queries[s.query]
                        .words
                        .iter()
                        .map(|w| ds.vocab[*w].as_str())
                        .collect::<Vec<_>>()
                        .join(" "),
                    clicked: s.clicked.iter().map(|i| ds.items[*i].key.clone()).collect(),
                    ts: s.ts,
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &w).map_err(io_from_json)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn io_from_json(e: serde_json::Error) -> DataError {
    DataError::Io(std::io::Error::new(std::io::ErrorKind::Other, e))
}

// ---- synthetic corpus ----

/// Knobs for the synthetic corpus. Users, items, and query words are
/// partitioned into latent interest clusters; interactions mostly stay
/// within a user's cluster so the end-to-end pipeline has recoverable
/// structure.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub seed: u64,
    /// Query-vocabulary words generated per cluster.
    pub vocab_per_cluster: usize,
    /// Inclusive bounds on rec-history length.
    pub rec_len: (usize, usize),
    /// Inclusive bounds on search-history length for non-sparse users.
    pub search_len: (usize, usize),
    /// Fraction of users (prefix of the id space) capped to sparse search.
    pub sparse_fraction: f64,
    /// Sparse users draw search length from 0..=sparse_cap.
    pub sparse_cap: usize,
    /// Inclusive rec-length bounds for sparse users: activity correlates
    /// across channels, so search-sparse users also browse less.
    pub sparse_rec_len: (usize, usize),
    /// Probability an interaction stays within the user's cluster.
    pub within_cluster: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 200,
            items: 500,
            clusters: 4,
            seed: 7,
            vocab_per_cluster: 30,
            rec_len: (6, 14),
            search_len: (3, 10),
            sparse_fraction: 0.5,
            sparse_cap: 2,
            sparse_rec_len: (3, 6),
            within_cluster: 0.9,
        }
    }
}

/// Ground-truth latent assignments, kept outside the Dataset so tests can
/// score the generator against its own labels.
#[derive(Clone, Debug)]
pub struct SyntheticLabels {
    pub user_cluster: Vec<usize>,
    pub item_cluster: Vec<usize>,
    pub word_cluster: Vec<usize>,
}

/// Deterministic synthetic corpus: bit-identical output for equal configs.
pub fn generate_synthetic_dataset(
    cfg: &SynthConfig,
) -> Result<(Dataset, SyntheticLabels), DataError> {
    if cfg.clusters == 0 || cfg.users == 0 || cfg.items == 0 {
        return Err(DataError::BadSynthConfig("users, items, clusters must be ≥ 1".into()));
    }
    if cfg.clusters > cfg.items {
        return Err(DataError::BadSynthConfig(format!(
            "cluster count {} exceeds item count {}",
            cfg.clusters, cfg.items
        )));
    }
    if cfg.rec_len.0 > cfg.rec_len.1
        || cfg.search_len.0 > cfg.search_len.1
        || cfg.sparse_rec_len.0 > cfg.sparse_rec_len.1
    {
        return Err(DataError::BadSynthConfig("length bounds inverted".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.clusters;

    // Word identity is the (cluster, slot) name; the id table is interned
    // by first appearance in generated queries so a save/load round trip
    // reproduces the exact same Dataset.
    let word_name = |cl: usize, j: usize| format!("c{cl}w{j}");

    let mut items = Vec::with_capacity(cfg.items);
    let mut item_cluster = Vec::with_capacity(cfg.items);
    let mut cluster_items: Vec<Vec<usize>> = vec![Vec::new(); c];
    for i in 0..cfg.items {
        let cl = i % c;
        item_cluster.push(cl);
        cluster_items[cl].push(i);
        let words: Vec<String> = (0..3)
            .map(|_| word_name(cl, rng.gen_range(0..cfg.vocab_per_cluster)))
            .collect();
        items.push(Item { key: format!("i{i:05}"), text: words.join(" ") });
    }

    let mut vocab: Vec<String> = Vec::new();
    let mut word_cluster: Vec<usize> = Vec::new();
    let mut word_ids: HashMap<String, usize> = HashMap::new();

    let sparse_count = (cfg.sparse_fraction * cfg.users as f64).ceil() as usize;
    let mut users = Vec::with_capacity(cfg.users);
    let mut user_cluster = Vec::with_capacity(cfg.users);
    let mut queries: Vec<Query> = Vec::new();
    let mut query_ids: HashMap<Vec<usize>, usize> = HashMap::new();

    for u in 0..cfg.users {
        let cl = u % c;
        user_cluster.push(cl);
        let sparse = u < sparse_count;
        let rec_bounds = if sparse { cfg.sparse_rec_len } else { cfg.rec_len };
        let n_rec = rng.gen_range(rec_bounds.0..=rec_bounds.1);
        let n_search = if sparse {
            rng.gen_range(0..=cfg.sparse_cap)
        } else {
            rng.gen_range(cfg.search_len.0..=cfg.search_len.1)
        };

        // Merge both channels onto one per-user timeline so search events
        // interleave with rec events at distinct timestamps.
        let mut slots: Vec<bool> = (0..n_rec + n_search).map(|k| k < n_rec).collect();
        slots.shuffle(&mut rng);

        let pick_item = |rng: &mut ChaCha8Rng| -> usize {
            if rng.gen_bool(cfg.within_cluster) {
                cluster_items[cl][rng.gen_range(0..cluster_items[cl].len())]
            } else {
                rng.gen_range(0..cfg.items)
            }
        };

        let mut rec = Vec::with_capacity(n_rec);
        let mut search = Vec::with_capacity(n_search);
        for (pos, is_rec) in slots.iter().enumerate() {
            let ts = (pos + 1) as i64;
            if *is_rec {
                rec.push(RecEvent { item: pick_item(&mut rng), ts });
            } else {
                let word_cl =
                    if rng.gen_bool(cfg.within_cluster) { cl } else { rng.gen_range(0..c) };
                let qlen = rng.gen_range(2..=3);
                let words: Vec<usize> = (0..qlen)
                    .map(|_| {
                        let name = word_name(word_cl, rng.gen_range(0..cfg.vocab_per_cluster));
                        *word_ids.entry(name.clone()).or_insert_with(|| {
                            vocab.push(name);
                            word_cluster.push(word_cl);
                            vocab.len() - 1
                        })
                    })
                    .collect();
                let query = *query_ids.entry(words.clone()).or_insert_with(|| {
                    queries.push(Query { words });
                    queries.len() - 1
                });
                let n_click = rng.gen_range(1..=3);
                let mut clicked = Vec::new();
                for _ in 0..n_click {
                    for _attempt in 0..16 {
                        let cand = pick_item(&mut rng);
                        if !clicked.contains(&cand) {
                            clicked.push(cand);
                            break;
                        }
                    }
                }
                search.push(SearchEvent { query, clicked, ts });
            }
        }
        users.push(UserHistory {
            user_id: u,
            key: format!("u{u:04}"),
            rec,
            search,
            splits: Vec::new(),
        });
    }

    let mut ds = Dataset { users, items, vocab, queries };
    ds.leave_one_out_split();
    ds.check_invariants();
    Ok((ds, SyntheticLabels { user_cluster, item_cluster, word_cluster }))
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Valid => write!(f, "valid"),
            Split::Test => write!(f, "test"),
        }
    }
}
