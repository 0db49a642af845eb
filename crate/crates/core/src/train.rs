//! Second-stage training and evaluation: minibatch BCE training with
//! per-epoch negative resampling and early stopping on the validation
//! metric, leave-one-out evaluation against seeded sampled negatives with
//! per-sparsity-group breakdowns, mechanism ablations, and hyperparameter
//! sweeps.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{group_users_by_search_count, Dataset, Split, SplitRow};
use crate::model::{
    bind_model, build_batch_loss, score_candidates, ModelConfig, ModelError, Recommender,
    ScoredRow,
};
use crate::quantizer::{
    export_codes, train_rqvae, CodeAssignment, QuantizerConfig, QuantizerError, TrainedQuantizer,
};
use crate::tape::Tape;

#[derive(thiserror::Error, Debug)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {epoch} batch {batch}")]
    NanLoss { epoch: usize, batch: usize, trace: Vec<EpochStats> },
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("no training rows with nonempty history")]
    NoRows,
    #[error("unknown ablation toggle `{0}`")]
    UnknownToggle(String),
    #[error("empty sweep grid")]
    EmptyGrid,
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("quantizer: {0}")]
    Quantizer(#[from] QuantizerError),
}

/// Knobs of the optimization and evaluation loop. Echoed into every report
/// so result files are self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Hard-capped at 100.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Consecutive non-improving validation epochs tolerated before stopping.
    pub patience: usize,
    /// Sampled negatives per evaluation row (candidate list = 1 + this).
    pub num_negatives: usize,
    /// Sparsity groups for the per-group breakdown.
    pub num_groups: usize,
    /// Seeds training negative resampling and evaluation candidate draws.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 1024,
            lr: 1e-3,
            patience: 10,
            num_negatives: 99,
            num_groups: 3,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean total loss over the epoch's batches.
    pub loss: f64,
    /// Mean BCE component.
    pub bce: f64,
    pub valid_metric: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Every train-split rec event whose history window holds at least one
/// event becomes a positive example.
pub fn training_positives(ds: &Dataset, cfg: &ModelConfig) -> Vec<ScoredRow> {
    let mut rows = Vec::new();
    for u in &ds.users {
        for (pos, ev) in u.rec.iter().enumerate() {
            if u.splits[pos] != Split::Train {
                continue;
            }
            let (rec, search) = ds.context(u.user_id, pos, cfg.max_rec, cfg.max_search);
            if rec.is_empty() && search.is_empty() {
                continue;
            }
            rows.push(ScoredRow { user: u.user_id, rec_pos: pos, target: ev.item, label: 1.0 });
        }
    }
    rows
}

fn sample_one_negative(rng: &mut ChaCha8Rng, n_items: usize, exclude: &BTreeSet<usize>) -> usize {
    loop {
        let i = rng.gen_range(0..n_items);
        if !exclude.contains(&i) {
            return i;
        }
    }
}

/// Runs the optimization loop, validating each epoch with `validator`
/// (higher is better) and restoring the best-epoch parameters at the end.
pub fn train_with_validator(
    model: &mut Recommender,
    ds: &Dataset,
    cfg: &TrainConfig,
    validator: &mut dyn FnMut(&Recommender, usize) -> f64,
) -> Result<TrainTrace, TrainError> {
    if cfg.epochs > 100 {
        return Err(TrainError::BadConfig("epochs must be at most 100".into()));
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::BadConfig("batch_size must be positive".into()));
    }
    let positives = training_positives(ds, &model.config);
    if positives.is_empty() {
        return Err(TrainError::NoRows);
    }
    if ds.items.len() <= ds.users.iter().map(|u| u.interacted_items().len()).max().unwrap_or(0) {
        return Err(TrainError::BadConfig("a user interacted with every item".into()));
    }
    let interacted: Vec<BTreeSet<usize>> = ds.users.iter().map(|u| u.interacted_items()).collect();

    let mut trace: Vec<EpochStats> = Vec::new();
    let mut best_snap = model.params.snapshot();
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E3779B9));
        // fresh negative per positive, kept adjacent so the pair shares one
        // encoded history inside the batch
        let mut pairs: Vec<[ScoredRow; 2]> = positives
            .iter()
            .map(|p| {
                let neg = sample_one_negative(&mut rng, ds.items.len(), &interacted[p.user]);
                [*p, ScoredRow { target: neg, label: 0.0, ..*p }]
            })
            .collect();
        pairs.shuffle(&mut rng);
        let rows: Vec<ScoredRow> = pairs.into_iter().flatten().collect();

        let mut sum_total = 0.0;
        let mut sum_bce = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in rows.chunks(cfg.batch_size).enumerate() {
            let grads = {
                let mut tape = Tape::new();
                let vars = bind_model(&mut tape, model);
                let out = build_batch_loss(&mut tape, &vars, model, ds, chunk);
                let total = tape.value(out.total).item();
                if !total.is_finite() {
                    return Err(TrainError::NanLoss { epoch, batch: bi, trace });
                }
                sum_total += total;
                sum_bce += tape.value(out.bce).item();
                tape.backward(out.total);
                vars.bound.grads(&tape)
            };
            model.params.adam_step(&grads, cfg.lr);
            batches += 1;
        }

        let metric = validator(model, epoch);
        if metric > best_metric {
            best_metric = metric;
            best_epoch = epoch;
            best_snap = model.params.snapshot();
            stale = 0;
        } else {
            stale += 1;
        }
        trace.push(EpochStats {
            epoch,
            loss: sum_total / batches as f64,
            bce: sum_bce / batches as f64,
            valid_metric: metric,
        });
        if stale >= cfg.patience {
            break;
        }
    }
    model.params.restore(&best_snap);
    Ok(TrainTrace { epochs: trace, best_epoch, best_metric })
}

/// Standard loop: validates with NDCG@5 on the valid split.
pub fn train(
    model: &mut Recommender,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainTrace, TrainError> {
    let mut validator =
        |m: &Recommender, _epoch: usize| evaluate(m, ds, Split::Valid, cfg).overall.ndcg5;
    train_with_validator(model, ds, cfg, &mut validator)
}

// ---- evaluation ----

/// Metrics over one set of evaluation rows. A group no row fell into is
/// `empty` with all metrics zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub rows: usize,
    pub empty: bool,
    pub hr1: f64,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ShortRow {
    pub user: usize,
    /// Actual candidate-list length when fewer negatives were eligible.
    pub candidates: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub num_negatives: usize,
    pub seed: u64,
    /// Search-count thresholds separating the sparsity groups.
    pub group_boundaries: Vec<usize>,
    pub overall: GroupMetrics,
    /// Sparsest group first.
    pub groups: Vec<GroupMetrics>,
    pub short_rows: Vec<ShortRow>,
    pub config: TrainConfig,
}

pub fn hit_rate(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Rank of the first candidate among all of them, counting strictly higher
/// scores and breaking exact ties by ascending item id.
pub fn rank_of_first(scores: &[f64], items: &[usize]) -> usize {
    let st = scores[0];
    let it = items[0];
    1 + scores
        .iter()
        .zip(items)
        .skip(1)
        .filter(|(s, i)| **s > st || (**s == st && **i < it))
        .count()
}

/// Candidate list for one evaluation row: the ground truth first, then up
/// to `num_negatives` seeded draws from the items the user never touched in
/// either channel. The draw depends only on (seed, user), not on model
/// state or thread timing.
pub fn eval_candidates(
    ds: &Dataset,
    row: &SplitRow,
    num_negatives: usize,
    seed: u64,
) -> Vec<usize> {
    let exclude = ds.users[row.user_id].interacted_items();
    let eligible: Vec<usize> =
        (0..ds.items.len()).filter(|i| !exclude.contains(i)).collect();
    let mut cands = Vec::with_capacity(num_negatives + 1);
    cands.push(row.target_item);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(row.user_id as u64));
    if eligible.len() <= num_negatives {
        cands.extend_from_slice(&eligible);
    } else {
        let picks = rand::seq::index::sample(&mut rng, eligible.len(), num_negatives);
        cands.extend(picks.iter().map(|i| eligible[i]));
    }
    cands
}

struct Accum {
    rows: usize,
    hr1: f64,
    hr5: f64,
    hr10: f64,
    ndcg5: f64,
    ndcg10: f64,
}

impl Accum {
    fn new() -> Self {
        Accum { rows: 0, hr1: 0.0, hr5: 0.0, hr10: 0.0, ndcg5: 0.0, ndcg10: 0.0 }
    }
    fn add(&mut self, rank: usize) {
        self.rows += 1;
        self.hr1 += hit_rate(rank, 1);
        self.hr5 += hit_rate(rank, 5);
        self.hr10 += hit_rate(rank, 10);
        self.ndcg5 += ndcg_at(rank, 5);
        self.ndcg10 += ndcg_at(rank, 10);
    }
    fn finish(&self) -> GroupMetrics {
        if self.rows == 0 {
            return GroupMetrics { empty: true, ..GroupMetrics::default() };
        }
        let n = self.rows as f64;
        GroupMetrics {
            rows: self.rows,
            empty: false,
            hr1: self.hr1 / n,
            hr5: self.hr5 / n,
            hr10: self.hr10 / n,
            ndcg5: self.ndcg5 / n,
            ndcg10: self.ndcg10 / n,
        }
    }
}

/// Ranks every split row with an arbitrary scorer. Rows are processed in
/// parallel but aggregated in row order, so the report is deterministic.
pub fn evaluate_with_scorer<F>(
    ds: &Dataset,
    split: Split,
    cfg: &TrainConfig,
    scorer: F,
) -> MetricsReport
where
    F: Fn(&SplitRow, &[usize]) -> Vec<f64> + Sync,
{
    let rows = ds.split_rows(split);
    assert!(!rows.is_empty(), "split has no rows");
    let grouping = group_users_by_search_count(ds, cfg.num_groups);

    let outcomes: Vec<(usize, usize, usize)> = rows
        .par_iter()
        .map(|row| {
            let cands = eval_candidates(ds, row, cfg.num_negatives, cfg.seed);
            let scores = scorer(row, &cands);
            assert_eq!(scores.len(), cands.len());
            (row.user_id, rank_of_first(&scores, &cands), cands.len())
        })
        .collect();

    let mut overall = Accum::new();
    let mut per_group: Vec<Accum> = (0..grouping.num_groups).map(|_| Accum::new()).collect();
    let mut short_rows = Vec::new();
    for (user, rank, n_cands) in outcomes {
        overall.add(rank);
        per_group[grouping.group_of(user)].add(rank);
        if n_cands < cfg.num_negatives + 1 {
            short_rows.push(ShortRow { user, candidates: n_cands });
        }
    }
    MetricsReport {
        split: format!("{split:?}").to_lowercase(),
        num_negatives: cfg.num_negatives,
        seed: cfg.seed,
        group_boundaries: grouping.boundaries,
        overall: overall.finish(),
        groups: per_group.iter().map(Accum::finish).collect(),
        short_rows,
        config: cfg.clone(),
    }
}

pub fn evaluate(
    model: &Recommender,
    ds: &Dataset,
    split: Split,
    cfg: &TrainConfig,
) -> MetricsReport {
    evaluate_with_scorer(ds, split, cfg, |row, cands| {
        score_candidates(model, ds, row.user_id, row.rec_pos, cands)
    })
}

// ---- comparative reports ----

/// Relative change of `b` over baseline `a`, per group and metric:
/// (b − a) / a, with 0/0 reading as no change.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GroupImprovement {
    pub group: usize,
    pub empty: bool,
    pub hr1: f64,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

pub fn group_report(a: &MetricsReport, b: &MetricsReport) -> Vec<GroupImprovement> {
    assert_eq!(a.groups.len(), b.groups.len(), "group counts differ");
    let rel = |x: f64, y: f64| {
        if x == 0.0 {
            if y == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (y - x) / x
        }
    };
    a.groups
        .iter()
        .zip(&b.groups)
        .enumerate()
        .map(|(group, (ga, gb))| GroupImprovement {
            group,
            empty: ga.empty || gb.empty,
            hr1: rel(ga.hr1, gb.hr1),
            hr5: rel(ga.hr5, gb.hr5),
            hr10: rel(ga.hr10, gb.hr10),
            ndcg5: rel(ga.ndcg5, gb.ndcg5),
            ndcg10: rel(ga.ndcg10, gb.ndcg10),
        })
        .collect()
}

// ---- pipelines ----

/// Stage one and stage two, end to end, on precomputed preference
/// embedding matrices.
pub struct PipelineRun {
    pub quantizer: TrainedQuantizer,
    pub codes: Vec<CodeAssignment>,
    pub model: Recommender,
    pub trace: TrainTrace,
    pub valid: MetricsReport,
    pub test: MetricsReport,
}

pub fn run_pipeline(
    ds: &Dataset,
    vs: &[Vec<f32>],
    vr: &[Vec<f32>],
    qcfg: &QuantizerConfig,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<PipelineRun, TrainError> {
    let quantizer = train_rqvae(vs, vr, qcfg)?;
    let codes = export_codes(&quantizer, vs, vr);
    let mut model =
        Recommender::new(ds.users.len(), ds.items.len(), ds.vocab.len(), &codes, mcfg.clone())?;
    let trace = train(&mut model, ds, tcfg)?;
    let valid = evaluate(&model, ds, Split::Valid, tcfg);
    let test = evaluate(&model, ds, Split::Test, tcfg);
    Ok(PipelineRun { quantizer, codes, model, trace, valid, test })
}

pub const ABLATION_NAMES: [&str; 5] =
    ["no_rq_cl", "no_uc_graph", "no_u_cl", "no_his_cl", "no_mca"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRun {
    pub name: String,
    pub test: MetricsReport,
}

/// Retrains once per requested toggle (plus the untouched baseline, always
/// first). `no_rq_cl` rebuilds the codes with the quantizer's contrastive
/// weight zeroed; the other toggles reuse the baseline codes.
pub fn run_ablation(
    ds: &Dataset,
    vs: &[Vec<f32>],
    vr: &[Vec<f32>],
    qcfg: &QuantizerConfig,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    toggles: &[String],
) -> Result<Vec<AblationRun>, TrainError> {
    for t in toggles {
        if !ABLATION_NAMES.contains(&t.as_str()) {
            return Err(TrainError::UnknownToggle(t.clone()));
        }
    }
    let base = run_pipeline(ds, vs, vr, qcfg, mcfg, tcfg)?;
    let mut out = vec![AblationRun { name: "full".into(), test: base.test.clone() }];
    for name in toggles {
        let mut mc = mcfg.clone();
        let rebuilt;
        let codes: &[CodeAssignment] = match name.as_str() {
            "no_rq_cl" => {
                let qc = QuantizerConfig { lambda_rq_cl: 0.0, ..qcfg.clone() };
                let q = train_rqvae(vs, vr, &qc)?;
                rebuilt = export_codes(&q, vs, vr);
                &rebuilt
            }
            other => {
                match other {
                    "no_uc_graph" => mc.toggles.no_uc_graph = true,
                    "no_u_cl" => mc.toggles.no_u_cl = true,
                    "no_his_cl" => mc.toggles.no_his_cl = true,
                    _ => mc.toggles.no_mca = true,
                }
                &base.codes
            }
        };
        let mut model =
            Recommender::new(ds.users.len(), ds.items.len(), ds.vocab.len(), codes, mc)?;
        train(&mut model, ds, tcfg)?;
        let test = evaluate(&model, ds, Split::Test, tcfg);
        out.push(AblationRun { name: name.clone(), test });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    RqCl,
    UCl,
    HisCl,
}

impl SweepParam {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lambda_rq_cl" => Some(SweepParam::RqCl),
            "lambda_u_cl" => Some(SweepParam::UCl),
            "lambda_his_cl" => Some(SweepParam::HisCl),
            _ => None,
        }
    }
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::RqCl => "lambda_rq_cl",
            SweepParam::UCl => "lambda_u_cl",
            SweepParam::HisCl => "lambda_his_cl",
        }
    }
}

/// Reference weights the non-swept losses are pinned to.
pub const SWEEP_FIXED_RQ_CL: f64 = 1e-4;
pub const SWEEP_FIXED_U_CL: f64 = 1e-1;
pub const SWEEP_FIXED_HIS_CL: f64 = 1e-2;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub hr5: f64,
    pub ndcg5: f64,
    pub test: MetricsReport,
}

/// One full retrain per grid value, the other two contrastive weights held
/// at the reference setting. Sweeping the quantizer weight retrains stage
/// one per point; the model-side weights reuse one set of codes.
pub fn sweep(
    ds: &Dataset,
    vs: &[Vec<f32>],
    vr: &[Vec<f32>],
    qcfg: &QuantizerConfig,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    param: SweepParam,
    grid: &[f64],
) -> Result<Vec<SweepPoint>, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::EmptyGrid);
    }
    let mut qc = qcfg.clone();
    qc.lambda_rq_cl = SWEEP_FIXED_RQ_CL;
    let mut mc = mcfg.clone();
    mc.lambda_u_cl = SWEEP_FIXED_U_CL;
    mc.lambda_his_cl = SWEEP_FIXED_HIS_CL;

    let shared_codes = if param == SweepParam::RqCl {
        None
    } else {
        let q = train_rqvae(vs, vr, &qc)?;
        Some(export_codes(&q, vs, vr))
    };

    let mut out = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut mc = mc.clone();
        let rebuilt;
        let codes: &[CodeAssignment] = match param {
            SweepParam::RqCl => {
                let qc = QuantizerConfig { lambda_rq_cl: value, ..qc.clone() };
                let q = train_rqvae(vs, vr, &qc)?;
                rebuilt = export_codes(&q, vs, vr);
                &rebuilt
            }
            SweepParam::UCl => {
                mc.lambda_u_cl = value;
                shared_codes.as_ref().unwrap()
            }
            SweepParam::HisCl => {
                mc.lambda_his_cl = value;
                shared_codes.as_ref().unwrap()
            }
        };
        let mut model =
            Recommender::new(ds.users.len(), ds.items.len(), ds.vocab.len(), codes, mc)?;
        train(&mut model, ds, tcfg)?;
        let test = evaluate(&model, ds, Split::Test, tcfg);
        out.push(SweepPoint { value, hr5: test.overall.hr5, ndcg5: test.overall.ndcg5, test });
    }
    Ok(out)
}
