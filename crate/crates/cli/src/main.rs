//! Command-line driver for the full pipeline: dataset tooling, preference
//! summarization/embedding, quantizer training, graph construction,
//! recommender training, evaluation, figure emission, ablations, and
//! hyperparameter sweeps. Numeric settings come from a flat key=value
//! config file; every key can also be overridden with `--set key=value`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gserec_core::data::{
    generate_synthetic_dataset, group_users_by_search_count, items_path_for, load_dataset,
    save_dataset, Channel, Dataset, Split, SynthConfig,
};
use gserec_core::graph::{build_code_graph, write_edges};
use gserec_core::model::{load_model, save_model, ModelConfig, Recommender, Toggles};
use gserec_core::prefs::{
    build_preferences, load_preferences, preference_matrices, render_all_prompts,
    summarize_preferences, EmbeddingClient, HttpEmbedder, HttpSummarizer, MockEmbedder,
    MockSummarizer, PipelineConfig, ReplayEmbedder, ReplaySummarizer, SummaryClient,
};
use gserec_core::quantizer::{
    code_usage_perplexity, export_codes, load_quantizer, read_codes, save_quantizer, train_rqvae,
    QuantizerConfig, write_codes,
};
use gserec_core::report::{
    write_group_chart, write_group_csv, write_improvement_chart, write_improvement_csv,
    write_report_json, write_sweep_chart, write_sweep_csv,
};
use gserec_core::train::{
    evaluate, group_report, run_ablation, sweep, train, MetricsReport, SweepParam, SweepPoint,
    TrainConfig, ABLATION_NAMES,
};

#[derive(Parser)]
#[command(name = "gserec", version, about = "Search-enhanced sequential recommendation pipeline")]
struct Cli {
    /// Flat key=value config file (one `key = value` per line, `#` comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set t.lr=1e-4` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset JSONL path (falls back to the `data` config key).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Item table path (default: `<data stem>.items.jsonl` beside the data).
    #[arg(long)]
    items: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
    /// Preference summarization and embedding.
    Prefs {
        #[command(subcommand)]
        cmd: PrefsCmd,
    },
    /// Residual-quantizer training and code export.
    Quantize {
        #[command(subcommand)]
        cmd: QuantizeCmd,
    },
    /// User-code graph construction and inspection.
    Graph {
        #[command(subcommand)]
        cmd: GraphCmd,
    },
    /// Train the recommender from a code file.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Code file produced by `quantize export`.
        #[arg(long)]
        codes: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON file for the per-epoch trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate a trained checkpoint.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Report JSON destination (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit figure CSVs and charts from saved report JSON files.
    Report {
        /// Full-model report JSON (drives fig1_groups).
        #[arg(long)]
        full: PathBuf,
        /// Comparison report JSON (drives fig2_improvements).
        #[arg(long)]
        ablated: Option<PathBuf>,
        /// Sweep result JSON (drives fig7_<param>).
        #[arg(long)]
        sweep: Option<PathBuf>,
        /// Swept parameter name, required with --sweep.
        #[arg(long)]
        param: Option<String>,
        #[arg(long, default_value = "figures")]
        out_dir: PathBuf,
    },
    /// Retrain once per mechanism toggle and report each variant.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        /// Preference cache directory holding the embedding manifest.
        #[arg(long)]
        prefs: PathBuf,
        /// Comma-separated toggles (default: all five).
        #[arg(long)]
        toggles: Option<String>,
        #[arg(long, default_value = "ablation")]
        out_dir: PathBuf,
    },
    /// Sweep one contrastive-loss weight over a grid.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        prefs: PathBuf,
        /// One of lambda_rq_cl, lambda_u_cl, lambda_his_cl.
        #[arg(long)]
        param: String,
        /// Comma-separated grid values, e.g. `0.001,0.01,0.1`.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value = "sweep")]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Load a dataset, enforce every invariant, and print its shape.
    Validate {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Generate the deterministic synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 500)]
        items: usize,
        #[arg(long, default_value_t = 4)]
        clusters: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PrefsCmd {
    /// Produce (and cache) preference summaries for both channels.
    Summarize {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, value_enum, default_value = "mock")]
        client: ClientKind,
    },
    /// Summarize + embed + write the preference manifest.
    Embed {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, value_enum, default_value = "mock")]
        client: ClientKind,
    },
}

#[derive(Subcommand)]
enum QuantizeCmd {
    /// Train the dual residual quantizer on cached preference embeddings.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Preference cache directory (from `prefs embed`).
        #[arg(long)]
        prefs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-user code sequences from a trained quantizer.
    Export {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prefs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum GraphCmd {
    /// Build one channel's user-code graph and dump its edge list.
    Build {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        codes: PathBuf,
        #[arg(long, value_enum)]
        channel: ChannelArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print both channels' graph statistics as JSON.
    Stats {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        codes: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ClientKind {
    Http,
    Mock,
    Replay,
}

#[derive(Clone, Copy, ValueEnum)]
enum ChannelArg {
    S,
    R,
}

impl From<ChannelArg> for Channel {
    fn from(c: ChannelArg) -> Channel {
        match c {
            ChannelArg::S => Channel::Search,
            ChannelArg::R => Channel::Rec,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Every key the config file and `--set` accept.
const KNOWN_KEYS: &[&str] = &[
    "data",
    "items",
    "emb_dim",
    "truncate",
    "retries",
    "workers",
    "summary_client_id",
    "emb_client_id",
    "q.levels",
    "q.codebook_size",
    "q.code_dim",
    "q.hidden",
    "q.lambda_rq",
    "q.lambda_rq_cl",
    "q.epochs",
    "q.batch_size",
    "q.lr",
    "q.seed",
    "q.tau_init",
    "m.d",
    "m.heads",
    "m.ff_hidden",
    "m.mlp_hidden",
    "m.max_rec",
    "m.max_search",
    "m.k_layers",
    "m.lambda_u_cl",
    "m.lambda_his_cl",
    "m.lambda_reg",
    "m.tau_init",
    "m.seed",
    "m.no_uc_graph",
    "m.no_u_cl",
    "m.no_his_cl",
    "m.no_mca",
    "t.epochs",
    "t.batch_size",
    "t.lr",
    "t.patience",
    "t.num_negatives",
    "t.num_groups",
    "t.seed",
];

#[derive(Debug)]
struct Config(BTreeMap<String, String>);

impl Config {
    fn load(path: Option<&PathBuf>, sets: &[String]) -> Result<Config> {
        let mut map = BTreeMap::new();
        if let Some(p) = path {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            for (ln, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    anyhow!("{}:{}: expected `key = value`", p.display(), ln + 1)
                })?;
                insert_key(&mut map, k.trim(), v.trim())
                    .with_context(|| format!("{}:{}", p.display(), ln + 1))?;
            }
        }
        for s in sets {
            let (k, v) =
                s.split_once('=').ok_or_else(|| anyhow!("--set {s}: expected KEY=VALUE"))?;
            insert_key(&mut map, k.trim(), v.trim()).with_context(|| format!("--set {s}"))?;
        }
        Ok(Config(map))
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| anyhow!("config key `{key}` = `{v}`: {e}")),
        }
    }

    fn list(&self, key: &str, default: Vec<usize>) -> Result<Vec<usize>> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|p| p.trim().parse().map_err(|e| anyhow!("config key `{key}`: {e}")))
                .collect(),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.0.get(key).map(PathBuf::from)
    }
}

fn insert_key(map: &mut BTreeMap<String, String>, k: &str, v: &str) -> Result<()> {
    if !KNOWN_KEYS.contains(&k) {
        bail!("unknown config key `{k}` (known keys: {})", KNOWN_KEYS.join(", "));
    }
    map.insert(k.to_string(), v.to_string());
    Ok(())
}

fn quantizer_config(cfg: &Config) -> Result<QuantizerConfig> {
    let d = QuantizerConfig::default();
    Ok(QuantizerConfig {
        levels: cfg.get("q.levels", d.levels)?,
        codebook_size: cfg.get("q.codebook_size", d.codebook_size)?,
        code_dim: cfg.get("q.code_dim", d.code_dim)?,
        hidden: cfg.list("q.hidden", d.hidden)?,
        lambda_rq: cfg.get("q.lambda_rq", d.lambda_rq)?,
        lambda_rq_cl: cfg.get("q.lambda_rq_cl", d.lambda_rq_cl)?,
        epochs: cfg.get("q.epochs", d.epochs)?,
        batch_size: cfg.get("q.batch_size", d.batch_size)?,
        lr: cfg.get("q.lr", d.lr)?,
        seed: cfg.get("q.seed", d.seed)?,
        tau_init: cfg.get("q.tau_init", d.tau_init)?,
    })
}

fn model_config(cfg: &Config) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    Ok(ModelConfig {
        d: cfg.get("m.d", d.d)?,
        heads: cfg.get("m.heads", d.heads)?,
        ff_hidden: cfg.get("m.ff_hidden", d.ff_hidden)?,
        mlp_hidden: cfg.list("m.mlp_hidden", d.mlp_hidden)?,
        max_rec: cfg.get("m.max_rec", d.max_rec)?,
        max_search: cfg.get("m.max_search", d.max_search)?,
        k_layers: cfg.get("m.k_layers", d.k_layers)?,
        lambda_u_cl: cfg.get("m.lambda_u_cl", d.lambda_u_cl)?,
        lambda_his_cl: cfg.get("m.lambda_his_cl", d.lambda_his_cl)?,
        lambda_reg: cfg.get("m.lambda_reg", d.lambda_reg)?,
        tau_init: cfg.get("m.tau_init", d.tau_init)?,
        seed: cfg.get("m.seed", d.seed)?,
        toggles: Toggles {
            no_uc_graph: cfg.get("m.no_uc_graph", false)?,
            no_u_cl: cfg.get("m.no_u_cl", false)?,
            no_his_cl: cfg.get("m.no_his_cl", false)?,
            no_mca: cfg.get("m.no_mca", false)?,
        },
    })
}

fn train_config(cfg: &Config) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        epochs: cfg.get("t.epochs", d.epochs)?,
        batch_size: cfg.get("t.batch_size", d.batch_size)?,
        lr: cfg.get("t.lr", d.lr)?,
        patience: cfg.get("t.patience", d.patience)?,
        num_negatives: cfg.get("t.num_negatives", d.num_negatives)?,
        num_groups: cfg.get("t.num_groups", d.num_groups)?,
        seed: cfg.get("t.seed", d.seed)?,
    })
}

fn pipeline_config(cfg: &Config) -> Result<PipelineConfig> {
    let d = PipelineConfig::default();
    Ok(PipelineConfig {
        truncate: cfg.get("truncate", d.truncate)?,
        retries: cfg.get("retries", d.retries)?,
        workers: cfg.get("workers", d.workers)?,
    })
}

fn open_dataset(args: &DataArgs, cfg: &Config) -> Result<Dataset> {
    let data = args
        .data
        .clone()
        .or_else(|| cfg.path("data"))
        .ok_or_else(|| anyhow!("no dataset path: pass --data or set the `data` config key"))?;
    let items = args
        .items
        .clone()
        .or_else(|| cfg.path("items"))
        .unwrap_or_else(|| items_path_for(&data));
    Ok(load_dataset(&data, &items)?)
}

fn summary_client(kind: ClientKind, cfg: &Config) -> Result<Box<dyn SummaryClient>> {
    Ok(match kind {
        ClientKind::Mock => Box::new(MockSummarizer),
        ClientKind::Http => Box::new(HttpSummarizer::from_env()?),
        ClientKind::Replay => Box::new(ReplaySummarizer {
            source_id: cfg.get("summary_client_id", "mock-topwords-v1".to_string())?,
        }),
    })
}

fn embedding_client(kind: ClientKind, cfg: &Config) -> Result<Box<dyn EmbeddingClient>> {
    Ok(match kind {
        ClientKind::Mock => Box::new(MockEmbedder { dim: cfg.get("emb_dim", 64usize)? }),
        ClientKind::Http => Box::new(HttpEmbedder::from_env()?),
        ClientKind::Replay => Box::new(ReplayEmbedder {
            source_id: cfg.get("emb_client_id", "mock-hash-v1".to_string())?,
        }),
    })
}

fn load_matrices(
    dir: &Path,
    ds: &Dataset,
) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let records = load_preferences(dir, ds)?;
    Ok(preference_matrices(&records, ds.users.len())?)
}

fn print_report(report: &MetricsReport) {
    let m = &report.overall;
    println!(
        "{} split: {} rows | hr@1 {:.4} hr@5 {:.4} hr@10 {:.4} ndcg@5 {:.4} ndcg@10 {:.4}",
        report.split, m.rows, m.hr1, m.hr5, m.hr10, m.ndcg5, m.ndcg10
    );
    for (g, gm) in report.groups.iter().enumerate() {
        if gm.empty {
            println!("  group {g}: empty");
        } else {
            println!(
                "  group {g}: {} rows | hr@10 {:.4} ndcg@5 {:.4}",
                gm.rows, gm.hr10, gm.ndcg5
            );
        }
    }
    if !report.short_rows.is_empty() {
        println!("  {} rows had fewer than {} negatives", report.short_rows.len(), report.num_negatives);
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = Config::load(cli.config.as_ref(), &cli.set)?;

    match cli.cmd {
        Cmd::Data { cmd } => match cmd {
            DataCmd::Validate { data } => {
                let ds = open_dataset(&data, &cfg)?;
                let (users, items, queries, vocab) = ds.stats();
                let rec_events: usize = ds.users.iter().map(|u| u.rec.len()).sum();
                let search_events: usize = ds.users.iter().map(|u| u.search.len()).sum();
                let mut split_counts = [0usize; 3];
                for u in &ds.users {
                    for s in &u.splits {
                        match s {
                            Split::Train => split_counts[0] += 1,
                            Split::Valid => split_counts[1] += 1,
                            Split::Test => split_counts[2] += 1,
                        }
                    }
                }
                println!("users: {users}");
                println!("items: {items}");
                println!("queries: {queries}");
                println!("vocab: {vocab}");
                println!(
                    "rec events: {rec_events} (train {} / valid {} / test {})",
                    split_counts[0], split_counts[1], split_counts[2]
                );
                println!("search events: {search_events}");
                let grouping = group_users_by_search_count(&ds, 3.max(2));
                println!(
                    "sparsity groups: {} (boundaries {:?})",
                    grouping.num_groups, grouping.boundaries
                );
            }
            DataCmd::Synth { users, items, clusters, seed, out } => {
                let synth = SynthConfig { users, items, clusters, seed, ..SynthConfig::default() };
                let (ds, _) = generate_synthetic_dataset(&synth)?;
                let items_path = items_path_for(&out);
                save_dataset(&ds, &out, &items_path)?;
                println!(
                    "wrote {} users / {} items to {} and {}",
                    ds.users.len(),
                    ds.items.len(),
                    out.display(),
                    items_path.display()
                );
            }
        },
        Cmd::Prefs { cmd } => match cmd {
            PrefsCmd::Summarize { data, cache, client } => {
                let ds = open_dataset(&data, &cfg)?;
                let pcfg = pipeline_config(&cfg)?;
                let sc = summary_client(client, &cfg)?;
                fs::create_dir_all(&cache)?;
                let mut prompts = render_all_prompts(&ds, Channel::Search, pcfg.truncate);
                prompts.extend(render_all_prompts(&ds, Channel::Rec, pcfg.truncate));
                let out = summarize_preferences(sc.as_ref(), &ds, &prompts, &cache, &pcfg)?;
                println!(
                    "summaries: {} ok, {} failed ({} client calls, {} cache hits)",
                    out.records.len(),
                    out.failures.len(),
                    out.stats.client_calls,
                    out.stats.cache_hits
                );
            }
            PrefsCmd::Embed { data, cache, client } => {
                let ds = open_dataset(&data, &cfg)?;
                let pcfg = pipeline_config(&cfg)?;
                let sc = summary_client(client, &cfg)?;
                let ec = embedding_client(client, &cfg)?;
                fs::create_dir_all(&cache)?;
                let out = build_preferences(&ds, sc.as_ref(), ec.as_ref(), &cache, &pcfg)?;
                let dim = out.records.first().map(|r| r.embedding.len()).unwrap_or(0);
                println!(
                    "embeddings: {} ok (dim {dim}), {} failed ({} client calls, {} cache hits)",
                    out.records.len(),
                    out.failures.len(),
                    out.stats.client_calls,
                    out.stats.cache_hits
                );
                println!("manifest: {}", cache.join("prefs.jsonl").display());
            }
        },
        Cmd::Quantize { cmd } => match cmd {
            QuantizeCmd::Train { data, prefs, out } => {
                let ds = open_dataset(&data, &cfg)?;
                let (vs, vr) = load_matrices(&prefs, &ds)?;
                let qcfg = quantizer_config(&cfg)?;
                let q = train_rqvae(&vs, &vr, &qcfg)?;
                if let Some(last) = q.trace.last() {
                    println!(
                        "epoch {}: recon {:.5} rq {:.5} total {:.5}",
                        last.epoch, last.recon, last.rq, last.total
                    );
                }
                save_quantizer(&out, &q)?;
                println!("checkpoint: {}", out.display());
            }
            QuantizeCmd::Export { data, ckpt, prefs, out } => {
                let ds = open_dataset(&data, &cfg)?;
                let (vs, vr) = load_matrices(&prefs, &ds)?;
                let q = load_quantizer(&ckpt)?;
                let codes = export_codes(&q, &vs, &vr);
                write_codes(&out, &codes)?;
                for ch in Channel::BOTH {
                    for level in 0..q.config.levels {
                        let p = code_usage_perplexity(&codes, ch, level, q.config.codebook_size);
                        println!("{} level {level}: perplexity {p:.2}", ch.name());
                    }
                }
                println!("codes: {} rows -> {}", codes.len(), out.display());
            }
        },
        Cmd::Graph { cmd } => match cmd {
            GraphCmd::Build { data, codes, channel, out } => {
                let ds = open_dataset(&data, &cfg)?;
                let assignments = read_codes(&codes)?;
                let g = build_code_graph(&assignments, ds.users.len(), channel.into())?;
                write_edges(&out, &g)?;
                println!("{}", serde_json::to_string_pretty(&g.stats())?);
                println!("edges: {}", out.display());
            }
            GraphCmd::Stats { data, codes } => {
                let ds = open_dataset(&data, &cfg)?;
                let assignments = read_codes(&codes)?;
                let mut obj = serde_json::Map::new();
                for ch in Channel::BOTH {
                    let g = build_code_graph(&assignments, ds.users.len(), ch)?;
                    obj.insert(ch.name().to_string(), serde_json::to_value(g.stats())?);
                }
                println!("{}", serde_json::to_string_pretty(&serde_json::Value::Object(obj))?);
            }
        },
        Cmd::Train { data, codes, out, trace } => {
            let ds = open_dataset(&data, &cfg)?;
            let assignments = read_codes(&codes)?;
            let mcfg = model_config(&cfg)?;
            let tcfg = train_config(&cfg)?;
            let mut model = Recommender::new(
                ds.users.len(),
                ds.items.len(),
                ds.vocab.len(),
                &assignments,
                mcfg,
            )?;
            let result = train(&mut model, &ds, &tcfg)?;
            for e in &result.epochs {
                println!(
                    "epoch {}: loss {:.5} bce {:.5} valid ndcg@5 {:.4}",
                    e.epoch, e.loss, e.bce, e.valid_metric
                );
            }
            println!(
                "best epoch {} (valid ndcg@5 {:.4})",
                result.best_epoch, result.best_metric
            );
            save_model(&out, &model)?;
            println!("checkpoint: {}", out.display());
            if let Some(tp) = trace {
                fs::write(&tp, serde_json::to_string_pretty(&result)?)?;
                println!("trace: {}", tp.display());
            }
        }
        Cmd::Eval { data, ckpt, split, out } => {
            let ds = open_dataset(&data, &cfg)?;
            let model = load_model(&ckpt)?;
            let tcfg = train_config(&cfg)?;
            let report = evaluate(&model, &ds, split.into(), &tcfg);
            print_report(&report);
            match out {
                Some(p) => {
                    write_report_json(&p, &report)?;
                    println!("report: {}", p.display());
                }
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Cmd::Report { full, ablated, sweep, param, out_dir } => {
            fs::create_dir_all(&out_dir)?;
            let full_report: MetricsReport = serde_json::from_str(
                &fs::read_to_string(&full)
                    .with_context(|| format!("reading {}", full.display()))?,
            )?;
            let p1 = out_dir.join("fig1_groups.csv");
            write_group_csv(&p1, &full_report)?;
            write_group_chart(&out_dir.join("fig1_groups.svg"), &full_report)?;
            println!("wrote {}", p1.display());
            if let Some(ab) = ablated {
                let ab_report: MetricsReport = serde_json::from_str(
                    &fs::read_to_string(&ab)
                        .with_context(|| format!("reading {}", ab.display()))?,
                )?;
                let imps = group_report(&full_report, &ab_report);
                let p2 = out_dir.join("fig2_improvements.csv");
                write_improvement_csv(&p2, &imps)?;
                write_improvement_chart(&out_dir.join("fig2_improvements.svg"), &imps)?;
                println!("wrote {}", p2.display());
            }
            if let Some(sw) = sweep {
                let name = param
                    .ok_or_else(|| anyhow!("--param is required with --sweep"))?;
                let points: Vec<SweepPoint> = serde_json::from_str(
                    &fs::read_to_string(&sw)
                        .with_context(|| format!("reading {}", sw.display()))?,
                )?;
                let p7 = out_dir.join(format!("fig7_{name}.csv"));
                write_sweep_csv(&p7, &points)?;
                write_sweep_chart(&out_dir.join(format!("fig7_{name}.svg")), &name, &points)?;
                println!("wrote {}", p7.display());
            }
        }
        Cmd::Ablate { data, prefs, toggles, out_dir } => {
            let ds = open_dataset(&data, &cfg)?;
            let (vs, vr) = load_matrices(&prefs, &ds)?;
            let qcfg = quantizer_config(&cfg)?;
            let mcfg = model_config(&cfg)?;
            let tcfg = train_config(&cfg)?;
            let names: Vec<String> = match toggles {
                Some(t) => t.split(',').map(|s| s.trim().to_string()).collect(),
                None => ABLATION_NAMES.iter().map(|s| s.to_string()).collect(),
            };
            fs::create_dir_all(&out_dir)?;
            let runs = run_ablation(&ds, &vs, &vr, &qcfg, &mcfg, &tcfg, &names)?;
            for run in &runs {
                let path = out_dir.join(format!("report_{}.json", run.name));
                write_report_json(&path, &run.test)?;
                println!(
                    "{:>12}: hr@10 {:.4} ndcg@5 {:.4} -> {}",
                    run.name,
                    run.test.overall.hr10,
                    run.test.overall.ndcg5,
                    path.display()
                );
            }
            write_group_csv(&out_dir.join("fig1_groups.csv"), &runs[0].test)?;
            write_group_chart(&out_dir.join("fig1_groups.svg"), &runs[0].test)?;
            let against = runs
                .iter()
                .find(|r| r.name == "no_uc_graph")
                .or_else(|| runs.get(1));
            if let Some(variant) = against {
                let imps = group_report(&runs[0].test, &variant.test);
                write_improvement_csv(&out_dir.join("fig2_improvements.csv"), &imps)?;
                write_improvement_chart(&out_dir.join("fig2_improvements.svg"), &imps)?;
                println!("fig2 compares full vs {}", variant.name);
            }
        }
        Cmd::Sweep { data, prefs, param, grid, out_dir } => {
            let ds = open_dataset(&data, &cfg)?;
            let (vs, vr) = load_matrices(&prefs, &ds)?;
            let qcfg = quantizer_config(&cfg)?;
            let mcfg = model_config(&cfg)?;
            let tcfg = train_config(&cfg)?;
            let sp = SweepParam::parse(&param).ok_or_else(|| {
                anyhow!("unknown sweep param `{param}` (lambda_rq_cl, lambda_u_cl, lambda_his_cl)")
            })?;
            let values: Vec<f64> = grid
                .split(',')
                .map(|s| s.trim().parse().map_err(|e| anyhow!("grid value `{s}`: {e}")))
                .collect::<Result<_>>()?;
            fs::create_dir_all(&out_dir)?;
            let points = sweep(&ds, &vs, &vr, &qcfg, &mcfg, &tcfg, sp, &values)?;
            for p in &points {
                println!("{} = {}: hr@5 {:.4} ndcg@5 {:.4}", sp.name(), p.value, p.hr5, p.ndcg5);
            }
            fs::write(
                out_dir.join(format!("sweep_{}.json", sp.name())),
                serde_json::to_string_pretty(&points)?,
            )?;
            write_sweep_csv(&out_dir.join(format!("fig7_{}.csv", sp.name())), &points)?;
            write_sweep_chart(
                &out_dir.join(format!("fig7_{}.svg", sp.name())),
                sp.name(),
                &points,
            )?;
            println!("sweep files in {}", out_dir.display());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(file: Option<&str>, sets: &[&str]) -> Result<Config> {
        let dir = tempfile::tempdir().unwrap();
        let path = file.map(|text| {
            let p = dir.path().join("gserec.conf");
            fs::write(&p, text).unwrap();
            p
        });
        let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
        Config::load(path.as_ref(), &sets)
    }

    #[test]
    fn file_keys_parse_and_set_overrides_win() {
        let cfg = load(
            Some("# comment line\nq.levels = 5 # trailing comment\n\nt.lr = 0.5\n"),
            &["t.lr=0.25"],
        )
        .unwrap();
        assert_eq!(quantizer_config(&cfg).unwrap().levels, 5);
        assert_eq!(train_config(&cfg).unwrap().lr, 0.25);
    }

    #[test]
    fn unset_keys_fall_back_to_defaults() {
        let cfg = load(None, &[]).unwrap();
        assert_eq!(train_config(&cfg).unwrap().epochs, TrainConfig::default().epochs);
        assert_eq!(model_config(&cfg).unwrap().toggles, Toggles::default());
    }

    #[test]
    fn list_and_bool_values_parse() {
        let cfg = load(None, &["m.mlp_hidden=64,32", "m.no_uc_graph=true"]).unwrap();
        let mc = model_config(&cfg).unwrap();
        assert_eq!(mc.mlp_hidden, vec![64, 32]);
        assert!(mc.toggles.no_uc_graph);
        assert!(!mc.toggles.no_mca);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = load(Some("q.levles = 2\n"), &[]).unwrap_err();
        assert!(format!("{err:#}").contains("unknown config key `q.levles`"), "{err:#}");
    }

    #[test]
    fn malformed_line_reports_its_location() {
        let err = load(Some("q.levels = 2\nnot a pair\n"), &[]).unwrap_err();
        assert!(format!("{err:#}").contains(":2"), "{err:#}");
    }

    #[test]
    fn malformed_set_is_rejected() {
        let err = load(None, &["t.lr"]).unwrap_err();
        assert!(format!("{err:#}").contains("expected KEY=VALUE"), "{err:#}");
    }

    #[test]
    fn bad_value_names_the_key() {
        let cfg = load(None, &["t.epochs=abc"]).unwrap();
        let err = train_config(&cfg).unwrap_err();
        assert!(format!("{err:#}").contains("t.epochs"), "{err:#}");
    }
}
