use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bifusion::checkpoint::{Checkpoint, CheckpointKind};
use bifusion::config::{RunConfig, KEYS};
use bifusion::data::{Condition, DatasetIndex, Entry};
use bifusion::eval::{rank_k_table, EmbeddingSet};
use bifusion::extract::{EmbedMode, LoadedModel};
use bifusion::graph::{adjacency_csv, build_pyramid_graph, Scale};
use bifusion::gradsuite;
use bifusion::train::{log_csv, pretrain_msgg, pretrain_sil, train_global, LogRow, TrainPool};
use bifusion::Error;
use clap::{Args, Parser, Subcommand};

const GEN_KEYS: &[&str] = &["seed", "ids", "frames", "views", "nm_walks", "bg_walks", "cl_walks"];
const SKELETON_KEYS: &[&str] =
    &["normalize", "channels", "temporal_kernel", "blocks", "strategy", "self_loop", "semp", "pyramid"];
const SIL_KEYS: &[&str] = &["sil_channels", "parts", "micro_window"];
const BATCH_KEYS: &[&str] =
    &["seed", "gallery_nm", "batch_p", "batch_k", "batch_frames", "margin", "momentum", "weight_decay"];
const PRETRAIN_KEYS: &[&str] = &["loss_weights", "pretrain_lr", "pretrain_iters", "pretrain_milestones"];
const SIL_TRAIN_KEYS: &[&str] = &["sil_lr", "sil_iters", "sil_milestones"];
const GLOBAL_KEYS: &[&str] = &[
    "compact_dim",
    "dropout",
    "fused_dim",
    "global_lr_pretrained",
    "global_lr_new",
    "global_iters",
    "global_milestones",
    "sil_loss_on",
];
const EVAL_KEYS: &[&str] = &["gallery_nm", "rank_k", "exclude_identical_view", "eval_frames"];
const GRAPH_KEYS: &[&str] = &["strategy", "self_loop"];

#[derive(Parser)]
#[command(name = "bifusion", version, about = "Skeleton and silhouette gait recognition at desk scale")]
struct Cli {
    /// Worker threads for generation and embedding (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Leave timings out of logs so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set batch_p=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset directory.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ids: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the skeleton network.
    PretrainMsgg {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Pretrain the silhouette encoder.
    PretrainSil {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the fused model from both pretrained checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        msgg: PathBuf,
        #[arg(long)]
        sil: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Rank-k retrieval table of a checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// bifusion, msgg_only, silhouette_only or msgg_branches (default depends on the checkpoint).
        #[arg(long)]
        mode: Option<EmbedMode>,
        /// Restrict probes to one condition (NM, BG, CL).
        #[arg(long)]
        probe: Option<Condition>,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every kernel and small assembled models.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump normalized adjacency subsets as CSV.
    InspectGraph {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// joints, limbs, bodyparts; all scales when omitted.
        #[arg(long)]
        scale: Option<Scale>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-sequence embeddings as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mode: Option<EmbedMode>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn key_help(groups: &[&[&str]]) -> String {
    let mut keys: Vec<&str> = Vec::new();
    for g in groups {
        for k in *g {
            if !keys.contains(k) {
                keys.push(k);
            }
        }
    }
    let mut s = String::from("Config keys read (set with --config FILE or --set KEY=VALUE):\n");
    for k in keys {
        let desc = KEYS.iter().find(|(name, _)| *name == k).map(|(_, d)| *d).unwrap_or("");
        let default = RunConfig::default().get(k).unwrap_or_default();
        s.push_str(&format!("  {k:<24} {desc} [default: {default}]\n"));
    }
    s
}

fn command() -> clap::Command {
    use clap::CommandFactory;
    let help: &[(&str, &[&[&str]])] = &[
        ("gen", &[GEN_KEYS]),
        ("pretrain-msgg", &[BATCH_KEYS, SKELETON_KEYS, PRETRAIN_KEYS]),
        ("pretrain-sil", &[BATCH_KEYS, &["normalize"], SIL_KEYS, SIL_TRAIN_KEYS]),
        ("train", &[BATCH_KEYS, SKELETON_KEYS, SIL_KEYS, GLOBAL_KEYS]),
        ("eval", &[EVAL_KEYS]),
        ("gradcheck", &[]),
        ("inspect-graph", &[GRAPH_KEYS]),
        ("export-embeddings", &[&["eval_frames"]]),
    ];
    let mut cmd = Cli::command();
    for (name, groups) in help {
        let text = if groups.is_empty() { "Reads no config keys.".to_string() } else { key_help(groups) };
        cmd = cmd.mut_subcommand(*name, |c| c.after_help(text));
    }
    cmd
}

struct Ctx {
    deterministic: bool,
    start: Instant,
}

impl Ctx {
    fn log(&self, msg: &str) {
        if self.deterministic {
            eprintln!("{msg}");
        } else {
            eprintln!("[{:8.1}s] {msg}", self.start.elapsed().as_secs_f64());
        }
    }

    fn row(&self, stage: &str, r: &LogRow) {
        if r.iteration % 10 == 0 {
            self.log(&format!(
                "{stage} iter {} loss {:.5} sil_tp {:.5} ske_tp {:.5} ske_ce {:.5}",
                r.iteration, r.loss_total, r.loss_sil_tp, r.loss_ske_tp, r.loss_ske_ce
            ));
        }
    }
}

fn resolve(args: &ConfigArgs, flags: &[(&str, Option<String>)], ctx: &Ctx) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override '{kv}' is not KEY=VALUE")))?;
        cfg.set(k.trim(), v)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    ctx.log("resolved config:");
    for line in cfg.to_text().lines() {
        ctx.log(&format!("  {line}"));
    }
    Ok(cfg)
}

fn write_out(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn save_checkpoint(ck: &Checkpoint, out: &Path, rows: &[LogRow], log: Option<&Path>) -> Result<(), Error> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    ck.save(out)?;
    if let Some(log) = log {
        write_out(Some(log), &log_csv(rows))?;
    }
    Ok(())
}

fn load_model(path: &Path, mode: Option<EmbedMode>) -> Result<(LoadedModel, EmbedMode), Error> {
    let ck = Checkpoint::load(path)?;
    let model = LoadedModel::from_checkpoint(&ck)?;
    let mode = mode.unwrap_or_else(|| EmbedMode::default_for(ck.kind));
    if !model.supports(mode) {
        return Err(Error::Load(format!("a {:?} checkpoint cannot produce {mode} embeddings", ck.kind)));
    }
    Ok((model, mode))
}

fn is_gallery(e: &Entry, gallery_nm: usize) -> bool {
    e.condition == Condition::Nm && e.seq <= gallery_nm
}

fn run(cli: Cli) -> Result<(), Error> {
    let ctx = Ctx { deterministic: cli.deterministic, start: Instant::now() };
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Gen { cfg, ids, seed, out } => {
            let cfg = resolve(&cfg, &[("ids", ids.map(|v| v.to_string())), ("seed", seed.map(|v| v.to_string()))], &ctx)?;
            let index = cfg.gen_config().write(&out)?;
            ctx.log(&format!("wrote {} sequences to {}", index.entries.len(), out.display()));
        }
        Command::PretrainMsgg { cfg, data, out, log } => {
            let cfg = resolve(&cfg, &[], &ctx)?;
            let pool = TrainPool::from_index(&DatasetIndex::open(&data)?, &cfg)?;
            let (ck, rows) = pretrain_msgg(&pool, &cfg, |r| ctx.row("pretrain-msgg", r))?;
            save_checkpoint(&ck, &out, &rows, log.as_deref())?;
            ctx.log(&format!("saved {}", out.display()));
        }
        Command::PretrainSil { cfg, data, out, log } => {
            let cfg = resolve(&cfg, &[], &ctx)?;
            let pool = TrainPool::from_index(&DatasetIndex::open(&data)?, &cfg)?;
            let (ck, rows) = pretrain_sil(&pool, &cfg, |r| ctx.row("pretrain-sil", r))?;
            save_checkpoint(&ck, &out, &rows, log.as_deref())?;
            ctx.log(&format!("saved {}", out.display()));
        }
        Command::Train { cfg, data, msgg, sil, out, log } => {
            let cfg = resolve(&cfg, &[], &ctx)?;
            let msgg = Checkpoint::load(&msgg)?.expect_kind(CheckpointKind::Msgg)?;
            let sil = Checkpoint::load(&sil)?.expect_kind(CheckpointKind::Silhouette)?;
            let pool = TrainPool::from_index(&DatasetIndex::open(&data)?, &cfg)?;
            let (ck, rows) = train_global(&pool, &cfg, &msgg, &sil, |r| ctx.row("train", r))?;
            save_checkpoint(&ck, &out, &rows, log.as_deref())?;
            ctx.log(&format!("saved {}", out.display()));
        }
        Command::Eval { cfg, data, checkpoint, mode, probe, out } => {
            let cfg = resolve(&cfg, &[], &ctx)?;
            let index = DatasetIndex::open(&data)?;
            let (model, mode) = load_model(&checkpoint, mode)?;
            let entries: Vec<Entry> = index
                .entries
                .iter()
                .filter(|e| is_gallery(e, cfg.gallery_nm) || probe.is_none_or(|c| c == e.condition))
                .copied()
                .collect();
            let set = model.embed_index(mode, &index, &entries, cfg.eval_frames)?;
            let (gallery, probes) = set.split_gallery(cfg.gallery_nm);
            if probes.items.is_empty() {
                return Err(Error::Protocol("no probe sequences selected".into()));
            }
            let table = rank_k_table(&gallery, &probes, cfg.rank_k, cfg.exclude_identical_view)?;
            write_out(out.as_deref(), &table.to_csv())?;
            for c in table.conditions() {
                ctx.log(&format!("{mode} rank-{} {c} mean {:.4}", cfg.rank_k, table.mean(c).unwrap_or(0.0)));
            }
        }
        Command::Gradcheck { out } => {
            let results = gradsuite::run_all()?;
            for r in &results {
                if !ctx.deterministic {
                    ctx.log(&format!("{} {:.3e} ({:.2}s)", r.name, r.error, r.seconds));
                }
            }
            write_out(out.as_deref(), &gradsuite::report_csv(&results))?;
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::Contract(format!(
                    "gradient check above {:e} in: {}",
                    gradsuite::TOLERANCE,
                    failed.join(", ")
                )));
            }
        }
        Command::InspectGraph { cfg, scale, out } => {
            let cfg = resolve(&cfg, &[], &ctx)?;
            let pyramid = build_pyramid_graph();
            let scales = scale.map(|s| vec![s]).unwrap_or_else(|| Scale::ALL.to_vec());
            let mut text = String::new();
            for s in scales {
                text.push_str(&adjacency_csv(&pyramid, s, cfg.strategy, cfg.self_loop)?);
            }
            write_out(out.as_deref(), &text)?;
        }
        Command::ExportEmbeddings { cfg, data, checkpoint, mode, out } => {
            let cfg = resolve(&cfg, &[], &ctx)?;
            let index = DatasetIndex::open(&data)?;
            let (model, mode) = load_model(&checkpoint, mode)?;
            let set = model.embed_index(mode, &index, &index.entries, cfg.eval_frames)?;
            write_out(Some(&out), &embeddings_csv(&set))?;
            ctx.log(&format!("wrote {} {mode} embeddings to {}", set.items.len(), out.display()));
        }
    }
    Ok(())
}

/// One row per (sequence, part): identity, condition, walk, view, part index, values.
fn embeddings_csv(set: &EmbeddingSet) -> String {
    let mut s = String::from("id,condition,seq,view,part,values\n");
    for e in &set.items {
        let d = e.dim();
        for p in 0..e.parts {
            let vals: Vec<String> = e.data[p * d..(p + 1) * d].iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("{},{},{},{},{},{}\n", e.id, e.condition, e.seq, e.view, p, vals.join(" ")));
        }
    }
    s
}

/// Keeps freed training buffers mapped so later steps skip page faults.
fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

fn error_line(kind: &str, msg: &str) -> String {
    format!("error kind={kind} message={:?}", msg.trim())
}

fn main() -> ExitCode {
    tune_allocator();
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    let cli = match <Cli as clap::FromArgMatches>::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}", error_line("usage", &e.to_string()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
