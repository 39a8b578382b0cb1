use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fusevl_core::config::RunConfig;
use fusevl_core::corpus::{generate_corpus, load_jsonl, save_jsonl, Lexicon, Pair};
use fusevl_core::costmodel::{cost_report, format_table, full_scale_config, StackedLayout, Variant};
use fusevl_core::downstream::{
    build_mcq, eval_mcq, gallery_corpus, make_qfvs_task, mcq_corpus, mcq_scores, qfvs_summarize, qfvs_task_f1, recall_at_k,
    resolve_mcq, retrieve, train_qfvs_head, ScoreMode,
};
use fusevl_core::fusion::layer_gradchecks;
use fusevl_core::tensor::op_suite;
use fusevl_core::trainer::{load_model, pretrain, Capabilities};
use serde_json::json;

#[derive(Parser)]
#[command(name = "fusevl", version, about = "Video-language pre-training with cross-attention fused into the backbone")]
struct Cli {
    /// JSON run configuration; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed (for evaluation commands: the sampling seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic clip-narration corpus (JSONL plus frame blob).
    GenCorpus,
    /// Pre-train; writes checkpoints and loss.csv into --out.
    Pretrain {
        /// Corpus JSONL; generated from the config when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Five-way multiple-choice accuracy.
    EvalMcq {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "dual")]
        mode: Mode,
        /// Corpus to draw items from; a fresh one is generated when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Text-to-video recall@k on a held-out gallery.
    EvalRetrieval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "dual")]
        mode: Mode,
        /// Gallery corpus; a held-out one is generated when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Query-focused summarization on synthetic long videos.
    Qfvs {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of evaluation videos.
        #[arg(long, default_value_t = 4)]
        tasks: usize,
    },
    /// Parameter and MAC comparison of the architecture variants.
    Cost {
        #[arg(long, value_enum, default_value = "all")]
        variant: VariantArg,
        #[arg(long, value_enum, default_value = "video")]
        layout: LayoutArg,
        /// Use the full-size configuration with this many fused layers.
        #[arg(long)]
        full_scale: Option<usize>,
    },
    /// Finite-difference check of every op and of the fused layers.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Dual,
    Fused,
    Ensemble,
}

impl From<Mode> for ScoreMode {
    fn from(m: Mode) -> ScoreMode {
        match m {
            Mode::Dual => ScoreMode::Dual,
            Mode::Fused => ScoreMode::Fused,
            Mode::Ensemble => ScoreMode::Ensemble,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    All,
    Dual,
    InBackbone,
    Stacked,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Video,
    Text,
    Both,
}

/// A problem with the configuration or invocation (exit code 2).
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<fusevl_core::Error>() {
            if matches!(e, fusevl_core::Error::Config { .. } | fusevl_core::Error::ConfigHash { .. }) {
                return 2;
            }
        }
    }
    1
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::from_json(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn checkpoint_path(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.paths.checkpoint.clone())
        .ok_or_else(|| usage("no checkpoint: pass --checkpoint or set paths.checkpoint"))
}

fn corpus_or(flag: Option<PathBuf>, fallback: impl FnOnce() -> fusevl_core::Result<Vec<Pair>>) -> Result<Vec<Pair>> {
    match flag {
        Some(p) => load_jsonl(&p).with_context(|| format!("loading corpus {}", p.display())),
        None => Ok(fallback()?),
    }
}

fn require(caps: Capabilities, mode: Mode) -> Result<()> {
    let needs_vtm = matches!(mode, Mode::Fused | Mode::Ensemble);
    if !caps.dual && matches!(mode, Mode::Dual | Mode::Ensemble) {
        return Err(usage(format!("checkpoint capabilities `{caps}` lack the dual embeddings this mode needs")));
    }
    if needs_vtm && !caps.vtm {
        return Err(usage(format!("checkpoint capabilities `{caps}` lack the matching head this mode needs")));
    }
    Ok(())
}

fn to_json(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json value");
    s.push('\n');
    s
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    let lexicon = Lexicon::standard();
    let out = cli.out.as_deref();
    match cli.command {
        Command::GenCorpus => {
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let path = out
                .map(Path::to_path_buf)
                .or_else(|| cfg.paths.corpus.clone())
                .unwrap_or_else(|| PathBuf::from("corpus.jsonl"));
            let pairs = generate_corpus(&cfg.corpus, &cfg.model, &lexicon, cfg.seed)?;
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            save_jsonl(&path, &pairs).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {} pairs to {}", pairs.len(), path.display());
        }
        Command::Pretrain { corpus } => {
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let pairs = corpus_or(corpus.or_else(|| cfg.paths.corpus.clone()), || {
                generate_corpus(&cfg.corpus, &cfg.model, &lexicon, cfg.seed)
            })?;
            let dir = out
                .map(Path::to_path_buf)
                .or_else(|| cfg.paths.output.clone())
                .unwrap_or_else(|| PathBuf::from("run"));
            let (trainer, art) = pretrain(&cfg, &pairs, Some(&dir))?;
            let art = art.expect("output directory given");
            if let Some(last) = trainer.state.history.last() {
                eprintln!("step {} total loss {:.6}", last.step, last.total);
            }
            eprintln!("wrote {} and {}", art.checkpoint.display(), art.loss_csv.display());
        }
        Command::EvalMcq { checkpoint, mode, corpus } => {
            let seed = cli.seed.unwrap_or(cfg.seed);
            let (model, caps) = load_model(&checkpoint_path(checkpoint, &cfg)?, &cfg)?;
            require(caps, mode)?;
            let pairs = corpus_or(corpus, || mcq_corpus(&cfg, &lexicon, seed))?;
            let items = resolve_mcq(&build_mcq(&pairs, cfg.downstream.mcq_items, seed)?, &pairs)?;
            let minmax = cfg.downstream.ensemble_minmax;
            let r = eval_mcq(&items, |it| mcq_scores(&model, it, mode.into(), minmax))?;
            let mode: ScoreMode = mode.into();
            write_output(
                out,
                &to_json(&json!({
                    "mode": mode,
                    "inter_accuracy": r.inter_accuracy,
                    "intra_accuracy": r.intra_accuracy,
                    "n_inter": r.n_inter,
                    "n_intra": r.n_intra,
                })),
            )?;
        }
        Command::EvalRetrieval { checkpoint, mode, corpus } => {
            let seed = cli.seed.unwrap_or(cfg.seed);
            let (model, caps) = load_model(&checkpoint_path(checkpoint, &cfg)?, &cfg)?;
            require(caps, mode)?;
            let pairs = corpus_or(corpus, || gallery_corpus(&cfg, &lexicon, seed))?;
            let queries: Vec<_> = pairs.iter().map(|p| &p.narration).collect();
            let gallery: Vec<_> = pairs.iter().map(|p| &p.clip).collect();
            let scores = retrieve(&model, &queries, &gallery, mode.into(), cfg.downstream.ensemble_minmax)?;
            let targets: Vec<usize> = (0..pairs.len()).collect();
            let mode: ScoreMode = mode.into();
            write_output(
                out,
                &to_json(&json!({
                    "mode": mode,
                    "gallery_size": pairs.len(),
                    "r1": recall_at_k(&scores, &targets, 1),
                    "r5": recall_at_k(&scores, &targets, 5),
                    "r10": recall_at_k(&scores, &targets, 10),
                })),
            )?;
        }
        Command::Qfvs { checkpoint, tasks } => {
            let seed = cli.seed.unwrap_or(cfg.seed);
            if tasks == 0 {
                return Err(usage("--tasks must be positive"));
            }
            let (model, _) = load_model(&checkpoint_path(checkpoint, &cfg)?, &cfg)?;
            let ds = &cfg.downstream;
            let make = |index: u64| make_qfvs_task(&cfg.model, &cfg.corpus, &lexicon, seed, index, ds.qfvs_clips, ds.qfvs_budget_fraction);
            let train: Vec<_> = (0..ds.qfvs_train_tasks as u64).map(make).collect::<fusevl_core::Result<_>>()?;
            let head = train_qfvs_head(&model, &train, ds, seed)?;
            let mut results = Vec::new();
            let mut f1_sum = 0.0;
            for k in 0..tasks as u64 {
                let task = make(1_000_000 + k)?;
                let selected = qfvs_summarize(&model, &head, &task, ds)?;
                let f = qfvs_task_f1(&task, &selected);
                f1_sum += f.f1;
                let ids = |idx: &[usize]| idx.iter().map(|&i| task.clips[i].clip_id.clone()).collect::<Vec<_>>();
                results.push(json!({
                    "concepts": [lexicon.word(task.concepts.0), lexicon.word(task.concepts.1)],
                    "selected_clip_ids": ids(&selected),
                    "reference_clip_ids": ids(&task.reference_summary),
                    "precision": f.precision,
                    "recall": f.recall,
                    "f1": f.f1,
                }));
            }
            write_output(out, &to_json(&json!({ "tasks": results, "mean_f1": f1_sum / tasks as f64 })))?;
        }
        Command::Cost { variant, layout, full_scale } => {
            let model = match full_scale {
                Some(m) => full_scale_config(m),
                None => cfg.model.clone(),
            };
            model.validate()?;
            let layout = match layout {
                LayoutArg::Video => StackedLayout::VideoStream,
                LayoutArg::Text => StackedLayout::TextStream,
                LayoutArg::Both => StackedLayout::BothStreams,
            };
            let variants: Vec<Variant> = match variant {
                VariantArg::All => Variant::ALL.to_vec(),
                VariantArg::Dual => vec![Variant::Dual],
                VariantArg::InBackbone => vec![Variant::InBackbone],
                VariantArg::Stacked => vec![Variant::Stacked],
            };
            let reports: Vec<_> = variants.iter().map(|&v| cost_report(&model, v, layout)).collect();
            write_output(out, &format_table(&reports))?;
        }
        Command::Gradcheck { points, tolerance } => {
            if points == 0 {
                return Err(usage("--points must be positive"));
            }
            let seed = cli.seed.unwrap_or(cfg.seed);
            let mut reports = op_suite(points, seed, tolerance)?;
            reports.extend(layer_gradchecks(points, seed.wrapping_add(1), tolerance)?);
            let mut text = String::new();
            for r in &reports {
                let verdict = if r.passed() { "ok  " } else { "FAIL" };
                text.push_str(&format!("{verdict} {:<28} max rel err {:.3e} over {} coords\n", r.name, r.max_rel_err, r.coords_checked));
            }
            write_output(out, &text)?;
            let failed = reports.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                bail!("{failed} of {} gradient checks failed", reports.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
