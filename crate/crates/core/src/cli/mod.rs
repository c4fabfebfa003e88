//! The `alibi-surgeon` command line.
//!
//! Verbs: `pretrain` (induce collapse), `diagnose` (classify every head),
//! `surgery` (reinit + masked retraining, single pass, chainable),
//! `drift` (compare checkpoints), `eval` (perplexity per split), and
//! `report` (regenerate figures from existing artifacts).
//!
//! Exit codes: 0 ok, 1 runtime failure, 2 usage, 3 property failure
//! (collapse induction not achieved).

use crate::diagnostics::{
    self, column_drift, drift, drift_csv, DiagnosisReport, ReportIdentity, Thresholds, Zone,
};
use crate::model::{
    checkpoint_id, load_checkpoint, save_checkpoint, HeadSet, ModelConfig,
};
use crate::report::{config_hash, sha256_hex, svg, RunManifest};
use crate::surgery::{
    build_masks, negative_control, perform_surgery, recovered_count, select_targets, Policy,
    SurgeryOptions,
};
use crate::training::{
    builtin_corpus_text, builtin_prompt_text, eval_trace_csv, loss_trace_csv, perplexity,
    pretrain_to_collapse, tokenize, train, Corpus, TrainConfig,
};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

pub const EXIT_OK: u8 = 0;
pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_PROPERTY: u8 = 3;

/// Artifact root when `--out-dir` is not given.
pub const HOME_ENV: &str = "ALIBI_SURGEON_HOME";

#[derive(Debug)]
enum CliError {
    Runtime(String),
    Property(String),
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(
    name = "alibi-surgeon",
    version,
    about = "Diagnose and surgically repair BOS-sink attention heads in a toy ALiBi transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a toy model until slope-ordered BOS collapse emerges
    Pretrain(PretrainArgs),
    /// Classify every head of a checkpoint and emit report + figures
    Diagnose(DiagnoseArgs),
    /// Reinitialize targeted heads and retrain them under gradient masks
    Surgery(SurgeryArgs),
    /// Quantify BOS-mass drift between a stock and post reports
    Drift(DriftArgs),
    /// Perplexity of a checkpoint on one or more text files
    Eval(EvalArgs),
    /// Regenerate SVG figures from existing JSON/CSV artifacts
    Report(ReportArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// JSON file with {"model": ..., "train": ...}
    #[arg(long)]
    config: PathBuf,
    /// Corpus file (raw bytes / newline text); bundled corpus if omitted
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Diagnostic prompt file; bundled prompt if omitted
    #[arg(long)]
    prompt: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Overrides the seed in the config file
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prompt: Option<PathBuf>,
    #[arg(long, default_value_t = 0.50)]
    healthy_max: f32,
    #[arg(long, default_value_t = 0.95)]
    dead_min: f32,
    #[arg(long, default_value_t = 0.50)]
    low_entropy_max: f32,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SurgeryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// band | column | residual | explicit
    #[arg(long)]
    policy: String,
    /// Head-index column for --policy column
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    layer_from: Option<usize>,
    #[arg(long)]
    layer_to: Option<usize>,
    /// Explicit band bounds; auto-detected when omitted
    #[arg(long)]
    band_from: Option<usize>,
    #[arg(long)]
    band_to: Option<usize>,
    /// Explicit targets as "layer:head,layer:head,..."
    #[arg(long)]
    targets: Option<String>,
    /// JSON TrainConfig; surgical defaults if omitted
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Corpus file; bundled corpus if omitted
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<PathBuf>,
    /// Mark this run as pass 2, chained from --from-manifest
    #[arg(long)]
    pass2: bool,
    /// Manifest of the run this one chains from (required with --pass2)
    #[arg(long)]
    from_manifest: Option<PathBuf>,
    /// Control arm: masks without reinitialization
    #[arg(long)]
    negative_control: bool,
    /// Also train the shared attn_out bias of targeted layers
    #[arg(long)]
    train_attn_out_bias: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct DriftArgs {
    #[arg(long)]
    stock: PathBuf,
    /// Post-surgical report(s), in checkpoint order
    #[arg(long, required = true, num_args = 1..)]
    post: Vec<PathBuf>,
    #[arg(long, default_value_t = diagnostics::DRIFT_THRESHOLD)]
    threshold: f32,
    /// Band override; the stock report's band when omitted
    #[arg(long)]
    band_from: Option<usize>,
    #[arg(long)]
    band_to: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Text files; each is reported as its own split
    #[arg(long, required = true, num_args = 1..)]
    text: Vec<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Diagnosis report JSON to re-render
    #[arg(long)]
    diagnosis: Option<PathBuf>,
    /// Drift CSV to re-render as a |delta| heatmap
    #[arg(long)]
    drift_csv: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Parse and dispatch. Returns the process exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let recorded: Vec<String> = argv
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with success code
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a, recorded),
        Command::Diagnose(a) => cmd_diagnose(a, recorded),
        Command::Surgery(a) => cmd_surgery(a, recorded),
        Command::Drift(a) => cmd_drift(a, recorded),
        Command::Eval(a) => cmd_eval(a, recorded),
        Command::Report(a) => cmd_report(a, recorded),
    };
    match outcome {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(CliError::Property(msg)) => {
            eprintln!("property failure: {msg}");
            ExitCode::from(EXIT_PROPERTY)
        }
    }
}

fn out_dir_for(cmd: &str, flag: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = match flag {
        Some(d) => d.clone(),
        None => {
            let root = std::env::var_os(HOME_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("artifacts"));
            root.join(cmd)
        }
    };
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_prompt(
    path: &Option<PathBuf>,
    config: &ModelConfig,
) -> Result<(Vec<usize>, String), CliError> {
    let bytes = match path {
        Some(p) => read_file(p)?,
        None => builtin_prompt_text().as_bytes().to_vec(),
    };
    let sha = sha256_hex(&bytes)[..16].to_string();
    let mut tokens = tokenize(&bytes);
    tokens.truncate(config.max_seq_len);
    Ok((tokens, sha))
}

fn load_corpus(path: &Option<PathBuf>, seq_len: usize) -> Result<Corpus, CliError> {
    let (bytes, provenance) = match path {
        Some(p) => (read_file(p)?, p.display().to_string()),
        None => (
            builtin_corpus_text().as_bytes().to_vec(),
            "builtin".to_string(),
        ),
    };
    Corpus::build(&bytes, seq_len, 10, &provenance).map_err(CliError::from)
}

fn bos_grid(report: &DiagnosisReport) -> Vec<Vec<f32>> {
    report
        .grid
        .iter()
        .map(|row| row.iter().map(|c| c.bos).collect())
        .collect()
}

fn write_diagnosis_artifacts(dir: &Path, stem: &str, report: &DiagnosisReport) -> CliResult {
    let json = serde_json::to_string_pretty(report).map_err(CliError::from)?;
    write_file(&dir.join(format!("{stem}.json")), json.as_bytes())?;
    let heat = svg::heatmap_svg(
        &bos_grid(report),
        report.band,
        &format!("BOS mass by layer x head ({stem})"),
        1.0,
    );
    write_file(&dir.join(format!("{stem}_heatmap.svg")), heat.as_bytes())?;
    let masses: Vec<f32> = report.heads().map(|(_, c)| c.bos).collect();
    let hist = svg::histogram_svg(&masses, 10, &format!("BOS mass distribution ({stem})"));
    write_file(&dir.join(format!("{stem}_histogram.svg")), hist.as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PretrainFileConfig {
    #[serde(default)]
    model: ModelConfig,
    #[serde(default = "TrainConfig::pretrain_default")]
    train: TrainConfig,
}

fn cmd_pretrain(args: PretrainArgs, recorded: Vec<String>) -> CliResult {
    let dir = out_dir_for("pretrain", &args.out_dir)?;
    let bytes = read_file(&args.config)?;
    let mut file_cfg: PretrainFileConfig =
        serde_json::from_slice(&bytes).map_err(|e| CliError::Runtime(format!("config: {e}")))?;
    if let Some(seed) = args.seed {
        file_cfg.train.seed = seed;
    }
    file_cfg.model.validate().map_err(CliError::from)?;

    let mut manifest = RunManifest::new(
        "pretrain",
        recorded,
        config_hash(&file_cfg),
        file_cfg.train.seed,
    );

    let corpus = load_corpus(&args.corpus, file_cfg.train.seq_len)?;
    let (prompt_tokens, prompt_sha) = load_prompt(&args.prompt, &file_cfg.model)?;

    let outcome = pretrain_to_collapse(&file_cfg.model, &corpus, &file_cfg.train, &prompt_tokens)
        .map_err(CliError::from)?;

    let ckpt_path = dir.join("stock.ckpt");
    save_checkpoint(
        &ckpt_path,
        &outcome.weights,
        &file_cfg.model,
        file_cfg.train.seed,
    )
    .map_err(CliError::from)?;
    let ckpt_id = checkpoint_id(&ckpt_path).map_err(CliError::from)?;

    let mut report = outcome.report.clone();
    report.checkpoint_id = ckpt_id.clone();
    report.prompt_sha = prompt_sha;
    write_diagnosis_artifacts(&dir, "stock_report", &report)?;
    write_file(
        &dir.join("loss_trace.csv"),
        loss_trace_csv(&outcome.train.loss_trace).as_bytes(),
    )?;
    write_file(
        &dir.join("eval_trace.csv"),
        eval_trace_csv(&outcome.train.eval_trace).as_bytes(),
    )?;

    manifest.output_checkpoint = Some(ckpt_id);
    manifest.finish();
    manifest
        .save(&dir.join("pretrain.manifest.json"))
        .map_err(CliError::from)?;

    println!(
        "pretrained {} steps, head-index/BOS-mass correlation {:+.3}, band {:?}",
        outcome.train.steps_run, outcome.correlation, report.band
    );
    println!(
        "counts: healthy {} bos_sink {} dead {} low_entropy {}",
        report.counts.healthy,
        report.counts.bos_sink,
        report.counts.dead,
        report.counts.low_entropy
    );
    if !outcome.collapse_induced() {
        return Err(CliError::Property(format!(
            "collapse not induced: correlation {:+.3} <= 0 after {} steps",
            outcome.correlation, outcome.train.steps_run
        )));
    }
    println!("stock checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs, recorded: Vec<String>) -> CliResult {
    let dir = out_dir_for("diagnose", &args.out_dir)?;
    let (config, weights, seed) = load_checkpoint(&args.checkpoint).map_err(CliError::from)?;
    let ckpt_id = checkpoint_id(&args.checkpoint).map_err(CliError::from)?;
    let (tokens, prompt_sha) = load_prompt(&args.prompt, &config)?;
    let thresholds = Thresholds {
        healthy_max: args.healthy_max,
        dead_min: args.dead_min,
        low_entropy_max: args.low_entropy_max,
    };

    let mut manifest = RunManifest::new("diagnose", recorded, config_hash(&config), seed);
    manifest.input_checkpoint = Some(ckpt_id.clone());

    let report = diagnostics::diagnose(
        &weights,
        &config,
        &tokens,
        &thresholds,
        ReportIdentity {
            checkpoint_id: ckpt_id,
            prompt_sha,
        },
    )
    .map_err(CliError::from)?;

    write_diagnosis_artifacts(&dir, "diagnosis", &report)?;
    manifest.finish();
    manifest
        .save(&dir.join("diagnose.manifest.json"))
        .map_err(CliError::from)?;

    println!(
        "healthy {} bos_sink {} dead {} low_entropy {} (of {}), band {:?}",
        report.counts.healthy,
        report.counts.bos_sink,
        report.counts.dead,
        report.counts.low_entropy,
        report.counts.total(),
        report.band
    );
    Ok(())
}

fn parse_explicit_targets(spec: &str) -> Result<Vec<(usize, usize)>, CliError> {
    spec.split(',')
        .map(|pair| {
            let (l, h) = pair.split_once(':').ok_or_else(|| {
                CliError::Runtime(format!("bad target '{pair}', want layer:head"))
            })?;
            let layer = l
                .trim()
                .parse()
                .map_err(|_| CliError::Runtime(format!("bad layer '{l}'")))?;
            let head = h
                .trim()
                .parse()
                .map_err(|_| CliError::Runtime(format!("bad head '{h}'")))?;
            Ok((layer, head))
        })
        .collect()
}

fn cmd_surgery(args: SurgeryArgs, recorded: Vec<String>) -> CliResult {
    let dir = out_dir_for("surgery", &args.out_dir)?;
    let (config, stock_weights, _) = load_checkpoint(&args.checkpoint).map_err(CliError::from)?;
    let input_id = checkpoint_id(&args.checkpoint).map_err(CliError::from)?;

    let pass: u8 = if args.pass2 { 2 } else { 1 };
    let parent = if args.pass2 {
        let m_path = args
            .from_manifest
            .as_ref()
            .ok_or_else(|| CliError::Runtime("--pass2 requires --from-manifest".into()))?;
        let parent = RunManifest::load(m_path).map_err(CliError::from)?;
        match &parent.output_checkpoint {
            Some(out) if *out == input_id => {}
            other => {
                return Err(CliError::Runtime(format!(
                    "lineage mismatch: manifest output checkpoint {other:?} != input {input_id}"
                )))
            }
        }
        Some(m_path.display().to_string())
    } else {
        None
    };

    let mut train_cfg: TrainConfig = match &args.train_config {
        Some(p) => serde_json::from_slice(&read_file(p)?)
            .map_err(|e| CliError::Runtime(format!("train config: {e}")))?,
        None => TrainConfig::default(),
    };
    train_cfg.seed = args.seed;

    let (prompt_tokens, prompt_sha) = load_prompt(&args.prompt, &config)?;
    let thresholds = Thresholds::default();
    let corpus = load_corpus(&args.corpus, train_cfg.seq_len)?;
    let options = SurgeryOptions {
        train_attn_out_bias: args.train_attn_out_bias,
    };

    let mut manifest = RunManifest::new("surgery", recorded, config_hash(&train_cfg), args.seed);
    manifest.input_checkpoint = Some(input_id.clone());
    manifest.parent_manifest = parent;

    let identity = ReportIdentity {
        checkpoint_id: input_id.clone(),
        prompt_sha: prompt_sha.clone(),
    };
    let pre_report =
        diagnostics::diagnose(&stock_weights, &config, &prompt_tokens, &thresholds, identity)
            .map_err(CliError::from)?;

    let policy = match args.policy.as_str() {
        "band" => Policy::Band {
            explicit: match (args.band_from, args.band_to) {
                (Some(a), Some(b)) => Some([a, b]),
                _ => None,
            },
        },
        "column" => Policy::Column {
            index: args
                .index
                .ok_or_else(|| CliError::Runtime("--policy column requires --index".into()))?,
            layer_range: match (args.layer_from, args.layer_to) {
                (Some(a), Some(b)) => Some((a, b)),
                _ => None,
            },
        },
        "residual" => Policy::Residual,
        "explicit" => Policy::Explicit(parse_explicit_targets(
            args.targets
                .as_deref()
                .ok_or_else(|| CliError::Runtime("--policy explicit requires --targets".into()))?,
        )?),
        other => return Err(CliError::Runtime(format!("unknown policy '{other}'"))),
    };

    let plan = select_targets(&pre_report, &policy, pass, args.seed).map_err(CliError::from)?;
    let plan_json = serde_json::to_string_pretty(&plan).map_err(CliError::from)?;

    if args.negative_control {
        let nc = negative_control(
            &stock_weights,
            &config,
            &corpus,
            &thresholds,
            &train_cfg,
            &prompt_tokens,
            args.seed,
            &options,
        )
        .map_err(CliError::from)?;
        write_file(&dir.join("negative_control.plan.json"), plan_json.as_bytes())?;
        write_diagnosis_artifacts(&dir, "negative_control_report", &nc.report)?;
        write_file(
            &dir.join("negative_control_loss_trace.csv"),
            loss_trace_csv(&nc.train.loss_trace).as_bytes(),
        )?;
        manifest.finish();
        manifest
            .save(&dir.join("negative_control.manifest.json"))
            .map_err(CliError::from)?;
        println!(
            "negative control (masks without reinit): {} of {} targeted heads recovered",
            nc.recovered,
            nc.plan.targets.len()
        );
        return Ok(());
    }

    let mut weights = stock_weights.clone();
    weights.clear_masks();
    perform_surgery(&mut weights, &config, &plan, &options).map_err(CliError::from)?;
    let mut cfg = train_cfg.clone();
    cfg.keep_epoch_snapshots = true;
    let outcome = train(&mut weights, &config, &corpus, &cfg).map_err(CliError::from)?;
    let best = outcome.best_epoch.expect("at least one epoch eval");
    let best_weights = &outcome.epoch_snapshots[best];

    let stem = format!("pass{pass}");
    let ckpt_path = dir.join(format!("{stem}.ckpt"));
    save_checkpoint(&ckpt_path, best_weights, &config, args.seed).map_err(CliError::from)?;
    let out_id = checkpoint_id(&ckpt_path).map_err(CliError::from)?;

    let post_report = diagnostics::diagnose(
        best_weights,
        &config,
        &prompt_tokens,
        &thresholds,
        ReportIdentity {
            checkpoint_id: out_id.clone(),
            prompt_sha,
        },
    )
    .map_err(CliError::from)?;

    write_file(&dir.join(format!("{stem}.plan.json")), plan_json.as_bytes())?;
    write_diagnosis_artifacts(&dir, &format!("{stem}_report"), &post_report)?;
    write_file(
        &dir.join(format!("{stem}_loss_trace.csv")),
        loss_trace_csv(&outcome.loss_trace).as_bytes(),
    )?;
    write_file(
        &dir.join(format!("{stem}_eval_trace.csv")),
        eval_trace_csv(&outcome.eval_trace).as_bytes(),
    )?;
    manifest.output_checkpoint = Some(out_id);
    manifest.finish();
    manifest
        .save(&dir.join(format!("{stem}.manifest.json")))
        .map_err(CliError::from)?;

    let recovered = recovered_count(&plan, &post_report);
    println!(
        "pass {pass} ({}): {} targets, {} kept frozen, {} recovered, best epoch {} (held-out ppl {:.3})",
        plan.policy,
        plan.targets.len(),
        plan.kept_frozen.len(),
        recovered,
        outcome.epoch_evals[best].epoch,
        outcome.epoch_evals[best].held_out_ppl
    );
    println!(
        "trainable fraction: {:.5}",
        build_masks(&plan, &config, &options).trainable_fraction()
    );
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn load_report(path: &Path) -> Result<DiagnosisReport, CliError> {
    serde_json::from_slice(&read_file(path)?)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_drift(args: DriftArgs, recorded: Vec<String>) -> CliResult {
    let dir = out_dir_for("drift", &args.out_dir)?;
    let stock = load_report(&args.stock)?;
    let posts: Vec<DiagnosisReport> = args
        .post
        .iter()
        .map(|p| load_report(p))
        .collect::<Result<_, _>>()?;

    let band = match (args.band_from, args.band_to) {
        (Some(a), Some(b)) => Some([a, b]),
        _ => stock.band,
    };

    let mut manifest = RunManifest::new("drift", recorded, config_hash(&stock.thresholds), 0);

    let last = posts.last().expect("clap enforces at least one post");
    for (i, post) in posts.iter().enumerate() {
        let out = drift(&stock, post, args.threshold, &Zone::All).map_err(CliError::from)?;
        write_file(
            &dir.join(format!("drift_{i}.csv")),
            drift_csv(&out.records).as_bytes(),
        )?;
    }

    let mut summaries = Vec::new();
    if let Some([a, b]) = band {
        let outside = drift(
            &stock,
            last,
            args.threshold,
            &Zone::OutsideColumns { from: a, to: b },
        )
        .map_err(CliError::from)?;
        // in-band frozen heads: healthy at stock inside the band
        let frozen: HeadSet = stock
            .heads()
            .filter(|((_, h), c)| *h >= a && *h <= b && c.class == diagnostics::HeadClass::Healthy)
            .map(|(coord, _)| coord)
            .collect();
        let in_band = drift(
            &stock,
            last,
            args.threshold,
            &Zone::Heads(frozen.iter().copied().collect()),
        )
        .map_err(CliError::from)?;

        for s in [&outside.summary, &in_band.summary] {
            println!(
                "{}: {} of {} drifting, mean |delta| {:.4} (zone) / {:.4} (drifters), worst {}",
                s.zone,
                s.drifting,
                s.zone_heads,
                s.mean_abs_delta_zone,
                s.mean_abs_delta_drifters,
                s.worst.map(|w| w.to_string()).unwrap_or_else(|| "-".into())
            );
            summaries.push(s.clone());
        }

        let grid: Vec<Vec<f32>> = (0..stock.n_layers())
            .map(|l| {
                (0..stock.n_heads())
                    .map(|h| {
                        if frozen.contains(&(l, h)) {
                            (last.cell(l, h).bos - stock.cell(l, h).bos).abs()
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        write_file(
            &dir.join("frozen_drift_heatmap.svg"),
            svg::heatmap_svg(
                &grid,
                Some([a, b]),
                "Frozen in-band |delta| (last checkpoint)",
                0.0,
            )
            .as_bytes(),
        )?;

        let refs: Vec<&DiagnosisReport> = std::iter::once(&stock).chain(posts.iter()).collect();
        let trends = column_drift(&refs, &frozen).map_err(CliError::from)?;
        let series: Vec<(String, Vec<(f32, f32)>)> = trends
            .iter()
            .map(|t| {
                (
                    format!("H{} ({:?})", t.column, t.trend),
                    t.means
                        .iter()
                        .enumerate()
                        .map(|(i, &m)| (i as f32 + 1.0, m))
                        .collect(),
                )
            })
            .collect();
        write_file(
            &dir.join("column_drift_trajectories.svg"),
            svg::line_chart_svg(
                &series,
                "Column-wise frozen-head drift",
                "checkpoint",
                "mean |delta|",
            )
            .as_bytes(),
        )?;
        for t in &trends {
            println!(
                "column H{}: {} frozen heads, means {:?}, {:?}",
                t.column, t.frozen_heads, t.means, t.trend
            );
        }
        let trends_json = serde_json::to_string_pretty(&trends).map_err(CliError::from)?;
        write_file(&dir.join("column_trends.json"), trends_json.as_bytes())?;
    } else {
        let all = drift(&stock, last, args.threshold, &Zone::All).map_err(CliError::from)?;
        println!(
            "all heads: {} of {} drifting, mean |delta| {:.4} (zone) / {:.4} (drifters), worst {}",
            all.summary.drifting,
            all.summary.zone_heads,
            all.summary.mean_abs_delta_zone,
            all.summary.mean_abs_delta_drifters,
            all.summary
                .worst
                .map(|w| w.to_string())
                .unwrap_or_else(|| "-".into())
        );
        summaries.push(all.summary);
    }

    let json = serde_json::to_string_pretty(&summaries).map_err(CliError::from)?;
    write_file(&dir.join("drift_summary.json"), json.as_bytes())?;
    manifest.finish();
    manifest
        .save(&dir.join("drift.manifest.json"))
        .map_err(CliError::from)?;
    Ok(())
}

fn cmd_eval(args: EvalArgs, recorded: Vec<String>) -> CliResult {
    let dir = out_dir_for("eval", &args.out_dir)?;
    let (config, weights, seed) = load_checkpoint(&args.checkpoint).map_err(CliError::from)?;
    let mut manifest = RunManifest::new("eval", recorded, config_hash(&config), seed);
    manifest.input_checkpoint = Some(checkpoint_id(&args.checkpoint).map_err(CliError::from)?);

    let mut csv = String::from("split,ppl\n");
    println!("{:<24} ppl", "split");
    for path in &args.text {
        let bytes = read_file(path)?;
        let ppl = perplexity(&weights, &config, &[&bytes]).map_err(CliError::from)?;
        let split = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        println!("{split:<24} {ppl:.4}");
        csv.push_str(&format!("{split},{ppl:.4}\n"));
    }
    write_file(&dir.join("eval.csv"), csv.as_bytes())?;
    manifest.finish();
    manifest
        .save(&dir.join("eval.manifest.json"))
        .map_err(CliError::from)?;
    Ok(())
}

fn cmd_report(args: ReportArgs, recorded: Vec<String>) -> CliResult {
    let dir = out_dir_for("report", &args.out_dir)?;
    if args.diagnosis.is_none() && args.drift_csv.is_none() {
        return Err(CliError::Runtime(
            "nothing to render: pass --diagnosis and/or --drift-csv".into(),
        ));
    }
    let mut manifest = RunManifest::new("report", recorded, String::new(), 0);
    if let Some(path) = &args.diagnosis {
        let report = load_report(path)?;
        write_diagnosis_artifacts(&dir, "rendered", &report)?;
        println!("rendered heatmap + histogram from {}", path.display());
    }
    if let Some(path) = &args.drift_csv {
        let text = String::from_utf8(read_file(path)?)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let mut cells: Vec<(usize, usize, f32)> = Vec::new();
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(CliError::Runtime(format!("bad drift CSV row: {line}")));
            }
            let l: usize = fields[0]
                .parse()
                .map_err(|_| CliError::Runtime(format!("bad layer: {line}")))?;
            let h: usize = fields[1]
                .parse()
                .map_err(|_| CliError::Runtime(format!("bad head: {line}")))?;
            let d: f32 = fields[3]
                .parse()
                .map_err(|_| CliError::Runtime(format!("bad delta: {line}")))?;
            cells.push((l, h, d.abs()));
        }
        let layers = cells.iter().map(|&(l, _, _)| l).max().map(|m| m + 1).unwrap_or(0);
        let heads = cells.iter().map(|&(_, h, _)| h).max().map(|m| m + 1).unwrap_or(0);
        let mut grid = vec![vec![0.0f32; heads]; layers];
        for (l, h, d) in cells {
            grid[l][h] = d;
        }
        write_file(
            &dir.join("drift_heatmap.svg"),
            svg::heatmap_svg(&grid, None, "|delta| by layer x head", 0.0).as_bytes(),
        )?;
        println!("rendered drift heatmap from {}", path.display());
    }
    manifest.finish();
    manifest
        .save(&dir.join("report.manifest.json"))
        .map_err(CliError::from)?;
    Ok(())
}
