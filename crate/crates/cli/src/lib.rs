//! Sub-commands of the `ctmar` experiment driver.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctmar_core::config::{Ablation, ExperimentConfig};
use ctmar_core::cqa::{oracle_from_split, synthesize_cqa_split, write_cqa_log, CqaTrainer};
use ctmar_core::data::{data_dir, Channel, Datasets, Split, SplitKind};
use ctmar_core::metrics::MetricReport;
use ctmar_core::models::{Checkpoint, InputMode};
use ctmar_core::pipeline::{
    load_cqa, load_mar, load_or_warm_start, mar_checkpoint, new_cqa_trainer, run_variant, sweep_variants, under_trained_mar,
    warm_start_key, Variant,
};
use ctmar_core::selftrain::{evaluate_mar, write_train_stats};
use ctmar_core::{CoreError, Result};

#[derive(Debug, Parser)]
#[command(name = "ctmar", version, about = "CT metal artifact reduction experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize all dataset splits and the annotated CQA set.
    Simulate(Common),
    /// Train the clinical quality assessor.
    TrainCqa(TrainCqaArgs),
    /// Warm-start and self-train the MAR network.
    TrainMar(TrainMarArgs),
    /// Evaluate a MAR checkpoint on both test splits.
    Eval(EvalArgs),
    /// Self-train once per configured quality range and compare.
    SweepQ(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set train.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Replace existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainCqaArgs {
    #[command(flatten)]
    pub common: Common,
    /// Disable both DQAug operations.
    #[arg(long)]
    pub no_dqaug: bool,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationFlag {
    NoCliLoss,
    NoEma,
    NoCqa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputModeArg {
    Artifact,
    Li,
    Concat,
}

impl From<InputModeArg> for InputMode {
    fn from(m: InputModeArg) -> Self {
        match m {
            InputModeArg::Artifact => InputMode::Artifact,
            InputModeArg::Li => InputMode::Li,
            InputModeArg::Concat => InputMode::Concat,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainMarArgs {
    #[command(flatten)]
    pub common: Common,
    /// Ablation switches (comma separated).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub ablation: Vec<AblationFlag>,
    #[arg(long, value_enum)]
    pub input_mode: Option<InputModeArg>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// MAR checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Report directory (default: `<output_dir>/eval/<checkpoint stem>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&common.config)?.with_overrides(&common.overrides)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CoreError + '_ {
    move |source| CoreError::Io { path: path.to_path_buf(), source }
}

fn is_nonempty_dir(path: &Path) -> bool {
    std::fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` (which clears it).
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if is_nonempty_dir(dir) {
        if !force {
            return Err(CoreError::OutputExists(dir.to_path_buf()));
        }
        std::fs::remove_dir_all(dir).map_err(io(dir))?;
    }
    std::fs::create_dir_all(dir).map_err(io(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io(path))
}

/// Resolved config next to the outputs it produced.
fn stamp_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    log::info!("outputs in {} (config {})", dir.display(), cfg.short_hash());
    write_text(&dir.join("config.toml"), &format!("# config_hash: {}\n{}", cfg.hash(), cfg.to_toml()?))
}

fn require_data(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CoreError::MissingPrerequisite(format!("no dataset at {} (run simulate first)", dir.display())))
    }
}

fn read_split(cfg: &ExperimentConfig, kind: SplitKind) -> Result<Split> {
    let dir = data_dir(cfg).join(kind.dir_name());
    require_data(&dir)?;
    Split::read(&dir)
}

pub fn cqa_checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("cqa").join("checkpoint.safetensors")
}

pub fn warm_checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    let mode = serde_json_mode(cfg.train.input_mode);
    cfg.output_dir.join("mar").join(format!("warm-{mode}.safetensors"))
}

fn serde_json_mode(m: InputMode) -> &'static str {
    match m {
        InputMode::Artifact => "artifact",
        InputMode::Li => "li",
        InputMode::Concat => "concat",
    }
}

pub fn cmd_simulate(common: &Common) -> Result<String> {
    let cfg = resolve_config(common)?;
    let dir = data_dir(&cfg);
    prepare_dir(&dir, common.force)?;
    let data = Datasets::synthesize(&cfg)?;
    data.write(&dir)?;
    let (cqa, oracle) = synthesize_cqa_split(&cfg)?;
    cqa.write(&dir.join(SplitKind::Cqa.dir_name()))?;
    stamp_config(&dir, &cfg)?;
    let mut msg = String::new();
    for s in [&data.sim_train, &data.sim_test, &data.cli_train, &data.cli_clean, &data.cli_test, &cqa] {
        let _ = writeln!(msg, "{:<10} {:>5} samples  spectrum {}", s.manifest.split.dir_name(), s.len(), s.manifest.spectrum_id);
    }
    let _ = write!(msg, "oracle thresholds {:?}\nconfig {}", oracle.thresholds(), cfg.short_hash());
    Ok(msg)
}

pub fn cmd_train_cqa(args: &TrainCqaArgs) -> Result<String> {
    let mut cfg = resolve_config(&args.common)?;
    if args.no_dqaug {
        cfg.cqa_train.dqaug.enabled = false;
    }
    let split = read_split(&cfg, SplitKind::Cqa)?;
    if split.is_empty() {
        return Err(CoreError::MissingPrerequisite("CQA dataset is empty".into()));
    }
    let oracle = oracle_from_split(&split)?;
    let dir = cfg.output_dir.join("cqa");
    let ckpt = cqa_checkpoint_path(&cfg);
    let under_path = dir.join("under_trained.safetensors");
    let mut trainer = if args.resume {
        let ck = Checkpoint::load(&ckpt)?;
        CqaTrainer::from_checkpoint(&ck, cfg.cqa_train)?
    } else {
        prepare_dir(&dir, args.common.force)?;
        new_cqa_trainer(&cfg)?
    };
    let under = if cfg.cqa_train.dqaug.enabled {
        if args.resume && under_path.exists() {
            Some(load_mar(&under_path)?)
        } else {
            let net = under_trained_mar(&cfg, &read_split(&cfg, SplitKind::SimTrain)?)?;
            mar_checkpoint(&net, &cfg.hash())?.save(&under_path)?;
            Some(net)
        }
    } else {
        None
    };
    stamp_config(&dir, &cfg)?;
    while trainer.epoch() < cfg.cqa_train.epochs {
        trainer.run_epoch(&split, &oracle, under.as_ref())?;
        trainer.checkpoint(&cfg.hash())?.save(&ckpt)?;
        write_cqa_log(&dir.join("log.csv"), &trainer.log, &cfg.hash())?;
    }
    let last = trainer.log.last();
    Ok(format!(
        "CQA trained for {} epochs; held-out SRCC {} PLCC {}; DQAug moderate {} mixup {}",
        trainer.epoch(),
        fmt_opt(last.and_then(|r| r.srcc)),
        fmt_opt(last.and_then(|r| r.plcc)),
        trainer.counters.moderate,
        trainer.counters.mixup
    ))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "undefined".into())
}

/// Directory name of a training variant, e.g. `reference`, `no-ema`, `no-cqa-li`.
pub fn variant_name(ablation: &Ablation, mode: InputMode) -> String {
    let mut parts = Vec::new();
    if ablation.no_cli_loss {
        parts.push("no-cli-loss");
    }
    if ablation.no_ema {
        parts.push("no-ema");
    }
    if ablation.no_cqa {
        parts.push("no-cqa");
    }
    if parts.is_empty() {
        parts.push("reference");
    }
    if mode != InputMode::Artifact {
        parts.push(serde_json_mode(mode));
    }
    parts.join("-")
}

fn load_data_for(cfg: &ExperimentConfig) -> Result<Datasets> {
    let dir = data_dir(cfg);
    for kind in [SplitKind::SimTrain, SplitKind::SimTest, SplitKind::CliTrain, SplitKind::CliClean, SplitKind::CliTest] {
        require_data(&dir.join(kind.dir_name()))?;
    }
    let data = Datasets::load(&dir)?;
    if cfg.train.input_mode.needs_li() {
        for s in [&data.sim_train, &data.cli_train, &data.cli_test] {
            if !s.has_channel(Channel::Li) {
                return Err(CoreError::MissingPrerequisite(format!(
                    "input mode {} needs LI images, absent from {}",
                    serde_json_mode(cfg.train.input_mode),
                    s.manifest.split.dir_name()
                )));
            }
        }
    }
    Ok(data)
}

fn load_cqa_for(cfg: &ExperimentConfig, required: bool) -> Result<Option<ctmar_core::models::CqaNet>> {
    let path = cqa_checkpoint_path(cfg);
    if path.exists() {
        Ok(Some(load_cqa(&path)?))
    } else if required {
        Err(CoreError::MissingPrerequisite(format!("no CQA checkpoint at {} (run train-cqa first)", path.display())))
    } else {
        Ok(None)
    }
}

pub fn cmd_train_mar(args: &TrainMarArgs) -> Result<String> {
    let mut cfg = resolve_config(&args.common)?;
    for a in &args.ablation {
        match a {
            AblationFlag::NoCliLoss => cfg.train.ablation.no_cli_loss = true,
            AblationFlag::NoEma => cfg.train.ablation.no_ema = true,
            AblationFlag::NoCqa => cfg.train.ablation.no_cqa = true,
        }
    }
    if let Some(m) = args.input_mode {
        cfg.train.input_mode = m.into();
    }
    cfg.validate()?;
    let ablation = cfg.train.ablation;
    let name = variant_name(&ablation, cfg.train.input_mode);
    let dir = cfg.output_dir.join("mar").join(&name);
    if is_nonempty_dir(&dir) && !args.common.force {
        return Err(CoreError::OutputExists(dir));
    }
    let data = load_data_for(&cfg)?;
    let cqa = load_cqa_for(&cfg, !ablation.no_cqa)?;
    let (warm, reused) = load_or_warm_start(&cfg, &data.sim_train, &warm_checkpoint_path(&cfg))?;
    prepare_dir(&dir, args.common.force)?;
    let variant = Variant {
        name: name.clone(),
        ablation,
        quality_range: if ablation.no_cqa { [1.0, 10.0] } else { cfg.train.quality_range },
    };
    let teacher_before = warm.teacher.store().fingerprint()?;
    let trainer = run_variant(&cfg, &data, &warm, cqa.as_ref(), &variant)?;
    let teacher_after = trainer.teacher.store().fingerprint()?;
    trainer.checkpoint(&cfg.hash())?.save(&dir.join("model.safetensors"))?;
    write_train_stats(&dir.join("train_stats.csv"), &trainer.stats, &cfg.hash())?;
    write_text(
        &dir.join("hashes.txt"),
        &format!("config_hash {}\nwarm_start_key {}\nteacher_before {teacher_before}\nteacher_after {teacher_after}\n", cfg.hash(), warm_start_key(&cfg)),
    )?;
    stamp_config(&dir, &cfg)?;
    let last = trainer.stats.last();
    Ok(format!(
        "{name}: {} epochs (warm start {}); out-of-domain PSNR {} -> {}; accepted {:?}",
        trainer.epoch(),
        if reused { "reused" } else { "trained" },
        fmt_opt(last.and_then(|s| s.eval_psnr_in)),
        fmt_opt(last.and_then(|s| s.eval_psnr_out)),
        trainer.stats.iter().map(|s| s.accepted_count).collect::<Vec<_>>()
    ))
}

/// Output and input metrics on both test splits.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(MetricReport, MetricReport)> {
    let net = load_mar(checkpoint)?;
    let cqa = load_cqa_for(cfg, false)?;
    let mut outputs = MetricReport::default();
    let mut inputs = MetricReport::default();
    for kind in [SplitKind::SimTest, SplitKind::CliTest] {
        let split = read_split(cfg, kind)?;
        let ev = evaluate_mar(&net, &split, cqa.as_ref(), 16)?;
        outputs.samples.extend(ev.output.samples);
        inputs.samples.extend(ev.input.samples);
    }
    Ok((outputs, inputs))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let cfg = resolve_config(&args.common)?;
    let stem = args.checkpoint.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_else(|| "model".into());
    let parent = args.checkpoint.parent().and_then(|p| p.file_name()).map(|s| s.to_string_lossy().to_string());
    let dir = args.out.clone().unwrap_or_else(|| {
        let tag = parent.map(|p| format!("{p}-{stem}")).unwrap_or(stem);
        cfg.output_dir.join("eval").join(tag)
    });
    let (outputs, inputs) = evaluate_checkpoint(&cfg, &args.checkpoint)?;
    prepare_dir(&dir, args.common.force)?;
    outputs.write_csv(&dir.join("metrics.csv"), &cfg.hash())?;
    inputs.write_csv(&dir.join("inputs.csv"), &cfg.hash())?;
    let summary = format!("model output\n{}\ninput images\n{}", outputs.summary_table(), inputs.summary_table());
    write_text(&dir.join("summary.txt"), &format!("# config_hash: {}\n{summary}", cfg.hash()))?;
    Ok(summary)
}

pub fn cmd_sweep_q(common: &Common) -> Result<String> {
    let cfg = resolve_config(common)?;
    let dir = cfg.output_dir.join("sweep");
    prepare_dir(&dir, common.force)?;
    let data = load_data_for(&cfg)?;
    let cqa = load_cqa_for(&cfg, true)?;
    let warm_path = warm_checkpoint_path(&cfg);
    let hash = cfg.hash();
    let mut table = format!("# config_hash: {hash}\nvariant,q_lower,q_upper,warm_start_key,accepted_total,cli_psnr,cli_ssim,cli_cqa,sim_psnr,sim_ssim\n");
    let mut dynamics = format!("# config_hash: {hash}\nvariant,epoch,accepted_count,mean_pseudo_quality\n");
    for v in sweep_variants(&cfg) {
        let (warm, _) = load_or_warm_start(&cfg, &data.sim_train, &warm_path)?;
        let trainer = run_variant(&cfg, &data, &warm, cqa.as_ref(), &v)?;
        let cli = evaluate_mar(&trainer.student, &data.cli_test, cqa.as_ref(), 16)?.output.aggregate(None);
        let sim = evaluate_mar(&trainer.student, &data.sim_test, cqa.as_ref(), 16)?.output.aggregate(None);
        let accepted: usize = trainer.stats.iter().map(|s| s.accepted_count).sum();
        let f = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_else(|| "undefined".into());
        let _ = writeln!(
            table,
            "{},{},{},{},{accepted},{},{},{},{},{}",
            v.name,
            v.quality_range[0],
            v.quality_range[1],
            warm_start_key(&cfg),
            f(cli.map(|a| a.psnr)),
            f(cli.map(|a| a.ssim)),
            f(cli.and_then(|a| a.cqa_quality)),
            f(sim.map(|a| a.psnr)),
            f(sim.map(|a| a.ssim)),
        );
        for s in &trainer.stats {
            let _ = writeln!(dynamics, "{},{},{},{}", v.name, s.epoch, s.accepted_count, f(s.mean_pseudo_quality));
        }
        trainer.checkpoint(&hash)?.save(&dir.join(format!("{}.safetensors", v.name)))?;
    }
    write_text(&dir.join("comparison.csv"), &table)?;
    write_text(&dir.join("dynamics.csv"), &dynamics)?;
    stamp_config(&dir, &cfg)?;
    Ok(table.lines().skip(1).collect::<Vec<_>>().join("\n"))
}

pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Simulate(c) => cmd_simulate(c),
        Command::TrainCqa(a) => cmd_train_cqa(a),
        Command::TrainMar(a) => cmd_train_mar(a),
        Command::Eval(a) => cmd_eval(a),
        Command::SweepQ(c) => cmd_sweep_q(c),
    }
}

/// One-line error report: `error[<category>]: <message>`.
pub fn error_line(e: &CoreError) -> String {
    format!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "))
}
