//! `hiercl` command line: gen, split, train, eval, compare, project.
//!
//! Settings come from an optional JSON config file (`--config`); explicit
//! flags override file values.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{comparison_csv, project_subclasses, projection_csv, run_comparison};
use crate::data::{generate_synthetic, load_jsonl, split_by_patent, validate_ratios, SplitSpec, SyntheticSpec, DEFAULT_RATIOS};
use crate::encoder::{eval_split_for, load_checkpoint, save_checkpoint, train, EvalTarget, TrainConfig};
use crate::error::{Error, Result};
use crate::loss::LossMode;
use crate::retrieval::{evaluate, DEFAULT_KS};

/// Experiment manifest loadable with `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub synthetic: SyntheticSpec,
    pub train: TrainConfig,
    pub ratios: [f64; 3],
    pub seeds: Vec<u64>,
    pub ks: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            train: TrainConfig::default(),
            ratios: DEFAULT_RATIOS,
            seeds: vec![1, 2, 3, 4, 5],
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Parser)]
#[command(name = "hiercl", version, about = "Hierarchical multi-positive contrastive learning toolkit")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for the command's random choices.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic hierarchical dataset as JSONL.
    Gen(GenArgs),
    /// Split a dataset into train/val/test patents.
    Split(SplitArgs),
    /// Train an encoder and write a checkpoint plus a JSONL training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test (or val) split.
    Eval(EvalArgs),
    /// Train CL and HMCL across seeds and compare against the untrained encoder.
    Compare(CompareArgs),
    /// Project embeddings of selected subclasses onto two principal components.
    Project(ProjectArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub main_classes: Option<usize>,
    #[arg(long)]
    pub subclasses_per_main: Option<usize>,
    #[arg(long)]
    pub patents_per_subclass: Option<usize>,
    #[arg(long)]
    pub images_per_patent: Option<usize>,
    #[arg(long)]
    pub d_in: Option<usize>,
    #[arg(long)]
    pub spread_main: Option<f64>,
    #[arg(long)]
    pub spread_sub: Option<f64>,
    #[arg(long)]
    pub spread_patent: Option<f64>,
    #[arg(long)]
    pub spread_image: Option<f64>,
    #[arg(long, default_value = "data.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long, default_value = "data.jsonl")]
    pub data: PathBuf,
    /// Comma-separated train,val,test ratios.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long, default_value = "split.json")]
    pub out: PathBuf,
}

/// Hyperparameter overrides shared by `train` and `compare`.
#[derive(Debug, Args, Default)]
pub struct HyperArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Patents per batch.
    #[arg(long = "batch-patents")]
    pub k: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub s_p: Option<f64>,
    #[arg(long)]
    pub s_s: Option<f64>,
    #[arg(long)]
    pub s_m: Option<f64>,
    #[arg(long)]
    pub use_text: bool,
    #[arg(long)]
    pub symmetric: bool,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub noise_p: Option<f64>,
}

impl HyperArgs {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set!(
            lr => cfg.lr,
            weight_decay => cfg.weight_decay,
            tau => cfg.tau,
            lambda => cfg.lambda,
            k => cfg.k,
            max_epochs => cfg.max_epochs,
            patience => cfg.patience,
            s_p => cfg.scores.s_p,
            s_s => cfg.scores.s_s,
            s_m => cfg.scores.s_m,
            embed_dim => cfg.embed_dim,
            noise_sigma => cfg.noise_sigma,
            noise_p => cfg.noise_p,
        );
        if let Some(h) = self.hidden {
            cfg.hidden = Some(h);
        }
        if self.use_text {
            cfg.use_text = true;
        }
        if self.symmetric {
            cfg.symmetric = true;
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "data.jsonl")]
    pub data: PathBuf,
    #[arg(long, default_value = "split.json")]
    pub split: PathBuf,
    #[arg(long)]
    pub loss: Option<LossMode>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, default_value = "model.json")]
    pub out: PathBuf,
    /// Training log path (default: `<out>.log.jsonl`).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalOn {
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, default_value = "data.jsonl")]
    pub data: PathBuf,
    #[arg(long, default_value = "split.json")]
    pub split: PathBuf,
    #[arg(long, default_value = "model.json")]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "test")]
    pub on: EvalOn,
    #[arg(long, default_value = "metrics.json")]
    pub out: PathBuf,
    /// CSV path (default: `<out>` with a `.csv` extension).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, default_value = "data.jsonl")]
    pub data: PathBuf,
    #[arg(long, default_value = "split.json")]
    pub split: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, default_value = "comparison.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long, default_value = "data.jsonl")]
    pub data: PathBuf,
    #[arg(long, default_value = "model.json")]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub subclasses: Vec<u32>,
    #[arg(long, default_value = "projection.csv")]
    pub out: PathBuf,
}

impl std::str::FromStr for EvalOn {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "val" => Ok(EvalOn::Val),
            "test" => Ok(EvalOn::Test),
            other => Err(format!("unknown split {other}")),
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

struct Ctx {
    config: RunConfig,
    seed: Option<u64>,
    quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

fn cmd_gen(ctx: &Ctx, a: &GenArgs) -> Result<()> {
    let mut spec = ctx.config.synthetic.clone();
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { spec.$f = v; })* };
    }
    set!(
        main_classes,
        subclasses_per_main,
        patents_per_subclass,
        images_per_patent,
        d_in,
        spread_main,
        spread_sub,
        spread_patent,
        spread_image
    );
    if let Some(s) = ctx.seed {
        spec.seed = s;
    }
    let ds = generate_synthetic(&spec)?;
    ds.save_jsonl(&a.out)?;
    ctx.say(format!(
        "wrote {}: {} records, {} patents, {} subclasses, {} main classes",
        a.out.display(),
        ds.len(),
        ds.patents().len(),
        ds.subclasses().len(),
        ds.main_classes().len()
    ));
    Ok(())
}

fn cmd_split(ctx: &Ctx, a: &SplitArgs) -> Result<()> {
    let ratios = match &a.ratios {
        Some(r) if r.len() == 3 => [r[0], r[1], r[2]],
        Some(r) => {
            return Err(Error::InvalidConfig(format!(
                "--ratios needs 3 values, got {}",
                r.len()
            )))
        }
        None => ctx.config.ratios,
    };
    validate_ratios(ratios)?;
    let ds = load_jsonl(&a.data)?;
    let split = split_by_patent(&ds, ratios, ctx.seed.unwrap_or(0))?;
    split.save(&a.out)?;
    ctx.say(format!(
        "wrote {}: {}/{}/{} train/val/test patents",
        a.out.display(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    ));
    Ok(())
}

fn train_config(ctx: &Ctx, hyper: &HyperArgs, loss: Option<LossMode>) -> Result<TrainConfig> {
    let mut cfg = ctx.config.train.clone();
    hyper.apply(&mut cfg);
    if let Some(mode) = loss {
        cfg.loss_mode = mode;
    }
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let cfg = train_config(ctx, &a.hyper, a.loss)?;
    let ds = load_jsonl(&a.data)?;
    let split = SplitSpec::load(&a.split)?;
    let (params, log) = train(&ds, &split, &cfg)?;
    save_checkpoint(&params, &cfg, &a.out)?;

    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log.jsonl"));
    let mut lines = String::new();
    for e in &log.epochs {
        let line = serde_json::json!({
            "epoch": e.epoch,
            "mean_loss": e.mean_loss,
            "val_map": e.val_map,
        });
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    write_file(&log_path, &lines)?;
    ctx.say(format!(
        "wrote {} (best epoch {}, val mAP {:?}) and {}",
        a.out.display(),
        log.best_epoch,
        log.best_val_map,
        log_path.display()
    ));
    Ok(())
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let ds = load_jsonl(&a.data)?;
    if ck.params.d_in() != ds.d_in() {
        return Err(Error::DimensionMismatch(format!(
            "checkpoint expects {} input features, dataset has {}",
            ck.params.d_in(),
            ds.d_in()
        )));
    }
    let split = SplitSpec::load(&a.split)?;
    split.validate_against(&ds)?;
    let target = match a.on {
        EvalOn::Val => EvalTarget::Val,
        EvalOn::Test => EvalTarget::Test,
    };
    let eval = eval_split_for(&ds, &split, target, ck.config.queries_per_patent)?;
    let ks = a.ks.clone().unwrap_or_else(|| ctx.config.ks.clone());
    let report = evaluate(&ck.params, &eval, &ks)?;
    report.save_json(&a.out)?;
    let csv = a.csv.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    report.save_csv(&csv)?;
    for l in &report.levels {
        ctx.say(format!(
            "{:<10} mAP {:.4} nDCG {:.4} ({} queries)",
            l.level.as_str(),
            l.map,
            l.ndcg,
            l.queries
        ));
    }
    ctx.say(format!("wrote {} and {}", a.out.display(), csv.display()));
    Ok(())
}

fn cmd_compare(ctx: &Ctx, a: &CompareArgs) -> Result<()> {
    let cfg = train_config(ctx, &a.hyper, None)?;
    let ds = load_jsonl(&a.data)?;
    let split = SplitSpec::load(&a.split)?;
    let seeds = a.seeds.clone().unwrap_or_else(|| ctx.config.seeds.clone());
    let rows = run_comparison(&ds, &split, &cfg, &seeds)?;
    write_file(&a.out, &comparison_csv(&rows))?;
    ctx.say(format!(
        "wrote {} ({} rows over {} seeds; Baseline = untrained encoder)",
        a.out.display(),
        rows.len(),
        seeds.len()
    ));
    Ok(())
}

fn cmd_project(ctx: &Ctx, a: &ProjectArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let ds = load_jsonl(&a.data)?;
    if ck.params.d_in() != ds.d_in() {
        return Err(Error::DimensionMismatch(format!(
            "checkpoint expects {} input features, dataset has {}",
            ck.params.d_in(),
            ds.d_in()
        )));
    }
    let rows = project_subclasses(&ck.params, &ds, &a.subclasses)?;
    write_file(&a.out, &projection_csv(&rows))?;
    ctx.say(format!("wrote {} ({} rows)", a.out.display(), rows.len()));
    Ok(())
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let ctx = Ctx {
        config,
        seed: cli.seed,
        quiet: cli.quiet,
    };
    match &cli.command {
        Command::Gen(a) => cmd_gen(&ctx, a),
        Command::Split(a) => cmd_split(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Compare(a) => cmd_compare(&ctx, a),
        Command::Project(a) => cmd_project(&ctx, a),
    }
}

/// Sets the rayon pool size from `HIERCL_THREADS`, if present.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HIERCL_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("HIERCL_THREADS={v:?} is not a count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    Ok(())
}
