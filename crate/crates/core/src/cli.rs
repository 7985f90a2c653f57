//! Command-line front end: `gen`, `train`, `infer`, `eval`, `gradcheck`.
//!
//! Every command reads one flat `key = value` file (`--config`), overlays
//! `--set key=value` pairs and the dedicated flags (flags win), and echoes
//! the merged configuration as `run.cfg` into its output directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::boxes::bbox_from_mask;
use crate::cascade::{
    case_csv, infer_case, loss_csv, parse_case_csv, report_case, save_overlay, stage1_samples,
    stage2_samples, summarize, summary_csv, summary_table, train_stage, CascadeConfig, CaseRecord, CaseReport,
    LossRow, NetSegmenter, OracleCoarse, OracleFine, Segmenter, TrainPlan,
};
use crate::config::{parse_value, KeyValues};
use crate::error::{Error, Result};
use crate::phantom::{load_dataset, vol3, write_dataset, DatasetManifest, PhantomSpec};
use crate::tinynet::{checkpoint, grad_check, GradCheckConfig, GradCheckReport, UNetConfig, UNetParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const STAGE1_CHECKPOINT: &str = "stage1.unp";
pub const STAGE2_CHECKPOINT: &str = "stage2.unp";
pub const RUN_CONFIG: &str = "run.cfg";

#[derive(Debug, Parser)]
#[command(name = "volcascade", version, about = "Coarse-to-fine volumetric segmentation on synthetic phantoms")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Cross-validation fold to hold out (train) or evaluate (infer).
    #[arg(long, global = true)]
    pub fold: Option<usize>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset with fold assignments.
    Gen {
        #[arg(long)]
        cases: Option<usize>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Train the coarse and/or fine network.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = StageSel::Both)]
        stage: StageSel,
    },
    /// Run cascade inference and write per-case masks and metrics.
    Infer {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory holding the stage checkpoints.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Substitute ground-truth oracles for both networks.
        #[arg(long)]
        oracle: bool,
        /// Also write an axial overlay PNG per case.
        #[arg(long)]
        png: bool,
    },
    /// Summarize per-case CSVs in the two-table layout.
    Eval {
        /// Per-case CSV files, or directories containing `cases.csv`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Finite-difference check of the network gradients.
    Gradcheck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageSel {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

/// Merged view of every component's configuration plus run-level settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub fold: Option<usize>,
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub cases: usize,
    pub folds: usize,
    pub phantom: PhantomSpec,
    pub cascade: CascadeConfig,
    pub plan: TrainPlan,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let plan = TrainPlan::default();
        Self {
            seed: None,
            fold: None,
            threads: None,
            out: PathBuf::from("out"),
            data: None,
            models: None,
            cases: 40,
            folds: 4,
            phantom: PhantomSpec::default(),
            cascade: CascadeConfig::default(),
            plan,
            gradcheck: GradCheckConfig::default(),
        }
    }
}

fn apply_gradcheck(g: &mut GradCheckConfig, key: &str, value: &str) -> Result<bool> {
    let Some(field) = key.strip_prefix("gradcheck.") else {
        return Ok(false);
    };
    match field {
        "depth" => g.unet.depth = parse_value(key, value)?,
        "base_channels" => g.unet.base_channels = parse_value(key, value)?,
        "input_size" => g.input_size = parse_value(key, value)?,
        "step" => g.step = parse_value(key, value)?,
        "tolerance" => g.tolerance = parse_value(key, value)?,
        "gamma" => g.gamma = parse_value(key, value)?,
        "samples_per_layer" => {
            let n: usize = parse_value(key, value)?;
            g.samples_per_layer = (n > 0).then_some(n);
        }
        _ => return Err(Error::Config(format!("unknown key {key}"))),
    }
    Ok(true)
}

impl RunConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = RunConfig::default();
        for (k, v) in kv.iter() {
            if c.phantom.apply(k, v)? || c.cascade.apply(k, v)? || c.plan.apply(k, v)? || apply_gradcheck(&mut c.gradcheck, k, v)? {
                continue;
            }
            match k {
                "seed" => c.seed = Some(parse_value(k, v)?),
                "fold" => c.fold = Some(parse_value(k, v)?),
                "threads" => c.threads = Some(parse_value(k, v)?),
                "out" => c.out = v.into(),
                "data" => c.data = Some(v.into()),
                "models" => c.models = Some(v.into()),
                "dataset.cases" => c.cases = parse_value(k, v)?,
                "dataset.folds" => c.folds = parse_value(k, v)?,
                _ => return Err(Error::Config(format!("unknown key {k}"))),
            }
        }
        if let Some(seed) = c.seed {
            c.phantom.seed = seed;
            c.plan = c.plan.with_seed(seed);
            c.gradcheck.seed = seed;
            c.gradcheck.unet.seed = seed;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.cascade.validate()?;
        self.plan.validate()?;
        self.gradcheck.unet.validate()?;
        if self.folds == 0 {
            return Err(Error::Config("dataset.folds must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text of the merged configuration.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        if let Some(s) = self.seed {
            kv.set("seed", s);
        }
        if let Some(f) = self.fold {
            kv.set("fold", f);
        }
        if let Some(t) = self.threads {
            kv.set("threads", t);
        }
        kv.set("out", self.out.display());
        if let Some(d) = &self.data {
            kv.set("data", d.display());
        }
        if let Some(m) = &self.models {
            kv.set("models", m.display());
        }
        kv.set("dataset.cases", self.cases);
        kv.set("dataset.folds", self.folds);
        kv.merge(&self.phantom.to_config());
        kv.merge(&self.cascade.to_config());
        kv.merge(&self.plan.to_config());
        let g = &self.gradcheck;
        kv.set("gradcheck.depth", g.unet.depth);
        kv.set("gradcheck.base_channels", g.unet.base_channels);
        kv.set("gradcheck.input_size", g.input_size);
        kv.set("gradcheck.step", g.step);
        kv.set("gradcheck.tolerance", g.tolerance);
        kv.set("gradcheck.gamma", g.gamma);
        kv.set("gradcheck.samples_per_layer", g.samples_per_layer.unwrap_or(0));
        kv
    }

    fn require_seed(&self, cmd: &str) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config(format!("{cmd} requires a seed (--seed or `seed = ...`)")))
    }

    fn require_dir(&self, what: &str, p: &Option<PathBuf>) -> Result<PathBuf> {
        let p = p
            .clone()
            .ok_or_else(|| Error::Config(format!("missing {what} directory (--{what} or `{what} = ...`)")))?;
        if !p.is_dir() {
            return Err(Error::Config(format!("{what} directory {} does not exist", p.display())));
        }
        Ok(p)
    }

    fn echo(&self) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join(RUN_CONFIG), self.to_kv().to_text())?;
        Ok(())
    }
}

/// Config file, then `--set`, then dedicated flags.
fn merged_config(common: &CommonArgs, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut kv = match &common.config {
        Some(p) => KeyValues::parse(
            &fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        )?,
        None => KeyValues::new(),
    };
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {s:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    let common_flags = [
        ("seed", common.seed.map(|v| v.to_string())),
        ("out", common.out.as_ref().map(|p| p.display().to_string())),
        ("fold", common.fold.map(|v| v.to_string())),
        ("threads", common.threads.map(|v| v.to_string())),
    ];
    for (k, v) in common_flags.iter().chain(flags) {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    RunConfig::from_kv(&kv)
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<DatasetManifest> {
    let seed = cfg.require_seed("gen")?;
    let spec = PhantomSpec { seed, ..cfg.phantom.clone() };
    cfg.echo()?;
    write_dataset(&cfg.out, &spec, cfg.cases, cfg.folds)
}

/// Cases selected for training: every fold but the held-out one.
fn training_cases(cases: Vec<CaseRecord>, fold: Option<usize>) -> Vec<CaseRecord> {
    match fold {
        Some(f) => cases.into_iter().filter(|c| c.fold != f).collect(),
        None => cases,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub stage1: Option<UNetParams<f32>>,
    pub stage2: Option<UNetParams<f32>>,
    pub losses: Vec<LossRow>,
    pub skipped: Vec<String>,
}

pub fn cmd_train(cfg: &RunConfig, stage: StageSel) -> Result<TrainOutcome> {
    cfg.require_seed("train")?;
    let data = cfg.require_dir("data", &cfg.data)?;
    let (_, cases) = load_dataset(&data)?;
    let cases = training_cases(cases, cfg.fold);
    cfg.echo()?;
    let divisor = cfg.plan.unet.divisor();
    let mut out = TrainOutcome {
        stage1: None,
        stage2: None,
        losses: Vec::new(),
        skipped: Vec::new(),
    };
    let report = |s: u8, l: &crate::tinynet::EpochLog| {
        eprintln!(
            "stage {s} epoch {:>3}: dice {:.5} center {:.4} gamma {:e}",
            l.epoch, l.dice, l.center, l.gamma
        )
    };
    if matches!(stage, StageSel::One | StageSel::Both) {
        let samples = stage1_samples(&cases, &cfg.cascade, divisor)?;
        let (p, logs) = train_stage(&samples, cfg.plan.stage_unet(1), &cfg.plan.stage1, &cfg.plan.loss, |l| report(1, l))?;
        checkpoint::save(&p, &cfg.out.join(STAGE1_CHECKPOINT))?;
        out.losses.extend(logs.into_iter().map(|log| LossRow { stage: 1, log }));
        out.stage1 = Some(p);
    }
    if matches!(stage, StageSel::Two | StageSel::Both) {
        let (samples, skipped) = stage2_samples(&cases, &cfg.cascade, divisor)?;
        for id in &skipped {
            eprintln!("warning: {id} has an empty mask and is excluded from stage 2");
        }
        let (p, logs) = train_stage(&samples, cfg.plan.stage_unet(2), &cfg.plan.stage2, &cfg.plan.loss, |l| report(2, l))?;
        checkpoint::save(&p, &cfg.out.join(STAGE2_CHECKPOINT))?;
        out.losses.extend(logs.into_iter().map(|log| LossRow { stage: 2, log }));
        out.stage2 = Some(p);
        out.skipped = skipped;
    }
    fs::write(cfg.out.join("loss.csv"), loss_csv(&out.losses))?;
    Ok(out)
}

fn load_checkpoint(dir: &Path, name: &str, expect: &UNetConfig) -> Result<UNetParams<f32>> {
    let path = dir.join(name);
    let p: UNetParams<f32> = checkpoint::load(&path)
        .map_err(|e| Error::Format(format!("checkpoint {}: {e}", path.display())))?;
    let got = p.config();
    if (got.depth, got.base_channels) != (expect.depth, expect.base_channels) {
        return Err(Error::Config(format!(
            "checkpoint {} has depth {} base {}, config says depth {} base {}",
            path.display(),
            got.depth,
            got.base_channels,
            expect.depth,
            expect.base_channels
        )));
    }
    Ok(p)
}

/// Axial slice through the ground-truth box centre, or the middle slice.
fn overlay_slice_index(case: &CaseRecord) -> usize {
    bbox_from_mask(&case.mask).map_or(case.mask.dims().d / 2, |b| (b.min[2] + b.max[2]) / 2)
}

pub fn cmd_infer(cfg: &RunConfig, oracle: bool, png: bool) -> Result<Vec<CaseReport>> {
    let data = cfg.require_dir("data", &cfg.data)?;
    let (_, cases) = load_dataset(&data)?;
    let cases: Vec<CaseRecord> = match cfg.fold {
        Some(f) => cases.into_iter().filter(|c| c.fold == f).collect(),
        None => cases,
    };
    let models = if oracle {
        None
    } else {
        let dir = cfg.require_dir("models", &cfg.models)?;
        Some((
            load_checkpoint(&dir, STAGE1_CHECKPOINT, &cfg.plan.unet)?,
            load_checkpoint(&dir, STAGE2_CHECKPOINT, &cfg.plan.unet)?,
        ))
    };
    cfg.echo()?;
    let (coarse, fine): (Box<dyn Segmenter + '_>, Box<dyn Segmenter + '_>) = match &models {
        Some((p1, p2)) => (
            Box::new(NetSegmenter {
                params: p1,
                threshold: cfg.cascade.prob_threshold,
            }),
            Box::new(NetSegmenter {
                params: p2,
                threshold: cfg.cascade.prob_threshold,
            }),
        ),
        None => (
            Box::new(OracleCoarse {
                factor: cfg.cascade.factor,
                divisor: cfg.plan.unet.divisor(),
            }),
            Box::new(OracleFine),
        ),
    };
    let masks = cfg.out.join("masks");
    fs::create_dir_all(&masks)?;
    if png {
        fs::create_dir_all(cfg.out.join("png"))?;
    }
    let mut reports = Vec::with_capacity(cases.len());
    for case in &cases {
        let r = infer_case(case, coarse.as_ref(), fine.as_ref(), &cfg.cascade)?;
        if r.boxes.fallback {
            eprintln!("warning: {}: empty coarse prediction, using full-volume boxes", case.id);
        }
        let spacing = case.volume.spacing();
        vol3::write_mask(&masks.join(format!("{}.fused.vol", case.id)), &r.fused, spacing)?;
        vol3::write_mask(&masks.join(format!("{}.stage1.vol", case.id)), &r.coarse_up, spacing)?;
        if png {
            let z = overlay_slice_index(case);
            save_overlay(&cfg.out.join("png").join(format!("{}.png", case.id)), &case.volume, &case.mask, &r.fused, z)?;
        }
        reports.push(report_case(case, &r)?);
    }
    fs::write(cfg.out.join("cases.csv"), case_csv(&reports))?;
    Ok(reports)
}

/// Reads per-case CSVs, writes `summary.csv` and returns the table text.
pub fn cmd_eval(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<String> {
    let mut rows = Vec::new();
    for input in inputs {
        let path = if input.is_dir() { input.join("cases.csv") } else { input.clone() };
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        rows.extend(parse_case_csv(&text)?);
    }
    let summary = summarize(&rows);
    cfg.echo()?;
    fs::write(cfg.out.join("summary.csv"), summary_csv(&summary))?;
    Ok(summary_table(&summary))
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradCheckReport> {
    cfg.echo()?;
    let report = grad_check(&cfg.gradcheck)?;
    fs::write(cfg.out.join("gradcheck.csv"), report.to_text())?;
    Ok(report)
}

/// Exit code for an error: configuration, data, or numerical failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidRange { .. } | Error::InvalidFactor(_) => EXIT_CONFIG,
        Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let c = &cli.common;
    match &cli.command {
        Command::Gen { cases, folds } => {
            let cfg = merged_config(
                c,
                &[
                    ("dataset.cases", cases.map(|v| v.to_string())),
                    ("dataset.folds", folds.map(|v| v.to_string())),
                ],
            )?;
            with_threads(&cfg, || {
                let m = cmd_gen(&cfg)?;
                println!("wrote {} cases, fold sizes {:?}, to {}", m.entries.len(), m.fold_sizes(), cfg.out.display());
                Ok(EXIT_OK)
            })
        }
        Command::Train { data, stage } => {
            let cfg = merged_config(c, &[("data", data.as_ref().map(|p| p.display().to_string()))])?;
            with_threads(&cfg, || {
                let o = cmd_train(&cfg, *stage)?;
                println!("trained {} epochs, checkpoints in {}", o.losses.len(), cfg.out.display());
                Ok(EXIT_OK)
            })
        }
        Command::Infer {
            data,
            models,
            oracle,
            png,
        } => {
            let cfg = merged_config(
                c,
                &[
                    ("data", data.as_ref().map(|p| p.display().to_string())),
                    ("models", models.as_ref().map(|p| p.display().to_string())),
                ],
            )?;
            with_threads(&cfg, || {
                let reports = cmd_infer(&cfg, *oracle, *png)?;
                print!("{}", summary_table(&summarize(&reports)));
                Ok(EXIT_OK)
            })
        }
        Command::Eval { inputs } => {
            let cfg = merged_config(c, &[])?;
            print!("{}", cmd_eval(&cfg, inputs)?);
            Ok(EXIT_OK)
        }
        Command::Gradcheck => {
            let cfg = merged_config(c, &[])?;
            with_threads(&cfg, || {
                let r = cmd_gradcheck(&cfg)?;
                print!("{}", r.to_text());
                if r.passed() {
                    println!("gradient check passed (tolerance {:e})", r.tolerance);
                    Ok(EXIT_OK)
                } else {
                    println!("gradient check FAILED (tolerance {:e})", r.tolerance);
                    Ok(EXIT_NUMERIC)
                }
            })
        }
    }
}

fn with_threads(cfg: &RunConfig, f: impl FnOnce() -> Result<i32> + Send) -> Result<i32> {
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(f),
        None => f(),
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file_and_set() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("a.cfg");
        fs::write(&file, "seed = 1\nstage1.epochs = 7\nphantom.noise_sigma = 3\n").unwrap();
        let cli = Cli::try_parse_from([
            "volcascade",
            "gen",
            "--config",
            file.to_str().unwrap(),
            "--set",
            "phantom.noise_sigma=5",
            "--set",
            "seed=2",
            "--seed",
            "9",
        ])
        .unwrap();
        let cfg = merged_config(&cli.common, &[]).unwrap();
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.phantom.seed, 9);
        assert_eq!(cfg.phantom.noise_sigma, 5.0);
        assert_eq!(cfg.plan.stage1.epochs, 7);
    }

    #[test]
    fn echoed_config_reparses_identically() {
        let mut kv = KeyValues::new();
        kv.set("seed", 4);
        kv.set("cascade.factor", 2);
        kv.set("gradcheck.samples_per_layer", 3);
        let cfg = RunConfig::from_kv(&kv).unwrap();
        let again = RunConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn config_errors_are_classified() {
        let bad = |text: &str| RunConfig::from_kv(&KeyValues::parse(text).unwrap()).unwrap_err();
        assert_eq!(exit_code(&bad("nonsense.key = 1")), EXIT_CONFIG);
        assert_eq!(exit_code(&bad("cascade.factor = 0")), EXIT_CONFIG);
        assert_eq!(exit_code(&bad("unet.depth = x")), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Truncated { expected: 4, found: 0 }), EXIT_DATA);
        assert_eq!(
            exit_code(&Error::NonFiniteLoss {
                epoch: 0,
                case: 0,
                value: f64::NAN
            }),
            EXIT_NUMERIC
        );
    }

    #[test]
    fn unknown_flag_is_a_config_error() {
        assert_eq!(run(["volcascade", "gen", "--bogus"]), EXIT_CONFIG);
        assert_eq!(run(["volcascade", "train", "--stage", "3"]), EXIT_CONFIG);
    }

    #[test]
    fn seed_is_mandatory_for_gen() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d");
        assert_eq!(run(["volcascade", "gen", "--out", out.to_str().unwrap()]), EXIT_CONFIG);
    }
}
