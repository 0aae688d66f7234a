//! Command-line surface: `phantom`, `train`, `predict`, `evaluate`, `ablate`.
//!
//! Every command takes an optional JSON config with sections
//! `volume/phantom/sampler/seqdrop/net/train/predict/metrics`; flags override
//! config fields, and the merged config is echoed into `manifest.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::labels::{merge_masks, BinaryMask};
use crate::metrics::{evaluate_two_raters, write_reports, CaseReport, Connectivity, LesionCriteria, MetricSet};
use crate::net::{predict_volume, Checkpoint, UNetConfig, WindowSpec};
use crate::phantom::{generate_phantom, write_phantom, PhantomConfig, MASK_A, MASK_B};
use crate::sampler::PatchSpec;
use crate::seqdrop::{available_from_missing, mask_missing, DropoutPolicy};
use crate::train::{train, AdamHyper, LossConfig, Subject, TrainConfig};
use crate::volume::{read_json, read_stack, write_json, Dims, MultiChannelVolume, STACK_FILE};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const HISTORY_FILE: &str = "history.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const PRED_NAME: &str = "pred";

#[derive(Debug, Parser)]
#[command(name = "msseg", version, about = "Multi-contrast lesion segmentation with sequence dropout")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic phantom subjects.
    Phantom(PhantomArgs),
    /// Train a network on a directory of subjects.
    Train(TrainArgs),
    /// Predict lesion masks with optionally missing channels.
    Predict(PredictArgs),
    /// Score a predicted mask against two raters.
    Evaluate(EvaluateArgs),
    /// Predict and score under a set of channel subsets.
    Ablate(AblateArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Phantom(_) => "phantom",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Evaluate(_) => "evaluate",
            Command::Ablate(_) => "ablate",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run config, or a previous run's manifest.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PhantomArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of subjects; more than one writes `case000`, `case001`, ...
    #[arg(long, default_value_t = 1)]
    pub count: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// A subject directory or a directory of subject directories.
    #[arg(long)]
    pub data: PathBuf,
    /// Train without sequence dropout (every channel always kept).
    #[arg(long)]
    pub no_seqdrop: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated missing channel names, or `none`.
    #[arg(long, default_value = "none")]
    pub missing: String,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt_a: PathBuf,
    #[arg(long)]
    pub gt_b: PathBuf,
    #[arg(long, value_parser = parse_connectivity)]
    pub connectivity: Option<Connectivity>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// `;`-separated available-channel sets. `all` expands to the full set
    /// plus every single-missing set, `pairs` to the reduced sets
    /// T1+PD, T2+FLAIR, T1+T2, T1+FLAIR and FLAIR alone, `default` to both.
    #[arg(long, default_value = "default")]
    pub subsets: String,
    #[arg(long, value_parser = parse_connectivity)]
    pub connectivity: Option<Connectivity>,
}

fn parse_connectivity(s: &str) -> Result<Connectivity, String> {
    let v: u8 = s.parse().map_err(|_| format!("not a number: {s}"))?;
    Connectivity::try_from(v).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VolumeSection {
    /// Channel names in network order; defaults to the first subject's order.
    pub channels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeqdropSection {
    /// Weights for keeping 1..=C channels; defaults to uniform.
    pub preserve_weights: Option<DropoutPolicy>,
    pub disabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub adam: AdamHyper,
    pub loss: LossConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            steps_per_epoch: t.steps_per_epoch,
            batch_size: t.batch_size,
            adam: AdamHyper::default(),
            loss: LossConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictSection {
    /// Defaults to the sampler patch size.
    pub window: Option<Dims>,
    /// Defaults to half the window.
    pub stride: Option<Dims>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub volume: VolumeSection,
    pub phantom: PhantomConfig,
    pub sampler: PatchSpec,
    pub seqdrop: SeqdropSection,
    pub net: UNetConfig,
    pub train: TrainSection,
    pub predict: PredictSection,
    pub metrics: LesionCriteria,
}

impl RunConfig {
    /// Read a config file; a run manifest is accepted and its config reused.
    pub fn load(path: &Path) -> crate::error::Result<Self> {
        let value: serde_json::Value = read_json(path)?;
        let value = match value.get("config") {
            Some(inner) if value.get("command").is_some() => inner.clone(),
            _ => value,
        };
        serde_json::from_value(value).map_err(|e| Error::json(path, e))
    }

    fn resolve(common: &Common) -> anyhow::Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    pub fn window(&self) -> anyhow::Result<WindowSpec> {
        let size = self.predict.window.unwrap_or(self.sampler.size);
        let stride = match self.predict.stride {
            Some(s) => s,
            None => {
                let [x, y, z] = size.as_array().map(|n| (n / 2).max(1));
                Dims::new(x, y, z)?
            }
        };
        Ok(WindowSpec { size, stride })
    }
}

/// Enough to re-run a command: the merged config, seed, paths and version.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: RunConfig,
    pub seed: u64,
    pub started: String,
    pub finished: String,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
}

struct ManifestBuilder {
    command: &'static str,
    started: String,
    inputs: BTreeMap<String, PathBuf>,
}

impl ManifestBuilder {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            started: now(),
            inputs: BTreeMap::new(),
        }
    }

    fn input(mut self, key: &str, path: &Path) -> Self {
        self.inputs.insert(key.into(), path.to_path_buf());
        self
    }

    fn finish(self, cfg: &RunConfig, dir: &Path, outputs: Vec<PathBuf>) -> anyhow::Result<()> {
        let manifest = RunManifest {
            command: self.command.into(),
            args: std::env::args().collect(),
            config: cfg.clone(),
            seed: cfg.seed,
            started: self.started,
            finished: now(),
            inputs: self.inputs,
            outputs,
            version: env!("CARGO_PKG_VERSION").into(),
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(())
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// One subject on disk: its stack plus both rater masks when present.
#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub dir: PathBuf,
    pub stack: MultiChannelVolume,
    pub masks: Option<(BinaryMask, BinaryMask)>,
}

/// Subject directories under `data`: `data` itself when it holds a stack,
/// otherwise its subdirectories that do, sorted by name.
pub fn discover_cases(data: &Path) -> anyhow::Result<Vec<(String, PathBuf)>> {
    if data.join(STACK_FILE).is_file() {
        return Ok(vec![(String::new(), data.to_path_buf())]);
    }
    if !data.is_dir() {
        return Err(Error::NotFound(data.to_path_buf()).into());
    }
    let mut cases = Vec::new();
    for entry in fs::read_dir(data).map_err(|e| Error::io(data, e))? {
        let path = entry.map_err(|e| Error::io(data, e))?.path();
        if path.join(STACK_FILE).is_file() {
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            cases.push((name, path));
        }
    }
    if cases.is_empty() {
        bail!("no subject directories (containing {STACK_FILE}) under {}", data.display());
    }
    cases.sort();
    Ok(cases)
}

pub fn load_cases(data: &Path, need_masks: bool) -> anyhow::Result<Vec<Case>> {
    discover_cases(data)?
        .into_iter()
        .map(|(name, dir)| {
            let stack = read_stack(&dir)?;
            let a = dir.join(format!("{MASK_A}.json"));
            let b = dir.join(format!("{MASK_B}.json"));
            let masks = if a.is_file() && b.is_file() {
                Some((BinaryMask::read(&a)?, BinaryMask::read(&b)?))
            } else if need_masks {
                bail!("{} lacks {MASK_A}/{MASK_B}", dir.display());
            } else {
                None
            };
            Ok(Case {
                name,
                dir,
                stack,
                masks,
            })
        })
        .collect()
}

/// Normalized channels in `channels` order.
fn network_input(stack: &MultiChannelVolume, channels: &[String]) -> crate::error::Result<MultiChannelVolume> {
    Ok(stack.select(channels)?.normalized())
}

fn parse_missing(spec: &str) -> Vec<String> {
    let spec = spec.trim();
    if spec.is_empty() || spec.eq_ignore_ascii_case("none") {
        return Vec::new();
    }
    spec.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

/// Reduced channel sets reported alongside single-missing ablations.
pub const PAIR_SUBSETS: [&[&str]; 5] = [
    &["T1", "PD"],
    &["T2", "FLAIR"],
    &["T1", "T2"],
    &["T1", "FLAIR"],
    &["FLAIR"],
];

/// Expand a subset spec into distinct available-channel sets, in order of
/// first mention. Duplicates are dropped with a warning.
pub fn expand_subsets(spec: &str, channels: &[String]) -> anyhow::Result<Vec<BTreeSet<String>>> {
    let mut out: Vec<BTreeSet<String>> = Vec::new();
    let push = |set: BTreeSet<String>, out: &mut Vec<BTreeSet<String>>| {
        if out.contains(&set) {
            log::warn!("duplicate channel subset {set:?} ignored");
        } else {
            out.push(set);
        }
    };
    let all: BTreeSet<String> = channels.iter().cloned().collect();
    for token in spec.split(';').map(str::trim).filter(|t| !t.is_empty()) {
        let lower = token.to_ascii_lowercase();
        let mut sets = Vec::new();
        if lower == "all" || lower == "default" {
            sets.push(all.clone());
            for c in channels {
                let mut s = all.clone();
                s.remove(c);
                if !s.is_empty() {
                    sets.push(s);
                }
            }
        }
        if lower == "pairs" || lower == "default" {
            for pair in PAIR_SUBSETS {
                if pair.iter().all(|c| all.contains(*c)) {
                    sets.push(pair.iter().map(|c| c.to_string()).collect());
                }
            }
        }
        if sets.is_empty() {
            let set: BTreeSet<String> = token.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            if let Some(u) = set.iter().find(|c| !all.contains(*c)) {
                return Err(Error::UnknownChannel(u.clone()).into());
            }
            if set.is_empty() {
                bail!("empty channel subset in {spec:?}");
            }
            sets.push(set);
        }
        for s in sets {
            push(s, &mut out);
        }
    }
    if out.is_empty() {
        bail!("subset spec {spec:?} names no subsets");
    }
    Ok(out)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let name = cli.command.name();
    let result = match cli.command {
        Command::Phantom(a) => cmd_phantom(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    };
    result.with_context(|| format!("{name} failed"))
}

pub fn cmd_phantom(args: &PhantomArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(&args.common)?;
    if args.count == 0 {
        bail!("--count must be positive");
    }
    let out = &args.common.out;
    let m = ManifestBuilder::new("phantom");
    create_dir(out)?;
    let mut outputs = Vec::new();
    for i in 0..args.count {
        let pcfg = PhantomConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.phantom.clone()
        };
        let dir = if args.count == 1 {
            out.clone()
        } else {
            out.join(format!("case{i:03}"))
        };
        let p = generate_phantom(&pcfg)?;
        write_phantom(&p, &pcfg, &dir)?;
        outputs.push(dir);
    }
    m.finish(&cfg, out, outputs)
}

pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::resolve(&args.common)?;
    if args.no_seqdrop {
        cfg.seqdrop.disabled = true;
    }
    let cases = load_cases(&args.data, true)?;
    let channels = match &cfg.volume.channels {
        Some(c) => c.clone(),
        None => cases[0].stack.names(),
    };
    cfg.volume.channels = Some(channels.clone());
    cfg.net.in_channels = channels.len();
    cfg.net.validate()?;
    cfg.net.check_patch(cfg.sampler.size)?;

    let dropout = if cfg.seqdrop.disabled {
        DropoutPolicy::keep_all(channels.len())?
    } else {
        match &cfg.seqdrop.preserve_weights {
            Some(p) => p.clone(),
            None => DropoutPolicy::uniform(channels.len())?,
        }
    };
    let train_cfg = TrainConfig {
        epochs: cfg.train.epochs,
        steps_per_epoch: cfg.train.steps_per_epoch,
        batch_size: cfg.train.batch_size,
        patch: cfg.sampler,
        dropout,
        seed: cfg.seed,
    };
    train_cfg.validate(&cfg.net)?;

    let subjects = cases
        .iter()
        .map(|c| {
            let (a, b) = c.masks.as_ref().expect("masks required");
            Ok(Subject {
                input: network_input(&c.stack, &channels)?,
                labels: merge_masks(a, b)?,
            })
        })
        .collect::<crate::error::Result<Vec<_>>>()?;

    let m = ManifestBuilder::new("train").input("data", &args.data);
    let (params, history) = train(&subjects, &cfg.net, &train_cfg, &cfg.train.loss, &cfg.train.adam)?;
    let out = &args.common.out;
    create_dir(out)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    Checkpoint {
        config: cfg.net.clone(),
        channels,
        seed: cfg.seed,
        params,
    }
    .write(&ckpt)?;
    let hist = out.join(HISTORY_FILE);
    write_json(&hist, &history)?;
    m.finish(&cfg, out, vec![ckpt, hist])
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::read(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn predict_case(
    ckpt: &Checkpoint,
    stack: &MultiChannelVolume,
    available: &BTreeSet<String>,
    window: &WindowSpec,
) -> anyhow::Result<BinaryMask> {
    let input = network_input(stack, &ckpt.channels)?;
    let input = mask_missing(&input, available)?;
    Ok(predict_volume(&ckpt.params, &ckpt.config, &input, window)?)
}

pub fn cmd_predict(args: &PredictArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(&args.common)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let available = available_from_missing(&ckpt.channels, &parse_missing(&args.missing))?;
    let window = cfg.window()?;
    let cases = load_cases(&args.data, false)?;
    let out = &args.common.out;
    let m = ManifestBuilder::new("predict")
        .input("checkpoint", &args.checkpoint)
        .input("data", &args.data);
    create_dir(out)?;
    let mut outputs = Vec::new();
    for case in &cases {
        let pred = predict_case(&ckpt, &case.stack, &available, &window)?;
        let dir = out.join(&case.name);
        create_dir(&dir)?;
        let path = dir.join(PRED_NAME);
        pred.write(PRED_NAME, &path)?;
        outputs.push(path);
    }
    m.finish(&cfg, out, outputs)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::resolve(&args.common)?;
    if let Some(c) = args.connectivity {
        cfg.metrics.connectivity = c;
    }
    let pred = BinaryMask::read(&args.pred)?;
    let gt_a = BinaryMask::read(&args.gt_a)?;
    let gt_b = BinaryMask::read(&args.gt_b)?;
    let m = ManifestBuilder::new("evaluate")
        .input("pred", &args.pred)
        .input("gt_a", &args.gt_a)
        .input("gt_b", &args.gt_b);
    let report = evaluate_two_raters(&pred, &gt_a, &gt_b, &cfg.metrics)?;
    let case = args
        .pred
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let out = &args.common.out;
    write_reports(out, &[CaseReport { case, report }], &cfg.metrics)?;
    m.finish(&cfg, out, vec![out.join("report.json"), out.join("report.csv")])
}

/// One ablation row: rater-averaged metrics, then averaged over cases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub available: Vec<String>,
    pub missing: Vec<String>,
    pub mean: MetricSet,
    pub cases: Vec<CaseReport>,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("available,missing");
    for c in MetricSet::COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r.available.join("+"));
        out.push(',');
        out.push_str(&r.missing.join("+"));
        for v in r.mean.values() {
            out.push(',');
            out.push_str(&crate::metrics::format_value(v));
        }
        out.push('\n');
    }
    out
}

pub fn cmd_ablate(args: &AblateArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::resolve(&args.common)?;
    if let Some(c) = args.connectivity {
        cfg.metrics.connectivity = c;
    }
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let subsets = expand_subsets(&args.subsets, &ckpt.channels)?;
    let window = cfg.window()?;
    let cases = load_cases(&args.data, true)?;
    let m = ManifestBuilder::new("ablate")
        .input("checkpoint", &args.checkpoint)
        .input("data", &args.data);

    let rows = subsets
        .par_iter()
        .map(|available| {
            let reports = cases
                .iter()
                .map(|case| {
                    let pred = predict_case(&ckpt, &case.stack, available, &window)?;
                    let (a, b) = case.masks.as_ref().expect("masks required");
                    Ok(CaseReport {
                        case: case.name.clone(),
                        report: evaluate_two_raters(&pred, a, b, &cfg.metrics)?,
                    })
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let averages: Vec<MetricSet> = reports.iter().map(|r| r.report.average).collect();
            Ok(AblationRow {
                available: ckpt.channels.iter().filter(|c| available.contains(*c)).cloned().collect(),
                missing: ckpt.channels.iter().filter(|c| !available.contains(*c)).cloned().collect(),
                mean: MetricSet::mean(&averages),
                cases: reports,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    let out = &args.common.out;
    create_dir(out)?;
    let json = out.join("ablation.json");
    write_json(&json, &rows)?;
    let csv = out.join("ablation.csv");
    fs::write(&csv, ablation_csv(&rows)).map_err(|e| Error::io(&csv, e))?;
    m.finish(&cfg, out, vec![json, csv])
}
