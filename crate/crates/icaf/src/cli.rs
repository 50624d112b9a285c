//! Command-line entry points: dataset generation, training, evaluation,
//! ablation sweeps, and panel export.
//!
//! A run is described by a [`RunConfig`] resolved in a fixed order:
//! built-in defaults, then the preset (named on the command line, or as a
//! `preset` key in the config file), then the config file's keys, then
//! `--set key=value` overrides, then dedicated flags such as `--epochs`.
//! The config file is flat `dotted.key = value` text — one leaf per line,
//! values in JSON notation (bare words read as strings), `#` comments —
//! and the fully resolved form is written verbatim into the run directory
//! as `config.txt`, whose SHA-256 stamps every checkpoint of the run.
//!
//! A run directory therefore holds everything needed to reproduce or
//! consume the run: `config.txt`, `version.json` (package version plus
//! config and dataset digests), `metrics.jsonl`, checkpoints, and — when
//! a test set is supplied — `report.json`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{self, steps_per_epoch, TrainConfig, TrainerSpec};
use crate::error::{Error, Result};
use crate::evalviz::{evaluate, export_panels, EvalReport};
use crate::group_data::{
    generate_synthetic_dataset, split_dataset, DatasetManifest, GeneratorSpec,
};
use crate::nn::{Checkpoint, ParamStore};
use crate::objective::{LossConfig, StrongReduction};
use crate::pcn::{Pcn, PcnConfig};
use crate::segnet::{SegNet, SegNetConfig};

/// Named configurations corresponding to the framework's baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Every component on: view synthesis, feature correction, CutMix,
    /// feature augmentation.
    Full,
    /// Labeled cross-entropy only; the unsupervised loss is switched off.
    SupervisedOnly,
    /// Single-view weak-to-strong consistency: one view serves as both
    /// the weak and the strong branch.
    SemiBaseline,
    /// Multi-view consistency without correction: view 1's weak pseudo
    /// labels supervise two strongly perturbed sibling views, summed.
    GroupBaseline,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunPaths {
    /// Training dataset root.
    pub data: Option<PathBuf>,
    /// Held-out dataset root, evaluated after training when present.
    pub test_data: Option<PathBuf>,
    /// Run directory; defaults to `$ICAF_RUN_ROOT/run-<digest>`.
    pub out: Option<PathBuf>,
}

/// The fully resolved description of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    /// Fraction of training groups whose masks are used.
    pub label_ratio: f64,
    pub paths: RunPaths,
    pub gen: GeneratorSpec,
    pub segnet: SegNetConfig,
    pub pcn: PcnConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub aug: crate::augment::AugmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            preset: Preset::Full,
            label_ratio: 0.05,
            paths: RunPaths::default(),
            gen: GeneratorSpec::new(96, (128, 128), 42),
            segnet: SegNetConfig::reference(3),
            pcn: PcnConfig::reference(),
            aug: crate::augment::AugmentConfig::with_crop((train.crop_size, train.crop_size)),
            train,
            loss: LossConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn trainer_spec(&self) -> TrainerSpec {
        TrainerSpec {
            segnet: self.segnet.clone(),
            pcn: self.pcn.clone(),
            train: self.train.clone(),
            loss: self.loss.clone(),
            aug: self.aug.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.label_ratio > 0.0 && self.label_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "label_ratio must be in (0, 1], got {}",
                self.label_ratio
            )));
        }
        self.gen.validate()?;
        self.trainer_spec().validate()
    }
}

/// Overwrite the fields a named configuration pins down.
pub fn apply_preset(cfg: &mut RunConfig, preset: Preset) {
    cfg.preset = preset;
    if preset == Preset::Full {
        return;
    }
    cfg.train.group_baseline_only = true;
    cfg.pcn.bypass = true;
    cfg.train.use_vam = false;
    cfg.train.use_vcm = false;
    cfg.train.use_ca = false;
    cfg.train.use_fa = false;
    match preset {
        Preset::Full => unreachable!(),
        Preset::SupervisedOnly => {
            cfg.loss.lambda = 0.0;
            cfg.train.o = 1;
            cfg.train.p = 1;
            cfg.train.q = 1;
        }
        Preset::SemiBaseline => {
            cfg.train.o = 1;
            cfg.train.p = 1;
            cfg.train.q = 1;
        }
        Preset::GroupBaseline => {
            cfg.train.o = 3;
            cfg.train.p = 1;
            cfg.train.q = 2;
            cfg.loss.strong_reduction = StrongReduction::Sum;
        }
    }
}

/// Parse flat `key = value` text into ordered pairs.
pub fn parse_flat(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("config line {}: expected `key = value`", i + 1))
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

fn parse_scalar(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

fn set_path(root: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = &mut *root;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "config key {key}: `{}` has no sub-keys",
                parts[..i].join(".")
            ))
        })?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        if i + 1 == parts.len() {
            *slot = parse_scalar(raw);
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("split('.') yields at least one part")
}

fn walk_flat(prefix: &str, value: &serde_json::Value, out: &mut String) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                walk_flat(&path, v, out);
            }
        }
        leaf => {
            let _ = writeln!(out, "{prefix} = {leaf}");
        }
    }
}

/// Serialize a config as sorted flat `key = value` lines.
pub fn dump_flat(cfg: &RunConfig) -> Result<String> {
    let value = serde_json::to_value(cfg)
        .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
    let mut out = String::new();
    walk_flat("", &value, &mut out);
    Ok(out)
}

pub fn config_digest(dump: &str) -> String {
    let mut h = Sha256::new();
    h.update(dump.as_bytes());
    let d = h.finalize();
    d.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Build the run configuration from defaults, a preset, flat config text,
/// and override pairs, in that order.
pub fn resolve_run_config(
    file_text: Option<&str>,
    cli_preset: Option<Preset>,
    sets: &[(String, String)],
) -> Result<RunConfig> {
    let file_pairs = match file_text {
        Some(t) => parse_flat(t)?,
        None => Vec::new(),
    };
    let preset = match cli_preset {
        Some(p) => p,
        None => match file_pairs.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, raw)) => serde_json::from_value(parse_scalar(raw))
                .map_err(|_| Error::Config(format!("unknown preset `{raw}`")))?,
            None => Preset::Full,
        },
    };
    let mut cfg = RunConfig::default();
    apply_preset(&mut cfg, preset);
    let mut value = serde_json::to_value(&cfg)
        .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
    for (k, raw) in file_pairs.iter().filter(|(k, _)| k != "preset") {
        set_path(&mut value, k, raw)?;
    }
    for (k, raw) in sets {
        if k == "preset" {
            return Err(Error::Config("select presets with --preset".into()));
        }
        set_path(&mut value, k, raw)?;
    }
    let cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_sets(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{s}`")))
        })
        .collect()
}

/// Choose the run directory: an explicit path wins, otherwise a
/// digest-named directory under the run root (the `ICAF_RUN_ROOT`
/// environment variable, default `runs`).
pub fn resolve_run_dir(explicit: Option<&Path>, root_env: Option<&str>, digest: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let root = root_env.unwrap_or("runs");
            Path::new(root).join(format!("run-{}", &digest[..12]))
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "icaf",
    version,
    about = "Intra-group consistency training for many-to-one view groups"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-view dataset with shared masks.
    GenData(GenDataArgs),
    /// Train a model and optionally score it on a held-out set.
    Train(TrainArgs),
    /// Score a trained run on a dataset under the one-to-one protocol.
    Eval(EvalArgs),
    /// Run a component-toggle or O/P/Q grid and collect a CSV.
    Ablate(AblateArgs),
    /// Export correction-pipeline panels for one group.
    Viz(VizArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output dataset root.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 96)]
    pub groups: usize,
    /// Views per group, illuminated at equally spaced angles.
    #[arg(long, default_value_t = 12)]
    pub views: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Angular window (degrees) within which a boundary pixel is lit.
    #[arg(long, default_value_t = 90.0)]
    pub visibility: f64,
    /// Pixel noise standard deviation.
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Training dataset root.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out dataset root; evaluated after training when given.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Run directory (default: digest-named under $ICAF_RUN_ROOT).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Override one config key, e.g. --set train.epochs=20 (repeatable).
    #[arg(long = "set")]
    pub set: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub label_ratio: Option<f64>,
    /// Print the resolved configuration and exit without training.
    #[arg(long)]
    pub dump_config: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory holding config.txt and final.ckpt.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset root to score.
    #[arg(long)]
    pub data: PathBuf,
    /// Explicit checkpoint path (skips the config-digest check).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Training dataset root.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset root scored after each cell.
    #[arg(long)]
    pub test_data: PathBuf,
    /// Sweep directory; one run directory per cell plus ablation.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat key = value config file for the shared base configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one base-config key (repeatable).
    #[arg(long = "set")]
    pub set: Vec<String>,
    /// Repeat every cell with seeds base, base+1, ...
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[arg(long, value_enum, default_value_t = Grid::Toggles)]
    pub grid: Grid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    /// Component toggles: supervised, single-view and group baselines,
    /// then correction stages cumulatively enabled.
    Toggles,
    /// Sampled views O x interaction views P.
    Op,
    /// Strong branches Q.
    Q,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    /// Run directory holding config.txt and final.ckpt.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset root to draw the group from.
    #[arg(long)]
    pub data: PathBuf,
    /// Group id (default: the manifest's first group).
    #[arg(long)]
    pub group: Option<String>,
    /// Panel output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Explicit checkpoint path (skips the config-digest check).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Seed for the view draw shown in the panels.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Viz(a) => cmd_viz(a),
    }
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut spec = GeneratorSpec::new(args.groups, (args.size, args.size), args.seed);
    spec.views_per_group = args.views;
    spec.illumination_angles = (0..args.views)
        .map(|i| 360.0 * i as f64 / args.views.max(1) as f64)
        .collect();
    spec.n_classes = args.classes;
    spec.boundary_visibility_width = args.visibility;
    spec.noise_std = args.noise;
    let manifest = generate_synthetic_dataset(&spec, &args.out)?;
    println!("wrote {} groups to {}", manifest.n_groups(), args.out.display());
    println!("dataset digest: {}", manifest.dataset_digest()?);
    Ok(())
}

fn read_config_file(path: Option<&Path>) -> Result<Option<String>> {
    match path {
        Some(p) => std::fs::read_to_string(p)
            .map(Some)
            .map_err(|e| Error::io(p, e)),
        None => Ok(None),
    }
}

fn resolve_from_args(args: &TrainArgs) -> Result<RunConfig> {
    let file_text = read_config_file(args.config.as_deref())?;
    let mut sets = parse_sets(&args.set)?;
    if let Some(e) = args.epochs {
        sets.push(("train.epochs".into(), e.to_string()));
    }
    if let Some(s) = args.seed {
        sets.push(("train.seed".into(), s.to_string()));
    }
    if let Some(r) = args.label_ratio {
        sets.push(("label_ratio".into(), r.to_string()));
    }
    let mut cfg = resolve_run_config(file_text.as_deref(), args.preset, &sets)?;
    if args.data.is_some() {
        cfg.paths.data = args.data.clone();
    }
    if args.test_data.is_some() {
        cfg.paths.test_data = args.test_data.clone();
    }
    if args.out.is_some() {
        cfg.paths.out = args.out.clone();
    }
    Ok(cfg)
}

/// Check a dataset against the model and crop configuration before any
/// work starts.
fn check_dataset(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<()> {
    let n_classes = manifest.n_classes();
    if n_classes != cfg.segnet.n_classes {
        return Err(Error::Config(format!(
            "model predicts {} classes but the dataset has {n_classes}",
            cfg.segnet.n_classes
        )));
    }
    let (h, w) = manifest.file.generator_spec.image_size;
    if cfg.train.crop_size > h.min(w) {
        return Err(Error::Config(format!(
            "crop size {} exceeds the dataset's {h}x{w} images",
            cfg.train.crop_size
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct VersionStamp<'a> {
    package_version: &'a str,
    config_digest: &'a str,
    dataset_digest: &'a str,
}

/// Train one resolved configuration into `run_dir` and return the final
/// checkpoint path with the config digest.
fn run_training(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    run_dir: &Path,
) -> Result<(engine::TrainOutcome, String)> {
    let dump = dump_flat(cfg)?;
    let digest = config_digest(&dump);
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let config_path = run_dir.join("config.txt");
    std::fs::write(&config_path, &dump).map_err(|e| Error::io(&config_path, e))?;
    let stamp = VersionStamp {
        package_version: env!("CARGO_PKG_VERSION"),
        config_digest: &digest,
        dataset_digest: &manifest.dataset_digest()?,
    };
    let version_path = run_dir.join("version.json");
    let body = serde_json::to_string_pretty(&stamp)
        .map_err(|e| Error::Config(format!("version stamp: {e}")))?;
    std::fs::write(&version_path, body).map_err(|e| Error::io(&version_path, e))?;

    let (labeled, unlabeled) = split_dataset(manifest, cfg.label_ratio, cfg.train.seed)?;
    let outcome = engine::train(
        &cfg.trainer_spec(),
        manifest,
        &labeled,
        &unlabeled,
        run_dir,
        &digest,
    )?;
    Ok((outcome, digest))
}

fn eval_checkpoint(
    cfg: &RunConfig,
    ckpt_path: &Path,
    expect_digest: Option<&str>,
    data: &Path,
) -> Result<EvalReport> {
    let manifest = DatasetManifest::load(data)?;
    let ckpt = Checkpoint::load(ckpt_path, expect_digest)?;
    let params: ParamStore<f32> = ckpt.params.cast();
    let segnet = SegNet::new(cfg.segnet.clone())?;
    let ids: Vec<String> = manifest.ids().map(String::from).collect();
    evaluate(&segnet, &params, &manifest, &ids)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_from_args(args)?;
    let dump = dump_flat(&cfg)?;
    if args.dump_config {
        print!("{dump}");
        return Ok(());
    }
    let data = cfg
        .paths
        .data
        .clone()
        .ok_or_else(|| Error::Config("--data is required to train".into()))?;
    let manifest = DatasetManifest::load(&data)?;
    check_dataset(&cfg, &manifest)?;
    let digest = config_digest(&dump);
    let run_root = std::env::var("ICAF_RUN_ROOT").ok();
    let run_dir = resolve_run_dir(cfg.paths.out.as_deref(), run_root.as_deref(), &digest);

    let (labeled, unlabeled) = split_dataset(&manifest, cfg.label_ratio, cfg.train.seed)?;
    let spe = steps_per_epoch(labeled.len(), unlabeled.len(), &cfg.train);
    println!(
        "training {} epochs x {spe} steps ({} labeled / {} unlabeled groups) into {}",
        cfg.train.epochs,
        labeled.len(),
        unlabeled.len(),
        run_dir.display()
    );
    let (outcome, digest) = run_training(&cfg, &manifest, &run_dir)?;
    println!(
        "finished {} steps; final checkpoint {}",
        outcome.steps_run,
        outcome.final_checkpoint.display()
    );
    if let Some(test) = cfg.paths.test_data.clone() {
        let report = eval_checkpoint(&cfg, &outcome.final_checkpoint, Some(&digest), &test)?;
        let report_path = run_dir.join("report.json");
        let body = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
        std::fs::write(&report_path, body).map_err(|e| Error::io(&report_path, e))?;
        println!("test mIoU {:.4} over {} views", report.miou, report.n_views);
    }
    Ok(())
}

fn load_run_config(run_dir: &Path) -> Result<(RunConfig, String)> {
    let path = run_dir.join("config.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let cfg = resolve_run_config(Some(&text), None, &[])?;
    Ok((cfg, config_digest(&text)))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (cfg, digest) = load_run_config(&args.run)?;
    let (ckpt_path, expect) = match &args.checkpoint {
        Some(p) => (p.clone(), None),
        None => (args.run.join("final.ckpt"), Some(digest.as_str())),
    };
    let report = eval_checkpoint(&cfg, &ckpt_path, expect, &args.data)?;
    let body = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    if let Some(out) = &args.out {
        std::fs::write(out, &body).map_err(|e| Error::io(out, e))?;
    }
    println!("{body}");
    Ok(())
}

pub fn cmd_viz(args: &VizArgs) -> Result<()> {
    let (cfg, digest) = load_run_config(&args.run)?;
    let (ckpt_path, expect) = match &args.checkpoint {
        Some(p) => (p.clone(), None),
        None => (args.run.join("final.ckpt"), Some(digest.as_str())),
    };
    let manifest = DatasetManifest::load(&args.data)?;
    let group_id = match &args.group {
        Some(g) => g.clone(),
        None => manifest
            .ids()
            .next()
            .ok_or_else(|| Error::validation("the dataset has no groups"))?
            .to_string(),
    };
    let k = manifest.entry(&group_id)?.views.len();
    let o = cfg.train.o.min(k);
    let p = cfg.train.p.min(o);
    let ckpt = Checkpoint::load(&ckpt_path, expect)?;
    let params: ParamStore<f32> = ckpt.params.cast();
    let segnet = SegNet::new(cfg.segnet.clone())?;
    let pcn = Pcn::new(cfg.pcn.clone())?;
    let files = export_panels(
        &segnet,
        &pcn,
        &params,
        &manifest,
        &group_id,
        o,
        p,
        cfg.loss.tau,
        &args.out,
        args.seed,
    )?;
    println!(
        "wrote {} panels for group {group_id} to {}",
        files.len(),
        args.out.display()
    );
    Ok(())
}

/// One ablation cell: a label and the full configuration it runs.
pub fn build_cells(base: &RunConfig, grid: Grid) -> Vec<(String, RunConfig)> {
    let mut cells = Vec::new();
    match grid {
        Grid::Toggles => {
            let mut supervised = base.clone();
            apply_preset(&mut supervised, Preset::SupervisedOnly);
            cells.push(("supervised".to_string(), supervised));
            let mut semi = base.clone();
            apply_preset(&mut semi, Preset::SemiBaseline);
            cells.push(("semi-baseline".to_string(), semi));
            // The remaining rows share the base O/P/Q so the correction
            // stages are compared on the same sampling footprint. The
            // feature-dropout branch belongs to the correction losses (and
            // is what trains the correction units, since the supervised
            // path is plain), so it switches on together with view
            // synthesis; the group baseline keeps its original
            // strong-branches-only form.
            let mut group = base.clone();
            group.preset = Preset::GroupBaseline;
            group.train.group_baseline_only = true;
            group.pcn.bypass = true;
            group.train.use_vam = false;
            group.train.use_vcm = false;
            group.train.use_ca = false;
            group.train.use_fa = false;
            cells.push(("group-baseline".to_string(), group.clone()));
            let mut vam = group.clone();
            vam.preset = Preset::Full;
            vam.train.group_baseline_only = false;
            vam.pcn.bypass = false;
            vam.train.use_vam = true;
            vam.train.use_fa = true;
            cells.push(("vam".to_string(), vam.clone()));
            let mut vam_vcm = vam.clone();
            vam_vcm.train.use_vcm = true;
            cells.push(("vam-vcm".to_string(), vam_vcm));
            let mut full = base.clone();
            apply_preset(&mut full, Preset::Full);
            cells.push(("full".to_string(), full));
        }
        Grid::Op => {
            for o in [1usize, 3, 6] {
                for p in [1usize, 3] {
                    let mut cfg = base.clone();
                    apply_preset(&mut cfg, Preset::Full);
                    cfg.train.o = o;
                    cfg.train.p = p.min(o);
                    cfg.train.q = cfg.train.q.min(o);
                    cells.push((format!("o{o}-p{p}"), cfg));
                }
            }
        }
        Grid::Q => {
            for q in [1usize, 2, 3] {
                let mut cfg = base.clone();
                apply_preset(&mut cfg, Preset::Full);
                cfg.train.q = q.min(cfg.train.o);
                cells.push((format!("q{q}"), cfg));
            }
        }
    }
    cells
}

/// Mean pseudo-label validity over the final epoch's steps, 0 when the
/// unsupervised path never ran.
pub fn final_valid_fraction(metrics_path: &Path) -> Result<f64> {
    let text = std::fs::read_to_string(metrics_path).map_err(|e| Error::io(metrics_path, e))?;
    let mut last_epoch = 0u64;
    let mut rows: Vec<engine::StepMetrics> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let m: engine::StepMetrics = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("{}: {e}", metrics_path.display())))?;
        last_epoch = last_epoch.max(m.epoch);
        rows.push(m);
    }
    let last: Vec<&engine::StepMetrics> = rows.iter().filter(|m| m.epoch == last_epoch).collect();
    if last.is_empty() {
        return Ok(0.0);
    }
    Ok(last.iter().map(|m| m.valid_fraction).sum::<f64>() / last.len() as f64)
}

/// One CSV row of an ablation sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub o: usize,
    pub p: usize,
    pub q: usize,
    pub lambda: f64,
    pub use_vam: bool,
    pub use_vcm: bool,
    pub use_ca: bool,
    pub use_fa: bool,
    pub miou: f64,
    pub final_valid_fraction: f64,
}

pub const ABLATION_HEADER: &str =
    "config,seed,o,p,q,lambda,use_vam,use_vcm,use_ca,use_fa,miou,final_valid_fraction";

impl AblationRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:.6},{:.6}",
            self.config,
            self.seed,
            self.o,
            self.p,
            self.q,
            self.lambda,
            self.use_vam,
            self.use_vcm,
            self.use_ca,
            self.use_fa,
            self.miou,
            self.final_valid_fraction
        )
    }

    pub fn from_csv(line: &str) -> Result<AblationRow> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(Error::Format(format!(
                "ablation row needs 12 fields, got {}: `{line}`",
                f.len()
            )));
        }
        let err = |what: &str| Error::Format(format!("ablation row {what}: `{line}`"));
        Ok(AblationRow {
            config: f[0].to_string(),
            seed: f[1].parse().map_err(|_| err("seed"))?,
            o: f[2].parse().map_err(|_| err("o"))?,
            p: f[3].parse().map_err(|_| err("p"))?,
            q: f[4].parse().map_err(|_| err("q"))?,
            lambda: f[5].parse().map_err(|_| err("lambda"))?,
            use_vam: f[6].parse().map_err(|_| err("use_vam"))?,
            use_vcm: f[7].parse().map_err(|_| err("use_vcm"))?,
            use_ca: f[8].parse().map_err(|_| err("use_ca"))?,
            use_fa: f[9].parse().map_err(|_| err("use_fa"))?,
            miou: f[10].parse().map_err(|_| err("miou"))?,
            final_valid_fraction: f[11].parse().map_err(|_| err("final_valid_fraction"))?,
        })
    }
}

/// Train and score one ablation cell in its own run directory.
pub fn run_cell(
    label: &str,
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    test_data: &Path,
    run_dir: &Path,
) -> Result<AblationRow> {
    check_dataset(cfg, manifest)?;
    let (outcome, digest) = run_training(cfg, manifest, run_dir)?;
    let report = eval_checkpoint(cfg, &outcome.final_checkpoint, Some(&digest), test_data)?;
    let report_path = run_dir.join("report.json");
    let body = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    std::fs::write(&report_path, body).map_err(|e| Error::io(&report_path, e))?;
    Ok(AblationRow {
        config: label.to_string(),
        seed: cfg.train.seed,
        o: cfg.train.o,
        p: cfg.train.p,
        q: cfg.train.q,
        lambda: cfg.loss.lambda,
        use_vam: cfg.train.use_vam,
        use_vcm: cfg.train.use_vcm,
        use_ca: cfg.train.use_ca,
        use_fa: cfg.train.use_fa,
        miou: report.miou,
        final_valid_fraction: final_valid_fraction(&outcome.metrics_path)?,
    })
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let file_text = read_config_file(args.config.as_deref())?;
    let sets = parse_sets(&args.set)?;
    let base = resolve_run_config(file_text.as_deref(), None, &sets)?;
    let manifest = DatasetManifest::load(&args.data)?;
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be positive".into()));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let csv_path = args.out.join("ablation.csv");
    let mut csv =
        std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    writeln!(csv, "{ABLATION_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
    let cells = build_cells(&base, args.grid);
    for seed_offset in 0..args.seeds {
        for (label, cell) in &cells {
            let mut cfg = cell.clone();
            cfg.train.seed = base.train.seed + seed_offset as u64;
            let run_dir = args.out.join(format!("{label}-s{}", cfg.train.seed));
            let started = std::time::Instant::now();
            let row = run_cell(label, &cfg, &manifest, &args.test_data, &run_dir)?;
            writeln!(csv, "{}", row.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
            csv.flush().map_err(|e| Error::io(&csv_path, e))?;
            println!(
                "{label} seed {}: mIoU {:.4}, valid {:.3} ({:.0}s)",
                cfg.train.seed,
                row.miou,
                row.final_valid_fraction,
                started.elapsed().as_secs_f64()
            );
        }
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}
