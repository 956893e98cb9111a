//! The `owps` command line: reproducible batch workflows driven by a JSON
//! config with flag overrides.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, load_rgb, read_dataset, write_dataset, SyntheticSceneConfig};
use crate::error::{Error, Result};
use crate::loss::{emit_loss_curves, LossConfig, LossKind};
use crate::network::{predict, ModelConfig};
use crate::norm::NormVariant;
use crate::postprocess::{load_probability_png, save_probability_png, segment_pipeline, PostprocessConfig};
use crate::trainer::{
    evaluate, load_checkpoint, run_grid, save_checkpoint, train, EvalSet, GridBase, GridSpec, MetricsWriter,
    ModelVariant, TrainConfig,
};

pub const RUN_MANIFEST: &str = "run.json";

/// Dataset generation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub count: usize,
    pub seed: u64,
    pub scene: SyntheticSceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { count: 200, seed: 0, scene: SyntheticSceneConfig::default() }
    }
}

/// Everything a command needs. Missing sections and keys take defaults;
/// unknown keys are rejected.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub postprocess: PostprocessConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config { field: path.display().to_string(), reason: e.to_string() })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.scene.validate()?;
        if self.data.count == 0 {
            return Err(Error::config("data.count", "must be >= 1"));
        }
        self.postprocess.validate()
    }
}

#[derive(Parser, Debug)]
#[command(name = "owps", version, about = "Overlapping particle segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides shared by every command. Each one is recorded in the run manifest.
#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of the command (data seed for gen-data, training seed otherwise).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub loss_edge: Option<LossKind>,
    #[arg(long)]
    pub norm: Option<NormVariant>,
    #[arg(long)]
    pub no_refine: bool,
    #[arg(long)]
    pub threshold: Option<f32>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        o: Overrides,
        /// Number of scenes (overrides data.count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model; writes checkpoint.owps and metrics.csv.
    Train {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        data: PathBuf,
        /// Held-out set scored every train.eval_every epochs.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset; writes eval.csv.
    Eval {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Segment images, or a pair of probability maps, into instances.
    Segment {
        #[command(flatten)]
        o: Overrides,
        #[arg(long, required_unless_present = "region_prob")]
        checkpoint: Option<PathBuf>,
        /// Region probability PNG used instead of a model.
        #[arg(long, requires = "edge_prob", conflicts_with = "checkpoint")]
        region_prob: Option<PathBuf>,
        #[arg(long, requires = "region_prob")]
        edge_prob: Option<PathBuf>,
        /// RGB PNG inputs.
        images: Vec<PathBuf>,
    },
    /// Train and evaluate a grid of model/loss/batch cells.
    Grid {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        /// One of the four published result tables (1-4); the default is table 2.
        #[arg(long, conflicts_with_all = ["models", "losses", "batches"])]
        table: Option<usize>,
        /// Comma-separated model variants, e.g. U_Net,OWSNet-IN-BN.
        #[arg(long, value_delimiter = ',')]
        models: Vec<ModelVariant>,
        /// Comma-separated region:edge loss pairs, e.g. CE:CE,CE:square-dice.
        #[arg(long, value_delimiter = ',', value_parser = parse_loss_pair)]
        losses: Vec<(LossKind, LossKind)>,
        #[arg(long, value_delimiter = ',')]
        batches: Vec<usize>,
    },
    /// Write the single-pixel loss curves (t = 1) as CSV.
    PlotLossCurves {
        #[command(flatten)]
        o: Overrides,
    },
}

fn parse_loss_pair(s: &str) -> std::result::Result<(LossKind, LossKind), String> {
    let (a, b) = s.split_once(':').unwrap_or((s, s));
    let parse = |x: &str| x.parse::<LossKind>().map_err(|e| e.to_string());
    Ok((parse(a)?, parse(b)?))
}

/// Provenance written next to every command's outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub argv: Vec<String>,
    pub config: RunConfig,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix: f64,
    pub wall_seconds: f64,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(b) = self.batch {
            cfg.train.batch_size = b;
        }
        if let Some(k) = self.loss_edge {
            cfg.loss.edge_kind = k;
        }
        if let Some(n) = self.norm {
            cfg.model.norm.variant = n;
        }
        if self.no_refine {
            cfg.model.refine_enabled = false;
        }
        if let Some(t) = self.threshold {
            cfg.postprocess.threshold = t;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }
}

/// Files and directories created by a command, removed again on failure.
struct Outputs {
    root: PathBuf,
    root_created: bool,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn open(root: &Path) -> Result<Self> {
        let root_created = !root.exists();
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self { root: root.to_path_buf(), root_created, files: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.root.join(name);
        self.files.push(p.clone());
        p
    }

    fn check(&self) -> Result<()> {
        for f in &self.files {
            if !f.exists() {
                return Err(Error::Corrupt { path: f.clone(), reason: "declared output was not written".into() });
            }
        }
        Ok(())
    }

    fn discard(&self) {
        if self.root_created {
            let _ = fs::remove_dir_all(&self.root);
            return;
        }
        for f in self.files.iter().rev() {
            if f.is_dir() {
                let _ = fs::remove_dir_all(f);
            } else {
                let _ = fs::remove_file(f);
            }
        }
    }
}

fn write_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    let tmp = path.with_extension("json.partial");
    fs::write(&tmp, serde_json::to_string_pretty(m)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Messages go to stderr, results to stdout.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run_command(cli.command, &args) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Runs one command. Returns the lines meant for standard output.
pub fn run_command(cmd: Command, argv: &[String]) -> Result<Vec<String>> {
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    let (name, o) = match &cmd {
        Command::GenData { o, .. } => ("gen-data", o),
        Command::Train { o, .. } => ("train", o),
        Command::Eval { o, .. } => ("eval", o),
        Command::Segment { o, .. } => ("segment", o),
        Command::Grid { o, .. } => ("grid", o),
        Command::PlotLossCurves { o } => ("plot-loss-curves", o),
    };
    let mut cfg = o.resolve()?;
    if let (Command::GenData { count, .. }, seed) = (&cmd, o.seed) {
        if let Some(s) = seed {
            cfg.data.seed = s;
        }
        if let Some(c) = count {
            cfg.data.count = *c;
        }
    }
    cfg.validate()?;

    let mut outputs = Outputs::open(&o.out)?;
    let mut inputs = Vec::new();
    let result = execute(&cmd, &cfg, &mut outputs, &mut inputs);
    let result = result.and_then(|lines| {
        let manifest_path = outputs.path(RUN_MANIFEST);
        let manifest = RunManifest {
            command: name.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            argv: argv.to_vec(),
            config: cfg,
            seed: if name == "gen-data" { cfg.data.seed } else { cfg.train.seed },
            inputs: inputs.clone(),
            outputs: outputs.files.clone(),
            started_unix,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        write_manifest(&manifest_path, &manifest)?;
        outputs.check()?;
        Ok(lines)
    });
    if result.is_err() {
        outputs.discard();
    }
    result
}

fn execute(cmd: &Command, cfg: &RunConfig, out: &mut Outputs, inputs: &mut Vec<PathBuf>) -> Result<Vec<String>> {
    match cmd {
        Command::GenData { .. } => {
            let samples = generate_dataset(&cfg.data.scene, cfg.data.seed, cfg.data.count)?;
            for sub in ["images", "region", "edge", "instance", crate::data::MANIFEST_FILE] {
                out.path(sub);
            }
            write_dataset(&out.root.clone(), &samples, Some(cfg.data.seed), Some(cfg.data.scene))?;
            Ok(vec![format!("wrote {} scenes to {}", samples.len(), out.root.display())])
        }
        Command::Train { data, eval_data, .. } => {
            inputs.push(data.clone());
            let train_set = read_dataset(data)?.samples;
            let eval_set = match eval_data {
                Some(p) => {
                    inputs.push(p.clone());
                    Some(read_dataset(p)?.samples)
                }
                None => None,
            };
            let eval = eval_set.as_deref().map(|s| EvalSet { samples: s, postprocess: cfg.postprocess });
            let mut metrics = MetricsWriter::create(&out.path("metrics.csv"))?;
            let outcome = train(&cfg.model, &cfg.loss, &cfg.train, &train_set, eval, |row| metrics.append(row))?;
            save_checkpoint(&outcome.params, &out.path("checkpoint.owps"))?;
            let last = outcome.log.last().expect("epochs >= 1");
            let mut lines = vec![format!("epoch {} train_loss {:.6}", last.epoch, last.train_loss)];
            if let Some(r) = &outcome.report {
                write_text(&out.path("eval.csv"), &r.to_csv())?;
                lines.push(summary(r));
            }
            Ok(lines)
        }
        Command::Eval { checkpoint, data, .. } => {
            inputs.extend([checkpoint.clone(), data.clone()]);
            let mut params = load_checkpoint(checkpoint)?;
            let samples = read_dataset(data)?.samples;
            let report = evaluate(&mut params, &samples, &cfg.postprocess)?;
            write_text(&out.path("eval.csv"), &report.to_csv())?;
            Ok(vec![summary(&report)])
        }
        Command::Segment { checkpoint, region_prob, edge_prob, images, .. } => {
            segment(cfg, out, inputs, checkpoint.as_deref(), region_prob.as_deref().zip(edge_prob.as_deref()), images)
        }
        Command::Grid { data, test_data, table, models, losses, batches, .. } => {
            inputs.extend([data.clone(), test_data.clone()]);
            let spec = if models.is_empty() && losses.is_empty() && batches.is_empty() {
                GridSpec::table(table.unwrap_or(2))?
            } else {
                GridSpec {
                    models: if models.is_empty() { vec![ModelVariant::InBn] } else { models.clone() },
                    losses: if losses.is_empty() {
                        vec![(cfg.loss.region_kind, cfg.loss.edge_kind)]
                    } else {
                        losses.clone()
                    },
                    batches: if batches.is_empty() { vec![cfg.train.batch_size] } else { batches.clone() },
                }
            };
            let train_set = read_dataset(data)?.samples;
            let test_set = read_dataset(test_data)?.samples;
            let base = GridBase { model: cfg.model, loss: cfg.loss, train: cfg.train, postprocess: cfg.postprocess };
            out.path("results.csv");
            let rows = run_grid(&spec, &base, &train_set, &test_set, &out.root.clone(), |i, row| {
                let status = match &row.result {
                    Ok(r) => summary(r),
                    Err(e) => format!("failed: {e}"),
                };
                eprintln!(
                    "cell {}: {} {}/{} batch {}: {status}",
                    i + 1,
                    row.cell.model,
                    row.cell.loss_region.as_str(),
                    row.cell.loss_edge.as_str(),
                    row.cell.batch
                );
            })?;
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            Ok(vec![format!("{} cells, {failed} failed", rows.len())])
        }
        Command::PlotLossCurves { .. } => {
            emit_loss_curves(&out.path("loss_curves.csv"), &cfg.loss)?;
            Ok(vec![format!("wrote {}", out.root.join("loss_curves.csv").display())])
        }
    }
}

fn summary(r: &crate::trainer::EvalReport) -> String {
    let boundary = r.boundary_dice.map_or("n/a".to_string(), |b| format!("{b:.4}"));
    format!("boundary_dice {boundary} particle_dice {:.4} count_acc {:.4}", r.particle_dice, r.count_accuracy)
}

/// Stem, height, width, region and edge probabilities.
type SegmentJob = (String, usize, usize, Vec<f32>, Vec<f32>);

fn segment(
    cfg: &RunConfig,
    out: &mut Outputs,
    inputs: &mut Vec<PathBuf>,
    checkpoint: Option<&Path>,
    oracle: Option<(&Path, &Path)>,
    images: &[PathBuf],
) -> Result<Vec<String>> {
    let mut jobs: Vec<SegmentJob> = Vec::new();
    if let Some((rp, ep)) = oracle {
        inputs.extend([rp.to_path_buf(), ep.to_path_buf()]);
        let (h, w, region) = load_probability_png(rp)?;
        let (eh, ew, edge) = load_probability_png(ep)?;
        if (h, w) != (eh, ew) {
            return Err(Error::ShapeMismatch { op: "segment", left: vec![h, w], right: vec![eh, ew] });
        }
        jobs.push((stem(rp), h, w, region, edge));
    } else {
        let ck = checkpoint.ok_or_else(|| Error::config("checkpoint", "required without --region-prob"))?;
        if images.is_empty() {
            return Err(Error::Empty("segment needs at least one image"));
        }
        inputs.push(ck.to_path_buf());
        let mut params = load_checkpoint(ck)?;
        for img in images {
            inputs.push(img.clone());
            let x = load_rgb(img)?;
            let (h, w) = (x.shape()[1], x.shape()[2]);
            let x = x.reshaped(&[1, 3, h, w])?;
            let (region, edge) = predict(&mut params, &x)?;
            let edge = edge.map_or_else(|| vec![0.0; h * w], |e| e.into_data());
            jobs.push((stem(img), h, w, region.into_data(), edge));
        }
    }
    let mut lines = Vec::new();
    for (name, h, w, region, edge) in jobs {
        let result = segment_pipeline(h, w, &region, &edge, &cfg.postprocess)?;
        save_probability_png(h, w, &region, &out.path(&format!("{name}_region.png")))?;
        save_probability_png(h, w, &edge, &out.path(&format!("{name}_edge.png")))?;
        result.instances.save_png(&out.path(&format!("{name}_instances.png")))?;
        lines.push(format!("{name}\t{}", result.count()));
    }
    Ok(lines)
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::from_json(r#"{"train": {"epochz": 3}}"#).unwrap_err().to_string();
        assert!(err.contains("epochz"), "{err}");
        let err = RunConfig::from_json(r#"{"extra": {}}"#).unwrap_err().to_string();
        assert!(err.contains("extra"), "{err}");
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg = RunConfig::from_json(r#"{"model": {"depth": 3}, "loss": {"edge_kind": "CE"}}"#).unwrap();
        assert_eq!(cfg.model.depth, 3);
        assert_eq!(cfg.model.base_channels, ModelConfig::default().base_channels);
        assert_eq!(cfg.loss.edge_kind, LossKind::Ce);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn overrides_apply() {
        let o = Overrides {
            batch: Some(4),
            loss_edge: Some(LossKind::Dice),
            norm: Some(NormVariant::Bn),
            no_refine: true,
            threshold: Some(0.3),
            seed: Some(9),
            ..Default::default()
        };
        let cfg = o.resolve().unwrap();
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.loss.edge_kind, LossKind::Dice);
        assert_eq!(cfg.model.norm.variant, NormVariant::Bn);
        assert!(!cfg.model.refine_enabled);
        assert_eq!(cfg.postprocess.threshold, 0.3);
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn loss_pairs_and_norms_parse() {
        assert_eq!(parse_loss_pair("CE:square_dice").unwrap(), (LossKind::Ce, LossKind::SquareDice));
        assert_eq!(parse_loss_pair("dice").unwrap(), (LossKind::Dice, LossKind::Dice));
        assert!(parse_loss_pair("CE:nope").is_err());
        assert_eq!("in_bn".parse::<NormVariant>().unwrap(), NormVariant::InBn);
    }

    #[test]
    fn failed_command_leaves_no_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let code = main_with_args([
            "owps",
            "train",
            "--data",
            dir.path().join("missing").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
        assert!(!out.exists());
        assert_eq!(main_with_args(["owps", "frobnicate"]), 2);
    }
}
