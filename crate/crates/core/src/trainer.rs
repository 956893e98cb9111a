//! Adam, the training loop, dice-per-case evaluation, checkpoints and the
//! experiment grid runner.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, derive_seed, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig, LossKind};
use crate::network::{forward, predict, ModelConfig, NamedStats, OWPSNetParams, Param};
use crate::norm::{Mode, NormVariant, RunningStats};
use crate::postprocess::{binarize, segment_pipeline, BinaryMask, PostprocessConfig};
use crate::tensor::{lit, Scalar, Tape, Tensor};

/// Smoothing term of the per-image dice coefficient.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Evaluate on the held-out set every this many epochs (and after the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.001, epochs: 100, batch_size: 2, seed: 0, augment: AugmentConfig::default(), eval_every: 10 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be >= 1"));
        }
        self.augment.validate()
    }
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Self { m: zeros(), v: zeros(), step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update. `grads[i]` belongs to `params[i]`.
pub fn adam_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Option<&[T]>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![grads.len(), state.m.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        match g {
            None => return Err(Error::MissingGrad(p.name.clone())),
            Some(g) if g.len() != p.value.numel() => {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.value.shape().to_vec(),
                    right: vec![g.len()],
                })
            }
            Some(_) => {}
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let g = g.expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let gj = g[j].to_f64().unwrap_or(f64::NAN);
            let mj = b1 * m[j].to_f64().unwrap_or(0.0) + (1.0 - b1) * gj;
            let vj = b2 * v[j].to_f64().unwrap_or(0.0) + (1.0 - b2) * gj * gj;
            m[j] = lit(mj);
            v[j] = lit(vj);
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + state.eps);
            *w = lit(w.to_f64().unwrap_or(0.0) - update);
        }
    }
    Ok(())
}

/// Per-image dice `(2|P∩T| + ε) / (|P| + |T| + ε)`.
pub fn dice_case(pred: &BinaryMask, label: &BinaryMask) -> Result<f64> {
    if pred.shape() != label.shape() {
        let (a, b) = (pred.shape(), label.shape());
        return Err(Error::ShapeMismatch { op: "dice_case", left: vec![a.0, a.1], right: vec![b.0, b.1] });
    }
    let inter = pred.data().iter().zip(label.data()).filter(|(&p, &t)| p != 0 && t != 0).count();
    let (p, t) = (pred.count_ones(), label.count_ones());
    Ok((2.0 * inter as f64 + DICE_EPS) / ((p + t) as f64 + DICE_EPS))
}

/// Mean of the per-image dice over a list of images.
pub fn dice_per_case(preds: &[BinaryMask], labels: &[BinaryMask]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Empty("dice_per_case"));
    }
    if preds.len() != labels.len() {
        return Err(Error::ShapeMismatch { op: "dice_per_case", left: vec![preds.len()], right: vec![labels.len()] });
    }
    let per: Vec<f64> = preds.iter().zip(labels).map(|(p, t)| dice_case(p, t)).collect::<Result<_>>()?;
    Ok(mean(&per))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Probability maps for one image, row-major H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMaps {
    pub region: Vec<f32>,
    pub edge: Option<Vec<f32>>,
}

impl ProbabilityMaps {
    /// Labels used as probabilities.
    pub fn oracle(sample: &Sample) -> Self {
        Self { region: sample.region_mask.to_f32(), edge: Some(sample.edge_mask.to_f32()) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEval {
    pub boundary_dice: Option<f64>,
    pub particle_dice: f64,
    pub predicted_count: usize,
    pub true_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Absent when the model has no edge branch.
    pub boundary_dice: Option<f64>,
    pub particle_dice: f64,
    /// Fraction of images whose predicted count equals the true count.
    pub count_accuracy: f64,
    pub per_image: Vec<ImageEval>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "image,boundary_dice,particle_dice,predicted_count,true_count";

    /// Per-image rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for (i, e) in self.per_image.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i},{},{:.6},{},{}",
                opt(e.boundary_dice),
                e.particle_dice,
                e.predicted_count,
                e.true_count
            );
        }
        let _ = writeln!(out, "mean,{},{:.6},{:.6},", opt(self.boundary_dice), self.particle_dice, self.count_accuracy);
        out
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Scores probability maps against the samples' labels. Without an edge map
/// the pipeline runs with an all-background edge prediction.
pub fn evaluate_maps(samples: &[Sample], maps: &[ProbabilityMaps], pp: &PostprocessConfig) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if samples.len() != maps.len() {
        return Err(Error::ShapeMismatch { op: "evaluate_maps", left: vec![samples.len()], right: vec![maps.len()] });
    }
    let mut per_image = Vec::with_capacity(samples.len());
    for (s, m) in samples.iter().zip(maps) {
        let (h, w) = (s.height(), s.width());
        let region = binarize(h, w, &m.region, pp.threshold)?;
        let particle_dice = dice_case(&region, &s.region_mask)?;
        let boundary_dice = match &m.edge {
            Some(e) => Some(dice_case(&binarize(h, w, e, pp.threshold)?, &s.edge_mask)?),
            None => None,
        };
        let none = vec![0.0; h * w];
        let edge = m.edge.as_deref().unwrap_or(&none);
        let predicted_count = segment_pipeline(h, w, &m.region, edge, pp)?.count();
        per_image.push(ImageEval { boundary_dice, particle_dice, predicted_count, true_count: s.true_count });
    }
    let boundary: Option<Vec<f64>> = per_image.iter().map(|e| e.boundary_dice).collect();
    let particle: Vec<f64> = per_image.iter().map(|e| e.particle_dice).collect();
    let hits = per_image.iter().filter(|e| e.predicted_count == e.true_count).count();
    Ok(EvalReport {
        boundary_dice: boundary.map(|b| mean(&b)),
        particle_dice: mean(&particle),
        count_accuracy: hits as f64 / per_image.len() as f64,
        per_image,
    })
}

/// Images per inference batch in [`predict_maps`].
const EVAL_BATCH: usize = 8;

/// Eval-mode probability maps for every sample.
pub fn predict_maps(params: &mut OWPSNetParams<f32>, samples: &[Sample]) -> Result<Vec<ProbabilityMaps>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let x = stack_images(&refs)?;
        let (region, edge) = predict(params, &x)?;
        let plane = chunk[0].height() * chunk[0].width();
        for i in 0..chunk.len() {
            let span = i * plane..(i + 1) * plane;
            out.push(ProbabilityMaps {
                region: region.data()[span.clone()].to_vec(),
                edge: edge.as_ref().map(|e| e.data()[span].to_vec()),
            });
        }
    }
    Ok(out)
}

/// Runs the model on `samples` and scores the result.
pub fn evaluate(params: &mut OWPSNetParams<f32>, samples: &[Sample], pp: &PostprocessConfig) -> Result<EvalReport> {
    let maps = predict_maps(params, samples)?;
    evaluate_maps(samples, &maps, pp)
}

fn stack_images(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let first = samples.first().ok_or(Error::Empty("batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::InvalidShape {
                shape: vec![s.height(), s.width()],
                reason: format!("batch mixes extents with {h}×{w}"),
            });
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor::from_vec(&[samples.len(), 3, h, w], data)
}

fn stack_masks(masks: impl Iterator<Item = Vec<f32>>, n: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let data: Vec<f32> = masks.flatten().collect();
    Tensor::from_vec(&[n, 1, h, w], data)
}

/// Summary of an evaluation pass during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub boundary_dice: Option<f64>,
    pub particle_dice: f64,
    pub count_accuracy: f64,
}

impl From<&EvalReport> for EvalSummary {
    fn from(r: &EvalReport) -> Self {
        Self { boundary_dice: r.boundary_dice, particle_dice: r.particle_dice, count_accuracy: r.count_accuracy }
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean total loss over the epoch's batches.
    pub train_loss: f64,
    pub region_loss: f64,
    pub edge_loss: Option<f64>,
    pub eval: Option<EvalSummary>,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,region_loss,edge_loss,boundary_dice,particle_dice,count_acc";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let e = self.eval;
        format!(
            "{},{:.8},{:.8},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.region_loss,
            self.edge_loss.map(|v| format!("{v:.8}")).unwrap_or_default(),
            opt(e.and_then(|e| e.boundary_dice)),
            e.map(|e| format!("{:.6}", e.particle_dice)).unwrap_or_default(),
            e.map(|e| format!("{:.6}", e.count_accuracy)).unwrap_or_default(),
        )
    }
}

/// Append-only CSV of [`EpochLog`] rows.
pub struct MetricsWriter {
    file: fs::File,
    path: PathBuf,
    last_epoch: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(Self { file, path: path.to_path_buf(), last_epoch: 0 })
    }

    pub fn append(&mut self, log: &EpochLog) -> Result<()> {
        if log.epoch <= self.last_epoch {
            return Err(Error::config("metrics", format!("epoch {} after epoch {}", log.epoch, self.last_epoch)));
        }
        self.last_epoch = log.epoch;
        writeln!(self.file, "{}", log.csv_row()).and_then(|_| self.file.flush()).map_err(|e| Error::io(&self.path, e))
    }
}

pub fn metrics_csv(logs: &[EpochLog]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for l in logs {
        out.push_str(&l.csv_row());
        out.push('\n');
    }
    out
}

/// Held-out data scored during training.
#[derive(Clone, Copy, Debug)]
pub struct EvalSet<'a> {
    pub samples: &'a [Sample],
    pub postprocess: PostprocessConfig,
}

pub struct TrainOutcome {
    pub params: OWPSNetParams<f32>,
    pub log: Vec<EpochLog>,
    /// Final evaluation, when an eval set was given.
    pub report: Option<EvalReport>,
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_474D;

/// Trains a fresh model. The seed fixes initialization, shuffling and
/// augmentation. `on_epoch` sees every log row as it is produced.
pub fn train(
    model: &ModelConfig,
    loss: &LossConfig,
    cfg: &TrainConfig,
    train_set: &[Sample],
    eval: Option<EvalSet<'_>>,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.validate()?;
    model.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if train_set.len() < cfg.batch_size {
        return Err(Error::config("train.batch_size", format!("exceeds the {} training samples", train_set.len())));
    }
    let (h, w) = (train_set[0].height(), train_set[0].width());
    model.check_input(&[cfg.batch_size, model.input_channels, h, w])?;

    let mut params = OWPSNetParams::<f32>::new(model, cfg.seed)?;
    let mut adam = AdamState::new(params.params());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut report = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let batches = train_set.len() / cfg.batch_size;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ SHUFFLE_STREAM, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let aug_seed = derive_seed(cfg.seed ^ AUGMENT_STREAM, epoch as u64);
        let (mut sum_total, mut sum_region, mut sum_edge) = (0.0, 0.0, 0.0);

        for b in 0..batches {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let batch: Vec<Sample> =
                idx.iter().map(|&i| augment(&train_set[i], &cfg.augment, derive_seed(aug_seed, i as u64))).collect();
            let (t, r, e) = train_step(&mut params, &mut adam, loss, cfg.lr, &batch)?;
            if !t.is_finite() {
                return Err(Error::Diverged { epoch, loss: t });
            }
            sum_total += t;
            sum_region += r;
            sum_edge += e.unwrap_or(0.0);
        }

        let n = batches as f64;
        let mut row = EpochLog {
            epoch,
            train_loss: sum_total / n,
            region_loss: sum_region / n,
            edge_loss: model.edge_branch.then_some(sum_edge / n),
            eval: None,
        };
        if let Some(set) = &eval {
            if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
                let r = evaluate(&mut params, set.samples, &set.postprocess)?;
                row.eval = Some(EvalSummary::from(&r));
                report = Some(r);
            }
        }
        on_epoch(&row)?;
        log.push(row);
    }
    Ok(TrainOutcome { params, log, report })
}

/// Forward, loss, backward and one Adam update on a batch. Returns the
/// total, region and edge losses.
pub fn train_step(
    params: &mut OWPSNetParams<f32>,
    adam: &mut AdamState<f32>,
    loss: &LossConfig,
    lr: f64,
    batch: &[Sample],
) -> Result<(f64, f64, Option<f64>)> {
    let refs: Vec<&Sample> = batch.iter().collect();
    let x = stack_images(&refs)?;
    let (n, h, w) = (batch.len(), batch[0].height(), batch[0].width());
    let region_t = stack_masks(batch.iter().map(|s| s.region_mask.to_f32()), n, h, w)?;
    let edge_t = stack_masks(batch.iter().map(|s| s.edge_mask.to_f32()), n, h, w)?;

    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = forward(params, &mut tape, xv, Mode::Train)?;
    let finite = tape.value(out.region).is_finite() && out.edge.is_none_or(|e| tape.value(e).is_finite());
    if !finite {
        return Ok((f64::NAN, f64::NAN, out.edge.map(|_| f64::NAN)));
    }
    let rt = tape.constant(region_t);
    let region_loss = loss.loss(&mut tape, loss.region_kind, out.region, rt)?;
    let (total, edge_loss) = match out.edge {
        Some(e) => {
            let et = tape.constant(edge_t);
            let el = loss.loss(&mut tape, loss.edge_kind, e, et)?;
            (total_loss(&mut tape, region_loss, el)?, Some(el))
        }
        None => (region_loss, None),
    };
    let total_v = tape.value(total).item() as f64;
    let region_v = tape.value(region_loss).item() as f64;
    let edge_v = edge_loss.map(|e| tape.value(e).item() as f64);
    if !total_v.is_finite() {
        return Ok((total_v, region_v, edge_v));
    }
    tape.backward(total)?;
    let grads: Vec<Option<&[f32]>> = out.params.iter().map(|&v| tape.grad(v)).collect();
    adam_step(params.params_mut(), &grads, adam, lr)?;
    Ok((total_v, region_v, edge_v))
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OWPS";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    model: ModelConfig,
    stats_updates: Vec<u64>,
}

/// Serializes parameters, running statistics and the model config.
///
/// Layout: `OWPS`, version (u16 LE), header length (u32 LE), JSON header,
/// entry count (u32 LE), then per entry: name length (u32 LE), name bytes,
/// rank (u32 LE), extents (u32 LE each), values (f32 LE). Running
/// statistics follow the parameters as `<layer>.running_mean` and
/// `<layer>.running_var`.
pub fn checkpoint_bytes(params: &OWPSNetParams<f32>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model: *params.config(),
        stats_updates: params.stats().iter().map(|s| s.stats.updates).collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let count = params.params().len() + 2 * params.stats().len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    let mut entry = |name: &str, shape: &[usize], values: &[f32]| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in params.params() {
        entry(&p.name, p.value.shape(), p.value.data());
    }
    for s in params.stats() {
        entry(&format!("{}.running_mean", s.name), &[s.stats.channels()], &s.stats.mean);
        entry(&format!("{}.running_var", s.name), &[s.stats.channels()], &s.stats.var);
    }
    Ok(out)
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint(params: &OWPSNetParams<f32>, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(params)?;
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<OWPSNetParams<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Corrupt {
                path: self.path.to_path_buf(),
                reason: format!("truncated while reading {what} at byte {}", self.pos),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<OWPSNetParams<f32>> {
    let incompatible = |reason: String| Error::Incompatible { path: path.to_path_buf(), reason };
    let corrupt = |reason: String| Error::Corrupt { path: path.to_path_buf(), reason };
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic").ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(incompatible("missing OWPS magic".into()));
    }
    let v = r.take(2, "version")?;
    let version = u16::from_le_bytes([v[0], v[1]]);
    if version != CHECKPOINT_VERSION {
        return Err(incompatible(format!("version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let header_len = r.u32("header length")?;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(header_len, "header")?).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let count = r.u32("entry count")?;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| corrupt("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("extent")?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| corrupt(format!("extents of `{name}` overflow")))?;
        let raw = r.take(numel.saturating_mul(4), "values")?;
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        entries.push((name, shape, values));
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let n_stats = header.stats_updates.len();
    if entries.len() < 2 * n_stats {
        return Err(corrupt("fewer entries than running statistics".into()));
    }
    let split = entries.len() - 2 * n_stats;
    let stat_entries = entries.split_off(split);
    let params = entries
        .into_iter()
        .map(|(name, shape, values)| Ok(Param { name, value: Tensor::from_vec(&shape, values)? }))
        .collect::<Result<Vec<_>>>()?;
    let mut stats = Vec::with_capacity(n_stats);
    for (pair, &updates) in stat_entries.chunks_exact(2).zip(&header.stats_updates) {
        let (mean, var) = (&pair[0], &pair[1]);
        let layer = mean.0.strip_suffix(".running_mean");
        if layer.is_none() || Some(format!("{}.running_var", layer.unwrap_or(""))) != Some(var.0.clone()) {
            return Err(incompatible(format!("unexpected statistics entries `{}`, `{}`", mean.0, var.0)));
        }
        if mean.2.len() != var.2.len() {
            return Err(corrupt(format!("running statistics of `{}` disagree in length", mean.0)));
        }
        stats.push(NamedStats {
            name: layer.unwrap_or_default().to_string(),
            stats: RunningStats { mean: mean.2.clone(), var: var.2.clone(), updates },
        });
    }
    OWPSNetParams::from_parts(header.model, params, stats).map_err(|e| match e {
        Error::Incompatible { reason, .. } => incompatible(reason),
        other => other,
    })
}

/// Model rows of the published result tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "U_Net")]
    UNet,
    #[serde(rename = "OWSNet-without-refine")]
    WithoutRefine,
    #[serde(rename = "OWSNet-BN")]
    Bn,
    #[serde(rename = "OWSNet-IN")]
    In,
    #[serde(rename = "OWSNet-IN-BN")]
    InBn,
    #[serde(rename = "OWSNet-BN-IN")]
    BnIn,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 6] = [Self::UNet, Self::WithoutRefine, Self::In, Self::Bn, Self::InBn, Self::BnIn];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::UNet => "U_Net",
            Self::WithoutRefine => "OWSNet-without-refine",
            Self::Bn => "OWSNet-BN",
            Self::In => "OWSNet-IN",
            Self::InBn => "OWSNet-IN-BN",
            Self::BnIn => "OWSNet-BN-IN",
        }
    }

    /// Applies the variant to `base`, keeping its depth, width and norm constants.
    pub fn config(self, base: &ModelConfig) -> ModelConfig {
        let with = |variant: NormVariant, refine: bool, edge: bool| {
            let mut c = *base;
            c.norm.variant = variant;
            c.refine_enabled = refine;
            c.edge_branch = edge;
            c
        };
        match self {
            Self::UNet => with(NormVariant::Bn, false, false),
            Self::WithoutRefine => with(NormVariant::InBn, false, true),
            Self::Bn => with(NormVariant::Bn, true, true),
            Self::In => with(NormVariant::In, true, true),
            Self::InBn => with(NormVariant::InBn, true, true),
            Self::BnIn => with(NormVariant::BnIn, true, true),
        }
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::config("grid.models", format!("unknown model variant `{s}`")))
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

/// Cartesian product of model variants, (region, edge) loss pairs and batch sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub models: Vec<ModelVariant>,
    pub losses: Vec<(LossKind, LossKind)>,
    pub batches: Vec<usize>,
}

impl GridSpec {
    /// The grid behind one of the four published result tables (1-4).
    pub fn table(n: usize) -> Result<Self> {
        use LossKind::*;
        let same = |k: LossKind| (k, k);
        Ok(match n {
            1 => Self { models: ModelVariant::ALL.to_vec(), losses: vec![same(SquareDice)], batches: vec![2] },
            2 => Self {
                models: vec![ModelVariant::InBn],
                losses: vec![same(Ce), same(Dice), same(ExpLogDice), same(SquareDice), same(ExpSquareDice)],
                batches: vec![2],
            },
            3 => Self {
                models: vec![ModelVariant::InBn],
                losses: vec![(Ce, Ce), (Ce, Dice), (Ce, ExpLogDice), (Ce, SquareDice)],
                batches: vec![2],
            },
            4 => Self {
                models: vec![ModelVariant::InBn, ModelVariant::BnIn, ModelVariant::In, ModelVariant::Bn],
                losses: vec![same(SquareDice)],
                batches: vec![1, 2, 4, 6],
            },
            _ => return Err(Error::config("grid.table", "must be 1, 2, 3 or 4")),
        })
    }

    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &model in &self.models {
            for &(region, edge) in &self.losses {
                for &batch in &self.batches {
                    out.push(GridCell { model, loss_region: region, loss_edge: edge, batch });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.losses.is_empty() || self.batches.is_empty() {
            return Err(Error::config("grid", "every axis needs at least one value"));
        }
        if self.batches.contains(&0) {
            return Err(Error::config("grid.batches", "batch sizes must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridCell {
    pub model: ModelVariant,
    pub loss_region: LossKind,
    pub loss_edge: LossKind,
    pub batch: usize,
}

/// Published boundary/particle dice for a cell, where one exists.
/// Boundary is absent for the region-only U-Net.
pub fn published_reference(cell: &GridCell) -> Option<(Option<f64>, f64)> {
    use LossKind::*;
    use ModelVariant::*;
    let (m, r, e, b) = (cell.model, cell.loss_region, cell.loss_edge, cell.batch);
    let v = match (m, r, e, b) {
        (UNet, SquareDice, _, 2) => (None, 0.9009),
        (WithoutRefine, SquareDice, SquareDice, 2) => (Some(0.2818), 0.9165),
        (InBn, Ce, Ce, 2) => (Some(0.0212), 0.9190),
        (InBn, Dice, Dice, 2) => (Some(0.2225), 0.9181),
        (InBn, ExpLogDice, ExpLogDice, 2) => (Some(0.2190), 0.9218),
        (InBn, ExpSquareDice, ExpSquareDice, 2) => (Some(0.2929), 0.9201),
        (InBn, Ce, Dice, 2) => (Some(0.2214), 0.9168),
        (InBn, Ce, ExpLogDice, 2) => (Some(0.2282), 0.9203),
        (InBn, Ce, SquareDice, 2) => (Some(0.2939), 0.9205),
        (InBn, SquareDice, SquareDice, 1) => (Some(0.2815), 0.9152),
        (InBn, SquareDice, SquareDice, 2) => (Some(0.2863), 0.9187),
        (InBn, SquareDice, SquareDice, 4) => (Some(0.2907), 0.9190),
        (InBn, SquareDice, SquareDice, 6) => (Some(0.2889), 0.9198),
        (BnIn, SquareDice, SquareDice, 1) => (Some(0.2790), 0.9140),
        (BnIn, SquareDice, SquareDice, 2) => (Some(0.2899), 0.9196),
        (BnIn, SquareDice, SquareDice, 4) => (Some(0.2930), 0.9198),
        (BnIn, SquareDice, SquareDice, 6) => (Some(0.2956), 0.9219),
        (In, SquareDice, SquareDice, 1) => (Some(0.2887), 0.9187),
        (In, SquareDice, SquareDice, 2) => (Some(0.2880), 0.9194),
        (In, SquareDice, SquareDice, 4) => (Some(0.2867), 0.9174),
        (In, SquareDice, SquareDice, 6) => (Some(0.2956), 0.9208),
        (Bn, SquareDice, SquareDice, 1) => (Some(0.2671), 0.9018),
        (Bn, SquareDice, SquareDice, 2) => (Some(0.2868), 0.9156),
        (Bn, SquareDice, SquareDice, 4) => (Some(0.2901), 0.9221),
        (Bn, SquareDice, SquareDice, 6) => (Some(0.2898), 0.9202),
        _ => return None,
    };
    Some(v)
}

pub const GRID_HEADER: &str = "model,loss_region,loss_edge,batch,boundary_dice,particle_dice,count_acc,epochs,seed";

/// Shared settings of every grid cell.
#[derive(Clone, Copy, Debug)]
pub struct GridBase {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub postprocess: PostprocessConfig,
}

/// Outcome of one cell: the report, or the error message.
#[derive(Debug)]
pub struct GridRow {
    pub cell: GridCell,
    pub result: std::result::Result<EvalReport, String>,
}

/// Trains and evaluates every cell with the base seed and writes
/// `results.csv` into `out_dir`. A failing cell is recorded and the run
/// continues.
pub fn run_grid(
    spec: &GridSpec,
    base: &GridBase,
    train_set: &[Sample],
    test_set: &[Sample],
    out_dir: &Path,
    mut progress: impl FnMut(usize, &GridRow),
) -> Result<Vec<GridRow>> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::new();
    for (i, cell) in spec.cells().into_iter().enumerate() {
        let model = cell.model.config(&base.model);
        let loss = LossConfig { region_kind: cell.loss_region, edge_kind: cell.loss_edge, ..base.loss };
        let train_cfg = TrainConfig { batch_size: cell.batch, ..base.train };
        let result = train(&model, &loss, &train_cfg, train_set, None, |_| Ok(()))
            .and_then(|mut o| evaluate(&mut o.params, test_set, &base.postprocess))
            .map_err(|e| e.to_string());
        let row = GridRow { cell, result };
        progress(i, &row);
        rows.push(row);
    }
    let path = out_dir.join("results.csv");
    fs::write(&path, grid_csv(&rows, &base.train)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Results table. Lines starting with `#` carry the published
/// values for the same cells and any per-cell failures.
pub fn grid_csv(rows: &[GridRow], train: &TrainConfig) -> String {
    let mut out = String::new();
    for row in rows {
        if let Some((boundary, particle)) = published_reference(&row.cell) {
            let _ = writeln!(
                out,
                "# published: {},{},{},{},{},{:.4}",
                row.cell.model,
                row.cell.loss_region.as_str(),
                edge_column(&row.cell),
                row.cell.batch,
                boundary.map(|b| format!("{b:.4}")).unwrap_or_default(),
                particle
            );
        }
    }
    for (i, row) in rows.iter().enumerate() {
        if let Err(msg) = &row.result {
            let _ = writeln!(out, "# failed row {}: {}", i + 1, msg.replace('\n', " "));
        }
    }
    let _ = writeln!(out, "{GRID_HEADER}");
    for row in rows {
        let c = &row.cell;
        let metrics = match &row.result {
            Ok(r) => format!("{},{:.6},{:.6}", opt(r.boundary_dice), r.particle_dice, r.count_accuracy),
            Err(_) => "NaN,NaN,NaN".to_string(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{metrics},{},{}",
            c.model,
            c.loss_region.as_str(),
            edge_column(c),
            c.batch,
            train.epochs,
            train.seed
        );
    }
    out
}

fn edge_column(cell: &GridCell) -> &'static str {
    if cell.model == ModelVariant::UNet {
        ""
    } else {
        cell.loss_edge.as_str()
    }
}
