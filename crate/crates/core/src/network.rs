//! OWPSNet: a U-Net style encoder shared by a region decoder and a parallel
//! edge decoder, with an optional feature refine module (position and
//! channel attention) in front of the two sigmoid heads.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{composite_norm, Affine, Mode, NormConfig, NormVariant, RunningStats};
use crate::tensor::{lit, Init, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder levels, including the bottleneck.
    pub depth: usize,
    pub base_channels: usize,
    pub norm: NormConfig,
    pub refine_enabled: bool,
    pub input_channels: usize,
    /// Without the edge branch the model is a plain region U-Net.
    pub edge_branch: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 16,
            norm: NormConfig::default(),
            refine_enabled: true,
            input_channels: 3,
            edge_branch: true,
        }
    }
}

impl ModelConfig {
    /// Region-only U-Net with batch normalization and no refinement.
    pub fn unet_baseline() -> Self {
        Self { norm: NormConfig::new(NormVariant::Bn), refine_enabled: false, edge_branch: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config("model.depth", "must be >= 2"));
        }
        if self.depth > 8 {
            return Err(Error::config("model.depth", "must be <= 8"));
        }
        if self.base_channels < 4 {
            return Err(Error::config("model.base_channels", "must be >= 4"));
        }
        if self.refine_enabled && self.base_channels < 8 {
            return Err(Error::config(
                "model.base_channels",
                "the refine module needs >= 8 channels for its attention projections",
            ));
        }
        if self.input_channels == 0 {
            return Err(Error::config("model.input_channels", "must be >= 1"));
        }
        self.norm.validate()
    }

    /// Channel count at encoder level `level` (0-based).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = match shape {
            &[n, c, h, w] => [n, c, h, w],
            _ => {
                return Err(Error::InvalidShape {
                    shape: shape.to_vec(),
                    reason: "expected an N×C×H×W image batch".into(),
                })
            }
        };
        if c != self.input_channels {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected {} input channels", self.input_channels),
            });
        }
        let m = self.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("height and width must be positive multiples of {m}"),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum InitKind {
    He { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: InitKind,
}

#[derive(Default)]
struct Layout {
    params: Vec<ParamSpec>,
    stats: Vec<(String, usize)>,
}

impl Layout {
    fn of(cfg: &ModelConfig) -> Self {
        let mut l = Layout::default();
        let norm = cfg.norm.variant;
        for level in 0..cfg.depth {
            let cin = if level == 0 { cfg.input_channels } else { cfg.channels(level - 1) };
            l.block(&format!("enc{level}"), cin, cfg.channels(level), norm);
        }
        let mut branches = vec!["region"];
        if cfg.edge_branch {
            branches.push("edge");
        }
        for b in &branches {
            for level in (0..cfg.depth - 1).rev() {
                let (hi, lo) = (cfg.channels(level + 1), cfg.channels(level));
                l.push(format!("dec.{b}{level}.up.weight"), vec![hi, lo, 2, 2], InitKind::He { fan_in: hi });
                l.block(&format!("dec.{b}{level}"), 2 * lo, lo, norm);
            }
        }
        let base = cfg.base_channels;
        if cfg.refine_enabled {
            let cin = base * (1 + branches.len());
            l.conv("refine.mix", cin, base, 3, norm == NormVariant::None);
            l.norm("refine.mix_norm", base, norm);
            let reduced = (base / 8).max(1);
            l.conv("refine.query", base, reduced, 1, true);
            l.conv("refine.key", base, reduced, 1, true);
            l.conv("refine.value", base, base, 1, true);
            l.push("refine.gamma_spatial".into(), vec![1], InitKind::Zeros);
            l.push("refine.gamma_channel".into(), vec![1], InitKind::Zeros);
        }
        for b in &branches {
            l.conv(&format!("head.{b}"), base, 1, 1, true);
        }
        l
    }

    fn push(&mut self, name: String, shape: Vec<usize>, init: InitKind) {
        self.params.push(ParamSpec { name, shape, init });
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) {
        self.push(format!("{name}.weight"), vec![cout, cin, k, k], InitKind::He { fan_in: cin * k * k });
        if bias {
            self.push(format!("{name}.bias"), vec![cout], InitKind::Zeros);
        }
    }

    fn norm(&mut self, name: &str, c: usize, variant: NormVariant) {
        if variant.has_affine() {
            self.push(format!("{name}.scale"), vec![c], InitKind::Ones);
            self.push(format!("{name}.shift"), vec![c], InitKind::Zeros);
        }
        if variant.uses_batch_stats() {
            self.stats.push((name.to_string(), c));
        }
    }

    /// Two 3×3 conv + norm + relu stages. Conv biases are dropped when a
    /// normalization follows, since it would cancel them.
    fn block(&mut self, name: &str, cin: usize, cout: usize, variant: NormVariant) {
        let bias = variant == NormVariant::None;
        self.conv(&format!("{name}.conv1"), cin, cout, 3, bias);
        self.norm(&format!("{name}.norm1"), cout, variant);
        self.conv(&format!("{name}.conv2"), cout, cout, 3, bias);
        self.norm(&format!("{name}.norm2"), cout, variant);
    }
}

fn tensor_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer over (seed, index)
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Running statistics of one batch-normalization stage.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedStats {
    pub name: String,
    pub stats: RunningStats,
}

/// Parameters and running statistics of an OWPSNet, in a fixed order that
/// is part of the checkpoint format.
#[derive(Clone, Debug, PartialEq)]
pub struct OWPSNetParams<T: Scalar = f32> {
    cfg: ModelConfig,
    params: Vec<Param<T>>,
    stats: Vec<NamedStats>,
    index: HashMap<String, usize>,
}

/// Builds a freshly initialized f32 model.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<OWPSNetParams<f32>> {
    OWPSNetParams::new(cfg, seed)
}

impl<T: Scalar> OWPSNetParams<T> {
    /// He-uniform kernels, zero biases and gates, unit norm scales.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::of(cfg);
        let mut params = Vec::with_capacity(layout.params.len());
        for (i, spec) in layout.params.iter().enumerate() {
            let init = match spec.init {
                InitKind::He { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Init::Uniform { seed: tensor_seed(seed, i), lo: -bound, hi: bound }
                }
                InitKind::Zeros => Init::Zeros,
                InitKind::Ones => Init::Fill(T::one()),
            };
            params.push(Param {
                name: spec.name.clone(),
                value: Tensor::create(&spec.shape, init)?.with_requires_grad(true),
            });
        }
        let stats =
            layout.stats.into_iter().map(|(name, c)| NamedStats { name, stats: RunningStats::new(c) }).collect();
        Ok(Self::assemble(*cfg, params, stats))
    }

    /// Rebuilds a model from stored tensors, checking names and shapes
    /// against the layout implied by `cfg`.
    pub fn from_parts(cfg: ModelConfig, params: Vec<Param<T>>, stats: Vec<NamedStats>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::of(&cfg);
        let mismatch = |reason: String| Error::Incompatible { path: Default::default(), reason };
        if params.len() != layout.params.len() {
            return Err(mismatch(format!(
                "expected {} parameter tensors, found {}",
                layout.params.len(),
                params.len()
            )));
        }
        for (p, spec) in params.iter().zip(&layout.params) {
            if p.name != spec.name || p.value.shape() != spec.shape.as_slice() {
                return Err(mismatch(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        if stats.len() != layout.stats.len()
            || stats
                .iter()
                .zip(&layout.stats)
                .any(|(s, (name, c))| &s.name != name || s.stats.channels() != *c || s.stats.var.len() != *c)
        {
            return Err(mismatch("running statistics do not match the model layout".into()));
        }
        let params =
            params.into_iter().map(|p| Param { name: p.name, value: p.value.with_requires_grad(true) }).collect();
        Ok(Self::assemble(cfg, params, stats))
    }

    fn assemble(cfg: ModelConfig, params: Vec<Param<T>>, stats: Vec<NamedStats>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self { cfg, params, stats, index }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn stats(&self) -> &[NamedStats] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [NamedStats] {
        &mut self.stats
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    /// Total number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Converts every parameter to another element type.
    pub fn cast<U: Scalar>(&self) -> OWPSNetParams<U> {
        let params = self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect();
        OWPSNetParams::assemble(self.cfg, params, self.stats.clone())
    }
}

/// Tape handles produced by [`forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// N×1×H×W region probabilities.
    pub region: Var,
    /// N×1×H×W edge probabilities; absent for the region-only baseline.
    pub edge: Option<Var>,
    /// One handle per parameter, in [`OWPSNetParams::params`] order.
    pub params: Vec<Var>,
}

/// Handles of the position-attention projections.
#[derive(Clone, Copy, Debug)]
pub struct SpatialAttention {
    pub query: (Var, Var),
    pub key: (Var, Var),
    pub value: (Var, Var),
    pub gamma: Var,
}

impl SpatialAttention {
    /// N×P×P row-stochastic affinity over the P = H·W positions.
    pub fn affinity<T: Scalar>(&self, tape: &mut Tape<T>, f: Var) -> Result<Var> {
        let [n, _, h, w] = tape.value(f).dims4()?;
        let q = tape.conv2d(f, self.query.0, Some(self.query.1), 1, 0)?;
        let k = tape.conv2d(f, self.key.0, Some(self.key.1), 1, 0)?;
        let c = tape.shape(q)[1];
        let q = tape.reshape(q, &[n, c, h * w])?;
        let k = tape.reshape(k, &[n, c, h * w])?;
        tape.affinity_softmax(q, k)
    }

    /// Attention-weighted values, before the gate and residual.
    pub fn attend<T: Scalar>(&self, tape: &mut Tape<T>, f: Var) -> Result<Var> {
        let [n, c, h, w] = tape.value(f).dims4()?;
        let a = self.affinity(tape, f)?;
        let v = tape.conv2d(f, self.value.0, Some(self.value.1), 1, 0)?;
        let v = tape.reshape(v, &[n, c, h * w])?;
        let out = tape.bmm(v, a, false, true)?;
        tape.reshape(out, &[n, c, h, w])
    }

    /// `γ_s · attend(f) + f`.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, f: Var) -> Result<Var> {
        let a = self.attend(tape, f)?;
        let g = tape.scale_by(a, self.gamma)?;
        tape.add(g, f)
    }
}

/// Handle of the channel-attention gate.
#[derive(Clone, Copy, Debug)]
pub struct ChannelAttention {
    pub gamma: Var,
}

impl ChannelAttention {
    /// N×C×C softmax of the channel Gram matrix.
    pub fn affinity<T: Scalar>(&self, tape: &mut Tape<T>, f: Var) -> Result<Var> {
        let [n, c, h, w] = tape.value(f).dims4()?;
        let x = tape.reshape(f, &[n, c, h * w])?;
        let gram = tape.bmm(x, x, false, true)?;
        tape.softmax_last(gram)
    }

    pub fn attend<T: Scalar>(&self, tape: &mut Tape<T>, f: Var) -> Result<Var> {
        let [n, c, h, w] = tape.value(f).dims4()?;
        let a = self.affinity(tape, f)?;
        let x = tape.reshape(f, &[n, c, h * w])?;
        let out = tape.bmm(a, x, false, false)?;
        tape.reshape(out, &[n, c, h, w])
    }

    /// `γ_c · attend(f) + f`.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, f: Var) -> Result<Var> {
        let a = self.attend(tape, f)?;
        let g = tape.scale_by(a, self.gamma)?;
        tape.add(g, f)
    }
}

struct Ctx<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    vars: &'a HashMap<&'a str, Var>,
    stats: &'a mut [NamedStats],
    norm: NormConfig,
    mode: Mode,
}

impl<T: Scalar> Ctx<'_, T> {
    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingGrad(format!("parameter `{name}` is not in the model")))
    }

    fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    fn conv(&mut self, name: &str, x: Var, pad: usize) -> Result<Var> {
        let w = self.var(&format!("{name}.weight"))?;
        let b = self.opt(&format!("{name}.bias"));
        self.tape.conv2d(x, w, b, 1, pad)
    }

    fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let affine = match (self.opt(&format!("{name}.scale")), self.opt(&format!("{name}.shift"))) {
            (Some(scale), Some(shift)) => Some(Affine { scale, shift }),
            _ => None,
        };
        let stats = self.stats.iter_mut().find(|s| s.name == name).map(|s| &mut s.stats);
        composite_norm(self.tape, x, &self.norm, self.mode, stats, affine)
    }

    fn conv_norm_relu(&mut self, conv: &str, norm: &str, x: Var) -> Result<Var> {
        let y = self.conv(conv, x, 1)?;
        let y = self.norm(norm, y)?;
        Ok(self.tape.relu(y))
    }

    fn block(&mut self, name: &str, x: Var) -> Result<Var> {
        let y = self.conv_norm_relu(&format!("{name}.conv1"), &format!("{name}.norm1"), x)?;
        self.conv_norm_relu(&format!("{name}.conv2"), &format!("{name}.norm2"), y)
    }

    fn decode(&mut self, branch: &str, bottleneck: Var, skips: &[Var]) -> Result<Var> {
        let mut y = bottleneck;
        for level in (0..skips.len()).rev() {
            let w = self.var(&format!("dec.{branch}{level}.up.weight"))?;
            let up = self.tape.transposed_conv2d(y, w, 2)?;
            let cat = self.tape.concat_channels(skips[level], up)?;
            y = self.block(&format!("dec.{branch}{level}"), cat)?;
        }
        Ok(y)
    }

    fn spatial(&self) -> Result<SpatialAttention> {
        let pair = |n: &str| -> Result<(Var, Var)> {
            Ok((self.var(&format!("refine.{n}.weight"))?, self.var(&format!("refine.{n}.bias"))?))
        };
        Ok(SpatialAttention {
            query: pair("query")?,
            key: pair("key")?,
            value: pair("value")?,
            gamma: self.var("refine.gamma_spatial")?,
        })
    }

    /// Mixes the concatenated maps down to the base width, then sums the
    /// position- and channel-attention branches onto one shared residual.
    fn refine(&mut self, maps: &[Var]) -> Result<Var> {
        let mut cat = maps[0];
        for &m in &maps[1..] {
            cat = self.tape.concat_channels(cat, m)?;
        }
        let f = self.conv_norm_relu("refine.mix", "refine.mix_norm", cat)?;
        let sa = self.spatial()?;
        let ca = ChannelAttention { gamma: self.var("refine.gamma_channel")? };
        let p = sa.attend(self.tape, f)?;
        let p = self.tape.scale_by(p, sa.gamma)?;
        let q = ca.attend(self.tape, f)?;
        let q = self.tape.scale_by(q, ca.gamma)?;
        let pq = self.tape.add(p, q)?;
        self.tape.add(f, pq)
    }

    fn head(&mut self, branch: &str, x: Var) -> Result<Var> {
        let logits = self.conv(&format!("head.{branch}"), x, 0)?;
        Ok(self.tape.sigmoid(logits))
    }
}

/// Records the network on `tape`. Train mode uses batch statistics and
/// updates the running statistics held in `params`.
pub fn forward<T: Scalar>(
    params: &mut OWPSNetParams<T>,
    tape: &mut Tape<T>,
    image: Var,
    mode: Mode,
) -> Result<ForwardOutput> {
    let cfg = params.cfg;
    cfg.check_input(tape.shape(image))?;
    let handles: Vec<Var> = params.params.iter().map(|p| tape.param(&p.value)).collect();
    let vars: HashMap<&str, Var> = params.params.iter().map(|p| p.name.as_str()).zip(handles.iter().copied()).collect();
    let mut ctx = Ctx { tape, vars: &vars, stats: &mut params.stats, norm: cfg.norm, mode };

    let mut skips = Vec::with_capacity(cfg.depth);
    let mut x = image;
    for level in 0..cfg.depth {
        if level > 0 {
            x = ctx.tape.maxpool2d(x)?;
        }
        x = ctx.block(&format!("enc{level}"), x)?;
        skips.push(x);
    }
    let bottleneck = skips.pop().expect("depth >= 2");

    let region_feat = ctx.decode("region", bottleneck, &skips)?;
    let edge_feat = if cfg.edge_branch { Some(ctx.decode("edge", bottleneck, &skips)?) } else { None };

    let (region_in, edge_in) = if cfg.refine_enabled {
        let mut maps = vec![skips[0], region_feat];
        maps.extend(edge_feat);
        let refined = ctx.refine(&maps)?;
        (refined, edge_feat.map(|_| refined))
    } else {
        (region_feat, edge_feat)
    };

    let region = ctx.head("region", region_in)?;
    let edge = match edge_in {
        Some(e) => Some(ctx.head("edge", e)?),
        None => None,
    };
    Ok(ForwardOutput { region, edge, params: handles })
}

/// Eval-mode probabilities for an image batch: `(region, edge)`.
pub fn predict<T: Scalar>(params: &mut OWPSNetParams<T>, image: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let out = forward(params, &mut tape, x, Mode::Eval)?;
    let edge = out.edge.map(|e| tape.value(e).clone());
    Ok((tape.value(out.region).clone(), edge))
}

/// Feature refine as a free function: concatenates `enc_first` with
/// `dec_last`, mixes with a 3×3 conv (`mix_weight`, `mix_bias`) and relu,
/// then adds the gated position- and channel-attention outputs.
pub fn feature_refine<T: Scalar>(
    tape: &mut Tape<T>,
    enc_first: Var,
    dec_last: Var,
    mix_weight: Var,
    mix_bias: Var,
    spatial: &SpatialAttention,
    channel: &ChannelAttention,
) -> Result<Var> {
    let cat = tape.concat_channels(enc_first, dec_last)?;
    let f = tape.conv2d(cat, mix_weight, Some(mix_bias), 1, 1)?;
    let f = tape.relu(f);
    let p = spatial.attend(tape, f)?;
    let p = tape.scale_by(p, spatial.gamma)?;
    let q = channel.attend(tape, f)?;
    let q = tape.scale_by(q, channel.gamma)?;
    let pq = tape.add(p, q)?;
    tape.add(f, pq)
}

/// Single-value tensor for gates in tests and tools.
pub fn gate<T: Scalar>(v: f64) -> Tensor<T> {
    Tensor::scalar(lit(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{LossConfig, LossKind};
    use crate::tensor::relative_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(refine: bool, variant: NormVariant) -> ModelConfig {
        ModelConfig {
            depth: 2,
            base_channels: 8,
            norm: NormConfig::new(variant),
            refine_enabled: refine,
            ..ModelConfig::default()
        }
    }

    fn random<T: Scalar>(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<T> {
        Tensor::create(shape, Init::Uniform { seed, lo, hi }).unwrap()
    }

    fn binary<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| if rng.random_bool(0.3) { T::one() } else { T::zero() }).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = [
            ModelConfig { depth: 1, ..ModelConfig::default() },
            ModelConfig { base_channels: 2, ..ModelConfig::default() },
            ModelConfig { base_channels: 4, refine_enabled: true, ..ModelConfig::default() },
        ];
        for cfg in bad {
            assert!(build_model(&cfg, 0).is_err(), "{cfg:?}");
        }
        let ok = ModelConfig { base_channels: 4, refine_enabled: false, ..ModelConfig::default() };
        assert!(build_model(&ok, 0).is_ok());
    }

    #[test]
    fn encoder_channels_double() {
        let cfg = ModelConfig::default();
        let chans: Vec<usize> = (0..cfg.depth).map(|l| cfg.channels(l)).collect();
        assert_eq!(chans, [16, 32, 64, 128]);
        let m = build_model(&cfg, 1).unwrap();
        for (l, c) in chans.iter().enumerate() {
            assert_eq!(m.get(&format!("enc{l}.conv2.weight")).unwrap().shape()[0], *c);
        }
    }

    #[test]
    fn deterministic_init() {
        let cfg = small(true, NormVariant::InBn);
        let a = build_model(&cfg, 5).unwrap();
        let b = build_model(&cfg, 5).unwrap();
        assert_eq!(a, b);
        let c = build_model(&cfg, 6).unwrap();
        assert_ne!(a, c);
        let names: std::collections::HashSet<_> = a.params().iter().map(|p| &p.name).collect();
        assert_eq!(names.len(), a.params().len());
    }

    #[test]
    fn refine_adds_parameters() {
        let with = build_model(&ModelConfig::default(), 0).unwrap().num_parameters();
        let without =
            build_model(&ModelConfig { refine_enabled: false, ..ModelConfig::default() }, 0).unwrap().num_parameters();
        assert!(with > without);
        let unet = build_model(&ModelConfig::unet_baseline(), 0).unwrap().num_parameters();
        assert!(unet < without);
    }

    #[test]
    fn output_shapes_and_range() {
        for (refine, variant, edge) in [
            (true, NormVariant::InBn, true),
            (false, NormVariant::Bn, true),
            (false, NormVariant::None, false),
            (true, NormVariant::In, false),
        ] {
            let cfg = ModelConfig { edge_branch: edge, ..small(refine, variant) };
            let mut m = build_model(&cfg, 3).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(random(&[2, 3, 16, 8], 1, 0.0, 1.0));
            let out = forward(&mut m, &mut tape, x, Mode::Train).unwrap();
            let r = tape.value(out.region);
            assert_eq!(r.shape(), [2, 1, 16, 8]);
            assert!(r.data().iter().all(|&v| v > 0.0 && v < 1.0));
            assert_eq!(out.edge.is_some(), edge);
            if let Some(e) = out.edge {
                assert_eq!(tape.shape(e), [2, 1, 16, 8]);
                assert!(tape.value(e).data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut m = build_model(&small(false, NormVariant::In), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 10, 16]).unwrap());
        assert!(matches!(forward(&mut m, &mut tape, x, Mode::Train), Err(Error::InvalidShape { .. })));
        let x = tape.constant(Tensor::zeros(&[1, 1, 16, 16]).unwrap());
        assert!(forward(&mut m, &mut tape, x, Mode::Train).is_err());
    }

    #[test]
    fn eval_requires_running_stats() {
        let mut m = build_model(&small(false, NormVariant::Bn), 0).unwrap();
        let img = random(&[1, 3, 8, 8], 2, 0.0, 1.0);
        assert!(matches!(predict(&mut m, &img), Err(Error::NoRunningStats)));
        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        forward(&mut m, &mut tape, x, Mode::Train).unwrap();
        let (a, _) = predict(&mut m, &img).unwrap();
        let (b, _) = predict(&mut m, &img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small(true, NormVariant::InBn);
        let img = random(&[2, 3, 8, 8], 4, 0.0, 1.0);
        let run = || {
            let mut m = build_model(&cfg, 9).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(img.clone());
            let out = forward(&mut m, &mut tape, x, Mode::Train).unwrap();
            (tape.value(out.region).clone(), tape.value(out.edge.unwrap()).clone(), m)
        };
        assert_eq!(run(), run());
    }

    fn spatial_handles(tape: &mut Tape<f64>, c: usize, gamma: f64) -> SpatialAttention {
        let r = c / 8;
        let mut pair = |o: usize, seed: u64| {
            (tape.param(&random(&[o, c, 1, 1], seed, -0.5, 0.5)), tape.param(&random(&[o], seed + 100, -0.1, 0.1)))
        };
        let query = pair(r, 1);
        let key = pair(r, 2);
        let value = pair(c, 3);
        SpatialAttention { query, key, value, gamma: tape.param(&gate(gamma)) }
    }

    #[test]
    fn attention_identity_at_zero_gate() {
        let mut tape = Tape::<f64>::new();
        let f0 = random::<f64>(&[2, 16, 4, 4], 11, -2.0, 2.0);
        let f = tape.constant(f0.clone());
        let sa = spatial_handles(&mut tape, 16, 0.0);
        let ca = ChannelAttention { gamma: tape.param(&gate(0.0)) };
        let s = sa.apply(&mut tape, f).unwrap();
        let c = ca.apply(&mut tape, f).unwrap();
        assert_eq!(tape.value(s), &f0);
        assert_eq!(tape.value(c), &f0);
    }

    #[test]
    fn affinity_rows_are_stochastic() {
        let mut tape = Tape::<f32>::new();
        let f = tape.constant(random(&[2, 16, 8, 8], 12, -1.0, 1.0));
        let mk = |tape: &mut Tape<f32>, o: usize, s: u64| {
            (tape.param(&random(&[o, 16, 1, 1], s, -0.5, 0.5)), tape.param(&Tensor::zeros(&[o]).unwrap()))
        };
        let sa = SpatialAttention {
            query: mk(&mut tape, 2, 1),
            key: mk(&mut tape, 2, 2),
            value: mk(&mut tape, 16, 3),
            gamma: tape.param(&gate(0.0)),
        };
        let ca = ChannelAttention { gamma: sa.gamma };
        for (a, rows) in [(sa.affinity(&mut tape, f).unwrap(), 64), (ca.affinity(&mut tape, f).unwrap(), 16)] {
            let v = tape.value(a);
            assert_eq!(v.shape(), [2, rows, rows]);
            for row in v.data().chunks(rows) {
                let s: f64 = row.iter().map(|&x| x as f64).sum();
                assert!((s - 1.0).abs() < 1e-5, "{s}");
            }
        }
    }

    #[test]
    fn channel_permutation_commutes_at_init() {
        let mut tape = Tape::<f64>::new();
        let f0 = random::<f64>(&[1, 8, 4, 4], 13, -1.0, 1.0);
        let perm = [3, 0, 7, 1, 6, 2, 5, 4];
        let mut fp = f0.clone();
        for (dst, &src) in perm.iter().enumerate() {
            fp.data_mut()[dst * 16..(dst + 1) * 16].copy_from_slice(&f0.data()[src * 16..(src + 1) * 16]);
        }
        let ca = ChannelAttention { gamma: tape.param(&gate(0.0)) };
        let a = tape.constant(f0);
        let b = tape.constant(fp);
        let ya = ca.apply(&mut tape, a).unwrap();
        let yb = ca.apply(&mut tape, b).unwrap();
        let (ya, yb) = (tape.value(ya).data(), tape.value(yb).data());
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(&yb[dst * 16..(dst + 1) * 16], &ya[src * 16..(src + 1) * 16]);
        }
    }

    #[test]
    fn feature_refine_reduces_to_mix_at_zero_gates() {
        let mut tape = Tape::<f64>::new();
        let enc = tape.constant(random(&[1, 8, 4, 4], 20, -1.0, 1.0));
        let dec = tape.constant(random(&[1, 8, 4, 4], 21, -1.0, 1.0));
        let w = tape.param(&random(&[8, 16, 3, 3], 22, -0.3, 0.3));
        let b = tape.param(&random(&[8], 23, -0.1, 0.1));
        let sa = spatial_handles(&mut tape, 8, 0.0);
        let ca = ChannelAttention { gamma: tape.param(&gate(0.0)) };
        let out = feature_refine(&mut tape, enc, dec, w, b, &sa, &ca).unwrap();
        let cat = tape.concat_channels(enc, dec).unwrap();
        let mix = tape.conv2d(cat, w, Some(b), 1, 1).unwrap();
        let mix = tape.relu(mix);
        assert_eq!(tape.value(out), tape.value(mix));
        assert_eq!(tape.shape(out), [1, 8, 4, 4]);
        let wrong = tape.constant(Tensor::zeros(&[1, 8, 2, 2]).unwrap());
        assert!(feature_refine(&mut tape, enc, wrong, w, b, &sa, &ca).is_err());
    }

    fn total_loss_f64(
        m: &mut OWPSNetParams<f64>,
        tape: &mut Tape<f64>,
        img: &Tensor<f64>,
        region_t: &Tensor<f64>,
        edge_t: &Tensor<f64>,
    ) -> Result<(Var, ForwardOutput)> {
        let cfg = LossConfig { region_kind: LossKind::Ce, edge_kind: LossKind::SquareDice, ..LossConfig::default() };
        let x = tape.constant(img.clone());
        let out = forward(m, tape, x, Mode::Train)?;
        let rt = tape.constant(region_t.clone());
        let et = tape.constant(edge_t.clone());
        let lr = cfg.loss(tape, cfg.region_kind, out.region, rt)?;
        let le = cfg.loss(tape, cfg.edge_kind, out.edge.unwrap(), et)?;
        Ok((tape.add(lr, le)?, out))
    }

    #[test]
    fn no_dead_parameters() {
        let cfg = small(true, NormVariant::InBn);
        let mut m = OWPSNetParams::<f64>::new(&cfg, 4).unwrap();
        let img = random(&[2, 3, 16, 16], 30, 0.0, 1.0);
        let rt = binary(&[2, 1, 16, 16], 31);
        let et = binary(&[2, 1, 16, 16], 32);
        let grads = |m: &mut OWPSNetParams<f64>| {
            let mut tape = Tape::new();
            let (l, out) = total_loss_f64(m, &mut tape, &img, &rt, &et).unwrap();
            tape.backward(l).unwrap();
            out.params.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect::<Vec<_>>()
        };
        let gated = |name: &str| ["refine.query", "refine.key", "refine.value"].iter().any(|p| name.starts_with(p));
        let g0 = grads(&mut m);
        for (p, g) in m.params().iter().zip(&g0) {
            let nonzero = g.iter().any(|&v| v != 0.0);
            // The attention projections sit behind zero gates at init.
            assert_eq!(nonzero, !gated(&p.name), "{}", p.name);
        }
        m.get_mut("refine.gamma_spatial").unwrap().data_mut()[0] = 0.1;
        m.get_mut("refine.gamma_channel").unwrap().data_mut()[0] = 0.1;
        let g1 = grads(&mut m);
        for (p, g) in m.params().iter().zip(&g1) {
            assert!(g.iter().any(|&v| v != 0.0), "{}", p.name);
        }
    }

    #[test]
    fn first_layer_gradient_matches_finite_differences() {
        let cfg = small(true, NormVariant::InBn);
        let base = OWPSNetParams::<f64>::new(&cfg, 8).unwrap();
        let img = random(&[1, 3, 16, 16], 40, 0.0, 1.0);
        let rt = binary(&[1, 1, 16, 16], 41);
        let et = binary(&[1, 1, 16, 16], 42);
        let kernel = base.get("enc0.conv1.weight").unwrap().clone();
        let idx: Vec<usize> = (0..kernel.numel()).step_by(17).collect();
        let mut m = base.clone();
        let mut tape = Tape::new();
        let (l, out) = total_loss_f64(&mut m, &mut tape, &img, &rt, &et).unwrap();
        tape.backward(l).unwrap();
        let analytic = tape.grad(out.params[0]).unwrap().to_vec();
        let eval = |k: &Tensor<f64>| {
            let mut m = base.clone();
            *m.get_mut("enc0.conv1.weight").unwrap() = k.clone();
            let mut tape = Tape::new();
            let (l, _) = total_loss_f64(&mut m, &mut tape, &img, &rt, &et).unwrap();
            tape.value(l).item()
        };
        let h = 1e-5;
        for &i in &idx {
            let mut plus = kernel.clone();
            plus.data_mut()[i] += h;
            let mut minus = kernel.clone();
            minus.data_mut()[i] -= h;
            let num = (eval(&plus) - eval(&minus)) / (plus.data()[i] - minus.data()[i]);
            let err = relative_error(analytic[i], num);
            assert!(err < 1e-3, "index {i}: {} vs {num} ({err})", analytic[i]);
        }
    }

    #[test]
    fn cast_and_from_parts_round_trip() {
        let cfg = small(true, NormVariant::Bn);
        let m = build_model(&cfg, 2).unwrap();
        let back: OWPSNetParams<f32> = m.cast::<f64>().cast();
        assert_eq!(back, m);
        let rebuilt = OWPSNetParams::from_parts(cfg, m.params().to_vec(), m.stats().to_vec()).unwrap();
        assert_eq!(rebuilt, m);
        let mut short = m.params().to_vec();
        short.pop();
        assert!(OWPSNetParams::from_parts(cfg, short, m.stats().to_vec()).is_err());
        let other = small(false, NormVariant::Bn);
        assert!(OWPSNetParams::from_parts(other, m.params().to_vec(), m.stats().to_vec()).is_err());
    }
}
