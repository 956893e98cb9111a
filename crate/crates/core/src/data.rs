//! Synthetic overlapping-particle scenes, edge labels, online augmentation
//! and the on-disk dataset format.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::{
    connected_components, morph_open, subtract_edge, BinaryMask, Connectivity, InstanceMap, StructuringElement,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneConfig {
    pub height: usize,
    pub width: usize,
    pub count_min: usize,
    pub count_max: usize,
    /// Range of ellipse semi-axes in pixels.
    pub axis_min: f64,
    pub axis_max: f64,
    /// Probability that a particle is chained onto the previous one.
    pub overlap_prob: f64,
    /// Per-channel background level range.
    pub background_min: f64,
    pub background_max: f64,
    /// Largest brightness change across the image from the illumination gradient.
    pub gradient_max: f64,
    /// Per-channel particle color range.
    pub particle_min: f64,
    pub particle_max: f64,
    /// Pixel noise standard deviation.
    pub noise_std: f64,
    pub edge_width: usize,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            count_min: 2,
            count_max: 4,
            axis_min: 7.0,
            axis_max: 13.0,
            overlap_prob: 0.85,
            background_min: 0.55,
            background_max: 0.95,
            gradient_max: 0.25,
            particle_min: 0.05,
            particle_max: 0.5,
            noise_std: 0.02,
            edge_width: 1,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("data.height", "image extents must be >= 8"));
        }
        if self.count_min < 1 || self.count_max < self.count_min {
            return Err(Error::config("data.count_min", "need 1 <= count_min <= count_max"));
        }
        if !(self.axis_min >= 2.0 && self.axis_max >= self.axis_min) {
            return Err(Error::config("data.axis_min", "need 2 <= axis_min <= axis_max"));
        }
        if !unit(self.overlap_prob) {
            return Err(Error::config("data.overlap_prob", "must lie in [0, 1]"));
        }
        if !(unit(self.background_min) && unit(self.background_max) && self.background_min <= self.background_max) {
            return Err(Error::config("data.background_min", "background range must lie in [0, 1]"));
        }
        if !(unit(self.particle_min) && unit(self.particle_max) && self.particle_min <= self.particle_max) {
            return Err(Error::config("data.particle_min", "particle color range must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gradient_max) {
            return Err(Error::config("data.gradient_max", "must lie in [0, 1]"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("data.noise_std", "must be >= 0"));
        }
        if self.edge_width < 1 {
            return Err(Error::config("data.edge_width", "must be >= 1"));
        }
        Ok(())
    }
}

/// One labelled scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// 3×H×W, values in [0, 1].
    pub image: Tensor<f32>,
    pub region_mask: BinaryMask,
    pub edge_mask: BinaryMask,
    pub instance_map: InstanceMap,
    pub true_count: usize,
}

impl Sample {
    /// Assembles a sample from an image and its instance map, deriving the
    /// region and edge masks.
    pub fn from_instances(image: Tensor<f32>, instance_map: InstanceMap, edge_width: usize) -> Result<Self> {
        let (h, w) = instance_map.shape();
        if image.shape() != [3, h, w] {
            return Err(Error::InvalidShape {
                shape: image.shape().to_vec(),
                reason: format!("expected a 3×{h}×{w} image"),
            });
        }
        let edge_mask = derive_edge_labels(&instance_map, edge_width)?;
        Ok(Self {
            image,
            region_mask: instance_map.foreground(),
            true_count: instance_map.count(),
            edge_mask,
            instance_map,
        })
    }

    pub fn height(&self) -> usize {
        self.instance_map.height()
    }

    pub fn width(&self) -> usize {
        self.instance_map.width()
    }
}

/// Edge pixels: within Chebyshev distance `width - 1` of a foreground pixel
/// whose 4-neighbourhood holds a different label (background or another
/// instance). Pixels outside the image do not count as neighbours.
pub fn derive_edge_labels(map: &InstanceMap, width: usize) -> Result<BinaryMask> {
    if width < 1 {
        return Err(Error::config("edge_width", "must be >= 1"));
    }
    let (h, w) = map.shape();
    let seeds = BinaryMask::from_fn(h, w, |y, x| {
        let l = map.get(y, x);
        if l == 0 {
            return false;
        }
        let differs = |ny: usize, nx: usize| map.get(ny, nx) != l;
        (y > 0 && differs(y - 1, x))
            || (y + 1 < h && differs(y + 1, x))
            || (x > 0 && differs(y, x - 1))
            || (x + 1 < w && differs(y, x + 1))
    });
    Ok(crate::postprocess::dilate(&seeds, StructuringElement::square(2 * width - 1)))
}

pub(crate) fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
    color: [f64; 3],
}

impl Ellipse {
    /// Squared normalized radius of pixel centre (y, x); <= 1 inside.
    fn rho2(&self, y: usize, x: usize) -> f64 {
        let (dy, dx) = (y as f64 - self.cy, x as f64 - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v
    }
}

const MIN_VISIBLE_FRACTION: f64 = 0.4;
const MIN_VISIBLE_PIXELS: usize = 25;
const MAX_ATTEMPTS: usize = 200;

fn sample_color(rng: &mut ChaCha8Rng, cfg: &SyntheticSceneConfig, avoid: &[[f64; 3]]) -> [f64; 3] {
    let mut best = [0.0; 3];
    let mut best_dist = -1.0;
    for _ in 0..20 {
        let c = [0; 3].map(|_| rng.random_range(cfg.particle_min..=cfg.particle_max));
        let d = avoid
            .iter()
            .map(|o| o.iter().zip(&c).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        if d > best_dist {
            best = c;
            best_dist = d;
        }
        if d >= 0.25 {
            break;
        }
    }
    best
}

fn place(rng: &mut ChaCha8Rng, cfg: &SyntheticSceneConfig, k: usize) -> Vec<Ellipse> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let mut out: Vec<Ellipse> = Vec::with_capacity(k);
    while out.len() < k {
        let a = rng.random_range(cfg.axis_min..=cfg.axis_max);
        let b = rng.random_range(cfg.axis_min..=cfg.axis_max);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let r = a.max(b);
        let margin = (r * 0.5).min(h / 4.0).min(w / 4.0);
        let (mut cy, mut cx) = (0.0, 0.0);
        let mut ok = false;
        for _ in 0..50 {
            if let (Some(prev), true) = (out.last(), rng.random_bool(cfg.overlap_prob)) {
                let d = (prev.a.max(prev.b) + r) * 0.5 * rng.random_range(0.6..0.9);
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                cy = prev.cy + d * phi.sin();
                cx = prev.cx + d * phi.cos();
            } else {
                cy = rng.random_range(0.0..h);
                cx = rng.random_range(0.0..w);
            }
            if cy >= margin && cy <= h - 1.0 - margin && cx >= margin && cx <= w - 1.0 - margin {
                ok = true;
                break;
            }
        }
        if !ok {
            return out;
        }
        let avoid: Vec<[f64; 3]> = out.iter().map(|e| e.color).collect();
        let color = sample_color(rng, cfg, &avoid);
        out.push(Ellipse { cy, cx, a, b, theta, color });
    }
    out
}

/// Every instance is large enough, in one 4-connected piece, and stays one
/// piece after its edge band is removed and the remainder opened.
fn scene_is_valid(full_pixels: &[usize], map: &InstanceMap, edge: &BinaryMask) -> bool {
    if map.count() != full_pixels.len() {
        return false;
    }
    for (i, &full) in full_pixels.iter().enumerate() {
        let label = i as u32 + 1;
        let inst = map.instance(label);
        let visible = inst.count_ones();
        if visible < MIN_VISIBLE_PIXELS || (visible as f64) < MIN_VISIBLE_FRACTION * full as f64 {
            return false;
        }
        if connected_components(&inst, Connectivity::Four).count() != 1 {
            return false;
        }
        let core = morph_open(&subtract_edge(&inst, edge).expect("same shape"), StructuringElement::default());
        if connected_components(&core, Connectivity::Four).count() != 1 {
            return false;
        }
    }
    true
}

/// Draws a scene: filled ellipses (later ones occlude earlier ones) with
/// rim shading on a tinted background with an illumination gradient.
pub fn generate_scene(cfg: &SyntheticSceneConfig, seed: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    for _ in 0..MAX_ATTEMPTS {
        let k = rng.random_range(cfg.count_min..=cfg.count_max);
        let ellipses = place(&mut rng, cfg, k);
        if ellipses.len() != k {
            continue;
        }
        let mut labels = vec![0u32; h * w];
        let mut full = vec![0usize; k];
        for (i, e) in ellipses.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if e.rho2(y, x) <= 1.0 {
                        labels[y * w + x] = i as u32 + 1;
                        full[i] += 1;
                    }
                }
            }
        }
        let map = InstanceMap::from_labels(h, w, labels.clone())?;
        if map.count() != k {
            continue;
        }
        // from_labels renumbers by first appearance; reorder the full sizes to match.
        let mut by_label = Vec::with_capacity(k);
        let mut seen = vec![false; k + 1];
        for &l in &labels {
            if l != 0 && !seen[l as usize] {
                seen[l as usize] = true;
                by_label.push(full[l as usize - 1]);
            }
        }
        let edge = derive_edge_labels(&map, cfg.edge_width)?;
        if !scene_is_valid(&by_label, &map, &edge) {
            continue;
        }
        let image = render(&mut rng, cfg, &ellipses, &labels);
        return Sample::from_instances(image, map, cfg.edge_width);
    }
    Err(Error::Degenerate("no valid scene found; widen the particle size range or image size"))
}

fn render(rng: &mut ChaCha8Rng, cfg: &SyntheticSceneConfig, ellipses: &[Ellipse], labels: &[u32]) -> Tensor<f32> {
    let (h, w) = (cfg.height, cfg.width);
    let bg = [0; 3].map(|_| rng.random_range(cfg.background_min..=cfg.background_max));
    let strength = rng.random_range(0.0..=cfg.gradient_max);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let (gy, gx) = (phi.sin(), phi.cos());
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("finite std");
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let ny = y as f64 / (h - 1) as f64 - 0.5;
            let nx = x as f64 / (w - 1) as f64 - 0.5;
            let light = 1.0 + strength * (ny * gy + nx * gx);
            let l = labels[y * w + x];
            let base = if l == 0 {
                bg
            } else {
                let e = &ellipses[l as usize - 1];
                // darker towards the rim
                let shade = 1.0 - 0.45 * e.rho2(y, x).min(1.0);
                e.color.map(|c| c * shade + 0.08 * (1.0 - shade))
            };
            for (ch, &b) in base.iter().enumerate() {
                let n = if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                data[ch * h * w + y * w + x] = (b * light + n).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("3×H×W")
}

/// `count` scenes with per-sample seeds derived from `seed` and the index.
pub fn generate_dataset(cfg: &SyntheticSceneConfig, seed: u64, count: usize) -> Result<Vec<Sample>> {
    (0..count as u64).map(|i| generate_scene(cfg, derive_seed(seed, i))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    pub rotate: bool,
    /// Noise is added with probability `noise_prob` at a std drawn from [0, noise_max].
    pub noise_prob: f64,
    pub noise_max: f64,
    pub contrast_prob: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_prob: 0.5,
            rotate: true,
            noise_prob: 0.5,
            noise_max: 0.03,
            contrast_prob: 0.5,
            contrast_min: 0.7,
            contrast_max: 1.3,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.flip_prob) && unit(self.noise_prob) && unit(self.contrast_prob)) {
            return Err(Error::config("train.augment", "probabilities must lie in [0, 1]"));
        }
        if !(self.noise_max >= 0.0) {
            return Err(Error::config("train.augment.noise_max", "must be >= 0"));
        }
        if !(self.contrast_min > 0.0 && self.contrast_max >= self.contrast_min) {
            return Err(Error::config("train.augment.contrast_min", "need 0 < contrast_min <= contrast_max"));
        }
        Ok(())
    }
}

/// A concrete draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPlan {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Quarter turns counter-clockwise.
    pub quarter_turns: u8,
    pub noise_std: f64,
    pub contrast: f64,
    pub noise_seed: u64,
}

impl AugmentPlan {
    pub const IDENTITY: AugmentPlan =
        AugmentPlan { flip_h: false, flip_v: false, quarter_turns: 0, noise_std: 0.0, contrast: 1.0, noise_seed: 0 };

    pub fn sample(cfg: &AugmentConfig, square: bool, seed: u64) -> Self {
        if !cfg.enabled {
            return Self::IDENTITY;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flip_h = rng.random_bool(cfg.flip_prob);
        let flip_v = rng.random_bool(cfg.flip_prob);
        let quarter_turns = match (cfg.rotate, square) {
            (false, _) => 0,
            (true, true) => rng.random_range(0..4),
            (true, false) => 2 * rng.random_range(0..2),
        };
        let noise_std = if rng.random_bool(cfg.noise_prob) { rng.random_range(0.0..=cfg.noise_max) } else { 0.0 };
        let contrast = if rng.random_bool(cfg.contrast_prob) {
            rng.random_range(cfg.contrast_min..=cfg.contrast_max)
        } else {
            1.0
        };
        Self { flip_h, flip_v, quarter_turns, noise_std, contrast, noise_seed: rng.random() }
    }
}

/// Pixel permutation of a geometric transform on an h×w grid: for each
/// output position, the source index. Returns the output extents too.
fn remap_index(h: usize, w: usize, f: impl Fn(usize, usize) -> (usize, usize), oh: usize, ow: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = f(y, x);
            idx.push(sy * w + sx);
        }
    }
    debug_assert!(idx.iter().all(|&i| i < h * w));
    idx
}

fn apply_geometry(sample: &Sample, idx: &[usize], oh: usize, ow: usize) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let plane = h * w;
    let src = sample.image.data();
    let mut img = Vec::with_capacity(3 * plane);
    for ch in 0..3 {
        img.extend(idx.iter().map(|&i| src[ch * plane + i]));
    }
    let mask =
        |m: &BinaryMask| BinaryMask::from_vec(oh, ow, idx.iter().map(|&i| m.data()[i]).collect()).expect("same size");
    let labels = idx.iter().map(|&i| sample.instance_map.labels()[i]).collect();
    Sample {
        image: Tensor::from_vec(&[3, oh, ow], img).expect("same size"),
        region_mask: mask(&sample.region_mask),
        edge_mask: mask(&sample.edge_mask),
        instance_map: InstanceMap::from_labels(oh, ow, labels).expect("same size"),
        true_count: sample.true_count,
    }
}

pub fn flip_horizontal(sample: &Sample) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    apply_geometry(sample, &remap_index(h, w, |y, x| (y, w - 1 - x), h, w), h, w)
}

pub fn flip_vertical(sample: &Sample) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    apply_geometry(sample, &remap_index(h, w, |y, x| (h - 1 - y, x), h, w), h, w)
}

/// One counter-clockwise quarter turn; the extents swap.
pub fn rotate90(sample: &Sample) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    // output (y, x) with extents (w, h) takes source (x, w - 1 - y)
    apply_geometry(sample, &remap_index(h, w, |y, x| (x, w - 1 - y), w, h), w, h)
}

pub fn apply_plan(sample: &Sample, plan: &AugmentPlan) -> Sample {
    let mut s = sample.clone();
    if plan.flip_h {
        s = flip_horizontal(&s);
    }
    if plan.flip_v {
        s = flip_vertical(&s);
    }
    for _ in 0..plan.quarter_turns % 4 {
        s = rotate90(&s);
    }
    if plan.contrast != 1.0 {
        let data = s.image.data_mut();
        let mean = data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64;
        for v in data.iter_mut() {
            *v = (mean + plan.contrast * (*v as f64 - mean)).clamp(0.0, 1.0) as f32;
        }
    }
    if plan.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.noise_seed);
        let normal = Normal::new(0.0, plan.noise_std).expect("finite std");
        for v in s.image.data_mut() {
            *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    s
}

/// Random flips, quarter turns, pixel noise and contrast change. Geometry
/// is applied to the image and every label; photometric changes touch the
/// image only.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, seed: u64) -> Sample {
    let plan = AugmentPlan::sample(cfg, sample.height() == sample.width(), seed);
    apply_plan(sample, &plan)
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub seed: Option<u64>,
    pub config: Option<SyntheticSceneConfig>,
    pub edge_width: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

fn file_name(i: usize) -> String {
    format!("{i:04}.png")
}

const SUBDIRS: [&str; 4] = ["images", "region", "edge", "instance"];

fn save_rgb(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let d = image.data();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Reads an 8-bit RGB PNG as a 3×H×W tensor in [0, 1].
pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Writes the dataset layout: `images/`, `region/`, `edge/`, `instance/`
/// and `manifest.json`.
pub fn write_dataset(
    dir: &Path,
    samples: &[Sample],
    seed: Option<u64>,
    config: Option<SyntheticSceneConfig>,
) -> Result<DatasetManifest> {
    let first = samples.first().ok_or(Error::Empty("dataset"))?;
    let (h, w) = (first.height(), first.width());
    for sub in SUBDIRS {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (i, s) in samples.iter().enumerate() {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::InvalidShape {
                shape: vec![s.height(), s.width()],
                reason: format!("sample {i} differs from the first sample's {h}×{w}"),
            });
        }
        let name = file_name(i);
        save_rgb(&s.image, &dir.join("images").join(&name))?;
        s.region_mask.save_png(&dir.join("region").join(&name))?;
        s.edge_mask.save_png(&dir.join("edge").join(&name))?;
        s.instance_map.save_png(&dir.join("instance").join(&name))?;
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        height: h,
        width: w,
        count: samples.len(),
        seed,
        edge_width: config.map_or(1, |c| c.edge_width),
        config,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::MissingManifest(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::BadManifest { path: path.clone(), reason: e.to_string() })?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::BadManifest {
            path,
            reason: format!("format version {} (expected {FORMAT_VERSION})", m.format_version),
        });
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let name = file_name(i);
        let p = |sub: &str| -> PathBuf { dir.join(sub).join(&name) };
        for sub in SUBDIRS {
            if !p(sub).is_file() {
                return Err(Error::Corrupt { path: p(sub), reason: "listed in the manifest but missing".into() });
            }
        }
        let image = load_rgb(&p("images"))?;
        let region_mask = BinaryMask::load_png(&p("region"))?;
        let edge_mask = BinaryMask::load_png(&p("edge"))?;
        let instance_map = InstanceMap::load_png(&p("instance"))?;
        let dims_ok = image.shape() == [3, manifest.height, manifest.width]
            && region_mask.shape() == (manifest.height, manifest.width)
            && edge_mask.shape() == region_mask.shape()
            && instance_map.shape() == region_mask.shape();
        if !dims_ok {
            return Err(Error::Corrupt {
                path: p("images"),
                reason: format!("extents differ from the manifest's {}×{}", manifest.height, manifest.width),
            });
        }
        samples.push(Sample { image, region_mask, edge_mask, true_count: instance_map.count(), instance_map });
    }
    Ok(Dataset { manifest, samples })
}
