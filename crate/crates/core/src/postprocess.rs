//! Turning probability maps into counted particle instances: threshold,
//! remove edge pixels from the region mask, open, then label components.

use std::collections::VecDeque;
use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// H×W mask with values in {0, 1}, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    /// Any nonzero input value becomes 1.
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: format!("mask has {} values", data.len()),
            });
        }
        let data = data.into_iter().map(|v| u8::from(v != 0)).collect();
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// `self ⊆ other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.shape() == other.shape() && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    /// Values as 0.0 / 1.0.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// 8-bit grayscale PNG with values 0 / 255.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.iter().map(|&v| v * 255).collect())
                .expect("buffer length matches extents");
        buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    /// Reads a grayscale PNG; pixels >= 128 are foreground.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.into_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| u8::from(v >= 128)).collect();
        Ok(Self { height: h as usize, width: w as usize, data })
    }
}

fn check_same(a: (usize, usize), b: (usize, usize), op: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch { op, left: vec![a.0, a.1], right: vec![b.0, b.1] });
    }
    Ok(())
}

/// Label image; 0 is background, instances are numbered 1..=count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    count: usize,
}

impl InstanceMap {
    /// Relabels arbitrary ids to 1..=count in raster order of first appearance.
    pub fn from_labels(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: format!("label image has {} values", labels.len()),
            });
        }
        let mut remap = std::collections::HashMap::new();
        let labels = labels
            .into_iter()
            .map(|l| {
                if l == 0 {
                    0
                } else {
                    let next = remap.len() as u32 + 1;
                    *remap.entry(l).or_insert(next)
                }
            })
            .collect();
        Ok(Self { height, width, labels, count: remap.len() })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Union of all instances.
    pub fn foreground(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.labels.iter().map(|&l| u8::from(l != 0)).collect(),
        }
    }

    /// Pixels of one label.
    pub fn instance(&self, label: u32) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.labels.iter().map(|&l| u8::from(l == label)).collect(),
        }
    }

    /// 16-bit grayscale PNG holding the label values.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.count > u16::MAX as usize {
            return Err(Error::Unsupported {
                op: "InstanceMap::save_png",
                reason: format!("{} labels exceed the 16-bit range", self.count),
            });
        }
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.labels.iter().map(|&l| l as u16).collect(),
        )
        .expect("buffer length matches extents");
        buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.into_luma16();
        let (w, h) = img.dimensions();
        let labels = img.into_raw().into_iter().map(u32::from).collect();
        Self::from_labels(h as usize, w as usize, labels)
    }
}

/// Writes an H×W probability map as an 8-bit grayscale PNG (p·255, rounded).
pub fn save_probability_png(height: usize, width: usize, probs: &[f32], path: &Path) -> Result<()> {
    if probs.len() != height * width {
        return Err(Error::ShapeMismatch {
            op: "save_probability_png",
            left: vec![height, width],
            right: vec![probs.len()],
        });
    }
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        width as u32,
        height as u32,
        probs.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
    )
    .expect("buffer length matches extents");
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Reads an 8- or 16-bit grayscale PNG as probabilities in [0, 1]:
/// `(height, width, values)`.
pub fn load_probability_png(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / u16::MAX as f32).collect();
    Ok((h as usize, w as usize, data))
}

/// 1 where `probs >= tau`.
pub fn binarize(height: usize, width: usize, probs: &[f32], tau: f32) -> Result<BinaryMask> {
    if probs.len() != height * width {
        return Err(Error::InvalidShape {
            shape: vec![height, width],
            reason: format!("probability map has {} values", probs.len()),
        });
    }
    Ok(BinaryMask { height, width, data: probs.iter().map(|&p| u8::from(p >= tau)).collect() })
}

/// `region AND NOT edge`.
pub fn subtract_edge(region: &BinaryMask, edge: &BinaryMask) -> Result<BinaryMask> {
    check_same(region.shape(), edge.shape(), "subtract_edge")?;
    Ok(BinaryMask {
        height: region.height,
        width: region.width,
        data: region.data.iter().zip(&edge.data).map(|(&r, &e)| r & (1 - e)).collect(),
    })
}

/// Rectangular structuring element centred on the origin; sides must be odd.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringElement {
    pub height: usize,
    pub width: usize,
}

impl Default for StructuringElement {
    fn default() -> Self {
        Self::square(3)
    }
}

impl StructuringElement {
    pub fn square(side: usize) -> Self {
        Self { height: side, width: side }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height.is_multiple_of(2) || self.width.is_multiple_of(2) {
            return Err(Error::config("postprocess.se_size", "structuring element sides must be odd"));
        }
        Ok(())
    }
}

/// Running min (erode) or max (dilate) along one axis. Samples outside the
/// image are ignored, so the border neither erodes nor grows objects.
fn sweep(src: &[u8], h: usize, w: usize, radius: usize, horizontal: bool, erode: bool) -> Vec<u8> {
    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (c, len) = if horizontal { (x, w) } else { (y, h) };
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(len - 1);
            let at = |i: usize| if horizontal { src[y * w + i] } else { src[i * w + x] };
            out[y * w + x] =
                if erode { (lo..=hi).map(at).min().unwrap_or(0) } else { (lo..=hi).map(at).max().unwrap_or(0) };
        }
    }
    out
}

pub fn erode(mask: &BinaryMask, se: StructuringElement) -> BinaryMask {
    let (h, w) = mask.shape();
    let a = sweep(&mask.data, h, w, se.width / 2, true, true);
    let data = sweep(&a, h, w, se.height / 2, false, true);
    BinaryMask { height: h, width: w, data }
}

pub fn dilate(mask: &BinaryMask, se: StructuringElement) -> BinaryMask {
    let (h, w) = mask.shape();
    let a = sweep(&mask.data, h, w, se.width / 2, true, false);
    let data = sweep(&a, h, w, se.height / 2, false, false);
    BinaryMask { height: h, width: w, data }
}

/// Erosion followed by dilation with the same element.
pub fn morph_open(mask: &BinaryMask, se: StructuringElement) -> BinaryMask {
    dilate(&erode(mask, se), se)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

/// Flood-fill labeling; labels follow raster-scan discovery order.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> InstanceMap {
    let (h, w) = mask.shape();
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    let offsets: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    };
    for start in 0..h * w {
        if mask.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for &(dy, dx) in offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask.data[j] != 0 && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    InstanceMap { height: h, width: w, labels, count: next as usize }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    pub threshold: f32,
    /// Side of the square opening element.
    pub se_size: usize,
    pub connectivity: Connectivity,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { threshold: 0.5, se_size: 3, connectivity: Connectivity::Four }
    }
}

impl PostprocessConfig {
    pub fn element(&self) -> StructuringElement {
        StructuringElement::square(self.se_size)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("postprocess.threshold", "must lie in [0, 1]"));
        }
        if self.se_size == 0 {
            return Err(Error::config("postprocess.se_size", "must be >= 1"));
        }
        self.element().validate()
    }
}

/// Every stage of the pipeline, for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    pub region: BinaryMask,
    pub edge: BinaryMask,
    pub separated: BinaryMask,
    pub opened: BinaryMask,
    pub instances: InstanceMap,
}

impl SegmentationResult {
    pub fn count(&self) -> usize {
        self.instances.count()
    }
}

pub fn segment_pipeline(
    height: usize,
    width: usize,
    region_prob: &[f32],
    edge_prob: &[f32],
    cfg: &PostprocessConfig,
) -> Result<SegmentationResult> {
    cfg.validate()?;
    let region = binarize(height, width, region_prob, cfg.threshold)?;
    let edge = binarize(height, width, edge_prob, cfg.threshold)?;
    let separated = subtract_edge(&region, &edge)?;
    let opened = morph_open(&separated, cfg.element());
    let instances = connected_components(&opened, cfg.connectivity);
    Ok(SegmentationResult { region, edge, separated, opened, instances })
}
