//! Confounded-Toy: filled shapes (the cause of the label) over a grid of
//! colored blocks whose color distribution depends on the label.

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::path::Path;

pub const CLASS_NAMES: [&str; 3] = ["triangle", "square", "circle"];
/// Block fills indexed by color id: blue, green, red.
pub const BLOCK_RGB: [[f32; 3]; 3] = [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
/// Shape fills: white, yellow, magenta, cyan.
pub const PALETTE: [[f32; 3]; 4] = [[1.0, 1.0, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]];

const MAGIC: &[u8; 4] = b"CTOY";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream_id(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CToyConfig {
    pub height: usize,
    pub width: usize,
    pub block: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// per class, probabilities of blue / green / red blocks
    pub bias: [[f64; 3]; 3],
    /// inclusive range of shape diameter / side length in pixels
    pub size_range: (usize, usize),
    pub seed: u64,
}

impl Default for CToyConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            block: 4,
            train: 10_000,
            val: 1_000,
            test: 1_000,
            bias: [[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]],
            size_range: (16, 32),
            seed: 0,
        }
    }
}

impl CToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block == 0 || !self.height.is_multiple_of(self.block) || !self.width.is_multiple_of(self.block) {
            return Err(Error::Config(format!(
                "{}x{} image is not tiled by {} blocks",
                self.height, self.width, self.block
            )));
        }
        for row in &self.bias {
            if row.iter().any(|&p| p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("bias row {row:?} is not a distribution")));
            }
        }
        let (lo, hi) = self.size_range;
        let reach = (0..3).map(|c| Shape::circumradius(c, hi as f64)).fold(0.0, f64::max);
        // below 3 px a rotated triangle can miss every pixel centre
        if lo < 3 || lo > hi || 2.0 + 2.0 * reach > self.height.min(self.width) as f64 {
            return Err(Error::Config(format!("shape size range {lo}..={hi} does not fit")));
        }
        Ok(())
    }

    pub fn size_of(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    fn blocks(&self) -> (usize, usize) {
        (self.width / self.block, self.height / self.block)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CToySample {
    /// planar `[3, H, W]` in [0, 1]
    pub image: Vec<f32>,
    pub label: usize,
    /// row-major, `true` on shape pixels
    pub geometry_mask: Vec<bool>,
    /// row-major block grid of color ids
    pub block_colors: Vec<u8>,
}

/// Block color ids for one image drawn from the class's categorical.
pub fn sample_blocks(class: usize, cfg: &CToyConfig, rng: &mut impl Rng) -> Vec<u8> {
    let (bw, bh) = cfg.blocks();
    let p = cfg.bias[class];
    (0..bw * bh)
        .map(|_| {
            let u: f64 = rng.random();
            if u < p[0] {
                0
            } else if u < p[0] + p[1] {
                1
            } else {
                2
            }
        })
        .collect()
}

/// Filled shape geometry in continuous pixel-corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub class: usize,
    pub center: (f64, f64),
    /// diameter for circles, side length otherwise
    pub size: f64,
    pub angle: f64,
}

impl Shape {
    /// Radius of the smallest circle around `center` containing the shape.
    pub fn circumradius(class: usize, size: f64) -> f64 {
        match class {
            0 => size / 3f64.sqrt(),
            1 => size / 2f64.sqrt(),
            _ => size / 2.0,
        }
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.center.0, py - self.center.1);
        match self.class {
            2 => dx.hypot(dy) <= self.size / 2.0,
            1 => {
                let (s, c) = self.angle.sin_cos();
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                u.abs() <= self.size / 2.0 && v.abs() <= self.size / 2.0
            }
            _ => {
                let r = Self::circumradius(0, self.size);
                let vs: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let a = self.angle + PI / 2.0 + k as f64 * 2.0 * PI / 3.0;
                        (r * a.cos(), r * a.sin())
                    })
                    .collect();
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0);
                let s0 = edge(vs[0], vs[1]);
                let s1 = edge(vs[1], vs[2]);
                let s2 = edge(vs[2], vs[0]);
                (s0 >= 0.0 && s1 >= 0.0 && s2 >= 0.0) || (s0 <= 0.0 && s1 <= 0.0 && s2 <= 0.0)
            }
        }
    }

    /// Pixels whose centers fall inside the shape.
    pub fn rasterize(&self, width: usize, height: usize) -> Vec<bool> {
        (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| self.contains(x as f64 + 0.5, y as f64 + 0.5))
            .collect()
    }
}

/// Random shape of `class` kept off the one-pixel border ring, plus its fill.
pub fn render_shape(class: usize, cfg: &CToyConfig, rng: &mut impl Rng) -> (Vec<bool>, [f32; 3]) {
    let (lo, hi) = cfg.size_range;
    let size = rng.random_range(lo..=hi) as f64;
    let r = Shape::circumradius(class, size);
    let lo_c = 1.0 + r;
    let center = (
        rng.random_range(lo_c..=cfg.width as f64 - 1.0 - r),
        rng.random_range(lo_c..=cfg.height as f64 - 1.0 - r),
    );
    let angle = if class == 2 { 0.0 } else { rng.random_range(0.0..2.0 * PI) };
    let mask = Shape { class, center, size, angle }.rasterize(cfg.width, cfg.height);
    let color = PALETTE[rng.random_range(0..PALETTE.len())];
    (mask, color)
}

fn compose(cfg: &CToyConfig, blocks: &[u8], mask: &[bool], color: [f32; 3]) -> Vec<f32> {
    let (w, h, b) = (cfg.width, cfg.height, cfg.block);
    let plane = w * h;
    let mut img = vec![0f32; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let rgb = if mask[p] { color } else { BLOCK_RGB[blocks[(y / b) * (w / b) + x / b] as usize] };
            for c in 0..3 {
                img[c * plane + p] = rgb[c];
            }
        }
    }
    img
}

/// One sample, a pure function of `(cfg, split, index, label)`.
pub fn generate_sample(cfg: &CToyConfig, split: Split, index: usize, label: usize) -> CToySample {
    let mut rng = rng::stream(cfg.seed, &[split.stream_id(), index as u64]);
    let block_colors = sample_blocks(label, cfg, &mut rng);
    let (geometry_mask, color) = render_shape(label, cfg, &mut rng);
    let image = compose(cfg, &block_colors, &geometry_mask, color);
    CToySample { image, label, geometry_mask, block_colors }
}

/// Class-balanced labels in a seeded random order.
pub fn split_labels(cfg: &CToyConfig, split: Split) -> Vec<usize> {
    let n = cfg.size_of(split);
    let mut labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    labels.shuffle(&mut rng::stream(cfg.seed, &[split.stream_id(), u64::MAX]));
    labels
}

pub fn generate_split(cfg: &CToyConfig, split: Split) -> Result<Vec<CToySample>> {
    generate_split_with(cfg, split, Exec::default())
}

pub fn generate_split_with(cfg: &CToyConfig, split: Split, exec: Exec) -> Result<Vec<CToySample>> {
    cfg.validate()?;
    let labels = split_labels(cfg, split);
    Ok(exec.map(labels.len(), |i| generate_sample(cfg, split, i, labels[i])))
}

/// Share of perturbation mass that falls off the shape, or `None` when
/// `delta` is identically zero.
pub fn confounder_energy(delta: &[f32], sample: &CToySample) -> Result<Option<f64>> {
    let plane = sample.geometry_mask.len();
    if plane == 0 || !delta.len().is_multiple_of(plane) {
        return Err(Error::Contract(format!(
            "perturbation of {} values for a {plane}-pixel image",
            delta.len()
        )));
    }
    let (mut off, mut all) = (0.0f64, 0.0f64);
    for (i, &d) in delta.iter().enumerate() {
        let a = d.abs() as f64;
        all += a;
        if !sample.geometry_mask[i % plane] {
            off += a;
        }
    }
    Ok((all > 0.0).then(|| off / all))
}

/// Predict the class whose dominant block color is most frequent; the
/// strongest classifier that ignores the shape.
pub fn majority_color_class(sample: &CToySample) -> usize {
    let mut counts = [0usize; 3];
    for &c in &sample.block_colors {
        counts[c as usize] += 1;
    }
    // blue ↔ triangle, green ↔ square, red ↔ circle
    (0..3).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap_or(0)
}

pub fn encode_split(cfg: &CToyConfig, samples: &[CToySample]) -> Vec<u8> {
    let (w, h) = (cfg.width, cfg.height);
    let mut out = Vec::with_capacity(24 + samples.len() * (1 + 12 * w * h + w * h / 8 + 256));
    out.extend(MAGIC);
    for v in [VERSION, samples.len() as u32, h as u32, w as u32, 3] {
        out.extend(v.to_le_bytes());
    }
    for s in samples {
        out.push(s.label as u8);
        for &v in &s.image {
            out.extend(v.to_le_bytes());
        }
        for chunk in s.geometry_mask.chunks(8) {
            out.push(chunk.iter().enumerate().fold(0u8, |b, (i, &m)| b | ((m as u8) << i)));
        }
        out.extend(&s.block_colors);
    }
    out
}

pub fn decode_split(cfg: &CToyConfig, bytes: &[u8]) -> Result<Vec<CToySample>> {
    let bad = |m: String| Error::Format(format!("ctoy split: {m}"));
    if bytes.len() < 24 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (version, count, h, w, c) = (word(0), word(1), word(2), word(3), word(4));
    if version != VERSION as usize || c != 3 || (h, w) != (cfg.height, cfg.width) {
        return Err(bad(format!("header v{version} {count}x{c}x{h}x{w}")));
    }
    let (bw, bh) = cfg.blocks();
    let plane = h * w;
    let record = 1 + 4 * c * plane + plane.div_ceil(8) + bw * bh;
    if bytes.len() != 24 + count * record {
        return Err(bad(format!("{} bytes for {count} records", bytes.len())));
    }
    let mut out = Vec::with_capacity(count);
    for rec in bytes[24..].chunks_exact(record) {
        let label = rec[0] as usize;
        if label >= 3 {
            return Err(bad(format!("label {label}")));
        }
        let px = &rec[1..1 + 4 * c * plane];
        let image = px.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let bits = &rec[1 + 4 * c * plane..1 + 4 * c * plane + plane.div_ceil(8)];
        let geometry_mask = (0..plane).map(|p| bits[p / 8] >> (p % 8) & 1 == 1).collect();
        let block_colors = rec[record - bw * bh..].to_vec();
        out.push(CToySample { image, label, geometry_mask, block_colors });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub file: String,
    pub count: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: CToyConfig,
    pub splits: Vec<(Split, SplitEntry)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Generate every split into `dir` as `<split>.bin` plus `manifest.json`.
pub fn write_dataset(cfg: &CToyConfig, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut splits = Vec::new();
    for split in Split::ALL {
        let bytes = encode_split(cfg, &generate_split(cfg, split)?);
        let file = format!("{}.bin", split.name());
        std::fs::write(dir.join(&file), &bytes)?;
        splits.push((split, SplitEntry { file, count: cfg.size_of(split), sha256: sha256_hex(&bytes) }));
    }
    let manifest = Manifest { seed: cfg.seed, config: cfg.clone(), splits };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Load one split, verifying its checksum against the manifest.
pub fn read_split(dir: &Path, split: Split) -> Result<(CToyConfig, Vec<CToySample>)> {
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let (_, entry) = manifest
        .splits
        .iter()
        .find(|(s, _)| *s == split)
        .ok_or_else(|| Error::Format(format!("manifest lacks {}", split.name())))?;
    let bytes = std::fs::read(dir.join(&entry.file))?;
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(Error::Format(format!("checksum mismatch for {}", entry.file)));
    }
    let samples = decode_split(&manifest.config, &bytes)?;
    Ok((manifest.config, samples))
}

pub fn sample_ppm(cfg: &CToyConfig, sample: &CToySample) -> Vec<u8> {
    crate::image::encode_ppm(cfg.width, cfg.height, &sample.image).expect("sized image")
}
