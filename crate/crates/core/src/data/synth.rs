//! Seeded procedural textures with one injected defect per anomaly.

use std::f64::consts::PI;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image_io::{quantize, write_image, write_tensor_image, ImageFormat, Raster};
use super::{Dataset, Sample, NORMAL_TAG};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureKind {
    Stripes,
    Checker,
    ValueNoise,
}

impl TextureKind {
    pub fn name(self) -> &'static str {
        match self {
            TextureKind::Stripes => "stripes",
            TextureKind::Checker => "checker",
            TextureKind::ValueNoise => "value_noise",
        }
    }
}

impl FromStr for TextureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(TextureKind::Stripes),
            "checker" => Ok(TextureKind::Checker),
            "value_noise" | "noise" => Ok(TextureKind::ValueNoise),
            other => Err(Error::Config(format!(
                "unknown texture {other:?} (expected stripes, checker, value_noise)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefectKind {
    /// Darkened ellipse.
    Blotch,
    /// Bright thin line segment.
    Scratch,
    /// Zeroed disk.
    Hole,
    /// Rectangle with its color channels rotated.
    HueShift,
}

impl DefectKind {
    pub const ALL: [DefectKind; 4] = [
        DefectKind::Blotch,
        DefectKind::Scratch,
        DefectKind::Hole,
        DefectKind::HueShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefectKind::Blotch => "blotch",
            DefectKind::Scratch => "scratch",
            DefectKind::Hole => "hole",
            DefectKind::HueShift => "hue_shift",
        }
    }
}

impl FromStr for DefectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DefectKind::ALL
            .into_iter()
            .find(|d| d.name() == s || (s == "hue-shift" && *d == DefectKind::HueShift))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown defect {s:?} (expected blotch, scratch, hole, hue_shift)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub texture: TextureKind,
    pub normal_count: usize,
    pub defects: Vec<(DefectKind, usize)>,
    pub size: usize,
    pub format: ImageFormat,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            texture: TextureKind::Stripes,
            normal_count: 200,
            defects: vec![
                (DefectKind::Blotch, 20),
                (DefectKind::Scratch, 20),
                (DefectKind::Hole, 20),
            ],
            size: 64,
            format: ImageFormat::Pnm,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Config(format!("image size must be at least 16, got {}", self.size)));
        }
        for (i, (d, _)) in self.defects.iter().enumerate() {
            if self.defects[..i].iter().any(|(e, _)| e == d) {
                return Err(Error::Config(format!("defect {} listed twice", d.name())));
            }
        }
        Ok(())
    }

    /// Parses `blotch=20,scratch=20`.
    pub fn parse_defects(text: &str) -> Result<Vec<(DefectKind, usize)>> {
        let mut out = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, count) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("defect entry {part:?} is not name=count")))?;
            let count = count
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("defect count in {part:?} is not an integer")))?;
            out.push((name.trim().parse()?, count));
        }
        Ok(out)
    }
}

/// Per-sample seed derived from the corpus seed (splitmix64 finalizer).
pub fn sample_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One rendered image, its defect-free twin and the defect footprint.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub clean: Tensor,
    pub image: Tensor,
    /// Row-major `size × size`, true where the defect was painted.
    pub mask: Vec<bool>,
}

impl Rendered {
    pub fn mask_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&b| b).count() as f64 / self.mask.len() as f64
    }

    /// `(x0, y0, x1, y1)` with exclusive upper bounds.
    pub fn bbox(&self, size: usize) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.mask.iter().enumerate().filter(|(_, &b)| b) {
            let (y, x) = (i / size, i % size);
            bb = Some(match bb {
                None => (x, y, x + 1, y + 1),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
            });
        }
        bb
    }
}

const DARK: [f64; 3] = [0.20, 0.30, 0.40];
const LIGHT: [f64; 3] = [0.55, 0.67, 0.80];
const PIXEL_NOISE: f64 = 0.02;

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Lattice value noise, one octave with the given cell size.
fn value_noise(size: usize, cell: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = size / cell + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen()).collect();
    let (ox, oy) = (rng.gen_range(0.0..cell as f64), rng.gen_range(0.0..cell as f64));
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let fx = (x as f64 + ox) / cell as f64;
            let fy = (y as f64 + oy) / cell as f64;
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (smoothstep(fx.fract()), smoothstep(fy.fract()));
            let at = |i: usize, j: usize| lattice[j * n + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// Texture intensity in `[0,1]` per pixel.
fn texture_field(kind: TextureKind, size: usize, rng: &mut impl Rng) -> Vec<f64> {
    match kind {
        TextureKind::Stripes => {
            let period = rng.gen_range(7.0..9.0);
            let angle = (30.0 + rng.gen_range(-4.0..4.0)) * PI / 180.0;
            let phase = rng.gen_range(0.0..2.0 * PI);
            let (c, s) = (angle.cos(), angle.sin());
            (0..size * size)
                .map(|i| {
                    let (x, y) = ((i % size) as f64, (i / size) as f64);
                    0.5 + 0.5 * ((x * c + y * s) * 2.0 * PI / period + phase).sin()
                })
                .collect()
        }
        TextureKind::Checker => {
            let cell = rng.gen_range(7.0..9.0);
            let angle = rng.gen_range(-3.0..3.0) * PI / 180.0;
            let (ox, oy) = (rng.gen_range(0.0..2.0 * cell), rng.gen_range(0.0..2.0 * cell));
            let (c, s) = (angle.cos(), angle.sin());
            (0..size * size)
                .map(|i| {
                    let (x, y) = ((i % size) as f64, (i / size) as f64);
                    let u = ((x * c - y * s + ox) / cell).floor() as i64;
                    let v = ((x * s + y * c + oy) / cell).floor() as i64;
                    if (u + v).rem_euclid(2) == 0 {
                        0.15
                    } else {
                        0.85
                    }
                })
                .collect()
        }
        TextureKind::ValueNoise => {
            let coarse = value_noise(size, 8, rng);
            let fine = value_noise(size, 4, rng);
            coarse
                .iter()
                .zip(&fine)
                .map(|(a, b)| (a + 0.35 * b) / 1.35)
                .collect()
        }
    }
}

/// Float RGB planes `[3, size, size]` for an intensity field plus pixel noise.
fn colorize(field: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let plane = field.len();
    let mut out = vec![0.0; 3 * plane];
    for (p, &t) in field.iter().enumerate() {
        for ch in 0..3 {
            let base = DARK[ch] + t * (LIGHT[ch] - DARK[ch]);
            out[ch * plane + p] = base + rng.gen_range(-PIXEL_NOISE..PIXEL_NOISE);
        }
    }
    out
}

fn quantized(size: usize, planes: &[f64]) -> Tensor {
    Tensor::from_fn(&[3, size, size], |i| f64::from(quantize(planes[i])) / 255.0)
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((px - a.0 - t * dx).powi(2) + (py - a.1 - t * dy).powi(2)).sqrt()
}

/// Defect footprint for one draw of geometry.
fn defect_mask(kind: DefectKind, size: usize, rng: &mut impl Rng) -> Vec<bool> {
    let s = size as f64;
    // Geometry is specified for 64-pixel images.
    let unit = s / 64.0;
    let margin = 8.0 * unit;
    let cx = rng.gen_range(margin..s - margin);
    let cy = rng.gen_range(margin..s - margin);
    let inside: Box<dyn Fn(f64, f64) -> bool> = match kind {
        DefectKind::Blotch => {
            let (a, b) = (rng.gen_range(3.0..7.0) * unit, rng.gen_range(3.0..7.0) * unit);
            let rot: f64 = rng.gen_range(0.0..PI);
            let (c, sn) = (rot.cos(), rot.sin());
            Box::new(move |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * c + dy * sn;
                let v = -dx * sn + dy * c;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            })
        }
        DefectKind::Scratch => {
            let len = rng.gen_range(16.0..32.0) * unit;
            let rot: f64 = rng.gen_range(0.0..PI);
            let half = rng.gen_range(0.7..1.3) * unit.max(0.5);
            let (hx, hy) = (0.5 * len * rot.cos(), 0.5 * len * rot.sin());
            let (a, b) = ((cx - hx, cy - hy), (cx + hx, cy + hy));
            Box::new(move |x, y| segment_distance(x, y, a, b) <= half)
        }
        DefectKind::Hole => {
            let r = rng.gen_range(2.5..6.0) * unit;
            Box::new(move |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= r * r)
        }
        DefectKind::HueShift => {
            let (w, h) = (rng.gen_range(8.0..18.0) * unit, rng.gen_range(8.0..18.0) * unit);
            Box::new(move |x, y| (x - cx).abs() <= 0.5 * w && (y - cy).abs() <= 0.5 * h)
        }
    };
    (0..size * size)
        .map(|i| inside((i % size) as f64, (i / size) as f64))
        .collect()
}

fn paint_defect(kind: DefectKind, planes: &mut [f64], mask: &[bool]) {
    let plane = mask.len();
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let px = [planes[p], planes[plane + p], planes[2 * plane + p]];
        let new = match kind {
            DefectKind::Blotch => px.map(|v| v * 0.4),
            DefectKind::Scratch => [0.97, 0.97, 0.95],
            DefectKind::Hole => [0.0; 3],
            DefectKind::HueShift => [px[2], px[0], px[1]],
        };
        for (ch, v) in new.into_iter().enumerate() {
            planes[ch * plane + p] = v;
        }
    }
}

/// Renders one sample from its own seed. Normals (`defect == None`) have `image == clean`.
pub fn render(texture: TextureKind, defect: Option<DefectKind>, size: usize, seed: u64) -> Result<Rendered> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = texture_field(texture, size, &mut rng);
    let mut planes = colorize(&field, &mut rng);
    let clean = quantized(size, &planes);
    let Some(kind) = defect else {
        return Ok(Rendered {
            image: clean.clone(),
            clean,
            mask: vec![false; size * size],
        });
    };
    let total = (size * size) as f64;
    let mask = loop {
        let m = defect_mask(kind, size, &mut rng);
        let frac = m.iter().filter(|&&b| b).count() as f64 / total;
        if frac > 0.005 && frac < 0.30 {
            break m;
        }
    };
    paint_defect(kind, &mut planes, &mask);
    Ok(Rendered {
        clean,
        image: quantized(size, &planes),
        mask,
    })
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub path: String,
    pub label: u8,
    pub type_tag: String,
    pub bbox_x0: Option<usize>,
    pub bbox_y0: Option<usize>,
    pub bbox_x1: Option<usize>,
    pub bbox_y1: Option<usize>,
    pub mask_fraction: f64,
    pub seed: u64,
}

/// Every sample of the corpus in order: normals, then each defect type in spec order.
fn plan(spec: &CorpusSpec) -> Vec<(Option<DefectKind>, usize)> {
    let mut out: Vec<(Option<DefectKind>, usize)> = (0..spec.normal_count).map(|i| (None, i)).collect();
    for &(kind, count) in &spec.defects {
        out.extend((0..count).map(|i| (Some(kind), i)));
    }
    out
}

fn relative_path(defect: Option<DefectKind>, index: usize, ext: &str) -> String {
    match defect {
        None => format!("{NORMAL_TAG}/{index:04}.{ext}"),
        Some(d) => format!("anomaly/{}/{index:04}.{ext}", d.name()),
    }
}

/// Renders the whole corpus in memory, with manifest rows.
pub fn synth_samples(spec: &CorpusSpec, seed: u64) -> Result<Vec<(Sample, Rendered, ManifestRow)>> {
    spec.validate()?;
    let ext = spec.format.extension(3);
    plan(spec)
        .into_iter()
        .enumerate()
        .map(|(global, (defect, index))| {
            let s = sample_seed(seed, global as u64);
            let r = render(spec.texture, defect, spec.size, s)?;
            let tag = defect.map_or(NORMAL_TAG, DefectKind::name);
            let id = format!("{tag}/{index:04}");
            let bbox = r.bbox(spec.size);
            let row = ManifestRow {
                id: id.clone(),
                path: relative_path(defect, index, ext),
                label: u8::from(defect.is_some()),
                type_tag: tag.to_string(),
                bbox_x0: bbox.map(|b| b.0),
                bbox_y0: bbox.map(|b| b.1),
                bbox_x1: bbox.map(|b| b.2),
                bbox_y1: bbox.map(|b| b.3),
                mask_fraction: r.mask_fraction(),
                seed: s,
            };
            let sample = Sample::new(id, r.image.clone(), tag)?;
            Ok((sample, r, row))
        })
        .collect()
}

/// In-memory corpus, pixel-identical to what [`write_corpus`] puts on disk.
pub fn synth_dataset(spec: &CorpusSpec, seed: u64) -> Result<Dataset> {
    let mut normals = Vec::new();
    let mut anomalies = Vec::new();
    for (sample, _, _) in synth_samples(spec, seed)? {
        if sample.is_normal() {
            normals.push(sample);
        } else {
            anomalies.push(sample);
        }
    }
    Dataset::new(normals, anomalies)
}

/// Writes images, bilevel defect masks under `masks/`, and `manifest.csv`.
pub fn write_corpus(root: &Path, spec: &CorpusSpec, seed: u64) -> Result<Vec<ManifestRow>> {
    let items = synth_samples(spec, seed)?;
    let mut rows = Vec::with_capacity(items.len());
    for (sample, rendered, row) in items {
        let path = root.join(&row.path);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_tensor_image(&path.with_extension(""), &sample.image, spec.format)?;
        if !sample.is_normal() {
            let mask_path = root.join("masks").join(format!("{}.pgm", sample.id));
            if let Some(dir) = mask_path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let raster = Raster {
                width: spec.size,
                height: spec.size,
                channels: 1,
                pixels: rendered.mask.iter().map(|&b| if b { 255 } else { 0 }).collect(),
            };
            write_image(&mask_path, &raster, ImageFormat::Pnm)?;
        }
        rows.push(row);
    }
    let manifest = root.join("manifest.csv");
    write_csv(&manifest, &rows)?;
    Ok(rows)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
