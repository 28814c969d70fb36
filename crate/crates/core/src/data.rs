//! Images, labels, the synthetic diffuse-stain dataset, tiling and manifests.

use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use image::{ImageFormat, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, io_err, shape, CaclError, Result};
use crate::io::atomic_write;
use crate::segmentation::{MaskSource, SegmentationMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Negative,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        })
    }
}

impl FromStr for Label {
    type Err = CaclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Label::Positive),
            "negative" => Ok(Label::Negative),
            other => Err(CaclError::Format { what: "label", detail: format!("`{other}`") }),
        }
    }
}

/// RGB image, channels-last, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(shape(format!("{} values for a {height}x{width} RGB image", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width {
            return Err(shape("crop window leaves the image"));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for y in top..top + h {
            let start = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Image::new(h, w, data)
    }

    pub fn flipped(&self, horizontal: bool, vertical: bool) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            let sy = if vertical { self.height - 1 - y } else { y };
            for x in 0..self.width {
                let sx = if horizontal { self.width - 1 - x } else { x };
                data.extend_from_slice(&self.pixel(sy, sx));
            }
        }
        Image { height: self.height, width: self.width, data }
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|source| CaclError::Image { path: path.to_path_buf(), source })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Image::new(h as usize, w as usize, data)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let raw = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| shape("image buffer size"))?;
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, ImageFormat::Png)
            .map_err(|source| CaclError::Image { path: PathBuf::from("<memory>"), source })?;
        Ok(buf.into_inner())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_png_bytes()?)
    }
}

/// Stacks images into a `(batch, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| invalid("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    if images.iter().any(|im| im.height != h || im.width != w) {
        return Err(shape("images in a batch must share one size"));
    }
    let data: Vec<f32> = images.iter().flat_map(|im| im.data.iter().copied()).collect();
    let t = Tensor::from_vec(data, (images.len(), h, w, 3), device)?
        .permute((0, 3, 1, 2))?
        .contiguous()?
        .to_dtype(dtype)?;
    Ok(t)
}

/// Inverse of [`images_to_tensor`].
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(shape(format!("expected 3 channels, got {c}")));
    }
    let flat = t.permute((0, 2, 3, 1))?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    flat.chunks(h * w * 3).take(b).map(|c| Image::new(h, w, c.to_vec())).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub pixels: Image,
    pub label: Label,
}

impl LabeledPatch {
    pub fn new(pixels: Image, label: Label) -> Result<Self> {
        if pixels.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("patch pixels must lie in [0, 1]"));
        }
        Ok(Self { pixels, label })
    }
}

// ---------------------------------------------------------------------------
// Synthetic diffuse-stain data

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    /// Side length in pixels of the coarsest background noise cell.
    pub noise_scale: f64,
    /// RGB of the stained tissue background at unit density.
    pub tissue_color: [f64; 3],
    /// Nuclei per 64×64 area.
    pub nuclei_density: f64,
    /// Mean stain band depth as a fraction of the image size.
    pub band_thickness: f64,
    /// RGB of the stain at unit concentration.
    pub stain_color: [f64; 3],
    /// Width in pixels of the soft alpha transition at the band boundary.
    pub alpha_softness: f64,
    /// Amplitude of the boundary wobble as a fraction of the band depth.
    pub edge_roughness: f64,
    /// Standard deviation of independent per-pixel RGB noise.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_positive: 300,
            n_negative: 300,
            noise_scale: 16.0,
            tissue_color: [0.92, 0.70, 0.62],
            nuclei_density: 7.0,
            band_thickness: 0.22,
            stain_color: [0.40, 0.62, 0.45],
            alpha_softness: 1.8,
            edge_roughness: 0.3,
            pixel_noise: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.n_positive == 0 || self.n_negative == 0 {
            return Err(invalid("synthetic data needs at least one positive and one negative sample"));
        }
        if self.image_size < 8 {
            return Err(invalid("synthetic images must be at least 8 pixels wide"));
        }
        let in_unit = |c: &[f64; 3]| c.iter().all(|v| *v > 0.0 && *v <= 1.0);
        if !in_unit(&self.tissue_color) || !in_unit(&self.stain_color) {
            return Err(invalid("synthetic colors must lie in (0, 1]"));
        }
        if !(self.band_thickness > 0.0 && self.band_thickness < 1.0) {
            return Err(invalid("band thickness must be a fraction in (0, 1)"));
        }
        if self.noise_scale <= 0.0 || self.alpha_softness <= 0.0 || self.edge_roughness < 0.0 || self.nuclei_density < 0.0 || self.pixel_noise < 0.0 {
            return Err(invalid("noise scale and softness must be positive; roughness, density and noise nonnegative"));
        }
        Ok(())
    }
}

const HEMATOXYLIN_OD: [f64; 3] = [0.65, 0.70, 0.29];

fn od_of(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|v| -v.max(1e-3).log10())
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| x / n)
}

/// Smooth value noise in `[0, 1]` with the given cell size.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: f64) -> Vec<f64> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / cell;
        let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell;
            let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn fractal_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: f64) -> Vec<f64> {
    let a = value_noise(rng, h, w, cell);
    let b = value_noise(rng, h, w, (cell / 2.0).max(1.0));
    let c = value_noise(rng, h, w, (cell / 4.0).max(1.0));
    a.iter().zip(&b).zip(&c).map(|((a, b), c)| (4.0 * a + 2.0 * b + c) / 7.0).collect()
}

/// A rendered synthetic sample and its ground-truth mask.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: Image,
    pub mask: SegmentationMask,
    pub label: Label,
}

/// Renders one sample in optical-density space so that tissue, nuclei and
/// stain mix the way absorbing dyes do.
pub fn render_sample(config: &SyntheticConfig, label: Label, rng: &mut ChaCha8Rng) -> SyntheticSample {
    let n = config.image_size;
    let tissue_od = od_of(config.tissue_color);
    let stain_base = od_of(config.stain_color);

    // Per-image staining variation: tissue density and stain hue drift.
    let tissue_gain = 0.6 + 0.9 * rng.random::<f64>();
    let stain_jitter = [0.0, 0.0, 0.0].map(|_: f64| 1.0 + 0.25 * (rng.random::<f64>() - 0.5));
    let stain_od = [
        stain_base[0] * stain_jitter[0],
        stain_base[1] * stain_jitter[1],
        stain_base[2] * stain_jitter[2],
    ];
    let stain_gain = 0.8 + 0.5 * rng.random::<f64>();

    let density = fractal_noise(rng, n, n, config.noise_scale);
    let mut od: Vec<[f64; 3]> = density
        .iter()
        .map(|d| {
            let t = tissue_gain * (0.35 + 1.1 * d);
            tissue_od.map(|v| v * t)
        })
        .collect();

    // Nuclei: soft ellipses of hematoxylin.
    let h_od = normalized(HEMATOXYLIN_OD);
    let n_nuclei = ((config.nuclei_density * (n * n) as f64 / 4096.0) * (0.6 + 0.8 * rng.random::<f64>())).round() as usize;
    for _ in 0..n_nuclei {
        let cy = rng.random::<f64>() * n as f64;
        let cx = rng.random::<f64>() * n as f64;
        let ry = 1.8 + 2.2 * rng.random::<f64>();
        let rx = 1.8 + 2.2 * rng.random::<f64>();
        let strength = 0.5 + 0.5 * rng.random::<f64>();
        let y0 = (cy - ry - 2.0).floor().max(0.0) as usize;
        let y1 = ((cy + ry + 2.0).ceil() as usize).min(n);
        let x0 = (cx - rx - 2.0).floor().max(0.0) as usize;
        let x1 = ((cx + rx + 2.0).ceil() as usize).min(n);
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                let r = (dy * dy + dx * dx).sqrt();
                let a = 1.0 / (1.0 + ((r - 1.0) / 0.15).exp());
                let p = &mut od[y * n + x];
                for c in 0..3 {
                    p[c] += a * strength * h_od[c];
                }
            }
        }
    }

    let mut mask = vec![0u8; n * n];
    if label == Label::Positive {
        let edge = rng.random_range(0..4u8);
        let depth = config.band_thickness * n as f64 * (0.75 + 0.5 * rng.random::<f64>());
        let freq = 0.5 + 1.5 * rng.random::<f64>();
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let wobble = value_noise(rng, 1, n, 8.0);
        let texture = fractal_noise(rng, n, n, (config.noise_scale / 2.0).max(2.0));
        for y in 0..n {
            for x in 0..n {
                // `along` runs parallel to the chosen edge, `inward` away from it.
                let (along, inward) = match edge {
                    0 => (x, y),
                    1 => (x, n - 1 - y),
                    2 => (y, x),
                    _ => (y, n - 1 - x),
                };
                let u = along as f64 / n as f64;
                let boundary = depth
                    * (1.0
                        + config.edge_roughness
                            * (0.6 * (std::f64::consts::TAU * freq * u + phase).sin() + 0.8 * (wobble[along] - 0.5)));
                let d = inward as f64 + 0.5;
                let alpha = 1.0 / (1.0 + ((d - boundary) / config.alpha_softness).exp());
                if alpha > 0.5 {
                    mask[y * n + x] = 1;
                }
                let conc = alpha * stain_gain * (0.7 + 0.6 * texture[y * n + x]);
                let p = &mut od[y * n + x];
                for c in 0..3 {
                    p[c] += conc * stain_od[c];
                }
            }
        }
    }

    let noise = Normal::new(0.0, config.pixel_noise).expect("validated noise level");
    let data = od
        .iter()
        .flat_map(|p| p.map(|v| (10f64.powf(-v) + noise.sample(rng)).clamp(0.0, 1.0) as f32))
        .collect::<Vec<f32>>();
    SyntheticSample {
        image: Image { height: n, width: n, data },
        mask: SegmentationMask::new(n, n, mask, MaskSource::GroundTruth, String::new())
            .expect("mask sized from the image"),
        label,
    }
}

/// Writes `n_positive + n_negative` images and masks under `out_dir` and
/// returns the manifest (all records in split `train`; see [`split_manifest`]).
pub fn generate_synthetic(config: &SyntheticConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    std::fs::create_dir_all(out_dir.join("images")).map_err(io_err(out_dir.join("images")))?;
    std::fs::create_dir_all(out_dir.join("masks")).map_err(io_err(out_dir.join("masks")))?;
    let mut records = Vec::with_capacity(config.n_positive + config.n_negative);
    let jobs = (0..config.n_positive)
        .map(|i| (Label::Positive, i))
        .chain((0..config.n_negative).map(|i| (Label::Negative, i)));
    for (label, i) in jobs {
        // One stream per sample keeps each image independent of the counts.
        let stream = if label == Label::Positive { 0 } else { 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream * (1 << 32) + i as u64);
        let sample = render_sample(config, label, &mut rng);
        let stem = format!("{}_{i:05}.png", if label == Label::Positive { "pos" } else { "neg" });
        let image_rel = PathBuf::from("images").join(&stem);
        let mask_rel = PathBuf::from("masks").join(&stem);
        sample.image.save(&out_dir.join(&image_rel))?;
        sample.mask.save(&out_dir.join(&mask_rel))?;
        records.push(ManifestRecord { path: image_rel, label, mask_path: Some(mask_rel), split: Split::Train });
    }
    Ok(DatasetManifest { root: out_dir.to_path_buf(), records })
}

// ---------------------------------------------------------------------------
// Tiling

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub top: usize,
    pub left: usize,
    pub image: Image,
}

/// Row-major sliding-window tiling; trailing partial windows are dropped.
pub fn tile_image(image: &Image, patch: usize, stride: usize) -> Result<Vec<Tile>> {
    if patch == 0 || stride == 0 {
        return Err(invalid("patch size and stride must be positive"));
    }
    if patch > image.height.min(image.width) {
        return Err(invalid(format!(
            "patch {patch} exceeds the {}x{} image",
            image.height, image.width
        )));
    }
    let rows = (image.height - patch) / stride + 1;
    let cols = (image.width - patch) / stride + 1;
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (top, left) = (r * stride, c * stride);
            tiles.push(Tile { top, left, image: image.crop(top, left, patch, patch)? });
        }
    }
    Ok(tiles)
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = CaclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CaclError::Format { what: "split", detail: format!("`{other}`") }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Relative to the manifest directory.
    pub path: PathBuf,
    pub label: Label,
    pub mask_path: Option<PathBuf>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_HEADER: &str = "path\tlabel\tmask_path\tsplit";

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let mask = r.mask_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.path.display(), r.label, mask, r.split));
        }
        out
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == MANIFEST_HEADER => {}
            other => {
                return Err(CaclError::Format {
                    what: "manifest",
                    detail: format!("expected header `{MANIFEST_HEADER}`, found {other:?}"),
                })
            }
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(CaclError::Format {
                    what: "manifest",
                    detail: format!("line {} has {} fields, expected 4", n + 2, fields.len()),
                });
            }
            records.push(ManifestRecord {
                path: PathBuf::from(fields[0]),
                label: fields[1].parse()?,
                mask_path: (!fields[2].is_empty()).then(|| PathBuf::from(fields[2])),
                split: fields[3].trim_end().parse()?,
            });
        }
        Ok(Self { root, records })
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::parse(&text, root)?;
        for r in &manifest.records {
            for p in std::iter::once(&r.path).chain(r.mask_path.as_ref()) {
                let full = manifest.root.join(p);
                if !full.exists() {
                    return Err(CaclError::Io {
                        path: full,
                        source: std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest"),
                    });
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_text().as_bytes())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }
}

/// Stratified, seeded assignment of records to train/val/test.
pub fn split_manifest(manifest: &DatasetManifest, fractions: (f64, f64, f64), seed: u64) -> Result<DatasetManifest> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let mut out = manifest.clone();
    for (stream, label) in [Label::Positive, Label::Negative].into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..out.records.len()).filter(|&i| out.records[i].label == label).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = ((n as f64 * ft).round() as usize).min(n);
        let n_val = ((n as f64 * fv).round() as usize).min(n - n_train);
        for (rank, &i) in idx.iter().enumerate() {
            out.records[i].split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}
