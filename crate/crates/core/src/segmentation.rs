//! Masks from class-partition usage.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat};

use crate::autoencoder::Autoencoder;
use crate::codebook::{CodeSubset, CodebookPartitioned, FeatureGrid};
use crate::data::{images_to_tensor, Image};
use crate::error::{shape, CaclError, Result};
use crate::io::atomic_write;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    Cacl,
    Baseline,
    GroundTruth,
}

/// Binary `height × width` mask, row-major, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub source: MaskSource,
    pub provenance: String,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>, source: MaskSource, provenance: String) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(shape(format!("{} mask values for {height}x{width}", pixels.len())));
        }
        if pixels.iter().any(|&p| p > 1) {
            return Err(CaclError::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, pixels, source, provenance })
    }

    pub fn zeros(height: usize, width: usize, source: MaskSource) -> Self {
        Self { height, width, pixels: vec![0; height * width], source, provenance: String::new() }
    }

    pub fn popcount(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x] == 1
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &SegmentationMask) -> bool {
        self.pixels.len() == other.pixels.len() && self.pixels.iter().zip(&other.pixels).all(|(a, b)| *a <= *b)
    }

    /// Any-true pooling over `factor × factor` blocks.
    pub fn downsample_any(&self, factor: usize) -> Result<Vec<bool>> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(shape(format!("{}x{} mask is not divisible by {factor}", self.height, self.width)));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = vec![false; h * w];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    out[(y / factor) * w + x / factor] = true;
                }
            }
        }
        Ok(out)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let raw = self.pixels.iter().map(|&p| p * 255).collect();
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, raw).ok_or_else(|| shape("mask buffer size"))?;
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, ImageFormat::Png)
            .map_err(|source| CaclError::Image { path: PathBuf::from("<memory>"), source })?;
        Ok(buf.into_inner())
    }

    /// Writes a single-channel PNG with values `{0, 255}`.
    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_png_bytes()?)
    }

    pub fn load(path: &Path, source: MaskSource) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| CaclError::Image { path: path.to_path_buf(), source })?
            .to_luma8();
        let (w, h) = img.dimensions();
        let pixels = img.into_raw().into_iter().map(|v| u8::from(v > 127)).collect();
        Self::new(h as usize, w as usize, pixels, source, path.display().to_string())
    }

    /// Alpha-blends the mask in red over `image`.
    pub fn overlay(&self, image: &Image, alpha: f32) -> Result<Image> {
        if image.height != self.height || image.width != self.width {
            return Err(shape("overlay image and mask differ in size"));
        }
        let mut out = image.clone();
        for (i, &p) in self.pixels.iter().enumerate() {
            if p == 1 {
                let px = &mut out.data[i * 3..i * 3 + 3];
                for (c, target) in px.iter_mut().zip([1.0f32, 0.0, 0.0]) {
                    *c = (1.0 - alpha) * *c + alpha * target;
                }
            }
        }
        Ok(out)
    }
}

/// Nearest-neighbour expansion of a feature-resolution usage grid.
pub fn extract_mask(usage: &[bool], usage_h: usize, usage_w: usize, target: (usize, usize)) -> Result<SegmentationMask> {
    let (h, w) = target;
    if usage.len() != usage_h * usage_w {
        return Err(shape("usage grid length does not match its dimensions"));
    }
    if usage_h == 0 || usage_w == 0 || h % usage_h != 0 || w % usage_w != 0 || h / usage_h != w / usage_w {
        return Err(shape(format!(
            "target {h}x{w} is not a uniform multiple of the {usage_h}x{usage_w} usage grid"
        )));
    }
    let f = h / usage_h;
    let mut pixels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            pixels[y * w + x] = u8::from(usage[(y / f) * usage_w + x / f]);
        }
    }
    SegmentationMask::new(h, w, pixels, MaskSource::Cacl, String::new())
}

/// Binary dilation by the discrete disk `{(dy, dx) : dy² + dx² ≤ r²}`.
pub fn dilate(mask: &SegmentationMask, radius: usize) -> SegmentationMask {
    if radius == 0 {
        return mask.clone();
    }
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let (h, w) = (mask.height as isize, mask.width as isize);
    let mut out = vec![0u8; mask.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            if mask.pixels[(y * w + x) as usize] == 0 {
                continue;
            }
            for (dy, dx) in &offsets {
                let (yy, xx) = (y + dy, x + dx);
                if yy >= 0 && yy < h && xx >= 0 && xx < w {
                    out[(yy * w + xx) as usize] = 1;
                }
            }
        }
    }
    SegmentationMask { pixels: out, ..mask.clone() }
}

/// Encodes, quantizes over `S ∪ C`, and marks the pixels whose feature cell
/// chose a class code.
pub fn segment_images(
    autoencoder: &Autoencoder,
    codebook: &CodebookPartitioned,
    images: &[&Image],
    dilation_radius: usize,
) -> Result<Vec<SegmentationMask>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let x = images_to_tensor(images, autoencoder.dtype(), autoencoder.device())?;
    let features = FeatureGrid::from_tensor(&autoencoder.encode(&x)?)?;
    let result = codebook.quantize(&features, CodeSubset::SharedAndClass)?;
    images
        .iter()
        .enumerate()
        .map(|(b, img)| {
            let mask = extract_mask(result.usage(b), result.height, result.width, (img.height, img.width))?;
            Ok(dilate(&mask, dilation_radius))
        })
        .collect()
}

pub fn segment_image(
    autoencoder: &Autoencoder,
    codebook: &CodebookPartitioned,
    image: &Image,
    dilation_radius: usize,
) -> Result<SegmentationMask> {
    Ok(segment_images(autoencoder, codebook, &[image], dilation_radius)?.remove(0))
}
