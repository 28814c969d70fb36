//! Colour-deconvolution baseline: optical density, stain unmixing, DAB threshold.

use crate::data::Image;
use crate::error::{invalid, shape, Result};
use crate::segmentation::{MaskSource, SegmentationMask};

/// Lower clamp applied to intensities before taking the logarithm.
pub const OD_EPSILON: f64 = 1.0 / 255.0;

pub const HEMATOXYLIN: [f64; 3] = [0.65, 0.70, 0.29];
pub const DAB: [f64; 3] = [0.27, 0.57, 0.78];

/// Concentration maps, channels-last, one column per stain row.
#[derive(Debug, Clone, PartialEq)]
pub struct Concentrations {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Concentrations {
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }
}

/// Channels-last optical density image.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticalDensity {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

pub fn rgb_to_od(image: &Image) -> OpticalDensity {
    let data = image.data.iter().map(|&v| -(v as f64).clamp(OD_EPSILON, 1.0).log10()).collect();
    OpticalDensity { height: image.height, width: image.width, data }
}

pub fn rgb_values_to_od(values: &[f64]) -> Vec<f64> {
    values.iter().map(|v| -v.clamp(OD_EPSILON, 1.0).log10()).collect()
}

pub fn od_to_rgb_values(od: &[f64]) -> Vec<f64> {
    od.iter().map(|v| 10f64.powf(-v)).collect()
}

fn norm(v: [f64; 3]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Rows are unit OD vectors of the stains (hematoxylin, DAB, residual).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainMatrix {
    rows: [[f64; 3]; 3],
    inverse: [[f64; 3]; 3],
}

impl StainMatrix {
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self> {
        let mut unit = rows;
        for r in &mut unit {
            let n = norm(*r);
            if !(n.is_finite() && n > 0.0) {
                return Err(invalid("stain vectors must be finite and nonzero"));
            }
            *r = r.map(|v| v / n);
        }
        let inverse = invert3(&unit).ok_or_else(|| invalid("stain matrix is singular"))?;
        Ok(Self { rows: unit, inverse })
    }

    /// Two stains plus their normalized cross product as the residual.
    pub fn from_two(first: [f64; 3], second: [f64; 3]) -> Result<Self> {
        let r = cross(first, second);
        Self::new([first, second, r])
    }

    /// Hematoxylin–DAB vectors with a cross-product residual.
    pub fn h_dab() -> Self {
        Self::from_two(HEMATOXYLIN, DAB).expect("reference stain vectors are independent")
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.rows
    }
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    // Rows are unit length, so |det| is a scale-free measure of independence.
    if !det.is_finite() || det.abs() < 1e-10 {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, d) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
        }
    }
    Some(inv)
}

/// Solves `od = c · M` for every pixel and clamps concentrations at zero.
pub fn deconvolve(od: &OpticalDensity, stains: &StainMatrix) -> Concentrations {
    let inv = &stains.inverse;
    let mut data = Vec::with_capacity(od.data.len());
    for px in od.data.chunks_exact(3) {
        for j in 0..3 {
            let c = px[0] * inv[0][j] + px[1] * inv[1][j] + px[2] * inv[2][j];
            data.push(c.max(0.0));
        }
    }
    Concentrations { height: od.height, width: od.width, data }
}

/// Mask of pixels whose concentration strictly exceeds `threshold`.
pub fn threshold_dab(concentration: &[f64], height: usize, width: usize, threshold: f64) -> Result<SegmentationMask> {
    if concentration.len() != height * width {
        return Err(shape("concentration map size does not match its dimensions"));
    }
    let pixels = concentration.iter().map(|&c| u8::from(c > threshold)).collect();
    SegmentationMask::new(height, width, pixels, MaskSource::Baseline, String::new())
}

/// DAB concentration of an RGB image under `stains` (second row).
pub fn dab_concentration(image: &Image, stains: &StainMatrix) -> Vec<f64> {
    deconvolve(&rgb_to_od(image), stains).channel(1)
}

pub fn segment_color_deconv(image: &Image, stains: &StainMatrix, threshold: f64) -> Result<SegmentationMask> {
    threshold_dab(&dab_concentration(image, stains), image.height, image.width, threshold)
}

/// Soft foreground probability `σ((c − t) / scale)` for the BCE variant.
pub fn soft_probability(concentration: &[f64], threshold: f64, scale: f64) -> Vec<f64> {
    concentration.iter().map(|c| 1.0 / (1.0 + (-(c - threshold) / scale).exp())).collect()
}
