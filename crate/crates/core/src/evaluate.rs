//! Scoring a trained model or the colour-deconvolution baseline against the
//! ground-truth masks of one manifest split.

use crate::autoencoder::Autoencoder;
use crate::baselines::{dab_concentration, soft_probability, threshold_dab, StainMatrix};
use crate::codebook::CodebookPartitioned;
use crate::data::{DatasetManifest, Image, Split};
use crate::error::Result;
use crate::metrics::{dice, score, ImageError, ImageMetrics, MetricsReport};
use crate::segmentation::{segment_images, MaskSource, SegmentationMask};

/// A split's images with their ground truth. Records whose mask is missing or
/// unreadable end up in `errors`.
#[derive(Debug, Clone, Default)]
pub struct EvalSet {
    pub ids: Vec<String>,
    pub images: Vec<Image>,
    pub truths: Vec<SegmentationMask>,
    pub errors: Vec<ImageError>,
}

impl EvalSet {
    pub fn load(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let mut set = EvalSet::default();
        for r in manifest.split(split) {
            let id = r.path.display().to_string();
            let Some(mask) = &r.mask_path else {
                set.errors.push(ImageError { id, message: "no ground-truth mask".into() });
                continue;
            };
            let loaded = Image::load(&manifest.resolve(&r.path))
                .and_then(|img| Ok((img, SegmentationMask::load(&manifest.resolve(mask), MaskSource::GroundTruth)?)));
            match loaded {
                Ok((img, gt)) => {
                    set.ids.push(id);
                    set.images.push(img);
                    set.truths.push(gt);
                }
                Err(e) => set.errors.push(ImageError { id, message: e.to_string() }),
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn method_tag(dilation_radius: usize) -> String {
    if dilation_radius == 0 {
        "cacl".into()
    } else {
        "cacl+morph".into()
    }
}

pub fn predict_cacl(
    autoencoder: &Autoencoder,
    codebook: &CodebookPartitioned,
    set: &EvalSet,
    dilation_radius: usize,
) -> Result<Vec<SegmentationMask>> {
    let mut masks = Vec::with_capacity(set.len());
    let refs: Vec<&Image> = set.images.iter().collect();
    for chunk in refs.chunks(32) {
        masks.extend(segment_images(autoencoder, codebook, chunk, dilation_radius)?);
    }
    for (m, id) in masks.iter_mut().zip(&set.ids) {
        m.provenance = id.clone();
    }
    Ok(masks)
}

fn report(
    method: String,
    set: &EvalSet,
    masks: &[SegmentationMask],
    probs: Option<&[Vec<f64>]>,
    config: Vec<(String, String)>,
) -> MetricsReport {
    let mut records: Vec<ImageMetrics> = Vec::new();
    let mut errors = set.errors.clone();
    for (i, (m, gt)) in masks.iter().zip(&set.truths).enumerate() {
        match score(&set.ids[i], m, gt, probs.map(|p| p[i].as_slice())) {
            Ok(r) => records.push(r),
            Err(e) => errors.push(ImageError { id: set.ids[i].clone(), message: e.to_string() }),
        }
    }
    MetricsReport::new(method, records, errors, config)
}

pub fn evaluate_cacl(
    autoencoder: &Autoencoder,
    codebook: &CodebookPartitioned,
    set: &EvalSet,
    dilation_radius: usize,
    mut config: Vec<(String, String)>,
) -> Result<MetricsReport> {
    let masks = predict_cacl(autoencoder, codebook, set, dilation_radius)?;
    config.push(("dilation_radius".into(), dilation_radius.to_string()));
    Ok(report(method_tag(dilation_radius), set, &masks, None, config))
}

/// Default sweep for the DAB threshold.
pub fn default_thresholds() -> Vec<f64> {
    (0..=60).map(|i| i as f64 * 0.025).collect()
}

/// Sweeps `thresholds` and keeps the one with the best mean Dice on `set`
/// (first wins ties). With `soft_scale`, BCE uses sigmoid probabilities.
pub fn evaluate_color_deconv(
    set: &EvalSet,
    stains: &StainMatrix,
    thresholds: &[f64],
    soft_scale: Option<f64>,
) -> Result<(MetricsReport, f64)> {
    let conc: Vec<Vec<f64>> = set.images.iter().map(|img| dab_concentration(img, stains)).collect();
    let masks_at = |t: f64| -> Result<Vec<SegmentationMask>> {
        conc.iter()
            .zip(&set.images)
            .map(|(c, img)| threshold_dab(c, img.height, img.width, t))
            .collect()
    };
    let mut best: Option<(f64, f64)> = None;
    for &t in thresholds {
        let masks = masks_at(t)?;
        let mut total = 0.0;
        for (m, gt) in masks.iter().zip(&set.truths) {
            total += dice(m, gt)?;
        }
        let mean = if set.is_empty() { 0.0 } else { total / set.len() as f64 };
        if best.is_none_or(|(_, d)| mean > d) {
            best = Some((t, mean));
        }
    }
    let threshold = best.map(|(t, _)| t).unwrap_or(0.0);
    let masks = masks_at(threshold)?;
    let probs: Option<Vec<Vec<f64>>> = soft_scale.map(|s| conc.iter().map(|c| soft_probability(c, threshold, s)).collect());
    let mut config = vec![
        ("threshold".to_string(), threshold.to_string()),
        ("swept_thresholds".to_string(), thresholds.len().to_string()),
        ("stain_rows".to_string(), format!("{:?}", stains.rows())),
    ];
    if let Some(s) = soft_scale {
        config.push(("soft_bce_scale".into(), s.to_string()));
    }
    Ok((report("colordeconv".into(), set, &masks, probs.as_deref(), config), threshold))
}
