//! Dice, precision, recall and BCE with the empty-ground-truth convention:
//! when the ground truth is empty, an empty prediction scores 1 on the overlap
//! metrics and any other prediction scores 0.

use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};
use crate::segmentation::SegmentationMask;

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn confusion(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<Confusion> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.pixels.iter().zip(&gt.pixels) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

fn degenerate(c: &Confusion) -> Option<f64> {
    (c.tp + c.fn_ == 0).then(|| if c.fp == 0 { 1.0 } else { 0.0 })
}

pub fn dice(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    Ok(degenerate(&c).unwrap_or_else(|| 2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64))
}

pub fn precision_recall(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<(f64, f64)> {
    let c = confusion(pred, gt)?;
    if let Some(v) = degenerate(&c) {
        return Ok((v, v));
    }
    let precision = if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
    let recall = c.tp as f64 / (c.tp + c.fn_) as f64;
    Ok((precision, recall))
}

/// Mean pixel-wise binary cross-entropy with probabilities clamped to
/// `[1e-7, 1 − 1e-7]`.
pub fn bce(pred_prob: &[f64], gt: &SegmentationMask) -> Result<f64> {
    if pred_prob.len() != gt.pixels.len() {
        return Err(shape(format!("{} probabilities for {} pixels", pred_prob.len(), gt.pixels.len())));
    }
    if pred_prob.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred_prob
        .iter()
        .zip(&gt.pixels)
        .map(|(&p, &g)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            if g == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / pred_prob.len() as f64)
}

pub fn mask_probabilities(mask: &SegmentationMask) -> Vec<f64> {
    mask.pixels.iter().map(|&p| p as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub bce: f64,
    pub positive_gt: bool,
    pub predicted_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageError {
    pub id: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Aggregate {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub bce: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub records: Vec<ImageMetrics>,
    pub errors: Vec<ImageError>,
    pub aggregate: Aggregate,
    /// Settings that produced the report, as key-value pairs.
    pub config: Vec<(String, String)>,
}

impl MetricsReport {
    pub fn new(method: impl Into<String>, records: Vec<ImageMetrics>, errors: Vec<ImageError>, config: Vec<(String, String)>) -> Self {
        let aggregate = aggregate(&records);
        Self { method: method.into(), records, errors, aggregate, config }
    }

    /// Share of records with empty ground truth that also have an empty prediction.
    pub fn empty_on_negatives(&self) -> f64 {
        let neg: Vec<_> = self.records.iter().filter(|r| !r.positive_gt).collect();
        if neg.is_empty() {
            return 1.0;
        }
        neg.iter().filter(|r| r.predicted_pixels == 0).count() as f64 / neg.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# method\t{}\n", self.method);
        for (k, v) in &self.config {
            out.push_str(&format!("# {k}\t{v}\n"));
        }
        out.push_str("id\tdice\tprecision\trecall\tbce\n");
        for r in &self.records {
            out.push_str(&format!("{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n", r.id, r.dice, r.precision, r.recall, r.bce));
        }
        for e in &self.errors {
            out.push_str(&format!("# error\t{}\t{}\n", e.id, e.message));
        }
        let a = &self.aggregate;
        out.push_str(&format!(
            "mean\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n# images\t{}\t# errors\t{}\n",
            a.dice,
            a.precision,
            a.recall,
            a.bce,
            a.count,
            self.errors.len()
        ));
        out
    }
}

pub fn aggregate(records: &[ImageMetrics]) -> Aggregate {
    let n = records.len();
    if n == 0 {
        return Aggregate::default();
    }
    let mean = |f: fn(&ImageMetrics) -> f64| records.iter().map(f).sum::<f64>() / n as f64;
    Aggregate {
        dice: mean(|r| r.dice),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        bce: mean(|r| r.bce),
        count: n,
    }
}

/// Scores one prediction. `prob` overrides the hard mask for the BCE term.
pub fn score(id: &str, pred: &SegmentationMask, gt: &SegmentationMask, prob: Option<&[f64]>) -> Result<ImageMetrics> {
    let (precision, recall) = precision_recall(pred, gt)?;
    let hard;
    let p = match prob {
        Some(p) => p,
        None => {
            hard = mask_probabilities(pred);
            &hard
        }
    };
    Ok(ImageMetrics {
        id: id.to_string(),
        dice: dice(pred, gt)?,
        precision,
        recall,
        bce: bce(p, gt)?,
        positive_gt: !gt.is_empty(),
        predicted_pixels: pred.popcount(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::MaskSource;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(h: usize, w: usize, pixels: Vec<u8>) -> SegmentationMask {
        SegmentationMask::new(h, w, pixels, MaskSource::Cacl, String::new()).unwrap()
    }

    #[test]
    fn identical_nonempty_masks() {
        let m = mask(2, 2, vec![1, 0, 1, 1]);
        assert_eq!(dice(&m, &m).unwrap(), 1.0);
        assert_eq!(precision_recall(&m, &m).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn empty_ground_truth_rule() {
        let empty = mask(2, 2, vec![0; 4]);
        let some = mask(2, 2, vec![0, 1, 0, 0]);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(precision_recall(&empty, &empty).unwrap(), (1.0, 1.0));
        assert_eq!(dice(&some, &empty).unwrap(), 0.0);
        assert_eq!(precision_recall(&some, &empty).unwrap(), (0.0, 0.0));
        // Empty prediction against nonempty truth.
        assert_eq!(precision_recall(&empty, &some).unwrap(), (0.0, 0.0));
        assert_eq!(dice(&empty, &some).unwrap(), 0.0);
    }

    #[test]
    fn strict_subset_prediction() {
        let gt = mask(2, 2, vec![1, 1, 1, 0]);
        let pred = mask(2, 2, vec![1, 0, 0, 0]);
        let (p, r) = precision_recall(&pred, &gt).unwrap();
        assert_eq!(p, 1.0);
        assert!(r < 1.0);
    }

    #[test]
    fn shape_mismatch() {
        assert!(dice(&mask(1, 2, vec![0, 1]), &mask(2, 1, vec![0, 1])).is_err());
        assert!(bce(&[0.5], &mask(1, 2, vec![0, 1])).is_err());
    }

    #[test]
    fn bce_reference_values() {
        let gt = mask(2, 2, vec![1, 0, 1, 0]);
        let half = bce(&[0.5; 4], &gt).unwrap();
        assert!((half - 2f64.ln()).abs() < 1e-12);
        let perfect = bce(&mask_probabilities(&gt), &gt).unwrap();
        assert!(perfect > 0.0 && perfect < 2e-7);
    }

    #[test]
    fn bce_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
            let g: Vec<u8> = (0..16).map(|_| u8::from(rng.random_bool(0.5))).collect();
            let mut sum = 0.0;
            for i in 0..16 {
                let q = p[i].max(1e-7).min(1.0 - 1e-7);
                sum -= if g[i] == 1 { q.ln() } else { (1.0 - q).ln() };
            }
            let got = bce(&p, &mask(4, 4, g)).unwrap();
            assert!((got - sum / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dice_is_harmonic_mean_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let a = mask(8, 8, (0..64).map(|_| u8::from(rng.random_bool(0.4))).collect());
            let b = mask(8, 8, (0..64).map(|_| u8::from(rng.random_bool(0.4))).collect());
            let c = confusion(&a, &b).unwrap();
            if a.is_empty() || b.is_empty() {
                continue;
            }
            let d = dice(&a, &b).unwrap();
            assert!((d - dice(&b, &a).unwrap()).abs() < 1e-15);
            if c.tp > 0 {
                let (p, r) = precision_recall(&a, &b).unwrap();
                assert!((d - 2.0 * p * r / (p + r)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn report_aggregates_are_means() {
        let gt = mask(1, 2, vec![1, 0]);
        let r1 = score("a", &mask(1, 2, vec![1, 0]), &gt, None).unwrap();
        let r2 = score("b", &mask(1, 2, vec![0, 1]), &gt, None).unwrap();
        let rep = MetricsReport::new("cacl", vec![r1.clone(), r2.clone()], vec![], vec![]);
        assert!((rep.aggregate.dice - (r1.dice + r2.dice) / 2.0).abs() < 1e-15);
        assert_eq!(rep.aggregate.count, 2);
        assert!(rep.to_text().contains("mean\t"));
    }
}
