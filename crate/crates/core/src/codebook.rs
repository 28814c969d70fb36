//! Class-aware partitioned vector quantization.
//!
//! The codebook holds two disjoint groups of code vectors: the shared partition
//! `S` (indices `0..num_shared`) and the class partition `C` (indices
//! `num_shared..num_shared + num_class`). Quantization can be restricted to `S`
//! or run over `S ∪ C`; which partition each cell drew from is what the
//! segmentation stage reads back.
//!
//! Code vectors are never trained by gradient. They follow exponential moving
//! averages of the encoder outputs assigned to them, and codes that fall out of
//! use can be re-seeded from recent encoder outputs.

use candle_core::{DType, Device, Tensor};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape, Result};

pub const DEFAULT_BETA: f64 = 0.25;
pub const DEFAULT_DECAY: f64 = 0.99;
pub const EMA_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeSubset {
    SharedOnly,
    SharedAndClass,
}

/// A batch of feature grids stored channels-last: `(batch, height, width, dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(batch: usize, height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * height * width * dim {
            return Err(shape(format!(
                "feature data has {} values, expected {batch}x{height}x{width}x{dim}",
                data.len()
            )));
        }
        Ok(Self { batch, height, width, dim, data })
    }

    /// Reads a `(batch, dim, height, width)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (batch, dim, height, width) = t.dims4()?;
        let data = t
            .permute((0, 2, 3, 1))?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        Self::new(batch, height, width, dim, data)
    }

    /// Back to `(batch, dim, height, width)`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.batch, self.height, self.width, self.dim), device)?
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .to_dtype(dtype)?;
        Ok(t)
    }

    pub fn num_cells(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn cells_per_item(&self) -> usize {
        self.height * self.width
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub subset: CodeSubset,
    /// Channels-last code vectors, one per cell.
    pub quantized: Vec<f64>,
    pub indices: Vec<usize>,
    pub from_class_partition: Vec<bool>,
    /// Mean over cells of the squared distance between a feature and its code.
    pub commitment_value: f64,
}

impl QuantizationResult {
    pub fn quantized_grid(&self) -> FeatureGrid {
        FeatureGrid {
            batch: self.batch,
            height: self.height,
            width: self.width,
            dim: self.dim,
            data: self.quantized.clone(),
        }
    }

    pub fn quantized_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        self.quantized_grid().to_tensor(dtype, device)
    }

    pub fn cells_per_item(&self) -> usize {
        self.height * self.width
    }

    /// Class-partition usage of batch item `b`, row-major `height × width`.
    pub fn usage(&self, b: usize) -> &[bool] {
        let n = self.cells_per_item();
        &self.from_class_partition[b * n..(b + 1) * n]
    }

    pub fn quantized_cell(&self, i: usize) -> &[f64] {
        &self.quantized[i * self.dim..(i + 1) * self.dim]
    }
}

/// Encoder outputs gathered during training, used as re-seeding targets.
#[derive(Debug, Clone, Default)]
pub struct ReinitPools {
    pub shared: Vec<Vec<f64>>,
    pub class: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookPartitioned {
    num_shared: usize,
    num_class: usize,
    dim: usize,
    codes: Vec<f64>,
    ema_counts: Vec<f64>,
    ema_sums: Vec<f64>,
    decay: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl CodebookPartitioned {
    /// Seeded uniform initialization on `[-1/K, 1/K]` with `K` the total code count.
    pub fn new(num_shared: usize, num_class: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_shared == 0 || num_class == 0 || dim == 0 {
            return Err(invalid(format!(
                "codebook sizes must be positive (num_shared={num_shared}, num_class={num_class}, dim={dim})"
            )));
        }
        let total = num_shared + num_class;
        let bound = 1.0 / total as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes = (0..total * dim).map(|_| rng.random_range(-bound..=bound)).collect();
        Ok(Self {
            num_shared,
            num_class,
            dim,
            codes,
            ema_counts: vec![0.0; total],
            ema_sums: vec![0.0; total * dim],
            decay: DEFAULT_DECAY,
        })
    }

    /// Builds a codebook from explicit code rows; EMA state starts at zero.
    pub fn from_codes(shared: &[Vec<f64>], class: &[Vec<f64>]) -> Result<Self> {
        if shared.is_empty() || class.is_empty() {
            return Err(invalid("both partitions need at least one code"));
        }
        let dim = shared[0].len();
        if dim == 0 || shared.iter().chain(class).any(|c| c.len() != dim) {
            return Err(shape("all code vectors must share one positive width"));
        }
        if shared.iter().chain(class).flatten().any(|v| !v.is_finite()) {
            return Err(invalid("code vectors must be finite"));
        }
        let total = shared.len() + class.len();
        Ok(Self {
            num_shared: shared.len(),
            num_class: class.len(),
            dim,
            codes: shared.iter().chain(class).flatten().copied().collect(),
            ema_counts: vec![0.0; total],
            ema_sums: vec![0.0; total * dim],
            decay: DEFAULT_DECAY,
        })
    }

    pub(crate) fn from_raw(
        num_shared: usize,
        num_class: usize,
        dim: usize,
        codes: Vec<f64>,
        ema_counts: Vec<f64>,
        ema_sums: Vec<f64>,
        decay: f64,
    ) -> Result<Self> {
        let total = num_shared + num_class;
        if num_shared == 0 || num_class == 0 || dim == 0 {
            return Err(invalid("codebook sizes must be positive"));
        }
        if codes.len() != total * dim || ema_counts.len() != total || ema_sums.len() != total * dim {
            return Err(shape("codebook buffers disagree with its sizes"));
        }
        let mut cb = Self { num_shared, num_class, dim, codes, ema_counts, ema_sums, decay: DEFAULT_DECAY };
        cb.set_decay(decay)?;
        Ok(cb)
    }

    pub fn with_decay(mut self, decay: f64) -> Result<Self> {
        self.set_decay(decay)?;
        Ok(self)
    }

    pub fn set_decay(&mut self, decay: f64) -> Result<()> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(invalid(format!("EMA decay must lie in (0, 1), got {decay}")));
        }
        self.decay = decay;
        Ok(())
    }

    pub fn num_shared(&self) -> usize {
        self.num_shared
    }

    pub fn num_class(&self) -> usize {
        self.num_class
    }

    pub fn num_codes(&self) -> usize {
        self.num_shared + self.num_class
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn code(&self, k: usize) -> &[f64] {
        &self.codes[k * self.dim..(k + 1) * self.dim]
    }

    pub fn codes(&self) -> &[f64] {
        &self.codes
    }

    pub fn ema_counts(&self) -> &[f64] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &[f64] {
        &self.ema_sums
    }

    pub fn is_class_code(&self, k: usize) -> bool {
        k >= self.num_shared
    }

    fn allowed(&self, subset: CodeSubset) -> usize {
        match subset {
            CodeSubset::SharedOnly => self.num_shared,
            CodeSubset::SharedAndClass => self.num_codes(),
        }
    }

    /// Nearest allowed code to `v`; the lowest index wins ties.
    pub fn nearest(&self, v: &[f64], subset: CodeSubset) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.allowed(subset) {
            let d = squared_distance(v, self.code(k));
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    pub fn quantize(&self, features: &FeatureGrid, subset: CodeSubset) -> Result<QuantizationResult> {
        if features.dim != self.dim {
            return Err(shape(format!(
                "feature width {} does not match codebook width {}",
                features.dim, self.dim
            )));
        }
        if features.data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("features must be finite"));
        }
        let n = features.num_cells();
        let mut quantized = Vec::with_capacity(features.data.len());
        let mut indices = Vec::with_capacity(n);
        let mut from_class = Vec::with_capacity(n);
        let mut total = 0.0;
        for i in 0..n {
            let (k, d) = self.nearest(features.cell(i), subset);
            quantized.extend_from_slice(self.code(k));
            indices.push(k);
            from_class.push(self.is_class_code(k));
            total += d;
        }
        Ok(QuantizationResult {
            batch: features.batch,
            height: features.height,
            width: features.width,
            dim: features.dim,
            subset,
            quantized,
            indices,
            from_class_partition: from_class,
            commitment_value: if n == 0 { 0.0 } else { total / n as f64 },
        })
    }

    /// One EMA step from every cell of `result`.
    pub fn ema_update(&mut self, features: &FeatureGrid, result: &QuantizationResult) -> Result<()> {
        self.ema_update_masked(&[(features, result, None)])
    }

    /// One EMA step accumulated over several `(features, result, cell mask)`
    /// contributions. Cells whose mask entry is `false` are ignored.
    pub fn ema_update_masked(&mut self, parts: &[(&FeatureGrid, &QuantizationResult, Option<&[bool]>)]) -> Result<()> {
        let total = self.num_codes();
        let dim = self.dim;
        let mut counts = vec![0.0; total];
        let mut sums = vec![0.0; total * dim];
        for (features, result, mask) in parts {
            if features.dim != dim || result.indices.len() != features.num_cells() {
                return Err(shape("EMA contribution does not match the codebook or its features"));
            }
            if let Some(m) = mask {
                if m.len() != result.indices.len() {
                    return Err(shape("EMA mask length differs from the cell count"));
                }
            }
            for (i, &k) in result.indices.iter().enumerate() {
                if k >= total {
                    return Err(invalid(format!("code index {k} out of range")));
                }
                if mask.is_some_and(|m| !m[i]) {
                    continue;
                }
                counts[k] += 1.0;
                for (s, v) in sums[k * dim..(k + 1) * dim].iter_mut().zip(features.cell(i)) {
                    *s += v;
                }
            }
        }
        let decay = self.decay;
        for k in 0..total {
            self.ema_counts[k] = decay * self.ema_counts[k] + (1.0 - decay) * counts[k];
            let row = k * dim..(k + 1) * dim;
            for (s, new) in self.ema_sums[row.clone()].iter_mut().zip(&sums[row.clone()]) {
                *s = decay * *s + (1.0 - decay) * new;
            }
            if counts[k] > 0.0 {
                let denom = self.ema_counts[k].max(EMA_EPSILON);
                for (c, s) in self.codes[row.clone()].iter_mut().zip(&self.ema_sums[row]) {
                    *c = s / denom;
                }
            }
        }
        Ok(())
    }

    /// Re-seeds every code used at most `threshold` times in `usage`.
    ///
    /// Shared codes draw from `pools.shared`, class codes from `pools.class`;
    /// a code whose pool is empty is left alone. The EMA state of a replaced
    /// code is cleared. Returns the replaced indices.
    pub fn dead_code_reinit(
        &mut self,
        usage: &[u64],
        threshold: u64,
        pools: &ReinitPools,
        seed: u64,
    ) -> Result<Vec<usize>> {
        if usage.len() != self.num_codes() {
            return Err(shape(format!(
                "usage window covers {} codes, codebook has {}",
                usage.len(),
                self.num_codes()
            )));
        }
        if pools.shared.iter().chain(&pools.class).any(|v| v.len() != self.dim) {
            return Err(shape("re-seeding candidates must match the code width"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut replaced = Vec::new();
        for (k, &used) in usage.iter().enumerate() {
            if used > threshold {
                continue;
            }
            let pool = if self.is_class_code(k) { &pools.class } else { &pools.shared };
            let Some(src) = pool.choose(&mut rng) else { continue };
            let row = k * self.dim..(k + 1) * self.dim;
            self.codes[row.clone()].copy_from_slice(src);
            self.ema_sums[row].iter_mut().for_each(|s| *s = 0.0);
            self.ema_counts[k] = 0.0;
            replaced.push(k);
        }
        Ok(replaced)
    }
}

/// `||sg[f] − q||² + β·||sg[q] − f||²`, averaged over cells.
pub fn commitment_loss(features: &FeatureGrid, result: &QuantizationResult, beta: f64) -> Result<f64> {
    if beta < 0.0 || beta.is_nan() {
        return Err(invalid(format!("beta must be nonnegative, got {beta}")));
    }
    if features.data.len() != result.quantized.len() {
        return Err(shape("features and quantization result differ in size"));
    }
    let n = features.num_cells();
    if n == 0 {
        return Ok(0.0);
    }
    let dist: f64 = (0..n)
        .map(|i| squared_distance(features.cell(i), result.quantized_cell(i)))
        .sum::<f64>()
        / n as f64;
    Ok(dist + beta * dist)
}

/// Differentiable form of [`commitment_loss`] over `(batch, dim, h, w)` tensors.
///
/// `quantized` is treated as a constant; only the β-weighted term carries
/// gradient into `features`.
pub fn commitment_loss_tensor(features: &Tensor, quantized: &Tensor, beta: f64) -> Result<Tensor> {
    if beta < 0.0 || beta.is_nan() {
        return Err(invalid(format!("beta must be nonnegative, got {beta}")));
    }
    let q = quantized.detach();
    let codebook_term = (features.detach() - &q)?.sqr()?.sum(1)?.mean_all()?;
    let encoder_term = (&q - features)?.sqr()?.sum(1)?.mean_all()?;
    Ok((codebook_term + (encoder_term * beta)?)?)
}

/// Forward value is exactly `quantized`; the backward pass hands the incoming
/// gradient to `features` unchanged.
pub fn straight_through(features: &Tensor, quantized: &Tensor) -> Result<Tensor> {
    let zero_with_grad = (features - features.detach())?;
    Ok((quantized.detach() + zero_with_grad)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_from(cells: &[Vec<f64>], h: usize, w: usize) -> FeatureGrid {
        let dim = cells[0].len();
        FeatureGrid::new(1, h, w, dim, cells.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn init_sizes_and_determinism() {
        let cb = CodebookPartitioned::new(32, 32, 64, 7).unwrap();
        assert_eq!(cb.num_codes(), 64);
        assert_eq!(cb.codes().len(), 64 * 64);
        let bound = 1.0 / 64.0;
        assert!(cb.codes().iter().all(|v| v.abs() <= bound));
        assert!(cb.ema_counts().iter().all(|&c| c == 0.0));

        let a = CodebookPartitioned::new(1, 1, 2, 0).unwrap();
        let b = CodebookPartitioned::new(1, 1, 2, 0).unwrap();
        assert_eq!(a.num_codes(), 2);
        let bits = |cb: &CodebookPartitioned| cb.codes().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));

        let c = CodebookPartitioned::new(4, 4, 8, 1).unwrap();
        let d = CodebookPartitioned::new(4, 4, 8, 2).unwrap();
        assert_ne!(c.codes(), d.codes());
    }

    #[test]
    fn init_rejects_zero_sizes() {
        assert!(CodebookPartitioned::new(0, 1, 1, 0).is_err());
        assert!(CodebookPartitioned::new(1, 0, 1, 0).is_err());
        assert!(CodebookPartitioned::new(1, 1, 0, 0).is_err());
    }

    #[test]
    fn single_shared_code_takes_everything() {
        let v = vec![0.3, -0.2];
        let cb = CodebookPartitioned::from_codes(&[v.clone()], &[vec![5.0, 5.0]]).unwrap();
        let g = grid_from(&[vec![4.0, 4.0], vec![0.0, 0.0], vec![-1.0, 3.0], vec![9.0, 9.0]], 2, 2);
        let r = cb.quantize(&g, CodeSubset::SharedOnly).unwrap();
        assert!(r.indices.iter().all(|&k| k == 0));
        assert!(r.from_class_partition.iter().all(|&c| !c));
        for i in 0..4 {
            assert_eq!(r.quantized_cell(i), v.as_slice());
        }
    }

    #[test]
    fn features_on_a_code_are_fixed_points() {
        let cb = CodebookPartitioned::new(3, 3, 4, 11).unwrap();
        let j = 4;
        let cells: Vec<Vec<f64>> = (0..9).map(|_| cb.code(j).to_vec()).collect();
        let g = grid_from(&cells, 3, 3);
        let r = cb.quantize(&g, CodeSubset::SharedAndClass).unwrap();
        assert!(r.indices.iter().all(|&k| k == j));
        assert_eq!(r.quantized, g.data);
        assert_eq!(r.commitment_value, 0.0);
        assert_eq!(commitment_loss(&g, &r, 0.25).unwrap(), 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = CodebookPartitioned::from_codes(&[vec![1.0], vec![-1.0]], &[vec![1.0]]).unwrap();
        let g = grid_from(&[vec![0.0], vec![1.0]], 1, 2);
        let r = cb.quantize(&g, CodeSubset::SharedAndClass).unwrap();
        assert_eq!(r.indices, vec![0, 0]);
        assert!(r.from_class_partition.iter().all(|&c| !c));
    }

    #[test]
    fn dim_mismatch_is_a_shape_error() {
        let cb = CodebookPartitioned::new(2, 2, 3, 0).unwrap();
        let g = grid_from(&[vec![0.0, 0.0]], 1, 1);
        assert!(matches!(
            cb.quantize(&g, CodeSubset::SharedOnly),
            Err(crate::CaclError::Shape(_))
        ));
    }

    #[test]
    fn scalar_commitment_closed_form() {
        let cb = CodebookPartitioned::from_codes(&[vec![0.0]], &[vec![10.0]]).unwrap();
        let g = grid_from(&[vec![0.5]], 1, 1);
        let r = cb.quantize(&g, CodeSubset::SharedAndClass).unwrap();
        let loss = commitment_loss(&g, &r, 0.25).unwrap();
        assert!((loss - 0.3125).abs() < 1e-15);
        assert!(commitment_loss(&g, &r, -0.1).is_err());
    }

    #[test]
    fn ema_single_step_matches_hand_computation() {
        // 16 cells on code 3, zeroed accumulators, decay 0.99:
        // counts = 0.01 * 16 = 0.16, sums = 0.01 * 16 * m, code = sums / counts = m.
        let mut cb = CodebookPartitioned::from_codes(
            &[vec![0.0, 0.0], vec![1.0, 1.0]],
            &[vec![2.0, 2.0], vec![3.0, -3.0]],
        )
        .unwrap();
        let feats: Vec<Vec<f64>> = (0..16).map(|i| vec![3.0 + (i % 2) as f64 * 0.2, -3.0]).collect();
        let g = grid_from(&feats, 4, 4);
        let r = cb.quantize(&g, CodeSubset::SharedAndClass).unwrap();
        assert!(r.indices.iter().all(|&k| k == 3));
        cb.ema_update(&g, &r).unwrap();
        let m = [3.1, -3.0];
        assert!((cb.ema_counts()[3] - 0.16).abs() < 1e-12);
        for (c, e) in cb.code(3).iter().zip(m) {
            assert!((c - e).abs() < 1e-12);
        }
        // Second step towards a different mean m2 = (4, -3):
        // counts = 0.99*0.16 + 0.16, sums = 0.99*0.16*m + 0.16*m2.
        let feats2: Vec<Vec<f64>> = (0..16).map(|_| vec![4.0, -3.0]).collect();
        let g2 = grid_from(&feats2, 4, 4);
        let r2 = cb.quantize(&g2, CodeSubset::SharedAndClass).unwrap();
        cb.ema_update(&g2, &r2).unwrap();
        let counts = 0.99 * 0.16 + 0.16;
        let expected_x = (0.99 * 0.16 * 3.1 + 0.16 * 4.0) / counts;
        assert!((cb.code(3)[0] - expected_x).abs() < 1e-12);
        // Untouched codes keep their vectors.
        assert_eq!(cb.code(1), &[1.0, 1.0]);
    }

    #[test]
    fn ema_attracts_monotonically() {
        let mut cb = CodebookPartitioned::new(1, 1, 3, 5).unwrap();
        let v = vec![0.7, -0.4, 0.2];
        let g = grid_from(&vec![v.clone(); 4], 2, 2);
        let only_zero = QuantizationResult {
            indices: vec![0; 4],
            from_class_partition: vec![false; 4],
            quantized: cb.code(0).repeat(4),
            ..cb.quantize(&g, CodeSubset::SharedOnly).unwrap()
        };
        let mut prev = squared_distance(cb.code(0), &v);
        for _ in 0..5 {
            cb.ema_update(&g, &only_zero).unwrap();
            let d = squared_distance(cb.code(0), &v);
            // Rounding can wobble the distance once the code sits on the mean.
            assert!(d <= prev + 1e-24);
            if prev > 1e-20 {
                assert!(d < prev);
            }
            prev = d;
        }
    }

    #[test]
    fn decay_bounds_enforced() {
        let cb = CodebookPartitioned::new(1, 1, 1, 0).unwrap();
        assert!(cb.clone().with_decay(1.0).is_err());
        assert!(cb.clone().with_decay(0.0).is_err());
        assert!(cb.with_decay(0.5).is_ok());
    }

    #[test]
    fn ema_ignores_masked_cells() {
        let mut cb = CodebookPartitioned::from_codes(&[vec![0.0]], &[vec![1.0]]).unwrap();
        let g = grid_from(&[vec![0.1], vec![0.9]], 1, 2);
        let r = cb.quantize(&g, CodeSubset::SharedAndClass).unwrap();
        let mask = [false, true];
        cb.ema_update_masked(&[(&g, &r, Some(&mask))]).unwrap();
        assert_eq!(cb.code(0), &[0.0]);
        assert!((cb.code(1)[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn dead_code_reinit_cases() {
        let base = CodebookPartitioned::new(2, 2, 2, 3).unwrap();
        let pools = ReinitPools {
            shared: vec![vec![9.0, 9.0]],
            class: vec![vec![-9.0, -9.0]],
        };
        let mut cb = base.clone();
        let replaced = cb.dead_code_reinit(&[5, 5, 5, 5], 0, &pools, 1).unwrap();
        assert!(replaced.is_empty());
        assert_eq!(cb, base);

        let mut cb = base.clone();
        let replaced = cb.dead_code_reinit(&[5, 5, 0, 5], 0, &pools, 1).unwrap();
        assert_eq!(replaced, vec![2]);
        assert_eq!(cb.code(2), &[-9.0, -9.0]);
        assert_eq!(cb.num_shared(), 2);
        assert_eq!(cb.num_class(), 2);
        for k in [0, 1, 3] {
            assert_eq!(cb.code(k), base.code(k));
        }

        let mut a = base.clone();
        let mut b = base.clone();
        let many = ReinitPools {
            shared: (0..10).map(|i| vec![i as f64, 0.0]).collect(),
            class: (0..10).map(|i| vec![0.0, i as f64]).collect(),
        };
        a.dead_code_reinit(&[0, 0, 0, 0], 0, &many, 42).unwrap();
        b.dead_code_reinit(&[0, 0, 0, 0], 0, &many, 42).unwrap();
        assert_eq!(a, b);
        assert!(base.clone().dead_code_reinit(&[0, 0], 0, &many, 0).is_err());
    }

    #[test]
    fn straight_through_value_and_gradient() {
        let dev = Device::Cpu;
        let f = candle_core::Var::from_slice(&[0.5f64, -1.25, 2.0, 0.1], (1, 1, 2, 2), &dev).unwrap();
        let q = Tensor::from_slice(&[0.0f64, -1.0, 2.5, 0.3], (1, 1, 2, 2), &dev).unwrap();
        let st = straight_through(f.as_tensor(), &q).unwrap();
        assert_eq!(st.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![0.0, -1.0, 2.5, 0.3]);
        let w = Tensor::from_slice(&[1.0f64, -2.0, 3.0, 0.5], (1, 1, 2, 2), &dev).unwrap();
        let loss = (st * &w).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(&f).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(g, vec![1.0, -2.0, 3.0, 0.5]);
    }
}
