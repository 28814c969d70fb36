//! Convolutional encoder/decoder with the dual `S` / `S ∪ C` forward pass.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codebook::{straight_through, CodeSubset, CodebookPartitioned, FeatureGrid, QuantizationResult};
use crate::data::{images_to_tensor, tensor_to_images, Image, Label, LabeledPatch};
use crate::error::{invalid, shape, Result};
use crate::nn::{Conv2d, ConvTranspose2d, ParamStore};

/// Spatial reduction of the encoder: two stride-2 convolutions.
pub const DOWNSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AutoencoderConfig {
    pub hidden: usize,
    pub dim: usize,
    pub residual_blocks: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self { hidden: 32, dim: 64, residual_blocks: 2 }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv3: Conv2d,
    conv1: Conv2d,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, ch: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mid = (ch / 2).max(1);
        Ok(Self {
            conv3: store.conv2d(&format!("{name}.conv3"), ch, mid, 3, 1, 1, rng)?,
            conv1: store.conv2d(&format!("{name}.conv1"), mid, ch, 1, 1, 0, rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv3.forward(&x.relu()?, false)?;
        let h = self.conv1.forward(&h.relu()?, false)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    config: AutoencoderConfig,
    store: ParamStore,
    enc_down1: Conv2d,
    enc_down2: Conv2d,
    enc_mix: Conv2d,
    enc_res: Vec<ResBlock>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_res: Vec<ResBlock>,
    dec_up1: ConvTranspose2d,
    dec_up2: ConvTranspose2d,
}

/// Everything produced by one dual forward pass over a batch.
#[derive(Debug, Clone)]
pub struct DualForward {
    /// Encoder output `(batch, dim, h, w)`, attached to the graph.
    pub features: Tensor,
    pub grid: FeatureGrid,
    /// Quantization over `S ∪ C`.
    pub e_pos: QuantizationResult,
    /// Quantization over `S` only.
    pub e_neg: QuantizationResult,
    /// Straight-through tensors for the two quantizations.
    pub quantized_pos: Tensor,
    pub quantized_neg: Tensor,
    pub recon_pos: Tensor,
    pub recon_neg: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionPair {
    pub recon_positive: Image,
    pub recon_negative: Image,
}

impl Autoencoder {
    pub fn new(config: AutoencoderConfig, dtype: DType, device: Device, seed: u64) -> Result<Self> {
        if config.hidden < 2 || config.dim == 0 {
            return Err(invalid("autoencoder widths must be positive (hidden >= 2)"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new(dtype, device);
        let h = config.hidden;
        let half = h / 2;
        let enc_down1 = s.conv2d("enc.down1", 3, half, 4, 2, 1, &mut rng)?;
        let enc_down2 = s.conv2d("enc.down2", half, h, 4, 2, 1, &mut rng)?;
        let enc_mix = s.conv2d("enc.mix", h, h, 3, 1, 1, &mut rng)?;
        let enc_res = (0..config.residual_blocks)
            .map(|i| ResBlock::new(&mut s, &format!("enc.res{i}"), h, &mut rng))
            .collect::<Result<_>>()?;
        let enc_out = s.conv2d("enc.out", h, config.dim, 1, 1, 0, &mut rng)?;
        let dec_in = s.conv2d("dec.in", config.dim, h, 3, 1, 1, &mut rng)?;
        let dec_res = (0..config.residual_blocks)
            .map(|i| ResBlock::new(&mut s, &format!("dec.res{i}"), h, &mut rng))
            .collect::<Result<_>>()?;
        let dec_up1 = s.conv_transpose2d("dec.up1", h, half, 4, 2, 1, &mut rng)?;
        let dec_up2 = s.conv_transpose2d("dec.up2", half, 3, 4, 2, 1, &mut rng)?;
        Ok(Self {
            config,
            store: s,
            enc_down1,
            enc_down2,
            enc_mix,
            enc_res,
            enc_out,
            dec_in,
            dec_res,
            dec_up1,
            dec_up2,
        })
    }

    pub fn config(&self) -> AutoencoderConfig {
        self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// `(batch, 3, H, W)` → `(batch, dim, H/4, W/4)`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(shape(format!("encoder expects 3 channels, got {c}")));
        }
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
            return Err(shape(format!("{h}x{w} input is not divisible by {DOWNSAMPLE}")));
        }
        let mut t = self.enc_down1.forward(x, false)?.relu()?;
        t = self.enc_down2.forward(&t, false)?.relu()?;
        t = self.enc_mix.forward(&t, false)?;
        for block in &self.enc_res {
            t = block.forward(&t)?;
        }
        self.enc_out.forward(&t.relu()?, false)
    }

    /// `(batch, dim, h, w)` → `(batch, 3, 4h, 4w)` with values in `(0, 1)`.
    pub fn decode(&self, q: &Tensor) -> Result<Tensor> {
        let mut t = self.dec_in.forward(q, false)?;
        for block in &self.dec_res {
            t = block.forward(&t)?;
        }
        t = self.dec_up1.forward(&t.relu()?, false)?.relu()?;
        let out = self.dec_up2.forward(&t, false)?;
        Ok((out.neg()?.exp()? + 1.0)?.recip()?)
    }

    pub fn encode_patch(&self, patch: &LabeledPatch) -> Result<FeatureGrid> {
        let x = images_to_tensor(&[&patch.pixels], self.dtype(), self.device())?;
        FeatureGrid::from_tensor(&self.encode(&x)?)
    }

    /// Encodes once, quantizes over `S ∪ C` and over `S`, and decodes both
    /// with the same decoder.
    pub fn forward_dual(&self, x: &Tensor, codebook: &CodebookPartitioned) -> Result<DualForward> {
        let features = self.encode(x)?;
        let grid = FeatureGrid::from_tensor(&features)?;
        let e_pos = codebook.quantize(&grid, CodeSubset::SharedAndClass)?;
        let e_neg = codebook.quantize(&grid, CodeSubset::SharedOnly)?;
        let quantized_pos = straight_through(&features, &e_pos.quantized_tensor(self.dtype(), self.device())?)?;
        let quantized_neg = straight_through(&features, &e_neg.quantized_tensor(self.dtype(), self.device())?)?;
        let b = grid.batch;
        let both = self.decode(&Tensor::cat(&[&quantized_pos, &quantized_neg], 0)?)?;
        let recon_pos = both.narrow(0, 0, b)?;
        let recon_neg = both.narrow(0, b, b)?;
        Ok(DualForward { features, grid, e_pos, e_neg, quantized_pos, quantized_neg, recon_pos, recon_neg })
    }

    pub fn forward_dual_patch(
        &self,
        patch: &LabeledPatch,
        codebook: &CodebookPartitioned,
    ) -> Result<(ReconstructionPair, QuantizationResult, QuantizationResult)> {
        let x = images_to_tensor(&[&patch.pixels], self.dtype(), self.device())?;
        let out = self.forward_dual(&x, codebook)?;
        let pair = ReconstructionPair {
            recon_positive: tensor_to_images(&out.recon_pos)?.remove(0),
            recon_negative: tensor_to_images(&out.recon_neg)?.remove(0),
        };
        Ok((pair, out.e_pos, out.e_neg))
    }
}

fn mse(a: &Image, b: &Image) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(shape("reconstruction and input differ in size"));
    }
    let n = a.data.len() as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / n)
}

/// `(1 − M)·‖I − R_P‖² + M·‖I − R_N‖²`, mean over pixels, with `M = 1` for
/// negative patches.
pub fn reconstruction_loss(patch: &LabeledPatch, pair: &ReconstructionPair) -> Result<f64> {
    match patch.label {
        Label::Positive => mse(&patch.pixels, &pair.recon_positive),
        Label::Negative => mse(&patch.pixels, &pair.recon_negative),
    }
}

/// Batched, differentiable [`reconstruction_loss`], averaged over the batch.
pub fn reconstruction_loss_tensor(input: &Tensor, recon_pos: &Tensor, recon_neg: &Tensor, labels: &[Label]) -> Result<Tensor> {
    let b = input.dim(0)?;
    if labels.len() != b || recon_pos.dims() != input.dims() || recon_neg.dims() != input.dims() {
        return Err(shape("reconstruction batch does not match the input batch"));
    }
    let m: Vec<f64> = labels.iter().map(|l| if *l == Label::Negative { 1.0 } else { 0.0 }).collect();
    let m = Tensor::from_vec(m, b, input.device())?.to_dtype(input.dtype())?;
    let per_pos = (input - recon_pos)?.sqr()?.flatten_from(1)?.mean(1)?;
    let per_neg = (input - recon_neg)?.sqr()?.flatten_from(1)?.mean(1)?;
    let one_minus = m.affine(-1.0, 1.0)?;
    let per = ((per_pos * one_minus)? + (per_neg * m)?)?;
    Ok(per.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceForm {
    /// Positive patches contribute `max(0, margin − d)`.
    Hinge,
    /// Positive patches contribute `−d`.
    Signed,
}

fn check_pair(e_neg: &QuantizationResult, e_pos: &QuantizationResult) -> Result<()> {
    if e_neg.quantized.len() != e_pos.quantized.len() || e_neg.batch != e_pos.batch {
        return Err(shape("quantization results come from different inputs"));
    }
    Ok(())
}

/// Mean squared code distance between the two quantizations over the cells of
/// item `b` that chose a class code, with the count of such cells.
pub fn class_cell_distance(e_neg: &QuantizationResult, e_pos: &QuantizationResult, b: usize) -> Result<(f64, usize)> {
    check_pair(e_neg, e_pos)?;
    let n = e_pos.cells_per_item();
    let mut sum = 0.0;
    let mut count = 0;
    for i in b * n..(b + 1) * n {
        if e_pos.from_class_partition[i] {
            sum += e_neg
                .quantized_cell(i)
                .iter()
                .zip(e_pos.quantized_cell(i))
                .map(|(a, c)| (a - c) * (a - c))
                .sum::<f64>();
            count += 1;
        }
    }
    Ok((if count == 0 { 0.0 } else { sum / count as f64 }, count))
}

fn divergence_value(d: f64, count: usize, label: Label, margin: f64, form: DivergenceForm) -> f64 {
    if count == 0 {
        return 0.0;
    }
    match (label, form) {
        (Label::Negative, _) => d,
        (Label::Positive, DivergenceForm::Hinge) => (margin - d).max(0.0),
        (Label::Positive, DivergenceForm::Signed) => -d,
    }
}

fn check_margin(margin: f64) -> Result<()> {
    if margin < 0.0 || margin.is_nan() {
        return Err(invalid(format!("margin must be nonnegative, got {margin}")));
    }
    Ok(())
}

/// Class-aware divergence for a single patch (`batch == 1`) or the batch
/// mean when `labels` has one entry per item.
pub fn codebook_divergence_loss(
    e_neg: &QuantizationResult,
    e_pos: &QuantizationResult,
    labels: &[Label],
    margin: f64,
    form: DivergenceForm,
) -> Result<f64> {
    check_margin(margin)?;
    check_pair(e_neg, e_pos)?;
    if labels.len() != e_pos.batch {
        return Err(shape("one label per batch item required"));
    }
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let (d, count) = class_cell_distance(e_neg, e_pos, b)?;
        total += divergence_value(d, count, label, margin, form);
    }
    Ok(if labels.is_empty() { 0.0 } else { total / labels.len() as f64 })
}

/// Graph form of [`codebook_divergence_loss`] over the straight-through tensors.
pub fn codebook_divergence_loss_tensor(
    quantized_neg: &Tensor,
    quantized_pos: &Tensor,
    e_pos: &QuantizationResult,
    labels: &[Label],
    margin: f64,
    form: DivergenceForm,
) -> Result<Tensor> {
    check_margin(margin)?;
    let (b, _, h, w) = quantized_pos.dims4()?;
    if labels.len() != b || e_pos.from_class_partition.len() != b * h * w {
        return Err(shape("divergence inputs disagree on batch layout"));
    }
    let dtype = quantized_pos.dtype();
    let dev = quantized_pos.device();
    let mask: Vec<f64> = e_pos.from_class_partition.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask, (b, h * w), dev)?.to_dtype(dtype)?;
    let cell_sq = (quantized_neg - quantized_pos)?.sqr()?.sum(1)?.reshape((b, h * w))?;
    let counts = mask.sum(1)?;
    let sums = (cell_sq * &mask)?.sum(1)?;
    let d = (sums / counts.clamp(1.0, f64::INFINITY)?)?;
    let used: Vec<f64> = (0..b)
        .map(|i| if e_pos.usage(i).iter().any(|&u| u) { 1.0 } else { 0.0 })
        .collect();
    let used = Tensor::from_vec(used, b, dev)?.to_dtype(dtype)?;
    let per = match form {
        DivergenceForm::Hinge => {
            let neg: Vec<f64> = labels.iter().map(|l| if *l == Label::Negative { 1.0 } else { 0.0 }).collect();
            let neg = Tensor::from_vec(neg, b, dev)?.to_dtype(dtype)?;
            let pos = neg.affine(-1.0, 1.0)?;
            let hinge = d.affine(-1.0, margin)?.relu()?;
            ((&d * &neg)? + (hinge * pos)?)?
        }
        DivergenceForm::Signed => {
            let sign: Vec<f64> = labels.iter().map(|l| if *l == Label::Negative { 1.0 } else { -1.0 }).collect();
            (&d * Tensor::from_vec(sign, b, dev)?.to_dtype(dtype)?)?
        }
    };
    Ok((per * used)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(label: Label, v: f32) -> LabeledPatch {
        LabeledPatch::new(Image::filled(8, 8, [v, v * 0.5, 0.2]), label).unwrap()
    }

    fn manual_result(quantized: Vec<f64>, from_class: Vec<bool>, dim: usize, h: usize, w: usize) -> QuantizationResult {
        QuantizationResult {
            batch: 1,
            height: h,
            width: w,
            dim,
            subset: CodeSubset::SharedAndClass,
            indices: from_class.iter().map(|&c| usize::from(c)).collect(),
            from_class_partition: from_class,
            quantized,
            commitment_value: 0.0,
        }
    }

    #[test]
    fn encoder_shapes() {
        let ae = Autoencoder::new(AutoencoderConfig { hidden: 8, dim: 64, residual_blocks: 2 }, DType::F32, Device::Cpu, 0).unwrap();
        let x = Tensor::zeros((1, 3, 128, 128), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(ae.encode(&x).unwrap().dims(), &[1, 64, 32, 32]);
        let x = Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(ae.encode(&x).unwrap().dims(), &[2, 64, 16, 16]);
        let bad = Tensor::zeros((1, 3, 30, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(ae.encode(&bad), Err(crate::CaclError::Shape(_))));
    }

    #[test]
    fn encoding_is_deterministic() {
        let ae = Autoencoder::new(AutoencoderConfig { hidden: 8, dim: 16, residual_blocks: 1 }, DType::F32, Device::Cpu, 3).unwrap();
        let p = patch(Label::Positive, 0.7);
        let a = ae.encode_patch(&p).unwrap();
        let b = ae.encode_patch(&p).unwrap();
        assert_eq!(
            a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn dual_forward_contracts() {
        let ae = Autoencoder::new(AutoencoderConfig { hidden: 8, dim: 8, residual_blocks: 1 }, DType::F64, Device::Cpu, 1).unwrap();
        let cb = CodebookPartitioned::new(4, 4, 8, 2).unwrap();
        let p = patch(Label::Negative, 0.4);
        let (pair, e_pos, e_neg) = ae.forward_dual_patch(&p, &cb).unwrap();
        assert!(e_neg.from_class_partition.iter().all(|&c| !c));
        assert_eq!(e_pos.subset, CodeSubset::SharedAndClass);
        for img in [&pair.recon_positive, &pair.recon_negative] {
            assert_eq!((img.height, img.width), (8, 8));
            assert!(img.data.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn duplicated_partitions_reconstruct_identically() {
        let ae = Autoencoder::new(AutoencoderConfig { hidden: 8, dim: 8, residual_blocks: 1 }, DType::F64, Device::Cpu, 5).unwrap();
        let base = CodebookPartitioned::new(6, 1, 8, 9).unwrap();
        let shared: Vec<Vec<f64>> = (0..6).map(|k| base.code(k).to_vec()).collect();
        let cb = CodebookPartitioned::from_codes(&shared, &shared).unwrap();
        let p = patch(Label::Positive, 0.9);
        let (pair, e_pos, e_neg) = ae.forward_dual_patch(&p, &cb).unwrap();
        assert_eq!(e_pos.indices, e_neg.indices);
        assert!(e_pos.from_class_partition.iter().all(|&c| !c));
        assert_eq!(pair.recon_positive, pair.recon_negative);
    }

    #[test]
    fn reconstruction_loss_selects_one_path() {
        let p = patch(Label::Positive, 0.6);
        let off = Image::new(8, 8, p.pixels.data.iter().map(|v| v + 0.1).collect()).unwrap();
        let pair = ReconstructionPair { recon_positive: p.pixels.clone(), recon_negative: off.clone() };
        assert_eq!(reconstruction_loss(&p, &pair).unwrap(), 0.0);

        let n = patch(Label::Negative, 0.6);
        let pair = ReconstructionPair { recon_positive: n.pixels.clone(), recon_negative: off };
        assert!((reconstruction_loss(&n, &pair).unwrap() - 0.01).abs() < 1e-6);
        let pair = ReconstructionPair { recon_positive: patch(Label::Positive, 0.1).pixels, recon_negative: n.pixels.clone() };
        assert_eq!(reconstruction_loss(&n, &pair).unwrap(), 0.0);
    }

    #[test]
    fn divergence_cases() {
        let same = manual_result(vec![0.5, 0.5, 1.0, 1.0], vec![true, false], 2, 1, 2);
        let e = 1e-15;
        assert!(codebook_divergence_loss(&same, &same, &[Label::Negative], 1.0, DivergenceForm::Hinge).unwrap().abs() < e);

        let none = manual_result(vec![0.5, 0.5, 1.0, 1.0], vec![false, false], 2, 1, 2);
        let other = manual_result(vec![9.0, 9.0, 1.0, 1.0], vec![false, false], 2, 1, 2);
        for label in [Label::Positive, Label::Negative] {
            assert_eq!(codebook_divergence_loss(&other, &none, &[label], 1.0, DivergenceForm::Hinge).unwrap(), 0.0);
        }

        // Two C cells with squared code distances 0.36 and 0.36: d = 0.36, hinge = 0.64.
        let e_pos = manual_result(vec![0.6, 0.0, 0.0, 0.6], vec![true, true], 2, 1, 2);
        let e_neg = manual_result(vec![0.0, 0.0, 0.0, 0.0], vec![false, false], 2, 1, 2);
        let v = codebook_divergence_loss(&e_neg, &e_pos, &[Label::Positive], 1.0, DivergenceForm::Hinge).unwrap();
        assert!((v - 0.64).abs() < 1e-12);
        let v = codebook_divergence_loss(&e_neg, &e_pos, &[Label::Positive], 1.0, DivergenceForm::Signed).unwrap();
        assert!((v + 0.36).abs() < 1e-12);
        assert!(codebook_divergence_loss(&e_neg, &e_pos, &[Label::Positive], -1.0, DivergenceForm::Hinge).is_err());

        let qn = e_neg.quantized_tensor(DType::F64, &Device::Cpu).unwrap();
        let qp = e_pos.quantized_tensor(DType::F64, &Device::Cpu).unwrap();
        let t = codebook_divergence_loss_tensor(&qn, &qp, &e_pos, &[Label::Positive], 1.0, DivergenceForm::Hinge)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((t - 0.64).abs() < 1e-12);
    }
}
