#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cacl::config::TrainConfig;
use cacl::data::{render_sample, Image, Label, LabeledPatch, SyntheticConfig};
use cacl::training::Trainer;

/// A small double-precision configuration that trains in milliseconds.
pub fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.hidden = 4;
    c.dim = 4;
    c.residual_blocks = 1;
    c.num_shared = 4;
    c.num_class = 4;
    c.batch_size = 4;
    c.pool_capacity = 3;
    c.dead_code_interval = 5;
    c.double_precision = true;
    c
}

pub fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
    Image::new(size, size, (0..size * size * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

/// Synthetic patches of side `size`, alternating positive / negative.
pub fn synthetic_patches(n: usize, size: usize, seed: u64) -> Vec<LabeledPatch> {
    let cfg = SyntheticConfig { image_size: size, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Positive } else { Label::Negative };
            let s = render_sample(&cfg, label, &mut rng);
            LabeledPatch::new(s.image, label).unwrap()
        })
        .collect()
}

pub fn batch_tensor(patches: &[LabeledPatch]) -> Tensor {
    let imgs: Vec<&Image> = patches.iter().map(|p| &p.pixels).collect();
    cacl::data::images_to_tensor(&imgs, DType::F64, &Device::Cpu).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Element `i` of a variable, read as f64.
pub fn var_get(v: &Var, i: usize) -> f64 {
    v.as_tensor().flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()[i]
}

pub fn var_set(v: &Var, i: usize, value: f64) {
    let mut data = v.as_tensor().flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
    data[i] = value;
    let t = Tensor::from_vec(data, v.shape(), v.device()).unwrap().to_dtype(v.dtype()).unwrap();
    v.set(&t).unwrap();
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-10)
}

/// Loss with the quantizer replaced by its straight-through surrogate:
/// `z = f + (q0 − f0)` with `q0`, `f0` frozen at the base parameters, and
/// stop-gradients replaced by the same frozen values.
pub struct Surrogate {
    pub x: Tensor,
    pub labels: Vec<Label>,
    pub f0: Tensor,
    pub q_pos0: Tensor,
    pub q_neg0: Tensor,
    pub q_sel0: Tensor,
}

pub fn surrogate_loss(t: &Trainer, s: &Surrogate) -> f64 {
    let cfg = &t.config;
    let f = t.autoencoder.encode(&s.x).unwrap();
    let zp = (&f + (&s.q_pos0 - &s.f0).unwrap()).unwrap();
    let zn = (&f + (&s.q_neg0 - &s.f0).unwrap()).unwrap();
    let rp = t.autoencoder.decode(&zp).unwrap();
    let rn = t.autoencoder.decode(&zn).unwrap();
    let b = s.labels.len();

    let mut recon = 0.0;
    for (i, l) in s.labels.iter().enumerate() {
        let r = if *l == Label::Positive { rp.get(i).unwrap() } else { rn.get(i).unwrap() };
        recon += scalar(&(s.x.get(i).unwrap() - r).unwrap().sqr().unwrap().mean_all().unwrap());
    }
    recon /= b as f64;

    let cells = (s.f0.dim(0).unwrap() * s.f0.dim(2).unwrap() * s.f0.dim(3).unwrap()) as f64;
    let sq = |a: &Tensor, c: &Tensor| scalar(&(a - c).unwrap().sqr().unwrap().sum_all().unwrap()) / cells;
    let commit = sq(&s.f0, &s.q_sel0) + cfg.beta * sq(&s.q_sel0, &f);

    // Mapping: positives' R_P → real-positive (0), every R_N → real-negative (1).
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (i, l) in s.labels.iter().enumerate() {
        if *l == Label::Positive {
            inputs.push(rp.get(i).unwrap());
            targets.push(0usize);
        }
    }
    for i in 0..b {
        inputs.push(rn.get(i).unwrap());
        targets.push(1);
    }
    let logits = t.classifier.forward(&Tensor::stack(&inputs, 0).unwrap(), true).unwrap();
    let rows = logits.to_vec2::<f64>().unwrap();
    let mut ce = 0.0;
    for (row, &k) in rows.iter().zip(&targets) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        ce += lse - row[k];
    }
    ce /= rows.len() as f64;

    // The divergence term depends on code values only and is constant here.
    cfg.w_recon * recon + cfg.w_commit * commit + cfg.w_map * ce
}

pub fn setup(seed: u64) -> (Trainer, Surrogate) {
    let mut cfg = tiny_config();
    cfg.seed = seed;
    let t = Trainer::new(cfg).unwrap();
    let patches = synthetic_patches(4, 16, seed);
    let x = batch_tensor(&patches);
    let labels: Vec<Label> = patches.iter().map(|p| p.label).collect();
    let fwd = t.autoencoder.forward_dual(&x, &t.codebook).unwrap();
    let q_pos0 = fwd.e_pos.quantized_tensor(DType::F64, &Device::Cpu).unwrap();
    let q_neg0 = fwd.e_neg.quantized_tensor(DType::F64, &Device::Cpu).unwrap();
    let sel: Vec<Tensor> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| if *l == Label::Positive { q_pos0.get(i).unwrap() } else { q_neg0.get(i).unwrap() })
        .collect();
    let q_sel0 = Tensor::stack(&sel, 0).unwrap();
    let f0 = fwd.features.detach();
    (t, Surrogate { x, labels, f0, q_pos0, q_neg0, q_sel0 })
}
