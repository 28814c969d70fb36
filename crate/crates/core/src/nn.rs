//! Small layer toolkit over candle tensors.
//!
//! Parameters are created from a seeded host RNG so that initialization is
//! reproducible, and every layer can run in "frozen" mode where its weights
//! enter the graph detached. Frozen layers still propagate gradients to their
//! inputs, which is how the mapping loss reaches the generator without
//! touching the classifier.

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape, Result};

/// Ordered, named collection of trainable variables.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self { dtype, device, vars: Vec::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_values(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn uniform(&mut self, name: String, dims: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        let t = Tensor::from_vec(data, dims, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.push((name, var.clone()));
        Ok(var)
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Conv2d> {
        let bound = 1.0 / ((in_c * kernel * kernel) as f64).sqrt();
        let weight = self.uniform(format!("{name}.weight"), &[out_c, in_c, kernel, kernel], bound, rng)?;
        let bias = self.uniform(format!("{name}.bias"), &[out_c], bound, rng)?;
        Ok(Conv2d { weight, bias, stride, padding })
    }

    pub fn conv_transpose2d(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ConvTranspose2d> {
        let bound = 1.0 / ((out_c * kernel * kernel) as f64).sqrt();
        let weight = self.uniform(format!("{name}.weight"), &[in_c, out_c, kernel, kernel], bound, rng)?;
        let bias = self.uniform(format!("{name}.bias"), &[out_c], bound, rng)?;
        Ok(ConvTranspose2d { weight, bias, stride, padding })
    }

    pub fn linear(&mut self, name: &str, in_f: usize, out_f: usize, rng: &mut ChaCha8Rng) -> Result<Linear> {
        let bound = 1.0 / (in_f as f64).sqrt();
        let weight = self.uniform(format!("{name}.weight"), &[out_f, in_f], bound, rng)?;
        let bias = self.uniform(format!("{name}.bias"), &[out_f], bound, rng)?;
        Ok(Linear { weight, bias })
    }

    /// Sum of squared gradient entries over all variables; absent gradients count as zero.
    pub fn grad_norm_sq(&self, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for (_, v) in &self.vars {
            if let Some(g) = grads.get(v) {
                total += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(total)
    }

    /// Overwrites every variable from `(name, tensor)` pairs, matching by name.
    pub fn load(&self, tensors: &[(String, Tensor)]) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(shape(format!(
                "expected {} tensors, found {}",
                self.vars.len(),
                tensors.len()
            )));
        }
        for ((name, var), (tname, t)) in self.vars.iter().zip(tensors) {
            if name != tname || var.dims() != t.dims() {
                return Err(shape(format!("parameter `{name}` {:?} vs stored `{tname}` {:?}", var.dims(), t.dims())));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

fn param(v: &Var, frozen: bool) -> Tensor {
    if frozen {
        v.as_tensor().detach()
    } else {
        v.as_tensor().clone()
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor, frozen: bool) -> Result<Tensor> {
        let y = x.conv2d(&param(&self.weight, frozen), self.padding, self.stride, 1, 1)?;
        let b = param(&self.bias, frozen).reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    pub fn forward(&self, x: &Tensor, frozen: bool) -> Result<Tensor> {
        let y = x.conv_transpose2d(&param(&self.weight, frozen), self.padding, 0, self.stride, 1)?;
        let b = param(&self.bias, frozen).reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn forward(&self, x: &Tensor, frozen: bool) -> Result<Tensor> {
        let y = x.matmul(&param(&self.weight, frozen).t()?)?;
        Ok(y.broadcast_add(&param(&self.bias, frozen))?)
    }
}

/// Row-wise log-softmax over the last dimension of a `(batch, classes)` tensor.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Mean negative log-likelihood of `targets` under `logits`.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (b, _) = logits.dims2()?;
    if b != targets.len() {
        return Err(shape(format!("{b} logits rows for {} targets", targets.len())));
    }
    let idx = Tensor::from_slice(targets, (b, 1), logits.device())?;
    let picked = log_softmax(logits)?.gather(&idx, 1)?;
    Ok(picked.neg()?.mean_all()?)
}

/// Adam with bias correction. Moment buffers are plain tensors so they can be
/// checkpointed and restored bit-exactly.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let zeros = |v: &Var| Tensor::zeros(v.shape(), v.dtype(), v.device());
        let first = store.vars().iter().map(|(_, v)| zeros(v)).collect::<candle_core::Result<_>>()?;
        let second = store.vars().iter().map(|(_, v)| zeros(v)).collect::<candle_core::Result<_>>()?;
        Ok(Self { lr, beta1, beta2, eps: 1e-8, step: 0, first, second })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    pub fn restore(&mut self, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Result<()> {
        if first.len() != self.first.len() || second.len() != self.second.len() {
            return Err(shape("optimizer state does not match the parameter list"));
        }
        for (a, b) in self.first.iter().zip(&first).chain(self.second.iter().zip(&second)) {
            if a.dims() != b.dims() {
                return Err(shape("optimizer moment has the wrong shape"));
            }
        }
        let dtype = self.first.first().map(|t| t.dtype());
        let cast = |v: Vec<Tensor>| -> Result<Vec<Tensor>> {
            v.into_iter()
                .map(|t| Ok(match dtype {
                    Some(d) => t.to_dtype(d)?,
                    None => t,
                }))
                .collect()
        };
        self.first = cast(first)?;
        self.second = cast(second)?;
        self.step = step;
        Ok(())
    }

    /// Applies one update; variables without a gradient are left untouched.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (_, var)) in store.vars().iter().enumerate() {
            let Some(g) = grads.get(var) else { continue };
            // Gradients can carry autograd history; keep it out of the moments.
            let g = &g.detach();
            let m = ((&self.first[i] * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((&self.second[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / c1)?;
            let v_hat = (&v / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.first[i] = m.detach();
            self.second[i] = v.detach();
        }
        Ok(())
    }
}
