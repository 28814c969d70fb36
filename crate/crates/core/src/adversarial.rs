//! Four-way hybrid classifier, image pools, classifier and mapping losses.
//!
//! One residual classifier separates real/fake and positive/negative at once:
//! its four logits are indexed by [`Target`].

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape, Result};
use crate::nn::{cross_entropy, Conv2d, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    RealPositive = 0,
    RealNegative = 1,
    FakePositive = 2,
    FakeNegative = 3,
}

pub const NUM_TARGETS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierLayout {
    /// Four single-block residual stages of width 16-32-64-128.
    Compact,
    /// resnet18 stage layout: two blocks per stage, width 64-128-256-512.
    Resnet18,
}

impl ClassifierLayout {
    fn stages(self) -> (&'static [usize], usize) {
        match self {
            ClassifierLayout::Compact => (&[16, 32, 64, 128], 1),
            ClassifierLayout::Resnet18 => (&[64, 128, 256, 512], 2),
        }
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv_a: Conv2d,
    conv_b: Conv2d,
    shortcut: Option<Conv2d>,
}

impl BasicBlock {
    fn forward(&self, x: &Tensor, frozen: bool) -> Result<Tensor> {
        let h = self.conv_a.forward(x, frozen)?.relu()?;
        let h = self.conv_b.forward(&h, frozen)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x, frozen)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct Classifier {
    layout: ClassifierLayout,
    store: ParamStore,
    stem: Conv2d,
    blocks: Vec<BasicBlock>,
    head: Linear,
}

impl Classifier {
    pub fn new(layout: ClassifierLayout, dtype: DType, device: Device, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new(dtype, device);
        let (widths, per_stage) = layout.stages();
        let stem = s.conv2d("cls.stem", 3, widths[0], 3, 2, 1, &mut rng)?;
        let mut blocks = Vec::new();
        let mut in_c = widths[0];
        for (si, &w) in widths.iter().enumerate() {
            for bi in 0..per_stage {
                // Every stage downsamples; stage 0 takes the place of resnet's stem max-pool.
                let stride = if bi == 0 { 2 } else { 1 };
                let name = format!("cls.s{si}.b{bi}");
                let conv_a = s.conv2d(&format!("{name}.a"), in_c, w, 3, stride, 1, &mut rng)?;
                let conv_b = s.conv2d(&format!("{name}.b"), w, w, 3, 1, 1, &mut rng)?;
                let shortcut = if stride != 1 || in_c != w {
                    Some(s.conv2d(&format!("{name}.proj"), in_c, w, 1, stride, 0, &mut rng)?)
                } else {
                    None
                };
                blocks.push(BasicBlock { conv_a, conv_b, shortcut });
                in_c = w;
            }
        }
        let head = s.linear("cls.head", in_c, NUM_TARGETS, &mut rng)?;
        Ok(Self { layout, store: s, stem, blocks, head })
    }

    pub fn layout(&self) -> ClassifierLayout {
        self.layout
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// `(batch, 3, H, W)` → `(batch, 4)` logits. With `frozen`, the weights
    /// enter the graph detached and receive no gradient.
    pub fn forward(&self, x: &Tensor, frozen: bool) -> Result<Tensor> {
        let mut h = self.stem.forward(x, frozen)?.relu()?;
        for block in &self.blocks {
            h = block.forward(&h, frozen)?;
        }
        let pooled = h.mean(3)?.mean(2)?;
        self.head.forward(&pooled, frozen)
    }
}

/// Stored fakes for classifier updates.
#[derive(Debug, Clone)]
pub struct ImagePool {
    capacity: usize,
    stored: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl ImagePool {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid("image pool capacity must be positive"));
        }
        Ok(Self { capacity, stored: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.stored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stored.is_empty()
    }

    pub fn stored(&self) -> &[Tensor] {
        &self.stored
    }

    pub(crate) fn rng_state(&self) -> (u64, u128) {
        (self.rng.get_stream(), self.rng.get_word_pos())
    }

    pub(crate) fn restore(&mut self, seed: [u8; 32], stream: u64, word_pos: u128, stored: Vec<Tensor>) -> Result<()> {
        if stored.len() > self.capacity {
            return Err(shape("pool snapshot exceeds capacity"));
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        self.rng = rng;
        self.stored = stored;
        Ok(())
    }

    pub(crate) fn rng_seed(&self) -> [u8; 32] {
        self.rng.get_seed()
    }

    /// Fill phase stores and returns the image; afterwards, with probability
    /// one half, a uniformly chosen stored image is returned and replaced.
    pub fn query(&mut self, image: &Tensor) -> Result<Tensor> {
        let image = image.detach();
        if self.stored.len() < self.capacity {
            self.stored.push(image.clone());
            return Ok(image);
        }
        if self.rng.random::<f64>() < 0.5 {
            let slot = self.rng.random_range(0..self.capacity);
            Ok(std::mem::replace(&mut self.stored[slot], image))
        } else {
            Ok(image)
        }
    }

    /// Queries each item of a `(batch, ...)` tensor in order.
    pub fn query_batch(&mut self, images: &Tensor) -> Result<Tensor> {
        let n = images.dim(0)?;
        let out = (0..n)
            .map(|i| self.query(&images.get(i)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&out, 0)?)
    }
}

fn grouped_loss(classifier: &Classifier, groups: &[(Option<&Tensor>, Target)], frozen: bool, detach_inputs: bool) -> Result<Tensor> {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (batch, target) in groups {
        let Some(t) = batch else { continue };
        let n = t.dim(0)?;
        if n == 0 {
            continue;
        }
        inputs.push(if detach_inputs { t.detach() } else { (*t).clone() });
        targets.extend(std::iter::repeat(*target as u32).take(n));
    }
    let params = classifier.params();
    if inputs.is_empty() {
        return Ok(Tensor::zeros((), params.dtype(), params.device())?);
    }
    let x = Tensor::cat(&inputs, 0)?;
    cross_entropy(&classifier.forward(&x, frozen)?, &targets)
}

/// Cross-entropy of the classifier on real and pooled fake images, averaged
/// per image. Inputs are detached, so only the classifier receives gradient.
pub fn classifier_loss(
    classifier: &Classifier,
    real_pos: Option<&Tensor>,
    real_neg: Option<&Tensor>,
    pooled_fake_pos: Option<&Tensor>,
    pooled_fake_neg: Option<&Tensor>,
) -> Result<Tensor> {
    grouped_loss(
        classifier,
        &[
            (pooled_fake_pos, Target::FakePositive),
            (pooled_fake_neg, Target::FakeNegative),
            (real_pos, Target::RealPositive),
            (real_neg, Target::RealNegative),
        ],
        false,
        true,
    )
}

/// Pushes reconstructions toward the real targets of their class through a
/// frozen classifier; gradient reaches the reconstructions only.
pub fn mapping_loss(classifier: &Classifier, recon_pos: Option<&Tensor>, recon_neg: Option<&Tensor>) -> Result<Tensor> {
    grouped_loss(
        classifier,
        &[(recon_pos, Target::RealPositive), (recon_neg, Target::RealNegative)],
        true,
        false,
    )
}
