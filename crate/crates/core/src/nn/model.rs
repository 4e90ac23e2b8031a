//! The residual 1D CNN: stem convolution, 16 residual blocks, global
//! pooling, concatenation with the hand-crafted features, one fully
//! connected layer and element-wise logistic outputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{
    conv1d_backward, conv1d_forward, global_pool, global_pool_backward, relu, relu_backward, sigmoid, BatchNorm,
    BnCache, Linear, PoolMode,
};
use super::{NnError, Param, Scalar, Tensor};
use crate::features::{Standardizer, NUM_FEATURES};
use crate::record::{NUM_LABELS, NUM_LEADS};

pub const NUM_BLOCKS: usize = 16;
pub const BLOCKS_PER_STAGE: usize = 4;
/// Conv + BN + ReLU, twice, per block.
pub const LAYERS_PER_BLOCK: usize = 6;
/// Zero-based indices of the stride-2 blocks. With the stride-2 stem the
/// time axis shrinks by 2^9 overall (4096 -> 8).
pub const STRIDE2_BLOCKS: [usize; 8] = [0, 1, 3, 4, 6, 8, 10, 12];
pub const DOWNSAMPLING: usize = 1 << (1 + STRIDE2_BLOCKS.len());

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Channels of the four 4-block stages; the stem outputs `channels[0]`.
    pub channels: [usize; 4],
    pub stem_kernel: usize,
    pub kernel: usize,
    pub use_features: bool,
    pub pool: PoolMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { channels: [32, 64, 128, 256], stem_kernel: 15, kernel: 7, use_features: true, pool: PoolMode::Both }
    }
}

impl ModelConfig {
    /// Narrow variant for quick experiments.
    pub fn reduced() -> Self {
        Self { channels: [8, 16, 32, 64], ..Self::default() }
    }

    pub fn final_channels(&self) -> usize {
        self.channels[3]
    }

    pub fn head_inputs(&self) -> usize {
        self.pool.width(self.final_channels()) + if self.use_features { NUM_FEATURES } else { 0 }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.channels.contains(&0) || self.kernel.is_multiple_of(2) || self.stem_kernel.is_multiple_of(2) {
            return Err(NnError::Config(format!("{self:?}: channels must be positive, kernels odd")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<F> {
    pub w: Param<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv<F> {
    fn kaiming(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (cin * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..cout * cin * k).map(|_| F::from(normal.sample(rng)).unwrap()).collect();
        Self { w: Param::new(Tensor::from_vec(&[cout, cin, k], data).unwrap()), stride, pad: k / 2 }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        conv1d_forward(x, &self.w.value, self.stride, self.pad)
    }

    pub fn backward(&mut self, x: &Tensor<F>, dy: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        conv1d_backward(x, &self.w.value, dy, self.stride, self.pad, &mut self.w.grad)
    }
}

/// `relu(bn2(conv2(relu(bn1(conv1 x)))) + shortcut x)`; the shortcut is a
/// 1x1 projection when channels or length change.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub conv1: Conv<F>,
    pub bn1: BatchNorm<F>,
    pub conv2: Conv<F>,
    pub bn2: BatchNorm<F>,
    pub proj: Option<Conv<F>>,
}

pub struct BlockCache<F> {
    x: Tensor<F>,
    bn1: BnCache<F>,
    a1: Tensor<F>,
    bn2: BnCache<F>,
    sum: Tensor<F>,
}

impl<F: Scalar> Block<F> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = Conv::kaiming(cin, cout, k, stride, rng);
        let conv2 = Conv::kaiming(cout, cout, k, 1, rng);
        let proj = (cin != cout || stride != 1).then(|| Conv::kaiming(cin, cout, 1, stride, rng));
        Self { conv1, bn1: BatchNorm::new(cout), conv2, bn2: BatchNorm::new(cout), proj }
    }

    fn shortcut(&self, x: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        match &self.proj {
            Some(p) => p.forward(x),
            None => Ok(x.clone()),
        }
    }

    fn add(mut a: Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        if a.shape() != b.shape() {
            return Err(NnError::Shape(format!("residual {:?} + shortcut {:?}", a.shape(), b.shape())));
        }
        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += *y);
        Ok(a)
    }

    pub fn forward_train(&mut self, x: &Tensor<F>) -> Result<(Tensor<F>, BlockCache<F>), NnError> {
        let (h, bn1) = self.bn1.forward_train(&self.conv1.forward(x)?)?;
        let a1 = relu(&h);
        let (h, bn2) = self.bn2.forward_train(&self.conv2.forward(&a1)?)?;
        let sum = Self::add(h, &self.shortcut(x)?)?;
        let y = relu(&sum);
        Ok((y, BlockCache { x: x.clone(), bn1, a1, bn2, sum }))
    }

    pub fn forward_eval(&self, x: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        let a1 = relu(&self.bn1.forward_eval(&self.conv1.forward(x)?)?);
        let h = self.bn2.forward_eval(&self.conv2.forward(&a1)?)?;
        Ok(relu(&Self::add(h, &self.shortcut(x)?)?))
    }

    pub fn backward(&mut self, cache: &BlockCache<F>, dy: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        let ds = relu_backward(&cache.sum, dy);
        let g = self.bn2.backward(&cache.bn2, &ds)?;
        let g = self.conv2.backward(&cache.a1, &g)?;
        let g = relu_backward(&cache.a1, &g);
        let g = self.bn1.backward(&cache.bn1, &g)?;
        let dx = self.conv1.backward(&cache.x, &g)?;
        let dshort = match &mut self.proj {
            Some(p) => p.backward(&cache.x, &ds)?,
            None => ds,
        };
        Self::add(dx, &dshort)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub stem: Conv<F>,
    pub stem_bn: BatchNorm<F>,
    pub blocks: Vec<Block<F>>,
    pub head: Linear<F>,
    /// Training-set feature statistics (f32-representable so checkpoints
    /// round-trip exactly).
    pub standardizer: Standardizer,
}

pub struct ModelCache<F> {
    x: Tensor<F>,
    stem_bn: BnCache<F>,
    stem_out: Tensor<F>,
    blocks: Vec<BlockCache<F>>,
    last_shape: (usize, usize, usize),
    argmax: Vec<usize>,
    head_in: Tensor<F>,
}

impl<F: Scalar> Model<F> {
    /// Kaiming-initialized convolutions, unit/zero batchnorm, zero head.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let stem = Conv::kaiming(NUM_LEADS, c[0], config.stem_kernel, 2, &mut rng);
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut cin = c[0];
        for i in 0..NUM_BLOCKS {
            let cout = c[i / BLOCKS_PER_STAGE];
            let stride = if STRIDE2_BLOCKS.contains(&i) { 2 } else { 1 };
            blocks.push(Block::new(cin, cout, config.kernel, stride, &mut rng));
            cin = cout;
        }
        Ok(Self {
            config,
            stem,
            stem_bn: BatchNorm::new(c[0]),
            blocks,
            head: Linear::zeros(config.head_inputs(), NUM_LABELS),
            standardizer: Standardizer::default(),
        })
    }

    /// Conv, batchnorm and ReLU layers inside the residual blocks.
    pub fn counted_layers(&self) -> usize {
        self.blocks.len() * LAYERS_PER_BLOCK
    }

    fn check_input(&self, x: &Tensor<F>, feats: Option<&Tensor<F>>) -> Result<usize, NnError> {
        let (b, c, _) = x.dims3()?;
        if c != NUM_LEADS {
            return Err(NnError::Shape(format!("expected {NUM_LEADS} leads, got {c}")));
        }
        if self.config.use_features {
            match feats.map(|f| f.shape().to_vec()) {
                Some(s) if s == [b, NUM_FEATURES] => {}
                other => {
                    return Err(NnError::Shape(format!("features shape {other:?}, expected [{b}, {NUM_FEATURES}]")))
                }
            }
        }
        Ok(b)
    }

    fn head_input(&self, pooled: Tensor<F>, feats: Option<&Tensor<F>>) -> Result<Tensor<F>, NnError> {
        let Some(f) = feats.filter(|_| self.config.use_features) else {
            return Ok(pooled);
        };
        let (b, p) = pooled.dims2()?;
        let w = p + NUM_FEATURES;
        let mut out = Tensor::zeros(&[b, w]);
        for bi in 0..b {
            let row = &mut out.data_mut()[bi * w..][..w];
            row[..p].copy_from_slice(&pooled.data()[bi * p..][..p]);
            row[p..].copy_from_slice(&f.data()[bi * NUM_FEATURES..][..NUM_FEATURES]);
        }
        Ok(out)
    }

    /// Training-mode forward (batch statistics); returns logits.
    pub fn forward_train(
        &mut self,
        x: &Tensor<F>,
        feats: Option<&Tensor<F>>,
    ) -> Result<(Tensor<F>, ModelCache<F>), NnError> {
        self.check_input(x, feats)?;
        let (h, stem_bn) = self.stem_bn.forward_train(&self.stem.forward(x)?)?;
        let stem_out = relu(&h);
        let mut h = stem_out.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (y, c) = block.forward_train(&h)?;
            caches.push(c);
            h = y;
        }
        let last_shape = h.dims3()?;
        let (pooled, argmax) = global_pool(&h, self.config.pool)?;
        let head_in = self.head_input(pooled, feats)?;
        let logits = self.head.forward(&head_in)?;
        if !logits.all_finite() {
            return Err(NnError::NonFinite("logits".into()));
        }
        Ok((logits, ModelCache { x: x.clone(), stem_bn, stem_out, blocks: caches, last_shape, argmax, head_in }))
    }

    /// Accumulates parameter gradients for upstream logit gradients.
    pub fn backward(&mut self, cache: &ModelCache<F>, dlogits: &Tensor<F>) -> Result<(), NnError> {
        let dz = self.head.backward(&cache.head_in, dlogits)?;
        let (b, c, t) = cache.last_shape;
        let pw = self.config.pool.width(c);
        let mut dpool = Tensor::zeros(&[b, pw]);
        for bi in 0..b {
            let src = &dz.data()[bi * dz.dim(1)..][..pw];
            dpool.data_mut()[bi * pw..][..pw].copy_from_slice(src);
        }
        let mut g = global_pool_backward(&dpool, &cache.argmax, (b, c, t), self.config.pool);
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = block.backward(bc, &g)?;
        }
        let g = relu_backward(&cache.stem_out, &g);
        let g = self.stem_bn.backward(&cache.stem_bn, &g)?;
        self.stem.backward(&cache.x, &g)?;
        Ok(())
    }

    /// Eval-mode logits (running batchnorm statistics).
    pub fn forward_eval(&self, x: &Tensor<F>, feats: Option<&Tensor<F>>) -> Result<Tensor<F>, NnError> {
        self.check_input(x, feats)?;
        let mut h = relu(&self.stem_bn.forward_eval(&self.stem.forward(x)?)?);
        for block in &self.blocks {
            h = block.forward_eval(&h)?;
        }
        let (pooled, _) = global_pool(&h, self.config.pool)?;
        let logits = self.head.forward(&self.head_input(pooled, feats)?)?;
        if !logits.all_finite() {
            return Err(NnError::NonFinite("logits".into()));
        }
        Ok(logits)
    }

    /// Eval-mode probabilities in (0, 1).
    pub fn predict_proba(&self, x: &Tensor<F>, feats: Option<&Tensor<F>>) -> Result<Tensor<F>, NnError> {
        let mut p = self.forward_eval(x, feats)?;
        p.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok(p)
    }

    /// Every trainable parameter with a stable name.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        let mut out: Vec<(String, &mut Param<F>)> = vec![
            ("stem.conv.w".into(), &mut self.stem.w),
            ("stem.bn.gamma".into(), &mut self.stem_bn.gamma),
            ("stem.bn.beta".into(), &mut self.stem_bn.beta),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let Block { conv1, bn1, conv2, bn2, proj } = b;
            out.push((format!("blocks.{i}.conv1.w"), &mut conv1.w));
            out.push((format!("blocks.{i}.bn1.gamma"), &mut bn1.gamma));
            out.push((format!("blocks.{i}.bn1.beta"), &mut bn1.beta));
            out.push((format!("blocks.{i}.conv2.w"), &mut conv2.w));
            out.push((format!("blocks.{i}.bn2.gamma"), &mut bn2.gamma));
            out.push((format!("blocks.{i}.bn2.beta"), &mut bn2.beta));
            if let Some(p) = proj {
                out.push((format!("blocks.{i}.proj.w"), &mut p.w));
            }
        }
        out.push(("head.w".into(), &mut self.head.weight));
        out.push(("head.b".into(), &mut self.head.bias));
        out
    }

    /// Batchnorm layers with their name prefixes.
    pub fn batchnorms_mut(&mut self) -> Vec<(String, &mut BatchNorm<F>)> {
        let mut out = vec![("stem.bn".to_string(), &mut self.stem_bn)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.bn1"), &mut b.bn1));
            out.push((format!("blocks.{i}.bn2"), &mut b.bn2));
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn num_parameters(&mut self) -> usize {
        self.params_mut().iter().map(|(_, p)| p.value.len()).sum()
    }

    /// Standardized feature rows as a `[B, 20]` tensor.
    pub fn feature_tensor(&self, feats: &[crate::features::FeatureVector]) -> Tensor<F> {
        let data = feats.iter().flat_map(|f| self.standardizer.apply(f)).map(|v| F::from(v).unwrap()).collect();
        Tensor::from_vec(&[feats.len(), NUM_FEATURES], data).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_bookkeeping() {
        let m = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
        assert_eq!(m.blocks.len(), NUM_BLOCKS);
        assert_eq!(m.counted_layers(), 96);
        assert_eq!(m.config.head_inputs(), 2 * 256 + 20);
        assert_eq!(m.head.weight.value.shape(), [9, 532]);
        assert_eq!(DOWNSAMPLING, 512);
    }

    #[test]
    fn downsampling_and_output_range() {
        let mut m = Model::<f32>::new(ModelConfig::reduced(), 1).unwrap();
        let x = Tensor::from_vec(&[2, 12, 1024], (0..2 * 12 * 1024).map(|i| ((i % 37) as f32 * 0.1).sin()).collect())
            .unwrap();
        let f = Tensor::zeros(&[2, NUM_FEATURES]);
        let (logits, cache) = m.forward_train(&x, Some(&f)).unwrap();
        assert_eq!(cache.last_shape, (2, 64, 2));
        // Zero head: every probability is exactly one half.
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let p = m.predict_proba(&x, Some(&f)).unwrap();
        assert_eq!(p.shape(), [2, 9]);
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn stride2_block_halves_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = Block::<f32>::new(4, 4, 7, 2, &mut rng);
        let x = Tensor::full(&[1, 4, 4096], 0.5);
        assert_eq!(b.forward_train(&x).unwrap().0.shape(), [1, 4, 2048]);
    }

    #[test]
    fn zero_residual_is_relu_of_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = Block::<f64>::new(3, 3, 7, 1, &mut rng);
        b.conv1.w.value.data_mut().fill(0.0);
        b.conv2.w.value.data_mut().fill(0.0);
        let x = Tensor::from_vec(&[1, 3, 5], (0..15).map(|i| i as f64 - 7.0).collect()).unwrap();
        let (y, _) = b.forward_train(&x).unwrap();
        assert_eq!(y, relu(&x));
    }

    #[test]
    fn missing_features_rejected() {
        let m = Model::<f32>::new(ModelConfig::reduced(), 0).unwrap();
        let x = Tensor::zeros(&[1, 12, 1024]);
        assert!(m.forward_eval(&x, None).is_err());
    }
}
