//! Central finite-difference checks of every differentiable nn op, in f64.

use ecgdx::nn::ops::{
    conv1d_backward, conv1d_forward, global_pool, global_pool_backward, relu, relu_backward, weighted_bce_with_logits,
    BatchNorm, Linear, PoolMode,
};
use ecgdx::nn::{Block, Model, ModelConfig, Param, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-4;

/// Element-wise `|a - n| / max(|a|, |n|)`, maximised; pairs that are both
/// exactly zero count as agreeing.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let d = a.abs().max(n.abs());
            if d == 0.0 {
                0.0
            } else {
                (a - n).abs() / d
            }
        })
        .fold(0.0, f64::max)
}

/// Numerical gradient of `f` at `x` by central differences.
pub fn numeric_grad(x: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + H;
            let up = f(x);
            x[i] = orig - H;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values kept at least `gap` away from zero (clear of ReLU kinks).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (gap + v.abs()));
    t
}

/// Scalar probe `sum(r * y)` for a fixed random `r`.
fn probe(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn with_data(t: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(t.shape(), data.to_vec()).unwrap()
}

fn conv(rng: &mut ChaCha8Rng, stride: usize, pad: usize) -> f64 {
    let x = rand_tensor(rng, &[2, 3, 11]);
    let w = rand_tensor(rng, &[4, 3, 5]);
    let y = conv1d_forward(&x, &w, stride, pad).unwrap();
    let r = rand_tensor(rng, y.shape());
    let mut dw = Tensor::zeros(w.shape());
    let dx = conv1d_backward(&x, &w, &r, stride, pad, &mut dw).unwrap();
    let nx = numeric_grad(&mut x.data().to_vec(), |d| {
        probe(&conv1d_forward(&with_data(&x, d), &w, stride, pad).unwrap(), &r)
    });
    let nw = numeric_grad(&mut w.data().to_vec(), |d| {
        probe(&conv1d_forward(&x, &with_data(&w, d), stride, pad).unwrap(), &r)
    });
    max_rel_err(dx.data(), &nx).max(max_rel_err(dw.data(), &nw))
}

fn batchnorm(rng: &mut ChaCha8Rng) -> f64 {
    let x = rand_tensor(rng, &[3, 2, 5]);
    let mut bn = BatchNorm::<f64>::new(2);
    bn.gamma.value = rand_tensor(rng, &[2]);
    bn.beta.value = rand_tensor(rng, &[2]);
    let (y, cache) = bn.clone().forward_train(&x).unwrap();
    let r = rand_tensor(rng, y.shape());
    let mut b = bn.clone();
    let dx = b.backward(&cache, &r).unwrap();
    let eval = |bn: &BatchNorm<f64>, x: &Tensor<f64>| probe(&bn.clone().forward_train(x).unwrap().0, &r);
    let nx = numeric_grad(&mut x.data().to_vec(), |d| eval(&bn, &with_data(&x, d)));
    let ng = numeric_grad(&mut bn.gamma.value.data().to_vec(), |d| {
        let mut c = bn.clone();
        c.gamma.value = with_data(&bn.gamma.value, d);
        eval(&c, &x)
    });
    let nb = numeric_grad(&mut bn.beta.value.data().to_vec(), |d| {
        let mut c = bn.clone();
        c.beta.value = with_data(&bn.beta.value, d);
        eval(&c, &x)
    });
    max_rel_err(dx.data(), &nx).max(max_rel_err(b.gamma.grad.data(), &ng)).max(max_rel_err(b.beta.grad.data(), &nb))
}

fn relu_op(rng: &mut ChaCha8Rng) -> f64 {
    let x = away_from_zero(rng, &[2, 3, 7], 1e-3);
    let r = rand_tensor(rng, x.shape());
    let dx = relu_backward(&x, &r);
    let nx = numeric_grad(&mut x.data().to_vec(), |d| probe(&relu(&with_data(&x, d)), &r));
    max_rel_err(dx.data(), &nx)
}

fn pool(rng: &mut ChaCha8Rng, mode: PoolMode) -> f64 {
    let x = rand_tensor(rng, &[2, 3, 9]);
    let (y, argmax) = global_pool(&x, mode).unwrap();
    let r = rand_tensor(rng, y.shape());
    let dx = global_pool_backward(&r, &argmax, x.dims3().unwrap(), mode);
    let nx = numeric_grad(&mut x.data().to_vec(), |d| probe(&global_pool(&with_data(&x, d), mode).unwrap().0, &r));
    max_rel_err(dx.data(), &nx)
}

fn linear(rng: &mut ChaCha8Rng) -> f64 {
    let z = rand_tensor(rng, &[3, 6]);
    let mut lin = Linear::<f64>::zeros(6, 4);
    lin.weight.value = rand_tensor(rng, &[4, 6]);
    lin.bias.value = rand_tensor(rng, &[4]);
    let y = lin.forward(&z).unwrap();
    let r = rand_tensor(rng, y.shape());
    let mut l2 = lin.clone();
    let dz = l2.backward(&z, &r).unwrap();
    let nz = numeric_grad(&mut z.data().to_vec(), |d| probe(&lin.forward(&with_data(&z, d)).unwrap(), &r));
    let nw = numeric_grad(&mut lin.weight.value.data().to_vec(), |d| {
        let mut c = lin.clone();
        c.weight.value = with_data(&lin.weight.value, d);
        probe(&c.forward(&z).unwrap(), &r)
    });
    let nb = numeric_grad(&mut lin.bias.value.data().to_vec(), |d| {
        let mut c = lin.clone();
        c.bias.value = with_data(&lin.bias.value, d);
        probe(&c.forward(&z).unwrap(), &r)
    });
    max_rel_err(dz.data(), &nz).max(max_rel_err(l2.weight.grad.data(), &nw)).max(max_rel_err(l2.bias.grad.data(), &nb))
}

fn loss(rng: &mut ChaCha8Rng) -> f64 {
    let logits = Tensor::from_vec(&[3, 9], (0..27).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
    let y = Tensor::from_vec(&[3, 9], (0..27).map(|_| rng.random_bool(0.4) as u8 as f64).collect()).unwrap();
    let w: Vec<f64> = (0..9).map(|_| rng.random_range(0.2..3.0)).collect();
    let (_, g) = weighted_bce_with_logits(&logits, &y, &w).unwrap();
    let n = numeric_grad(&mut logits.data().to_vec(), |d| {
        weighted_bce_with_logits(&with_data(&logits, d), &y, &w).unwrap().0
    });
    max_rel_err(g.data(), &n)
}

/// Agreement of one element, `|a - n| / max(|a|, |n|)`.
fn rel(a: f64, n: f64) -> f64 {
    let d = a.abs().max(n.abs());
    if d == 0.0 {
        0.0
    } else {
        (a - n).abs() / d
    }
}

/// Max relative error of `analytic` against central differences with step `h`.
fn check_with(x: &[f64], analytic: &[f64], h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let numeric = central(x, h, f);
    analytic.iter().zip(&numeric).map(|(&a, &n)| rel(a, n)).fold(0.0, f64::max)
}

/// Tensor-level relative error `max|a - n| / max(max|a|, max|n|)`, so
/// entries far below the tensor's gradient scale do not dominate.
fn check_tensor(x: &[f64], analytic: &[f64], h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let numeric = central(x, h, f);
    let inf = |v: &mut dyn Iterator<Item = f64>| v.map(f64::abs).fold(0.0, f64::max);
    let diff = inf(&mut analytic.iter().zip(&numeric).map(|(a, n)| a - n));
    let scale = inf(&mut analytic.iter().copied()).max(inf(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn central(x: &[f64], h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Compares values/analytic gradients against a scalar function.
type Checker = fn(&[f64], &[f64], f64, &mut dyn FnMut(&[f64]) -> f64) -> f64;

/// Checks every parameter listed by `params` through the scalar `eval`.
fn params_check<M: Clone>(
    check: Checker,
    module: &M,
    params: impl Fn(&mut M) -> Vec<(String, &mut Param<f64>)>,
    analytic: &M,
    h: f64,
    eval: impl Fn(&M) -> f64,
) -> f64 {
    let mut analytic = analytic.clone();
    let grads: Vec<Vec<f64>> = params(&mut analytic).into_iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    let mut base = module.clone();
    let values: Vec<Vec<f64>> = params(&mut base).into_iter().map(|(_, p)| p.value.data().to_vec()).collect();
    let mut worst = 0.0f64;
    for (k, (v, g)) in values.iter().zip(&grads).enumerate() {
        worst = worst.max(check(v, g, h, &mut |d| {
            let mut m = module.clone();
            params(&mut m)[k].1.value.data_mut().copy_from_slice(d);
            eval(&m)
        }));
    }
    worst
}

fn block_params(b: &mut Block<f64>) -> Vec<(String, &mut Param<f64>)> {
    let Block { conv1, bn1, conv2, bn2, proj } = b;
    let mut v: Vec<(String, &mut Param<f64>)> = vec![
        ("conv1".into(), &mut conv1.w),
        ("bn1.gamma".into(), &mut bn1.gamma),
        ("bn1.beta".into(), &mut bn1.beta),
        ("conv2".into(), &mut conv2.w),
        ("bn2.gamma".into(), &mut bn2.gamma),
        ("bn2.beta".into(), &mut bn2.beta),
    ];
    if let Some(p) = proj {
        v.push(("proj".into(), &mut p.w));
    }
    v
}

fn block(rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride: usize) -> f64 {
    let mut block = Block::<f64>::new(cin, cout, 3, stride, rng);
    for (_, p) in block_params(&mut block) {
        if p.value.shape().len() == 1 {
            p.value = rand_tensor(rng, p.value.shape());
            p.value.data_mut().iter_mut().for_each(|v| *v += 1.5);
        }
    }
    let x = rand_tensor(rng, &[3, cin, 8]);
    let (y, cache) = block.clone().forward_train(&x).unwrap();
    let r = rand_tensor(rng, y.shape());
    let mut analytic = block.clone();
    let dx = analytic.backward(&cache, &r).unwrap();
    let eval = |b: &Block<f64>, x: &Tensor<f64>| probe(&b.clone().forward_train(x).unwrap().0, &r);
    check_with(x.data(), dx.data(), H, &mut |d| eval(&block, &with_data(&x, d))).max(params_check(
        check_with,
        &block,
        block_params,
        &analytic,
        H,
        |b| eval(b, &x),
    ))
}

/// Step for the whole-network check. Sixteen ReLU/batchnorm blocks on random
/// weights give the loss curvature around 1e5 and frequent kinks, so a
/// `1e-5` stencil measures those rather than the gradient.
pub const MODEL_H: f64 = 1e-7;

/// Whole-network check of every parameter tensor against the weighted BCE
/// loss, as a tensor-level relative error.
pub fn model_gradient_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_64656c);
    let rng = &mut rng;
    let config = ModelConfig { channels: [2, 2, 3, 3], stem_kernel: 5, kernel: 3, ..ModelConfig::default() };
    let mut m = Model::<f64>::new(config, seed).unwrap();
    m.head.weight.value = rand_tensor(rng, m.head.weight.value.shape());
    m.head.bias.value = rand_tensor(rng, m.head.bias.value.shape());
    let x = rand_tensor(rng, &[3, 12, 1024]);
    let f = rand_tensor(rng, &[3, 20]);
    let y = Tensor::from_vec(&[3, 9], (0..27).map(|_| rng.random_bool(0.3) as u8 as f64).collect()).unwrap();
    let w: Vec<f64> = (0..9).map(|_| rng.random_range(0.5..2.0)).collect();
    let loss = |m: &Model<f64>| {
        let (logits, _) = m.clone().forward_train(&x, Some(&f)).unwrap();
        weighted_bce_with_logits(&logits, &y, &w).unwrap().0
    };
    let mut analytic = m.clone();
    let (logits, cache) = analytic.forward_train(&x, Some(&f)).unwrap();
    let (_, dl) = weighted_bce_with_logits(&logits, &y, &w).unwrap();
    analytic.backward(&cache, &dl).unwrap();
    params_check(check_tensor, &m, |m| m.params_mut(), &analytic, MODEL_H, loss)
}

/// Every differentiable op checked for one seed: `(op, max relative error)`.
pub fn gradient_checks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        ("conv1d", conv(&mut rng, 1, 2)),
        ("conv1d stride 2", conv(&mut rng, 2, 1)),
        ("batchnorm", batchnorm(&mut rng)),
        ("relu", relu_op(&mut rng)),
        ("avg pool", pool(&mut rng, PoolMode::Avg)),
        ("max pool", pool(&mut rng, PoolMode::Max)),
        ("dual pool", pool(&mut rng, PoolMode::Both)),
        ("linear", linear(&mut rng)),
        ("weighted bce", loss(&mut rng)),
        ("block identity", block(&mut rng, 3, 3, 1)),
        ("block projection", block(&mut rng, 2, 4, 2)),
    ]
}
