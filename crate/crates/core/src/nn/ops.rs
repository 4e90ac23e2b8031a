//! Differentiable building blocks. Forward passes return whatever the
//! backward pass needs; parameter gradients are accumulated (`+=`) so a
//! caller can sum over several backward calls.
//!
//! Parallel kernels split work by output row and keep every row's
//! summation order fixed, so results do not depend on the thread count.

use super::{NnError, Param, Scalar, Tensor};
use crate::par;

pub fn conv_out_len(t: usize, k: usize, stride: usize, pad: usize) -> Result<usize, NnError> {
    if stride == 0 || k == 0 || t + 2 * pad < k {
        return Err(NnError::Shape(format!("conv of length {t} with kernel {k}, stride {stride}, pad {pad}")));
    }
    Ok((t + 2 * pad - k) / stride + 1)
}

/// Output positions `t` in `[lo, hi)` whose input `t*s + k - pad` is in range.
fn valid_range(k: usize, s: usize, pad: usize, t_in: usize, t_out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(s) } else { 0 };
    if t_in + pad < k + 1 {
        return (0, 0);
    }
    let hi = ((t_in - 1 + pad - k) / s + 1).min(t_out);
    (lo.min(hi), hi)
}

/// `out[t] += w * x[t*s + off]` for `t` in `out`.
#[inline]
fn axpy_strided<F: Scalar>(out: &mut [F], w: F, x: &[F], s: usize) {
    if s == 1 {
        for (o, &xi) in out.iter_mut().zip(x) {
            *o += w * xi;
        }
    } else {
        for (o, &xi) in out.iter_mut().zip(x.iter().step_by(s)) {
            *o += w * xi;
        }
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed
/// order (vectorizes, and stays deterministic).
#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [F::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for (x, y) in ar.iter().zip(br) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn check_conv<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>) -> Result<(usize, usize, usize, usize, usize), NnError> {
    let (b, cin, t) = x.dims3()?;
    let (cout, wcin, k) = w.dims3()?;
    if wcin != cin {
        return Err(NnError::Shape(format!("input has {cin} channels, kernel expects {wcin}")));
    }
    Ok((b, cin, t, cout, k))
}

/// Cross-correlation with zero padding: `x [B, Cin, T]`, `w [Cout, Cin, K]`.
pub fn conv1d_forward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>, NnError> {
    let (b, cin, t_in, cout, k) = check_conv(x, w)?;
    let t_out = conv_out_len(t_in, k, stride, pad)?;
    let mut out = Tensor::zeros(&[b, cout, t_out]);
    let (xd, wd) = (x.data(), w.data());
    par::for_each_chunk_mut(out.data_mut(), t_out, |row, o| {
        let (bi, co) = (row / cout, row % cout);
        for ci in 0..cin {
            let xr = &xd[(bi * cin + ci) * t_in..][..t_in];
            let wr = &wd[(co * cin + ci) * k..][..k];
            for (kk, &wv) in wr.iter().enumerate() {
                let (lo, hi) = valid_range(kk, stride, pad, t_in, t_out);
                if lo < hi {
                    axpy_strided(&mut o[lo..hi], wv, &xr[lo * stride + kk - pad..], stride);
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of [`conv1d_forward`] w.r.t. its input (returned) and kernel
/// (accumulated into `dw`).
pub fn conv1d_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    stride: usize,
    pad: usize,
    dw: &mut Tensor<F>,
) -> Result<Tensor<F>, NnError> {
    let (b, cin, t_in, cout, k) = check_conv(x, w)?;
    let t_out = conv_out_len(t_in, k, stride, pad)?;
    if dy.shape() != [b, cout, t_out] || dw.shape() != w.shape() {
        return Err(NnError::Shape(format!("conv gradient shapes {:?} / {:?}", dy.shape(), dw.shape())));
    }
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());

    let mut dx = Tensor::zeros(&[b, cin, t_in]);
    par::for_each_chunk_mut(dx.data_mut(), t_in, |row, dxr| {
        let (bi, ci) = (row / cin, row % cin);
        for co in 0..cout {
            let g = &dyd[(bi * cout + co) * t_out..][..t_out];
            for kk in 0..k {
                let wv = wd[(co * cin + ci) * k + kk];
                let (lo, hi) = valid_range(kk, stride, pad, t_in, t_out);
                if lo >= hi {
                    continue;
                }
                if stride == 1 {
                    axpy_strided(&mut dxr[lo + kk - pad..hi + kk - pad], wv, &g[lo..hi], 1);
                } else {
                    for t in lo..hi {
                        dxr[t * stride + kk - pad] += wv * g[t];
                    }
                }
            }
        }
    });

    // One kernel row (fixed co) per task; batch summed in order.
    par::for_each_chunk_mut(dw.data_mut(), cin * k, |co, dwr| {
        for bi in 0..b {
            let g = &dyd[(bi * cout + co) * t_out..][..t_out];
            for ci in 0..cin {
                let xr = &xd[(bi * cin + ci) * t_in..][..t_in];
                for kk in 0..k {
                    let (lo, hi) = valid_range(kk, stride, pad, t_in, t_out);
                    if lo >= hi {
                        continue;
                    }
                    dwr[ci * k + kk] += if stride == 1 {
                        dot(&g[lo..hi], &xr[lo + kk - pad..hi + kk - pad])
                    } else {
                        let mut acc = F::zero();
                        for t in lo..hi {
                            acc += g[t] * xr[t * stride + kk - pad];
                        }
                        acc
                    };
                }
            }
        }
    });
    Ok(dx)
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over (batch, time).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    /// Set once running statistics have seen a training batch.
    pub tracked: bool,
}

#[derive(Debug, Clone)]
pub struct BnCache<F> {
    xhat: Tensor<F>,
    inv_std: Vec<F>,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], F::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            tracked: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    fn check(&self, x: &Tensor<F>) -> Result<(usize, usize, usize), NnError> {
        let (b, c, t) = x.dims3()?;
        if c != self.channels() {
            return Err(NnError::Shape(format!("batchnorm for {} channels got {c}", self.channels())));
        }
        Ok((b, c, t))
    }

    /// Normalizes with batch statistics and updates the running ones.
    pub fn forward_train(&mut self, x: &Tensor<F>) -> Result<(Tensor<F>, BnCache<F>), NnError> {
        let (b, c, t) = self.check(x)?;
        let m = (b * t) as f64;
        let xd = x.data();
        let stats: Vec<(f64, f64)> = par::map_range(c, |ch| {
            let rows = || (0..b).flat_map(move |bi| xd[(bi * c + ch) * t..][..t].iter());
            let mean = rows().map(|v| v.to_f64().unwrap()).sum::<f64>() / m;
            let var = rows().map(|v| (v.to_f64().unwrap() - mean).powi(2)).sum::<f64>() / m;
            (mean, var)
        });
        let inv_std: Vec<F> = stats.iter().map(|&(_, v)| F::from(1.0 / (v + BN_EPS).sqrt()).unwrap()).collect();
        let mean: Vec<F> = stats.iter().map(|&(mu, _)| F::from(mu).unwrap()).collect();

        let mut xhat = Tensor::zeros(x.shape());
        par::for_each_chunk_mut(xhat.data_mut(), t, |row, o| {
            let ch = row % c;
            for (o, &v) in o.iter_mut().zip(&xd[row * t..][..t]) {
                *o = (v - mean[ch]) * inv_std[ch];
            }
        });
        let y = self.affine(&xhat);

        let mom = F::from(BN_MOMENTUM).unwrap();
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for (ch, &(mu, var)) in stats.iter().enumerate() {
            let (mu, var) = (F::from(mu).unwrap(), F::from(var * unbias).unwrap());
            self.running_mean[ch] = (F::one() - mom) * self.running_mean[ch] + mom * mu;
            self.running_var[ch] = (F::one() - mom) * self.running_var[ch] + mom * var;
        }
        self.tracked = true;
        Ok((y, BnCache { xhat, inv_std }))
    }

    /// Normalizes with running statistics.
    pub fn forward_eval(&self, x: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        let (_, c, t) = self.check(x)?;
        if !self.tracked {
            return Err(NnError::UninitializedStats);
        }
        let eps = F::from(BN_EPS).unwrap();
        let inv: Vec<F> = self.running_var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let (g, bt, xd) = (self.gamma.value.data(), self.beta.value.data(), x.data());
        let mut y = Tensor::zeros(x.shape());
        par::for_each_chunk_mut(y.data_mut(), t, |row, o| {
            let ch = row % c;
            let scale = g[ch] * inv[ch];
            let shift = bt[ch] - self.running_mean[ch] * scale;
            for (o, &v) in o.iter_mut().zip(&xd[row * t..][..t]) {
                *o = v * scale + shift;
            }
        });
        Ok(y)
    }

    fn affine(&self, xhat: &Tensor<F>) -> Tensor<F> {
        let (c, t) = (xhat.dim(1), xhat.dim(2));
        let (g, bt) = (self.gamma.value.data(), self.beta.value.data());
        let mut y = xhat.clone();
        par::for_each_chunk_mut(y.data_mut(), t, |row, o| {
            let ch = row % c;
            o.iter_mut().for_each(|v| *v = *v * g[ch] + bt[ch]);
        });
        y
    }

    /// Backward through a training-mode forward; accumulates gamma/beta
    /// gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &BnCache<F>, dy: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        let (b, c, t) = self.check(dy)?;
        if dy.shape() != cache.xhat.shape() {
            return Err(NnError::Shape("batchnorm gradient shape".into()));
        }
        let (xh, g) = (cache.xhat.data(), dy.data());
        let sums: Vec<(f64, f64)> = par::map_range(c, |ch| {
            let (mut sb, mut sg) = (0.0, 0.0);
            for bi in 0..b {
                let r = (bi * c + ch) * t;
                for (gv, xv) in g[r..r + t].iter().zip(&xh[r..r + t]) {
                    let gv = gv.to_f64().unwrap();
                    sb += gv;
                    sg += gv * xv.to_f64().unwrap();
                }
            }
            (sb, sg)
        });
        let m = F::from(b * t).unwrap();
        let gamma = self.gamma.value.data().to_vec();
        let mut dx = Tensor::zeros(dy.shape());
        par::for_each_chunk_mut(dx.data_mut(), t, |row, o| {
            let ch = row % c;
            let (sb, sg) = (F::from(sums[ch].0).unwrap(), F::from(sums[ch].1).unwrap());
            let k = gamma[ch] * cache.inv_std[ch] / m;
            let r = row * t;
            for ((o, gv), xv) in o.iter_mut().zip(&g[r..r + t]).zip(&xh[r..r + t]) {
                *o = k * (m * *gv - sb - *xv * sg);
            }
        });
        for (ch, &(sb, sg)) in sums.iter().enumerate() {
            self.beta.grad.data_mut()[ch] += F::from(sb).unwrap();
            self.gamma.grad.data_mut()[ch] += F::from(sg).unwrap();
        }
        Ok(dx)
    }
}

pub fn relu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(F::zero()));
    y
}

/// Passes `dy` where the forward input (or output) was positive.
pub fn relu_backward<F: Scalar>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= F::zero() {
            *d = F::zero();
        }
    }
    dx
}

/// Which global poolings feed the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolMode {
    Avg,
    Max,
    #[default]
    Both,
}

impl PoolMode {
    pub fn width(self, channels: usize) -> usize {
        match self {
            PoolMode::Both => 2 * channels,
            _ => channels,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            PoolMode::Avg => 0,
            PoolMode::Max => 1,
            PoolMode::Both => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        [PoolMode::Avg, PoolMode::Max, PoolMode::Both].into_iter().find(|m| m.code() == code)
    }
}

impl std::str::FromStr for PoolMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "avg" => Ok(PoolMode::Avg),
            "max" => Ok(PoolMode::Max),
            "both" => Ok(PoolMode::Both),
            other => Err(format!("unknown pooling '{other}' (avg, max, both)")),
        }
    }
}

impl std::fmt::Display for PoolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolMode::Avg => "avg",
            PoolMode::Max => "max",
            PoolMode::Both => "both",
        })
    }
}

/// Global pooling over time: `[B, C, T] -> [B, C]` or `[B, 2C]` (averages
/// first, then maxima). Also returns the argmax positions.
pub fn global_pool<F: Scalar>(x: &Tensor<F>, mode: PoolMode) -> Result<(Tensor<F>, Vec<usize>), NnError> {
    let (b, c, t) = x.dims3()?;
    let w = mode.width(c);
    let mut out = Tensor::zeros(&[b, w]);
    let mut argmax = vec![0; b * c];
    let tn = F::from(t).unwrap();
    for bi in 0..b {
        for ch in 0..c {
            let row = &x.data()[(bi * c + ch) * t..][..t];
            let avg = row.iter().fold(F::zero(), |a, &v| a + v) / tn;
            let (mut am, mut mx) = (0, row[0]);
            for (i, &v) in row.iter().enumerate() {
                if v > mx {
                    (am, mx) = (i, v);
                }
            }
            argmax[bi * c + ch] = am;
            let o = &mut out.data_mut()[bi * w..][..w];
            match mode {
                PoolMode::Avg => o[ch] = avg,
                PoolMode::Max => o[ch] = mx,
                PoolMode::Both => {
                    o[ch] = avg;
                    o[c + ch] = mx;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Dual global average and max pooling, `[B, C, T] -> [B, 2C]`.
pub fn dual_global_pool<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>, NnError> {
    Ok(global_pool(x, PoolMode::Both)?.0)
}

pub fn global_pool_backward<F: Scalar>(
    dz: &Tensor<F>,
    argmax: &[usize],
    shape: (usize, usize, usize),
    mode: PoolMode,
) -> Tensor<F> {
    let (b, c, t) = shape;
    let w = mode.width(c);
    let tn = F::from(t).unwrap();
    let mut dx = Tensor::zeros(&[b, c, t]);
    for bi in 0..b {
        for ch in 0..c {
            let g = &dz.data()[bi * w..][..w];
            let (ga, gm) = match mode {
                PoolMode::Avg => (g[ch], F::zero()),
                PoolMode::Max => (F::zero(), g[ch]),
                PoolMode::Both => (g[ch], g[c + ch]),
            };
            let row = &mut dx.data_mut()[(bi * c + ch) * t..][..t];
            row.iter_mut().for_each(|v| *v = ga / tn);
            row[argmax[bi * c + ch]] += gm;
        }
    }
    dx
}

/// Fully connected layer `y = z W^T + b`, `W [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Param::new(Tensor::zeros(&[outputs, inputs])), bias: Param::new(Tensor::zeros(&[outputs])) }
    }

    pub fn forward(&self, z: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        let (b, n_in) = z.dims2()?;
        let (n_out, w_in) = self.weight.value.dims2()?;
        if w_in != n_in {
            return Err(NnError::Shape(format!("linear expects {w_in} inputs, got {n_in}")));
        }
        let (w, bias) = (self.weight.value.data(), self.bias.value.data());
        let mut y = Tensor::zeros(&[b, n_out]);
        for bi in 0..b {
            let zr = &z.data()[bi * n_in..][..n_in];
            for o in 0..n_out {
                let wr = &w[o * n_in..][..n_in];
                y.data_mut()[bi * n_out + o] = bias[o] + wr.iter().zip(zr).fold(F::zero(), |a, (&p, &q)| a + p * q);
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, z: &Tensor<F>, dy: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        let (b, n_in) = z.dims2()?;
        let (n_out, _) = self.weight.value.dims2()?;
        if dy.shape() != [b, n_out] {
            return Err(NnError::Shape("linear gradient shape".into()));
        }
        let mut dz = Tensor::zeros(&[b, n_in]);
        for bi in 0..b {
            let zr = &z.data()[bi * n_in..][..n_in];
            for o in 0..n_out {
                let g = dy.data()[bi * n_out + o];
                self.bias.grad.data_mut()[o] += g;
                let wr = &self.weight.value.data()[o * n_in..][..n_in];
                let dwr = &mut self.weight.grad.data_mut()[o * n_in..][..n_in];
                for i in 0..n_in {
                    dwr[i] += g * zr[i];
                    dz.data_mut()[bi * n_in + i] += g * wr[i];
                }
            }
        }
        Ok(dz)
    }
}

pub fn sigmoid<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

/// `ln(1 + e^v)` without overflow.
fn softplus<F: Scalar>(v: F) -> F {
    v.max(F::zero()) + (-v.abs()).exp().ln_1p()
}

pub const PROB_CLAMP: f64 = 1e-7;

fn check_loss_shapes<F: Scalar>(p: &Tensor<F>, y: &Tensor<F>, w: &[f64]) -> Result<(usize, usize), NnError> {
    let (b, k) = p.dims2()?;
    if y.shape() != p.shape() || w.len() != k {
        return Err(NnError::Shape(format!("loss shapes {:?} / {:?} / {} weights", p.shape(), y.shape(), w.len())));
    }
    Ok((b, k))
}

/// Weighted binary cross-entropy on probabilities (clamped to
/// `[1e-7, 1 - 1e-7]`); positive targets are weighted by `weights`.
pub fn weighted_bce<F: Scalar>(probs: &Tensor<F>, targets: &Tensor<F>, weights: &[f64]) -> Result<F, NnError> {
    let (b, k) = check_loss_shapes(probs, targets, weights)?;
    let mut total = 0.0;
    for (i, (&p, &y)) in probs.data().iter().zip(targets.data()).enumerate() {
        let p = p.to_f64().unwrap().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let y = y.to_f64().unwrap();
        total -= weights[i % k] * y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    let loss = F::from(total / b as f64).unwrap();
    if !loss.is_finite() {
        return Err(NnError::NonFiniteLoss(total));
    }
    Ok(loss)
}

/// The same loss evaluated from logits, with its gradient w.r.t. them:
/// `dL/dl = (p (w y + 1 - y) - w y) / B`.
pub fn weighted_bce_with_logits<F: Scalar>(
    logits: &Tensor<F>,
    targets: &Tensor<F>,
    weights: &[f64],
) -> Result<(F, Tensor<F>), NnError> {
    let (b, k) = check_loss_shapes(logits, targets, weights)?;
    let bn = F::from(b).unwrap();
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for (i, ((&l, &y), g)) in logits.data().iter().zip(targets.data()).zip(grad.data_mut()).enumerate() {
        let w = F::from(weights[i % k]).unwrap();
        // -log p = softplus(-l), -log(1 - p) = softplus(l)
        total += (w * y * softplus(-l) + (F::one() - y) * softplus(l)).to_f64().unwrap();
        let p = sigmoid(l);
        *g = (p * (w * y + F::one() - y) - w * y) / bn;
    }
    if !total.is_finite() {
        return Err(NnError::NonFiniteLoss(total));
    }
    Ok((F::from(total / b as f64).unwrap(), grad))
}
