//! Dense layer primitives with explicit reverse-mode passes.
//!
//! Every layer keeps the activations it needs in a cache struct returned by
//! `forward`; `backward` consumes that cache together with the upstream
//! gradient. Weight gradients are optional so that frozen layers only pay for
//! the input gradient.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

pub fn gaussian_vector<R: Rng>(rng: &mut R, len: usize, std: f64) -> Array1<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array1::from_shape_simple_fn(len, || normal.sample(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, d_in: usize, d_out: usize, std: f64) -> Self {
        Self {
            weight: gaussian_matrix(rng, d_in, d_out, std),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Returns `dx` and, when requested, the parameter gradient.
    pub fn backward(
        &self,
        x: &ArrayView2<f64>,
        dy: &Array2<f64>,
        want_param_grad: bool,
    ) -> (Array2<f64>, Option<LinearGrad>) {
        let dx = dy.dot(&self.weight.t());
        let grad = want_param_grad.then(|| LinearGrad {
            weight: x.t().dot(dy),
            bias: dy.sum_axis(Axis(0)),
        });
        (dx, grad)
    }
}

impl LinearGrad {
    pub fn zeros_like(layer: &Linear) -> Self {
        Self {
            weight: Array2::zeros(layer.weight.raw_dim()),
            bias: Array1::zeros(layer.bias.raw_dim()),
        }
    }

    pub fn accumulate(&mut self, other: &LinearGrad) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *inv = 1.0 / (var + LN_EPS).sqrt();
            row *= *inv;
        }
        let mut y = &xhat * &self.gain;
        y += &self.bias;
        (y, LayerNormCache { xhat, inv_std })
    }

    #[allow(clippy::type_complexity)]
    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        want_param_grad: bool,
    ) -> (Array2<f64>, Option<(Array1<f64>, Array1<f64>)>) {
        let d = dy.ncols() as f64;
        let dxhat = dy * &self.gain;
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let g = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            let inv = cache.inv_std[i];
            let mut out = dx.row_mut(i);
            for j in 0..g.len() {
                out[j] = inv * (g[j] - mean_g - xh[j] * mean_gx);
            }
        }
        let grads = want_param_grad.then(|| {
            let dgain = (dy * &cache.xhat).sum_axis(Axis(0));
            let dbias = dy.sum_axis(Axis(0));
            (dgain, dbias)
        });
        (dx, grads)
    }
}

pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-wise softmax, numerically stabilized. Entries equal to `-inf` get
/// probability zero.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row /= sum;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Causal multi-head self-attention over one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalSelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    input: Array2<f64>,
    qkv: Array2<f64>,
    /// One `n × n` probability matrix per head.
    probs: Vec<Array2<f64>>,
    merged: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionGrad {
    pub qkv: LinearGrad,
    pub out: LinearGrad,
}

impl CausalSelfAttention {
    pub fn new<R: Rng>(rng: &mut R, d: usize, n_heads: usize, std: f64) -> Self {
        assert!(
            d.is_multiple_of(n_heads),
            "model width must divide into heads"
        );
        Self {
            qkv: Linear::new(rng, d, 3 * d, std),
            out: Linear::new(rng, d, d, std),
            n_heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.out.d_in() / self.n_heads
    }

    pub fn forward(&self, x: Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let n = x.nrows();
        let d = self.out.d_in();
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.qkv.forward(&x.view());
        let mut merged = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut scores = q.dot(&k.t());
            scores *= scale;
            for i in 0..n {
                for j in (i + 1)..n {
                    scores[[i, j]] = f64::NEG_INFINITY;
                }
            }
            softmax_rows(&mut scores);
            merged
                .slice_mut(s![.., h * dh..(h + 1) * dh])
                .assign(&scores.dot(&v));
            probs.push(scores);
        }
        let y = self.out.forward(&merged.view());
        (
            y,
            AttentionCache {
                input: x,
                qkv,
                probs,
                merged,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &AttentionCache,
        dy: &Array2<f64>,
        want_param_grad: bool,
    ) -> (Array2<f64>, Option<AttentionGrad>) {
        let n = dy.nrows();
        let d = self.out.d_in();
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let (dmerged, out_grad) = self.out.backward(&cache.merged.view(), dy, want_param_grad);
        let mut dqkv = Array2::zeros((n, 3 * d));
        for h in 0..self.n_heads {
            let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = cache.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = cache
                .qkv
                .slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let p = &cache.probs[h];
            let d_out = dmerged.slice(s![.., h * dh..(h + 1) * dh]);
            let dv = p.t().dot(&d_out);
            let dp = d_out.dot(&v.t());
            // softmax backward: dS = P ⊙ (dP − rowsum(dP ⊙ P))
            let mut ds = Array2::zeros((n, n));
            for i in 0..n {
                let dot: f64 = (0..=i).map(|j| dp[[i, j]] * p[[i, j]]).sum();
                for j in 0..=i {
                    ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
                }
            }
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
            dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh])
                .assign(&dk);
            dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh])
                .assign(&dv);
        }
        let (dx, qkv_grad) = self
            .qkv
            .backward(&cache.input.view(), &dqkv, want_param_grad);
        let grad = match (qkv_grad, out_grad) {
            (Some(qkv), Some(out)) => Some(AttentionGrad { qkv, out }),
            _ => None,
        };
        (dx, grad)
    }
}

/// Two-layer feed-forward map with a GELU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct FeedForwardGrad {
    pub fc1: LinearGrad,
    pub fc2: LinearGrad,
}

impl FeedForward {
    pub fn new<R: Rng>(rng: &mut R, d: usize, d_ff: usize, std: f64) -> Self {
        Self {
            fc1: Linear::new(rng, d, d_ff, std),
            fc2: Linear::new(rng, d_ff, d, std),
        }
    }

    pub fn forward(&self, x: Array2<f64>) -> (Array2<f64>, FeedForwardCache) {
        let pre = self.fc1.forward(&x.view());
        let act = pre.mapv(gelu);
        let y = self.fc2.forward(&act.view());
        (y, FeedForwardCache { input: x, pre, act })
    }

    pub fn backward(
        &self,
        cache: &FeedForwardCache,
        dy: &Array2<f64>,
        want_param_grad: bool,
    ) -> (Array2<f64>, Option<FeedForwardGrad>) {
        let (dact, g2) = self.fc2.backward(&cache.act.view(), dy, want_param_grad);
        let dpre = dact * &cache.pre.mapv(gelu_grad);
        let (dx, g1) = self
            .fc1
            .backward(&cache.input.view(), &dpre, want_param_grad);
        let grad = match (g1, g2) {
            (Some(fc1), Some(fc2)) => Some(FeedForwardGrad { fc1, fc2 }),
            _ => None,
        };
        (dx, grad)
    }
}

/// L2 normalization of a vector together with its Jacobian-vector product.
pub fn l2_normalize(x: &Array1<f64>) -> (Array1<f64>, f64) {
    let norm = x.dot(x).sqrt();
    (x / norm, norm)
}

/// Given `u = x / |x|` and upstream `du`, returns `dx = (du - u (u·du)) / |x|`.
pub fn l2_normalize_backward(unit: &Array1<f64>, norm: f64, du: &Array1<f64>) -> Array1<f64> {
    let proj = unit.dot(du);
    (du - &(unit * proj)) / norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, analytic: &Array2<f64>) {
        let h = 1e-5;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let numeric = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!(
                (numeric - a).abs() <= 1e-6 * (1.0 + a.abs()),
                "entry {idx}: numeric {numeric} analytic {a}"
            );
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let ln = LayerNorm::new(4);
        let (y, _) = ln.forward(&array![[1.0, 2.0, 3.0, 4.0], [-2.0, 0.0, 0.0, 2.0]]);
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ln = LayerNorm::new(5);
        ln.gain = gaussian_vector(&mut rng, 5, 1.0);
        let x = gaussian_matrix(&mut rng, 3, 5, 1.0);
        let w = gaussian_matrix(&mut rng, 3, 5, 1.0);
        let f = |x: &Array2<f64>| (&ln.forward(x).0 * &w).sum();
        let (_, cache) = ln.forward(&x);
        let (dx, _) = ln.backward(&cache, &w, false);
        fd_check(f, &x, &dx);
    }

    #[test]
    fn attention_is_causal_and_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let attn = CausalSelfAttention::new(&mut rng, 8, 2, 0.5);
        let x = gaussian_matrix(&mut rng, 4, 8, 1.0);
        let w = gaussian_matrix(&mut rng, 4, 8, 1.0);
        let f = |x: &Array2<f64>| (&attn.forward(x.clone()).0 * &w).sum();
        let (y, cache) = attn.forward(x.clone());
        let (dx, _) = attn.backward(&cache, &w, false);
        fd_check(f, &x, &dx);

        let mut x2 = x.clone();
        x2[[3, 0]] += 1.0;
        let (y2, _) = attn.forward(x2);
        assert_eq!(y.slice(s![..3, ..]), y2.slice(s![..3, ..]));
    }

    #[test]
    fn feed_forward_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ff = FeedForward::new(&mut rng, 6, 10, 0.5);
        let x = gaussian_matrix(&mut rng, 3, 6, 1.0);
        let w = gaussian_matrix(&mut rng, 3, 6, 1.0);
        let f = |x: &Array2<f64>| (&ff.forward(x.clone()).0 * &w).sum();
        let (_, cache) = ff.forward(x.clone());
        let (dx, _) = ff.backward(&cache, &w, false);
        fd_check(f, &x, &dx);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let numeric = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((numeric - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
