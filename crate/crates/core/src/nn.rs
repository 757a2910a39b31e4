//! Layer primitives with explicit forward caches and hand-written backward
//! passes. Activations are row-major `T × D` matrices.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::params::{Grads, Init, ModuleGroup, ParamId, ParamSet};

const LN_EPS: f64 = 1e-5;

/// `y = x · W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        group: ModuleGroup,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = ps.register(rng, format!("{name}.weight"), group, &[fan_in, fan_out], Init::Normal(std));
        let b = bias.then(|| ps.register(rng, format!("{name}.bias"), group, &[fan_out], Init::Zeros));
        Self { w, b }
    }

    pub fn forward(&self, ps: &ParamSet, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&ps.m(self.w));
        if let Some(b) = self.b {
            y += &ps.v(b);
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, ps: &ParamSet, g: &mut Grads, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut g.m_mut(self.w));
        if let Some(b) = self.b {
            g.v_mut(b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        }
        dy.dot(&ps.m(self.w).t())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, group: ModuleGroup, dim: usize) -> Self {
        let gamma = ps.register(rng, format!("{name}.weight"), group, &[dim], Init::Ones);
        let beta = ps.register(rng, format!("{name}.bias"), group, &[dim], Init::Zeros);
        Self { gamma, beta }
    }

    pub fn forward(&self, ps: &ParamSet, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *r = 1.0 / (var + LN_EPS).sqrt();
            row *= *r;
        }
        let y = &xhat * &ps.v(self.gamma) + ps.v(self.beta);
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, ps: &ParamSet, g: &mut Grads, cache: &LayerNormCache, dy: ArrayView2<f64>) -> Array2<f64> {
        g.v_mut(self.gamma).scaled_add(1.0, &(&dy * &cache.xhat).sum_axis(Axis(0)));
        g.v_mut(self.beta).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        let d = dy.ncols() as f64;
        let mut dx = &dy * &ps.v(self.gamma);
        for ((mut row, xh), r) in dx.axis_iter_mut(Axis(0)).zip(cache.xhat.axis_iter(Axis(0))).zip(&cache.rstd) {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
            Zip::from(&mut row).and(&xh).for_each(|v, &x| *v = r * (*v - mean_g - x * mean_gx));
        }
        dx
    }
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Multi-head self-attention with a fused bias-free QKV projection.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub causal: bool,
}

pub struct AttentionCache {
    x: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    merged: Array2<f64>,
}

impl Attention {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        group: ModuleGroup,
        dim: usize,
        heads: usize,
        causal: bool,
    ) -> Self {
        let qkv = Linear::new(ps, rng, &format!("{name}.qkv"), group, dim, 3 * dim, false);
        let proj = Linear::new(ps, rng, &format!("{name}.proj"), group, dim, dim, true);
        Self { qkv, proj, heads, causal }
    }

    pub fn forward(&self, ps: &ParamSet, x: ArrayView2<f64>) -> (Array2<f64>, AttentionCache) {
        let (t, d) = x.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.qkv.forward(ps, x);
        let mut merged = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut p = q.dot(&k.t());
            for (i, mut row) in p.axis_iter_mut(Axis(0)).enumerate() {
                let live = if self.causal { i + 1 } else { t };
                let max = row.iter().take(live).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut sum = 0.0;
                for v in row.iter_mut().take(live) {
                    *v = ((*v - max) * scale).exp();
                    sum += *v;
                }
                for (j, v) in row.iter_mut().enumerate() {
                    if j < live {
                        *v /= sum;
                    } else {
                        *v = 0.0;
                    }
                }
            }
            merged.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
            probs.push(p);
        }
        let y = self.proj.forward(ps, merged.view());
        (y, AttentionCache { x: x.to_owned(), qkv, probs, merged })
    }

    pub fn backward(&self, ps: &ParamSet, g: &mut Grads, cache: &AttentionCache, dy: ArrayView2<f64>) -> Array2<f64> {
        let (t, d) = cache.x.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dmerged = self.proj.backward(ps, g, cache.merged.view(), dy);
        let mut dqkv = Array2::zeros((t, 3 * d));
        for h in 0..self.heads {
            let p = &cache.probs[h];
            let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = cache.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = cache.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let dout = dmerged.slice(s![.., h * dh..(h + 1) * dh]);
            let mut dp = dout.dot(&v.t());
            dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&p.t().dot(&dout));
            // softmax backward folded with the score scale
            for (mut drow, prow) in dp.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                Zip::from(&mut drow).and(&prow).for_each(|dv, &pv| *dv = pv * (*dv - dot) * scale);
            }
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dp.dot(&k));
            dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&dp.t().dot(&q));
        }
        self.qkv.backward(ps, g, cache.x.view(), dqkv.view())
    }
}

/// Pre-norm residual transformer block: attention then GELU feed-forward.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc: Linear,
    pub out: Linear,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ln2_out: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        group: ModuleGroup,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        causal: bool,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(ps, rng, &format!("{name}.ln1"), group, dim),
            attn: Attention::new(ps, rng, &format!("{name}.attn"), group, dim, heads, causal),
            ln2: LayerNorm::new(ps, rng, &format!("{name}.ln2"), group, dim),
            fc: Linear::new(ps, rng, &format!("{name}.ff.fc"), group, dim, ff_dim, true),
            out: Linear::new(ps, rng, &format!("{name}.ff.out"), group, ff_dim, dim, true),
        }
    }

    /// Number of tensors one block registers.
    pub const TENSORS: usize = 2 + 3 + 2 + 2 + 2;

    pub fn params(dim: usize, ff_dim: usize) -> usize {
        4 * dim + 3 * dim * dim + dim * dim + dim + dim * ff_dim + ff_dim + ff_dim * dim + dim
    }

    pub fn forward(&self, ps: &ParamSet, x: ArrayView2<f64>) -> (Array2<f64>, BlockCache) {
        let (n1, ln1) = self.ln1.forward(ps, x);
        let (a, attn) = self.attn.forward(ps, n1.view());
        let h = &x + &a;
        let (n2, ln2) = self.ln2.forward(ps, h.view());
        let pre_act = self.fc.forward(ps, n2.view());
        let act = pre_act.mapv(gelu);
        let y = h + self.out.forward(ps, act.view());
        (y, BlockCache { ln1, attn, ln2, ln2_out: n2, pre_act, act })
    }

    pub fn backward(&self, ps: &ParamSet, g: &mut Grads, cache: &BlockCache, dy: ArrayView2<f64>) -> Array2<f64> {
        let dact = self.out.backward(ps, g, cache.act.view(), dy);
        let dpre = dact * cache.pre_act.mapv(gelu_grad);
        let dn2 = self.fc.backward(ps, g, cache.ln2_out.view(), dpre.view());
        let dh = self.ln2.backward(ps, g, &cache.ln2, dn2.view()) + dy;
        let dn1 = self.attn.backward(ps, g, &cache.attn, dh.view());
        self.ln1.backward(ps, g, &cache.ln1, dn1.view()) + dh
    }
}
