use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::{ParamId, ParamSet, Scalar};

const LN_EPS: f64 = 1e-5;

/// Rows `start..start + len` of a row-stacked activation belong to one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// `y = x W + b`, `W` stored as `[in × out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = params.add_normal(format!("{name}.weight"), (fan_in, fan_out), std, true, rng);
        let b = bias.then(|| params.add_const(format!("{name}.bias"), (1, fan_out), 0.0));
        Self { w, b }
    }

    pub fn forward<F: Scalar>(&self, p: &ParamSet<F>, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(p.get(self.w));
        if let Some(b) = self.b {
            y += &p.get(b).row(0);
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward<F: Scalar>(
        &self,
        p: &ParamSet<F>,
        x: &Array2<F>,
        dy: &Array2<F>,
        g: &mut ParamSet<F>,
    ) -> Array2<F> {
        self.backward_params(x, dy, g);
        dy.dot(&p.get(self.w).t())
    }

    /// Parameter gradients only, for layers whose input is data.
    pub fn backward_params<F: Scalar>(&self, x: &Array2<F>, dy: &Array2<F>, g: &mut ParamSet<F>) {
        general_mat_mul(F::one(), &x.t(), dy, F::one(), g.get_mut(self.w));
        if let Some(b) = self.b {
            let mut gb = g.get_mut(b).row_mut(0);
            gb += &dy.sum_axis(Axis(0));
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

impl LayerNorm {
    pub fn new<F: Scalar>(params: &mut ParamSet<F>, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.add_const(format!("{name}.gamma"), (1, dim), 1.0),
            beta: params.add_const(format!("{name}.beta"), (1, dim), 0.0),
        }
    }

    pub fn forward<F: Scalar>(&self, p: &ParamSet<F>, x: &Array2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let (n, d) = x.dim();
        let inv_d = F::of(1.0 / d as f64);
        let eps = F::of(LN_EPS);
        let mut xhat = Array2::zeros((n, d));
        let mut rstd = Array1::zeros(n);
        for ((row, mut out), r) in x
            .axis_iter(Axis(0))
            .zip(xhat.axis_iter_mut(Axis(0)))
            .zip(rstd.iter_mut())
        {
            let mean = row.sum() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let inv = F::one() / (var + eps).sqrt();
            *r = inv;
            Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * inv);
        }
        let gamma = p.get(self.gamma).row(0);
        let beta = p.get(self.beta).row(0);
        let y = &xhat * &gamma + &beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward<F: Scalar>(
        &self,
        p: &ParamSet<F>,
        cache: &LayerNormCache<F>,
        dy: &Array2<F>,
        g: &mut ParamSet<F>,
    ) -> Array2<F> {
        let d = dy.ncols();
        let inv_d = F::of(1.0 / d as f64);
        {
            let mut gg = g.get_mut(self.gamma).row_mut(0);
            gg += &(dy * &cache.xhat).sum_axis(Axis(0));
        }
        {
            let mut gb = g.get_mut(self.beta).row_mut(0);
            gb += &dy.sum_axis(Axis(0));
        }
        let gamma = p.get(self.gamma).row(0);
        let dxhat = dy * &gamma;
        let mut dx = Array2::zeros(dy.dim());
        for (((dh, xh), mut out), &r) in dxhat
            .axis_iter(Axis(0))
            .zip(cache.xhat.axis_iter(Axis(0)))
            .zip(dx.axis_iter_mut(Axis(0)))
            .zip(cache.rstd.iter())
        {
            let mean_dh = dh.sum() * inv_d;
            let mean_dh_xh = dh.dot(&xh) * inv_d;
            Zip::from(&mut out)
                .and(&dh)
                .and(&xh)
                .for_each(|o, &a, &b| *o = r * (a - mean_dh - b * mean_dh_xh));
        }
        dx
    }
}

/// `σ(2u)` with `u = √(2/π)(x + 0.044715x³)`; GELU's tanh form is `x · σ(2u)`.
fn gelu_gate<F: Scalar>(x: F) -> F {
    let k = F::of(2.0 * 0.797_884_560_802_865_4);
    let c = F::of(0.044_715);
    F::one() / (F::one() + (-(k * (x + c * x * x * x))).fast_exp())
}

/// Derivative of `x · s` given the cached gate `s = σ(2u)`.
fn gelu_grad<F: Scalar>(x: F, s: F) -> F {
    let k = F::of(2.0 * 0.797_884_560_802_865_4);
    let c = F::of(0.044_715);
    s + x * s * (F::one() - s) * k * (F::one() + F::of(3.0) * c * x * x)
}

/// Two-layer feed-forward block with a tanh-approximated GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache<F> {
    x: Array2<F>,
    pre: Array2<F>,
    gate: Array2<F>,
    act: Array2<F>,
}

impl Mlp {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<F>,
        name: &str,
        dim: usize,
        hidden: usize,
        out_std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(params, &format!("{name}.fc1"), dim, hidden, true, (dim as f64).powf(-0.5), rng),
            fc2: Linear::new(params, &format!("{name}.fc2"), hidden, dim, true, out_std, rng),
        }
    }

    pub fn forward<F: Scalar>(&self, p: &ParamSet<F>, x: &Array2<F>) -> (Array2<F>, MlpCache<F>) {
        let pre = self.fc1.forward(p, x);
        let gate = pre.mapv(gelu_gate);
        let act = &pre * &gate;
        let y = self.fc2.forward(p, &act);
        (
            y,
            MlpCache {
                x: x.clone(),
                pre,
                gate,
                act,
            },
        )
    }

    pub fn backward<F: Scalar>(
        &self,
        p: &ParamSet<F>,
        cache: &MlpCache<F>,
        dy: &Array2<F>,
        g: &mut ParamSet<F>,
    ) -> Array2<F> {
        let mut d_act = self.fc2.backward(p, &cache.act, dy, g);
        Zip::from(&mut d_act)
            .and(&cache.pre)
            .and(&cache.gate)
            .for_each(|d, &x, &s| *d *= gelu_grad(x, s));
        self.fc1.backward(p, &cache.x, &d_act, g)
    }
}

/// Multi-head self-attention applied independently within each segment.
#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub causal: bool,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    x: Array2<F>,
    qkv: Array2<F>,
    ctx: Array2<F>,
    /// Attention probabilities, indexed `segment * heads + head`.
    probs: Vec<Array2<F>>,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<F>,
        name: &str,
        dim: usize,
        heads: usize,
        causal: bool,
        out_std: f64,
        rng: &mut R,
    ) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            qkv: Linear::new(params, &format!("{name}.qkv"), dim, 3 * dim, true, (dim as f64).powf(-0.5), rng),
            out: Linear::new(params, &format!("{name}.out"), dim, dim, true, out_std, rng),
            heads,
            causal,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        p: &ParamSet<F>,
        x: &Array2<F>,
        segments: &[Segment],
    ) -> (Array2<F>, AttentionCache<F>) {
        let dim = x.ncols();
        let hd = dim / self.heads;
        let scale = F::of(1.0 / (hd as f64).sqrt());
        let qkv = self.qkv.forward(p, x);
        let mut ctx = Array2::zeros((x.nrows(), dim));
        let mut probs = Vec::with_capacity(segments.len() * self.heads);
        for seg in segments {
            let rows = seg.start..seg.end();
            for h in 0..self.heads {
                let q = qkv.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
                let k = qkv.slice(s![rows.clone(), dim + h * hd..dim + (h + 1) * hd]);
                let v = qkv.slice(s![rows.clone(), 2 * dim + h * hd..2 * dim + (h + 1) * hd]);
                let mut att = q.dot(&k.t());
                att *= scale;
                softmax_rows(&mut att, self.causal);
                let o = att.dot(&v);
                ctx.slice_mut(s![rows.clone(), h * hd..(h + 1) * hd]).assign(&o);
                probs.push(att);
            }
        }
        let y = self.out.forward(p, &ctx);
        (
            y,
            AttentionCache {
                x: x.clone(),
                qkv,
                ctx,
                probs,
            },
        )
    }

    pub fn backward<F: Scalar>(
        &self,
        p: &ParamSet<F>,
        cache: &AttentionCache<F>,
        dy: &Array2<F>,
        segments: &[Segment],
        g: &mut ParamSet<F>,
    ) -> Array2<F> {
        let dim = cache.x.ncols();
        let hd = dim / self.heads;
        let scale = F::of(1.0 / (hd as f64).sqrt());
        let d_ctx = self.out.backward(p, &cache.ctx, dy, g);
        let mut d_qkv = Array2::zeros(cache.qkv.dim());
        for (si, seg) in segments.iter().enumerate() {
            let rows = seg.start..seg.end();
            for h in 0..self.heads {
                let att = &cache.probs[si * self.heads + h];
                let qc = h * hd..(h + 1) * hd;
                let kc = dim + h * hd..dim + (h + 1) * hd;
                let vc = 2 * dim + h * hd..2 * dim + (h + 1) * hd;
                let q = cache.qkv.slice(s![rows.clone(), qc.clone()]);
                let k = cache.qkv.slice(s![rows.clone(), kc.clone()]);
                let v = cache.qkv.slice(s![rows.clone(), vc.clone()]);
                let d_o = d_ctx.slice(s![rows.clone(), qc.clone()]);
                let d_v = att.t().dot(&d_o);
                let mut d_att = d_o.dot(&v.t());
                // softmax backward, then the 1/sqrt(hd) scale
                for (mut dr, pr) in d_att.axis_iter_mut(Axis(0)).zip(att.axis_iter(Axis(0))) {
                    let dot = dr.dot(&pr);
                    Zip::from(&mut dr)
                        .and(&pr)
                        .for_each(|d, &pv| *d = pv * (*d - dot) * scale);
                }
                let d_q = d_att.dot(&k);
                let d_k = d_att.t().dot(&q);
                d_qkv.slice_mut(s![rows.clone(), qc]).assign(&d_q);
                d_qkv.slice_mut(s![rows.clone(), kc]).assign(&d_k);
                d_qkv.slice_mut(s![rows.clone(), vc]).assign(&d_v);
            }
        }
        self.qkv.backward(p, &cache.x, &d_qkv, g)
    }
}

fn softmax_rows<F: Scalar>(att: &mut Array2<F>, causal: bool) {
    for (r, mut row) in att.axis_iter_mut(Axis(0)).enumerate() {
        let limit = if causal { r + 1 } else { row.len() };
        let mut max = F::neg_infinity();
        for &v in row.iter().take(limit) {
            if v > max {
                max = v;
            }
        }
        let mut sum = F::zero();
        for (c, v) in row.iter_mut().enumerate() {
            if c < limit {
                *v = (*v - max).fast_exp();
                sum += *v;
            } else {
                *v = F::zero();
            }
        }
        let inv = F::one() / sum;
        row.mapv_inplace(|v| v * inv);
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `h + mlp(ln2(h))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct BlockCache<F> {
    ln1: LayerNormCache<F>,
    attn: AttentionCache<F>,
    ln2: LayerNormCache<F>,
    mlp: MlpCache<F>,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<F>,
        name: &str,
        dim: usize,
        heads: usize,
        causal: bool,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        // Residual branch outputs are scaled down with depth.
        let out_std = (dim as f64).powf(-0.5) / (2.0 * depth as f64).sqrt();
        Self {
            ln1: LayerNorm::new(params, &format!("{name}.ln1"), dim),
            attn: Attention::new(params, &format!("{name}.attn"), dim, heads, causal, out_std, rng),
            ln2: LayerNorm::new(params, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(params, &format!("{name}.mlp"), dim, 4 * dim, out_std / 2.0, rng),
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        p: &ParamSet<F>,
        x: &Array2<F>,
        segments: &[Segment],
    ) -> (Array2<F>, BlockCache<F>) {
        let (a, ln1) = self.ln1.forward(p, x);
        let (att, attn) = self.attn.forward(p, &a, segments);
        let h = x + &att;
        let (c, ln2) = self.ln2.forward(p, &h);
        let (m, mlp) = self.mlp.forward(p, &c);
        let out = h + &m;
        (out, BlockCache { ln1, attn, ln2, mlp })
    }

    pub fn backward<F: Scalar>(
        &self,
        p: &ParamSet<F>,
        cache: &BlockCache<F>,
        d_out: &Array2<F>,
        segments: &[Segment],
        g: &mut ParamSet<F>,
    ) -> Array2<F> {
        let d_c = self.mlp.backward(p, &cache.mlp, d_out, g);
        let d_h = d_out + &self.ln2.backward(p, &cache.ln2, &d_c, g);
        let d_a = self.attn.backward(p, &cache.attn, &d_h, segments, g);
        d_h + &self.ln1.backward(p, &cache.ln1, &d_a, g)
    }
}

/// Scales every row to unit length; returns the normalized rows and norms.
pub fn l2_normalize_rows<F: Scalar>(z: ArrayView2<'_, F>) -> (Array2<F>, Array1<F>) {
    let norms: Array1<F> = z
        .axis_iter(Axis(0))
        .map(|r| r.dot(&r).sqrt().max(F::of(1e-12)))
        .collect();
    let mut y = z.to_owned();
    for (mut row, &n) in y.axis_iter_mut(Axis(0)).zip(norms.iter()) {
        row.mapv_inplace(|v| v / n);
    }
    (y, norms)
}

/// Backward of [`l2_normalize_rows`]: `dz = (dy − y (y·dy)) / |z|`.
pub fn l2_normalize_rows_backward<F: Scalar>(
    y: ArrayView2<'_, F>,
    norms: &Array1<F>,
    dy: ArrayView2<'_, F>,
) -> Array2<F> {
    let mut dz = Array2::zeros(y.dim());
    for (((yr, dr), mut out), &n) in y
        .axis_iter(Axis(0))
        .zip(dy.axis_iter(Axis(0)))
        .zip(dz.axis_iter_mut(Axis(0)))
        .zip(norms.iter())
    {
        let proj = yr.dot(&dr);
        Zip::from(&mut out)
            .and(&dr)
            .and(&yr)
            .for_each(|o, &d, &yv| *o = (d - yv * proj) / n);
    }
    dz
}
