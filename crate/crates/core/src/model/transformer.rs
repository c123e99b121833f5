//! Pre-norm transformer stack with explicit reverse-mode gradients.
//!
//! Rows are tokens; projections multiply on the right (`Q = H·W_Q`, `W_Q` is
//! `m × m`). Softmax attention uses logits scaled by `1/√(m/heads)`; the
//! cross-attention maps handed to the losses are the unscaled `Q K̄ᵀ` blocks.

use super::tokens::TokenSequence;
use super::{ModelConfig, ModelError, RerankerParams};
use crate::linalg::{gemm, gemm_at, gemm_bt, Matrix};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

/// Raw last-layer cross-attention logits, one map per head.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionMaps<T> {
    /// Image-1 queries against image-2 keys, `s² × s²` per head.
    pub a12: Vec<Matrix<T>>,
    /// Image-2 queries against image-1 keys.
    pub a21: Vec<Matrix<T>>,
}

impl<T: Scalar> CrossAttentionMaps<T> {
    pub fn zeros(heads: usize, cells: usize) -> Self {
        Self {
            a12: (0..heads).map(|_| Matrix::zeros(cells, cells)).collect(),
            a21: (0..heads).map(|_| Matrix::zeros(cells, cells)).collect(),
        }
    }

    pub fn heads(&self) -> usize {
        self.a12.len()
    }

    pub fn is_finite(&self) -> bool {
        self.a12.iter().chain(&self.a21).all(Matrix::is_finite)
    }

    /// Element-wise mean over heads.
    pub fn mean_over_heads(&self) -> (Matrix<T>, Matrix<T>) {
        let h = T::from_usize_lossy(self.heads());
        let avg = |maps: &[Matrix<T>]| {
            let mut acc = Matrix::zeros(maps[0].rows(), maps[0].cols());
            maps.iter().for_each(|m| acc.add_assign(m));
            acc.map(|v| v / h)
        };
        (avg(&self.a12), avg(&self.a21))
    }
}

#[derive(Debug, Clone)]
struct LnCache<T> {
    xhat: Matrix<T>,
    rstd: Vec<T>,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    ln1: LnCache<T>,
    h: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<Matrix<T>>,
    attn: Matrix<T>,
    ln2: LnCache<T>,
    h2: Matrix<T>,
    u: Matrix<T>,
    g: Matrix<T>,
}

/// Activations kept by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    final_ln: LnCache<T>,
    z_cls: Vec<T>,
    s: usize,
    m: usize,
    heads: usize,
    param_count: usize,
}

impl<T: Scalar> ForwardCache<T> {
    /// Post-softmax attention of every layer and head.
    pub fn attention_probs(&self) -> impl Iterator<Item = &Matrix<T>> {
        self.layers.iter().flat_map(|l| l.probs.iter())
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logit: T,
    pub cross: CrossAttentionMaps<T>,
    pub cache: ForwardCache<T>,
}

/// Upstream gradients: match-logit derivative and optional raw-attention gradients.
#[derive(Debug, Clone)]
pub struct OutputGradients<T> {
    pub dlogit: T,
    pub cross: Option<CrossAttentionMaps<T>>,
}

fn layer_norm<T: Scalar>(x: &Matrix<T>, gain: &[T], bias: &[T]) -> (Matrix<T>, LnCache<T>) {
    let (n, m) = x.shape();
    let mf = T::from_usize_lossy(m);
    let mut out = Matrix::zeros(n, m);
    let mut xhat = Matrix::zeros(n, m);
    let mut rstd = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / mf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
        let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (k, &v) in row.iter().enumerate() {
            xh[k] = (v - mean) * rs;
        }
        let o = out.row_mut(r);
        for k in 0..m {
            o[k] = xh[k] * gain[k] + bias[k];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// Returns `dx`; accumulates gain/bias gradients.
fn layer_norm_backward<T: Scalar>(
    dy: &Matrix<T>,
    cache: &LnCache<T>,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
) -> Matrix<T> {
    let (n, m) = dy.shape();
    let mf = T::from_usize_lossy(m);
    let mut dx = Matrix::zeros(n, m);
    let mut dxhat = vec![T::zero(); m];
    for r in 0..n {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let (mut mean_d, mut mean_dx) = (T::zero(), T::zero());
        for k in 0..m {
            dgain[k] = dgain[k] + dyr[k] * xh[k];
            dbias[k] = dbias[k] + dyr[k];
            dxhat[k] = dyr[k] * gain[k];
            mean_d = mean_d + dxhat[k];
            mean_dx = mean_dx + dxhat[k] * xh[k];
        }
        mean_d = mean_d / mf;
        mean_dx = mean_dx / mf;
        let rs = cache.rstd[r];
        let out = dx.row_mut(r);
        for k in 0..m {
            out[k] = rs * (dxhat[k] - mean_d - xh[k] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[inline]
fn gelu<T: Scalar>(u: T) -> T {
    let inner = T::lit(GELU_C) * (u + T::lit(GELU_A) * u * u * u);
    T::lit(0.5) * u * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(u: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let t = (c * (u + a * u * u * u)).tanh();
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * u * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * u * u)
}

/// Copies head `h`'s columns of an `n × m` matrix into an `n × dh` matrix.
fn head_slice<T: Scalar>(x: &Matrix<T>, h: usize, dh: usize) -> Matrix<T> {
    Matrix::from_fn(x.rows(), dh, |r, c| x.get(r, h * dh + c))
}

fn head_scatter<T: Scalar>(dst: &mut Matrix<T>, src: &Matrix<T>, h: usize, dh: usize) {
    for r in 0..src.rows() {
        let d = &mut dst.row_mut(r)[h * dh..(h + 1) * dh];
        d.copy_from_slice(src.row(r));
    }
}

fn matmul<T: Scalar>(a: &Matrix<T>, b: &[T], out_cols: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(a.rows(), out_cols);
    gemm(a.as_slice(), b, out.as_mut_slice(), a.rows(), a.cols(), out_cols, false);
    out
}

fn softmax_rows<T: Scalar>(scores: &mut Matrix<T>, scale: T) {
    for r in 0..scores.rows() {
        let row = scores.row_mut(r);
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b * scale));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v * scale - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Runs the transformer on an assembled sequence.
pub fn forward<T: Scalar>(
    params: &RerankerParams<T>,
    tokens: &TokenSequence<T>,
    config: &ModelConfig,
) -> Result<ForwardOutput<T>, ModelError> {
    let (m, heads) = (config.m, config.heads);
    let dh = config.head_dim();
    let n = config.seq_len();
    if tokens.tokens.shape() != (n, m) || tokens.s != config.s {
        return Err(ModelError::ShapeMismatch(format!(
            "token sequence is {:?}, expected ({n}, {m})",
            tokens.tokens.shape()
        )));
    }
    if params.layout().total() != super::ParamLayout::new(config).total() {
        return Err(ModelError::ShapeMismatch("parameters do not match the configuration".into()));
    }
    let layout = params.layout();
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let cells = config.s * config.s;
    let (first, second) = (1, 2 + cells);
    let mut x = tokens.tokens.clone();
    let mut caches = Vec::with_capacity(config.layers);
    let mut cross = CrossAttentionMaps::zeros(heads, cells);
    for (li, ls) in layout.layers.iter().enumerate() {
        let (h, ln1) = layer_norm(&x, params.slot(ls.ln1_gain), params.slot(ls.ln1_bias));
        let q = matmul(&h, params.slot(ls.wq), m);
        let k = matmul(&h, params.slot(ls.wk), m);
        let v = matmul(&h, params.slot(ls.wv), m);
        let mut attn = Matrix::zeros(n, m);
        let mut probs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (qh, kh, vh) = (head_slice(&q, hd, dh), head_slice(&k, hd, dh), head_slice(&v, hd, dh));
            let mut s = Matrix::zeros(n, n);
            gemm_bt(qh.as_slice(), kh.as_slice(), s.as_mut_slice(), n, dh, n, false);
            if li + 1 == config.layers {
                cross.a12[hd] = s.block(first, second, cells, cells);
                cross.a21[hd] = s.block(second, first, cells, cells);
            }
            softmax_rows(&mut s, scale);
            let oh = matmul(&s, vh.as_slice(), dh);
            head_scatter(&mut attn, &oh, hd, dh);
            probs.push(s);
        }
        let proj = matmul(&attn, params.slot(ls.wo), m);
        x.add_assign(&proj);
        let (h2, ln2) = layer_norm(&x, params.slot(ls.ln2_gain), params.slot(ls.ln2_bias));
        let mlp = config.mlp_width;
        let mut u = matmul(&h2, params.slot(ls.w1), mlp);
        let b1 = params.slot(ls.b1);
        for r in 0..n {
            for (val, &b) in u.row_mut(r).iter_mut().zip(b1) {
                *val = *val + b;
            }
        }
        let g = u.map(gelu);
        let mut out = matmul(&g, params.slot(ls.w2), m);
        let b2 = params.slot(ls.b2);
        for r in 0..n {
            for (val, &b) in out.row_mut(r).iter_mut().zip(b2) {
                *val = *val + b;
            }
        }
        x.add_assign(&out);
        caches.push(LayerCache { ln1, h, q, k, v, probs, attn, ln2, h2, u, g });
    }
    let (z, final_ln) = layer_norm(&x, params.slot(layout.final_gain), params.slot(layout.final_bias));
    let z_cls = z.row(0).to_vec();
    let w = params.slot(layout.head_w);
    let logit = z_cls.iter().zip(w).map(|(&a, &b)| a * b).sum::<T>() + params.slot(layout.head_b)[0];
    if !logit.is_finite() || !cross.is_finite() {
        return Err(ModelError::NonFiniteActivation("forward pass".into()));
    }
    Ok(ForwardOutput {
        logit,
        cross,
        cache: ForwardCache {
            layers: caches,
            final_ln,
            z_cls,
            s: config.s,
            m,
            heads,
            param_count: params.layout().total(),
        },
    })
}

/// Exact gradients of `dlogit · logit + Σ ⟨dA, A⟩` with respect to every
/// parameter and to the input tokens.
pub fn backward<T: Scalar>(
    params: &RerankerParams<T>,
    cache: &ForwardCache<T>,
    upstream: &OutputGradients<T>,
) -> Result<(RerankerParams<T>, Matrix<T>), ModelError> {
    let layout = params.layout();
    let (m, heads, s) = (cache.m, cache.heads, cache.s);
    let cells = s * s;
    if layout.total() != cache.param_count || layout.layers.len() != cache.layers.len() {
        return Err(ModelError::CacheMismatch);
    }
    let n = 2 * cells + 2;
    if cache.final_ln.xhat.shape() != (n, m) {
        return Err(ModelError::CacheMismatch);
    }
    if let Some(c) = &upstream.cross {
        let ok = c.heads() == heads && c.a12.iter().chain(&c.a21).all(|a| a.shape() == (cells, cells));
        if !ok {
            return Err(ModelError::CacheMismatch);
        }
    }
    let dh = m / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut grads = RerankerParams::zeros_like(params);

    // Head and final layer norm: only the CLS row reaches the logit.
    let dl = upstream.dlogit;
    {
        let w = params.slot(layout.head_w).to_vec();
        let dw = grads.slot_mut(layout.head_w);
        for (d, &z) in dw.iter_mut().zip(&cache.z_cls) {
            *d = *d + dl * z;
        }
        grads.slot_mut(layout.head_b)[0] = dl;
        let mut dz = Matrix::zeros(n, m);
        for (d, &wk) in dz.row_mut(0).iter_mut().zip(&w) {
            *d = dl * wk;
        }
        let mut dgain = vec![T::zero(); m];
        let mut dbias = vec![T::zero(); m];
        let dx = layer_norm_backward(&dz, &cache.final_ln, params.slot(layout.final_gain), &mut dgain, &mut dbias);
        grads.slot_mut(layout.final_gain).copy_from_slice(&dgain);
        grads.slot_mut(layout.final_bias).copy_from_slice(&dbias);
        let mut dx_cur = dx;
        for (li, (ls, lc)) in layout.layers.iter().zip(&cache.layers).enumerate().rev() {
            dx_cur = layer_backward(params, &mut grads, ls, lc, dx_cur, LayerDims { n, m, heads, dh, scale, cells }, {
                if li + 1 == cache.layers.len() {
                    upstream.cross.as_ref()
                } else {
                    None
                }
            });
        }
        super::tokens::embedding_backward(&dx_cur, s, &mut grads);
        Ok((grads, dx_cur))
    }
}

#[derive(Clone, Copy)]
struct LayerDims<T> {
    n: usize,
    m: usize,
    heads: usize,
    dh: usize,
    scale: T,
    cells: usize,
}

fn add_to_slot<T: Scalar>(grads: &mut RerankerParams<T>, slot: usize, src: &[T]) {
    for (d, &v) in grads.slot_mut(slot).iter_mut().zip(src) {
        *d = *d + v;
    }
}

fn layer_backward<T: Scalar>(
    params: &RerankerParams<T>,
    grads: &mut RerankerParams<T>,
    ls: &super::params::LayerSlots,
    lc: &LayerCache<T>,
    dx_out: Matrix<T>,
    dims: LayerDims<T>,
    cross: Option<&CrossAttentionMaps<T>>,
) -> Matrix<T> {
    let LayerDims { n, m, heads, dh, scale, cells } = dims;
    let mlp = lc.u.cols();

    // MLP branch.
    let mut tmp = vec![T::zero(); mlp * m];
    gemm_at(lc.g.as_slice(), dx_out.as_slice(), &mut tmp, n, mlp, m, false);
    add_to_slot(grads, ls.w2, &tmp);
    let mut db2 = vec![T::zero(); m];
    for r in 0..n {
        for (d, &v) in db2.iter_mut().zip(dx_out.row(r)) {
            *d = *d + v;
        }
    }
    add_to_slot(grads, ls.b2, &db2);
    let mut du = Matrix::zeros(n, mlp);
    gemm_bt(dx_out.as_slice(), params.slot(ls.w2), du.as_mut_slice(), n, m, mlp, false);
    for (d, &u) in du.as_mut_slice().iter_mut().zip(lc.u.as_slice()) {
        *d = *d * gelu_grad(u);
    }
    let mut tmp = vec![T::zero(); m * mlp];
    gemm_at(lc.h2.as_slice(), du.as_slice(), &mut tmp, n, m, mlp, false);
    add_to_slot(grads, ls.w1, &tmp);
    let mut db1 = vec![T::zero(); mlp];
    for r in 0..n {
        for (d, &v) in db1.iter_mut().zip(du.row(r)) {
            *d = *d + v;
        }
    }
    add_to_slot(grads, ls.b1, &db1);
    let mut dh2 = Matrix::zeros(n, m);
    gemm_bt(du.as_slice(), params.slot(ls.w1), dh2.as_mut_slice(), n, mlp, m, false);
    let mut dgain = vec![T::zero(); m];
    let mut dbias = vec![T::zero(); m];
    let mut dx_mid = layer_norm_backward(&dh2, &lc.ln2, params.slot(ls.ln2_gain), &mut dgain, &mut dbias);
    add_to_slot(grads, ls.ln2_gain, &dgain);
    add_to_slot(grads, ls.ln2_bias, &dbias);
    dx_mid.add_assign(&dx_out);

    // Attention branch.
    let mut tmp = vec![T::zero(); m * m];
    gemm_at(lc.attn.as_slice(), dx_mid.as_slice(), &mut tmp, n, m, m, false);
    add_to_slot(grads, ls.wo, &tmp);
    let mut dattn = Matrix::zeros(n, m);
    gemm_bt(dx_mid.as_slice(), params.slot(ls.wo), dattn.as_mut_slice(), n, m, m, false);
    let mut dq = Matrix::zeros(n, m);
    let mut dk = Matrix::zeros(n, m);
    let mut dv = Matrix::zeros(n, m);
    let (first, second) = (1, 2 + cells);
    for hd in 0..heads {
        let p = &lc.probs[hd];
        let doh = head_slice(&dattn, hd, dh);
        let (qh, kh, vh) = (head_slice(&lc.q, hd, dh), head_slice(&lc.k, hd, dh), head_slice(&lc.v, hd, dh));
        let mut dp = Matrix::zeros(n, n);
        gemm_bt(doh.as_slice(), vh.as_slice(), dp.as_mut_slice(), n, dh, n, false);
        let mut dvh = Matrix::zeros(n, dh);
        gemm_at(p.as_slice(), doh.as_slice(), dvh.as_mut_slice(), n, n, dh, false);
        // Softmax backward, then through the logit scaling.
        let mut ds = dp;
        for r in 0..n {
            let pr = p.row(r);
            let dr = ds.row_mut(r);
            let dotp = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
            for (d, &pv) in dr.iter_mut().zip(pr) {
                *d = scale * pv * (*d - dotp);
            }
        }
        if let Some(c) = cross {
            for i in 0..cells {
                for j in 0..cells {
                    let (r12, c12) = (first + i, second + j);
                    ds.set(r12, c12, ds.get(r12, c12) + c.a12[hd].get(i, j));
                    let (r21, c21) = (second + i, first + j);
                    ds.set(r21, c21, ds.get(r21, c21) + c.a21[hd].get(i, j));
                }
            }
        }
        let mut dqh = Matrix::zeros(n, dh);
        gemm(ds.as_slice(), kh.as_slice(), dqh.as_mut_slice(), n, n, dh, false);
        let mut dkh = Matrix::zeros(n, dh);
        gemm_at(ds.as_slice(), qh.as_slice(), dkh.as_mut_slice(), n, n, dh, false);
        head_scatter(&mut dq, &dqh, hd, dh);
        head_scatter(&mut dk, &dkh, hd, dh);
        head_scatter(&mut dv, &dvh, hd, dh);
    }
    let mut dhn = Matrix::zeros(n, m);
    for (slot, d) in [(ls.wq, &dq), (ls.wk, &dk), (ls.wv, &dv)] {
        let mut tmp = vec![T::zero(); m * m];
        gemm_at(lc.h.as_slice(), d.as_slice(), &mut tmp, n, m, m, false);
        add_to_slot(grads, slot, &tmp);
        gemm_bt(d.as_slice(), params.slot(slot), dhn.as_mut_slice(), n, m, m, true);
    }
    let mut dgain = vec![T::zero(); m];
    let mut dbias = vec![T::zero(); m];
    let mut dx_in = layer_norm_backward(&dhn, &lc.ln1, params.slot(ls.ln1_gain), &mut dgain, &mut dbias);
    add_to_slot(grads, ls.ln1_gain, &dgain);
    add_to_slot(grads, ls.ln1_bias, &dbias);
    dx_in.add_assign(&dx_mid);
    dx_in
}
