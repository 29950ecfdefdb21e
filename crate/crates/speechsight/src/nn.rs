//! Differentiable building blocks with hand-written backward passes.
//!
//! Every forward returns the output together with a cache of the
//! intermediates its backward needs. Backward functions take the cache and
//! the upstream gradient and return gradients for inputs and weights; no
//! graph is recorded anywhere.

use crate::tensor::{dot, Tensor, TensorError, TensorResult};

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logit function, inverse of [`sigmoid`] on (0, 1).
pub fn inverse_sigmoid(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Stable `ln(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Cache for [`linear_backward`].
pub struct LinearCache {
    x: Tensor,
}

pub struct LinearGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

/// `y = x wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> TensorResult<(Tensor, LinearCache)> {
    let n = x.rows();
    let out_dim = w.rows();
    let mut y = x.matmul(&w.transpose()?)?;
    for i in 0..n {
        let row = y.row_mut(i);
        for j in 0..out_dim {
            row[j] += b.data()[j];
        }
    }
    Ok((y, LinearCache { x: x.clone() }))
}

pub fn linear_backward(cache: &LinearCache, w: &Tensor, dy: &Tensor) -> TensorResult<LinearGrads> {
    let dx = dy.matmul(w)?;
    let dw = dy.transpose()?.matmul(&cache.x)?;
    let out_dim = w.rows();
    let mut db = Tensor::zeros(&[out_dim])?;
    for i in 0..dy.rows() {
        let row = dy.row(i);
        for j in 0..out_dim {
            db.data_mut()[j] += row[j];
        }
    }
    Ok(LinearGrads { dx, dw, db })
}

// ---------------------------------------------------------------------------
// GELU
// ---------------------------------------------------------------------------

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad_scalar(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// Elementwise GELU (tanh form, smooth everywhere).
pub fn gelu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = gelu_scalar(*v);
    }
    y
}

/// `dy ⊙ gelu'(x)` where `x` is the pre-activation input.
pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> TensorResult<Tensor> {
    if x.dims() != dy.dims() {
        return Err(TensorError::ShapeMismatch {
            op: "gelu_backward",
            left: x.dims().to_vec(),
            right: dy.dims().to_vec(),
        });
    }
    let mut dx = dy.clone();
    for (d, &u) in dx.data_mut().iter_mut().zip(x.data()) {
        *d *= gelu_grad_scalar(u);
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

pub struct LayerNormGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

/// Row-wise layer normalization with learned scale and shift.
pub fn layer_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> TensorResult<(Tensor, LayerNormCache)> {
    let (n, d) = (x.rows(), x.cols());
    let mut y = Tensor::zeros(&[n, d])?;
    let mut xhat = Tensor::zeros(&[n, d])?;
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mut mean = 0.0;
        for &v in row {
            mean += v;
        }
        mean /= d as f64;
        let mut var = 0.0;
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var /= d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            xhat.set2(i, j, xh);
            y.set2(i, j, gamma.data()[j] * xh + beta.data()[j]);
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    dy: &Tensor,
) -> TensorResult<LayerNormGrads> {
    let (n, d) = (dy.rows(), dy.cols());
    let mut dx = Tensor::zeros(&[n, d])?;
    let mut dgamma = Tensor::zeros(&[d])?;
    let mut dbeta = Tensor::zeros(&[d])?;
    for i in 0..n {
        let dy_row = dy.row(i);
        let xh_row = cache.xhat.row(i);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dy_row[j] * gamma.data()[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh_row[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let is = cache.inv_std[i];
        for j in 0..d {
            let dxh = dy_row[j] * gamma.data()[j];
            dx.set2(i, j, is * (dxh - mean_dxhat - xh_row[j] * mean_dxhat_xhat));
            dgamma.data_mut()[j] += dy_row[j] * xh_row[j];
            dbeta.data_mut()[j] += dy_row[j];
        }
    }
    Ok(LayerNormGrads { dx, dgamma, dbeta })
}

// ---------------------------------------------------------------------------
// Single-head attention
// ---------------------------------------------------------------------------

/// The four projection matrices of one attention sublayer, each `[d, d]`.
pub struct AttnWeights<'a> {
    pub wq: &'a Tensor,
    pub wk: &'a Tensor,
    pub wv: &'a Tensor,
    pub wo: &'a Tensor,
}

pub struct AttnCache {
    x: Tensor,
    mem: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Tensor,
    h: Tensor,
}

pub struct AttnGrads {
    pub dx: Tensor,
    pub dmem: Tensor,
    pub dwq: Tensor,
    pub dwk: Tensor,
    pub dwv: Tensor,
    pub dwo: Tensor,
}

/// Scaled dot-product attention of `x` over `mem`, single head.
///
/// `y = softmax(x wqᵀ (mem wkᵀ)ᵀ / √d) · (mem wvᵀ) · woᵀ`
pub fn attention_forward(
    x: &Tensor,
    mem: &Tensor,
    w: &AttnWeights,
) -> TensorResult<(Tensor, AttnCache)> {
    let d = x.cols();
    let q = x.matmul(&w.wq.transpose()?)?;
    let k = mem.matmul(&w.wk.transpose()?)?;
    let v = mem.matmul(&w.wv.transpose()?)?;
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (d as f64).sqrt());
    let attn = scores.softmax_rows()?;
    let h = attn.matmul(&v)?;
    let y = h.matmul(&w.wo.transpose()?)?;
    Ok((
        y,
        AttnCache {
            x: x.clone(),
            mem: mem.clone(),
            q,
            k,
            v,
            attn,
            h,
        },
    ))
}

/// Backward of the row-wise softmax: `ds = a ⊙ (da − (da·a))` per row.
pub fn softmax_rows_backward(a: &Tensor, da: &Tensor) -> TensorResult<Tensor> {
    let (n, c) = (a.rows(), a.cols());
    let mut ds = Tensor::zeros(&[n, c])?;
    for i in 0..n {
        let ar = a.row(i);
        let dar = da.row(i);
        let inner = dot(dar, ar);
        for j in 0..c {
            ds.set2(i, j, ar[j] * (dar[j] - inner));
        }
    }
    Ok(ds)
}

pub fn attention_backward(
    cache: &AttnCache,
    w: &AttnWeights,
    dy: &Tensor,
) -> TensorResult<AttnGrads> {
    let d = cache.x.cols();
    let scale = 1.0 / (d as f64).sqrt();

    let dh = dy.matmul(w.wo)?;
    let dwo = dy.transpose()?.matmul(&cache.h)?;

    let dattn = dh.matmul(&cache.v.transpose()?)?;
    let dv = cache.attn.transpose()?.matmul(&dh)?;

    let dscores = softmax_rows_backward(&cache.attn, &dattn)?;
    let dq = dscores.matmul(&cache.k)?.scale(scale);
    let dk = dscores.transpose()?.matmul(&cache.q)?.scale(scale);

    let dx = dq.matmul(w.wq)?;
    let dwq = dq.transpose()?.matmul(&cache.x)?;

    let mut dmem = dk.matmul(w.wk)?;
    let dwk = dk.transpose()?.matmul(&cache.mem)?;

    dmem.add_scaled(&dv.matmul(w.wv)?, 1.0)?;
    let dwv = dv.transpose()?.matmul(&cache.mem)?;

    Ok(AttnGrads {
        dx,
        dmem,
        dwq,
        dwk,
        dwv,
        dwo,
    })
}

// ---------------------------------------------------------------------------
// Feed-forward block
// ---------------------------------------------------------------------------

pub struct FfnCache {
    lin1: LinearCache,
    u: Tensor,
    lin2: LinearCache,
}

pub struct FfnGrads {
    pub dx: Tensor,
    pub dw1: Tensor,
    pub db1: Tensor,
    pub dw2: Tensor,
    pub db2: Tensor,
}

/// Two linear maps with a GELU between: `y = w2 · gelu(w1 x + b1) + b2`.
pub fn ffn_forward(
    x: &Tensor,
    w1: &Tensor,
    b1: &Tensor,
    w2: &Tensor,
    b2: &Tensor,
) -> TensorResult<(Tensor, FfnCache)> {
    let (u, lin1) = linear_forward(x, w1, b1)?;
    let h = gelu(&u);
    let (y, lin2) = linear_forward(&h, w2, b2)?;
    Ok((y, FfnCache { lin1, u, lin2 }))
}

pub fn ffn_backward(
    cache: &FfnCache,
    w1: &Tensor,
    w2: &Tensor,
    dy: &Tensor,
) -> TensorResult<FfnGrads> {
    let g2 = linear_backward(&cache.lin2, w2, dy)?;
    let du = gelu_backward(&cache.u, &g2.dx)?;
    let g1 = linear_backward(&cache.lin1, w1, &du)?;
    Ok(FfnGrads {
        dx: g1.dx,
        dw1: g1.dw,
        db1: g1.db,
        dw2: g2.dw,
        db2: g2.db,
    })
}
