//! Mixture-of-LoRA-Experts plugin: a shared Top-1 router per layer, low-rank
//! expert deltas on both feed-forward linears, and the batch balance loss
//! that is the router's only training signal.

use std::fmt;

use serde::Serialize;

use crate::nn::{gelu, gelu_backward, softmax_rows_backward};
use crate::tensor::{Tensor, TensorError, TensorResult};

#[derive(Debug)]
pub enum MoleError {
    Tensor(TensorError),
    /// Expert-set sizes disagree with the router's row count.
    ExpertCount {
        gate_rows: usize,
        set1: usize,
        set2: usize,
    },
}

impl fmt::Display for MoleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MoleError::Tensor(e) => write!(f, "tensor shape error: {e}"),
            MoleError::ExpertCount {
                gate_rows,
                set1,
                set2,
            } => write!(
                f,
                "router has {gate_rows} rows but expert sets hold {set1} and {set2} experts"
            ),
        }
    }
}

impl std::error::Error for MoleError {}

impl From<TensorError> for MoleError {
    fn from(e: TensorError) -> MoleError {
        MoleError::Tensor(e)
    }
}

/// Top-1 routing of one token against gate weights `[K_e, d]`: the winning
/// expert (ties to the lowest index) and the softmax gate probabilities.
pub fn route(gate: &Tensor, q: &[f64]) -> (usize, Vec<f64>) {
    let k_e = gate.rows();
    assert!(k_e >= 1, "router needs at least one expert");
    assert_eq!(gate.cols(), q.len(), "router width mismatch");
    let mut scores = Vec::with_capacity(k_e);
    for j in 0..k_e {
        let row = gate.row(j);
        let mut s = 0.0;
        for (a, b) in row.iter().zip(q) {
            s += a * b;
        }
        scores.push(s);
    }
    let mut k_star = 0;
    for (j, &s) in scores.iter().enumerate() {
        if s > scores[k_star] {
            k_star = j;
        }
    }
    let max = scores[k_star];
    let mut probs: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= z;
    }
    (k_star, probs)
}

/// One low-rank expert: `A: [r, d_in]`, `B: [d_out, r]`, applied as
/// `(lora_alpha / r) · B (A x)`. `B` starts at zero when attached.
#[derive(Debug, Clone, Copy)]
pub struct LoraExpert<'a> {
    pub a: &'a Tensor,
    pub b: &'a Tensor,
    pub rank: usize,
    pub lora_alpha: f64,
}

impl<'a> LoraExpert<'a> {
    pub fn new(a: &'a Tensor, b: &'a Tensor, rank: usize, lora_alpha: f64) -> LoraExpert<'a> {
        LoraExpert {
            a,
            b,
            rank,
            lora_alpha,
        }
    }

    pub fn scale(&self) -> f64 {
        self.lora_alpha / self.rank as f64
    }
}

/// Row-batched expert delta for `x: [n, d_in]`.
pub fn expert_apply(e: &LoraExpert, x: &Tensor) -> TensorResult<Tensor> {
    let h = x.matmul(&e.a.transpose()?)?;
    let y = h.matmul(&e.b.transpose()?)?;
    Ok(y.scale(e.scale()))
}

/// Weights of one MoLE insertion: the shared router plus one expert set per
/// host linear. Set 1 feeds on the FFN input, set 2 on the GELU output.
pub struct MoleWeights<'a> {
    pub gate: &'a Tensor,
    pub experts1: Vec<LoraExpert<'a>>,
    pub experts2: Vec<LoraExpert<'a>>,
}

impl<'a> MoleWeights<'a> {
    pub fn expert_count(&self) -> usize {
        self.gate.rows()
    }

    fn validate(&self) -> Result<(), MoleError> {
        let k_e = self.gate.rows();
        if self.experts1.len() != k_e || self.experts2.len() != k_e || k_e == 0 {
            return Err(MoleError::ExpertCount {
                gate_rows: k_e,
                set1: self.experts1.len(),
                set2: self.experts2.len(),
            });
        }
        Ok(())
    }
}

/// Per-expert token counts and gate-probability sums for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingStats {
    counts: Vec<u64>,
    prob_sums: Vec<f64>,
    tokens: u64,
}

/// Snapshot of [`RoutingStats`] in exportable form.
#[derive(Debug, Clone, Serialize)]
pub struct RoutingSummary {
    pub tokens: u64,
    pub counts: Vec<u64>,
    pub fractions: Vec<f64>,
    pub mean_gate_probs: Vec<f64>,
}

impl RoutingStats {
    pub fn new(k_e: usize) -> RoutingStats {
        RoutingStats {
            counts: vec![0; k_e],
            prob_sums: vec![0.0; k_e],
            tokens: 0,
        }
    }

    pub fn record(&mut self, k_star: usize, probs: &[f64]) {
        self.counts[k_star] += 1;
        for (s, &p) in self.prob_sums.iter_mut().zip(probs) {
            *s += p;
        }
        self.tokens += 1;
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.prob_sums.iter_mut().for_each(|s| *s = 0.0);
        self.tokens = 0;
    }

    pub fn merge(&mut self, other: &RoutingStats) {
        for (c, &o) in self.counts.iter_mut().zip(&other.counts) {
            *c += o;
        }
        for (s, &o) in self.prob_sums.iter_mut().zip(&other.prob_sums) {
            *s += o;
        }
        self.tokens += other.tokens;
    }

    pub fn tokens(&self) -> u64 {
        self.tokens
    }

    pub fn expert_count(&self) -> usize {
        self.counts.len()
    }

    /// Token fraction per expert; all zero before any token is routed.
    pub fn fractions(&self) -> Vec<f64> {
        if self.tokens == 0 {
            return vec![0.0; self.counts.len()];
        }
        let t = self.tokens as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }

    /// Mean gate probability per expert over all routed tokens.
    pub fn mean_probs(&self) -> Vec<f64> {
        if self.tokens == 0 {
            return vec![0.0; self.prob_sums.len()];
        }
        let t = self.tokens as f64;
        self.prob_sums.iter().map(|&s| s / t).collect()
    }

    pub fn summary(&self) -> RoutingSummary {
        RoutingSummary {
            tokens: self.tokens,
            counts: self.counts.clone(),
            fractions: self.fractions(),
            mean_gate_probs: self.mean_probs(),
        }
    }
}

/// Batch balance objective `K_e · Σ_j f_j · P_j`; 1 at uniform routing,
/// `K_e` at full collapse, 0 for an empty batch.
pub fn load_balance_loss(stats: &RoutingStats) -> f64 {
    if stats.tokens == 0 {
        return 0.0;
    }
    let k_e = stats.expert_count() as f64;
    let f = stats.fractions();
    let p = stats.mean_probs();
    let mut acc = 0.0;
    for (fj, pj) in f.iter().zip(&p) {
        acc += fj * pj;
    }
    k_e * acc
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = vec![0.0; rows];
    for i in 0..rows {
        let row = m.row(i);
        let mut s = 0.0;
        for j in 0..cols {
            s += row[j] * v[j];
        }
        out[i] = s;
    }
    out
}

fn matvec_t(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        let row = m.row(i);
        for j in 0..cols {
            out[j] += row[j] * v[i];
        }
    }
    out
}

fn outer_add(acc: &mut Tensor, scale: f64, u: &[f64], v: &[f64]) {
    for (i, &ui) in u.iter().enumerate() {
        let row = acc.row_mut(i);
        for (j, &vj) in v.iter().enumerate() {
            row[j] += scale * ui * vj;
        }
    }
}

pub struct MoleFfnCache {
    k_star: Vec<usize>,
    probs: Tensor,
    x: Tensor,
    u: Tensor,
    g: Tensor,
}

impl MoleFfnCache {
    /// Routed tokens, one row per input row.
    pub fn tokens(&self) -> &Tensor {
        &self.x
    }

    /// Gate probabilities `[n, K_e]` cached for the balance backward pass.
    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn selected(&self) -> &[usize] {
        &self.k_star
    }
}

/// Host FFN with the selected expert's delta added to each linear's output:
/// `y = w2 · gelu(w1 x + b1 + E1(x)) + b2 + E2(gelu(..))`, experts chosen
/// per row by the shared router on the FFN input.
pub fn mole_ffn_forward(
    x: &Tensor,
    w1: &Tensor,
    b1: &Tensor,
    w2: &Tensor,
    b2: &Tensor,
    mw: &MoleWeights,
    mut stats: Option<&mut RoutingStats>,
) -> Result<(Tensor, MoleFfnCache), MoleError> {
    mw.validate()?;
    let n = x.rows();
    let k_e = mw.expert_count();

    let mut k_star = Vec::with_capacity(n);
    let mut probs = Tensor::zeros(&[n, k_e])?;
    for t in 0..n {
        let (k, p) = route(mw.gate, x.row(t));
        if let Some(s) = stats.as_deref_mut() {
            s.record(k, &p);
        }
        for (j, &pj) in p.iter().enumerate() {
            probs.set2(t, j, pj);
        }
        k_star.push(k);
    }

    let mut u = x.matmul(&w1.transpose()?)?;
    for t in 0..n {
        let e = &mw.experts1[k_star[t]];
        let ax = matvec(e.a, x.row(t));
        let delta = matvec(e.b, &ax);
        let s = e.scale();
        let row = u.row_mut(t);
        for (j, v) in row.iter_mut().enumerate() {
            *v += b1.data()[j] + s * delta[j];
        }
    }

    let g = gelu(&u);

    let mut y = g.matmul(&w2.transpose()?)?;
    for t in 0..n {
        let e = &mw.experts2[k_star[t]];
        let ag = matvec(e.a, g.row(t));
        let delta = matvec(e.b, &ag);
        let s = e.scale();
        let row = y.row_mut(t);
        for (j, v) in row.iter_mut().enumerate() {
            *v += b2.data()[j] + s * delta[j];
        }
    }

    Ok((
        y,
        MoleFfnCache {
            k_star,
            probs,
            x: x.clone(),
            u,
            g,
        },
    ))
}

pub struct ExpertGrads {
    pub da: Tensor,
    pub db: Tensor,
}

pub struct MoleFfnGrads {
    pub dx: Tensor,
    pub dw1: Tensor,
    pub db1: Tensor,
    pub dw2: Tensor,
    pub db2: Tensor,
    pub experts1: Vec<ExpertGrads>,
    pub experts2: Vec<ExpertGrads>,
}

/// Gradients of [`mole_ffn_forward`]. Only each row's selected expert
/// receives gradient; the router receives none on this path.
pub fn mole_ffn_backward(
    cache: &MoleFfnCache,
    w1: &Tensor,
    w2: &Tensor,
    mw: &MoleWeights,
    dy: &Tensor,
) -> Result<MoleFfnGrads, MoleError> {
    mw.validate()?;
    let n = cache.x.rows();
    let mut experts1: Vec<ExpertGrads> = mw
        .experts1
        .iter()
        .map(|e| {
            Ok(ExpertGrads {
                da: Tensor::zeros(e.a.dims())?,
                db: Tensor::zeros(e.b.dims())?,
            })
        })
        .collect::<TensorResult<_>>()?;
    let mut experts2: Vec<ExpertGrads> = mw
        .experts2
        .iter()
        .map(|e| {
            Ok(ExpertGrads {
                da: Tensor::zeros(e.a.dims())?,
                db: Tensor::zeros(e.b.dims())?,
            })
        })
        .collect::<TensorResult<_>>()?;

    let dw2 = dy.transpose()?.matmul(&cache.g)?;
    let mut db2 = Tensor::zeros(&[w2.rows()])?;
    for t in 0..n {
        for (j, &v) in dy.row(t).iter().enumerate() {
            db2.data_mut()[j] += v;
        }
    }

    let mut dg = dy.matmul(w2)?;
    for t in 0..n {
        let k = cache.k_star[t];
        let e = &mw.experts2[k];
        let s = e.scale();
        let ag = matvec(e.a, cache.g.row(t));
        let bt_dy = matvec_t(e.b, dy.row(t));
        outer_add(&mut experts2[k].db, s, dy.row(t), &ag);
        outer_add(&mut experts2[k].da, s, &bt_dy, cache.g.row(t));
        let extra = matvec_t(e.a, &bt_dy);
        let row = dg.row_mut(t);
        for (j, v) in row.iter_mut().enumerate() {
            *v += s * extra[j];
        }
    }

    let du = gelu_backward(&cache.u, &dg)?;

    let dw1 = du.transpose()?.matmul(&cache.x)?;
    let mut db1 = Tensor::zeros(&[w1.rows()])?;
    for t in 0..n {
        for (j, &v) in du.row(t).iter().enumerate() {
            db1.data_mut()[j] += v;
        }
    }

    let mut dx = du.matmul(w1)?;
    for t in 0..n {
        let k = cache.k_star[t];
        let e = &mw.experts1[k];
        let s = e.scale();
        let ax = matvec(e.a, cache.x.row(t));
        let bt_du = matvec_t(e.b, du.row(t));
        outer_add(&mut experts1[k].db, s, du.row(t), &ax);
        outer_add(&mut experts1[k].da, s, &bt_du, cache.x.row(t));
        let extra = matvec_t(e.a, &bt_du);
        let row = dx.row_mut(t);
        for (j, v) in row.iter_mut().enumerate() {
            *v += s * extra[j];
        }
    }

    Ok(MoleFfnGrads {
        dx,
        dw1,
        db1,
        dw2,
        db2,
        experts1,
        experts2,
    })
}

pub struct BalanceGrads {
    pub dgate: Tensor,
    pub dtokens: Tensor,
}

/// Gradient of `scale · load_balance_loss` through the gate probabilities
/// of one routed chunk. `fractions` and `total_tokens` describe the whole
/// batch; the per-expert counts are piecewise constant and held fixed.
pub fn balance_backward(
    gate: &Tensor,
    tokens: &Tensor,
    probs: &Tensor,
    fractions: &[f64],
    total_tokens: f64,
    scale: f64,
) -> TensorResult<BalanceGrads> {
    let n = tokens.rows();
    let k_e = gate.rows();
    if total_tokens <= 0.0 || n == 0 {
        return Ok(BalanceGrads {
            dgate: Tensor::zeros(gate.dims())?,
            dtokens: Tensor::zeros(tokens.dims())?,
        });
    }
    let mut dp = Tensor::zeros(&[n, k_e])?;
    for t in 0..n {
        let row = dp.row_mut(t);
        for (j, v) in row.iter_mut().enumerate() {
            *v = scale * k_e as f64 * fractions[j] / total_tokens;
        }
    }
    let ds = softmax_rows_backward(probs, &dp)?;
    let dgate = ds.transpose()?.matmul(tokens)?;
    let dtokens = ds.matmul(gate)?;
    Ok(BalanceGrads { dgate, dtokens })
}
