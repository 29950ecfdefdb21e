//! Query-based aggregation of variable-length speech into a fixed token set.
//!
//! A bank of `K` learned query vectors attends over the `N_t` speech frames;
//! token `i` is the attention-weighted average of all frames under query `i`:
//!
//! `O_i = Σ_j softmax_j(q_i · x_j / √d) x_j`
//!
//! There are no projection matrices, positional terms, or residual paths:
//! the mechanism is pure content-based pooling, so the output is invariant
//! to any permutation of the input frames.

use std::fmt;

use crate::tensor::{dot, Tensor, TensorResult};

#[derive(Debug, Clone, PartialEq)]
pub enum QsaError {
    /// Query and frame embedding widths differ.
    DimMismatch { bank: usize, speech: usize },
    /// The speech sequence has no frames.
    EmptySpeech,
}

impl fmt::Display for QsaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QsaError::DimMismatch { bank, speech } => {
                write!(f, "query width {bank} does not match frame width {speech}")
            }
            QsaError::EmptySpeech => write!(f, "speech sequence has no frames"),
        }
    }
}

impl std::error::Error for QsaError {}

/// Learned aggregation queries, shape `[K, d]`.
#[derive(Debug, Clone)]
pub struct QueryBank {
    pub queries: Tensor,
}

impl QueryBank {
    pub fn new(queries: Tensor) -> QueryBank {
        QueryBank { queries }
    }

    pub fn count(&self) -> usize {
        self.queries.rows()
    }

    pub fn dim(&self) -> usize {
        self.queries.cols()
    }
}

/// One utterance as a `[N_t, d]` frame matrix.
#[derive(Debug, Clone)]
pub struct SpeechSequence {
    pub frames: Tensor,
}

impl SpeechSequence {
    pub fn new(frames: Tensor) -> SpeechSequence {
        SpeechSequence { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }
}

/// Fixed-size aggregation result, shape `[K, d]`.
#[derive(Debug, Clone)]
pub struct AggregatedTokens {
    pub tokens: Tensor,
}

/// Intermediates needed by [`qsa_backward`].
#[derive(Debug)]
pub struct QsaCache {
    queries: Tensor,
    frames: Tensor,
    attn: Tensor,
    tokens: Tensor,
}

impl QsaCache {
    /// Attention weights, shape `[K, N_t]`; every row sums to 1.
    pub fn attention(&self) -> &Tensor {
        &self.attn
    }
}

pub struct QsaGrads {
    pub dqueries: Tensor,
    pub dframes: Tensor,
}

/// Aggregates `speech` into one token per query.
pub fn qsa_forward(
    bank: &QueryBank,
    speech: &SpeechSequence,
) -> Result<(AggregatedTokens, QsaCache), QsaError> {
    let d = bank.dim();
    if speech.frames.rows() == 0 {
        return Err(QsaError::EmptySpeech);
    }
    if speech.frames.cols() != d {
        return Err(QsaError::DimMismatch {
            bank: d,
            speech: speech.frames.cols(),
        });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let scores = bank
        .queries
        .matmul(&speech.frames.transpose().expect("rank 2"))
        .expect("shapes checked")
        .scale(scale);
    let attn = scores.softmax_rows().expect("rank 2");
    let tokens = attn.matmul(&speech.frames).expect("shapes checked");
    Ok((
        AggregatedTokens {
            tokens: tokens.clone(),
        },
        QsaCache {
            queries: bank.queries.clone(),
            frames: speech.frames.clone(),
            attn,
            tokens,
        },
    ))
}

/// Gradients of a scalar loss w.r.t. queries and frames, given the gradient
/// w.r.t. the aggregated tokens.
pub fn qsa_backward(cache: &QsaCache, upstream: &Tensor) -> TensorResult<QsaGrads> {
    let k = cache.queries.rows();
    let d = cache.queries.cols();
    let n = cache.frames.rows();
    let scale = 1.0 / (d as f64).sqrt();

    let mut dqueries = Tensor::zeros(&[k, d])?;
    let mut dframes = Tensor::zeros(&[n, d])?;

    for i in 0..k {
        let g = upstream.row(i);
        let w = cache.attn.row(i);
        let q = cache.queries.row(i);
        // dL/dw_j and the softmax-backward inner product g·O_i.
        let g_dot_o = dot(g, cache.tokens.row(i));
        for j in 0..n {
            let x = cache.frames.row(j);
            let g_dot_x = dot(g, x);
            let dlogit = w[j] * (g_dot_x - g_dot_o);
            for c in 0..d {
                dqueries.data_mut()[i * d + c] += dlogit * x[c] * scale;
                dframes.data_mut()[j * d + c] += w[j] * g[c] + dlogit * q[c] * scale;
            }
        }
    }
    Ok(QsaGrads { dqueries, dframes })
}
