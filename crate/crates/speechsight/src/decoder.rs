//! Cross-modality decoder: stacked query refinement layers attending to
//! visual and speech memories, with box and alignment heads on the final
//! queries.

use std::fmt;

use crate::fusion::{FfnWeights, LnWeights, LN_EPS};
use crate::loss::Detection;
use crate::matching::CenterBox;
use crate::mole::{
    mole_ffn_backward, mole_ffn_forward, MoleError, MoleFfnCache, MoleFfnGrads, MoleWeights,
    RoutingStats,
};
use crate::nn::{
    attention_backward, attention_forward, ffn_backward, ffn_forward, inverse_sigmoid,
    layer_norm_backward, layer_norm_forward, linear_backward, linear_forward, sigmoid, AttnCache,
    AttnGrads, AttnWeights, FfnCache, FfnGrads, LayerNormCache, LayerNormGrads, LinearCache,
};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug)]
pub enum DecoderError {
    Tensor(TensorError),
    Mole(MoleError),
    /// One reference box is required per query row.
    ReferenceCount {
        queries: usize,
        references: usize,
    },
}

impl fmt::Display for DecoderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecoderError::Tensor(e) => write!(f, "tensor shape error: {e}"),
            DecoderError::Mole(e) => write!(f, "expert layer error: {e}"),
            DecoderError::ReferenceCount {
                queries,
                references,
            } => write!(f, "{queries} queries but {references} reference boxes"),
        }
    }
}

impl std::error::Error for DecoderError {}

impl From<TensorError> for DecoderError {
    fn from(e: TensorError) -> DecoderError {
        DecoderError::Tensor(e)
    }
}

impl From<MoleError> for DecoderError {
    fn from(e: MoleError) -> DecoderError {
        DecoderError::Mole(e)
    }
}

// ---------------------------------------------------------------------------
// Decoder layer
// ---------------------------------------------------------------------------

/// One refinement layer: query self-attention, visual cross-attention,
/// speech cross-attention, then the feed-forward block, each as a
/// pre-normalized residual. With `mole` attached the feed-forward output
/// gains the routed expert update.
pub struct DecoderLayerWeights<'a> {
    pub ln_self: LnWeights<'a>,
    pub attn_self: AttnWeights<'a>,
    pub ln_visual: LnWeights<'a>,
    pub attn_visual: AttnWeights<'a>,
    pub ln_speech: LnWeights<'a>,
    pub attn_speech: AttnWeights<'a>,
    pub ln_ffn: LnWeights<'a>,
    pub ffn: FfnWeights<'a>,
    pub mole: Option<MoleWeights<'a>>,
}

enum FfnPathCache {
    Plain(FfnCache),
    Mole(MoleFfnCache),
}

pub struct DecoderLayerCache {
    ln_self: LayerNormCache,
    attn_self: AttnCache,
    ln_visual: LayerNormCache,
    attn_visual: AttnCache,
    ln_speech: LayerNormCache,
    attn_speech: AttnCache,
    ln_ffn: LayerNormCache,
    ffn: FfnPathCache,
}

pub enum FfnPathGrads {
    Plain(FfnGrads),
    Mole(MoleFfnGrads),
}

pub struct DecoderLayerGrads {
    pub dq: Tensor,
    pub ln_self: LayerNormGrads,
    pub attn_self: AttnGrads,
    pub ln_visual: LayerNormGrads,
    pub attn_visual: AttnGrads,
    pub ln_speech: LayerNormGrads,
    pub attn_speech: AttnGrads,
    pub ln_ffn: LayerNormGrads,
    pub ffn: FfnPathGrads,
}

pub fn decoder_layer_forward(
    q: &Tensor,
    visual: &Tensor,
    speech: &Tensor,
    w: &DecoderLayerWeights,
    stats: Option<&mut RoutingStats>,
) -> Result<(Tensor, DecoderLayerCache), DecoderError> {
    let (x1, ln_self) = layer_norm_forward(q, w.ln_self.gamma, w.ln_self.beta, LN_EPS)?;
    let (y1, attn_self) = attention_forward(&x1, &x1, &w.attn_self)?;
    let q1 = q.add(&y1)?;

    let (x2, ln_visual) = layer_norm_forward(&q1, w.ln_visual.gamma, w.ln_visual.beta, LN_EPS)?;
    let (y2, attn_visual) = attention_forward(&x2, visual, &w.attn_visual)?;
    let q2 = q1.add(&y2)?;

    let (x3, ln_speech) = layer_norm_forward(&q2, w.ln_speech.gamma, w.ln_speech.beta, LN_EPS)?;
    let (y3, attn_speech) = attention_forward(&x3, speech, &w.attn_speech)?;
    let q3 = q2.add(&y3)?;

    let (x4, ln_ffn) = layer_norm_forward(&q3, w.ln_ffn.gamma, w.ln_ffn.beta, LN_EPS)?;
    let (y4, ffn) = match &w.mole {
        None => {
            let (y, c) = ffn_forward(&x4, w.ffn.w1, w.ffn.b1, w.ffn.w2, w.ffn.b2)?;
            (y, FfnPathCache::Plain(c))
        }
        Some(mw) => {
            let (y, c) =
                mole_ffn_forward(&x4, w.ffn.w1, w.ffn.b1, w.ffn.w2, w.ffn.b2, mw, stats)?;
            (y, FfnPathCache::Mole(c))
        }
    };
    let q4 = q3.add(&y4)?;

    Ok((
        q4,
        DecoderLayerCache {
            ln_self,
            attn_self,
            ln_visual,
            attn_visual,
            ln_speech,
            attn_speech,
            ln_ffn,
            ffn,
        },
    ))
}

pub fn decoder_layer_backward(
    cache: &DecoderLayerCache,
    w: &DecoderLayerWeights,
    dq_out: &Tensor,
) -> Result<DecoderLayerGrads, DecoderError> {
    let ffn = match (&cache.ffn, &w.mole) {
        (FfnPathCache::Plain(c), None) => {
            FfnPathGrads::Plain(ffn_backward(c, w.ffn.w1, w.ffn.w2, dq_out)?)
        }
        (FfnPathCache::Mole(c), Some(mw)) => {
            FfnPathGrads::Mole(mole_ffn_backward(c, w.ffn.w1, w.ffn.w2, mw, dq_out)?)
        }
        _ => panic!("cache and weights disagree on expert attachment"),
    };
    let du4 = match &ffn {
        FfnPathGrads::Plain(g) => &g.dx,
        FfnPathGrads::Mole(g) => &g.dx,
    };
    let ln_ffn = layer_norm_backward(&cache.ln_ffn, w.ln_ffn.gamma, du4)?;
    let dq3 = dq_out.add(&ln_ffn.dx)?;

    let attn_speech = attention_backward(&cache.attn_speech, &w.attn_speech, &dq3)?;
    let ln_speech = layer_norm_backward(&cache.ln_speech, w.ln_speech.gamma, &attn_speech.dx)?;
    let dq2 = dq3.add(&ln_speech.dx)?;

    let attn_visual = attention_backward(&cache.attn_visual, &w.attn_visual, &dq2)?;
    let ln_visual = layer_norm_backward(&cache.ln_visual, w.ln_visual.gamma, &attn_visual.dx)?;
    let dq1 = dq2.add(&ln_visual.dx)?;

    let attn_self = attention_backward(&cache.attn_self, &w.attn_self, &dq1)?;
    // Self-attention reads the normalized queries as both sides.
    let dx_both = attn_self.dx.add(&attn_self.dmem)?;
    let ln_self = layer_norm_backward(&cache.ln_self, w.ln_self.gamma, &dx_both)?;
    let dq = dq1.add(&ln_self.dx)?;

    Ok(DecoderLayerGrads {
        dq,
        ln_self,
        attn_self,
        ln_visual,
        attn_visual,
        ln_speech,
        attn_speech,
        ln_ffn,
        ffn,
    })
}

// ---------------------------------------------------------------------------
// Prediction heads
// ---------------------------------------------------------------------------

/// Box offset head on the final queries. Alignment logits need no weights;
/// they are raw dot products against the speech tokens.
pub struct HeadWeights<'a> {
    /// `[4, d]` offset projection, zero at initialization.
    pub w_box: &'a Tensor,
    /// `[4]` offset bias.
    pub b_box: &'a Tensor,
}

pub struct HeadCache {
    lin: LinearCache,
    q_final: Tensor,
    speech: Tensor,
    boxes: Vec<[f64; 4]>,
    offsets: Tensor,
}

pub struct HeadGrads {
    pub dq: Tensor,
    pub dspeech: Tensor,
    pub dw_box: Tensor,
    pub db_box: Tensor,
}

/// Applies offsets to reference boxes in inverse-sigmoid space and scores
/// each query against every speech token.
///
/// A coordinate with offset exactly 0.0 keeps its reference value bitwise,
/// so a zero-initialized head starts from the references.
pub fn heads_forward(
    q_final: &Tensor,
    refs: &[[f64; 4]],
    speech: &Tensor,
    w: &HeadWeights,
) -> Result<(Vec<Detection>, HeadCache), DecoderError> {
    let n = q_final.rows();
    if refs.len() != n {
        return Err(DecoderError::ReferenceCount {
            queries: n,
            references: refs.len(),
        });
    }
    let (offsets, lin) = linear_forward(q_final, w.w_box, w.b_box)?;
    let mut boxes = Vec::with_capacity(n);
    for (i, r) in refs.iter().enumerate() {
        let mut b = [0.0; 4];
        for c in 0..4 {
            let off = offsets.get2(i, c);
            b[c] = if off == 0.0 {
                r[c]
            } else {
                sigmoid(inverse_sigmoid(r[c]) + off)
            };
        }
        boxes.push(b);
    }
    let logits = q_final.matmul(&speech.transpose()?)?;
    let detections = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| Detection {
            bbox: CenterBox::new(b[0], b[1], b[2], b[3]),
            logits: logits.row(i).to_vec(),
        })
        .collect();
    Ok((
        detections,
        HeadCache {
            lin,
            q_final: q_final.clone(),
            speech: speech.clone(),
            boxes,
            offsets,
        },
    ))
}

pub fn heads_backward(
    cache: &HeadCache,
    w: &HeadWeights,
    dboxes: &[[f64; 4]],
    dlogits: &Tensor,
) -> Result<HeadGrads, DecoderError> {
    let n = cache.q_final.rows();
    let mut doffsets = Tensor::zeros(cache.offsets.dims())?;
    for i in 0..n {
        for c in 0..4 {
            let b = cache.boxes[i][c];
            doffsets.set2(i, c, dboxes[i][c] * b * (1.0 - b));
        }
    }
    let lin = linear_backward(&cache.lin, w.w_box, &doffsets)?;
    let dq = lin.dx.add(&dlogits.matmul(&cache.speech)?)?;
    let dspeech = dlogits.transpose()?.matmul(&cache.q_final)?;
    Ok(HeadGrads {
        dq,
        dspeech,
        dw_box: lin.dw,
        db_box: lin.db,
    })
}

// ---------------------------------------------------------------------------
// Full decoder stack
// ---------------------------------------------------------------------------

pub struct DecoderCache {
    layers: Vec<DecoderLayerCache>,
    head: HeadCache,
    visual_dims: Vec<usize>,
}

impl DecoderCache {
    /// Per-layer routed-token caches, `None` for layers without experts.
    pub fn mole_caches(&self) -> Vec<Option<&MoleFfnCache>> {
        self.layers
            .iter()
            .map(|c| match &c.ffn {
                FfnPathCache::Mole(m) => Some(m),
                FfnPathCache::Plain(_) => None,
            })
            .collect()
    }
}

pub struct DecoderGrads {
    pub dq: Tensor,
    pub dvisual: Tensor,
    pub dspeech: Tensor,
    pub layers: Vec<DecoderLayerGrads>,
    pub head: HeadGrads,
}

/// Runs the layer stack left to right, then the heads on the final queries.
///
/// When routing statistics are requested the slice must hold one collector
/// per layer; layers without an attached expert set record nothing.
pub fn decoder_forward(
    q: &Tensor,
    refs: &[[f64; 4]],
    visual: &Tensor,
    speech: &Tensor,
    layers: &[DecoderLayerWeights],
    head: &HeadWeights,
    mut stats: Option<&mut [RoutingStats]>,
) -> Result<(Vec<Detection>, DecoderCache), DecoderError> {
    if let Some(s) = stats.as_deref() {
        assert_eq!(s.len(), layers.len(), "one stats collector per layer");
    }
    let mut cur = q.clone();
    let mut caches = Vec::with_capacity(layers.len());
    for (li, w) in layers.iter().enumerate() {
        let layer_stats = stats.as_deref_mut().map(|s| &mut s[li]);
        let (next, cache) = decoder_layer_forward(&cur, visual, speech, w, layer_stats)?;
        caches.push(cache);
        cur = next;
    }
    let (detections, head_cache) = heads_forward(&cur, refs, speech, head)?;
    Ok((
        detections,
        DecoderCache {
            layers: caches,
            head: head_cache,
            visual_dims: visual.dims().to_vec(),
        },
    ))
}

/// Pulls loss gradients on boxes and logits back to the input queries, both
/// memories, and every layer weight. Memory gradients accumulate across
/// layers; `dq` is the gradient on the selected query embeddings.
pub fn decoder_backward(
    cache: &DecoderCache,
    layers: &[DecoderLayerWeights],
    head: &HeadWeights,
    dboxes: &[[f64; 4]],
    dlogits: &Tensor,
) -> Result<DecoderGrads, DecoderError> {
    let head_grads = heads_backward(&cache.head, head, dboxes, dlogits)?;
    let mut dq = head_grads.dq.clone();
    let mut dvisual = Tensor::zeros(&cache.visual_dims)?;
    let mut dspeech = head_grads.dspeech.clone();
    let mut rev = Vec::with_capacity(layers.len());
    for (w, c) in layers.iter().zip(&cache.layers).rev() {
        let g = decoder_layer_backward(c, w, &dq)?;
        dvisual = dvisual.add(&g.attn_visual.dmem)?;
        dspeech = dspeech.add(&g.attn_speech.dmem)?;
        dq = g.dq.clone();
        rev.push(g);
    }
    rev.reverse();
    Ok(DecoderGrads {
        dq,
        dvisual,
        dspeech,
        layers: rev,
        head: head_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use crate::mole::LoraExpert;
    use crate::params::ParamStore;
    use crate::tensor::dot;
    use crate::test_util::{randn, rng};
    use rand_chacha::ChaCha8Rng;

    fn ones(d: usize) -> Tensor {
        let mut t = Tensor::zeros(&[d]).unwrap();
        t.fill(1.0);
        t
    }

    struct LayerStore {
        ps: ParamStore,
        with_mole: bool,
    }

    const LN_NAMES: [&str; 4] = ["ln_self", "ln_visual", "ln_speech", "ln_ffn"];
    const ATTN_NAMES: [&str; 3] = ["attn_self", "attn_visual", "attn_speech"];

    impl LayerStore {
        fn random(r: &mut ChaCha8Rng, d: usize, d_ffn: usize, zero: bool) -> LayerStore {
            let mut ps = ParamStore::new();
            let std = if zero { 0.0 } else { 0.4 };
            for name in LN_NAMES {
                ps.insert(&format!("{name}.gamma"), ones(d), true).unwrap();
                ps.insert(&format!("{name}.beta"), Tensor::zeros(&[d]).unwrap(), true)
                    .unwrap();
            }
            for name in ATTN_NAMES {
                for proj in ["wq", "wk", "wv", "wo"] {
                    ps.insert(&format!("{name}.{proj}"), randn(r, &[d, d], std), true)
                        .unwrap();
                }
            }
            ps.insert("ffn.w1", randn(r, &[d_ffn, d], std), true).unwrap();
            ps.insert("ffn.b1", randn(r, &[d_ffn], std), true).unwrap();
            ps.insert("ffn.w2", randn(r, &[d, d_ffn], std), true).unwrap();
            ps.insert("ffn.b2", randn(r, &[d], std), true).unwrap();
            ps.insert("head.w_box", randn(r, &[4, d], std), true).unwrap();
            ps.insert("head.b_box", randn(r, &[4], std), true).unwrap();
            LayerStore {
                ps,
                with_mole: false,
            }
        }

        fn attach_mole(&mut self, r: &mut ChaCha8Rng, d: usize, d_ffn: usize, k_e: usize) {
            let rank = 2;
            self.ps
                .insert("mole.gate", randn(r, &[k_e, d], 0.4), false)
                .unwrap();
            for j in 0..k_e {
                self.ps
                    .insert(&format!("mole.e1.{j}.a"), randn(r, &[rank, d], 0.4), true)
                    .unwrap();
                self.ps
                    .insert(&format!("mole.e1.{j}.b"), randn(r, &[d_ffn, rank], 0.4), true)
                    .unwrap();
                self.ps
                    .insert(&format!("mole.e2.{j}.a"), randn(r, &[rank, d_ffn], 0.4), true)
                    .unwrap();
                self.ps
                    .insert(&format!("mole.e2.{j}.b"), randn(r, &[d, rank], 0.4), true)
                    .unwrap();
            }
            self.with_mole = true;
        }

        fn layer(&self) -> DecoderLayerWeights<'_> {
            layer_weights(&self.ps, self.with_mole)
        }

        fn head(&self) -> HeadWeights<'_> {
            head_weights(&self.ps)
        }
    }

    fn layer_weights(ps: &ParamStore, with_mole: bool) -> DecoderLayerWeights<'_> {
        let g = |n: &str| ps.value(n).unwrap();
        let mole = if with_mole {
            let k_e = g("mole.gate").rows();
            let rank = g("mole.e1.0.a").rows();
            let experts = |set: &str| {
                (0..k_e)
                    .map(|j| {
                        LoraExpert::new(
                            g(&format!("mole.{set}.{j}.a")),
                            g(&format!("mole.{set}.{j}.b")),
                            rank,
                            rank as f64,
                        )
                    })
                    .collect()
            };
            Some(MoleWeights {
                gate: g("mole.gate"),
                experts1: experts("e1"),
                experts2: experts("e2"),
            })
        } else {
            None
        };
        DecoderLayerWeights {
            ln_self: LnWeights {
                gamma: g("ln_self.gamma"),
                beta: g("ln_self.beta"),
            },
            attn_self: AttnWeights {
                wq: g("attn_self.wq"),
                wk: g("attn_self.wk"),
                wv: g("attn_self.wv"),
                wo: g("attn_self.wo"),
            },
            ln_visual: LnWeights {
                gamma: g("ln_visual.gamma"),
                beta: g("ln_visual.beta"),
            },
            attn_visual: AttnWeights {
                wq: g("attn_visual.wq"),
                wk: g("attn_visual.wk"),
                wv: g("attn_visual.wv"),
                wo: g("attn_visual.wo"),
            },
            ln_speech: LnWeights {
                gamma: g("ln_speech.gamma"),
                beta: g("ln_speech.beta"),
            },
            attn_speech: AttnWeights {
                wq: g("attn_speech.wq"),
                wk: g("attn_speech.wk"),
                wv: g("attn_speech.wv"),
                wo: g("attn_speech.wo"),
            },
            ln_ffn: LnWeights {
                gamma: g("ln_ffn.gamma"),
                beta: g("ln_ffn.beta"),
            },
            ffn: FfnWeights {
                w1: g("ffn.w1"),
                b1: g("ffn.b1"),
                w2: g("ffn.w2"),
                b2: g("ffn.b2"),
            },
            mole,
        }
    }

    fn head_weights(ps: &ParamStore) -> HeadWeights<'_> {
        HeadWeights {
            w_box: ps.value("head.w_box").unwrap(),
            b_box: ps.value("head.b_box").unwrap(),
        }
    }

    fn fixed_refs(n: usize) -> Vec<[f64; 4]> {
        (0..n)
            .map(|i| [0.1 + 0.07 * i as f64, 0.4, 0.1, 0.1])
            .collect()
    }

    #[test]
    fn zero_weights_leave_boxes_at_references_and_logits_raw() {
        let mut r = rng(50);
        let (d, n_q, p, k) = (6, 4, 9, 3);
        let store = LayerStore::random(&mut r, d, 10, true);
        let q = randn(&mut r, &[n_q, d], 1.0);
        let visual = randn(&mut r, &[p, d], 1.0);
        let speech = randn(&mut r, &[k, d], 1.0);
        let refs = fixed_refs(n_q);
        let layers = [store.layer(), store.layer(), store.layer()];
        let (dets, _) =
            decoder_forward(&q, &refs, &visual, &speech, &layers, &store.head(), None).unwrap();
        for (i, det) in dets.iter().enumerate() {
            assert_eq!(
                [det.bbox.cx, det.bbox.cy, det.bbox.w, det.bbox.h],
                refs[i]
            );
            for (j, &logit) in det.logits.iter().enumerate() {
                assert_eq!(logit, dot(q.row(i), speech.row(j)));
            }
        }
    }

    #[test]
    fn zero_offset_coordinates_keep_reference_bitwise() {
        let mut r = rng(51);
        let d = 4;
        let q = randn(&mut r, &[2, d], 1.0);
        let speech = randn(&mut r, &[2, d], 1.0);
        // First output coordinate has a zero weight row and zero bias, the
        // rest are nonzero.
        let mut w_box = randn(&mut r, &[4, d], 0.5);
        for j in 0..d {
            w_box.set2(0, j, 0.0);
        }
        let b_box = Tensor::zeros(&[4]).unwrap();
        let refs = fixed_refs(2);
        let head = HeadWeights {
            w_box: &w_box,
            b_box: &b_box,
        };
        let (dets, _) = heads_forward(&q, &refs, &speech, &head).unwrap();
        for (i, det) in dets.iter().enumerate() {
            assert_eq!(det.bbox.cx, refs[i][0]);
            assert!(det.bbox.cy != refs[i][1]);
            assert!(det.bbox.cy > 0.0 && det.bbox.cy < 1.0);
        }
    }

    #[test]
    fn attached_zero_b_experts_change_nothing() {
        let mut r = rng(52);
        let (d, d_ffn, n_q, p, k) = (5, 8, 3, 6, 2);
        let mut store = LayerStore::random(&mut r, d, d_ffn, false);
        let q = randn(&mut r, &[n_q, d], 1.0);
        let visual = randn(&mut r, &[p, d], 1.0);
        let speech = randn(&mut r, &[k, d], 1.0);
        let refs = fixed_refs(n_q);
        let (plain, _) =
            decoder_forward(&q, &refs, &visual, &speech, &[store.layer()], &store.head(), None)
                .unwrap();

        store.attach_mole(&mut r, d, d_ffn, 2);
        for j in 0..2 {
            for set in ["e1", "e2"] {
                let name = format!("mole.{set}.{j}.b");
                store.ps.get_mut(&name).unwrap().value.fill(0.0);
            }
        }
        let (routed, _) =
            decoder_forward(&q, &refs, &visual, &speech, &[store.layer()], &store.head(), None)
                .unwrap();
        for (a, b) in plain.iter().zip(&routed) {
            assert_eq!(a.bbox.cx, b.bbox.cx);
            assert_eq!(a.bbox.cy, b.bbox.cy);
            assert_eq!(a.bbox.w, b.bbox.w);
            assert_eq!(a.bbox.h, b.bbox.h);
            assert_eq!(a.logits, b.logits);
        }
    }

    #[test]
    fn logits_are_bilinear_in_speech() {
        let mut r = rng(53);
        let (d, n_q, k) = (6, 4, 3);
        let q = randn(&mut r, &[n_q, d], 1.0);
        let speech = randn(&mut r, &[k, d], 1.0);
        let refs = fixed_refs(n_q);
        let w_box = Tensor::zeros(&[4, d]).unwrap();
        let b_box = Tensor::zeros(&[4]).unwrap();
        let head = HeadWeights {
            w_box: &w_box,
            b_box: &b_box,
        };
        let (base, _) = heads_forward(&q, &refs, &speech, &head).unwrap();
        for t in [0.0, 2.0] {
            let scaled = speech.scale(t);
            let (dets, _) = heads_forward(&q, &refs, &scaled, &head).unwrap();
            for (a, b) in base.iter().zip(&dets) {
                for (la, lb) in a.logits.iter().zip(&b.logits) {
                    assert_eq!(*lb, t * la);
                }
            }
        }
    }

    #[test]
    fn zero_speech_zeroes_logits_through_full_stack() {
        let mut r = rng(54);
        let (d, n_q, p, k) = (5, 3, 6, 2);
        let store = LayerStore::random(&mut r, d, 8, false);
        let q = randn(&mut r, &[n_q, d], 1.0);
        let visual = randn(&mut r, &[p, d], 1.0);
        let speech = Tensor::zeros(&[k, d]).unwrap();
        let refs = fixed_refs(n_q);
        let (dets, _) =
            decoder_forward(&q, &refs, &visual, &speech, &[store.layer()], &store.head(), None)
                .unwrap();
        for det in &dets {
            for &logit in &det.logits {
                assert_eq!(logit, 0.0);
            }
        }
    }

    #[test]
    fn routing_stats_are_collected_per_layer() {
        let mut r = rng(55);
        let (d, d_ffn, n_q, p, k) = (5, 8, 4, 6, 2);
        let plain = LayerStore::random(&mut r, d, d_ffn, false);
        let mut routed = LayerStore::random(&mut r, d, d_ffn, false);
        routed.attach_mole(&mut r, d, d_ffn, 3);
        let q = randn(&mut r, &[n_q, d], 1.0);
        let visual = randn(&mut r, &[p, d], 1.0);
        let speech = randn(&mut r, &[k, d], 1.0);
        let refs = fixed_refs(n_q);
        let layers = [plain.layer(), routed.layer()];
        let mut stats = vec![RoutingStats::new(3), RoutingStats::new(3)];
        decoder_forward(
            &q,
            &refs,
            &visual,
            &speech,
            &layers,
            &plain.head(),
            Some(&mut stats),
        )
        .unwrap();
        assert_eq!(stats[0].tokens(), 0);
        assert_eq!(stats[1].tokens(), n_q as u64);
    }

    #[test]
    fn reference_count_mismatch_is_rejected() {
        let mut r = rng(56);
        let d = 4;
        let store = LayerStore::random(&mut r, d, 6, false);
        let q = randn(&mut r, &[3, d], 1.0);
        let speech = randn(&mut r, &[2, d], 1.0);
        let err = match heads_forward(&q, &fixed_refs(2), &speech, &store.head()) {
            Ok(_) => panic!("mismatched reference count accepted"),
            Err(e) => e,
        };
        assert!(matches!(
            err,
            DecoderError::ReferenceCount {
                queries: 3,
                references: 2
            }
        ));
    }

    #[test]
    fn memory_width_mismatch_is_rejected() {
        let mut r = rng(57);
        let store = LayerStore::random(&mut r, 4, 6, false);
        let q = randn(&mut r, &[3, 4], 1.0);
        let visual = randn(&mut r, &[5, 3], 1.0);
        let speech = randn(&mut r, &[2, 4], 1.0);
        let out = decoder_forward(
            &q,
            &fixed_refs(3),
            &visual,
            &speech,
            &[store.layer()],
            &store.head(),
            None,
        );
        assert!(matches!(out, Err(DecoderError::Tensor(_))));
    }

    fn stack_loss(
        ps: &ParamStore,
        with_mole: bool,
        refs: &[[f64; 4]],
        probe_box: &[f64],
        probe_logit: &Tensor,
    ) -> f64 {
        let layers = [layer_weights(ps, with_mole)];
        let head = head_weights(ps);
        let (dets, _) = decoder_forward(
            ps.value("input.q").unwrap(),
            refs,
            ps.value("input.visual").unwrap(),
            ps.value("input.speech").unwrap(),
            &layers,
            &head,
            None,
        )
        .unwrap();
        let mut loss = 0.0;
        for (i, det) in dets.iter().enumerate() {
            let b = [det.bbox.cx, det.bbox.cy, det.bbox.w, det.bbox.h];
            for c in 0..4 {
                loss += probe_box[4 * i + c] * b[c];
            }
            for (j, &logit) in det.logits.iter().enumerate() {
                loss += probe_logit.get2(i, j) * logit;
            }
        }
        loss
    }

    fn accumulate_stack_grads(
        store: &mut LayerStore,
        refs: &[[f64; 4]],
        probe_box: &[f64],
        probe_logit: &Tensor,
    ) {
        let (grads, k_e) = {
            let layers = [store.layer()];
            let head = store.head();
            let (dets, cache) = decoder_forward(
                store.ps.value("input.q").unwrap(),
                refs,
                store.ps.value("input.visual").unwrap(),
                store.ps.value("input.speech").unwrap(),
                &layers,
                &head,
                None,
            )
            .unwrap();
            let dboxes: Vec<[f64; 4]> = (0..dets.len())
                .map(|i| {
                    [
                        probe_box[4 * i],
                        probe_box[4 * i + 1],
                        probe_box[4 * i + 2],
                        probe_box[4 * i + 3],
                    ]
                })
                .collect();
            let k_e = layers[0].mole.as_ref().map(|m| m.expert_count());
            (
                decoder_backward(&cache, &layers, &head, &dboxes, probe_logit).unwrap(),
                k_e,
            )
        };
        let ps = &mut store.ps;
        ps.acc_grad("input.q", &grads.dq, 1.0).unwrap();
        ps.acc_grad("input.visual", &grads.dvisual, 1.0).unwrap();
        ps.acc_grad("input.speech", &grads.dspeech, 1.0).unwrap();
        ps.acc_grad("head.w_box", &grads.head.dw_box, 1.0).unwrap();
        ps.acc_grad("head.b_box", &grads.head.db_box, 1.0).unwrap();
        let lg = &grads.layers[0];
        for (name, g) in [
            ("ln_self", &lg.ln_self),
            ("ln_visual", &lg.ln_visual),
            ("ln_speech", &lg.ln_speech),
            ("ln_ffn", &lg.ln_ffn),
        ] {
            ps.acc_grad(&format!("{name}.gamma"), &g.dgamma, 1.0).unwrap();
            ps.acc_grad(&format!("{name}.beta"), &g.dbeta, 1.0).unwrap();
        }
        for (name, g) in [
            ("attn_self", &lg.attn_self),
            ("attn_visual", &lg.attn_visual),
            ("attn_speech", &lg.attn_speech),
        ] {
            ps.acc_grad(&format!("{name}.wq"), &g.dwq, 1.0).unwrap();
            ps.acc_grad(&format!("{name}.wk"), &g.dwk, 1.0).unwrap();
            ps.acc_grad(&format!("{name}.wv"), &g.dwv, 1.0).unwrap();
            ps.acc_grad(&format!("{name}.wo"), &g.dwo, 1.0).unwrap();
        }
        match &lg.ffn {
            FfnPathGrads::Plain(g) => {
                ps.acc_grad("ffn.w1", &g.dw1, 1.0).unwrap();
                ps.acc_grad("ffn.b1", &g.db1, 1.0).unwrap();
                ps.acc_grad("ffn.w2", &g.dw2, 1.0).unwrap();
                ps.acc_grad("ffn.b2", &g.db2, 1.0).unwrap();
            }
            FfnPathGrads::Mole(g) => {
                ps.acc_grad("ffn.w1", &g.dw1, 1.0).unwrap();
                ps.acc_grad("ffn.b1", &g.db1, 1.0).unwrap();
                ps.acc_grad("ffn.w2", &g.dw2, 1.0).unwrap();
                ps.acc_grad("ffn.b2", &g.db2, 1.0).unwrap();
                for j in 0..k_e.unwrap() {
                    ps.acc_grad(&format!("mole.e1.{j}.a"), &g.experts1[j].da, 1.0)
                        .unwrap();
                    ps.acc_grad(&format!("mole.e1.{j}.b"), &g.experts1[j].db, 1.0)
                        .unwrap();
                    ps.acc_grad(&format!("mole.e2.{j}.a"), &g.experts2[j].da, 1.0)
                        .unwrap();
                    ps.acc_grad(&format!("mole.e2.{j}.b"), &g.experts2[j].db, 1.0)
                        .unwrap();
                }
            }
        }
    }

    fn check_groups_by_seed(groups: &[String], with_mole: bool, seed_limit: u64) {
        let mut covered = std::collections::BTreeSet::new();
        let mut seed = 0;
        while covered.len() < groups.len() {
            let missing: Vec<&String> =
                groups.iter().filter(|g| !covered.contains(*g)).collect();
            assert!(
                seed < seed_limit,
                "no well-conditioned instance for {missing:?}"
            );
            let mut r = rng(900 + seed);
            seed += 1;
            let (d, d_ffn, n_q, p, k) = (4, 6, 4, 9, 3);
            let mut store = LayerStore::random(&mut r, d, d_ffn, false);
            if with_mole {
                store.attach_mole(&mut r, d, d_ffn, 2);
            }
            store
                .ps
                .insert("input.q", randn(&mut r, &[n_q, d], 1.0), true)
                .unwrap();
            store
                .ps
                .insert("input.visual", randn(&mut r, &[p, d], 1.0), true)
                .unwrap();
            store
                .ps
                .insert("input.speech", randn(&mut r, &[k, d], 1.0), true)
                .unwrap();
            let refs = fixed_refs(n_q);
            let probe_box: Vec<f64> = (0..4 * n_q)
                .map(|_| randn(&mut r, &[1], 1.0).data()[0])
                .collect();
            let probe_logit = randn(&mut r, &[n_q, k], 1.0);

            accumulate_stack_grads(&mut store, &refs, &probe_box, &probe_logit);

            for name in groups {
                if covered.contains(name) {
                    continue;
                }
                let min_grad = store
                    .ps
                    .get(name)
                    .unwrap()
                    .grad
                    .data()
                    .iter()
                    .fold(f64::INFINITY, |m, v| m.min(v.abs()));
                if min_grad < 5e-3 {
                    continue;
                }
                store.ps.set_trainable_by_prefix(name);
                let report = finite_difference_check(
                    &mut store.ps,
                    |ps| stack_loss(ps, with_mole, &refs, &probe_box, &probe_logit),
                    1e-6,
                    1e-5,
                )
                .unwrap();
                assert!(
                    report.pass,
                    "{name}: worst {:?} rel err {}",
                    report.worst_param(),
                    report.max_rel_err
                );
                covered.insert(name.clone());
            }
        }
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut groups = vec![
            "input.q".to_string(),
            "input.visual".to_string(),
            "input.speech".to_string(),
            "head.w_box".to_string(),
            "head.b_box".to_string(),
        ];
        for name in LN_NAMES {
            groups.push(format!("{name}.gamma"));
            groups.push(format!("{name}.beta"));
        }
        for name in ATTN_NAMES {
            for proj in ["wq", "wk", "wv", "wo"] {
                groups.push(format!("{name}.{proj}"));
            }
        }
        for t in ["w1", "b1", "w2", "b2"] {
            groups.push(format!("ffn.{t}"));
        }
        check_groups_by_seed(&groups, false, 200);
    }

    #[test]
    fn expert_gradients_match_finite_differences_through_decoder() {
        let mut groups = Vec::new();
        for j in 0..2 {
            for set in ["e1", "e2"] {
                groups.push(format!("mole.{set}.{j}.a"));
                groups.push(format!("mole.{set}.{j}.b"));
            }
        }
        check_groups_by_seed(&groups, true, 200);
    }
}
