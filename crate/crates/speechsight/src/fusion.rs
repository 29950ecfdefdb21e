//! Bi-directional feature enhancer blocks and speech-guided selection of
//! object queries from visual positions.

use std::fmt;

use crate::nn::{
    attention_backward, attention_forward, ffn_backward, ffn_forward, layer_norm_backward,
    layer_norm_forward, AttnCache, AttnGrads, AttnWeights, FfnCache, FfnGrads, LayerNormCache,
    LayerNormGrads,
};
use crate::tensor::{Tensor, TensorError, TensorResult};

pub const LN_EPS: f64 = 1e-5;

/// Learned scale and shift of one layer-normalization sublayer.
pub struct LnWeights<'a> {
    pub gamma: &'a Tensor,
    pub beta: &'a Tensor,
}

/// The two linear maps of one feed-forward block.
pub struct FfnWeights<'a> {
    pub w1: &'a Tensor,
    pub b1: &'a Tensor,
    pub w2: &'a Tensor,
    pub b2: &'a Tensor,
}

#[derive(Debug)]
pub enum FusionError {
    Tensor(TensorError),
    /// More queries requested than visual positions exist.
    TooManyQueries {
        requested: usize,
        positions: usize,
    },
    EmptySpeech,
    NonFiniteScore {
        position: usize,
    },
}

impl fmt::Display for FusionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionError::Tensor(e) => write!(f, "tensor shape error: {e}"),
            FusionError::TooManyQueries {
                requested,
                positions,
            } => write!(
                f,
                "cannot select {requested} queries from {positions} positions"
            ),
            FusionError::EmptySpeech => {
                write!(f, "query selection needs at least one speech token")
            }
            FusionError::NonFiniteScore { position } => {
                write!(f, "non-finite selection score at position {position}")
            }
        }
    }
}

impl std::error::Error for FusionError {}

impl From<TensorError> for FusionError {
    fn from(e: TensorError) -> FusionError {
        FusionError::Tensor(e)
    }
}

// ---------------------------------------------------------------------------
// Enhancer block
// ---------------------------------------------------------------------------

/// One fusion block: visual rows attend to speech and speech rows attend to
/// visual in parallel (both reading the block inputs), then each modality
/// runs its own feed-forward. Sublayers are pre-normalized residuals, so a
/// zero-weight block is an exact identity.
pub struct EnhancerBlockWeights<'a> {
    pub ln_v_attn: LnWeights<'a>,
    pub attn_v: AttnWeights<'a>,
    pub ln_s_attn: LnWeights<'a>,
    pub attn_s: AttnWeights<'a>,
    pub ln_v_ffn: LnWeights<'a>,
    pub ffn_v: FfnWeights<'a>,
    pub ln_s_ffn: LnWeights<'a>,
    pub ffn_s: FfnWeights<'a>,
}

pub struct EnhancerBlockCache {
    ln_v_attn: LayerNormCache,
    attn_v: AttnCache,
    ln_s_attn: LayerNormCache,
    attn_s: AttnCache,
    ln_v_ffn: LayerNormCache,
    ffn_v: FfnCache,
    ln_s_ffn: LayerNormCache,
    ffn_s: FfnCache,
}

pub struct EnhancerBlockGrads {
    pub dv: Tensor,
    pub ds: Tensor,
    pub ln_v_attn: LayerNormGrads,
    pub attn_v: AttnGrads,
    pub ln_s_attn: LayerNormGrads,
    pub attn_s: AttnGrads,
    pub ln_v_ffn: LayerNormGrads,
    pub ffn_v: FfnGrads,
    pub ln_s_ffn: LayerNormGrads,
    pub ffn_s: FfnGrads,
}

pub fn enhancer_block_forward(
    v: &Tensor,
    s: &Tensor,
    w: &EnhancerBlockWeights,
) -> TensorResult<(Tensor, Tensor, EnhancerBlockCache)> {
    let (vn, ln_v_attn) = layer_norm_forward(v, w.ln_v_attn.gamma, w.ln_v_attn.beta, LN_EPS)?;
    let (va, attn_v) = attention_forward(&vn, s, &w.attn_v)?;
    let v1 = v.add(&va)?;

    let (sn, ln_s_attn) = layer_norm_forward(s, w.ln_s_attn.gamma, w.ln_s_attn.beta, LN_EPS)?;
    let (sa, attn_s) = attention_forward(&sn, v, &w.attn_s)?;
    let s1 = s.add(&sa)?;

    let (vn2, ln_v_ffn) = layer_norm_forward(&v1, w.ln_v_ffn.gamma, w.ln_v_ffn.beta, LN_EPS)?;
    let (vf, ffn_v) = ffn_forward(&vn2, w.ffn_v.w1, w.ffn_v.b1, w.ffn_v.w2, w.ffn_v.b2)?;
    let v2 = v1.add(&vf)?;

    let (sn2, ln_s_ffn) = layer_norm_forward(&s1, w.ln_s_ffn.gamma, w.ln_s_ffn.beta, LN_EPS)?;
    let (sf, ffn_s) = ffn_forward(&sn2, w.ffn_s.w1, w.ffn_s.b1, w.ffn_s.w2, w.ffn_s.b2)?;
    let s2 = s1.add(&sf)?;

    Ok((
        v2,
        s2,
        EnhancerBlockCache {
            ln_v_attn,
            attn_v,
            ln_s_attn,
            attn_s,
            ln_v_ffn,
            ffn_v,
            ln_s_ffn,
            ffn_s,
        },
    ))
}

pub fn enhancer_block_backward(
    cache: &EnhancerBlockCache,
    w: &EnhancerBlockWeights,
    dv2: &Tensor,
    ds2: &Tensor,
) -> TensorResult<EnhancerBlockGrads> {
    let ffn_v = ffn_backward(&cache.ffn_v, w.ffn_v.w1, w.ffn_v.w2, dv2)?;
    let ln_v_ffn = layer_norm_backward(&cache.ln_v_ffn, w.ln_v_ffn.gamma, &ffn_v.dx)?;
    let dv1 = dv2.add(&ln_v_ffn.dx)?;

    let ffn_s = ffn_backward(&cache.ffn_s, w.ffn_s.w1, w.ffn_s.w2, ds2)?;
    let ln_s_ffn = layer_norm_backward(&cache.ln_s_ffn, w.ln_s_ffn.gamma, &ffn_s.dx)?;
    let ds1 = ds2.add(&ln_s_ffn.dx)?;

    let attn_v = attention_backward(&cache.attn_v, &w.attn_v, &dv1)?;
    let ln_v_attn = layer_norm_backward(&cache.ln_v_attn, w.ln_v_attn.gamma, &attn_v.dx)?;
    let attn_s = attention_backward(&cache.attn_s, &w.attn_s, &ds1)?;
    let ln_s_attn = layer_norm_backward(&cache.ln_s_attn, w.ln_s_attn.gamma, &attn_s.dx)?;

    let dv = dv1.add(&ln_v_attn.dx)?.add(&attn_s.dmem)?;
    let ds = ds1.add(&ln_s_attn.dx)?.add(&attn_v.dmem)?;

    Ok(EnhancerBlockGrads {
        dv,
        ds,
        ln_v_attn,
        attn_v,
        ln_s_attn,
        attn_s,
        ln_v_ffn,
        ffn_v,
        ln_s_ffn,
        ffn_s,
    })
}

/// Runs `blocks` in order; an empty list returns the inputs unchanged.
pub fn feature_enhancer_forward(
    v: &Tensor,
    s: &Tensor,
    blocks: &[EnhancerBlockWeights],
) -> TensorResult<(Tensor, Tensor, Vec<EnhancerBlockCache>)> {
    let mut cur_v = v.clone();
    let mut cur_s = s.clone();
    let mut caches = Vec::with_capacity(blocks.len());
    for w in blocks {
        let (nv, ns, cache) = enhancer_block_forward(&cur_v, &cur_s, w)?;
        cur_v = nv;
        cur_s = ns;
        caches.push(cache);
    }
    Ok((cur_v, cur_s, caches))
}

/// Backward through the whole stack; `grads[i]` holds block `i`'s weight
/// gradients, and `grads[0].dv / .ds` are the gradients at the inputs.
pub fn feature_enhancer_backward(
    caches: &[EnhancerBlockCache],
    blocks: &[EnhancerBlockWeights],
    dv_out: &Tensor,
    ds_out: &Tensor,
) -> TensorResult<Vec<EnhancerBlockGrads>> {
    let mut dv = dv_out.clone();
    let mut ds = ds_out.clone();
    let mut grads = Vec::with_capacity(blocks.len());
    for (cache, w) in caches.iter().zip(blocks).rev() {
        let g = enhancer_block_backward(cache, w, &dv, &ds)?;
        dv = g.dv.clone();
        ds = g.ds.clone();
        grads.push(g);
    }
    grads.reverse();
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Query selection
// ---------------------------------------------------------------------------

/// Initialized object queries: one embedding row and one normalized
/// (cx, cy, w, h) reference box per query, plus the source position of each.
#[derive(Debug, Clone)]
pub struct ObjectQuerySet {
    pub embeddings: Tensor,
    pub references: Vec<[f64; 4]>,
    pub selected: Vec<usize>,
}

/// Scores every visual position by its best dot product against any speech
/// token and keeps the `n_q` highest, ties to the lower position index.
/// Reference boxes sit at the position's anchor with the default size.
pub fn query_select(
    visual: &Tensor,
    anchors: &[(f64, f64)],
    speech: &Tensor,
    n_q: usize,
    ref_size: (f64, f64),
) -> Result<ObjectQuerySet, FusionError> {
    let p = visual.rows();
    if n_q > p {
        return Err(FusionError::TooManyQueries {
            requested: n_q,
            positions: p,
        });
    }
    if speech.rows() == 0 {
        return Err(FusionError::EmptySpeech);
    }
    if visual.cols() != speech.cols() {
        return Err(FusionError::Tensor(TensorError::ShapeMismatch {
            op: "query_select",
            left: visual.dims().to_vec(),
            right: speech.dims().to_vec(),
        }));
    }
    assert_eq!(anchors.len(), p, "one anchor per visual position");

    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(p);
    for i in 0..p {
        let row = visual.row(i);
        let mut best = f64::NEG_INFINITY;
        for k in 0..speech.rows() {
            let tok = speech.row(k);
            let mut dot = 0.0;
            for (a, b) in row.iter().zip(tok) {
                dot += a * b;
            }
            if dot > best {
                best = dot;
            }
        }
        if !best.is_finite() {
            return Err(FusionError::NonFiniteScore { position: i });
        }
        scored.push((best, i));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let mut embeddings = Tensor::zeros(&[n_q, visual.cols()])?;
    let mut references = Vec::with_capacity(n_q);
    let mut selected = Vec::with_capacity(n_q);
    for (q, &(_, pos)) in scored.iter().take(n_q).enumerate() {
        for (j, &v) in visual.row(pos).iter().enumerate() {
            embeddings.set2(q, j, v);
        }
        let (cx, cy) = anchors[pos];
        references.push([cx, cy, ref_size.0, ref_size.1]);
        selected.push(pos);
    }
    Ok(ObjectQuerySet {
        embeddings,
        references,
        selected,
    })
}

/// Scatters query-embedding gradients back to their source positions. The
/// selection itself is piecewise constant and carries no gradient.
pub fn query_select_backward(
    selected: &[usize],
    positions: usize,
    d: usize,
    dembeddings: &Tensor,
) -> TensorResult<Tensor> {
    let mut dvisual = Tensor::zeros(&[positions, d])?;
    for (q, &pos) in selected.iter().enumerate() {
        let src = dembeddings.row(q).to_vec();
        let dst = dvisual.row_mut(pos);
        for (j, v) in src.iter().enumerate() {
            dst[j] += v;
        }
    }
    Ok(dvisual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use crate::params::ParamStore;
    use crate::tensor::dot;
    use crate::test_util::{randn, rng};
    use rand_chacha::ChaCha8Rng;

    fn ones(d: usize) -> Tensor {
        let mut t = Tensor::zeros(&[d]).unwrap();
        t.fill(1.0);
        t
    }

    struct BlockStore {
        ps: ParamStore,
    }

    impl BlockStore {
        fn random(r: &mut ChaCha8Rng, d: usize, d_ffn: usize, zero: bool) -> BlockStore {
            let mut ps = ParamStore::new();
            let std = if zero { 0.0 } else { 0.4 };
            for name in ["ln_v_attn", "ln_s_attn", "ln_v_ffn", "ln_s_ffn"] {
                ps.insert(&format!("{name}.gamma"), ones(d), true).unwrap();
                ps.insert(&format!("{name}.beta"), Tensor::zeros(&[d]).unwrap(), true)
                    .unwrap();
            }
            for name in ["attn_v", "attn_s"] {
                for proj in ["wq", "wk", "wv", "wo"] {
                    ps.insert(&format!("{name}.{proj}"), randn(r, &[d, d], std), true)
                        .unwrap();
                }
            }
            for name in ["ffn_v", "ffn_s"] {
                ps.insert(&format!("{name}.w1"), randn(r, &[d_ffn, d], std), true)
                    .unwrap();
                ps.insert(&format!("{name}.b1"), randn(r, &[d_ffn], std), true)
                    .unwrap();
                ps.insert(&format!("{name}.w2"), randn(r, &[d, d_ffn], std), true)
                    .unwrap();
                ps.insert(&format!("{name}.b2"), randn(r, &[d], std), true)
                    .unwrap();
            }
            BlockStore { ps }
        }

        fn weights(&self) -> EnhancerBlockWeights<'_> {
            store_weights(&self.ps)
        }
    }

    fn store_weights(ps: &ParamStore) -> EnhancerBlockWeights<'_> {
        let g = |n: &str| ps.value(n).unwrap();
        EnhancerBlockWeights {
            ln_v_attn: LnWeights {
                gamma: g("ln_v_attn.gamma"),
                beta: g("ln_v_attn.beta"),
            },
            attn_v: AttnWeights {
                wq: g("attn_v.wq"),
                wk: g("attn_v.wk"),
                wv: g("attn_v.wv"),
                wo: g("attn_v.wo"),
            },
            ln_s_attn: LnWeights {
                gamma: g("ln_s_attn.gamma"),
                beta: g("ln_s_attn.beta"),
            },
            attn_s: AttnWeights {
                wq: g("attn_s.wq"),
                wk: g("attn_s.wk"),
                wv: g("attn_s.wv"),
                wo: g("attn_s.wo"),
            },
            ln_v_ffn: LnWeights {
                gamma: g("ln_v_ffn.gamma"),
                beta: g("ln_v_ffn.beta"),
            },
            ffn_v: FfnWeights {
                w1: g("ffn_v.w1"),
                b1: g("ffn_v.b1"),
                w2: g("ffn_v.w2"),
                b2: g("ffn_v.b2"),
            },
            ln_s_ffn: LnWeights {
                gamma: g("ln_s_ffn.gamma"),
                beta: g("ln_s_ffn.beta"),
            },
            ffn_s: FfnWeights {
                w1: g("ffn_s.w1"),
                b1: g("ffn_s.b1"),
                w2: g("ffn_s.w2"),
                b2: g("ffn_s.b2"),
            },
        }
    }

    #[test]
    fn zero_weight_block_is_identity() {
        let mut r = rng(31);
        let store = BlockStore::random(&mut r, 6, 10, true);
        let v = randn(&mut r, &[5, 6], 1.0);
        let s = randn(&mut r, &[3, 6], 1.0);
        let (v2, s2, _) = enhancer_block_forward(&v, &s, &store.weights()).unwrap();
        assert_eq!(v2.data(), v.data());
        assert_eq!(s2.data(), s.data());
    }

    #[test]
    fn empty_stack_returns_inputs() {
        let mut r = rng(32);
        let v = randn(&mut r, &[4, 6], 1.0);
        let s = randn(&mut r, &[2, 6], 1.0);
        let (v2, s2, caches) = feature_enhancer_forward(&v, &s, &[]).unwrap();
        assert!(caches.is_empty());
        assert_eq!(v2.data(), v.data());
        assert_eq!(s2.data(), s.data());
    }

    #[test]
    fn block_rejects_width_mismatch() {
        let mut r = rng(33);
        let store = BlockStore::random(&mut r, 6, 10, false);
        let v = randn(&mut r, &[4, 6], 1.0);
        let s = randn(&mut r, &[2, 5], 1.0);
        assert!(enhancer_block_forward(&v, &s, &store.weights()).is_err());
    }

    #[test]
    fn enhancer_gradients_match_finite_differences() {
        // Central differences at h=1e-6 resolve gradients down to roughly
        // 1e-3 of the loss scale. A single instance rarely conditions every
        // tensor at once, so each tensor is compared on an instance where its
        // smallest-magnitude gradient entry clears the floor, accumulating
        // coverage across seeds.
        let mut groups = vec!["input.v".to_string(), "input.s".to_string()];
        for name in ["ln_v_attn", "ln_s_attn", "ln_v_ffn", "ln_s_ffn"] {
            groups.push(format!("{name}.gamma"));
            groups.push(format!("{name}.beta"));
        }
        for name in ["attn_v", "attn_s"] {
            for proj in ["wq", "wk", "wv", "wo"] {
                groups.push(format!("{name}.{proj}"));
            }
        }
        for name in ["ffn_v", "ffn_s"] {
            for t in ["w1", "b1", "w2", "b2"] {
                groups.push(format!("{name}.{t}"));
            }
        }
        let mut covered = std::collections::BTreeSet::new();
        let mut seed = 0;
        while covered.len() < groups.len() {
            let missing: Vec<&String> = groups.iter().filter(|g| !covered.contains(*g)).collect();
            assert!(seed < 200, "no well-conditioned instance for {missing:?}");
            let mut r = rng(seed);
            seed += 1;
            let (d, d_ffn, nv, ns) = (4, 7, 3, 2);
            let mut store = BlockStore::random(&mut r, d, d_ffn, false);
            store
                .ps
                .insert("input.v", randn(&mut r, &[nv, d], 1.0), true)
                .unwrap();
            store
                .ps
                .insert("input.s", randn(&mut r, &[ns, d], 1.0), true)
                .unwrap();
            let probe_v = randn(&mut r, &[nv, d], 1.0);
            let probe_s = randn(&mut r, &[ns, d], 1.0);

            let cache = {
                let w = store.weights();
                enhancer_block_forward(
                    store.ps.value("input.v").unwrap(),
                    store.ps.value("input.s").unwrap(),
                    &w,
                )
                .unwrap()
                .2
            };
            let g = {
                let w = store.weights();
                enhancer_block_backward(&cache, &w, &probe_v, &probe_s).unwrap()
            };
            store.ps.acc_grad("input.v", &g.dv, 1.0).unwrap();
            store.ps.acc_grad("input.s", &g.ds, 1.0).unwrap();
            for (name, grad) in [
                ("ln_v_attn", &g.ln_v_attn),
                ("ln_s_attn", &g.ln_s_attn),
                ("ln_v_ffn", &g.ln_v_ffn),
                ("ln_s_ffn", &g.ln_s_ffn),
            ] {
                store
                    .ps
                    .acc_grad(&format!("{name}.gamma"), &grad.dgamma, 1.0)
                    .unwrap();
                store
                    .ps
                    .acc_grad(&format!("{name}.beta"), &grad.dbeta, 1.0)
                    .unwrap();
            }
            for (name, grad) in [("attn_v", &g.attn_v), ("attn_s", &g.attn_s)] {
                store
                    .ps
                    .acc_grad(&format!("{name}.wq"), &grad.dwq, 1.0)
                    .unwrap();
                store
                    .ps
                    .acc_grad(&format!("{name}.wk"), &grad.dwk, 1.0)
                    .unwrap();
                store
                    .ps
                    .acc_grad(&format!("{name}.wv"), &grad.dwv, 1.0)
                    .unwrap();
                store
                    .ps
                    .acc_grad(&format!("{name}.wo"), &grad.dwo, 1.0)
                    .unwrap();
            }
            for (name, grad) in [("ffn_v", &g.ffn_v), ("ffn_s", &g.ffn_s)] {
                store
                    .ps
                    .acc_grad(&format!("{name}.w1"), &grad.dw1, 1.0)
                    .unwrap();
                store
                    .ps
                    .acc_grad(&format!("{name}.b1"), &grad.db1, 1.0)
                    .unwrap();
                store
                    .ps
                    .acc_grad(&format!("{name}.w2"), &grad.dw2, 1.0)
                    .unwrap();
                store
                    .ps
                    .acc_grad(&format!("{name}.b2"), &grad.db2, 1.0)
                    .unwrap();
            }

            for name in &groups {
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
                    |ps| {
                        let w = store_weights(ps);
                        let (v2, s2, _) = enhancer_block_forward(
                            ps.value("input.v").unwrap(),
                            ps.value("input.s").unwrap(),
                            &w,
                        )
                        .unwrap();
                        dot(v2.data(), probe_v.data()) + dot(s2.data(), probe_s.data())
                    },
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

    fn uniform_anchors(p: usize) -> Vec<(f64, f64)> {
        (0..p).map(|i| (0.1 + 0.05 * i as f64, 0.5)).collect()
    }

    #[test]
    fn dominant_position_is_selected_first() {
        let mut r = rng(35);
        let d = 4;
        let speech = randn(&mut r, &[2, d], 1.0);
        let mut visual = randn(&mut r, &[6, d], 0.1);
        for (j, &v) in speech.row(0).iter().enumerate() {
            visual.set2(3, j, 10.0 * v);
        }
        let qs = query_select(&visual, &uniform_anchors(6), &speech, 2, (0.1, 0.1)).unwrap();
        assert_eq!(qs.selected[0], 3);
        assert_eq!(qs.embeddings.row(0), visual.row(3));
        assert_eq!(qs.references[0], [0.25, 0.5, 0.1, 0.1]);
    }

    #[test]
    fn selecting_all_positions_orders_by_score() {
        let d = 2;
        let mut visual = Tensor::zeros(&[3, d]).unwrap();
        visual.set2(0, 0, 1.0);
        visual.set2(1, 0, 3.0);
        visual.set2(2, 0, 2.0);
        let mut speech = Tensor::zeros(&[1, d]).unwrap();
        speech.set2(0, 0, 1.0);
        let qs = query_select(&visual, &uniform_anchors(3), &speech, 3, (0.1, 0.1)).unwrap();
        assert_eq!(qs.selected, vec![1, 2, 0]);
    }

    #[test]
    fn equal_scores_prefer_lower_index() {
        let d = 2;
        let mut visual = Tensor::zeros(&[4, d]).unwrap();
        for i in 0..4 {
            visual.set2(i, 0, 1.0);
        }
        let mut speech = Tensor::zeros(&[1, d]).unwrap();
        speech.set2(0, 0, 1.0);
        let qs = query_select(&visual, &uniform_anchors(4), &speech, 2, (0.1, 0.1)).unwrap();
        assert_eq!(qs.selected, vec![0, 1]);
    }

    #[test]
    fn capacity_and_empty_speech_errors() {
        let visual = Tensor::zeros(&[2, 3]).unwrap();
        let speech = Tensor::zeros(&[1, 3]).unwrap();
        assert!(matches!(
            query_select(&visual, &uniform_anchors(2), &speech, 5, (0.1, 0.1)),
            Err(FusionError::TooManyQueries {
                requested: 5,
                positions: 2
            })
        ));
    }

    #[test]
    fn unselected_positions_do_not_affect_output() {
        let mut r = rng(36);
        let d = 4;
        let speech = randn(&mut r, &[2, d], 1.0);
        let mut visual = randn(&mut r, &[8, d], 0.2);
        for q in 0..3 {
            for (j, &v) in speech.row(0).iter().enumerate() {
                visual.set2(q, j, (5.0 + q as f64) * v);
            }
        }
        let base = query_select(&visual, &uniform_anchors(8), &speech, 3, (0.1, 0.1)).unwrap();
        assert_eq!(base.selected, vec![2, 1, 0]);

        // Swap two never-selected rows; the query set must not move.
        let mut shuffled = visual.clone();
        let (r5, r7) = (visual.row(5).to_vec(), visual.row(7).to_vec());
        for j in 0..d {
            shuffled.set2(5, j, r7[j]);
            shuffled.set2(7, j, r5[j]);
        }
        let moved = query_select(&shuffled, &uniform_anchors(8), &speech, 3, (0.1, 0.1)).unwrap();
        assert_eq!(moved.selected, base.selected);
        assert_eq!(moved.embeddings.data(), base.embeddings.data());
    }

    #[test]
    fn selection_backward_scatters_rows() {
        let mut r = rng(37);
        let (p, d, n_q) = (6, 3, 2);
        let visual = randn(&mut r, &[p, d], 1.0);
        let speech = randn(&mut r, &[2, d], 1.0);
        let qs = query_select(&visual, &uniform_anchors(p), &speech, n_q, (0.1, 0.1)).unwrap();
        let dq = randn(&mut r, &[n_q, d], 1.0);
        let dv = query_select_backward(&qs.selected, p, d, &dq).unwrap();

        let h = 1e-6;
        let probe = dq.clone();
        for idx in 0..visual.len() {
            let mut plus = visual.clone();
            plus.data_mut()[idx] += h;
            let qp = query_select(&plus, &uniform_anchors(p), &speech, n_q, (0.1, 0.1)).unwrap();
            let mut minus = visual.clone();
            minus.data_mut()[idx] -= h;
            let qm = query_select(&minus, &uniform_anchors(p), &speech, n_q, (0.1, 0.1)).unwrap();
            let numeric = (dot(qp.embeddings.data(), probe.data())
                - dot(qm.embeddings.data(), probe.data()))
                / (2.0 * h);
            let analytic = dv.data()[idx];
            assert!(
                (analytic - numeric).abs() < 1e-6,
                "idx {idx}: {analytic} vs {numeric}"
            );
        }
    }
}
