//! The assembled grounding model: named parameters, initialization, the
//! end-to-end forward/backward pass, and two-stage trainability masks.
//!
//! Visual grid features get a fixed sinusoidal position code before fusion;
//! everything learned lives in one [`ParamStore`] under dotted names
//! (`qsa.*`, `enh.{block}.*`, `dec.{layer}.*`, `head.*`, `mole.{layer}.*`),
//! so stage masks and checkpoints operate on name prefixes alone.

use std::f64::consts::PI;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{
    decoder_backward, decoder_forward, DecoderCache, DecoderError, DecoderLayerWeights,
    FfnPathGrads, HeadWeights,
};
use crate::fusion::{
    feature_enhancer_backward, feature_enhancer_forward, query_select, query_select_backward,
    EnhancerBlockCache, EnhancerBlockWeights, FfnWeights, FusionError, LnWeights, ObjectQuerySet,
};
use crate::loss::Detection;
use crate::mole::{LoraExpert, MoleWeights, RoutingStats};
use crate::params::{ParamError, ParamStore};
use crate::qsa::{qsa_backward, qsa_forward, QsaCache, QsaError, QueryBank, SpeechSequence};
use crate::tensor::{Tensor, TensorError};

/// Default reference box size assigned to selected queries.
pub const REF_SIZE: (f64, f64) = (0.1, 0.1);
/// Amplitude of the fixed position code added to visual features.
pub const PE_AMPLITUDE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub d: usize,
    pub d_ffn: usize,
    /// Aggregated speech tokens emitted by the query bank.
    pub k_tokens: usize,
    pub n_queries: usize,
    pub grid: (usize, usize),
    pub enhancer_blocks: usize,
    pub decoder_layers: usize,
}

impl ModelDims {
    pub fn desk() -> ModelDims {
        ModelDims {
            d: 32,
            d_ffn: 64,
            k_tokens: 8,
            n_queries: 16,
            grid: (8, 8),
            enhancer_blocks: 2,
            decoder_layers: 3,
        }
    }

    pub fn positions(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Anchor centers of the flattened grid, row-major.
    pub fn anchors(&self) -> Vec<(f64, f64)> {
        grid_anchors(self.grid)
    }
}

/// Anchor centers of a row-major flattened grid, each strictly inside the
/// unit square.
pub fn grid_anchors(grid: (usize, usize)) -> Vec<(f64, f64)> {
    let (rows, cols) = grid;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push((
                (c as f64 + 0.5) / cols as f64,
                (r as f64 + 0.5) / rows as f64,
            ));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MoleSettings {
    pub rank: usize,
    pub experts: usize,
    pub lora_alpha: f64,
}

impl MoleSettings {
    /// Adapter sizing that trains in seconds on a laptop CPU.
    pub fn desk() -> MoleSettings {
        MoleSettings {
            rank: 4,
            experts: 2,
            lora_alpha: 4.0,
        }
    }
}

#[derive(Debug)]
pub enum ModelError {
    Qsa(QsaError),
    Fusion(FusionError),
    Decoder(DecoderError),
    Tensor(TensorError),
    Param(ParamError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Qsa(e) => write!(f, "speech aggregation: {e}"),
            ModelError::Fusion(e) => write!(f, "fusion: {e}"),
            ModelError::Decoder(e) => write!(f, "decoder: {e}"),
            ModelError::Tensor(e) => write!(f, "tensor shape error: {e}"),
            ModelError::Param(e) => write!(f, "parameter store: {e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<QsaError> for ModelError {
    fn from(e: QsaError) -> ModelError {
        ModelError::Qsa(e)
    }
}
impl From<FusionError> for ModelError {
    fn from(e: FusionError) -> ModelError {
        ModelError::Fusion(e)
    }
}
impl From<DecoderError> for ModelError {
    fn from(e: DecoderError) -> ModelError {
        ModelError::Decoder(e)
    }
}
impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> ModelError {
        ModelError::Tensor(e)
    }
}
impl From<ParamError> for ModelError {
    fn from(e: ParamError) -> ModelError {
        ModelError::Param(e)
    }
}

/// Fixed sinusoidal position code over the grid anchors, `[P, d]`.
///
/// Coordinates are encoded in interleaved quads
/// `(sin ω_i·cx, cos ω_i·cx, sin ω_i·cy, cos ω_i·cy)` with linearly spaced
/// frequencies `ω_i = π(i+1)`, scaled to [`PE_AMPLITUDE`].
pub fn positional_encoding(dims: &ModelDims) -> Tensor {
    assert!(dims.d % 4 == 0, "width must be divisible by 4");
    let anchors = dims.anchors();
    let mut pe = Tensor::zeros(&[anchors.len(), dims.d]).expect("valid dims");
    for (p, &(cx, cy)) in anchors.iter().enumerate() {
        for i in 0..dims.d / 4 {
            let w = PI * (i as f64 + 1.0);
            pe.set2(p, 4 * i, PE_AMPLITUDE * (w * cx).sin());
            pe.set2(p, 4 * i + 1, PE_AMPLITUDE * (w * cx).cos());
            pe.set2(p, 4 * i + 2, PE_AMPLITUDE * (w * cy).sin());
            pe.set2(p, 4 * i + 3, PE_AMPLITUDE * (w * cy).cos());
        }
    }
    pe
}

pub struct GroundingModel {
    pub params: ParamStore,
    pub dims: ModelDims,
    pub mole: Option<MoleSettings>,
}

const ATTN_SUFFIXES: [&str; 4] = ["wq", "wk", "wv", "wo"];
const ENH_LN: [&str; 4] = ["ln_v_attn", "ln_s_attn", "ln_v_ffn", "ln_s_ffn"];
const ENH_ATTN: [&str; 2] = ["attn_v", "attn_s"];
const ENH_FFN: [&str; 2] = ["ffn_v", "ffn_s"];
const DEC_LN: [&str; 4] = ["ln_self", "ln_visual", "ln_speech", "ln_ffn"];
const DEC_ATTN: [&str; 3] = ["attn_self", "attn_visual", "attn_speech"];

impl GroundingModel {
    /// Fresh model with weights drawn from `seed`; projection weights are
    /// `N(0, 1/fan_in)`, biases and the box head start at zero.
    pub fn new(dims: ModelDims, seed: u64) -> GroundingModel {
        assert!(dims.d % 4 == 0, "width must be divisible by 4");
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let d = dims.d;
        let d_ffn = dims.d_ffn;
        let attn_std = 1.0 / (d as f64).sqrt();

        let gauss = |r: &mut ChaCha8Rng, dims: &[usize], std: f64| {
            Tensor::gaussian(r, dims, std).expect("valid dims")
        };
        let insert = |ps: &mut ParamStore, name: &str, t: Tensor| {
            ps.insert(name, t, true).expect("fresh name");
        };

        insert(&mut ps, "qsa.queries", gauss(&mut r, &[dims.k_tokens, d], 1.0));

        let ln = |ps: &mut ParamStore, prefix: &str| {
            let mut gamma = Tensor::zeros(&[d]).expect("valid dims");
            gamma.fill(1.0);
            ps.insert(&format!("{prefix}.gamma"), gamma, true).expect("fresh name");
            ps.insert(
                &format!("{prefix}.beta"),
                Tensor::zeros(&[d]).expect("valid dims"),
                true,
            )
            .expect("fresh name");
        };

        for b in 0..dims.enhancer_blocks {
            for name in ENH_LN {
                ln(&mut ps, &format!("enh.{b}.{name}"));
            }
            for name in ENH_ATTN {
                for proj in ATTN_SUFFIXES {
                    insert(
                        &mut ps,
                        &format!("enh.{b}.{name}.{proj}"),
                        gauss(&mut r, &[d, d], attn_std),
                    );
                }
            }
            for name in ENH_FFN {
                insert(
                    &mut ps,
                    &format!("enh.{b}.{name}.w1"),
                    gauss(&mut r, &[d_ffn, d], attn_std),
                );
                insert(
                    &mut ps,
                    &format!("enh.{b}.{name}.b1"),
                    Tensor::zeros(&[d_ffn]).expect("valid dims"),
                );
                insert(
                    &mut ps,
                    &format!("enh.{b}.{name}.w2"),
                    gauss(&mut r, &[d, d_ffn], 1.0 / (d_ffn as f64).sqrt()),
                );
                insert(
                    &mut ps,
                    &format!("enh.{b}.{name}.b2"),
                    Tensor::zeros(&[d]).expect("valid dims"),
                );
            }
        }

        for l in 0..dims.decoder_layers {
            for name in DEC_LN {
                ln(&mut ps, &format!("dec.{l}.{name}"));
            }
            for name in DEC_ATTN {
                for proj in ATTN_SUFFIXES {
                    insert(
                        &mut ps,
                        &format!("dec.{l}.{name}.{proj}"),
                        gauss(&mut r, &[d, d], attn_std),
                    );
                }
            }
            insert(
                &mut ps,
                &format!("dec.{l}.ffn.w1"),
                gauss(&mut r, &[d_ffn, d], attn_std),
            );
            insert(
                &mut ps,
                &format!("dec.{l}.ffn.b1"),
                Tensor::zeros(&[d_ffn]).expect("valid dims"),
            );
            insert(
                &mut ps,
                &format!("dec.{l}.ffn.w2"),
                gauss(&mut r, &[d, d_ffn], 1.0 / (d_ffn as f64).sqrt()),
            );
            insert(
                &mut ps,
                &format!("dec.{l}.ffn.b2"),
                Tensor::zeros(&[d]).expect("valid dims"),
            );
        }

        insert(&mut ps, "head.w_box", Tensor::zeros(&[4, d]).expect("valid dims"));
        insert(&mut ps, "head.b_box", Tensor::zeros(&[4]).expect("valid dims"));

        GroundingModel {
            params: ps,
            dims,
            mole: None,
        }
    }

    /// Rebuilds a model around an existing parameter store (checkpoint load).
    pub fn from_parts(
        dims: ModelDims,
        mole: Option<MoleSettings>,
        params: ParamStore,
    ) -> GroundingModel {
        GroundingModel { params, dims, mole }
    }

    /// Attaches one expert set per decoder layer. Down projections are
    /// random, up projections start at zero, so outputs are unchanged until
    /// fine-tuning moves them.
    pub fn attach_mole(&mut self, settings: MoleSettings, seed: u64) {
        assert!(self.mole.is_none(), "experts already attached");
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let d = self.dims.d;
        let d_ffn = self.dims.d_ffn;
        let rank = settings.rank;
        for l in 0..self.dims.decoder_layers {
            self.params
                .insert(
                    &format!("mole.{l}.gate"),
                    Tensor::gaussian(&mut r, &[settings.experts, d], 1.0 / (d as f64).sqrt())
                        .expect("valid dims"),
                    true,
                )
                .expect("fresh name");
            for j in 0..settings.experts {
                let sets = [("e1", d, d_ffn), ("e2", d_ffn, d)];
                for (set, fan_in, fan_out) in sets {
                    self.params
                        .insert(
                            &format!("mole.{l}.{set}.{j}.a"),
                            Tensor::gaussian(
                                &mut r,
                                &[rank, fan_in],
                                1.0 / (fan_in as f64).sqrt(),
                            )
                            .expect("valid dims"),
                            true,
                        )
                        .expect("fresh name");
                    self.params
                        .insert(
                            &format!("mole.{l}.{set}.{j}.b"),
                            Tensor::zeros(&[fan_out, rank]).expect("valid dims"),
                            true,
                        )
                        .expect("fresh name");
                }
            }
        }
        self.mole = Some(settings);
    }

    /// Stage 1 trains everything present.
    pub fn set_stage_pretrain(&mut self) {
        self.params.set_all_trainable(true);
    }

    /// Stage 2 trains exactly the expert sets and their routers.
    pub fn set_stage_finetune(&mut self) {
        self.params.set_trainable_by_prefix("mole.");
    }

    pub fn query_bank(&self) -> QueryBank {
        QueryBank::new(self.params.value("qsa.queries").expect("registered").clone())
    }

    pub fn forward(
        &self,
        visual: &Tensor,
        speech: &SpeechSequence,
        stats: Option<&mut [RoutingStats]>,
    ) -> Result<(Vec<Detection>, ModelCache), ModelError> {
        forward_with(&self.params, &self.dims, self.mole.as_ref(), visual, speech, stats)
    }

    /// Gradients of a scalar loss w.r.t. every weight, as name/tensor pairs,
    /// given the loss gradients on boxes and alignment logits. Expert
    /// routers receive nothing here; their only training signal is the
    /// balance objective.
    pub fn backward(
        &self,
        cache: &ModelCache,
        dboxes: &[[f64; 4]],
        dlogits: &Tensor,
    ) -> Result<Vec<(String, Tensor)>, ModelError> {
        let dec_layers = decoder_weights(&self.params, &self.dims, self.mole.as_ref());
        let head = head_weights(&self.params);
        let dg = decoder_backward(&cache.decoder, &dec_layers, &head, dboxes, dlogits)?;

        let mut pairs: Vec<(String, Tensor)> = Vec::new();
        pairs.push(("head.w_box".into(), dg.head.dw_box.clone()));
        pairs.push(("head.b_box".into(), dg.head.db_box.clone()));
        for (l, lg) in dg.layers.iter().enumerate() {
            for (name, g) in [
                ("ln_self", &lg.ln_self),
                ("ln_visual", &lg.ln_visual),
                ("ln_speech", &lg.ln_speech),
                ("ln_ffn", &lg.ln_ffn),
            ] {
                pairs.push((format!("dec.{l}.{name}.gamma"), g.dgamma.clone()));
                pairs.push((format!("dec.{l}.{name}.beta"), g.dbeta.clone()));
            }
            for (name, g) in [
                ("attn_self", &lg.attn_self),
                ("attn_visual", &lg.attn_visual),
                ("attn_speech", &lg.attn_speech),
            ] {
                pairs.push((format!("dec.{l}.{name}.wq"), g.dwq.clone()));
                pairs.push((format!("dec.{l}.{name}.wk"), g.dwk.clone()));
                pairs.push((format!("dec.{l}.{name}.wv"), g.dwv.clone()));
                pairs.push((format!("dec.{l}.{name}.wo"), g.dwo.clone()));
            }
            match &lg.ffn {
                FfnPathGrads::Plain(g) => {
                    pairs.push((format!("dec.{l}.ffn.w1"), g.dw1.clone()));
                    pairs.push((format!("dec.{l}.ffn.b1"), g.db1.clone()));
                    pairs.push((format!("dec.{l}.ffn.w2"), g.dw2.clone()));
                    pairs.push((format!("dec.{l}.ffn.b2"), g.db2.clone()));
                }
                FfnPathGrads::Mole(g) => {
                    pairs.push((format!("dec.{l}.ffn.w1"), g.dw1.clone()));
                    pairs.push((format!("dec.{l}.ffn.b1"), g.db1.clone()));
                    pairs.push((format!("dec.{l}.ffn.w2"), g.dw2.clone()));
                    pairs.push((format!("dec.{l}.ffn.b2"), g.db2.clone()));
                    for (j, (e1, e2)) in g.experts1.iter().zip(&g.experts2).enumerate() {
                        pairs.push((format!("mole.{l}.e1.{j}.a"), e1.da.clone()));
                        pairs.push((format!("mole.{l}.e1.{j}.b"), e1.db.clone()));
                        pairs.push((format!("mole.{l}.e2.{j}.a"), e2.da.clone()));
                        pairs.push((format!("mole.{l}.e2.{j}.b"), e2.db.clone()));
                    }
                }
            }
        }

        let dv1 = dg.dvisual.add(&query_select_backward(
            &cache.query.selected,
            self.dims.positions(),
            self.dims.d,
            &dg.dq,
        )?)?;

        let enh_blocks = enhancer_weights(&self.params, &self.dims);
        let enh_grads =
            feature_enhancer_backward(&cache.enhancer, &enh_blocks, &dv1, &dg.dspeech)?;
        for (b, bg) in enh_grads.iter().enumerate() {
            for (name, g) in [
                ("ln_v_attn", &bg.ln_v_attn),
                ("ln_s_attn", &bg.ln_s_attn),
                ("ln_v_ffn", &bg.ln_v_ffn),
                ("ln_s_ffn", &bg.ln_s_ffn),
            ] {
                pairs.push((format!("enh.{b}.{name}.gamma"), g.dgamma.clone()));
                pairs.push((format!("enh.{b}.{name}.beta"), g.dbeta.clone()));
            }
            for (name, g) in [("attn_v", &bg.attn_v), ("attn_s", &bg.attn_s)] {
                pairs.push((format!("enh.{b}.{name}.wq"), g.dwq.clone()));
                pairs.push((format!("enh.{b}.{name}.wk"), g.dwk.clone()));
                pairs.push((format!("enh.{b}.{name}.wv"), g.dwv.clone()));
                pairs.push((format!("enh.{b}.{name}.wo"), g.dwo.clone()));
            }
            for (name, g) in [("ffn_v", &bg.ffn_v), ("ffn_s", &bg.ffn_s)] {
                pairs.push((format!("enh.{b}.{name}.w1"), g.dw1.clone()));
                pairs.push((format!("enh.{b}.{name}.b1"), g.db1.clone()));
                pairs.push((format!("enh.{b}.{name}.w2"), g.dw2.clone()));
                pairs.push((format!("enh.{b}.{name}.b2"), g.db2.clone()));
            }
        }

        let ds0 = match enh_grads.first() {
            Some(bg) => bg.ds.clone(),
            None => dg.dspeech.clone(),
        };
        let qg = qsa_backward(&cache.qsa, &ds0)?;
        pairs.push(("qsa.queries".into(), qg.dqueries));

        Ok(pairs)
    }

    /// Adds scaled gradient pairs from [`GroundingModel::backward`] into the
    /// store.
    pub fn accumulate(&mut self, pairs: &[(String, Tensor)], scale: f64) -> Result<(), ModelError> {
        for (name, g) in pairs {
            self.params.acc_grad(name, g, scale)?;
        }
        Ok(())
    }
}

pub struct ModelCache {
    pub qsa: QsaCache,
    pub enhancer: Vec<EnhancerBlockCache>,
    pub query: ObjectQuerySet,
    pub decoder: DecoderCache,
    /// Visual features after fusion, before query selection.
    pub visual_fused: Tensor,
    /// Aggregated speech tokens after fusion.
    pub speech_fused: Tensor,
}

fn ln_view<'a>(ps: &'a ParamStore, prefix: &str) -> LnWeights<'a> {
    LnWeights {
        gamma: ps.value(&format!("{prefix}.gamma")).expect("registered"),
        beta: ps.value(&format!("{prefix}.beta")).expect("registered"),
    }
}

fn attn_view<'a>(ps: &'a ParamStore, prefix: &str) -> crate::nn::AttnWeights<'a> {
    crate::nn::AttnWeights {
        wq: ps.value(&format!("{prefix}.wq")).expect("registered"),
        wk: ps.value(&format!("{prefix}.wk")).expect("registered"),
        wv: ps.value(&format!("{prefix}.wv")).expect("registered"),
        wo: ps.value(&format!("{prefix}.wo")).expect("registered"),
    }
}

fn ffn_view<'a>(ps: &'a ParamStore, prefix: &str) -> FfnWeights<'a> {
    FfnWeights {
        w1: ps.value(&format!("{prefix}.w1")).expect("registered"),
        b1: ps.value(&format!("{prefix}.b1")).expect("registered"),
        w2: ps.value(&format!("{prefix}.w2")).expect("registered"),
        b2: ps.value(&format!("{prefix}.b2")).expect("registered"),
    }
}

fn enhancer_weights<'a>(ps: &'a ParamStore, dims: &ModelDims) -> Vec<EnhancerBlockWeights<'a>> {
    (0..dims.enhancer_blocks)
        .map(|b| EnhancerBlockWeights {
            ln_v_attn: ln_view(ps, &format!("enh.{b}.ln_v_attn")),
            attn_v: attn_view(ps, &format!("enh.{b}.attn_v")),
            ln_s_attn: ln_view(ps, &format!("enh.{b}.ln_s_attn")),
            attn_s: attn_view(ps, &format!("enh.{b}.attn_s")),
            ln_v_ffn: ln_view(ps, &format!("enh.{b}.ln_v_ffn")),
            ffn_v: ffn_view(ps, &format!("enh.{b}.ffn_v")),
            ln_s_ffn: ln_view(ps, &format!("enh.{b}.ln_s_ffn")),
            ffn_s: ffn_view(ps, &format!("enh.{b}.ffn_s")),
        })
        .collect()
}

fn decoder_weights<'a>(
    ps: &'a ParamStore,
    dims: &ModelDims,
    mole: Option<&MoleSettings>,
) -> Vec<DecoderLayerWeights<'a>> {
    (0..dims.decoder_layers)
        .map(|l| {
            let mole_view = mole.map(|m| {
                let experts = |set: &str| {
                    (0..m.experts)
                        .map(|j| {
                            LoraExpert::new(
                                ps.value(&format!("mole.{l}.{set}.{j}.a")).expect("registered"),
                                ps.value(&format!("mole.{l}.{set}.{j}.b")).expect("registered"),
                                m.rank,
                                m.lora_alpha,
                            )
                        })
                        .collect()
                };
                MoleWeights {
                    gate: ps.value(&format!("mole.{l}.gate")).expect("registered"),
                    experts1: experts("e1"),
                    experts2: experts("e2"),
                }
            });
            DecoderLayerWeights {
                ln_self: ln_view(ps, &format!("dec.{l}.ln_self")),
                attn_self: attn_view(ps, &format!("dec.{l}.attn_self")),
                ln_visual: ln_view(ps, &format!("dec.{l}.ln_visual")),
                attn_visual: attn_view(ps, &format!("dec.{l}.attn_visual")),
                ln_speech: ln_view(ps, &format!("dec.{l}.ln_speech")),
                attn_speech: attn_view(ps, &format!("dec.{l}.attn_speech")),
                ln_ffn: ln_view(ps, &format!("dec.{l}.ln_ffn")),
                ffn: ffn_view(ps, &format!("dec.{l}.ffn")),
                mole: mole_view,
            }
        })
        .collect()
}

fn head_weights(ps: &ParamStore) -> HeadWeights<'_> {
    HeadWeights {
        w_box: ps.value("head.w_box").expect("registered"),
        b_box: ps.value("head.b_box").expect("registered"),
    }
}

/// Forward pass over an explicit store, so gradient probes can re-run the
/// model as a pure function of parameter values.
pub fn forward_with(
    ps: &ParamStore,
    dims: &ModelDims,
    mole: Option<&MoleSettings>,
    visual: &Tensor,
    speech: &SpeechSequence,
    stats: Option<&mut [RoutingStats]>,
) -> Result<(Vec<Detection>, ModelCache), ModelError> {
    let pe = positional_encoding(dims);
    let v0 = visual.add(&pe)?;

    let bank = QueryBank::new(ps.value("qsa.queries").expect("registered").clone());
    let (tokens, qsa_cache) = qsa_forward(&bank, speech)?;

    let enh_blocks = enhancer_weights(ps, dims);
    let (v1, s1, enh_caches) = feature_enhancer_forward(&v0, &tokens.tokens, &enh_blocks)?;

    let query = query_select(&v1, &dims.anchors(), &s1, dims.n_queries, REF_SIZE)?;

    let dec_layers = decoder_weights(ps, dims, mole);
    let head = head_weights(ps);
    let (detections, dec_cache) = decoder_forward(
        &query.embeddings,
        &query.references,
        &v1,
        &s1,
        &dec_layers,
        &head,
        stats,
    )?;

    Ok((
        detections,
        ModelCache {
            qsa: qsa_cache,
            enhancer: enh_caches,
            query,
            decoder: dec_cache,
            visual_fused: v1,
            speech_fused: s1,
        },
    ))
}
