//! Finite-difference audit of every differentiable building block.
//!
//! Each covered op is exercised on fresh random instances. Per instance the
//! builder accumulates analytic gradients through the op's own backward
//! pass, exactly one parameter group is marked trainable, and
//! [`finite_difference_check`] compares the stored gradients against central
//! differences. Instances are accepted only when the probed group is well
//! conditioned: no gradient entry under the op's floor and, for piecewise
//! definitions, no kink within reach of the probe step. Poorly conditioned
//! draws are skipped, never silently passed.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::decoder::{
    decoder_backward, decoder_forward, DecoderLayerWeights, FfnPathGrads, HeadWeights,
};
use crate::fusion::{
    feature_enhancer_backward, feature_enhancer_forward, EnhancerBlockWeights, FfnWeights,
    LnWeights,
};
use crate::gradcheck::finite_difference_check;
use crate::loss::{alignment_loss_backward, FocalParams};
use crate::matching::{giou, giou_backward, l1_box_backward, l1_box_loss, CenterBox};
use crate::mole::{
    balance_backward, load_balance_loss, mole_ffn_backward, mole_ffn_forward, LoraExpert,
    MoleWeights, RoutingStats,
};
use crate::nn::AttnWeights;
use crate::params::ParamStore;
use crate::qsa::{qsa_backward, qsa_forward, QueryBank, SpeechSequence};
use crate::tensor::{dot, Tensor};

/// Probe step shared by every check.
pub const STEP: f64 = 1e-6;
/// Relative-error tolerance shared by every check.
pub const TOLERANCE: f64 = 1e-5;
/// Minimum number of checked instances per op.
pub const MIN_INSTANCES: usize = 20;

/// Ops covered by [`run_suite`], in run order. Any entry is a valid filter.
pub const MODULES: [&str; 7] = ["qsa", "enhancer", "decoder", "mole", "giou", "l1", "focal"];

/// Seeds an op may consume before its sweep is declared starved.
const SEED_BUDGET: u64 = 4000;

/// Outcome of one op's sweep.
#[derive(Debug, Clone)]
pub struct ModuleReport {
    pub name: &'static str,
    /// Fresh random instances that were checked.
    pub instances: usize,
    /// Largest relative error across all instances and scalars.
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug)]
pub enum SuiteError {
    UnknownModule { name: String },
}

impl fmt::Display for SuiteError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SuiteError::UnknownModule { name } => {
                write!(f, "unknown module {name:?}; known: {}", MODULES.join(", "))
            }
        }
    }
}

impl std::error::Error for SuiteError {}

/// Runs the sweep for every covered op, or for one op when `filter` is set.
pub fn run_suite(filter: Option<&str>) -> Result<Vec<ModuleReport>, SuiteError> {
    if let Some(name) = filter {
        if !MODULES.contains(&name) {
            return Err(SuiteError::UnknownModule {
                name: name.to_string(),
            });
        }
    }
    let mut reports = Vec::new();
    for &name in MODULES.iter() {
        if let Some(f) = filter {
            if f != name {
                continue;
            }
        }
        reports.push(match name {
            "qsa" => sweep_qsa(),
            "enhancer" => sweep_enhancer(),
            "decoder" => sweep_decoder(),
            "mole" => sweep_mole(),
            "giou" => sweep_giou(),
            "l1" => sweep_l1(),
            "focal" => sweep_focal(),
            _ => unreachable!("the op list is fixed"),
        });
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Sweep driver
// ---------------------------------------------------------------------------

/// One random problem: parameters with analytic gradients already
/// accumulated and a pure loss over the store's current values.
struct Instance {
    ps: ParamStore,
    loss: Box<dyn Fn(&ParamStore) -> f64>,
}

/// Checks each group `rounds` times, one group per instance. A fresh seed's
/// instance is consumed by the first uncovered group whose smallest gradient
/// magnitude clears `floor`; other draws are skipped, so every comparison
/// happens where central differences can resolve the gradient.
fn sweep(
    name: &'static str,
    groups: &[String],
    floor: f64,
    mut build: impl FnMut(u64) -> Option<Instance>,
) -> ModuleReport {
    let rounds = MIN_INSTANCES.div_ceil(groups.len());
    let mut remaining = vec![rounds; groups.len()];
    let mut instances = 0;
    let mut max_rel_err = 0.0_f64;
    let mut pass = true;

    let mut seed = 0;
    while remaining.iter().any(|&q| q > 0) {
        if seed >= SEED_BUDGET {
            // Conditioning starved out; the shortfall counts as a failure.
            pass = false;
            break;
        }
        let s = seed;
        seed += 1;
        let Some(Instance { mut ps, loss }) = build(s) else {
            continue;
        };
        let chosen = (0..groups.len())
            .find(|&gi| remaining[gi] > 0 && min_abs_grad(&ps, &groups[gi]) >= floor);
        let Some(gi) = chosen else {
            continue;
        };

        ps.set_trainable_by_prefix(&groups[gi]);
        match finite_difference_check(&mut ps, |p| loss(p), STEP, TOLERANCE) {
            Ok(report) => {
                instances += 1;
                remaining[gi] -= 1;
                max_rel_err = max_rel_err.max(report.max_rel_err);
                pass &= report.pass;
            }
            Err(_) => {
                pass = false;
                break;
            }
        }
    }

    ModuleReport {
        name,
        instances,
        max_rel_err,
        pass,
    }
}

fn min_abs_grad(ps: &ParamStore, name: &str) -> f64 {
    ps.get(name)
        .expect("groups name inserted parameters")
        .grad
        .data()
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(r: &mut ChaCha8Rng, dims: &[usize], std: f64) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            z * std
        })
        .collect();
    Tensor::from_vec(dims, data).expect("dims are nonzero")
}

fn names(parts: &[String]) -> Vec<String> {
    parts.to_vec()
}

// ---------------------------------------------------------------------------
// Speech aggregation
// ---------------------------------------------------------------------------

fn sweep_qsa() -> ModuleReport {
    let groups = names(&["queries".into(), "frames".into()]);
    sweep("qsa", &groups, 5e-3, |seed| {
        let mut r = rng(seed);
        let (k, n, d) = (3, 5, 6);
        let queries = randn(&mut r, &[k, d], 1.0);
        let frames = randn(&mut r, &[n, d], 1.0);
        let probe = randn(&mut r, &[k, d], 1.0);

        let bank = QueryBank::new(queries.clone());
        let speech = SpeechSequence::new(frames.clone());
        let (_, cache) = qsa_forward(&bank, &speech).expect("widths agree");
        let g = qsa_backward(&cache, &probe).expect("probe matches output");

        let mut ps = ParamStore::new();
        ps.insert("queries", queries, true).expect("fresh name");
        ps.insert("frames", frames, true).expect("fresh name");
        ps.acc_grad("queries", &g.dqueries, 1.0).expect("inserted");
        ps.acc_grad("frames", &g.dframes, 1.0).expect("inserted");

        let loss = move |ps: &ParamStore| {
            let bank = QueryBank::new(ps.value("queries").expect("inserted").clone());
            let speech = SpeechSequence::new(ps.value("frames").expect("inserted").clone());
            let (tok, _) = qsa_forward(&bank, &speech).expect("widths agree");
            dot(tok.tokens.data(), probe.data())
        };
        Some(Instance {
            ps,
            loss: Box::new(loss),
        })
    })
}

// ---------------------------------------------------------------------------
// Feature enhancer
// ---------------------------------------------------------------------------

const LN_SUBLAYERS: [&str; 4] = ["ln_v_attn", "ln_s_attn", "ln_v_ffn", "ln_s_ffn"];
const ATTN_PROJ: [&str; 4] = ["wq", "wk", "wv", "wo"];
const FFN_TENSORS: [&str; 4] = ["w1", "b1", "w2", "b2"];

fn ln_view<'a>(ps: &'a ParamStore, prefix: &str) -> LnWeights<'a> {
    LnWeights {
        gamma: ps.value(&format!("{prefix}.gamma")).expect("inserted"),
        beta: ps.value(&format!("{prefix}.beta")).expect("inserted"),
    }
}

fn attn_view<'a>(ps: &'a ParamStore, prefix: &str) -> AttnWeights<'a> {
    AttnWeights {
        wq: ps.value(&format!("{prefix}.wq")).expect("inserted"),
        wk: ps.value(&format!("{prefix}.wk")).expect("inserted"),
        wv: ps.value(&format!("{prefix}.wv")).expect("inserted"),
        wo: ps.value(&format!("{prefix}.wo")).expect("inserted"),
    }
}

fn ffn_view<'a>(ps: &'a ParamStore, prefix: &str) -> FfnWeights<'a> {
    FfnWeights {
        w1: ps.value(&format!("{prefix}.w1")).expect("inserted"),
        b1: ps.value(&format!("{prefix}.b1")).expect("inserted"),
        w2: ps.value(&format!("{prefix}.w2")).expect("inserted"),
        b2: ps.value(&format!("{prefix}.b2")).expect("inserted"),
    }
}

fn insert_ln(ps: &mut ParamStore, r: &mut ChaCha8Rng, prefix: &str, d: usize) {
    let mut gamma = randn(r, &[d], 0.3);
    for v in gamma.data_mut() {
        *v += 1.0;
    }
    ps.insert(&format!("{prefix}.gamma"), gamma, true)
        .expect("fresh name");
    ps.insert(&format!("{prefix}.beta"), randn(r, &[d], 0.3), true)
        .expect("fresh name");
}

fn insert_attn(ps: &mut ParamStore, r: &mut ChaCha8Rng, prefix: &str, d: usize) {
    for proj in ATTN_PROJ {
        ps.insert(&format!("{prefix}.{proj}"), randn(r, &[d, d], 0.4), true)
            .expect("fresh name");
    }
}

fn insert_ffn(ps: &mut ParamStore, r: &mut ChaCha8Rng, prefix: &str, d: usize, d_ffn: usize) {
    ps.insert(&format!("{prefix}.w1"), randn(r, &[d_ffn, d], 0.4), true)
        .expect("fresh name");
    ps.insert(&format!("{prefix}.b1"), randn(r, &[d_ffn], 0.4), true)
        .expect("fresh name");
    ps.insert(&format!("{prefix}.w2"), randn(r, &[d, d_ffn], 0.4), true)
        .expect("fresh name");
    ps.insert(&format!("{prefix}.b2"), randn(r, &[d], 0.4), true)
        .expect("fresh name");
}

fn enhancer_views<'a>(ps: &'a ParamStore, blocks: usize) -> Vec<EnhancerBlockWeights<'a>> {
    (0..blocks)
        .map(|b| EnhancerBlockWeights {
            ln_v_attn: ln_view(ps, &format!("b{b}.ln_v_attn")),
            attn_v: attn_view(ps, &format!("b{b}.attn_v")),
            ln_s_attn: ln_view(ps, &format!("b{b}.ln_s_attn")),
            attn_s: attn_view(ps, &format!("b{b}.attn_s")),
            ln_v_ffn: ln_view(ps, &format!("b{b}.ln_v_ffn")),
            ffn_v: ffn_view(ps, &format!("b{b}.ffn_v")),
            ln_s_ffn: ln_view(ps, &format!("b{b}.ln_s_ffn")),
            ffn_s: ffn_view(ps, &format!("b{b}.ffn_s")),
        })
        .collect()
}

fn enhancer_groups(blocks: usize) -> Vec<String> {
    let mut out = vec!["input.v".to_string(), "input.s".to_string()];
    for b in 0..blocks {
        for ln in LN_SUBLAYERS {
            out.push(format!("b{b}.{ln}.gamma"));
            out.push(format!("b{b}.{ln}.beta"));
        }
        for attn in ["attn_v", "attn_s"] {
            for proj in ATTN_PROJ {
                out.push(format!("b{b}.{attn}.{proj}"));
            }
        }
        for ffn in ["ffn_v", "ffn_s"] {
            for t in FFN_TENSORS {
                out.push(format!("b{b}.{ffn}.{t}"));
            }
        }
    }
    out
}

fn sweep_enhancer() -> ModuleReport {
    let blocks = 2;
    let groups = enhancer_groups(blocks);
    sweep("enhancer", &groups, 5e-3, move |seed| {
        let mut r = rng(seed);
        let (d, d_ffn, nv, ns) = (4, 6, 3, 2);
        let mut ps = ParamStore::new();
        for b in 0..blocks {
            for ln in LN_SUBLAYERS {
                insert_ln(&mut ps, &mut r, &format!("b{b}.{ln}"), d);
            }
            insert_attn(&mut ps, &mut r, &format!("b{b}.attn_v"), d);
            insert_attn(&mut ps, &mut r, &format!("b{b}.attn_s"), d);
            insert_ffn(&mut ps, &mut r, &format!("b{b}.ffn_v"), d, d_ffn);
            insert_ffn(&mut ps, &mut r, &format!("b{b}.ffn_s"), d, d_ffn);
        }
        ps.insert("input.v", randn(&mut r, &[nv, d], 1.0), true)
            .expect("fresh name");
        ps.insert("input.s", randn(&mut r, &[ns, d], 1.0), true)
            .expect("fresh name");
        let probe_v = randn(&mut r, &[nv, d], 1.0);
        let probe_s = randn(&mut r, &[ns, d], 1.0);

        let caches = {
            let w = enhancer_views(&ps, blocks);
            let v = ps.value("input.v").expect("inserted");
            let s = ps.value("input.s").expect("inserted");
            feature_enhancer_forward(v, s, &w).expect("widths agree").2
        };
        let grads = {
            let w = enhancer_views(&ps, blocks);
            feature_enhancer_backward(&caches, &w, &probe_v, &probe_s).expect("widths agree")
        };
        let first = grads.first().expect("at least one block");
        ps.acc_grad("input.v", &first.dv, 1.0).expect("inserted");
        ps.acc_grad("input.s", &first.ds, 1.0).expect("inserted");
        for (b, bg) in grads.iter().enumerate() {
            for (ln, g) in [
                ("ln_v_attn", &bg.ln_v_attn),
                ("ln_s_attn", &bg.ln_s_attn),
                ("ln_v_ffn", &bg.ln_v_ffn),
                ("ln_s_ffn", &bg.ln_s_ffn),
            ] {
                ps.acc_grad(&format!("b{b}.{ln}.gamma"), &g.dgamma, 1.0)
                    .expect("inserted");
                ps.acc_grad(&format!("b{b}.{ln}.beta"), &g.dbeta, 1.0)
                    .expect("inserted");
            }
            for (attn, g) in [("attn_v", &bg.attn_v), ("attn_s", &bg.attn_s)] {
                ps.acc_grad(&format!("b{b}.{attn}.wq"), &g.dwq, 1.0)
                    .expect("inserted");
                ps.acc_grad(&format!("b{b}.{attn}.wk"), &g.dwk, 1.0)
                    .expect("inserted");
                ps.acc_grad(&format!("b{b}.{attn}.wv"), &g.dwv, 1.0)
                    .expect("inserted");
                ps.acc_grad(&format!("b{b}.{attn}.wo"), &g.dwo, 1.0)
                    .expect("inserted");
            }
            for (ffn, g) in [("ffn_v", &bg.ffn_v), ("ffn_s", &bg.ffn_s)] {
                ps.acc_grad(&format!("b{b}.{ffn}.w1"), &g.dw1, 1.0)
                    .expect("inserted");
                ps.acc_grad(&format!("b{b}.{ffn}.b1"), &g.db1, 1.0)
                    .expect("inserted");
                ps.acc_grad(&format!("b{b}.{ffn}.w2"), &g.dw2, 1.0)
                    .expect("inserted");
                ps.acc_grad(&format!("b{b}.{ffn}.b2"), &g.db2, 1.0)
                    .expect("inserted");
            }
        }

        let loss = move |ps: &ParamStore| {
            let w = enhancer_views(ps, blocks);
            let v = ps.value("input.v").expect("inserted");
            let s = ps.value("input.s").expect("inserted");
            let (v2, s2, _) = feature_enhancer_forward(v, s, &w).expect("widths agree");
            dot(v2.data(), probe_v.data()) + dot(s2.data(), probe_s.data())
        };
        Some(Instance {
            ps,
            loss: Box::new(loss),
        })
    })
}

// ---------------------------------------------------------------------------
// Decoder stack with heads
// ---------------------------------------------------------------------------

fn decoder_views<'a>(ps: &'a ParamStore, layers: usize) -> Vec<DecoderLayerWeights<'a>> {
    (0..layers)
        .map(|l| DecoderLayerWeights {
            ln_self: ln_view(ps, &format!("l{l}.ln_self")),
            attn_self: attn_view(ps, &format!("l{l}.attn_self")),
            ln_visual: ln_view(ps, &format!("l{l}.ln_visual")),
            attn_visual: attn_view(ps, &format!("l{l}.attn_visual")),
            ln_speech: ln_view(ps, &format!("l{l}.ln_speech")),
            attn_speech: attn_view(ps, &format!("l{l}.attn_speech")),
            ln_ffn: ln_view(ps, &format!("l{l}.ln_ffn")),
            ffn: ffn_view(ps, &format!("l{l}.ffn")),
            mole: None,
        })
        .collect()
}

fn head_view<'a>(ps: &'a ParamStore) -> HeadWeights<'a> {
    HeadWeights {
        w_box: ps.value("head.w_box").expect("inserted"),
        b_box: ps.value("head.b_box").expect("inserted"),
    }
}

fn decoder_groups(layers: usize) -> Vec<String> {
    let mut out = vec!["q".to_string(), "visual".to_string(), "speech".to_string()];
    for l in 0..layers {
        for ln in ["ln_self", "ln_visual", "ln_speech", "ln_ffn"] {
            out.push(format!("l{l}.{ln}.gamma"));
            out.push(format!("l{l}.{ln}.beta"));
        }
        for attn in ["attn_self", "attn_visual", "attn_speech"] {
            for proj in ATTN_PROJ {
                out.push(format!("l{l}.{attn}.{proj}"));
            }
        }
        for t in FFN_TENSORS {
            out.push(format!("l{l}.ffn.{t}"));
        }
    }
    out.push("head.w_box".to_string());
    out.push("head.b_box".to_string());
    out
}

fn sweep_decoder() -> ModuleReport {
    let layers = 2;
    let groups = decoder_groups(layers);
    sweep("decoder", &groups, 5e-3, move |seed| {
        let mut r = rng(seed);
        let (d, d_ffn, nq, nv, ns) = (4, 6, 3, 4, 2);
        let mut ps = ParamStore::new();
        for l in 0..layers {
            for ln in ["ln_self", "ln_visual", "ln_speech", "ln_ffn"] {
                insert_ln(&mut ps, &mut r, &format!("l{l}.{ln}"), d);
            }
            for attn in ["attn_self", "attn_visual", "attn_speech"] {
                insert_attn(&mut ps, &mut r, &format!("l{l}.{attn}"), d);
            }
            insert_ffn(&mut ps, &mut r, &format!("l{l}.ffn"), d, d_ffn);
        }
        ps.insert("head.w_box", randn(&mut r, &[4, d], 0.3), true)
            .expect("fresh name");
        ps.insert("head.b_box", randn(&mut r, &[4], 0.3), true)
            .expect("fresh name");
        ps.insert("q", randn(&mut r, &[nq, d], 1.0), true)
            .expect("fresh name");
        ps.insert("visual", randn(&mut r, &[nv, d], 1.0), true)
            .expect("fresh name");
        ps.insert("speech", randn(&mut r, &[ns, d], 1.0), true)
            .expect("fresh name");

        let refs: Vec<[f64; 4]> = (0..nq)
            .map(|_| {
                [
                    r.gen_range(0.3..=0.7),
                    r.gen_range(0.3..=0.7),
                    r.gen_range(0.2..=0.4),
                    r.gen_range(0.2..=0.4),
                ]
            })
            .collect();
        let probe_box: Vec<[f64; 4]> = (0..nq)
            .map(|_| {
                let t = randn(&mut r, &[4], 1.0);
                [t.data()[0], t.data()[1], t.data()[2], t.data()[3]]
            })
            .collect();
        let probe_logits = randn(&mut r, &[nq, ns], 1.0);

        let cache = {
            let w = decoder_views(&ps, layers);
            let head = head_view(&ps);
            decoder_forward(
                ps.value("q").expect("inserted"),
                &refs,
                ps.value("visual").expect("inserted"),
                ps.value("speech").expect("inserted"),
                &w,
                &head,
                None,
            )
            .expect("widths agree")
            .1
        };
        let dg = {
            let w = decoder_views(&ps, layers);
            let head = head_view(&ps);
            decoder_backward(&cache, &w, &head, &probe_box, &probe_logits).expect("widths agree")
        };
        ps.acc_grad("q", &dg.dq, 1.0).expect("inserted");
        ps.acc_grad("visual", &dg.dvisual, 1.0).expect("inserted");
        ps.acc_grad("speech", &dg.dspeech, 1.0).expect("inserted");
        ps.acc_grad("head.w_box", &dg.head.dw_box, 1.0)
            .expect("inserted");
        ps.acc_grad("head.b_box", &dg.head.db_box, 1.0)
            .expect("inserted");
        for (l, lg) in dg.layers.iter().enumerate() {
            for (ln, g) in [
                ("ln_self", &lg.ln_self),
                ("ln_visual", &lg.ln_visual),
                ("ln_speech", &lg.ln_speech),
                ("ln_ffn", &lg.ln_ffn),
            ] {
                ps.acc_grad(&format!("l{l}.{ln}.gamma"), &g.dgamma, 1.0)
                    .expect("inserted");
                ps.acc_grad(&format!("l{l}.{ln}.beta"), &g.dbeta, 1.0)
                    .expect("inserted");
            }
            for (attn, g) in [
                ("attn_self", &lg.attn_self),
                ("attn_visual", &lg.attn_visual),
                ("attn_speech", &lg.attn_speech),
            ] {
                ps.acc_grad(&format!("l{l}.{attn}.wq"), &g.dwq, 1.0)
                    .expect("inserted");
                ps.acc_grad(&format!("l{l}.{attn}.wk"), &g.dwk, 1.0)
                    .expect("inserted");
                ps.acc_grad(&format!("l{l}.{attn}.wv"), &g.dwv, 1.0)
                    .expect("inserted");
                ps.acc_grad(&format!("l{l}.{attn}.wo"), &g.dwo, 1.0)
                    .expect("inserted");
            }
            let FfnPathGrads::Plain(g) = &lg.ffn else {
                unreachable!("no experts attached");
            };
            ps.acc_grad(&format!("l{l}.ffn.w1"), &g.dw1, 1.0)
                .expect("inserted");
            ps.acc_grad(&format!("l{l}.ffn.b1"), &g.db1, 1.0)
                .expect("inserted");
            ps.acc_grad(&format!("l{l}.ffn.w2"), &g.dw2, 1.0)
                .expect("inserted");
            ps.acc_grad(&format!("l{l}.ffn.b2"), &g.db2, 1.0)
                .expect("inserted");
        }

        let loss = move |ps: &ParamStore| {
            let w = decoder_views(ps, layers);
            let head = head_view(ps);
            let (dets, _) = decoder_forward(
                ps.value("q").expect("inserted"),
                &refs,
                ps.value("visual").expect("inserted"),
                ps.value("speech").expect("inserted"),
                &w,
                &head,
                None,
            )
            .expect("widths agree");
            let mut total = 0.0;
            for (i, det) in dets.iter().enumerate() {
                let b = [det.bbox.cx, det.bbox.cy, det.bbox.w, det.bbox.h];
                for c in 0..4 {
                    total += probe_box[i][c] * b[c];
                }
                total += dot(&det.logits, probe_logits.row(i));
            }
            total
        };
        Some(Instance {
            ps,
            loss: Box::new(loss),
        })
    })
}

// ---------------------------------------------------------------------------
// Routed expert feed-forward
// ---------------------------------------------------------------------------

/// Weight on the balance term of the mole instance loss. Large enough that
/// the router's gradient clears the conditioning floor.
const BALANCE_WEIGHT: f64 = 4.0;

/// Smallest top-1 routing margin accepted for an instance. Probing any
/// parameter by [`STEP`] moves gate logits far less, so the winner is stable
/// through every central difference.
const ROUTE_MARGIN: f64 = 1e-3;

fn mole_views<'a>(ps: &'a ParamStore, k_e: usize, rank: usize, alpha: f64) -> MoleWeights<'a> {
    let expert = |set: usize, j: usize| {
        LoraExpert::new(
            ps.value(&format!("e{set}.{j}.a")).expect("inserted"),
            ps.value(&format!("e{set}.{j}.b")).expect("inserted"),
            rank,
            alpha,
        )
    };
    MoleWeights {
        gate: ps.value("gate").expect("inserted"),
        experts1: (0..k_e).map(|j| expert(1, j)).collect(),
        experts2: (0..k_e).map(|j| expert(2, j)).collect(),
    }
}

fn mole_groups(k_e: usize) -> Vec<String> {
    let mut out: Vec<String> = ["x", "gate", "w1", "b1", "w2", "b2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for set in [1, 2] {
        for j in 0..k_e {
            out.push(format!("e{set}.{j}.a"));
            out.push(format!("e{set}.{j}.b"));
        }
    }
    out
}

fn sweep_mole() -> ModuleReport {
    let (d, d_ffn, n, k_e, rank) = (4, 6, 5, 2, 2);
    let alpha = 4.0;
    let groups = mole_groups(k_e);
    sweep("mole", &groups, 5e-3, move |seed| {
        let mut r = rng(seed);
        let mut ps = ParamStore::new();
        ps.insert("x", randn(&mut r, &[n, d], 1.0), true)
            .expect("fresh name");
        ps.insert("gate", randn(&mut r, &[k_e, d], 1.0), true)
            .expect("fresh name");
        ps.insert("w1", randn(&mut r, &[d_ffn, d], 0.4), true)
            .expect("fresh name");
        ps.insert("b1", randn(&mut r, &[d_ffn], 0.4), true)
            .expect("fresh name");
        ps.insert("w2", randn(&mut r, &[d, d_ffn], 0.4), true)
            .expect("fresh name");
        ps.insert("b2", randn(&mut r, &[d], 0.4), true)
            .expect("fresh name");
        for j in 0..k_e {
            ps.insert(&format!("e1.{j}.a"), randn(&mut r, &[rank, d], 0.5), true)
                .expect("fresh name");
            ps.insert(
                &format!("e1.{j}.b"),
                randn(&mut r, &[d_ffn, rank], 0.5),
                true,
            )
            .expect("fresh name");
            ps.insert(
                &format!("e2.{j}.a"),
                randn(&mut r, &[rank, d_ffn], 0.5),
                true,
            )
            .expect("fresh name");
            ps.insert(&format!("e2.{j}.b"), randn(&mut r, &[d, rank], 0.5), true)
                .expect("fresh name");
        }
        let probe = randn(&mut r, &[n, d], 1.0);

        // Instances where a token sits near the routing boundary are
        // rejected; the argmax must hold still under every probe.
        {
            let gate = ps.value("gate").expect("inserted");
            let x = ps.value("x").expect("inserted");
            for t in 0..n {
                let mut scores: Vec<f64> = (0..k_e).map(|e| dot(gate.row(e), x.row(t))).collect();
                scores.sort_by(|a, b| b.total_cmp(a));
                if scores[0] - scores[1] < ROUTE_MARGIN {
                    return None;
                }
            }
        }

        let (stats, cache) = {
            let mw = mole_views(&ps, k_e, rank, alpha);
            let mut stats = RoutingStats::new(k_e);
            let (_, cache) = mole_ffn_forward(
                ps.value("x").expect("inserted"),
                ps.value("w1").expect("inserted"),
                ps.value("b1").expect("inserted"),
                ps.value("w2").expect("inserted"),
                ps.value("b2").expect("inserted"),
                &mw,
                Some(&mut stats),
            )
            .expect("widths agree");
            (stats, cache)
        };
        {
            let mw = mole_views(&ps, k_e, rank, alpha);
            let g = mole_ffn_backward(
                &cache,
                ps.value("w1").expect("inserted"),
                ps.value("w2").expect("inserted"),
                &mw,
                &probe,
            )
            .expect("widths agree");
            let bal = balance_backward(
                ps.value("gate").expect("inserted"),
                ps.value("x").expect("inserted"),
                cache.probs(),
                &stats.fractions(),
                stats.tokens() as f64,
                BALANCE_WEIGHT,
            )
            .expect("widths agree");
            ps.acc_grad("x", &g.dx, 1.0).expect("inserted");
            ps.acc_grad("x", &bal.dtokens, 1.0).expect("inserted");
            ps.acc_grad("gate", &bal.dgate, 1.0).expect("inserted");
            ps.acc_grad("w1", &g.dw1, 1.0).expect("inserted");
            ps.acc_grad("b1", &g.db1, 1.0).expect("inserted");
            ps.acc_grad("w2", &g.dw2, 1.0).expect("inserted");
            ps.acc_grad("b2", &g.db2, 1.0).expect("inserted");
            for (set, eg) in [(1, &g.experts1), (2, &g.experts2)] {
                for (j, e) in eg.iter().enumerate() {
                    ps.acc_grad(&format!("e{set}.{j}.a"), &e.da, 1.0)
                        .expect("inserted");
                    ps.acc_grad(&format!("e{set}.{j}.b"), &e.db, 1.0)
                        .expect("inserted");
                }
            }
        }

        let loss = move |ps: &ParamStore| {
            let mw = mole_views(ps, k_e, rank, alpha);
            let mut stats = RoutingStats::new(k_e);
            let (y, _) = mole_ffn_forward(
                ps.value("x").expect("inserted"),
                ps.value("w1").expect("inserted"),
                ps.value("b1").expect("inserted"),
                ps.value("w2").expect("inserted"),
                ps.value("b2").expect("inserted"),
                &mw,
                Some(&mut stats),
            )
            .expect("widths agree");
            dot(y.data(), probe.data()) + BALANCE_WEIGHT * load_balance_loss(&stats)
        };
        Some(Instance {
            ps,
            loss: Box::new(loss),
        })
    })
}

// ---------------------------------------------------------------------------
// Box losses and alignment
// ---------------------------------------------------------------------------

fn box_from(t: &Tensor) -> CenterBox {
    CenterBox::new(t.data()[0], t.data()[1], t.data()[2], t.data()[3])
}

fn random_box(r: &mut ChaCha8Rng) -> CenterBox {
    CenterBox::new(
        r.gen_range(0.3..=0.7),
        r.gen_range(0.3..=0.7),
        r.gen_range(0.15..=0.4),
        r.gen_range(0.15..=0.4),
    )
}

fn box_tensor(b: &CenterBox) -> Tensor {
    Tensor::from_vec(&[4], vec![b.cx, b.cy, b.w, b.h]).expect("four entries")
}

/// Distance of the box pair from the nearest kink of the IoU family:
/// coinciding corner coordinates and a grazing intersection edge.
fn kink_margin(a: &CenterBox, b: &CenterBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    [
        (ax1 - bx1).abs(),
        (ax2 - bx2).abs(),
        (ay1 - by1).abs(),
        (ay2 - by2).abs(),
        iw.abs(),
        ih.abs(),
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min)
}

fn sweep_giou() -> ModuleReport {
    let groups = names(&["box_a".into(), "box_b".into()]);
    sweep("giou", &groups, 1e-3, |seed| {
        let mut r = rng(seed);
        let a = random_box(&mut r);
        let b = random_box(&mut r);
        if kink_margin(&a, &b) < 5e-3 {
            return None;
        }
        let (da, db) = giou_backward(&a, &b);
        let mut ps = ParamStore::new();
        ps.insert("box_a", box_tensor(&a), true).expect("fresh name");
        ps.insert("box_b", box_tensor(&b), true).expect("fresh name");
        ps.acc_grad("box_a", &Tensor::from_vec(&[4], da.to_vec()).expect("four"), 1.0)
            .expect("inserted");
        ps.acc_grad("box_b", &Tensor::from_vec(&[4], db.to_vec()).expect("four"), 1.0)
            .expect("inserted");

        let loss = |ps: &ParamStore| {
            giou(
                &box_from(ps.value("box_a").expect("inserted")),
                &box_from(ps.value("box_b").expect("inserted")),
            )
        };
        Some(Instance {
            ps,
            loss: Box::new(loss),
        })
    })
}

fn sweep_l1() -> ModuleReport {
    let groups = names(&["box_a".into()]);
    sweep("l1", &groups, 0.5, |seed| {
        let mut r = rng(seed);
        let a = random_box(&mut r);
        let b = random_box(&mut r);
        // Keep every coordinate pair away from the absolute-value kink.
        let apart = [a.cx - b.cx, a.cy - b.cy, a.w - b.w, a.h - b.h]
            .into_iter()
            .all(|d| d.abs() >= 1e-3);
        if !apart {
            return None;
        }
        let da = l1_box_backward(&a, &b);
        let mut ps = ParamStore::new();
        ps.insert("box_a", box_tensor(&a), true).expect("fresh name");
        ps.acc_grad("box_a", &Tensor::from_vec(&[4], da.to_vec()).expect("four"), 1.0)
            .expect("inserted");

        let loss = move |ps: &ParamStore| {
            l1_box_loss(&box_from(ps.value("box_a").expect("inserted")), &b)
        };
        Some(Instance {
            ps,
            loss: Box::new(loss),
        })
    })
}

fn sweep_focal() -> ModuleReport {
    let groups = names(&["logits".into()]);
    sweep("focal", &groups, 1e-4, |seed| {
        let mut r = rng(seed);
        let (nq, k) = (2, 3);
        let logits = randn(&mut r, &[nq, k], 1.2);
        let mut positives = Tensor::zeros(&[nq, k]).expect("dims nonzero");
        for v in positives.data_mut() {
            *v = if r.gen_range(0.0..1.0) < 0.5 { 1.0 } else { 0.0 };
        }
        let fp = FocalParams::default();
        let (_, grad) = alignment_loss_backward(&logits, &positives, &fp).expect("shapes agree");

        let mut ps = ParamStore::new();
        ps.insert("logits", logits, true).expect("fresh name");
        ps.acc_grad("logits", &grad, 1.0).expect("inserted");

        let loss = move |ps: &ParamStore| {
            alignment_loss_backward(ps.value("logits").expect("inserted"), &positives, &fp)
                .expect("shapes agree")
                .0
        };
        Some(Instance {
            ps,
            loss: Box::new(loss),
        })
    })
}
