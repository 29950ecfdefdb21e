//! COCO-style detection metrics over synthetic scenes. Predictions are
//! scored per category from the alignment logits over that category's token
//! span, matched greedily to ground truth at ten IoU thresholds, and summed
//! into 101-point interpolated average precision.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::loss::{Detection, GroundTruthObject};
use crate::matching::{iou, CenterBox};
use crate::model::{GroundingModel, ModelError};
use crate::nn::sigmoid;
use crate::scene::SyntheticScene;

pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Serialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_category: BTreeMap<usize, f64>,
}

#[derive(Debug)]
pub enum EvalError {
    EmptyCorpus,
    NoGroundTruth,
    Model(ModelError),
    BadSpan { category: usize, token: usize, tokens: usize },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::EmptyCorpus => write!(f, "evaluation corpus is empty"),
            EvalError::NoGroundTruth => write!(f, "no scene has any ground-truth object"),
            EvalError::Model(e) => write!(f, "evaluation forward pass: {e}"),
            EvalError::BadSpan { category, token, tokens } => write!(
                f,
                "category {category} span points at token {token} of {tokens}"
            ),
        }
    }
}

impl std::error::Error for EvalError {}

/// One scene's predictions paired with its annotations.
pub type ScenePair = (Vec<Detection>, Vec<GroundTruthObject>);

struct ScoredBox {
    scene: usize,
    score: f64,
    bbox: CenterBox,
}

/// Fast evaluator: incremental greedy matching plus cumulative
/// precision/recall arrays.
pub fn evaluate_scenes(scenes: &[ScenePair]) -> Result<EvalResult, EvalError> {
    run(scenes, false)
}

/// Slow reference evaluator: enumerates every prediction-to-truth matching
/// per scene and recomputes each interpolation point from scratch. Exists to
/// cross-check [`evaluate_scenes`]; identical results, far more work.
pub fn evaluate_scenes_reference(scenes: &[ScenePair]) -> Result<EvalResult, EvalError> {
    run(scenes, true)
}

/// Runs the model over each scene and evaluates the outputs.
pub fn evaluate_model(
    model: &GroundingModel,
    scenes: &[SyntheticScene],
) -> Result<EvalResult, EvalError> {
    let mut pairs = Vec::with_capacity(scenes.len());
    for sc in scenes {
        let (dets, _) = model
            .forward(&sc.visual, &sc.speech, None)
            .map_err(EvalError::Model)?;
        pairs.push((dets, sc.ground_truths.clone()));
    }
    evaluate_scenes(&pairs)
}

fn run(scenes: &[ScenePair], reference: bool) -> Result<EvalResult, EvalError> {
    if scenes.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut gts_by_cat: BTreeMap<usize, Vec<(usize, CenterBox)>> = BTreeMap::new();
    let mut dets_by_cat: BTreeMap<usize, Vec<ScoredBox>> = BTreeMap::new();
    for (si, (dets, gts)) in scenes.iter().enumerate() {
        let mut spans: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for g in gts {
            spans.entry(g.category).or_default().extend(g.span.iter().copied());
            gts_by_cat.entry(g.category).or_default().push((si, g.bbox));
        }
        // A prediction competes for a category only in scenes whose speech
        // mentions it; the span is where its alignment evidence lives.
        for (&cat, span) in &spans {
            for d in dets {
                let mut score = f64::NEG_INFINITY;
                for &t in span {
                    if t >= d.logits.len() {
                        return Err(EvalError::BadSpan {
                            category: cat,
                            token: t,
                            tokens: d.logits.len(),
                        });
                    }
                    score = score.max(sigmoid(d.logits[t]));
                }
                dets_by_cat.entry(cat).or_default().push(ScoredBox {
                    scene: si,
                    score,
                    bbox: d.bbox,
                });
            }
        }
    }
    if gts_by_cat.is_empty() {
        return Err(EvalError::NoGroundTruth);
    }

    let mut per_category = BTreeMap::new();
    let mut ap50_sum = 0.0;
    let mut ap75_sum = 0.0;
    for (cat, gts) in &gts_by_cat {
        let mut dets = dets_by_cat.remove(cat).unwrap_or_default();
        // Stable sort: equal scores keep scene order, then prediction order.
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut cat_sum = 0.0;
        for (ti, &thresh) in IOU_THRESHOLDS.iter().enumerate() {
            let ap = if reference {
                ap_reference(&reference_flags(&dets, gts, thresh), gts.len())
            } else {
                ap_interpolated(&greedy_flags(&dets, gts, thresh), gts.len())
            };
            cat_sum += ap;
            if ti == 0 {
                ap50_sum += ap;
            }
            if ti == 5 {
                ap75_sum += ap;
            }
        }
        per_category.insert(*cat, cat_sum / IOU_THRESHOLDS.len() as f64);
    }
    let nc = per_category.len() as f64;
    Ok(EvalResult {
        ap: per_category.values().sum::<f64>() / nc,
        ap50: ap50_sum / nc,
        ap75: ap75_sum / nc,
        per_category,
    })
}

/// True-positive flags in rank order: each detection takes the unmatched
/// same-scene truth of highest IoU, ties to the lower index, and counts only
/// when that IoU clears the threshold.
fn greedy_flags(dets: &[ScoredBox], gts: &[(usize, CenterBox)], thresh: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(f64, usize)> = None;
            for (gi, (scene, gb)) in gts.iter().enumerate() {
                if used[gi] || *scene != d.scene {
                    continue;
                }
                let v = iou(&d.bbox, gb);
                if v >= thresh && best.map_or(true, |(bv, _)| v > bv) {
                    best = Some((v, gi));
                }
            }
            match best {
                Some((_, gi)) => {
                    used[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

type MatchKey = (u8, f64, i64);

fn key_seq_gt(a: &[MatchKey], b: &[MatchKey]) -> bool {
    for (ka, kb) in a.iter().zip(b) {
        let ord = ka
            .0
            .cmp(&kb.0)
            .then(ka.1.total_cmp(&kb.1))
            .then(ka.2.cmp(&kb.2));
        match ord {
            std::cmp::Ordering::Greater => return true,
            std::cmp::Ordering::Less => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    false
}

/// Same matching as [`greedy_flags`] found the expensive way: every
/// assignment of detections to truths is enumerated and the sequence a
/// rank-by-rank greedy would pick is selected as the lexicographic maximum
/// of per-rank (matched, IoU, lower index) keys.
fn reference_flags(dets: &[ScoredBox], gts: &[(usize, CenterBox)], thresh: f64) -> Vec<bool> {
    fn explore(
        i: usize,
        dets: &[ScoredBox],
        gts: &[(usize, CenterBox)],
        thresh: f64,
        used: &mut Vec<bool>,
        keys: &mut Vec<MatchKey>,
        flags: &mut Vec<bool>,
        best: &mut Option<(Vec<MatchKey>, Vec<bool>)>,
    ) {
        if i == dets.len() {
            if best.as_ref().map_or(true, |(bk, _)| key_seq_gt(keys, bk)) {
                *best = Some((keys.clone(), flags.clone()));
            }
            return;
        }
        for (gi, (scene, gb)) in gts.iter().enumerate() {
            if used[gi] || *scene != dets[i].scene {
                continue;
            }
            let v = iou(&dets[i].bbox, gb);
            if v < thresh {
                continue;
            }
            used[gi] = true;
            keys.push((1, v, -(gi as i64)));
            flags.push(true);
            explore(i + 1, dets, gts, thresh, used, keys, flags, best);
            flags.pop();
            keys.pop();
            used[gi] = false;
        }
        keys.push((0, 0.0, 0));
        flags.push(false);
        explore(i + 1, dets, gts, thresh, used, keys, flags, best);
        flags.pop();
        keys.pop();
    }

    let mut best = None;
    explore(
        0,
        dets,
        gts,
        thresh,
        &mut vec![false; gts.len()],
        &mut Vec::new(),
        &mut Vec::new(),
        &mut best,
    );
    best.expect("unmatched path always exists").1
}

/// 101-point interpolated AP from true-positive flags in rank order.
fn ap_interpolated(flags: &[bool], n_gt: usize) -> f64 {
    let n = flags.len();
    let mut prec = Vec::with_capacity(n);
    let mut rec = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (k, &hit) in flags.iter().enumerate() {
        tp += hit as usize;
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    let mut from_k = prec.clone();
    for k in (0..n.saturating_sub(1)).rev() {
        from_k[k] = from_k[k].max(from_k[k + 1]);
    }
    (0..RECALL_POINTS)
        .map(|j| {
            let r = j as f64 / 100.0;
            let k = rec.partition_point(|&x| x < r);
            if k < n { from_k[k] } else { 0.0 }
        })
        .sum::<f64>()
        / RECALL_POINTS as f64
}

/// AP recomputed point by point with no shared running state; pairs with
/// [`reference_flags`] in the slow evaluator.
fn ap_reference(flags: &[bool], n_gt: usize) -> f64 {
    (0..RECALL_POINTS)
        .map(|j| {
            let r = j as f64 / 100.0;
            let mut best = 0.0f64;
            for k in 0..flags.len() {
                let tp = flags[..=k].iter().filter(|&&b| b).count();
                if tp as f64 / n_gt as f64 >= r {
                    best = best.max(tp as f64 / (k + 1) as f64);
                }
            }
            best
        })
        .sum::<f64>()
        / RECALL_POINTS as f64
}
