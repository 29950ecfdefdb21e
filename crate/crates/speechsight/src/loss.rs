//! Detection objective: sigmoid focal alignment over the query/token grid,
//! L1 + GIoU box regression on matched pairs, and the combined total with
//! the router balance term.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::matching::{
    giou, giou_backward, hungarian_match, l1_box_backward, l1_box_loss, CenterBox, MatchAssignment,
    MatchError,
};
use crate::nn::{sigmoid, softplus};
use crate::tensor::{Tensor, TensorError};

/// One decoded prediction: a normalized center-size box plus one alignment
/// logit per aggregated speech token.
#[derive(Debug, Clone)]
pub struct Detection {
    pub bbox: CenterBox,
    pub logits: Vec<f64>,
}

/// An annotated scene object. `span` indexes the aggregated speech tokens
/// that describe the object; it is non-empty and within the token count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub bbox: CenterBox,
    pub category: usize,
    pub span: Vec<usize>,
}

/// Weights for the classification, L1, and GIoU terms. Used both for the
/// matching cost and for the training loss, with different values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub w_cls: f64,
    pub w_l1: f64,
    pub w_giou: f64,
}

impl CostWeights {
    pub fn new(w_cls: f64, w_l1: f64, w_giou: f64) -> CostWeights {
        CostWeights {
            w_cls,
            w_l1,
            w_giou,
        }
    }

    /// Matching-cost weighting.
    pub fn matching() -> CostWeights {
        CostWeights::new(2.0, 5.0, 2.0)
    }

    /// Training-loss weighting.
    pub fn training() -> CostWeights {
        CostWeights::new(1.0, 5.0, 2.0)
    }
}

/// Focal modulation parameters. `alpha: None` disables the class-balance
/// factor entirely (both positives and negatives weighted 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: Option<f64>,
}

impl Default for FocalParams {
    fn default() -> FocalParams {
        FocalParams {
            gamma: 2.0,
            alpha: Some(0.25),
        }
    }
}

#[derive(Debug)]
pub enum LossError {
    Match(MatchError),
    Tensor(TensorError),
    EmptySpan {
        gt: usize,
    },
    SpanOutOfRange {
        gt: usize,
        index: usize,
        tokens: usize,
    },
    LogitLength {
        pred: usize,
        expected: usize,
        got: usize,
    },
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::Match(e) => write!(f, "matching failed: {e}"),
            LossError::Tensor(e) => write!(f, "tensor shape error: {e}"),
            LossError::EmptySpan { gt } => write!(f, "ground truth {gt} has an empty token span"),
            LossError::SpanOutOfRange { gt, index, tokens } => write!(
                f,
                "ground truth {gt} references token {index} but only {tokens} exist"
            ),
            LossError::LogitLength {
                pred,
                expected,
                got,
            } => write!(
                f,
                "prediction {pred} carries {got} alignment logits, expected {expected}"
            ),
        }
    }
}

impl std::error::Error for LossError {}

impl From<MatchError> for LossError {
    fn from(e: MatchError) -> LossError {
        LossError::Match(e)
    }
}

impl From<TensorError> for LossError {
    fn from(e: TensorError) -> LossError {
        LossError::Tensor(e)
    }
}

/// Per-term values of one scene's objective. `l_det` recombines the first
/// three with the training weights; `l_total` folds in the balance term.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_l1: f64,
    pub l_giou: f64,
    pub l_det: f64,
    pub l_lb: f64,
    pub l_total: f64,
}

/// Sigmoid focal term for one cell: loss and its derivative in the logit.
/// Log-probabilities come from softplus so saturated logits stay finite.
fn focal_cell(z: f64, positive: bool, fp: &FocalParams) -> (f64, f64) {
    let p = sigmoid(z);
    let ln_p = -softplus(-z);
    let ln_1mp = -softplus(z);
    if positive {
        let a = fp.alpha.unwrap_or(1.0);
        let m = (1.0 - p).powf(fp.gamma);
        let loss = -a * m * ln_p;
        let dz = a * m * (fp.gamma * p * ln_p - (1.0 - p));
        (loss, dz)
    } else {
        let a = fp.alpha.map_or(1.0, |al| 1.0 - al);
        let m = p.powf(fp.gamma);
        let loss = -a * m * ln_1mp;
        let dz = a * m * (p - fp.gamma * (1.0 - p) * ln_1mp);
        (loss, dz)
    }
}

/// Mean sigmoid focal cross-entropy between an `N_q x K` logit grid and a
/// binary positive map of the same shape.
pub fn alignment_loss(
    logits: &Tensor,
    positives: &Tensor,
    fp: &FocalParams,
) -> Result<f64, TensorError> {
    alignment_loss_backward(logits, positives, fp).map(|(l, _)| l)
}

/// [`alignment_loss`] together with its gradient in the logits.
pub fn alignment_loss_backward(
    logits: &Tensor,
    positives: &Tensor,
    fp: &FocalParams,
) -> Result<(f64, Tensor), TensorError> {
    if logits.dims() != positives.dims() {
        return Err(TensorError::ShapeMismatch {
            op: "alignment_loss",
            left: logits.dims().to_vec(),
            right: positives.dims().to_vec(),
        });
    }
    let cells = logits.len();
    if cells == 0 {
        return Ok((0.0, logits.clone()));
    }
    let inv = 1.0 / cells as f64;
    let mut grad = Tensor::zeros(logits.dims())?;
    let mut total = 0.0;
    for i in 0..cells {
        let (l, dz) = focal_cell(logits.data()[i], positives.data()[i] > 0.5, fp);
        total += l * inv;
        grad.data_mut()[i] = dz * inv;
    }
    Ok((total, grad))
}

/// Matching cost of one prediction against one ground truth: weighted focal
/// classification over the prediction's logit row (positives on the span),
/// L1 distance, and negated GIoU.
pub fn pair_cost(
    pred: &Detection,
    gt: &GroundTruthObject,
    w: &CostWeights,
    fp: &FocalParams,
) -> f64 {
    let k = pred.logits.len();
    let mut c_cls = 0.0;
    if k > 0 {
        for (j, &z) in pred.logits.iter().enumerate() {
            c_cls += focal_cell(z, gt.span.contains(&j), fp).0;
        }
        c_cls /= k as f64;
    }
    w.w_cls * c_cls
        + w.w_l1 * l1_box_loss(&pred.bbox, &gt.bbox)
        + w.w_giou * (-giou(&pred.bbox, &gt.bbox))
}

/// [`detection_loss`] output: the per-term breakdown, the assignment it was
/// computed under, and gradients of `l_det` in each prediction.
#[derive(Debug, Clone)]
pub struct DetectionLossOutput {
    pub breakdown: LossBreakdown,
    pub assignment: MatchAssignment,
    /// d l_det / d (cx, cy, w, h) per prediction.
    pub dboxes: Vec<[f64; 4]>,
    /// d l_det / d logits, `N_q x K`.
    pub dlogits: Tensor,
}

fn validate_inputs(preds: &[Detection], gts: &[GroundTruthObject]) -> Result<usize, LossError> {
    let k = preds.first().map_or(0, |p| p.logits.len());
    for (i, p) in preds.iter().enumerate() {
        if p.logits.len() != k {
            return Err(LossError::LogitLength {
                pred: i,
                expected: k,
                got: p.logits.len(),
            });
        }
    }
    for (g, gt) in gts.iter().enumerate() {
        if gt.span.is_empty() {
            return Err(LossError::EmptySpan { gt: g });
        }
        for &j in &gt.span {
            if j >= k {
                return Err(LossError::SpanOutOfRange {
                    gt: g,
                    index: j,
                    tokens: k,
                });
            }
        }
    }
    Ok(k)
}

/// Matches predictions to ground truths with `match_w`, then scores the
/// matched set with `loss_w`: box terms averaged over the ground-truth
/// count, alignment over the full grid with unmatched rows all-negative.
pub fn detection_loss(
    preds: &[Detection],
    gts: &[GroundTruthObject],
    match_w: &CostWeights,
    loss_w: &CostWeights,
    fp: &FocalParams,
) -> Result<DetectionLossOutput, LossError> {
    let k = validate_inputs(preds, gts)?;
    let n_q = preds.len();

    let assignment = if gts.is_empty() {
        MatchAssignment {
            pairs: vec![],
            unmatched: (0..n_q).collect(),
            total_cost: 0.0,
        }
    } else {
        let costs: Vec<Vec<f64>> = preds
            .iter()
            .map(|p| gts.iter().map(|g| pair_cost(p, g, match_w, fp)).collect())
            .collect();
        hungarian_match(&costs)?
    };

    let mut logits = Tensor::zeros(&[n_q.max(1), k.max(1)])?;
    let mut positives = Tensor::zeros(&[n_q.max(1), k.max(1)])?;
    for (i, p) in preds.iter().enumerate() {
        for (j, &z) in p.logits.iter().enumerate() {
            logits.set2(i, j, z);
        }
    }
    for &(i, g) in &assignment.pairs {
        for &j in &gts[g].span {
            positives.set2(i, j, 1.0);
        }
    }

    let (l_cls_raw, dlogits_raw) = if n_q == 0 || k == 0 {
        (0.0, Tensor::zeros(&[n_q.max(1), k.max(1)])?)
    } else {
        alignment_loss_backward(&logits, &positives, fp)?
    };

    let norm = 1.0 / gts.len().max(1) as f64;
    let mut l_l1 = 0.0;
    let mut l_giou = 0.0;
    let mut dboxes = vec![[0.0; 4]; n_q];
    for &(i, g) in &assignment.pairs {
        let (pb, gb) = (&preds[i].bbox, &gts[g].bbox);
        l_l1 += l1_box_loss(pb, gb) * norm;
        l_giou += (1.0 - giou(pb, gb)) * norm;
        let dl1 = l1_box_backward(pb, gb);
        let (dg, _) = giou_backward(pb, gb);
        for c in 0..4 {
            dboxes[i][c] += loss_w.w_l1 * norm * dl1[c] - loss_w.w_giou * norm * dg[c];
        }
    }

    let l_det = loss_w.w_cls * l_cls_raw + loss_w.w_l1 * l_l1 + loss_w.w_giou * l_giou;
    let dlogits = dlogits_raw.scale(loss_w.w_cls);

    Ok(DetectionLossOutput {
        breakdown: LossBreakdown {
            l_cls: l_cls_raw,
            l_l1,
            l_giou,
            l_det,
            l_lb: 0.0,
            l_total: l_det,
        },
        assignment,
        dboxes,
        dlogits,
    })
}

/// Detection objective plus the layer-averaged balance term.
pub fn total_loss(l_det: f64, l_lb_per_layer: &[f64], lb_weight: f64) -> f64 {
    if l_lb_per_layer.is_empty() {
        return l_det;
    }
    let mean = l_lb_per_layer.iter().sum::<f64>() / l_lb_per_layer.len() as f64;
    l_det + lb_weight * mean
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::{randn, rng};
    use approx::assert_relative_eq;
    use rand::Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn bce() -> FocalParams {
        FocalParams {
            gamma: 0.0,
            alpha: None,
        }
    }

    fn focal_plain() -> FocalParams {
        FocalParams {
            gamma: 2.0,
            alpha: None,
        }
    }

    fn grid(rows: &[&[f64]]) -> Tensor {
        let owned: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        Tensor::from_rows(&owned).unwrap()
    }

    fn det(bbox: CenterBox, logits: &[f64]) -> Detection {
        Detection {
            bbox,
            logits: logits.to_vec(),
        }
    }

    fn gt(bbox: CenterBox, span: &[usize]) -> GroundTruthObject {
        GroundTruthObject {
            bbox,
            category: 0,
            span: span.to_vec(),
        }
    }

    #[test]
    fn zero_logit_bce_is_ln_two() {
        for positive in [true, false] {
            let (l, _) = focal_cell(0.0, positive, &bce());
            assert_relative_eq!(l, LN2, max_relative = 1e-15);
        }
    }

    #[test]
    fn focal_positive_at_half_probability() {
        // gamma = 2 multiplies the ln 2 base loss by (1 - 0.5)^2.
        let (l, _) = focal_cell(0.0, true, &focal_plain());
        assert_relative_eq!(l, 0.25 * LN2, max_relative = 1e-15);
        assert_relative_eq!(l, 0.1733, max_relative = 1e-3);
    }

    #[test]
    fn alpha_scales_positive_and_negative_sides() {
        let fp = FocalParams {
            gamma: 2.0,
            alpha: Some(0.25),
        };
        let z = 0.37;
        assert_relative_eq!(
            focal_cell(z, true, &fp).0,
            0.25 * focal_cell(z, true, &focal_plain()).0,
            max_relative = 1e-15
        );
        assert_relative_eq!(
            focal_cell(z, false, &fp).0,
            0.75 * focal_cell(z, false, &focal_plain()).0,
            max_relative = 1e-15
        );
    }

    #[test]
    fn saturated_logits_cost_nothing() {
        let logits = grid(&[&[60.0, -60.0], &[-60.0, -60.0]]);
        let positives = grid(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let l = alignment_loss(&logits, &positives, &FocalParams::default()).unwrap();
        assert!(l < 1e-12, "saturated loss {l}");
        assert!(l >= 0.0);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        for z in [-4000.0, -50.0, 0.0, 50.0, 4000.0] {
            for positive in [true, false] {
                let (l, dz) = focal_cell(z, positive, &FocalParams::default());
                assert!(l.is_finite() && dz.is_finite(), "z={z} pos={positive}");
            }
        }
    }

    #[test]
    fn alignment_loss_is_cell_mean() {
        let logits = grid(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let positives = grid(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert_relative_eq!(
            alignment_loss(&logits, &positives, &bce()).unwrap(),
            LN2,
            max_relative = 1e-15
        );
    }

    #[test]
    fn alignment_loss_rejects_shape_mismatch() {
        let logits = grid(&[&[0.0, 0.0]]);
        let positives = grid(&[&[0.0], &[0.0]]);
        assert!(alignment_loss(&logits, &positives, &bce()).is_err());
    }

    #[test]
    fn alignment_gradient_matches_finite_differences() {
        let mut r = rng(41);
        let fp = FocalParams::default();
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let logits = randn(&mut r, &[3, 4], 2.0);
            let mut positives = Tensor::zeros(&[3, 4]).unwrap();
            for v in positives.data_mut() {
                *v = if r.gen_bool(0.3) { 1.0 } else { 0.0 };
            }
            let (_, grad) = alignment_loss_backward(&logits, &positives, &fp).unwrap();
            let h = 1e-6;
            for i in 0..logits.len() {
                let mut plus = logits.clone();
                plus.data_mut()[i] += h;
                let mut minus = logits.clone();
                minus.data_mut()[i] -= h;
                let numeric = (alignment_loss(&plus, &positives, &fp).unwrap()
                    - alignment_loss(&minus, &positives, &fp).unwrap())
                    / (2.0 * h);
                let a = grad.data()[i];
                // Differences below the h=1e-6 central-difference noise floor
                // carry no signal about the analytic formula.
                if (a - numeric).abs() < 1e-9 {
                    continue;
                }
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()));
            }
        }
        assert!(worst < 1e-5, "alignment grad worst rel err {worst}");
    }

    #[test]
    fn pair_cost_identical_boxes_reduces_to_classification() {
        let b = CenterBox::new(0.4, 0.5, 0.3, 0.2);
        let pred = det(b, &[1.0, -2.0, 0.5]);
        let target = gt(b, &[0]);
        let w = CostWeights::matching();
        let fp = FocalParams::default();
        let mut c_cls = 0.0;
        for (j, &z) in pred.logits.iter().enumerate() {
            c_cls += focal_cell(z, j == 0, &fp).0;
        }
        c_cls /= 3.0;
        assert_relative_eq!(
            pair_cost(&pred, &target, &w, &fp),
            2.0 * c_cls - 2.0,
            max_relative = 1e-13
        );
    }

    #[test]
    fn pair_cost_l1_only_weights() {
        let pred = det(CenterBox::new(0.5, 0.5, 0.2, 0.2), &[0.3]);
        let target = gt(CenterBox::new(0.6, 0.5, 0.2, 0.4), &[0]);
        let w = CostWeights::new(0.0, 1.0, 0.0);
        assert_relative_eq!(
            pair_cost(&pred, &target, &w, &FocalParams::default()),
            0.3,
            max_relative = 1e-13
        );
    }

    #[test]
    fn pair_cost_grows_with_l1_distance() {
        let target = gt(CenterBox::new(0.5, 0.5, 0.2, 0.2), &[0]);
        let w = CostWeights::new(0.0, 5.0, 0.0);
        let fp = FocalParams::default();
        let near = det(CenterBox::new(0.52, 0.5, 0.2, 0.2), &[0.0]);
        let far = det(CenterBox::new(0.6, 0.5, 0.2, 0.2), &[0.0]);
        assert!(pair_cost(&near, &target, &w, &fp) < pair_cost(&far, &target, &w, &fp));
    }

    #[test]
    fn empty_scene_keeps_box_terms_zero() {
        let preds = vec![
            det(CenterBox::new(0.3, 0.3, 0.2, 0.2), &[0.4, -0.2]),
            det(CenterBox::new(0.7, 0.7, 0.2, 0.2), &[-0.1, 0.8]),
        ];
        let out = detection_loss(
            &preds,
            &[],
            &CostWeights::matching(),
            &CostWeights::training(),
            &FocalParams::default(),
        )
        .unwrap();
        assert_eq!(out.breakdown.l_l1, 0.0);
        assert_eq!(out.breakdown.l_giou, 0.0);
        assert!(out.assignment.pairs.is_empty());
        assert_eq!(out.assignment.unmatched, vec![0, 1]);
        let logits = grid(&[&[0.4, -0.2], &[-0.1, 0.8]]);
        let positives = Tensor::zeros(&[2, 2]).unwrap();
        let expected = alignment_loss(&logits, &positives, &FocalParams::default()).unwrap();
        assert_relative_eq!(out.breakdown.l_cls, expected, max_relative = 1e-15);
        assert!(out.dboxes.iter().all(|d| d.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn perfect_predictions_cost_almost_nothing() {
        let boxes = [
            CenterBox::new(0.3, 0.4, 0.2, 0.15),
            CenterBox::new(0.7, 0.6, 0.25, 0.3),
        ];
        let preds = vec![
            det(boxes[0], &[60.0, -60.0, -60.0]),
            det(boxes[1], &[-60.0, 60.0, -60.0]),
        ];
        let gts = vec![gt(boxes[0], &[0]), gt(boxes[1], &[1])];
        let out = detection_loss(
            &preds,
            &gts,
            &CostWeights::matching(),
            &CostWeights::training(),
            &FocalParams::default(),
        )
        .unwrap();
        assert!(out.breakdown.l_det < 1e-12, "l_det {}", out.breakdown.l_det);
        assert_eq!(out.assignment.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn breakdown_recombines_with_training_weights() {
        let mut r = rng(42);
        let (preds, gts) = random_instance(&mut r, 4, 2, 3);
        let loss_w = CostWeights::training();
        let out = detection_loss(
            &preds,
            &gts,
            &CostWeights::matching(),
            &loss_w,
            &FocalParams::default(),
        )
        .unwrap();
        let b = out.breakdown;
        assert_relative_eq!(
            b.l_det,
            loss_w.w_cls * b.l_cls + loss_w.w_l1 * b.l_l1 + loss_w.w_giou * b.l_giou,
            max_relative = 1e-15
        );
    }

    fn random_box(r: &mut impl Rng) -> CenterBox {
        CenterBox::new(
            r.gen_range(0.2..0.8),
            r.gen_range(0.2..0.8),
            r.gen_range(0.1..0.35),
            r.gen_range(0.1..0.35),
        )
    }

    fn random_instance(
        r: &mut impl Rng,
        n_pred: usize,
        n_gt: usize,
        k: usize,
    ) -> (Vec<Detection>, Vec<GroundTruthObject>) {
        let preds = (0..n_pred)
            .map(|_| {
                let logits: Vec<f64> = (0..k).map(|_| r.gen_range(-2.0..2.0)).collect();
                det(random_box(r), &logits)
            })
            .collect();
        let gts = (0..n_gt)
            .map(|_| {
                let start = r.gen_range(0..k);
                gt(random_box(r), &[start])
            })
            .collect();
        (preds, gts)
    }

    #[test]
    fn two_by_two_matches_exhaustive_assignment() {
        let mut r = rng(43);
        let match_w = CostWeights::matching();
        let loss_w = CostWeights::training();
        let fp = FocalParams::default();
        for _ in 0..50 {
            let (preds, gts) = random_instance(&mut r, 2, 2, 3);
            let out = detection_loss(&preds, &gts, &match_w, &loss_w, &fp).unwrap();

            let cost_of = |perm: &[(usize, usize)]| -> f64 {
                perm.iter()
                    .map(|&(i, g)| pair_cost(&preds[i], &gts[g], &match_w, &fp))
                    .sum()
            };
            let id = vec![(0usize, 0usize), (1, 1)];
            let swap = vec![(0usize, 1usize), (1, 0)];
            let best = if cost_of(&id) <= cost_of(&swap) {
                id
            } else {
                swap
            };

            let mut logits = Tensor::zeros(&[2, 3]).unwrap();
            let mut positives = Tensor::zeros(&[2, 3]).unwrap();
            for (i, p) in preds.iter().enumerate() {
                for (j, &z) in p.logits.iter().enumerate() {
                    logits.set2(i, j, z);
                }
            }
            for &(i, g) in &best {
                for &j in &gts[g].span {
                    positives.set2(i, j, 1.0);
                }
            }
            let l_cls = alignment_loss(&logits, &positives, &fp).unwrap();
            let mut l_l1 = 0.0;
            let mut l_giou = 0.0;
            for &(i, g) in &best {
                l_l1 += l1_box_loss(&preds[i].bbox, &gts[g].bbox) / 2.0;
                l_giou += (1.0 - giou(&preds[i].bbox, &gts[g].bbox)) / 2.0;
            }
            let expected = loss_w.w_cls * l_cls + loss_w.w_l1 * l_l1 + loss_w.w_giou * l_giou;
            assert_relative_eq!(out.breakdown.l_det, expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn loss_invariant_under_input_permutations() {
        let mut r = rng(44);
        for _ in 0..20 {
            let (preds, gts) = random_instance(&mut r, 5, 3, 4);
            let args = (
                CostWeights::matching(),
                CostWeights::training(),
                FocalParams::default(),
            );
            let base = detection_loss(&preds, &gts, &args.0, &args.1, &args.2).unwrap();

            let mut gts_rev = gts.clone();
            gts_rev.reverse();
            let swapped_gts = detection_loss(&preds, &gts_rev, &args.0, &args.1, &args.2).unwrap();
            assert_relative_eq!(
                base.breakdown.l_det,
                swapped_gts.breakdown.l_det,
                max_relative = 1e-12
            );

            let mut preds_rev = preds.clone();
            preds_rev.reverse();
            let swapped_preds =
                detection_loss(&preds_rev, &gts, &args.0, &args.1, &args.2).unwrap();
            assert_relative_eq!(
                base.breakdown.l_det,
                swapped_preds.breakdown.l_det,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn doubling_loss_weights_doubles_l_det() {
        let mut r = rng(45);
        let (preds, gts) = random_instance(&mut r, 4, 2, 3);
        let match_w = CostWeights::matching();
        let fp = FocalParams::default();
        let single = detection_loss(&preds, &gts, &match_w, &CostWeights::training(), &fp).unwrap();
        let double = detection_loss(
            &preds,
            &gts,
            &match_w,
            &CostWeights::new(2.0, 10.0, 4.0),
            &fp,
        )
        .unwrap();
        assert_eq!(double.breakdown.l_det, 2.0 * single.breakdown.l_det);
    }

    #[test]
    fn detection_gradients_match_finite_differences() {
        let mut r = rng(46);
        let match_w = CostWeights::matching();
        let loss_w = CostWeights::training();
        let fp = FocalParams::default();
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let (preds, gts) = random_instance(&mut r, 3, 2, 3);
            let out = detection_loss(&preds, &gts, &match_w, &loss_w, &fp).unwrap();
            let h = 1e-6;
            let loss_at = |ps: &[Detection]| {
                detection_loss(ps, &gts, &match_w, &loss_w, &fp)
                    .unwrap()
                    .breakdown
                    .l_det
            };
            let mut probe = |analytic: f64, numeric: f64| {
                if (analytic - numeric).abs() < 1e-8 {
                    return;
                }
                worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()));
            };
            for i in 0..preds.len() {
                for c in 0..4 {
                    let bump = |ps: &mut [Detection], delta: f64| {
                        let b = &mut ps[i].bbox;
                        match c {
                            0 => b.cx += delta,
                            1 => b.cy += delta,
                            2 => b.w += delta,
                            _ => b.h += delta,
                        }
                    };
                    let mut plus = preds.clone();
                    bump(&mut plus, h);
                    let mut minus = preds.clone();
                    bump(&mut minus, -h);
                    probe(
                        out.dboxes[i][c],
                        (loss_at(&plus) - loss_at(&minus)) / (2.0 * h),
                    );
                }
                for j in 0..preds[i].logits.len() {
                    let mut plus = preds.clone();
                    plus[i].logits[j] += h;
                    let mut minus = preds.clone();
                    minus[i].logits[j] -= h;
                    probe(
                        out.dlogits.get2(i, j),
                        (loss_at(&plus) - loss_at(&minus)) / (2.0 * h),
                    );
                }
            }
        }
        assert!(worst < 1e-5, "detection grad worst rel err {worst}");
    }

    #[test]
    fn invalid_spans_are_rejected() {
        let preds = vec![det(CenterBox::new(0.5, 0.5, 0.2, 0.2), &[0.0, 0.0])];
        let empty = vec![gt(CenterBox::new(0.5, 0.5, 0.2, 0.2), &[])];
        assert!(matches!(
            detection_loss(
                &preds,
                &empty,
                &CostWeights::matching(),
                &CostWeights::training(),
                &FocalParams::default()
            ),
            Err(LossError::EmptySpan { gt: 0 })
        ));
        let oob = vec![gt(CenterBox::new(0.5, 0.5, 0.2, 0.2), &[2])];
        assert!(matches!(
            detection_loss(
                &preds,
                &oob,
                &CostWeights::matching(),
                &CostWeights::training(),
                &FocalParams::default()
            ),
            Err(LossError::SpanOutOfRange {
                gt: 0,
                index: 2,
                tokens: 2
            })
        ));
    }

    #[test]
    fn more_targets_than_predictions_is_capacity_error() {
        let preds = vec![det(CenterBox::new(0.5, 0.5, 0.2, 0.2), &[0.0])];
        let gts = vec![
            gt(CenterBox::new(0.3, 0.3, 0.2, 0.2), &[0]),
            gt(CenterBox::new(0.7, 0.7, 0.2, 0.2), &[0]),
        ];
        assert!(matches!(
            detection_loss(
                &preds,
                &gts,
                &CostWeights::matching(),
                &CostWeights::training(),
                &FocalParams::default()
            ),
            Err(LossError::Match(MatchError::CapacityExceeded {
                predictions: 1,
                targets: 2
            }))
        ));
    }

    #[test]
    fn total_loss_mixes_in_layer_mean() {
        assert_relative_eq!(total_loss(1.0, &[1.0], 0.01), 1.01, max_relative = 1e-15);
        assert_relative_eq!(
            total_loss(1.0, &[1.0, 3.0], 0.01),
            1.02,
            max_relative = 1e-15
        );
        assert_eq!(total_loss(0.7, &[5.0, 9.0], 0.0), 0.7);
        assert_eq!(total_loss(0.7, &[], 0.3), 0.7);
    }
}
