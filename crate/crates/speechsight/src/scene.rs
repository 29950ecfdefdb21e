//! Deterministic synthetic scenes: a seeded concept vocabulary projects
//! shared concept vectors into the visual grid and the speech stream, so a
//! scene's boxes, frames, and token spans follow from two seeds alone.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::loss::GroundTruthObject;
use crate::matching::{iou, CenterBox};
use crate::model::grid_anchors;
use crate::qsa::SpeechSequence;
use crate::tensor::Tensor;

/// Shared latent concepts plus fixed projections into each modality.
/// Everything is determined by the corpus seed.
pub struct ConceptVocabulary {
    /// `[C, d_c]`, unit-norm rows.
    pub concepts: Tensor,
    /// `[d, d_c]` projection into speech frames.
    pub acoustic_map: Tensor,
    /// `[d, d_c]` projection into visual grid features.
    pub visual_map: Tensor,
}

impl ConceptVocabulary {
    pub fn new(corpus_seed: u64, concepts: usize, d: usize, d_c: usize) -> ConceptVocabulary {
        assert!(concepts >= 1 && d >= 1 && d_c >= 1);
        let mut r = ChaCha8Rng::seed_from_u64(corpus_seed);
        let mut c = Tensor::gaussian(&mut r, &[concepts, d_c], 1.0).expect("valid dims");
        for i in 0..concepts {
            let norm = c.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in c.row_mut(i) {
                *v /= norm;
            }
        }
        let acoustic_map = Tensor::gaussian(&mut r, &[d, d_c], 1.0).expect("valid dims");
        let visual_map = Tensor::gaussian(&mut r, &[d, d_c], 1.0).expect("valid dims");
        ConceptVocabulary {
            concepts: c,
            acoustic_map,
            visual_map,
        }
    }

    pub fn count(&self) -> usize {
        self.concepts.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.acoustic_map.rows()
    }

    fn project(&self, map: &Tensor, category: usize) -> Vec<f64> {
        let c = self.concepts.row(category);
        (0..map.rows())
            .map(|i| crate::tensor::dot(map.row(i), c))
            .collect()
    }

    /// The clean speech frame for one category, `[d]`.
    pub fn acoustic_projection(&self, category: usize) -> Vec<f64> {
        self.project(&self.acoustic_map, category)
    }

    /// The clean visual feature for one category, `[d]`.
    pub fn visual_projection(&self, category: usize) -> Vec<f64> {
        self.project(&self.visual_map, category)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    /// Inclusive range of objects per scene.
    pub count_range: (usize, usize),
    /// Standard deviation of the Gaussian added to every feature entry.
    pub noise: f64,
    pub grid: (usize, usize),
    pub frames_per_concept: usize,
    /// Aggregated token count, used to assign ground-truth spans.
    pub k_tokens: usize,
    /// Inclusive range of sampled box widths and heights.
    pub box_size_range: (f64, f64),
}

impl Default for SceneParams {
    fn default() -> SceneParams {
        SceneParams {
            count_range: (1, 2),
            noise: 0.05,
            grid: (8, 8),
            frames_per_concept: 6,
            k_tokens: 8,
            box_size_range: (0.18, 0.32),
        }
    }
}

#[derive(Debug)]
pub enum SceneError {
    /// More distinct objects requested than the vocabulary holds.
    TooManyObjects { requested: usize, concepts: usize },
    /// Disjoint placement failed repeatedly; the boxes do not fit.
    PlacementFailed { object: usize, attempts: usize },
    BadParams { reason: &'static str },
}

impl fmt::Display for SceneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SceneError::TooManyObjects {
                requested,
                concepts,
            } => write!(f, "{requested} objects requested, {concepts} concepts"),
            SceneError::PlacementFailed { object, attempts } => {
                write!(f, "object {object} not placed after {attempts} attempts")
            }
            SceneError::BadParams { reason } => write!(f, "bad scene params: {reason}"),
        }
    }
}

impl std::error::Error for SceneError {}

/// One training or evaluation instance.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// `[P, d]` grid features, content only (no position code).
    pub visual: Tensor,
    pub speech: SpeechSequence,
    pub ground_truths: Vec<GroundTruthObject>,
    pub seed: u64,
}

const PLACEMENT_ATTEMPTS: usize = 100;

fn validate(params: &SceneParams, vocab: &ConceptVocabulary) -> Result<(), SceneError> {
    let (lo, hi) = params.count_range;
    if lo > hi {
        return Err(SceneError::BadParams {
            reason: "count range is reversed",
        });
    }
    if hi > vocab.count() {
        return Err(SceneError::TooManyObjects {
            requested: hi,
            concepts: vocab.count(),
        });
    }
    if params.frames_per_concept == 0 || params.k_tokens == 0 {
        return Err(SceneError::BadParams {
            reason: "frames per concept and token count must be positive",
        });
    }
    if params.grid.0 == 0 || params.grid.1 == 0 {
        return Err(SceneError::BadParams {
            reason: "grid must be nonempty",
        });
    }
    let (s_lo, s_hi) = params.box_size_range;
    if !(s_lo > 0.0 && s_lo <= s_hi && s_hi < 1.0) {
        return Err(SceneError::BadParams {
            reason: "box sizes must satisfy 0 < lo <= hi < 1",
        });
    }
    if !(params.noise >= 0.0 && params.noise.is_finite()) {
        return Err(SceneError::BadParams {
            reason: "noise must be finite and nonnegative",
        });
    }
    Ok(())
}

/// Span of aggregated tokens whose frame windows intersect
/// `[start, end)`; token `t` covers frames `[t·n/k, (t+1)·n/k)`.
fn token_span(start: usize, end: usize, n_frames: usize, k: usize) -> Vec<usize> {
    let mut span = Vec::new();
    for t in 0..k {
        let t_start = t * n_frames / k;
        let t_end = (t + 1) * n_frames / k;
        if t_start < end && start < t_end {
            span.push(t);
        }
    }
    span
}

/// Samples one scene: distinct categories in ascending order, pairwise
/// disjoint boxes inside the unit square, grid features from the visual
/// projections, and speech as one frame run per object in object order.
/// An empty scene still emits one run of pure-noise silence frames.
pub fn generate_scene(
    vocab: &ConceptVocabulary,
    seed: u64,
    params: &SceneParams,
) -> Result<SyntheticScene, SceneError> {
    validate(params, vocab)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let d = vocab.feature_dim();
    let (lo, hi) = params.count_range;
    let m = r.gen_range(lo..=hi);

    let all: Vec<usize> = (0..vocab.count()).collect();
    let mut categories: Vec<usize> = all.choose_multiple(&mut r, m).copied().collect();
    categories.sort_unstable();

    let mut boxes: Vec<CenterBox> = Vec::with_capacity(m);
    let (s_lo, s_hi) = params.box_size_range;
    for object in 0..m {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let w = r.gen_range(s_lo..=s_hi);
            let h = r.gen_range(s_lo..=s_hi);
            let cx = r.gen_range(w / 2.0..=1.0 - w / 2.0);
            let cy = r.gen_range(h / 2.0..=1.0 - h / 2.0);
            let candidate = CenterBox::new(cx, cy, w, h);
            if boxes.iter().all(|b| iou(b, &candidate) == 0.0) {
                boxes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SceneError::PlacementFailed {
                object,
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
    }

    let anchors = grid_anchors(params.grid);
    let p = anchors.len();
    let mut visual = Tensor::zeros(&[p, d]).expect("valid dims");
    for (pos, &(ax, ay)) in anchors.iter().enumerate() {
        let owner = boxes.iter().position(|b| b.contains(ax, ay));
        let clean = owner.map(|o| vocab.visual_projection(categories[o]));
        let row = visual.row_mut(pos);
        for (j, slot) in row.iter_mut().enumerate() {
            let noise: f64 = params.noise * standard_normal(&mut r);
            *slot = match &clean {
                Some(c) => c[j] + noise,
                None => noise,
            };
        }
    }

    let f = params.frames_per_concept;
    let runs = m.max(1);
    let n_frames = runs * f;
    let mut frames = Tensor::zeros(&[n_frames, d]).expect("valid dims");
    for run in 0..runs {
        let clean = if m == 0 {
            None
        } else {
            Some(vocab.acoustic_projection(categories[run]))
        };
        for t in 0..f {
            let row = frames.row_mut(run * f + t);
            for (j, slot) in row.iter_mut().enumerate() {
                let noise: f64 = params.noise * standard_normal(&mut r);
                *slot = match &clean {
                    Some(c) => c[j] + noise,
                    None => noise,
                };
            }
        }
    }

    let ground_truths = (0..m)
        .map(|o| GroundTruthObject {
            bbox: boxes[o],
            category: categories[o],
            span: token_span(o * f, (o + 1) * f, n_frames, params.k_tokens),
        })
        .collect();

    Ok(SyntheticScene {
        visual,
        speech: SpeechSequence::new(frames),
        ground_truths,
        seed,
    })
}

fn standard_normal(r: &mut ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(r)
}
