//! Two-stage training on streamed synthetic scenes. Stage one fits the
//! whole base model; stage two attaches expert adapters and moves only
//! them, with the router trained by the balance objective alone.

use std::fmt;

use serde::Serialize;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, Stage, TrainConfig};
use crate::loss::{detection_loss, total_loss, LossError};
use crate::model::{GroundingModel, ModelError};
use crate::mole::{balance_backward, load_balance_loss, RoutingStats};
use crate::optim::{AdamW, AdamWParams, OptimError};
use crate::params::ParamError;
use crate::scene::{generate_scene, ConceptVocabulary, SceneError};
use crate::tensor::TensorError;

#[derive(Debug)]
pub enum TrainError {
    Config(ConfigError),
    WrongStage { expected: Stage, found: Stage },
    WrongInit { found: Stage },
    Scene(SceneError),
    Model(ModelError),
    Loss(LossError),
    Optim(OptimError),
    Checkpoint(CheckpointError),
    Param(ParamError),
    Tensor(TensorError),
    Diverged { step: u64, value: f64 },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(e) => write!(f, "{e}"),
            TrainError::WrongStage { expected, found } => {
                write!(f, "config stage is {found}, this command runs {expected}")
            }
            TrainError::WrongInit { found } => {
                write!(f, "initial checkpoint must come from pretraining, found {found}")
            }
            TrainError::Scene(e) => write!(f, "scene generation: {e}"),
            TrainError::Model(e) => write!(f, "forward/backward: {e}"),
            TrainError::Loss(e) => write!(f, "loss: {e}"),
            TrainError::Optim(e) => write!(f, "{e}"),
            TrainError::Checkpoint(e) => write!(f, "{e}"),
            TrainError::Param(e) => write!(f, "parameter store: {e}"),
            TrainError::Tensor(e) => write!(f, "tensor shape error: {e}"),
            TrainError::Diverged { step, value } => {
                write!(f, "training diverged at step {step}: loss {value}")
            }
        }
    }
}

impl std::error::Error for TrainError {}

macro_rules! from_err {
    ($variant:ident, $ty:ty) => {
        impl From<$ty> for TrainError {
            fn from(e: $ty) -> TrainError {
                TrainError::$variant(e)
            }
        }
    };
}

from_err!(Config, ConfigError);
from_err!(Scene, SceneError);
from_err!(Model, ModelError);
from_err!(Loss, LossError);
from_err!(Optim, OptimError);
from_err!(Checkpoint, CheckpointError);
from_err!(Param, ParamError);
from_err!(Tensor, TensorError);

/// One line of the metrics log. Loss fields are batch means; `routing` is
/// the batch's per-expert token fraction aggregated over layers, empty when
/// no experts are attached.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub l_cls: f64,
    pub l_l1: f64,
    pub l_giou: f64,
    pub l_det: f64,
    pub l_lb: f64,
    pub l_total: f64,
    pub learning_rate: f64,
    pub routing: Vec<f64>,
}

pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
}

/// Stage 1: trains every base tensor (minus any configured freezes) from
/// random initialization. No experts are attached.
pub fn pretrain(config: &TrainConfig) -> Result<TrainRun, TrainError> {
    pretrain_observed(config, |_| {})
}

pub fn pretrain_observed(
    config: &TrainConfig,
    on_step: impl FnMut(&StepRecord),
) -> Result<TrainRun, TrainError> {
    if config.stage != Stage::Pretrain {
        return Err(TrainError::WrongStage {
            expected: Stage::Pretrain,
            found: config.stage,
        });
    }
    config.validate()?;
    let mut model = GroundingModel::new(config.model, config.model_seed);
    model.set_stage_pretrain();
    for prefix in &config.freeze {
        model.params.set_trainable_matching(prefix, false);
    }
    model.params.snap_to_f32();
    run_loop(config, model, on_step)
}

/// Stage 2: attaches one expert set per decoder layer to a pretrained
/// checkpoint and trains exactly the adapter and router tensors.
pub fn finetune(config: &TrainConfig, init: &Checkpoint) -> Result<TrainRun, TrainError> {
    finetune_observed(config, init, |_| {})
}

pub fn finetune_observed(
    config: &TrainConfig,
    init: &Checkpoint,
    on_step: impl FnMut(&StepRecord),
) -> Result<TrainRun, TrainError> {
    if config.stage != Stage::Finetune {
        return Err(TrainError::WrongStage {
            expected: Stage::Finetune,
            found: config.stage,
        });
    }
    config.validate()?;
    if init.stage != Stage::Pretrain {
        return Err(TrainError::WrongInit { found: init.stage });
    }
    let mut model = init.restore_model()?;
    model.attach_mole(config.mole, config.model_seed);
    model.set_stage_finetune();
    model.params.snap_to_f32();
    run_loop(config, model, on_step)
}

fn run_loop(
    config: &TrainConfig,
    mut model: GroundingModel,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainRun, TrainError> {
    let vocab = ConceptVocabulary::new(
        config.corpus_seed,
        config.concepts,
        config.model.d,
        config.concept_dim,
    );
    let scene_params = config.scene_params();
    let mut opt = AdamW::new(AdamWParams {
        lr: config.learning_rate,
        weight_decay: config.weight_decay,
        warmup_steps: config.warmup_steps,
        ..AdamWParams::default()
    });
    let with_mole = model.mole.is_some();
    let layers = config.model.decoder_layers;
    let batch = config.batch_size;
    let batches_per_epoch = config.train_scenes / batch;
    let inv_b = 1.0 / batch as f64;
    let mut log = Vec::with_capacity(config.epochs * batches_per_epoch);

    for _epoch in 0..config.epochs {
        for b in 0..batches_per_epoch {
            let learning_rate = opt.current_lr();
            model.params.zero_grads();
            let mut stats = vec![RoutingStats::new(config.mole.experts); if with_mole { layers } else { 0 }];
            let mut caches = Vec::with_capacity(batch);
            let mut losses = Vec::with_capacity(batch);
            let (mut l_cls, mut l_l1, mut l_giou, mut l_det) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..batch {
                let idx = (b * batch + i) as u64;
                let scene = generate_scene(&vocab, config.data_seed + idx, &scene_params)?;
                let collect = if with_mole { Some(stats.as_mut_slice()) } else { None };
                let (dets, cache) = model.forward(&scene.visual, &scene.speech, collect)?;
                let out = detection_loss(
                    &dets,
                    &scene.ground_truths,
                    &config.matching,
                    &config.loss_weights,
                    &config.focal,
                )?;
                l_cls += out.breakdown.l_cls * inv_b;
                l_l1 += out.breakdown.l_l1 * inv_b;
                l_giou += out.breakdown.l_giou * inv_b;
                l_det += out.breakdown.l_det * inv_b;
                caches.push(cache);
                losses.push(out);
            }
            let balance: Vec<f64> = stats.iter().map(load_balance_loss).collect();
            let l_lb = if balance.is_empty() {
                0.0
            } else {
                balance.iter().sum::<f64>() / balance.len() as f64
            };
            let l_total = total_loss(l_det, &balance, config.lb_weight);
            let step = opt.step_count() + 1;
            if !l_total.is_finite() {
                return Err(TrainError::Diverged { step, value: l_total });
            }

            for (cache, out) in caches.iter().zip(&losses) {
                let pairs = model.backward(cache, &out.dboxes, &out.dlogits)?;
                model.accumulate(&pairs, inv_b)?;
                if with_mole {
                    // Router gradients come from the balance term alone, at
                    // the batch fractions; gradients into the tokens are
                    // dropped since every upstream tensor is frozen here.
                    for (l, mc) in cache.decoder.mole_caches().iter().enumerate() {
                        let mc = mc.expect("expert cache on every layer");
                        let name = format!("mole.{l}.gate");
                        let grads = balance_backward(
                            model.params.value(&name)?,
                            mc.tokens(),
                            mc.probs(),
                            &stats[l].fractions(),
                            stats[l].tokens() as f64,
                            config.lb_weight / layers as f64,
                        )?;
                        model.params.acc_grad(&name, &grads.dgate, 1.0)?;
                    }
                }
            }
            opt.step(&mut model.params)?;
            model.params.snap_to_f32();

            let routing = if with_mole {
                let mut agg = RoutingStats::new(config.mole.experts);
                for s in &stats {
                    agg.merge(s);
                }
                agg.fractions()
            } else {
                Vec::new()
            };
            let record = StepRecord {
                step,
                stage: config.stage,
                l_cls,
                l_l1,
                l_giou,
                l_det,
                l_lb,
                l_total,
                learning_rate,
                routing,
            };
            on_step(&record);
            log.push(record);
        }
    }

    let checkpoint = Checkpoint::capture(config, opt.step_count(), &model.params);
    Ok(TrainRun { checkpoint, log })
}
