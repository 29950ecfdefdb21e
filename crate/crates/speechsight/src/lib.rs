//! Speech-conditioned object grounding on synthetic desk-scale scenes.
//!
//! The crate trains and evaluates a small cross-modal detector: spoken
//! descriptions are compressed into a handful of tokens by a learned
//! query-based aggregator, fused with visual grid features, and decoded into
//! boxes plus speech-token alignment scores. A second training stage attaches
//! low-rank experts with a per-layer router to the decoder feed-forward
//! blocks and fine-tunes only those.
//!
//! Everything runs on CPU in `f64` with hand-written backward passes and a
//! deterministic reduction order, so training runs, checkpoints, and metric
//! logs are bit-reproducible given the same seeds.
//!
//! # Examples
//!
//! Each major capability has a runnable example:
//!
//! ```text
//! cargo run --example aggregate_speech     # query-based speech aggregation
//! cargo run --example route_experts       # top-1 expert routing + balance loss
//! cargo run --example match_and_score     # box overlap, pair costs, assignment
//! cargo run --example generate_scenes     # deterministic synthetic corpora
//! cargo run --example gradient_check      # finite-difference gradient audit
//! cargo run --example train_two_stage     # miniature two-stage training run
//! cargo run --example evaluate_checkpoint # detection AP on a held-out corpus
//! ```
//!
//! The same functionality is reachable through the thin `speechsight` binary
//! (`gen-data`, `pretrain`, `finetune`, `eval`, `gradcheck` subcommands).

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod loss;
pub mod matching;
pub mod model;
pub mod mole;
pub mod nn;
pub mod optim;
pub mod params;
pub mod qsa;
pub mod scene;
pub mod suite;
pub mod tensor;
pub mod train;
