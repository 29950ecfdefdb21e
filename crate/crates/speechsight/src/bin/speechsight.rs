//! Thin command-line front end over the library: corpus generation, the two
//! training stages, checkpoint evaluation, and the gradient audit.

use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use speechsight::checkpoint::Checkpoint;
use speechsight::config::TrainConfig;
use speechsight::eval::evaluate_model;
use speechsight::scene::{generate_scene, ConceptVocabulary, SyntheticScene};
use speechsight::suite::run_suite;
use speechsight::tensor::Tensor;
use speechsight::train::{finetune_observed, pretrain_observed, StepRecord, TrainRun};

#[derive(Parser)]
#[command(name = "speechsight", version, about = "Speech-conditioned grounding on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic synthetic corpus as one JSON file per scene.
    GenData {
        /// Seed of the concept vocabulary; scene i draws from seed S + i.
        #[arg(long, value_name = "S")]
        corpus_seed: u64,
        /// Number of scenes.
        #[arg(long, value_name = "N")]
        count: u64,
        /// Output directory, created if missing.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train stage 1 from scratch and write the checkpoint.
    Pretrain {
        /// Training configuration (JSON, unknown keys rejected).
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Checkpoint path; the metrics log lands next to it.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Attach low-rank experts to a stage-1 checkpoint and train only those.
    Finetune {
        /// Training configuration (JSON, unknown keys rejected).
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Stage-1 checkpoint to start from.
        #[arg(long, value_name = "FILE")]
        init: PathBuf,
        /// Checkpoint path; the metrics log lands next to it.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Score a checkpoint on a freshly generated synthetic corpus.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Seed of the held-out corpus; scene i draws from seed S + i.
        #[arg(long, value_name = "S")]
        eval_seed: u64,
        /// Number of scenes.
        #[arg(long, value_name = "N")]
        count: u64,
        /// Print the full result as one JSON object.
        #[arg(long)]
        json: bool,
    },
    /// Audit analytic gradients against central differences.
    Gradcheck {
        /// Restrict the audit to one module.
        #[arg(long, value_name = "NAME")]
        module: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<(), Box<dyn Error>> {
    match cmd {
        Command::GenData {
            corpus_seed,
            count,
            out,
        } => gen_data(corpus_seed, count, &out),
        Command::Pretrain { config, out } => {
            let config = TrainConfig::load(&config)?;
            let run = pretrain_observed(&config, print_progress)?;
            write_run(&run, &out)
        }
        Command::Finetune { config, init, out } => {
            let config = TrainConfig::load(&config)?;
            let init = Checkpoint::load(&init)?;
            let run = finetune_observed(&config, &init, print_progress)?;
            write_run(&run, &out)
        }
        Command::Eval {
            ckpt,
            eval_seed,
            count,
            json,
        } => eval(&ckpt, eval_seed, count, json),
        Command::Gradcheck { module } => gradcheck(module.as_deref()),
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TensorJson {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl TensorJson {
    fn of(t: &Tensor) -> TensorJson {
        TensorJson {
            dims: t.dims().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

#[derive(Serialize)]
struct ObjectJson {
    category: usize,
    span: Vec<usize>,
    /// Center-format box: cx, cy, w, h in unit coordinates.
    bbox: [f64; 4],
}

#[derive(Serialize)]
struct SceneJson {
    seed: u64,
    visual: TensorJson,
    speech: TensorJson,
    objects: Vec<ObjectJson>,
}

#[derive(Serialize)]
struct ManifestJson {
    corpus_seed: u64,
    count: u64,
    concepts: usize,
    feature_dim: usize,
    grid: (usize, usize),
    frames_per_concept: usize,
    k_tokens: usize,
}

fn scene_json(scene: &SyntheticScene) -> SceneJson {
    SceneJson {
        seed: scene.seed,
        visual: TensorJson::of(&scene.visual),
        speech: TensorJson::of(&scene.speech.frames),
        objects: scene
            .ground_truths
            .iter()
            .map(|gt| ObjectJson {
                category: gt.category,
                span: gt.span.clone(),
                bbox: [gt.bbox.cx, gt.bbox.cy, gt.bbox.w, gt.bbox.h],
            })
            .collect(),
    }
}

/// Emits the desk-scale corpus shape; training picks scenes the same way
/// from its own data seed, so these files are for inspection and tooling.
fn gen_data(corpus_seed: u64, count: u64, out: &Path) -> Result<(), Box<dyn Error>> {
    let cfg = TrainConfig::pretrain_desk();
    let vocab = ConceptVocabulary::new(corpus_seed, cfg.concepts, cfg.model.d, cfg.concept_dim);
    let params = cfg.scene_params();
    std::fs::create_dir_all(out)?;

    let manifest = ManifestJson {
        corpus_seed,
        count,
        concepts: vocab.count(),
        feature_dim: cfg.model.d,
        grid: params.grid,
        frames_per_concept: params.frames_per_concept,
        k_tokens: params.k_tokens,
    };
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    for i in 0..count {
        let scene = generate_scene(&vocab, corpus_seed + i, &params)?;
        let path = out.join(format!("scene_{i:06}.json"));
        std::fs::write(path, serde_json::to_string(&scene_json(&scene))?)?;
    }
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain / finetune
// ---------------------------------------------------------------------------

fn print_progress(rec: &StepRecord) {
    if rec.step % 100 == 0 {
        eprintln!(
            "step {:>5}  l_det {:.4}  l_total {:.4}",
            rec.step, rec.l_det, rec.l_total
        );
    }
}

fn write_run(run: &TrainRun, out: &Path) -> Result<(), Box<dyn Error>> {
    let log_path = out.with_extension("metrics.jsonl");
    let mut text = String::new();
    for rec in &run.log {
        text.push_str(&serde_json::to_string(rec)?);
        text.push('\n');
    }
    std::fs::write(&log_path, text)?;
    run.checkpoint.save(out)?;
    println!(
        "wrote checkpoint {} ({} steps) and metrics log {}",
        out.display(),
        run.checkpoint.step,
        log_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn eval(ckpt: &Path, eval_seed: u64, count: u64, json: bool) -> Result<(), Box<dyn Error>> {
    let ckpt = Checkpoint::load(ckpt)?;
    let model = ckpt.restore_model()?;
    let cfg = &ckpt.config;
    let vocab = ConceptVocabulary::new(cfg.corpus_seed, cfg.concepts, cfg.model.d, cfg.concept_dim);
    let params = cfg.scene_params();
    let scenes = (0..count)
        .map(|i| generate_scene(&vocab, eval_seed + i, &params))
        .collect::<Result<Vec<_>, _>>()?;
    let result = evaluate_model(&model, &scenes)?;

    if json {
        println!("{}", serde_json::to_string_pretty(&result)?);
    } else {
        println!(
            "AP {:.4}  AP50 {:.4}  AP75 {:.4}  ({count} scenes)",
            result.ap, result.ap50, result.ap75
        );
        for (cat, ap) in &result.per_category {
            println!("  category {cat:>3}  AP {ap:.4}");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

fn gradcheck(module: Option<&str>) -> Result<(), Box<dyn Error>> {
    let reports = run_suite(module)?;
    let mut all_pass = true;
    for rep in &reports {
        println!(
            "{:<9} {:>3} instances  max rel err {:.3e}  {}",
            rep.name,
            rep.instances,
            rep.max_rel_err,
            if rep.pass { "pass" } else { "FAIL" }
        );
        all_pass &= rep.pass;
    }
    if !all_pass {
        return Err("gradient check failed".into());
    }
    Ok(())
}
