use speechsight::checkpoint::Checkpoint;
use speechsight::matching::iou;
use speechsight::scene::{generate_scene, ConceptVocabulary};
use std::path::Path;

fn main() {
    let ckpt = Checkpoint::load(Path::new("/tmp/exp_e16.bin")).unwrap();
    let model = ckpt.restore_model().unwrap();
    let cfg = &ckpt.config;
    let vocab = ConceptVocabulary::new(cfg.corpus_seed, cfg.concepts, cfg.model.d, cfg.concept_dim);
    let params = cfg.scene_params();

    for (label, base) in [("train", cfg.data_seed), ("eval ", 1000u64)] {
        let mut hit0 = 0usize;
        let mut n = 0usize;
        let mut s_best = 0.0;
        let mut s_rest = 0.0;
        for i in 0..100u64 {
            let sc = generate_scene(&vocab, base + i, &params).unwrap();
            let (dets, _) = model.forward(&sc.visual, &sc.speech, None).unwrap();
            for gt in &sc.ground_truths {
                let score = |j: usize| -> f64 {
                    gt.span
                        .iter()
                        .map(|&t| 1.0 / (1.0 + (-dets[j].logits[t]).exp()))
                        .fold(f64::NEG_INFINITY, f64::max)
                };
                let bi = (0..dets.len())
                    .max_by(|&a, &b| iou(&dets[a].bbox, &gt.bbox).total_cmp(&iou(&dets[b].bbox, &gt.bbox)))
                    .unwrap();
                let sb = score(bi);
                let others: Vec<f64> = (0..dets.len()).filter(|&j| j != bi).map(score).collect();
                let omax = others.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                s_best += sb;
                s_rest += others.iter().sum::<f64>() / others.len() as f64;
                if sb > omax {
                    hit0 += 1;
                }
                n += 1;
            }
        }
        println!(
            "{label}: best-iou pred top-scored {:.1}%  mean score best {:.3} vs others {:.3}  ({n} objects)",
            100.0 * hit0 as f64 / n as f64,
            s_best / n as f64,
            s_rest / n as f64
        );
    }
}
