use gaaf_core::infer::{extract_point, has_dominant_peak, ExtractionMethod};
use gaaf_core::model::{batch_to_heatmaps, volumes_to_batch, LocatorConfig};
use gaaf_core::synth::{synth_generate, PhantomSpec};
use gaaf_core::train::*;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    let data = dir.path().join("data");
    synth_generate(&PhantomSpec { n_samples: 40, seed: 5, ..PhantomSpec::default() }, &raw).unwrap();
    println!("synth done {:.0}s", t0.elapsed().as_secs_f64());
    preprocess_dataset(&raw, &data, &PreprocessOptions {
        target_dims: [16, 32, 32],
        ..PreprocessOptions::default()
    }).unwrap();
    let (manifest, samples) = load_samples(&data).unwrap();
    println!("preprocess done {:.0}s ({} samples, {} skipped)", t0.elapsed().as_secs_f64(), samples.len(), manifest.skipped.len());

    let ids: Vec<String> = samples.iter().map(|s| s.source_id.clone()).collect();
    let train_cfg = TrainConfig {
        epochs: 24,
        batch_size: 2,
        lr: 2e-3,
        w1: 0.02,
        sigma_vox: manifest.sigma_vox,
        folds: 5,
        seed: 5,
        ..TrainConfig::default()
    };
    let split = make_folds(&ids, train_cfg.folds, train_cfg.seed).unwrap();

    for attention in [true, false] {
        let model_cfg = LocatorConfig {
            levels: 2, base_channels: 4, attention, dropout_p: 0.1,
            in_dims: manifest.target_dims,
        };
        let t1 = Instant::now();
        let results = train_all_folds(&samples, &split, &model_cfg, &train_cfg, true).unwrap();
        let ckpts: Vec<_> = results.iter().map(|(c, _)| c.clone()).collect();
        for (_, h) in &results {
            println!("  attention={attention} fold {} best val {:.4e} @ epoch {}", h.fold, h.best_val_loss, h.best_epoch);
        }
        let report = test_folds(&samples, &split, &ckpts, ExtractionMethod::Fit, 0.5).unwrap();
        let report_am = test_folds(&samples, &split, &ckpts, ExtractionMethod::Argmax, 0.5).unwrap();
        println!("attention={attention}: pooled median fit {:.3} mm, argmax {:.3} mm  [train {:.0}s]",
            report.pooled.median_mm, report_am.pooled.median_mm, t1.elapsed().as_secs_f64());

        // criterion 5 stats: dominance + method agreement
        if attention {
            let models: Vec<_> = ckpts.iter().map(|c| c.into_model().unwrap()).collect();
            let mut dominant = 0; let mut total = 0; let mut worst: f64 = 0.0;
            for fold in 0..split.k() {
                for id in split.val_ids(fold) {
                    let s = samples.iter().find(|s| &s.source_id == id).unwrap();
                    let b = volumes_to_batch::<f32>(&[&s.input]);
                    let h = batch_to_heatmaps(&models[fold].forward_eval(&b).unwrap(), s.input.spacing_mm).pop().unwrap();
                    let am = extract_point(&h, ExtractionMethod::Argmax, 0.5).unwrap();
                    let fit = extract_point(&h, ExtractionMethod::Fit, 0.5).unwrap();
                    let d: f64 = (0..3).map(|a| (am.coords[a] - fit.coords[a]).powi(2)).sum::<f64>().sqrt();
                    total += 1;
                    if has_dominant_peak(&h, 2.0) { dominant += 1; worst = worst.max(d); }
                }
            }
            println!("  dominance: {dominant}/{total} samples, worst argmax-fit ds distance among dominant: {worst:.3}");
        }
    }
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
