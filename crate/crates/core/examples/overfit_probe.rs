use gaaf_core::graph::{weighted_l2_l1_loss, Adam, AdamConfig, Mode};
use gaaf_core::heatmap::{argmax_location, generate_heatmap, HeatmapSpec};
use gaaf_core::model::{batch_to_heatmaps, build_locator, volumes_to_batch, LocatorConfig};
use gaaf_core::synth::{synth_generate, PhantomSpec};
use gaaf_core::train::{load_samples, preprocess_dataset, PreprocessOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    let data = dir.path().join("data");
    synth_generate(&PhantomSpec { n_samples: 1, seed: 3, ..PhantomSpec::default() }, &raw).unwrap();
    preprocess_dataset(&raw, &data, &PreprocessOptions {
        target_dims: [16, 32, 32],
        ..PreprocessOptions::default()
    }).unwrap();
    let (_, samples) = load_samples(&data).unwrap();
    let s = &samples[0];

    for (lr, base, w1, seed) in [(1e-3, 4usize, 0.1, 11u64), (1e-3, 4, 0.1, 99), (1e-3, 4, 0.1, 7), (1.5e-3, 4, 0.1, 11), (1.5e-3, 4, 0.1, 99), (1.5e-3, 4, 0.1, 7), (1.5e-3, 4, 0.02, 11), (1.5e-3, 4, 0.02, 99), (1.5e-3, 4, 0.02, 7)] {
        let config = LocatorConfig {
            levels: 2, base_channels: base, attention: true, dropout_p: 0.0,
            in_dims: [16, 32, 32],
        };
        let model = build_locator::<f32>(&config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input = volumes_to_batch::<f32>(&[&s.input]);
        let spec = HeatmapSpec::new(3.0).unwrap();
        let target_h = generate_heatmap(s.input.dims, &s.center_ds, &spec).unwrap();
        let target = volumes_to_batch::<f32>(&[&target_h]);
        let params = model.param_tensors();
        let mut opt = Adam::new(AdamConfig { lr, ..AdamConfig::default() }, &params);
        let eval_loss = |m: &gaaf_core::model::LocatorModel<f32>| {
            let out = m.forward_eval(&input).unwrap();
            weighted_l2_l1_loss(&out, &target, 1.0, w1).unwrap().item() as f64
        };
        let first = eval_loss(&model);
        for _step in 0..200 {
            let out = model.forward(&input, Mode::Train, &mut rng).unwrap();
            let loss = weighted_l2_l1_loss(&out, &target, 1.0, w1).unwrap();
            model.zero_grad();
            loss.backward().unwrap();
            opt.step(&params);
        }
        let last = eval_loss(&model);
        let pred = model.forward_eval(&input).unwrap();
        let h = batch_to_heatmaps(&pred, s.input.spacing_mm).pop().unwrap();
        let am = argmax_location(&h);
        let d: Vec<f64> = (0..3).map(|a| (am.coords[a] - s.center_ds.coords[a]).abs()).collect();
        println!("lr={lr:.0e} base={base} w1={w1} seed={seed}: loss {first:.4e} -> {last:.4e} (ratio {:.1}x), argmax err {:?} [{:.0?}s]",
            first / last, d, t0.elapsed().as_secs_f64());
    }
}
