use gaaf_core::graph::{weighted_l2_l1_loss, Adam, AdamConfig, Mode, Tensor};
use gaaf_core::model::{build_locator, LocatorConfig};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    for base in [4usize, 8] {
        let config = LocatorConfig {
            levels: 2,
            base_channels: base,
            attention: true,
            dropout_p: 0.1,
            in_dims: [16, 32, 32],
        };
        let model = build_locator::<f32>(&config, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 2 * 16 * 32 * 32;
        let input = Tensor::leaf(
            vec![2, 1, 16, 32, 32],
            (0..n).map(|_| rng.random_range(0.0..1.0f32)).collect(),
        );
        let target = Tensor::leaf(
            vec![2, 1, 16, 32, 32],
            (0..n).map(|_| rng.random_range(0.0..1.0f32)).collect(),
        );
        let params = model.param_tensors();
        let mut opt = Adam::new(AdamConfig::default(), &params);
        for _ in 0..2 {
            let out = model.forward(&input, Mode::Train, &mut rng).unwrap();
            let loss = weighted_l2_l1_loss(&out, &target, 1.0, 0.1).unwrap();
            model.zero_grad();
            loss.backward().unwrap();
            opt.step(&params);
        }
        let t0 = Instant::now();
        let steps = 10;
        for _ in 0..steps {
            let out = model.forward(&input, Mode::Train, &mut rng).unwrap();
            let loss = weighted_l2_l1_loss(&out, &target, 1.0, 0.1).unwrap();
            model.zero_grad();
            loss.backward().unwrap();
            opt.step(&params);
        }
        let dt = t0.elapsed().as_secs_f64() / steps as f64;
        println!("base={base}: {:.1} ms/step (batch 2), params={}", dt * 1e3, model.num_parameters());

        let t1 = Instant::now();
        for _ in 0..steps {
            let _ = model.forward_eval(&input).unwrap();
        }
        println!("base={base}: eval fwd {:.1} ms (batch 2)", t1.elapsed().as_secs_f64() / steps as f64 * 1e3);
    }
}
