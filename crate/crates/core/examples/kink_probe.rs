use gaaf_core::graph::{grad_check, weighted_l2_l1_loss, Mode, Tensor};
use gaaf_core::model::{build_locator, LocatorConfig};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() {
    let config = LocatorConfig {
        levels: 2, base_channels: 2, attention: true, dropout_p: 0.2, in_dims: [8, 8, 8],
    };
    for seed in [0xF1u64, 1, 2, 3] {
        let model = build_locator::<f64>(&config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
        let input = Tensor::leaf(vec![1,1,8,8,8], (0..512).map(|_| rng.random_range(-1.0..1.0)).collect());
        let t = Tensor::leaf(vec![1,1,8,8,8], (0..512).map(|_| rng.random_range(-1.0..1.0)).collect());
        let params = model.param_tensors();
        for eps in [1e-4, 1e-5, 1e-6] {
            let report = grad_check(&mut |_: &[Tensor<f64>]| {
                let mut drop_rng = ChaCha8Rng::seed_from_u64(9);
                let y = model.forward(&input, Mode::Train, &mut drop_rng).unwrap();
                weighted_l2_l1_loss(&y, &t, 1.0, 0.0).unwrap()
            }, &params, eps, 1e-3);
            println!("seed={seed:#x} eps={eps:e}: max_rel_err={:.3e} worst={:?}", report.max_rel_err, report.worst);
        }
    }
}
