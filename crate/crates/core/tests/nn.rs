mod common;

use std::sync::Arc;

use common::{fd_gradient, random_params};
use evofed::datasets::synth_blobs;
use evofed::detrng::RngStream;
use evofed::nn::{self, Activation, ArchSpec, Batch, OptimizerCfg};

fn random_batch(rng: &mut RngStream, rows: usize, dim: usize, classes: usize) -> Batch {
    let inputs = (0..rows * dim).map(|_| rng.uniform() * 2.0 - 1.0).collect();
    let labels = (0..rows).map(|_| rng.below(classes as u64) as usize).collect();
    Batch::new(inputs, labels, dim).unwrap()
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut rng = RngStream::new(314);
    for (hidden, act) in [
        (vec![], Activation::Identity),
        (vec![5], Activation::Tanh),
        (vec![4, 3], Activation::Tanh),
        (vec![6], Activation::Relu),
    ] {
        let arch = Arc::new(ArchSpec::mlp(3, &hidden, 4, act).unwrap());
        let model = random_params(&arch, &mut rng, 0.7);
        let batch = random_batch(&mut rng, 7, 3, 4);
        let (_, grad) = nn::loss_and_grad(&model, &batch).unwrap();
        let fd = fd_gradient(&model, &batch, 1e-6);
        for (j, (a, b)) in grad.iter().zip(&fd).enumerate() {
            assert!((a - b).abs() < 1e-6, "{hidden:?} {act:?} component {j}: {a} vs {b}");
        }
    }
}

#[test]
fn loss_matches_reported_loss() {
    let arch = Arc::new(ArchSpec::mlp(2, &[3], 2, Activation::Tanh).unwrap());
    let mut rng = RngStream::new(9);
    let model = random_params(&arch, &mut rng, 1.0);
    let batch = random_batch(&mut rng, 5, 2, 2);
    let (a, b) = (
        nn::loss(&model, &batch).unwrap(),
        nn::loss_and_grad(&model, &batch).unwrap().0,
    );
    assert!((a - b).abs() <= 1e-14 * a.abs());
}

#[test]
fn local_training_fits_a_separable_problem() {
    let data = synth_blobs(4, 400, 2, 4, 0.05).unwrap();
    let arch = Arc::new(ArchSpec::mlp(2, &[16], 4, Activation::Relu).unwrap());
    let model = nn::init_model(&arch, 1);
    let cfg = OptimizerCfg {
        learning_rate: 0.1,
        momentum: 0.9,
        weight_decay: 0.0,
        local_steps: 400,
        batch_size: 32,
    };
    let before = nn::evaluate(&model, &data).unwrap();
    let trained = nn::local_train(&model, &data, &cfg, 2).unwrap();
    let after = nn::evaluate(&trained, &data).unwrap();
    assert!(after.loss < before.loss);
    assert!(after.accuracy > 0.95, "{after:?}");
    assert_eq!(trained, nn::local_train(&model, &data, &cfg, 2).unwrap());
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let data = synth_blobs(4, 100, 2, 2, 0.05).unwrap();
    let arch = Arc::new(ArchSpec::mlp(2, &[4], 2, Activation::Relu).unwrap());
    let model = nn::init_model(&arch, 3);
    let cfg = OptimizerCfg {
        learning_rate: 0.0,
        momentum: 0.5,
        weight_decay: 0.1,
        local_steps: 5,
        batch_size: 10,
    };
    assert_eq!(nn::local_train(&model, &data, &cfg, 0).unwrap(), model);
}
