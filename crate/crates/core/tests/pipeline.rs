//! End-to-end reproducibility of training and evaluation.

use sinefm::network::{convert_to_sinefm, tiny_vgg, Model};
use sinefm::train::{evaluate, train, Dataset, DatasetSpec, OptimConfig, TrainOptions};
use sinefm::transforms::TransformFamily;

fn run(seed: u64) -> (Vec<f64>, Vec<u64>, f64) {
    let data = Dataset::<f64>::generate(&DatasetSpec::synth_class(64, 32, seed)).unwrap();
    let desc = convert_to_sinefm(&tiny_vgg(4, 16), 16, 3, TransformFamily::Sinusoidal, seed);
    let mut model = Model::<f64>::build(&desc, seed).unwrap();
    let cfg = OptimConfig {
        epochs: 2,
        batch: 16,
        lr: 2e-3,
        ..Default::default()
    };
    let h = train(&mut model, &data, &cfg, &TrainOptions { seed, augment: true }).unwrap();
    let bits = model.params().iter().flat_map(|p| p.data().iter().map(|v| v.to_bits())).collect();
    let m = evaluate(&model, &data.test, data.task, 1).unwrap();
    (h.epochs.iter().map(|e| e.loss).collect(), bits, m.accuracy)
}

#[test]
fn train_and_evaluate_are_bit_reproducible() {
    let a = run(5);
    let b = run(5);
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1, b.1);
    assert_eq!(a.2.to_bits(), b.2.to_bits());
    let c = run(6);
    assert_ne!(a.1, c.1);
}
