mod common;

use common::gradcheck::{self, MICRO_INPUT, OPS};
use common::{GRAD_SEEDS, GRAD_TOL};
use rdnsr::model::ModelConfig;
use rdnsr::train::ablation::TOGGLE_ORDER;
use rdnsr::Shape;

fn assert_op(name: &str) {
    let (_, check) = OPS.iter().find(|(n, _)| *n == name).unwrap();
    for seed in 0..GRAD_SEEDS {
        let err = check(seed);
        assert!(err < GRAD_TOL, "{name}: seed {seed}: relative error {err:.3e}");
    }
}

#[test]
fn conv2d_gradients() {
    assert_op("conv2d");
}

#[test]
fn relu_gradients() {
    assert_op("relu");
}

#[test]
fn add_gradients() {
    assert_op("add");
}

#[test]
fn concat_gradients() {
    assert_op("concat");
}

#[test]
fn pixel_shuffle_gradients() {
    assert_op("pixel_shuffle");
}

#[test]
fn l1_loss_gradients() {
    assert_op("l1_loss");
}

#[test]
fn sum_and_weighted_sum_gradients() {
    assert_op("sum");
}

#[test]
fn micro_rdn_end_to_end_gradients() {
    for seed in 0..GRAD_SEEDS {
        let (err, name) = gradcheck::model(gradcheck::micro_config(), seed, MICRO_INPUT);
        assert!(err < GRAD_TOL, "seed {seed}, {name}: relative error {err:.3e}");
    }
}

#[test]
fn every_toggle_combination_has_correct_gradients() {
    for (i, &(cm, lrl, gff)) in TOGGLE_ORDER.iter().enumerate() {
        for scale in [1, 3, 4] {
            let cfg = ModelConfig::new(2, 2, 3, 4, scale).with_toggles(cm, lrl, gff);
            let (err, name) = gradcheck::model(cfg, 7000 + i as u64 * 10 + scale as u64, Shape::new(1, 3, 4, 5));
            assert!(err < GRAD_TOL, "{cfg}, {name}: relative error {err:.3e}");
        }
    }
}
