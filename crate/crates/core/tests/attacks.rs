mod common;

use common::{random, rng, tiny_arch};
use polarize::attacks::{
    assert_feasible, bim, fgsm, input_gradient, pgd_restarts, AttackSpec, AttackTarget, GradMode, LINF_SLACK,
};
use polarize::model::Network;
use polarize::Tensor;

fn quantized_net(seed: u64) -> Network {
    let mut net = Network::init(&tiny_arch(), seed).unwrap();
    net.front_end.as_mut().unwrap().freeze_and_quantize();
    net
}

fn batch(seed: u64) -> (Tensor, Vec<usize>) {
    let mut r = rng(seed);
    (random(&[4, 1, 8, 8], 0.0, 1.0, &mut r), vec![0, 3, 5, 9])
}

#[test]
fn exact_gradient_through_quantizer_is_zero() {
    let net = quantized_net(1);
    let (x, labels) = batch(1);
    let g = input_gradient(&net, &x, &labels, GradMode::Exact).unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0));
    let adv = fgsm(&net, &x, &labels, 0.3, GradMode::Exact).unwrap();
    assert_eq!(adv.inputs, x);
}

#[test]
fn identity_gradient_moves_input() {
    let arch = polarize::model::ArchConfig {
        threshold: 0.05,
        ..tiny_arch()
    };
    let mut net = Network::init(&arch, 2).unwrap();
    net.front_end.as_mut().unwrap().freeze_and_quantize();
    let (x, labels) = batch(2);
    let g = input_gradient(&net, &x, &labels, GradMode::IdentityThroughQuantizer).unwrap();
    assert!(g.data().iter().any(|&v| v != 0.0));
}

#[test]
fn pgd_with_zero_start_dominates_bim() {
    for seed in 0..4 {
        let net = Network::init(&tiny_arch(), seed).unwrap();
        let (x, labels) = batch(seed + 10);
        let eps = 0.3;
        let b = bim(&net, &x, &labels, &AttackSpec::bim(eps)).unwrap();
        let p = pgd_restarts(&net, &x, &labels, &AttackSpec::pgd(eps, 3, 20).with_seed(seed)).unwrap();
        for (lp, lb) in p.final_losses().iter().zip(b.final_losses()) {
            assert!(*lp >= lb, "pgd {lp} < bim {lb}");
        }
        assert_ne!(b.inputs, x);
        assert_feasible(&x, &b.inputs, eps);
        assert_feasible(&x, &p.inputs, eps);
    }
}

#[test]
fn success_flags_use_true_forward() {
    let net = quantized_net(3);
    let (x, labels) = batch(3);
    let adv = pgd_restarts(&net, &x, &labels, &AttackSpec::pgd(0.2, 2, 5).with_seed(1)).unwrap();
    let (losses, preds) = net.evaluate(&adv.inputs, &labels).unwrap();
    for i in 0..labels.len() {
        assert_eq!(adv.success[i], preds[i] != labels[i]);
        assert_eq!(adv.final_losses()[i], losses[i]);
    }
}

#[test]
fn pgd_is_seeded() {
    let net = quantized_net(4);
    let (x, labels) = batch(4);
    let spec = AttackSpec::pgd(0.3, 3, 4).with_seed(9);
    let a = pgd_restarts(&net, &x, &labels, &spec).unwrap();
    let b = pgd_restarts(&net, &x, &labels, &spec).unwrap();
    assert!(a.inputs.bit_eq(&b.inputs));
}

#[test]
fn pixels_at_range_edges_stay_feasible() {
    let net = quantized_net(5);
    let x = Tensor::from_fn(&[2, 1, 8, 8], |i| {
        if i % 3 == 0 {
            0.0
        } else if i % 3 == 1 {
            1.0
        } else {
            0.95
        }
    });
    let labels = [1, 2];
    for spec in [AttackSpec::fgsm(0.3), AttackSpec::bim(0.3), AttackSpec::pgd(0.3, 2, 5)] {
        let adv = polarize::attacks::run_attack(&net, &x, &labels, &spec).unwrap();
        assert!(adv.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(polarize::attacks::linf_distance(&x, &adv.inputs) <= 0.3 + LINF_SLACK);
    }
}

#[test]
#[should_panic(expected = "outside the l-inf budget")]
fn feasibility_assert_fires() {
    let x = Tensor::zeros(&[1, 1, 2, 2]);
    let y = Tensor::full(&[1, 1, 2, 2], 0.5);
    assert_feasible(&x, &y, 0.3);
}
