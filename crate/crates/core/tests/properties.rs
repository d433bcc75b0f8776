use polarize::adam::{AdamConfig, AdamState};
use polarize::attacks::{fgsm, AttackTarget, GradMode};
use polarize::checkpoint::{Checkpoint, CheckpointMeta};
use polarize::data::{batches, encode_idx_images, encode_idx_labels, parse_idx_images, parse_idx_labels};
use polarize::frontend::{
    certify_ternary, extremal_perturbation, output_perturbation_bound, quantize_multilevel, quantize_ternary,
    FrontEndMode, Histogram,
};
use polarize::model::{ArchConfig, Network};
use polarize::ops;
use polarize::{Result, Tensor};
use proptest::prelude::*;

/// `wᵀx` per sample as the loss; predictions are fixed at class 0.
struct Linear(Vec<f64>);

impl AttackTarget for Linear {
    fn loss_and_input_grad(&self, x: &Tensor, _: &[usize], _: GradMode) -> Result<(Vec<f64>, Tensor)> {
        let d = self.0.len();
        let losses = x
            .data()
            .chunks(d)
            .map(|r| r.iter().zip(&self.0).map(|(a, b)| a * b).sum())
            .collect();
        Ok((losses, Tensor::from_fn(x.shape(), |i| self.0[i % d])))
    }

    fn evaluate(&self, x: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
        Ok((
            self.loss_and_input_grad(x, labels, GradMode::Exact)?.0,
            vec![0; labels.len()],
        ))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ternary_output_in_levels(z in -2.0f64..2.0, c in 0.01f64..0.99) {
        let q = quantize_ternary(z, c);
        prop_assert!(q == -1.0 || q == 0.0 || q == 1.0);
        prop_assert_eq!(q, quantize_multilevel(z, &[-c, c]).unwrap());
    }

    #[test]
    fn ternary_is_monotone(a in -2.0f64..2.0, b in -2.0f64..2.0, c in 0.01f64..0.99) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantize_ternary(lo, c) <= quantize_ternary(hi, c));
    }

    #[test]
    fn holder_bound(w in prop::collection::vec(-1.0f64..1.0, 1..30), eps in 0.0f64..0.5, seed in any::<u64>()) {
        let bound = output_perturbation_bound(&w, eps);
        let e: Vec<f64> = w.iter().enumerate()
            .map(|(i, _)| eps * (((seed.rotate_left(i as u32) & 0xFFFF) as f64 / 65535.0) * 2.0 - 1.0))
            .collect();
        let v: f64 = w.iter().zip(&e).map(|(a, b)| a * b).sum();
        prop_assert!(v.abs() <= bound + 1e-12);
        let star: f64 = w.iter().zip(extremal_perturbation(&w, eps)).map(|(a, b)| a * b).sum();
        prop_assert!((star - bound).abs() <= 1e-12);
    }

    #[test]
    fn certified_margin_survives_any_shift(z in -1.0f64..1.0, c in 0.05f64..0.95, eps in 0.0f64..0.4, t in -1.0f64..1.0) {
        if certify_ternary(&[z], c, eps).certified[0] {
            prop_assert_eq!(quantize_ternary(z + t * eps, c), quantize_ternary(z, c));
        }
    }

    #[test]
    fn fgsm_feasible_and_closed_form(
        w in prop::collection::vec(-1.0f64..1.0, 6),
        x in prop::collection::vec(0.0f64..=1.0, 6),
        eps in 0.0f64..0.5,
    ) {
        let model = Linear(w.clone());
        let xt = Tensor::new(vec![1, 1, 2, 3], x.clone()).unwrap();
        let adv = fgsm(&model, &xt, &[0], eps, GradMode::Exact).unwrap();
        for i in 0..6 {
            let s = if w[i] > 0.0 { 1.0 } else if w[i] < 0.0 { -1.0 } else { 0.0 };
            let want = (x[i] + eps * s).clamp(0.0, 1.0);
            prop_assert_eq!(adv.inputs.data()[i], want);
            prop_assert!((adv.inputs.data()[i] - x[i]).abs() <= eps + f64::EPSILON);
        }
    }

    #[test]
    fn cross_entropy_nonnegative_and_softmax_sums(logits in prop::collection::vec(-20.0f64..20.0, 10), label in 0usize..10) {
        let t = Tensor::new(vec![10], logits).unwrap();
        let (loss, grad) = ops::softmax_cross_entropy(&t, label).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
        prop_assert!(grad.sum().abs() < 1e-12);
    }

    #[test]
    fn histogram_density_integrates_to_one(v in prop::collection::vec(-1.5f64..1.5, 1..200)) {
        let h = Histogram::activations(&v);
        let total: f64 = h.densities().iter().sum::<f64>() * h.bin_width();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn batches_partition(len in 0usize..300, bs in 1usize..64, seed in any::<u64>(), epoch in 0u64..5) {
        let b = batches(len, bs, seed, epoch);
        prop_assert!(b.iter().all(|c| !c.is_empty() && c.len() <= bs));
        let mut all = b.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
    }

    #[test]
    fn idx_round_trip(pixels in prop::collection::vec(any::<u8>(), 12), labels in prop::collection::vec(0u8..10, 3)) {
        let images = parse_idx_images(&encode_idx_images(3, 2, 2, &pixels)).unwrap();
        let back: Vec<u8> = images.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        prop_assert_eq!(back, pixels);
        let l = parse_idx_labels(&encode_idx_labels(&labels)).unwrap();
        prop_assert_eq!(l, labels.iter().map(|&b| b as usize).collect::<Vec<_>>());
    }

    #[test]
    fn adam_step_bounded_by_learning_rate(g in prop::collection::vec(-10.0f64..10.0, 1..8)) {
        let mut p = Tensor::zeros(&[g.len()]);
        let grad = Tensor::new(vec![g.len()], g).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut [&mut p], &[grad]).unwrap();
        prop_assert!(p.data().iter().all(|v| v.abs() <= 1e-3 + 1e-15));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>()) {
        let arch = ArchConfig { fc1_width: 8, conv2_filters: 4, ..ArchConfig::default() };
        let net = Network::init(&arch, seed).unwrap();
        let ck = Checkpoint::from_network(&net, CheckpointMeta {
            arch,
            front_end_mode: Some(FrontEndMode::Linear),
            front_end_frozen: false,
            stage: 1,
            dataset: "mnist".into(),
            seed,
            config_fingerprint: "x".into(),
        });
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.to_network().unwrap(), net);
    }
}
