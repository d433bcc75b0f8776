#![allow(dead_code)]

use polarize::frontend::BumpSpec;
use polarize::frontend::BumpVariant;
use polarize::model::{composite_loss_tape, ArchConfig, GradFlags, GradMode, Network};
use polarize::tape::{Reduction, Tape, Var};
use polarize::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Below this absolute difference the two estimates agree to within the
/// rounding noise of a central difference, whatever their relative error.
pub const ABS_FLOOR: f64 = 1e-9;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Builds a scalar from leaves holding `inputs`.
pub type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

fn eval(build: &Build<'_>, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = build(&mut tape, &vars);
    tape.value(out).data()[0]
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
}

/// Compares tape gradients of every input against central differences.
/// At most `per_input` coordinates of each input are probed, chosen by `seed`.
pub fn check_gradients(build: &Build<'_>, inputs: &[Tensor], per_input: usize, seed: u64) -> GradCheck {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).expect("scalar output");
    let mut pick = rng(seed ^ 0x5EED);
    let mut worst = GradCheck {
        max_rel: 0.0,
        checked: 0,
    };
    for (i, t) in inputs.iter().enumerate() {
        let g = grads.get(vars[i]);
        let coords: Vec<usize> = if t.len() <= per_input {
            (0..t.len()).collect()
        } else {
            (0..per_input).map(|_| pick.gen_range(0..t.len())).collect()
        };
        for j in coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(build, &plus) - eval(build, &minus)) / (2.0 * H);
            let analytic = g.data()[j];
            let diff = (analytic - numeric).abs();
            let rel = if diff <= ABS_FLOOR {
                0.0
            } else {
                diff / analytic.abs().max(numeric.abs())
            };
            if rel > worst.max_rel {
                worst.max_rel = rel;
            }
            worst.checked += 1;
        }
    }
    worst
}

/// Scalar `Σ r ⊙ out` with fixed random `r`, so every output element matters.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let r = random(&shape, -1.0, 1.0, &mut rng(seed ^ 0xD07));
    tape.dot(out, r).expect("dot")
}

/// A small network whose composite loss is differentiated w.r.t. the input,
/// the front-end filters and every classifier tensor.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        front_end_filters: 3,
        conv1_filters: 3,
        conv2_filters: 4,
        fc1_width: 6,
        image_size: 8,
        ..ArchConfig::default()
    }
}

fn library_loss(net: &Network, x: &Tensor, labels: &[usize], bump: &BumpSpec) -> f64 {
    let mut tape = Tape::new();
    let fwd = net
        .forward_tape(&mut tape, x.clone(), GradFlags::default(), GradMode::Exact)
        .unwrap();
    let (loss, _) = composite_loss_tape(&mut tape, &fwd, labels, Some(bump)).unwrap();
    tape.value(loss).data()[0]
}

/// Perturbs parameter `p` (0 = input, 1 = filters, 2.. = classifier) at `j`.
fn perturbed(net: &Network, x: &Tensor, p: usize, j: usize, delta: f64) -> (Network, Tensor) {
    let mut n = net.clone();
    let mut x = x.clone();
    match p {
        0 => x.data_mut()[j] += delta,
        1 => n.front_end.as_mut().unwrap().filters_mut().unwrap().data_mut()[j] += delta,
        _ => n.classifier.tensors_mut()[p - 2].data_mut()[j] += delta,
    }
    (n, x)
}

/// Gradients of the library's composite training loss (linear front end,
/// threshold bump) w.r.t. the input, the filters and every classifier tensor.
pub fn composite_network_check(seed: u64, per_input: usize) -> GradCheck {
    let net = Network::init(&tiny_arch(), seed).expect("network");
    let mut r = rng(seed);
    let x = random(&[2, 1, 8, 8], 0.0, 1.0, &mut r);
    let labels = vec![r.gen_range(0..10), r.gen_range(0..10)];
    let bump = BumpSpec::thresholds(0.15, 0.5, 0.7);

    let mut tape = Tape::new();
    let flags = GradFlags {
        input: true,
        front_end: true,
        classifier: true,
    };
    let fwd = net.forward_tape(&mut tape, x.clone(), flags, GradMode::Exact).unwrap();
    let (loss, _) = composite_loss_tape(&mut tape, &fwd, &labels, Some(&bump)).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut analytic = vec![grads.get(fwd.input), grads.get(fwd.front_end_filters.unwrap())];
    analytic.extend(fwd.classifier.iter().map(|&v| grads.get(v)));

    let mut worst = GradCheck {
        max_rel: 0.0,
        checked: 0,
    };
    for (p, g) in analytic.iter().enumerate() {
        let coords: Vec<usize> = if g.len() <= per_input {
            (0..g.len()).collect()
        } else {
            (0..per_input).map(|_| r.gen_range(0..g.len())).collect()
        };
        for j in coords {
            let (np, xp) = perturbed(&net, &x, p, j, H);
            let (nm, xm) = perturbed(&net, &x, p, j, -H);
            let numeric = (library_loss(&np, &xp, &labels, &bump) - library_loss(&nm, &xm, &labels, &bump)) / (2.0 * H);
            let a = g.data()[j];
            let diff = (a - numeric).abs();
            let rel = if diff <= ABS_FLOOR {
                0.0
            } else {
                diff / a.abs().max(numeric.abs())
            };
            worst.max_rel = worst.max_rel.max(rel);
            worst.checked += 1;
        }
    }
    worst
}

/// Every differentiable tape primitive on random inputs for one seed.
pub fn primitive_checks(seed: u64) -> Vec<(&'static str, GradCheck)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor>, build: &Build<'_>| {
        out.push((name, check_gradients(build, &inputs, 24, seed)));
    };

    for pad in [0usize, 1, 2] {
        let x = random(&[2, 2, 6, 5], -1.0, 1.0, &mut r);
        let k = random(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
        run(
            ["conv2d/pad0", "conv2d/pad1", "conv2d/pad2"][pad],
            vec![x, k],
            &move |t, v| {
                let y = t.conv2d(v[0], v[1], pad).unwrap();
                project(t, y, seed)
            },
        );
    }
    let x = random(&[2, 3, 4, 4], -1.0, 1.0, &mut r);
    let b = random(&[3], -1.0, 1.0, &mut r);
    run("channel_bias", vec![x, b], &|t, v| {
        let y = t.channel_bias(v[0], v[1]).unwrap();
        project(t, y, seed)
    });
    let x = random(&[2, 2, 6, 4], -1.0, 1.0, &mut r);
    run("maxpool2", vec![x], &|t, v| {
        let y = t.maxpool2(v[0]).unwrap();
        project(t, y, seed)
    });
    let x = random(&[3, 7], -1.0, 1.0, &mut r);
    run("relu", vec![x], &|t, v| {
        let y = t.relu(v[0]);
        project(t, y, seed)
    });
    let x = random(&[3, 5], -1.0, 1.0, &mut r);
    let w = random(&[4, 5], -1.0, 1.0, &mut r);
    let b = random(&[4], -1.0, 1.0, &mut r);
    run("affine", vec![x, w, b], &|t, v| {
        let y = t.affine(v[0], v[1], v[2]).unwrap();
        project(t, y, seed)
    });
    let x = random(&[2, 3, 2], -1.0, 1.0, &mut r);
    run("reshape", vec![x], &|t, v| {
        let y = t.reshape(v[0], &[3, 4]).unwrap();
        project(t, y, seed)
    });
    let w = random(&[4, 1, 3, 3], -1.0, 1.0, &mut r);
    run("l1_norms", vec![w], &|t, v| {
        let y = t.l1_norms(v[0]).unwrap();
        project(t, y, seed)
    });
    let x = random(&[2, 3, 3, 3], -1.0, 1.0, &mut r);
    let n = random(&[3], 0.5, 2.0, &mut r);
    run("div_channels", vec![x, n], &|t, v| {
        let y = t.div_channels(v[0], v[1]).unwrap();
        project(t, y, seed)
    });
    for (name, variant) in [
        ("bump_mean/origin", BumpVariant::Origin),
        ("bump_mean/thresholds", BumpVariant::Thresholds),
    ] {
        let z = random(&[2, 3, 4], -1.2, 1.2, &mut r);
        let spec = BumpSpec {
            variant,
            sigma: 0.25,
            center: 0.5,
            lambda: 1.0,
        };
        run(name, vec![z], &move |t, v| t.bump_mean(v[0], spec));
    }
    let labels: Vec<usize> = (0..3).map(|_| r.gen_range(0..10)).collect();
    for (name, red) in [
        ("cross_entropy/sum", Reduction::Sum),
        ("cross_entropy/mean", Reduction::Mean),
    ] {
        let logits = random(&[3, 10], -3.0, 3.0, &mut r);
        let labels = labels.clone();
        run(name, vec![logits], &move |t, v| {
            t.cross_entropy(v[0], &labels, red).unwrap().0
        });
    }
    let x = random(&[4, 2], -1.0, 1.0, &mut r);
    run("sum", vec![x], &|t, v| t.sum(v[0]));
    let x = random(&[5], -1.0, 1.0, &mut r);
    run("dot", vec![x], &|t, v| project(t, v[0], seed));
    let a = random(&[2, 3], -1.0, 1.0, &mut r);
    let b = random(&[2, 3], -1.0, 1.0, &mut r);
    run("add_scaled", vec![a, b], &|t, v| {
        let y = t.add_scaled(v[0], v[1], -0.7).unwrap();
        project(t, y, seed)
    });
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HolderOutcome {
    /// Largest `|wᵀe| − ε‖w‖₁` over all sampled perturbations (should be ≤ 0).
    pub worst_excess: f64,
    /// Largest `| |wᵀe*| − ε‖w‖₁ |` for the extremal perturbation.
    pub worst_extremal_gap: f64,
    pub samples: usize,
}

/// Random filters against sampled box perturbations (uniform and corner) and
/// the extremal perturbation `ε·sign(w)`.
pub fn holder_trials(filters: usize, samples_per_filter: usize, seed: u64) -> HolderOutcome {
    use polarize::frontend::{extremal_perturbation, output_perturbation_bound};
    let mut r = rng(seed);
    let mut out = HolderOutcome::default();
    for _ in 0..filters {
        let w: Vec<f64> = (0..25).map(|_| r.gen_range(-1.0..1.0)).collect();
        for eps in [0.05, 0.1, 0.3] {
            let bound = output_perturbation_bound(&w, eps);
            for s in 0..samples_per_filter {
                let e: Vec<f64> = if s % 2 == 0 {
                    (0..25).map(|_| r.gen_range(-eps..=eps)).collect()
                } else {
                    (0..25).map(|_| if r.gen_bool(0.5) { eps } else { -eps }).collect()
                };
                let v: f64 = w.iter().zip(&e).map(|(a, b)| a * b).sum();
                out.worst_excess = out.worst_excess.max(v.abs() - bound);
                out.samples += 1;
            }
            let e = extremal_perturbation(&w, eps);
            let v: f64 = w.iter().zip(&e).map(|(a, b)| a * b).sum();
            out.worst_extremal_gap = out.worst_extremal_gap.max((v.abs() - bound).abs());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CertOutcome {
    pub trials: usize,
    pub certified: usize,
    pub false_certifications: usize,
}

/// Random `(w, x, c, ε)`: whenever the clean normalized activation is
/// certified, the quantized output must survive `±ε·sign(w)` and
/// `random_perturbations` uniform box perturbations.
pub fn certification_trials(trials: usize, random_perturbations: usize, seed: u64) -> CertOutcome {
    use polarize::frontend::{certify_ternary, extremal_perturbation, quantize_ternary};
    let mut r = rng(seed);
    let mut out = CertOutcome::default();
    for _ in 0..trials {
        let w: Vec<f64> = (0..25).map(|_| r.gen_range(-1.0..1.0)).collect();
        let norm: f64 = w.iter().map(|v| v.abs()).sum();
        let x: Vec<f64> = (0..25).map(|_| r.gen_range(0.0..1.0)).collect();
        let c = r.gen_range(0.05..0.95);
        let eps = r.gen_range(0.0..0.4);
        let act = |e: &[f64]| -> f64 {
            w.iter()
                .zip(x.iter().zip(e))
                .map(|(w, (x, e))| w * (x + e))
                .sum::<f64>()
                / norm
        };
        let z = act(&[0.0; 25]);
        out.trials += 1;
        if !certify_ternary(&[z], c, eps).certified[0] {
            continue;
        }
        out.certified += 1;
        let q = quantize_ternary(z, c);
        let star = extremal_perturbation(&w, eps);
        let neg: Vec<f64> = star.iter().map(|v| -v).collect();
        let mut flipped = quantize_ternary(act(&star), c) != q || quantize_ternary(act(&neg), c) != q;
        for _ in 0..random_perturbations {
            if flipped {
                break;
            }
            let e: Vec<f64> = (0..25).map(|_| r.gen_range(-eps..=eps)).collect();
            flipped = quantize_ternary(act(&e), c) != q;
        }
        if flipped {
            out.false_certifications += 1;
        }
    }
    out
}
