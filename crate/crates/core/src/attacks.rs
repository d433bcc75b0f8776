//! White-box l∞ attacks: FGSM, BIM and PGD with random restarts.
//!
//! All attacks keep the iterate inside the intersection of the ε-box around
//! the clean input and the pixel range `[0,1]`. Inside attacks `sign(0) = 0`,
//! so a zero gradient leaves the pixel where it is. Losses, predictions and
//! success flags always come from the true forward pass; only the gradient
//! may route around the quantizer (see [`GradMode`]).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::model::GradMode;
use crate::model::{GradFlags, Network};
use crate::ops;
use crate::rng::stream;
use crate::tape::{Reduction, Tape};
use crate::tensor::Tensor;

/// Absolute slack allowed on `‖x′ − x‖∞ ≤ ε`: one ulp at 1.0, the rounding
/// error of forming `x ± ε` for pixels in `[0,1]`.
pub const LINF_SLACK: f64 = f64::EPSILON;

const PGD_TAG: u64 = 0x96D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackFamily {
    Fgsm,
    Bim,
    Pgd,
}

impl AttackFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Bim => "bim",
            AttackFamily::Pgd => "pgd",
        }
    }
}

impl std::str::FromStr for AttackFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackFamily::Fgsm),
            "bim" => Ok(AttackFamily::Bim),
            "pgd" => Ok(AttackFamily::Pgd),
            other => Err(Error::Argument(format!("unknown attack {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub family: AttackFamily,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub restarts: usize,
    /// PGD only: restart 0 starts from the clean input instead of a random point.
    pub include_zero_start: bool,
    pub grad_mode: GradMode,
    pub seed: u64,
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackSpec {
            family: AttackFamily::Fgsm,
            epsilon,
            step_size: epsilon,
            steps: 1,
            restarts: 1,
            include_zero_start: true,
            grad_mode: GradMode::IdentityThroughQuantizer,
            seed: 0,
        }
    }

    /// `α = ε/10`, 20 steps.
    pub fn bim(epsilon: f64) -> Self {
        AttackSpec {
            family: AttackFamily::Bim,
            step_size: epsilon / 10.0,
            steps: 20,
            ..AttackSpec::fgsm(epsilon)
        }
    }

    /// `α = ε/10`, with `restarts` runs of `steps` iterations each.
    pub fn pgd(epsilon: f64, restarts: usize, steps: usize) -> Self {
        AttackSpec {
            family: AttackFamily::Pgd,
            step_size: epsilon / 10.0,
            steps,
            restarts,
            ..AttackSpec::fgsm(epsilon)
        }
    }

    pub fn with_grad_mode(mut self, mode: GradMode) -> Self {
        self.grad_mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Argument(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if self.family != AttackFamily::Fgsm {
            if !(self.step_size > 0.0) && self.epsilon > 0.0 {
                return Err(Error::Argument("iterative attacks need a positive step size".into()));
            }
            if self.steps == 0 {
                return Err(Error::Argument("iterative attacks need at least one step".into()));
            }
        }
        if self.family == AttackFamily::Pgd && self.restarts == 0 {
            return Err(Error::Argument("PGD needs at least one restart".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.family {
            AttackFamily::Fgsm => "fgsm".into(),
            AttackFamily::Bim => format!("bim-{}", self.steps),
            AttackFamily::Pgd => format!("pgd-{}x{}", self.restarts, self.steps),
        }
    }
}

/// A model the attacks can query.
pub trait AttackTarget {
    /// Per-sample losses of the true forward pass and the gradient of their
    /// sum with respect to `x`.
    fn loss_and_input_grad(&self, x: &Tensor, labels: &[usize], mode: GradMode) -> Result<(Vec<f64>, Tensor)>;

    /// Per-sample losses and predicted classes of the true forward pass.
    fn evaluate(&self, x: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Vec<usize>)>;
}

impl AttackTarget for Network {
    fn loss_and_input_grad(&self, x: &Tensor, labels: &[usize], mode: GradMode) -> Result<(Vec<f64>, Tensor)> {
        let mut tape = Tape::new();
        let flags = GradFlags {
            input: true,
            ..GradFlags::default()
        };
        let fwd = self.forward_tape(&mut tape, x.clone(), flags, mode)?;
        let (loss, losses) = tape.cross_entropy(fwd.logits, labels, Reduction::Sum)?;
        let mut grads = tape.backward(loss)?;
        let g = grads.take(fwd.input).reshape(x.shape())?;
        Ok((losses, g))
    }

    fn evaluate(&self, x: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
        let logits = self.logits(x)?;
        let (losses, _) = ops::softmax_cross_entropy_batch(&logits, labels)?;
        Ok((losses, argmax_rows(&logits)))
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let m = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks_exact(m)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Result of attacking a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialBatch {
    pub inputs: Tensor,
    /// True when the attacked input is misclassified.
    pub success: Vec<bool>,
    /// Per sample: loss at each iterate, ending with the loss of `inputs`.
    pub loss_trace: Vec<Vec<f64>>,
}

impl AdversarialBatch {
    pub fn final_losses(&self) -> Vec<f64> {
        self.loss_trace.iter().map(|t| *t.last().unwrap_or(&f64::NAN)).collect()
    }

    pub fn accuracy(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| !s).count() as f64 / self.success.len() as f64
    }
}

/// `∇ₓ L` of the summed cross entropy.
pub fn input_gradient<M: AttackTarget + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    mode: GradMode,
) -> Result<Tensor> {
    Ok(model.loss_and_input_grad(x, labels, mode)?.1)
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Moves `current` by `step·sign(grad)` and projects onto the ε-box around
/// `clean` intersected with `[0,1]`.
fn signed_step(clean: &Tensor, current: &Tensor, grad: &Tensor, step: f64, epsilon: f64) -> Tensor {
    let data = clean
        .data()
        .iter()
        .zip(current.data())
        .zip(grad.data())
        .map(|((&x0, &x), &g)| project(x0, x + step * sign0(g), epsilon))
        .collect();
    Tensor::new(clean.shape().to_vec(), data).expect("shape preserved")
}

fn project(clean: f64, v: f64, epsilon: f64) -> f64 {
    let lo = (clean - epsilon).max(0.0);
    let hi = (clean + epsilon).min(1.0);
    v.max(lo).min(hi)
}

/// Largest `|x′ − x|` over all entries.
pub fn linf_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Asserts the l∞ budget and pixel range for every sample. Active in release builds.
pub fn assert_feasible(clean: &Tensor, adv: &Tensor, epsilon: f64) {
    assert_eq!(clean.shape(), adv.shape(), "adversarial batch shape");
    let dist = linf_distance(clean, adv);
    assert!(
        dist <= epsilon + LINF_SLACK,
        "adversarial example outside the l-inf budget: {dist} > {epsilon}"
    );
    assert!(
        adv.data().iter().all(|v| (0.0..=1.0).contains(v)),
        "adversarial example outside [0,1]"
    );
}

fn finish<M: AttackTarget + ?Sized>(
    model: &M,
    clean: &Tensor,
    adv: Tensor,
    labels: &[usize],
    epsilon: f64,
    mut trace: Vec<Vec<f64>>,
) -> Result<AdversarialBatch> {
    assert_feasible(clean, &adv, epsilon);
    let (losses, preds) = model.evaluate(&adv, labels)?;
    for (t, l) in trace.iter_mut().zip(losses) {
        t.push(l);
    }
    let success = preds.iter().zip(labels).map(|(p, l)| p != l).collect();
    Ok(AdversarialBatch {
        inputs: adv,
        success,
        loss_trace: trace,
    })
}

/// `x′ = clamp₀₁(x + ε·sign(∇ₓL))`.
pub fn fgsm<M: AttackTarget + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    epsilon: f64,
    mode: GradMode,
) -> Result<AdversarialBatch> {
    AttackSpec::fgsm(epsilon).validate()?;
    let (losses, grad) = model.loss_and_input_grad(x, labels, mode)?;
    let adv = signed_step(x, x, &grad, epsilon, epsilon);
    let trace = losses.into_iter().map(|l| vec![l]).collect();
    finish(model, x, adv, labels, epsilon, trace)
}

/// Iterated signed-gradient steps from `start`, projected after every step.
fn iterate<M: AttackTarget + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    start: Tensor,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let mut current = start;
    let mut trace = vec![Vec::with_capacity(spec.steps + 1); labels.len()];
    for _ in 0..spec.steps {
        let (losses, grad) = model.loss_and_input_grad(&current, labels, spec.grad_mode)?;
        for (t, l) in trace.iter_mut().zip(losses) {
            t.push(l);
        }
        current = signed_step(x, &current, &grad, spec.step_size, spec.epsilon);
        debug_assert!(linf_distance(x, &current) <= spec.epsilon + LINF_SLACK);
    }
    Ok((current, trace))
}

/// Basic iterative method starting from the clean input.
pub fn bim<M: AttackTarget + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AdversarialBatch> {
    spec.validate()?;
    let (adv, trace) = iterate(model, x, labels, spec, x.clone())?;
    finish(model, x, adv, labels, spec.epsilon, trace)
}

/// PGD with restarts: BIM from `restarts` starting points (restart 0 at the
/// clean input when `include_zero_start`, the rest uniform in the ε-box),
/// keeping per sample the restart with the largest final loss. Ties keep the
/// earlier restart.
pub fn pgd_restarts<M: AttackTarget + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AdversarialBatch> {
    spec.validate()?;
    let per_sample = x.len() / labels.len().max(1);
    let mut best: Option<AdversarialBatch> = None;
    for restart in 0..spec.restarts {
        let start = if restart == 0 && spec.include_zero_start {
            x.clone()
        } else {
            let mut rng = stream(spec.seed, &[PGD_TAG, restart as u64]);
            let eps = spec.epsilon;
            x.map(|v| {
                let e = if eps > 0.0 { rng.gen_range(-eps..=eps) } else { 0.0 };
                project(v, v + e, eps)
            })
        };
        let (adv, trace) = iterate(model, x, labels, spec, start)?;
        let candidate = finish(model, x, adv, labels, spec.epsilon, trace)?;
        best = Some(match best {
            None => candidate,
            Some(mut current) => {
                let cur_losses = current.final_losses();
                let new_losses = candidate.final_losses();
                for i in 0..labels.len() {
                    if new_losses[i] > cur_losses[i] {
                        let range = i * per_sample..(i + 1) * per_sample;
                        current.inputs.data_mut()[range.clone()].copy_from_slice(&candidate.inputs.data()[range]);
                        current.success[i] = candidate.success[i];
                        current.loss_trace[i] = candidate.loss_trace[i].clone();
                    }
                }
                current
            }
        });
    }
    Ok(best.expect("at least one restart"))
}

/// Dispatches on `spec.family`.
pub fn run_attack<M: AttackTarget + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AdversarialBatch> {
    match spec.family {
        AttackFamily::Fgsm => fgsm(model, x, labels, spec.epsilon, spec.grad_mode),
        AttackFamily::Bim => bim(model, x, labels, spec),
        AttackFamily::Pgd => pgd_restarts(model, x, labels, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Loss `wᵀx` per sample; prediction is always class 0.
    struct LinearLoss {
        w: Vec<f64>,
    }

    impl AttackTarget for LinearLoss {
        fn loss_and_input_grad(&self, x: &Tensor, labels: &[usize], _: GradMode) -> Result<(Vec<f64>, Tensor)> {
            let n = labels.len();
            let d = self.w.len();
            let losses = x
                .data()
                .chunks_exact(d)
                .map(|r| r.iter().zip(&self.w).map(|(a, b)| a * b).sum())
                .collect();
            let grad = Tensor::from_fn(x.shape(), |i| self.w[i % d]);
            assert_eq!(x.len(), n * d);
            Ok((losses, grad))
        }

        fn evaluate(&self, x: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
            let (l, _) = self.loss_and_input_grad(x, labels, GradMode::Exact)?;
            Ok((l, vec![0; labels.len()]))
        }
    }

    fn batch() -> Tensor {
        Tensor::new(vec![2, 1, 1, 4], vec![0.0, 0.5, 1.0, 0.95, 0.2, 0.1, 0.7, 0.3]).unwrap()
    }

    #[test]
    fn fgsm_on_linear_loss_is_closed_form() {
        let model = LinearLoss {
            w: vec![1.0, -2.0, 0.5, 0.0],
        };
        let x = batch();
        let adv = fgsm(&model, &x, &[0, 1], 0.1, GradMode::Exact).unwrap();
        let expected = [0.1, 0.4, 1.0, 0.95, 0.3, 0.0, 0.8, 0.3];
        for (a, e) in adv.inputs.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
        assert_eq!(adv.success, vec![false, true]);
    }

    #[test]
    fn zero_budget_is_identity() {
        let model = LinearLoss {
            w: vec![1.0, -1.0, 1.0, -1.0],
        };
        let x = batch();
        assert_eq!(fgsm(&model, &x, &[0, 0], 0.0, GradMode::Exact).unwrap().inputs, x);
        let spec = AttackSpec::pgd(0.0, 3, 5);
        assert_eq!(pgd_restarts(&model, &x, &[0, 0], &spec).unwrap().inputs, x);
    }

    #[test]
    fn bim_single_full_step_equals_fgsm() {
        let model = LinearLoss {
            w: vec![0.3, -0.2, 0.0, 1.0],
        };
        let x = batch();
        let mut spec = AttackSpec::bim(0.2);
        spec.steps = 1;
        spec.step_size = 0.2;
        let a = bim(&model, &x, &[0, 0], &spec).unwrap();
        let b = fgsm(&model, &x, &[0, 0], 0.2, spec.grad_mode).unwrap();
        assert!(a.inputs.bit_eq(&b.inputs));
    }

    #[test]
    fn bim_stays_in_box() {
        let model = LinearLoss {
            w: vec![1.0, 1.0, -1.0, -1.0],
        };
        let x = batch();
        let spec = AttackSpec::bim(0.25);
        let adv = bim(&model, &x, &[0, 0], &spec).unwrap();
        assert!(linf_distance(&x, &adv.inputs) <= 0.25 + LINF_SLACK);
        assert_eq!(adv.loss_trace[0].len(), spec.steps + 1);
    }

    #[test]
    fn spec_validation() {
        assert!(AttackSpec::fgsm(-0.1).validate().is_err());
        assert!(AttackSpec::pgd(0.3, 0, 10).validate().is_err());
        let mut s = AttackSpec::bim(0.3);
        s.steps = 0;
        assert!(s.validate().is_err());
        assert_eq!(AttackSpec::bim(0.3).step_size, 0.3 / 10.0);
        assert_eq!(AttackSpec::bim(0.3).steps, 20);
    }

    #[test]
    fn argmax_first_max() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 3.0, 3.0, -1.0, -2.0, -3.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }
}
