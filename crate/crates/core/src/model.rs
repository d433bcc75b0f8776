//! Front end plus the small two-conv, two-dense classifier, and the training loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{bump_mean, BumpSpec, FrontEndMode, FrontEndState};
use crate::ops;
use crate::rng::derive_seed;
use crate::tape::{Reduction, Tape, Var};
use crate::tensor::Tensor;

/// How gradients pass through the quantizer when differentiating w.r.t. the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    /// True derivative: zero almost everywhere.
    Exact,
    /// Forward through the quantizer, backward as if it were the identity (BPDA).
    IdentityThroughQuantizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// `false` gives the undefended baseline: the classifier reads pixels directly.
    pub front_end: bool,
    pub front_end_filters: usize,
    pub front_end_kernel: usize,
    pub threshold: f64,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub conv_kernel: usize,
    pub fc1_width: usize,
    pub classes: usize,
    pub image_size: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            front_end: true,
            front_end_filters: 32,
            front_end_kernel: 5,
            threshold: 0.5,
            conv1_filters: 32,
            conv2_filters: 64,
            conv_kernel: 5,
            fc1_width: 1024,
            classes: 10,
            image_size: 28,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return bad("image_size must be a positive multiple of 4 (two 2x2 pools)");
        }
        if self.conv_kernel.is_multiple_of(2) || self.front_end_kernel.is_multiple_of(2) {
            return bad("kernel sizes must be odd");
        }
        if self.front_end && self.front_end_filters == 0 {
            return bad("front end needs at least one filter");
        }
        if self.classes < 2 {
            return bad("need at least two classes");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0,1)");
        }
        Ok(())
    }

    fn classifier_in_channels(&self) -> usize {
        if self.front_end {
            self.front_end_filters
        } else {
            1
        }
    }

    fn flat_features(&self) -> usize {
        let s = self.image_size / 4;
        self.conv2_filters * s * s
    }
}

/// Weights of the classifier that reads the front-end output.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub conv1_weight: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_weight: Tensor,
    pub conv2_bias: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

pub const CLASSIFIER_PARAM_NAMES: [&str; 8] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
];

pub const FRONT_END_PARAM_NAME: &str = "frontend.filters";

impl ClassifierParams {
    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.conv1_weight,
            &self.conv1_bias,
            &self.conv2_weight,
            &self.conv2_bias,
            &self.fc1_weight,
            &self.fc1_bias,
            &self.fc2_weight,
            &self.fc2_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.conv1_weight,
            &mut self.conv1_bias,
            &mut self.conv2_weight,
            &mut self.conv2_bias,
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]
    }

    pub fn from_tensors(t: [Tensor; 8]) -> Result<Self> {
        let [conv1_weight, conv1_bias, conv2_weight, conv2_bias, fc1_weight, fc1_bias, fc2_weight, fc2_bias] = t;
        let p = ClassifierParams {
            conv1_weight,
            conv1_bias,
            conv2_weight,
            conv2_bias,
            fc1_weight,
            fc1_bias,
            fc2_weight,
            fc2_bias,
        };
        p.check_shapes()?;
        Ok(p)
    }

    fn check_shapes(&self) -> Result<()> {
        let c1 = self.conv1_weight.shape();
        let c2 = self.conv2_weight.shape();
        let f1 = self.fc1_weight.shape();
        let f2 = self.fc2_weight.shape();
        let ok = c1.len() == 4
            && c2.len() == 4
            && f1.len() == 2
            && f2.len() == 2
            && self.conv1_bias.shape() == [c1[0]]
            && c2[1] == c1[0]
            && self.conv2_bias.shape() == [c2[0]]
            && f1[1].is_multiple_of(c2[0])
            && self.fc1_bias.shape() == [f1[0]]
            && f2[1] == f1[0]
            && self.fc2_bias.shape() == [f2[0]];
        if ok {
            Ok(())
        } else {
            Err(Error::shape("classifier", c1, f1))
        }
    }

    /// He-uniform weights, zero biases.
    pub fn init(arch: &ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xC1A5]));
        let k = arch.conv_kernel;
        let cin = arch.classifier_in_channels();
        let conv1_weight = he_uniform(&[arch.conv1_filters, cin, k, k], &mut rng);
        let conv2_weight = he_uniform(&[arch.conv2_filters, arch.conv1_filters, k, k], &mut rng);
        let fc1_weight = he_uniform(&[arch.fc1_width, arch.flat_features()], &mut rng);
        let fc2_weight = he_uniform(&[arch.classes, arch.fc1_width], &mut rng);
        ClassifierParams {
            conv1_bias: Tensor::zeros(&[arch.conv1_filters]),
            conv2_bias: Tensor::zeros(&[arch.conv2_filters]),
            fc1_bias: Tensor::zeros(&[arch.fc1_width]),
            fc2_bias: Tensor::zeros(&[arch.classes]),
            conv1_weight,
            conv2_weight,
            fc1_weight,
            fc2_weight,
        }
    }

    /// conv1 → ReLU → pool → conv2 → ReLU → pool → fc1 → ReLU → fc2, for a
    /// `[C,H,W]` or `[N,C,H,W]` input. Returns `[M]` or `[N,M]` logits.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let single = z.shape().len() == 3;
        let pad1 = self.conv1_weight.shape()[2] / 2;
        let pad2 = self.conv2_weight.shape()[2] / 2;
        let h = ops::add_channel_bias(&ops::conv2d(z, &self.conv1_weight, pad1)?, &self.conv1_bias)?;
        let (h, _) = ops::maxpool2(&ops::relu(&h))?;
        let h = ops::add_channel_bias(&ops::conv2d(&h, &self.conv2_weight, pad2)?, &self.conv2_bias)?;
        let (h, _) = ops::maxpool2(&ops::relu(&h))?;
        let features: usize = h.shape()[h.shape().len() - 3..].iter().product();
        let rows = if single { 1 } else { h.shape()[0] };
        let flat = h.reshape(&[rows, features])?;
        let h = ops::relu(&ops::affine(&flat, &self.fc1_weight, &self.fc1_bias)?);
        let logits = ops::affine(&h, &self.fc2_weight, &self.fc2_bias)?;
        if single {
            let m = logits.len();
            logits.reshape(&[m])
        } else {
            Ok(logits)
        }
    }
}

fn he_uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    Tensor::uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

/// Front-end filters drawn He-uniform.
pub fn init_front_end(arch: &ArchConfig, seed: u64) -> Result<FrontEndState> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xF0E0]));
    let k = arch.front_end_kernel;
    let filters = he_uniform(&[arch.front_end_filters, 1, k, k], &mut rng);
    FrontEndState::new(filters, arch.threshold)
}

/// Which leaves of a recorded forward pass receive gradients.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradFlags {
    pub input: bool,
    pub front_end: bool,
    pub classifier: bool,
}

/// Handles into a forward pass recorded on a [`Tape`].
pub struct TapeForward {
    pub input: Var,
    pub front_end_filters: Option<Var>,
    /// Normalized front-end activations before quantization.
    pub z: Option<Var>,
    pub classifier: [Var; 8],
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub front_end: Option<FrontEndState>,
    pub classifier: ClassifierParams,
}

impl Network {
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let front_end = if arch.front_end {
            Some(init_front_end(arch, seed)?)
        } else {
            None
        };
        Ok(Network {
            front_end,
            classifier: ClassifierParams::init(arch, seed),
        })
    }

    /// Records a forward pass on `tape`. `x` is `[N,1,H,W]` or a single `[1,H,W]` image.
    pub fn forward_tape(&self, tape: &mut Tape, x: Tensor, flags: GradFlags, mode: GradMode) -> Result<TapeForward> {
        let x = if x.shape().len() == 3 {
            let s = x.shape().to_vec();
            x.reshape(&[1, s[0], s[1], s[2]])?
        } else {
            x
        };
        let input = tape.leaf(x, flags.input);
        let (features, z, front_end_filters) = match &self.front_end {
            Some(fe) => {
                let w = tape.leaf(fe.filters().clone(), flags.front_end && !fe.is_frozen());
                let a = tape.conv2d(input, w, fe.padding())?;
                let norms = tape.l1_norms(w)?;
                let z = tape.div_channels(a, norms)?;
                let out = match fe.mode() {
                    FrontEndMode::Linear => z,
                    FrontEndMode::Quantized => {
                        tape.ternary(z, fe.threshold(), mode == GradMode::IdentityThroughQuantizer)
                    }
                };
                (out, Some(z), Some(w))
            }
            None => (input, None, None),
        };
        let c = &self.classifier;
        let vars = c.tensors().map(|t| tape.leaf(t.clone(), flags.classifier));
        let [w1, b1, w2, b2, f1w, f1b, f2w, f2b] = vars;
        let pad1 = c.conv1_weight.shape()[2] / 2;
        let pad2 = c.conv2_weight.shape()[2] / 2;

        let h = tape.conv2d(features, w1, pad1)?;
        let h = tape.channel_bias(h, b1)?;
        let h = tape.relu(h);
        let h = tape.maxpool2(h)?;
        let h = tape.conv2d(h, w2, pad2)?;
        let h = tape.channel_bias(h, b2)?;
        let h = tape.relu(h);
        let h = tape.maxpool2(h)?;
        let shape = tape.value(h).shape().to_vec();
        let h = tape.reshape(h, &[shape[0], shape[1..].iter().product()])?;
        let h = tape.affine(h, f1w, f1b)?;
        let h = tape.relu(h);
        let logits = tape.affine(h, f2w, f2b)?;
        Ok(TapeForward {
            input,
            front_end_filters,
            z,
            classifier: vars,
            logits,
        })
    }

    /// Logits for a batch `[N,1,H,W]` (true forward pass, quantizer included).
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let z = match &self.front_end {
            Some(fe) => crate::frontend::frontend_forward(x, fe)?,
            None => x.clone(),
        };
        self.classifier.forward(&z)
    }

    /// Clean normalized front-end activations (quantizer bypassed).
    pub fn activations(&self, x: &Tensor) -> Result<Option<Tensor>> {
        self.front_end
            .as_ref()
            .map(|fe| crate::frontend::frontend_forward(x, &fe.linear_view()))
            .transpose()
    }

    /// All parameters in a fixed order with their checkpoint names.
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = Vec::with_capacity(9);
        if let Some(fe) = &self.front_end {
            out.push((FRONT_END_PARAM_NAME, fe.filters()));
        }
        out.extend(CLASSIFIER_PARAM_NAMES.iter().copied().zip(self.classifier.tensors()));
        out
    }
}

/// Training loss split into its parts: `total = ce + λ · reg`, where `reg` is
/// the bump penalty averaged over filters, positions and samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompositeLoss {
    pub cross_entropy: f64,
    pub regularization: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Batch-mean cross entropy plus `λ` times the mean bump penalty of `z`.
pub fn composite_loss(logits: &Tensor, labels: &[usize], z: &Tensor, bump: Option<&BumpSpec>) -> Result<CompositeLoss> {
    let (losses, _) = ops::softmax_cross_entropy_batch(logits, labels)?;
    let cross_entropy = losses.iter().sum::<f64>() / losses.len() as f64;
    let (regularization, lambda) = match bump {
        Some(spec) => {
            spec.validate()?;
            (bump_mean(z, spec), spec.lambda)
        }
        None => (0.0, 0.0),
    };
    Ok(CompositeLoss {
        cross_entropy,
        regularization,
        lambda,
        total: cross_entropy + lambda * regularization,
    })
}

/// Records the composite loss of a forward pass; returns the scalar loss var.
pub fn composite_loss_tape(
    tape: &mut Tape,
    fwd: &TapeForward,
    labels: &[usize],
    bump: Option<&BumpSpec>,
) -> Result<(Var, CompositeLoss)> {
    let (ce, losses) = tape.cross_entropy(fwd.logits, labels, Reduction::Mean)?;
    let cross_entropy = losses.iter().sum::<f64>() / losses.len() as f64;
    match (bump, fwd.z) {
        (Some(spec), Some(z)) if spec.lambda > 0.0 => {
            spec.validate()?;
            let reg = tape.bump_mean(z, *spec);
            let regularization = tape.value(reg).data()[0];
            let total = tape.add_scaled(ce, reg, spec.lambda)?;
            let parts = CompositeLoss {
                cross_entropy,
                regularization,
                lambda: spec.lambda,
                total: tape.value(total).data()[0],
            };
            Ok((total, parts))
        }
        (bump, z) => {
            let regularization = match (bump, z) {
                (Some(spec), Some(z)) => bump_mean(tape.value(z), spec),
                _ => 0.0,
            };
            let parts = CompositeLoss {
                cross_entropy,
                regularization,
                lambda: 0.0,
                total: tape.value(ce).data()[0],
            };
            Ok((ce, parts))
        }
    }
}
