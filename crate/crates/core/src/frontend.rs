//! The polarizing front end: l1-normalized convolutional filters followed by
//! an optional ternary quantizer, plus the pieces used to shape and audit its
//! output distribution (bump penalties, histograms, per-neuron certification).
//!
//! For a filter `w` and input `x`, the normalized activation is
//! `z = wᵀx / ‖w‖₁`. An l∞ perturbation of size `ε` moves `z` by at most `ε`,
//! so a quantizer whose thresholds are further than `ε` from `z` cannot change
//! its output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Whether the front end quantizes its normalized outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrontEndMode {
    Linear,
    Quantized,
}

/// `K` polarizing filters of shape `[K,1,kH,kW]` with threshold `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrontEndState {
    filters: Tensor,
    mode: FrontEndMode,
    threshold: f64,
    frozen: bool,
}

impl FrontEndState {
    pub fn new(filters: Tensor, threshold: f64) -> Result<Self> {
        let shape = filters.shape();
        if shape.len() != 4 || shape[1] != 1 || shape[2].is_multiple_of(2) || shape[3].is_multiple_of(2) {
            return Err(Error::Argument(format!(
                "front-end filters must be [K,1,odd,odd], got {shape:?}"
            )));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Argument(format!("threshold {threshold} outside (0,1)")));
        }
        l1_norms(&filters)?;
        Ok(FrontEndState {
            filters,
            mode: FrontEndMode::Linear,
            threshold,
            frozen: false,
        })
    }

    /// Rebuilds a state from stored parts, enforcing that quantized mode implies frozen.
    pub fn from_parts(filters: Tensor, threshold: f64, mode: FrontEndMode, frozen: bool) -> Result<Self> {
        let mut fe = FrontEndState::new(filters, threshold)?;
        fe.frozen = frozen;
        fe.set_mode(mode)?;
        Ok(fe)
    }

    pub fn filters(&self) -> &Tensor {
        &self.filters
    }

    /// Mutable access for the optimizer. Fails once the filters are frozen.
    pub fn filters_mut(&mut self) -> Result<&mut Tensor> {
        if self.frozen {
            return Err(Error::State("front-end filters are frozen"));
        }
        Ok(&mut self.filters)
    }

    pub fn mode(&self) -> FrontEndMode {
        self.mode
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn num_filters(&self) -> usize {
        self.filters.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.filters.shape()[2]
    }

    /// Zero padding that keeps the spatial size unchanged.
    pub fn padding(&self) -> usize {
        self.kernel_size() / 2
    }

    pub fn set_mode(&mut self, mode: FrontEndMode) -> Result<()> {
        if mode == FrontEndMode::Quantized && !self.frozen {
            return Err(Error::State("quantized mode requires frozen filters"));
        }
        self.mode = mode;
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Freeze the filters and switch the quantizer on.
    pub fn freeze_and_quantize(&mut self) {
        self.frozen = true;
        self.mode = FrontEndMode::Quantized;
    }

    /// Same filters in linear mode; used to read clean activations `z`.
    pub fn linear_view(&self) -> FrontEndState {
        FrontEndState {
            filters: self.filters.clone(),
            mode: FrontEndMode::Linear,
            threshold: self.threshold,
            frozen: self.frozen,
        }
    }
}

/// Per-filter `‖w_k‖₁` for filters shaped `[K, ...]`.
pub fn l1_norms(filters: &Tensor) -> Result<Tensor> {
    let k = *filters.shape().first().unwrap_or(&0);
    if k == 0 {
        return Err(Error::Argument("no filters".into()));
    }
    let per = filters.len() / k;
    let mut norms = Vec::with_capacity(k);
    for (i, w) in filters.data().chunks_exact(per).enumerate() {
        let n: f64 = w.iter().map(|v| v.abs()).sum();
        if n <= 0.0 || !n.is_finite() {
            return Err(Error::DegenerateFilter(i));
        }
        norms.push(n);
    }
    Tensor::new(vec![k], norms)
}

/// Normalized (and, in quantized mode, ternarized) front-end output.
///
/// Accepts `[1,H,W]` or `[N,1,H,W]`; returns `[K,H,W]` or `[N,K,H,W]`.
pub fn frontend_forward(x: &Tensor, fe: &FrontEndState) -> Result<Tensor> {
    let a = ops::conv2d(x, fe.filters(), fe.padding())?;
    let norms = l1_norms(fe.filters())?;
    let k = fe.num_filters();
    let plane = ops::plane_len(&a);
    let mut z = a;
    for (i, chunk) in z.data_mut().chunks_exact_mut(plane).enumerate() {
        let n = norms.data()[i % k];
        chunk.iter_mut().for_each(|v| *v /= n);
    }
    if fe.mode() == FrontEndMode::Quantized {
        let c = fe.threshold();
        z = z.map(|v| quantize_ternary(v, c));
    }
    Ok(z)
}

/// Largest `|wᵀe|` over `‖e‖∞ ≤ ε`, i.e. `ε‖w‖₁`.
pub fn output_perturbation_bound(w: &[f64], epsilon: f64) -> f64 {
    epsilon * w.iter().map(|v| v.abs()).sum::<f64>()
}

/// The perturbation `ε·sign(w)` that attains [`output_perturbation_bound`].
/// Zero weights get a zero entry.
pub fn extremal_perturbation(w: &[f64], epsilon: f64) -> Vec<f64> {
    w.iter()
        .map(|&v| {
            if v > 0.0 {
                epsilon
            } else if v < 0.0 {
                -epsilon
            } else {
                0.0
            }
        })
        .collect()
}

/// `sign` with `sign(0) = +1`, so quantizer outputs stay in their level set.
fn sign_nonneg(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `0.5·sign(z − c) + 0.5·sign(z + c)` with `sign(0) = +1`; values in {−1, 0, 1}.
pub fn quantize_ternary(z: f64, c: f64) -> f64 {
    0.5 * sign_nonneg(z - c) + 0.5 * sign_nonneg(z + c)
}

/// `½·Σᵢ sign(a − cᵢ)` over strictly increasing thresholds.
pub fn quantize_multilevel(a: f64, thresholds: &[f64]) -> Result<f64> {
    check_thresholds(thresholds)?;
    Ok(0.5 * thresholds.iter().map(|&c| sign_nonneg(a - c)).sum::<f64>())
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::Argument("quantizer needs at least one threshold".into()));
    }
    if thresholds.windows(2).any(|p| !(p[0] < p[1])) {
        return Err(Error::Argument(format!(
            "thresholds must be strictly increasing: {thresholds:?}"
        )));
    }
    Ok(())
}

/// Dead-zone activation: zero when `|a| ≤ ε‖w‖₁`, identity otherwise.
pub fn sparse_activation(a: f64, epsilon: f64, l1norm: f64) -> f64 {
    if a.abs() <= epsilon * l1norm {
        0.0
    } else {
        a
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BumpVariant {
    /// `exp(−z²/2σ²)`: pushes activations away from the origin.
    Origin,
    /// `exp(−(z−c)²/2σ²) + exp(−(z+c)²/2σ²)`: pushes them away from `±c`.
    Thresholds,
}

/// A Gaussian bump penalty and its coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BumpSpec {
    pub variant: BumpVariant,
    pub sigma: f64,
    /// Offset of the two bumps; ignored for [`BumpVariant::Origin`].
    pub center: f64,
    pub lambda: f64,
}

impl BumpSpec {
    pub fn origin(sigma: f64, lambda: f64) -> Self {
        BumpSpec {
            variant: BumpVariant::Origin,
            sigma,
            center: 0.0,
            lambda,
        }
    }

    pub fn thresholds(sigma: f64, center: f64, lambda: f64) -> Self {
        BumpSpec {
            variant: BumpVariant::Thresholds,
            sigma,
            center,
            lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Argument(format!("bump width {} must be positive", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Argument(format!(
                "bump coefficient {} outside [0,1]",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn value(&self, z: f64) -> f64 {
        let s2 = 2.0 * self.sigma * self.sigma;
        match self.variant {
            BumpVariant::Origin => (-z * z / s2).exp(),
            BumpVariant::Thresholds => {
                let (a, b) = (z - self.center, z + self.center);
                (-a * a / s2).exp() + (-b * b / s2).exp()
            }
        }
    }

    pub fn derivative(&self, z: f64) -> f64 {
        let var = self.sigma * self.sigma;
        let s2 = 2.0 * var;
        match self.variant {
            BumpVariant::Origin => -z / var * (-z * z / s2).exp(),
            BumpVariant::Thresholds => {
                let (a, b) = (z - self.center, z + self.center);
                -a / var * (-a * a / s2).exp() - b / var * (-b * b / s2).exp()
            }
        }
    }
}

/// Per-element bump penalty with its analytic derivative.
pub fn bump(z: &Tensor, spec: &BumpSpec) -> (Tensor, Tensor) {
    (z.map(|v| spec.value(v)), z.map(|v| spec.derivative(v)))
}

/// Mean of the bump penalty over every element (samples, filters, positions).
/// Multiplied by `λ`, this is the regularization term of the training loss.
pub fn bump_mean(z: &Tensor, spec: &BumpSpec) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    z.data().iter().map(|&v| spec.value(v)).sum::<f64>() / z.len() as f64
}

/// Per-neuron certification against a set of quantizer thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct Certification {
    pub certified: Vec<bool>,
    /// Distance from each clean activation to its nearest threshold.
    pub margins: Vec<f64>,
}

impl Certification {
    pub fn certified_fraction(&self) -> f64 {
        if self.certified.is_empty() {
            return 0.0;
        }
        self.certified.iter().filter(|&&c| c).count() as f64 / self.certified.len() as f64
    }
}

/// Certifies each clean normalized activation for the ternary quantizer with
/// thresholds `±c`: a neuron is certified when `| |z| − c | > ε`, in which case
/// no `‖e‖∞ ≤ ε` perturbation of the input can change its quantized output.
pub fn certify_ternary(z: &[f64], c: f64, epsilon: f64) -> Certification {
    certify_thresholds(z, &[-c, c], epsilon).expect("±c is increasing for c > 0")
}

/// [`certify_ternary`] for an arbitrary increasing threshold set.
pub fn certify_thresholds(z: &[f64], thresholds: &[f64], epsilon: f64) -> Result<Certification> {
    check_thresholds(thresholds)?;
    let margins: Vec<f64> = z
        .iter()
        .map(|&v| thresholds.iter().map(|&c| (v - c).abs()).fold(f64::INFINITY, f64::min))
        .collect();
    let certified = margins.iter().map(|&m| m > epsilon).collect();
    Ok(Certification { certified, margins })
}

/// Density histogram over `[lo, hi)` with equal-width bins. Values outside the
/// range are counted separately and excluded from the normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub out_of_range: u64,
}

impl Histogram {
    pub fn build(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0u64; bins];
        let mut out_of_range = 0;
        let width = (hi - lo) / bins as f64;
        for &v in values {
            if v < lo || v > hi || !v.is_finite() {
                out_of_range += 1;
                continue;
            }
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        Histogram {
            lo,
            hi,
            counts,
            out_of_range,
        }
    }

    /// Histogram of normalized activations on the standard `[−1.5, 1.5]`, 100-bin grid.
    pub fn activations(values: &[f64]) -> Self {
        Histogram::build(values, -1.5, 1.5, 100)
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        let w = self.bin_width();
        (0..self.counts.len()).map(|i| self.lo + (i as f64 + 0.5) * w).collect()
    }

    pub fn densities(&self) -> Vec<f64> {
        let total: u64 = self.counts.iter().sum();
        let w = self.bin_width();
        self.counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / (total as f64 * w) })
            .collect()
    }

    /// CSV with header `bin_center,density`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_center,density\n");
        for (c, d) in self.bin_centers().iter().zip(self.densities()) {
            out.push_str(&format!("{c},{d}\n"));
        }
        out
    }
}

/// Fraction of activations whose magnitude lies within `ε` of the threshold `c`.
pub fn danger_zone_fraction(z: &[f64], c: f64, epsilon: f64) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    z.iter().filter(|v| (v.abs() - c).abs() <= epsilon).count() as f64 / z.len() as f64
}

/// Fraction of activations within `tol` of any of `levels`.
pub fn near_levels_fraction(z: &[f64], levels: &[f64], tol: f64) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    z.iter()
        .filter(|&&v| levels.iter().any(|l| (v - l).abs() <= tol))
        .count() as f64
        / z.len() as f64
}

/// Summary of how well a set of clean activations is polarized.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarizationReport {
    pub histogram: Histogram,
    /// Per-sample `min_k | |z_k| − c |` over all filters and positions.
    pub sample_margins: Vec<f64>,
    pub certified_fraction: f64,
    pub danger_zone_fraction: f64,
    pub near_levels_fraction: f64,
}

impl PolarizationReport {
    /// `z` is `[N,K,H,W]` clean (linear) front-end output.
    pub fn from_activations(z: &Tensor, c: f64, epsilon: f64) -> Self {
        let data = z.data();
        let per_sample = if z.shape().len() == 4 {
            z.len() / z.shape()[0].max(1)
        } else {
            z.len()
        };
        let cert = certify_ternary(data, c, epsilon);
        let sample_margins = cert
            .margins
            .chunks(per_sample.max(1))
            .map(|m| m.iter().cloned().fold(f64::INFINITY, f64::min))
            .collect();
        PolarizationReport {
            histogram: Histogram::activations(data),
            sample_margins,
            certified_fraction: cert.certified_fraction(),
            danger_zone_fraction: danger_zone_fraction(data, c, epsilon),
            near_levels_fraction: near_levels_fraction(data, &[-1.0, 0.0, 1.0], 0.2),
        }
    }
}
