//! Clean and adversarial evaluation, ε sweeps, activation statistics and
//! filter export.

use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::attacks::{argmax_rows, run_attack, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::frontend::{certify_ternary, FrontEndState, Histogram};
use crate::model::Network;
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub name: String,
    pub spec: AttackSpec,
    /// Percent in `[0,100]`.
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub dataset: String,
    pub epsilon: f64,
    pub samples: usize,
    /// Percent in `[0,100]`.
    pub clean_accuracy: f64,
    pub attacks: Vec<AttackResult>,
    /// Fraction of front-end neurons certified at `epsilon`; `None` without a front end.
    pub certified_fraction: Option<f64>,
    pub runtime_secs: f64,
    pub config_fingerprint: String,
}

impl PartialEq for EvalReport {
    /// Ignores `runtime_secs`.
    fn eq(&self, other: &Self) -> bool {
        self.dataset == other.dataset
            && self.epsilon.to_bits() == other.epsilon.to_bits()
            && self.samples == other.samples
            && self.clean_accuracy.to_bits() == other.clean_accuracy.to_bits()
            && self.attacks == other.attacks
            && self.certified_fraction.map(f64::to_bits) == other.certified_fraction.map(f64::to_bits)
            && self.config_fingerprint == other.config_fingerprint
    }
}

impl EvalReport {
    pub fn accuracy_of(&self, name: &str) -> Option<f64> {
        self.attacks.iter().find(|a| a.name == name).map(|a| a.accuracy)
    }

    /// CSV with header `metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("dataset,{}\n", self.dataset));
        out.push_str(&format!("epsilon,{}\n", self.epsilon));
        out.push_str(&format!("samples,{}\n", self.samples));
        out.push_str(&format!("clean_accuracy,{}\n", self.clean_accuracy));
        for a in &self.attacks {
            out.push_str(&format!("{}_accuracy,{}\n", a.name, a.accuracy));
        }
        if let Some(c) = self.certified_fraction {
            out.push_str(&format!("certified_fraction,{c}\n"));
        }
        out.push_str(&format!("runtime_secs,{}\n", self.runtime_secs));
        out.push_str(&format!("config_fingerprint,{}\n", self.config_fingerprint));
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "dataset {}  eps {}  n={}", self.dataset, self.epsilon, self.samples)?;
        writeln!(f, "  clean       {:6.2}%", self.clean_accuracy)?;
        for a in &self.attacks {
            writeln!(f, "  {:<11} {:6.2}%", a.name, a.accuracy)?;
        }
        if let Some(c) = self.certified_fraction {
            writeln!(f, "  certified neurons {:.4}", c)?;
        }
        write!(f, "  {:.1}s  config {}", self.runtime_secs, self.config_fingerprint)
    }
}

fn percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

fn chunks(len: usize, batch_size: usize) -> impl Iterator<Item = Vec<usize>> {
    let b = batch_size.max(1);
    (0..len.div_ceil(b)).map(move |i| (i * b..((i + 1) * b).min(len)).collect())
}

/// Clean accuracy in percent.
pub fn clean_accuracy(net: &Network, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let mut correct = 0;
    for idx in chunks(ds.len(), batch_size) {
        let (x, labels) = ds.batch(&idx)?;
        let preds = argmax_rows(&net.logits(&x)?);
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(percent(correct, ds.len()))
}

/// Accuracy in percent under `spec`. Batches are fixed and the random
/// stream of each batch depends only on its index. Every adversarial example
/// is checked for feasibility.
pub fn adversarial_accuracy(net: &Network, ds: &Dataset, spec: &AttackSpec, batch_size: usize) -> Result<f64> {
    spec.validate()?;
    let mut correct = 0;
    for (b, idx) in chunks(ds.len(), batch_size).enumerate() {
        let (x, labels) = ds.batch(&idx)?;
        let batch_spec = spec.clone().with_seed(derive_seed(spec.seed, &[b as u64]));
        let adv = run_attack(net, &x, &labels, &batch_spec)?;
        correct += adv.success.iter().filter(|&&s| !s).count();
    }
    Ok(percent(correct, ds.len()))
}

pub fn evaluate(
    net: &Network,
    ds: &Dataset,
    epsilon: f64,
    attacks: &[AttackSpec],
    batch_size: usize,
    config_fingerprint: &str,
) -> Result<EvalReport> {
    let start = Instant::now();
    let clean = clean_accuracy(net, ds, batch_size)?;
    let mut results = Vec::with_capacity(attacks.len());
    for spec in attacks {
        results.push(AttackResult {
            name: spec.label(),
            spec: spec.clone(),
            accuracy: adversarial_accuracy(net, ds, spec, batch_size)?,
        });
    }
    let certified_fraction = match &net.front_end {
        Some(fe) => Some(activation_stats(net, ds, fe.threshold(), epsilon, batch_size)?.certified_fraction()),
        None => None,
    };
    Ok(EvalReport {
        dataset: ds.name().as_str().to_string(),
        epsilon,
        samples: ds.len(),
        clean_accuracy: clean,
        attacks: results,
        certified_fraction,
        runtime_secs: start.elapsed().as_secs_f64(),
        config_fingerprint: config_fingerprint.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub points: Vec<(f64, f64)>,
    /// Indices `i` where accuracy at `grid[i+1]` exceeds accuracy at `grid[i]`.
    pub violations: Vec<usize>,
}

impl SweepResult {
    /// CSV with header `epsilon,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,accuracy\n");
        for (e, a) in &self.points {
            out.push_str(&format!("{e},{a}\n"));
        }
        out
    }
}

/// Accuracy of `attack` re-targeted at every budget in `grid` (ascending).
/// Budget 0 gives clean accuracy. Non-monotone points are reported, not rejected.
pub fn epsilon_sweep(
    net: &Network,
    ds: &Dataset,
    grid: &[f64],
    attack: &AttackSpec,
    batch_size: usize,
) -> Result<SweepResult> {
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Argument("epsilon grid must be sorted ascending".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &eps in grid {
        let acc = if eps == 0.0 {
            clean_accuracy(net, ds, batch_size)?
        } else {
            let mut spec = attack.clone();
            spec.step_size *= eps / attack.epsilon.max(f64::MIN_POSITIVE);
            spec.epsilon = eps;
            adversarial_accuracy(net, ds, &spec, batch_size)?
        };
        points.push((eps, acc));
    }
    let violations = points
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1].1 > w[0].1)
        .map(|(i, _)| i)
        .collect();
    Ok(SweepResult { points, violations })
}

/// Streaming statistics of clean normalized activations.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    pub histogram: Histogram,
    /// Histogram of per-neuron certification margins on `[0, 1.5]`.
    pub margins: Histogram,
    pub total: u64,
    pub certified: u64,
    pub danger_zone: u64,
    pub near_levels: u64,
}

impl ActivationStats {
    pub fn certified_fraction(&self) -> f64 {
        self.certified as f64 / self.total.max(1) as f64
    }

    /// Fraction with `| |z| − c | ≤ ε`.
    pub fn danger_zone_fraction(&self) -> f64 {
        self.danger_zone as f64 / self.total.max(1) as f64
    }

    /// Fraction within 0.2 of `{−1, 0, 1}`.
    pub fn near_levels_fraction(&self) -> f64 {
        self.near_levels as f64 / self.total.max(1) as f64
    }
}

fn add_counts(into: &mut Histogram, from: &Histogram) {
    for (a, b) in into.counts.iter_mut().zip(&from.counts) {
        *a += b;
    }
    into.out_of_range += from.out_of_range;
}

/// Activation histogram, certification and polarization counts over `ds`.
pub fn activation_stats(
    net: &Network,
    ds: &Dataset,
    c: f64,
    epsilon: f64,
    batch_size: usize,
) -> Result<ActivationStats> {
    let mut stats = ActivationStats {
        histogram: Histogram::activations(&[]),
        margins: Histogram::build(&[], 0.0, 1.5, 50),
        total: 0,
        certified: 0,
        danger_zone: 0,
        near_levels: 0,
    };
    if net.front_end.is_none() {
        return Err(Error::Argument("network has no front end".into()));
    }
    for idx in chunks(ds.len(), batch_size) {
        let (x, _) = ds.batch(&idx)?;
        let z = net.activations(&x)?.expect("front end present");
        let z = z.data();
        add_counts(&mut stats.histogram, &Histogram::activations(z));
        let cert = certify_ternary(z, c, epsilon);
        add_counts(&mut stats.margins, &Histogram::build(&cert.margins, 0.0, 1.5, 50));
        stats.total += z.len() as u64;
        stats.certified += cert.certified.iter().filter(|&&b| b).count() as u64;
        stats.danger_zone += z.iter().filter(|v| (v.abs() - c).abs() <= epsilon).count() as u64;
        stats.near_levels += z
            .iter()
            .filter(|v| [-1.0, 0.0, 1.0].iter().any(|l: &f64| (*v - l).abs() <= 0.2))
            .count() as u64;
    }
    Ok(stats)
}

/// Writes each filter as a plain CSV grid `filter_XX.csv` under `dir`.
pub fn export_filters(fe: &FrontEndState, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir)?;
    let k = fe.kernel_size();
    let mut paths = Vec::with_capacity(fe.num_filters());
    for (i, f) in fe.filters().data().chunks_exact(k * k).enumerate() {
        let mut text = String::new();
        for row in f.chunks_exact(k) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        let path = dir.join(format!("filter_{i:02}.csv"));
        fs::write(&path, text)?;
        paths.push(path);
    }
    Ok(paths)
}
