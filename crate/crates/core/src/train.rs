//! Staged training: polarize the front end, then fine-tune the classifier
//! on top of the frozen, quantized front end.

use std::path::Path;

use crate::adam::AdamState;
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{validate_schedule, ExperimentConfig, StageSpec};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::frontend::FrontEndMode;
use crate::model::{composite_loss_tape, ArchConfig, GradFlags, GradMode, Network};
use crate::rng::derive_seed;
use crate::tape::Tape;
use crate::tensor::Tensor;

const STAGE_TAG: u64 = 0x57A6;

/// Per-epoch averages over all training samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based stage index.
    pub stage: usize,
    /// 1-based epoch within the stage.
    pub epoch: usize,
    pub lambda: f64,
    pub loss: f64,
    pub cross_entropy: f64,
    /// Mean bump penalty (before scaling by `λ`); 0 when the stage has none.
    pub bump: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct StageSettings<'a> {
    pub stage: usize,
    pub batch_size: usize,
    pub adam: &'a crate::adam::AdamConfig,
    pub seed: u64,
}

/// Trains `net` for one stage. A fresh Adam state is used; frozen filters
/// receive no updates and a quantized stage runs the quantizer forward.
pub fn run_stage(
    net: &mut Network,
    ds: &Dataset,
    spec: &StageSpec,
    settings: StageSettings<'_>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    spec.validate()?;
    if settings.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if net.front_end.is_none() && (spec.regularizer.is_some() || spec.quantized) {
        return Err(Error::Config("stage needs a front end".into()));
    }
    if spec.epochs == 0 {
        return Ok(Vec::new());
    }
    if let Some(fe) = net.front_end.as_mut() {
        if spec.frozen {
            fe.freeze();
        }
        if spec.quantized {
            fe.set_mode(FrontEndMode::Quantized)?;
        }
    }
    let threshold = net.front_end.as_ref().map_or(0.0, |fe| fe.threshold());
    let train_filters = net.front_end.as_ref().is_some_and(|fe| !fe.is_frozen());
    let flags = GradFlags {
        input: false,
        front_end: train_filters,
        classifier: true,
    };
    let mut adam = AdamState::new(*settings.adam);
    let batch_seed = derive_seed(settings.seed, &[STAGE_TAG, settings.stage as u64]);
    let mut curve = Vec::with_capacity(spec.epochs);

    for epoch in 1..=spec.epochs {
        let bump = spec.bump(threshold, epoch);
        let (mut loss, mut ce, mut reg) = (0.0, 0.0, 0.0);
        for idx in batches(ds.len(), settings.batch_size, batch_seed, epoch as u64) {
            let (x, labels) = ds.batch(&idx)?;
            let mut tape = Tape::new();
            let fwd = net.forward_tape(&mut tape, x, flags, GradMode::Exact)?;
            let (total, parts) = composite_loss_tape(&mut tape, &fwd, &labels, bump.as_ref())?;
            let mut grads = tape.backward(total)?;

            let mut g: Vec<Tensor> = Vec::with_capacity(9);
            if train_filters {
                g.push(grads.take(fwd.front_end_filters.expect("front end present")));
            }
            g.extend(fwd.classifier.iter().map(|&v| grads.take(v)));
            let mut params: Vec<&mut Tensor> = Vec::with_capacity(9);
            if train_filters {
                params.push(net.front_end.as_mut().expect("front end present").filters_mut()?);
            }
            params.extend(net.classifier.tensors_mut());
            adam.step(&mut params, &g)?;

            let n = labels.len() as f64;
            loss += parts.total * n;
            ce += parts.cross_entropy * n;
            reg += parts.regularization * n;
        }
        let n = ds.len().max(1) as f64;
        let record = EpochRecord {
            stage: settings.stage,
            epoch,
            lambda: spec.lambda(epoch),
            loss: loss / n,
            cross_entropy: ce / n,
            bump: reg / n,
        };
        on_epoch(&record);
        curve.push(record);
    }
    Ok(curve)
}

/// Everything a full training run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub curves: Vec<EpochRecord>,
    /// Checkpoint after each stage, in order.
    pub checkpoints: Vec<Checkpoint>,
}

fn meta(cfg: &ExperimentConfig, arch: &ArchConfig, net: &Network, stage: u32) -> CheckpointMeta {
    CheckpointMeta {
        arch: arch.clone(),
        front_end_mode: net.front_end.as_ref().map(|fe| fe.mode()),
        front_end_frozen: net.front_end.as_ref().is_some_and(|fe| fe.is_frozen()),
        stage,
        dataset: cfg.dataset.as_str().to_string(),
        seed: cfg.seed,
        config_fingerprint: cfg.fingerprint(),
    }
}

/// Runs every stage of `cfg.train.stages` on `train` (after taking the
/// configured subset), checkpointing after each stage. With `out_dir`, the
/// checkpoints are also written as `stage{i}.ckpt`.
pub fn train_full(
    cfg: &ExperimentConfig,
    train: &Dataset,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_stages(
        cfg,
        &cfg.arch,
        &cfg.train.stages,
        train,
        out_dir,
        "stage",
        &mut on_epoch,
    )
}

/// Trains the undefended twin: same classifier reading raw pixels, plain
/// cross entropy for `baseline_epochs`.
pub fn train_baseline(
    cfg: &ExperimentConfig,
    train: &Dataset,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let arch = ArchConfig {
        front_end: false,
        ..cfg.arch.clone()
    };
    let stages = [StageSpec::plain(cfg.train.baseline_epochs)];
    train_stages(cfg, &arch, &stages, train, out_dir, "baseline", &mut on_epoch)
}

fn train_stages(
    cfg: &ExperimentConfig,
    arch: &ArchConfig,
    stages: &[StageSpec],
    train: &Dataset,
    out_dir: Option<&Path>,
    prefix: &str,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    validate_schedule(stages, arch.front_end)?;
    let ds = match cfg.train.subset {
        Some(n) => train.subset(n, cfg.seed)?,
        None => train.clone(),
    };
    let mut net = Network::init(arch, cfg.seed)?;
    let mut curves = Vec::new();
    let mut checkpoints = Vec::with_capacity(stages.len());
    for (i, spec) in stages.iter().enumerate() {
        let settings = StageSettings {
            stage: i + 1,
            batch_size: cfg.train.batch_size,
            adam: &cfg.train.adam,
            seed: cfg.seed,
        };
        curves.extend(run_stage(&mut net, &ds, spec, settings, &mut *on_epoch)?);
        let ck = Checkpoint::from_network(&net, meta(cfg, arch, &net, (i + 1) as u32));
        if let Some(dir) = out_dir {
            let name = if stages.len() == 1 {
                format!("{prefix}.ckpt")
            } else {
                format!("{prefix}{}.ckpt", i + 1)
            };
            ck.save(&dir.join(name))?;
        }
        checkpoints.push(ck);
    }
    Ok(TrainOutcome {
        network: net,
        curves,
        checkpoints,
    })
}
