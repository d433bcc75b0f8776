//! `polarize`: train, attack and inspect polarized-front-end classifiers.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use polarize::attacks::{linf_distance, run_attack, AttackFamily, AttackSpec};
use polarize::checkpoint::Checkpoint;
use polarize::config::ExperimentConfig;
use polarize::data::{Dataset, DatasetName, Split};
use polarize::eval::{activation_stats, epsilon_sweep, evaluate, export_filters};
use polarize::model::Network;
use polarize::train::{train_baseline, train_full, EpochRecord};

#[derive(Parser)]
#[command(
    name = "polarize",
    version,
    about = "Polarized quantizing front end against l-inf attacks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the three training stages (or the undefended baseline)
    Train {
        #[command(flatten)]
        common: Common,
        /// Train the undefended twin instead
        #[arg(long)]
        no_defense: bool,
    },
    /// Clean and adversarial accuracy of a checkpoint
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        attack: AttackArgs,
        #[arg(long, required = true)]
        checkpoint: PathBuf,
    },
    /// Attack the evaluation subset and write per-sample results
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        attack: AttackArgs,
        #[arg(long, required = true)]
        checkpoint: PathBuf,
    },
    /// Accuracy versus attack budget
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        attack: AttackArgs,
        #[arg(long, required = true)]
        checkpoint: PathBuf,
    },
    /// Histogram of clean front-end activations
    Hist {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        checkpoint: PathBuf,
    },
    /// Certified-neuron fraction and margin histogram
    Certify {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        checkpoint: PathBuf,
    },
    /// Write each front-end filter as a CSV grid
    ExportFilters {
        #[arg(long, required = true)]
        checkpoint: PathBuf,
        /// Output directory
        #[arg(long, default_value = "filters")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Mnist,
    Fashion,
}

impl From<DatasetArg> for DatasetName {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::Mnist => DatasetName::Mnist,
            DatasetArg::Fashion => DatasetName::Fashion,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackArg {
    Fgsm,
    Bim,
    Pgd,
}

#[derive(Args)]
struct Common {
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    /// Directory holding the four IDX files (default: data/<dataset>)
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// TOML experiment config; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Number of samples (training subset for `train`, test subset otherwise)
    #[arg(long)]
    subset_n: Option<usize>,
    /// Whole splits, 20 epochs per stage, PGD 20x100
    #[arg(long)]
    full: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    /// Attack to run (default: all configured attacks for `eval`, PGD otherwise)
    #[arg(long, value_enum)]
    attack: Option<AttackArg>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

impl Common {
    fn config(&self, fallback: Option<DatasetName>) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => {
                let ds = self.dataset.map(Into::into).or(fallback).unwrap_or(DatasetName::Mnist);
                if self.full {
                    ExperimentConfig::full(ds)
                } else {
                    ExperimentConfig::desk(ds)
                }
            }
        };
        if let Some(d) = self.dataset {
            cfg.dataset = d.into();
        }
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(eps) = self.epsilon {
            cfg = cfg.with_epsilon(eps);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn load(&self, cfg: &ExperimentConfig, split: Split) -> CliResult<Dataset> {
        let dir = self
            .data_dir
            .clone()
            .unwrap_or_else(|| Path::new("data").join(cfg.dataset.as_str()));
        Ok(Dataset::load_split(&dir, cfg.dataset, split)?)
    }

    fn test_set(&self, cfg: &ExperimentConfig) -> CliResult<Dataset> {
        let ds = self.load(cfg, Split::Test)?;
        Ok(match self.subset_n.or(cfg.eval.subset) {
            Some(n) => ds.subset(n, cfg.seed)?,
            None => ds,
        })
    }
}

impl AttackArgs {
    fn specs(&self, cfg: &ExperimentConfig, default_all: bool) -> Vec<AttackSpec> {
        let eps = cfg.eval.epsilon;
        let family = match (self.attack, default_all) {
            (None, true) => None,
            (None, false) => Some(AttackFamily::Pgd),
            (Some(AttackArg::Fgsm), _) => Some(AttackFamily::Fgsm),
            (Some(AttackArg::Bim), _) => Some(AttackFamily::Bim),
            (Some(AttackArg::Pgd), _) => Some(AttackFamily::Pgd),
        };
        let mut specs: Vec<AttackSpec> = cfg
            .eval
            .attacks
            .iter()
            .filter(|a| family.is_none_or(|f| a.family == f))
            .cloned()
            .collect();
        if specs.is_empty() {
            let f = family.unwrap_or(AttackFamily::Pgd);
            specs.push(
                match f {
                    AttackFamily::Fgsm => AttackSpec::fgsm(eps),
                    AttackFamily::Bim => AttackSpec::bim(eps),
                    AttackFamily::Pgd => AttackSpec::pgd(eps, 3, 20),
                }
                .with_seed(cfg.seed),
            );
        }
        for s in &mut specs {
            if let Some(r) = self.restarts {
                if s.family == AttackFamily::Pgd {
                    s.restarts = r;
                }
            }
            if let Some(n) = self.steps {
                if s.family != AttackFamily::Fgsm {
                    s.steps = n;
                }
            }
        }
        specs
    }
}

fn load_checkpoint(path: &Path) -> CliResult<(Checkpoint, Network, Option<DatasetName>)> {
    let ck = Checkpoint::load(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let net = ck.to_network()?;
    let ds = ck.meta.dataset.parse().ok();
    Ok((ck, net, ds))
}

fn write_out(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn print_epoch(r: &EpochRecord) {
    println!(
        "stage {} epoch {}  lambda {:.3}  loss {:.4}  ce {:.4}  bump {:.4}",
        r.stage, r.epoch, r.lambda, r.loss, r.cross_entropy, r.bump
    );
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { common, no_defense } => {
            let mut cfg = common.config(None)?;
            if let Some(n) = common.subset_n {
                cfg.train.subset = Some(n);
            }
            let train = common.load(&cfg, Split::Train)?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
            fs::create_dir_all(&out)?;
            write_out(&out.join("config.toml"), &cfg.to_toml()?)?;
            let outcome = if no_defense {
                train_baseline(&cfg, &train, Some(&out), print_epoch)?
            } else {
                train_full(&cfg, &train, Some(&out), print_epoch)?
            };
            let mut curve = String::from("stage,epoch,lambda,loss,cross_entropy,bump\n");
            for r in &outcome.curves {
                curve.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.stage, r.epoch, r.lambda, r.loss, r.cross_entropy, r.bump
                ));
            }
            write_out(
                &out.join(if no_defense { "baseline_curve.csv" } else { "curve.csv" }),
                &curve,
            )?;
            println!("config {}", cfg.fingerprint());
        }
        Command::Eval {
            common,
            attack,
            checkpoint,
        } => {
            let (_, net, ds_name) = load_checkpoint(&checkpoint)?;
            let cfg = common.config(ds_name)?;
            let test = common.test_set(&cfg)?;
            let specs = attack.specs(&cfg, attack.attack.is_none());
            let report = evaluate(
                &net,
                &test,
                cfg.eval.epsilon,
                &specs,
                cfg.eval.batch_size,
                &cfg.fingerprint(),
            )?;
            println!("{report}");
            if let Some(out) = &common.out {
                write_out(out, &report.to_csv())?;
            }
        }
        Command::Attack {
            common,
            attack,
            checkpoint,
        } => {
            let (_, net, ds_name) = load_checkpoint(&checkpoint)?;
            let cfg = common.config(ds_name)?;
            let test = common.test_set(&cfg)?;
            let spec = attack.specs(&cfg, false).remove(0);
            let mut csv = String::from("index,label,success,final_loss,linf\n");
            let mut correct = 0;
            let idx: Vec<usize> = (0..test.len()).collect();
            for (b, chunk) in idx.chunks(cfg.eval.batch_size).enumerate() {
                let (x, labels) = test.batch(chunk)?;
                let s = spec
                    .clone()
                    .with_seed(polarize::rng::derive_seed(spec.seed, &[b as u64]));
                let adv = run_attack(&net, &x, &labels, &s)?;
                let losses = adv.final_losses();
                let per = x.len() / labels.len();
                for (j, &i) in chunk.iter().enumerate() {
                    let a = &adv.inputs.data()[j * per..(j + 1) * per];
                    let c = &x.data()[j * per..(j + 1) * per];
                    let d = a.iter().zip(c).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
                    csv.push_str(&format!("{i},{},{},{},{d}\n", labels[j], adv.success[j], losses[j]));
                }
                correct += adv.success.iter().filter(|&&s| !s).count();
                debug_assert!(linf_distance(&x, &adv.inputs) <= s.epsilon + polarize::attacks::LINF_SLACK);
            }
            println!(
                "{} eps {}: accuracy {:.2}% over {} samples",
                spec.label(),
                spec.epsilon,
                100.0 * correct as f64 / test.len().max(1) as f64,
                test.len()
            );
            if let Some(out) = &common.out {
                write_out(out, &csv)?;
            }
        }
        Command::Sweep {
            common,
            attack,
            checkpoint,
        } => {
            let (_, net, ds_name) = load_checkpoint(&checkpoint)?;
            let cfg = common.config(ds_name)?;
            let test = common.test_set(&cfg)?;
            let spec = attack.specs(&cfg, false).remove(0);
            let sweep = epsilon_sweep(&net, &test, &cfg.eval.sweep, &spec, cfg.eval.batch_size)?;
            for (e, a) in &sweep.points {
                println!("eps {e:.4}  accuracy {a:.2}%");
            }
            for i in &sweep.violations {
                println!(
                    "warning: accuracy rises from eps {} to eps {}",
                    sweep.points[*i].0,
                    sweep.points[*i + 1].0
                );
            }
            if let Some(out) = &common.out {
                write_out(out, &sweep.to_csv())?;
            }
        }
        Command::Hist { common, checkpoint } => {
            let (_, net, ds_name) = load_checkpoint(&checkpoint)?;
            let cfg = common.config(ds_name)?;
            let test = common.test_set(&cfg)?;
            let c = front_end_threshold(&net)?;
            let stats = activation_stats(&net, &test, c, cfg.eval.epsilon, cfg.eval.batch_size)?;
            println!(
                "danger zone {:.4}  near levels {:.4}  out of range {}",
                stats.danger_zone_fraction(),
                stats.near_levels_fraction(),
                stats.histogram.out_of_range
            );
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("hist.csv"));
            write_out(&out, &stats.histogram.to_csv())?;
        }
        Command::Certify { common, checkpoint } => {
            let (_, net, ds_name) = load_checkpoint(&checkpoint)?;
            let cfg = common.config(ds_name)?;
            let test = common.test_set(&cfg)?;
            let c = front_end_threshold(&net)?;
            let stats = activation_stats(&net, &test, c, cfg.eval.epsilon, cfg.eval.batch_size)?;
            println!(
                "eps {}: certified neurons {:.4} ({} of {})",
                cfg.eval.epsilon,
                stats.certified_fraction(),
                stats.certified,
                stats.total
            );
            let mut csv = String::from("margin,count\n");
            for (m, n) in stats.margins.bin_centers().iter().zip(&stats.margins.counts) {
                csv.push_str(&format!("{m},{n}\n"));
            }
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("margins.csv"));
            write_out(&out, &csv)?;
        }
        Command::ExportFilters { checkpoint, out } => {
            let (_, net, _) = load_checkpoint(&checkpoint)?;
            let fe = net.front_end.as_ref().ok_or("checkpoint has no front end")?;
            let paths = export_filters(fe, &out)?;
            println!("wrote {} filters to {}", paths.len(), out.display());
        }
    }
    Ok(())
}

fn front_end_threshold(net: &Network) -> CliResult<f64> {
    Ok(net.front_end.as_ref().ok_or("checkpoint has no front end")?.threshold())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", Cli::command().render_usage());
            ExitCode::FAILURE
        }
    }
}
