//! Command-line driver: one binary, one verb per pipeline stage.
//!
//! Artifacts live in `$LATENT_SSL_OUT/<run-id>/` (default root `runs`),
//! where the run id is a digest of the resolved configuration unless given
//! explicitly. Every command re-reads what earlier stages wrote there.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Arg, ArgAction, ArgMatches, Command};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{self, AnalysisError};
use crate::config::{ConfigError, ExperimentConfig, KEYS};
use crate::data::manifest::import_manifest;
use crate::data::{generate_synthetic, make_splits, DataError, DatasetBundle, FactorSpec, Split};
use crate::metrics::AurocReport;
use crate::ssl::{self, SslError, SslModel};
use crate::tensor::Tensor;
use crate::vae::{self, VaeError, VaeModel};

pub const OUT_ENV: &str = "LATENT_SSL_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing checkpoint: {path} (run `{stage}` first)")]
    MissingCheckpoint { path: PathBuf, stage: &'static str },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    GenData,
    TrainVae,
    TrainSsl,
    Eval,
    Traverse,
    Transfer,
    Probe,
    Sensitivity,
    ActiveUnits,
    PruneRerun,
}

impl Verb {
    pub const ALL: [Verb; 10] = [
        Verb::GenData,
        Verb::TrainVae,
        Verb::TrainSsl,
        Verb::Eval,
        Verb::Traverse,
        Verb::Transfer,
        Verb::Probe,
        Verb::Sensitivity,
        Verb::ActiveUnits,
        Verb::PruneRerun,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Verb::GenData => "gen-data",
            Verb::TrainVae => "train-vae",
            Verb::TrainSsl => "train-ssl",
            Verb::Eval => "eval",
            Verb::Traverse => "traverse",
            Verb::Transfer => "transfer",
            Verb::Probe => "probe",
            Verb::Sensitivity => "sensitivity",
            Verb::ActiveUnits => "active-units",
            Verb::PruneRerun => "prune-rerun",
        }
    }

    fn about(self) -> &'static str {
        match self {
            Verb::GenData => "generate (or import) the dataset and its splits",
            Verb::TrainVae => "train the VAE on the training images",
            Verb::TrainSsl => "train the classifier in the configured mode",
            Verb::Eval => "report test-split AUROC as JSON",
            Verb::Traverse => "write a latent traversal grid",
            Verb::Transfer => "swap latent units between two images",
            Verb::Probe => "single-dimension logistic probes for every latent unit",
            Verb::Sensitivity => "posterior sensitivity of the classifier before and after training",
            Verb::ActiveUnits => "posterior-mean variance of every latent unit",
            Verb::PruneRerun => "drop inactive units and retrain the classifier",
        }
    }
}

impl FromStr for Verb {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self> {
        Verb::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown command {s:?}")))
    }
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

pub fn command() -> Command {
    let mut cmd = Command::new("latent-ssl")
        .about("VAE embedding + latent-space self-ensembling classifier")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("key = value configuration file"),
        )
        .arg(
            Arg::new("seeds")
                .long("seeds")
                .global(true)
                .value_name("LIST")
                .help("comma-separated seeds run as concurrent replicas"),
        )
        .arg(
            Arg::new("run-id")
                .long("run-id")
                .global(true)
                .value_name("ID")
                .help("output directory name (default: digest of the resolved config)"),
        );
    for (key, help) in KEYS {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(flag_name(key))
                .global(true)
                .value_name("VALUE")
                .action(ArgAction::Set)
                .help(*help),
        );
    }
    for v in Verb::ALL {
        cmd = cmd.subcommand(Command::new(v.name()).about(v.about()));
    }
    cmd
}

#[derive(Debug, Clone)]
pub struct Invocation {
    pub verb: Verb,
    pub config: ExperimentConfig,
    pub run_id: Option<String>,
    pub seeds: Option<Vec<u64>>,
}

fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    KEYS.iter()
        .filter_map(|(k, _)| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect()
}

pub fn parse_invocation(m: &ArgMatches) -> Result<Invocation> {
    let (name, sub) = m
        .subcommand()
        .ok_or_else(|| CliError::Usage("no command given".into()))?;
    let verb: Verb = name.parse()?;
    // global args are propagated to the subcommand's matches
    let file = sub.get_one::<String>("config").map(PathBuf::from);
    let config = ExperimentConfig::resolve(file.as_deref(), &overrides(sub))?;
    let seeds = sub
        .get_one::<String>("seeds")
        .map(|s| {
            s.split(',')
                .map(|x| {
                    x.trim()
                        .parse::<u64>()
                        .map_err(|_| CliError::Usage(format!("bad seed {x:?} in --seeds")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok(Invocation {
        verb,
        config,
        run_id: sub.get_one::<String>("run-id").cloned(),
        seeds,
    })
}

/// First 16 hex digits of SHA-256 over the canonical config rendering.
pub fn run_id(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.render().as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Parses `args` (including the program name), runs, and returns the exit
/// status. Reports go to stdout, diagnostics to stderr.
pub fn main_with_args(args: impl IntoIterator<Item = OsString>) -> i32 {
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match parse_invocation(&matches).and_then(|inv| execute(&inv, &mut std::io::stdout())) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Runs one invocation, fanning out over `--seeds` when given.
pub fn execute(inv: &Invocation, out: &mut dyn Write) -> Result<()> {
    let id = inv.run_id.clone().unwrap_or_else(|| run_id(&inv.config));
    let base = output_root().join(id);
    let Some(seeds) = &inv.seeds else {
        return run_command(inv.verb, &inv.config, &base, out);
    };
    let results: Vec<(u64, Vec<u8>, Result<()>)> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let mut cfg = inv.config.clone();
                cfg.seed = seed;
                let dir = base.join(format!("seed-{seed}"));
                s.spawn(move || {
                    let mut buf = Vec::new();
                    let r = run_command(inv.verb, &cfg, &dir, &mut buf);
                    (seed, buf, r)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("replica panicked")).collect()
    });
    let mut first_err = None;
    for (seed, buf, r) in results {
        out.write_all(&buf)?;
        if let Err(e) = r {
            eprintln!("seed {seed}: {e}");
            first_err.get_or_insert(e);
        }
    }
    first_err.map_or(Ok(()), Err)
}

struct RunDir<'a> {
    dir: &'a Path,
}

impl RunDir<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, name: &str, stage: &'static str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::MissingCheckpoint { path: p, stage })
        }
    }

    fn data(&self) -> Result<DatasetBundle> {
        Ok(DatasetBundle::load(self.require("data.lten", "gen-data")?)?)
    }

    fn vae(&self) -> Result<VaeModel> {
        Ok(VaeModel::load(self.require("vae.lten", "train-vae")?)?)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T, out: &mut dyn Write) -> Result<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        fs::write(self.path(name), &text)?;
        out.write_all(text.as_bytes())?;
        Ok(())
    }
}

fn ssl_name(cfg: &ExperimentConfig) -> String {
    format!("ssl_{}", cfg.mode)
}

/// Executes one stage in `dir`, writing the resolved config alongside.
pub fn run_command(verb: Verb, cfg: &ExperimentConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.render())?;
    let rd = RunDir { dir };
    match verb {
        Verb::GenData => gen_data(cfg, &rd, out),
        Verb::TrainVae => {
            let bundle = rd.data()?;
            let mut log = String::new();
            let (model, _) = vae::train_vae_with(&bundle, &cfg.vae_train(), |e| {
                log += &serde_json::to_string(e).expect("log record");
                log.push('\n');
            })?;
            fs::write(rd.path("vae_log.jsonl"), &log)?;
            model.save(rd.path("vae.lten"), cfg.seed)?;
            writeln!(out, "saved {}", rd.path("vae.lten").display())?;
            Ok(())
        }
        Verb::TrainSsl => {
            let bundle = rd.data()?;
            let vae = if cfg.mode.uses_vae() { Some(rd.vae()?) } else { None };
            let model = train_and_log(cfg.ssl(), vae.as_ref(), &bundle, &rd, &ssl_name(cfg))?;
            writeln!(out, "saved {}", rd.path(&format!("{}.lten", ssl_name(cfg))).display())?;
            let _ = model;
            Ok(())
        }
        Verb::Eval => {
            let bundle = rd.data()?;
            let model = SslModel::load(rd.require(&format!("{}.lten", ssl_name(cfg)), "train-ssl")?)?;
            let vae = if model.mode.uses_vae() { Some(rd.vae()?) } else { None };
            let report = ssl::evaluate(&model, vae.as_ref(), &bundle, Split::Test)?;
            rd.write_json(&format!("eval_{}.json", model.mode), &report, out)
        }
        Verb::Traverse => {
            let (bundle, vae) = (rd.data()?, rd.vae()?);
            let x = test_image(&bundle, cfg.traverse_image)?;
            let t = analysis::latent_traverse(
                &vae,
                &x,
                cfg.traverse_dim,
                (cfg.traverse_lo, cfg.traverse_hi),
                cfg.traverse_steps,
            )?;
            let name = format!("traverse_dim{}", cfg.traverse_dim);
            analysis::write_pgm_grid(rd.path(&format!("{name}.pgm")), &t.images, bundle.image_size(), t.values.len())?;
            #[derive(Serialize)]
            struct R {
                dim: usize,
                values: Vec<f64>,
                grid: String,
            }
            let r = R {
                dim: cfg.traverse_dim,
                values: t.values,
                grid: format!("{name}.pgm"),
            };
            rd.write_json(&format!("{name}.json"), &r, out)
        }
        Verb::Transfer => {
            let (bundle, vae) = (rd.data()?, rd.vae()?);
            let a = test_image(&bundle, cfg.transfer_a)?;
            let b = test_image(&bundle, cfg.transfer_b)?;
            let t = analysis::feature_transfer(&vae, &a, &b, &cfg.transfer_dims)?;
            let p = bundle.num_pixels();
            let grid = Tensor::new(vec![4, p], [t.recon_a, t.recon_b, t.a_with_b, t.b_with_a].concat())
                .expect("four images");
            analysis::write_pgm_grid(rd.path("transfer.pgm"), &grid, bundle.image_size(), 4)?;
            #[derive(Serialize)]
            struct R<'a> {
                dims: &'a [usize],
                columns: [&'static str; 4],
                grid: &'static str,
            }
            let r = R {
                dims: &cfg.transfer_dims,
                columns: ["recon_a", "recon_b", "a_with_b", "b_with_a"],
                grid: "transfer.pgm",
            };
            rd.write_json("transfer.json", &r, out)
        }
        Verb::Probe => {
            let (bundle, vae) = (rd.data()?, rd.vae()?);
            let rows: Vec<usize> = [Split::LabeledTrain, Split::Validation, Split::Test]
                .into_iter()
                .flat_map(|s| bundle.indices(s))
                .filter(|&i| bundle.label_known(i))
                .collect();
            let labels = bundle.label_matrix(&rows)?;
            let images = bundle.images().select_rows(&rows);
            let reports = analysis::probe_all_dims(&vae, &images, &labels, cfg.probe_label, &cfg.probe())?;
            let best = reports
                .iter()
                .max_by(|a, b| a.test_auroc.total_cmp(&b.test_auroc))
                .map(|r| r.dim);
            let most_correlated = reports
                .iter()
                .max_by(|a, b| a.train_correlation.abs().total_cmp(&b.train_correlation.abs()))
                .map(|r| r.dim);
            #[derive(Serialize)]
            struct R {
                target_label: usize,
                best_dim: Option<usize>,
                max_abs_correlation_dim: Option<usize>,
                dims: Vec<analysis::ProbeReport>,
            }
            let r = R {
                target_label: cfg.probe_label,
                best_dim: best,
                max_abs_correlation_dim: most_correlated,
                dims: reports,
            };
            rd.write_json("probe.json", &r, out)
        }
        Verb::Sensitivity => {
            if !cfg.mode.uses_vae() {
                return Err(CliError::Usage(format!("sensitivity needs a latent mode, not {}", cfg.mode)));
            }
            let (bundle, vae) = (rd.data()?, rd.vae()?);
            let trained = SslModel::load(rd.require(&format!("{}.lten", ssl_name(cfg)), "train-ssl")?)?;
            let untrained = SslModel::init(&cfg.ssl(), bundle.num_pixels(), vae.latent_dim(), bundle.num_labels());
            let test = bundle.indices(Split::Test);
            let x = bundle
                .images()
                .select_rows(&test[..cfg.sensitivity_samples.min(test.len())]);
            let mut r1 = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut r2 = ChaCha8Rng::seed_from_u64(cfg.seed);
            #[derive(Serialize)]
            struct R {
                before: f64,
                after: f64,
                n_pairs: usize,
                n_samples: usize,
            }
            let r = R {
                before: analysis::latent_sensitivity(&vae, &untrained, &x, cfg.sensitivity_pairs, &mut r1)?,
                after: analysis::latent_sensitivity(&vae, &trained, &x, cfg.sensitivity_pairs, &mut r2)?,
                n_pairs: cfg.sensitivity_pairs,
                n_samples: x.rows(),
            };
            rd.write_json("sensitivity.json", &r, out)
        }
        Verb::ActiveUnits => {
            let (bundle, vae) = (rd.data()?, rd.vae()?);
            let imgs = bundle.images().select_rows(&bundle.train_indices());
            let au = vae::active_units(&vae, &imgs, cfg.au_threshold)?;
            #[derive(Serialize)]
            struct R {
                threshold: f64,
                variance: Vec<f64>,
                active_dims: Vec<usize>,
                inactive_dims: Vec<usize>,
            }
            let r = R {
                threshold: au.threshold,
                active_dims: au.active_dims(),
                inactive_dims: au.inactive_dims(),
                variance: au.variance,
            };
            rd.write_json("active_units.json", &r, out)
        }
        Verb::PruneRerun => prune_rerun(cfg, &rd, out),
    }
}

fn gen_data(cfg: &ExperimentConfig, rd: &RunDir<'_>, out: &mut dyn Write) -> Result<()> {
    let raw = if cfg.data_path.is_empty() {
        generate_synthetic(&FactorSpec::default(), cfg.n_samples, cfg.image_size, cfg.seed)?
    } else {
        import_manifest(&cfg.data_path, cfg.image_size)?
    };
    let bundle = make_splits(&raw, cfg.k_per_label, cfg.n_val, cfg.n_test, cfg.seed)?;
    bundle.save(rd.path("data.lten"))?;
    #[derive(Serialize)]
    struct R {
        samples: usize,
        labeled_train: usize,
        unlabeled_train: usize,
        validation: usize,
        test: usize,
    }
    let r = R {
        samples: bundle.len(),
        labeled_train: bundle.indices(Split::LabeledTrain).len(),
        unlabeled_train: bundle.indices(Split::UnlabeledTrain).len(),
        validation: bundle.indices(Split::Validation).len(),
        test: bundle.indices(Split::Test).len(),
    };
    rd.write_json("data.json", &r, out)
}

fn test_image(bundle: &DatasetBundle, pos: usize) -> Result<Vec<f64>> {
    let test = bundle.indices(Split::Test);
    let i = *test
        .get(pos)
        .ok_or_else(|| CliError::Usage(format!("test split has {} images, index {pos} requested", test.len())))?;
    Ok(bundle.images().row(i).to_vec())
}

fn train_and_log(
    cfg: ssl::SslConfig,
    vae: Option<&VaeModel>,
    bundle: &DatasetBundle,
    rd: &RunDir<'_>,
    name: &str,
) -> Result<SslModel> {
    let mut log = String::new();
    let (model, _) = ssl::train_ssl(vae, bundle, &cfg, |e| {
        log += &serde_json::to_string(e).expect("log record");
        log.push('\n');
    })?;
    fs::write(rd.path(&format!("{name}_log.jsonl")), &log)?;
    model.save(rd.path(&format!("{name}.lten")))?;
    Ok(model)
}

#[derive(Debug, Clone, Serialize)]
pub struct PruneReport {
    pub threshold: f64,
    pub pruned_dims: Vec<usize>,
    pub kept_dims: Vec<usize>,
    pub pre: AurocReport,
    pub post: AurocReport,
    pub pre_mean_auroc: f64,
    pub post_mean_auroc: f64,
    pub delta: f64,
}

fn prune_rerun(cfg: &ExperimentConfig, rd: &RunDir<'_>, out: &mut dyn Write) -> Result<()> {
    if !cfg.mode.uses_vae() {
        return Err(CliError::Usage(format!("prune-rerun needs a latent mode, not {}", cfg.mode)));
    }
    let (bundle, vae) = (rd.data()?, rd.vae()?);
    let name = ssl_name(cfg);
    let ckpt = rd.path(&format!("{name}.lten"));
    let full = if ckpt.is_file() {
        SslModel::load(&ckpt)?
    } else {
        train_and_log(cfg.ssl(), Some(&vae), &bundle, rd, &name)?
    };
    let pre = ssl::evaluate(&full, Some(&vae), &bundle, Split::Test)?;

    let imgs = bundle.images().select_rows(&bundle.train_indices());
    let au = vae::active_units(&vae, &imgs, cfg.au_threshold)?;
    let kept = au.active_dims();
    if kept.is_empty() {
        return Err(CliError::Usage(format!(
            "no latent unit exceeds the activity threshold {}",
            cfg.au_threshold
        )));
    }
    let mut scfg = cfg.ssl();
    scfg.kept_dims = Some(kept.clone());
    let pruned = train_and_log(scfg, Some(&vae), &bundle, rd, &format!("{name}_pruned"))?;
    let post = ssl::evaluate(&pruned, Some(&vae), &bundle, Split::Test)?;
    let report = PruneReport {
        threshold: cfg.au_threshold,
        pruned_dims: au.inactive_dims(),
        kept_dims: kept,
        pre_mean_auroc: pre.mean,
        post_mean_auroc: post.mean,
        delta: post.mean - pre.mean,
        pre,
        post,
    };
    rd.write_json("prune_rerun.json", &report, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matches(args: &[&str]) -> ArgMatches {
        command().try_get_matches_from(args).unwrap()
    }

    #[test]
    fn verbs_round_trip() {
        for v in Verb::ALL {
            assert_eq!(v.name().parse::<Verb>().unwrap(), v);
        }
        assert!("train".parse::<Verb>().is_err());
    }

    #[test]
    fn flags_override_defaults_and_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "lr = 1e-4\nzeta_max = 3\n").unwrap();
        let m = matches(&["latent-ssl", "--config", p.to_str().unwrap(), "eval", "--lr", "1e-5", "--seeds", "1,2"]);
        let inv = parse_invocation(&m).unwrap();
        assert_eq!(inv.verb, Verb::Eval);
        assert_eq!(inv.config.lr, 1e-5);
        assert_eq!(inv.config.zeta_max, 3.0);
        assert_eq!(inv.seeds, Some(vec![1, 2]));
    }

    #[test]
    fn out_of_range_flag_rejected() {
        let m = matches(&["latent-ssl", "train-ssl", "--alpha", "1.5"]);
        let err = parse_invocation(&m).unwrap_err();
        assert_eq!(err.to_string(), "alpha must be in [0,1)");
    }

    #[test]
    fn run_id_tracks_config() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed = 7;
        assert_eq!(run_id(&a), run_id(&a.clone()));
        assert_ne!(run_id(&a), run_id(&b));
        assert_eq!(run_id(&a).len(), 16);
    }

    #[test]
    fn eval_without_checkpoint_is_diagnosed() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_command(Verb::Eval, &ExperimentConfig::default(), dir.path(), &mut Vec::new()).unwrap_err();
        assert!(err.to_string().starts_with("missing checkpoint"), "{err}");
        assert!(dir.path().join("config.txt").is_file());
    }
}
