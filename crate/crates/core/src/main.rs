//! Command-line entry point: data generation, training, evaluation,
//! interventional sampling, and counterfactual queries.

use clap::{Parser, Subcommand};
use dscm::checkpoint;
use dscm::config::{load_config, GraphConfig, MechanismSpec};
use dscm::distributions::Prng;
use dscm::error::{Error, Result};
use dscm::evaluation::{self, histogram_2d, sliced_ks_2d};
use dscm::scm::{Intervention, Observation, Scm};
use dscm::synthdata::{
    self, oracle_scalar_samples, OracleIntervention, RefIntervention, Split, SplitWriter,
};
use dscm::train;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "dscm",
    version,
    about = "Deep structural causal model engine: train flow and variational mechanisms over a causal DAG and answer observational, interventional, and counterfactual queries"
)]
struct Cli {
    /// Base random seed for sampling and abduction draws.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic stroke dataset (train/val/test splits).
    Generate {
        /// Training-split size; val and test each get n/6 records.
        #[arg(long)]
        n: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a graph config on a generated dataset.
    Train {
        /// Bundled name (independent | conditional | full) or a JSON path.
        #[arg(long)]
        config: String,
        #[arg(long)]
        data_dir: PathBuf,
        /// Best-validation checkpoint path; the final state is written next
        /// to it with a .last suffix.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's epoch budget.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue training from an existing checkpoint.
        #[arg(long)]
        resume_from: Option<PathBuf>,
    },
    /// Evaluate checkpoints on the test split: association report CSV.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample an interventional distribution and compare it against the
    /// true generator under the same intervention.
    Intervene {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Intervention: <node>=<const> or <node>=f_<NODE>(eps)+<const>;
        /// empty for the observational distribution.
        #[arg(long = "do")]
        do_expr: String,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        /// Samples CSV path; histograms and the KS summary are written
        /// alongside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Counterfactual for one test record.
    Counterfactual {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Record index within the test split.
        #[arg(long)]
        index: usize,
        /// Intervention: <node>=<const>, <node>=+<delta>, or
        /// <node>=f_<NODE>(eps)+<const>; empty for the null counterfactual.
        #[arg(long = "do")]
        do_expr: String,
        /// Posterior samples per record.
        #[arg(long, default_value_t = 32)]
        samples: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { n, out_dir } => cmd_generate(n, cli.seed, &out_dir, cli.quiet),
        Command::Train {
            config,
            data_dir,
            out,
            epochs,
            resume_from,
        } => cmd_train(&config, &data_dir, &out, epochs, resume_from.as_deref(), cli.quiet),
        Command::Eval {
            checkpoints,
            data_dir,
            out,
        } => cmd_eval(&checkpoints, &data_dir, &out, cli.seed, cli.quiet),
        Command::Intervene {
            checkpoint,
            do_expr,
            n,
            out,
        } => cmd_intervene(&checkpoint, &do_expr, n, &out, cli.seed, cli.quiet),
        Command::Counterfactual {
            checkpoint,
            data_dir,
            index,
            do_expr,
            samples,
            out,
        } => cmd_counterfactual(
            &checkpoint,
            &data_dir,
            index,
            &do_expr,
            samples,
            &out,
            cli.seed,
            cli.quiet,
        ),
    }
}

fn cmd_generate(n: u64, seed: u64, out_dir: &Path, quiet: bool) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let side = (n / 6).max(1);
    let plan = [(Split::Train, n), (Split::Val, side), (Split::Test, side)];
    let mut sum_t = 0.0;
    let mut sum_i = 0.0;
    for (split, count) in plan {
        let dir = out_dir.join(split.dir_name());
        let mut writer = SplitWriter::create(&dir)?;
        let chunk = 2048u64;
        let mut start = 0u64;
        while start < count {
            let records =
                synthdata::generate_records(seed, split, start..(start + chunk).min(count));
            if split == Split::Train {
                sum_t += records.iter().map(|r| r.t).sum::<f64>();
                sum_i += records.iter().map(|r| r.i).sum::<f64>();
            }
            writer.append(&records)?;
            start += chunk;
        }
        writer.finish()?;
    }
    if !quiet {
        println!(
            "wrote {n} train / {side} val / {side} test records to {}",
            out_dir.display()
        );
        println!(
            "train summary: mean t = {:.4}, mean i = {:.4}",
            sum_t / n as f64,
            sum_i / n as f64
        );
    }
    Ok(())
}

fn needs_images(cfg: &GraphConfig) -> bool {
    cfg.nodes
        .iter()
        .any(|n| matches!(n.mechanism, MechanismSpec::Amortised { .. }))
}

fn check_data_compat(cfg: &GraphConfig, obs: &Observation, hash: &str) -> Result<()> {
    for node in &cfg.nodes {
        if obs.get(&node.name).is_err() {
            return Err(Error::Config(format!(
                "dataset has no column for node {:?} required by config {} (hash {hash})",
                node.name, cfg.name
            )));
        }
    }
    Ok(())
}

fn cmd_train(
    config: &str,
    data_dir: &Path,
    out: &Path,
    epochs: Option<usize>,
    resume_from: Option<&Path>,
    quiet: bool,
) -> Result<()> {
    let base = load_config(config)?;
    let with_images = needs_images(&base);
    let (train_obs, _) = synthdata::read_split(&data_dir.join("train"), with_images)?;
    let (val_obs, _) = synthdata::read_split(&data_dir.join("val"), with_images)?;

    let (scm, resolved, start_step, mut history, prior_epochs) = match resume_from {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            if ckpt.manifest.config.name != base.name {
                return Err(Error::Config(format!(
                    "resume checkpoint was trained with config {:?} (hash {}), not {:?}",
                    ckpt.manifest.config.name, ckpt.manifest.config_hash, base.name
                )));
            }
            let epochs_trained = ckpt.manifest.epochs_trained;
            (
                ckpt.scm,
                ckpt.manifest.config,
                ckpt.manifest.step,
                ckpt.manifest.metrics,
                epochs_trained,
            )
        }
        None => {
            let resolved = base.resolve(&train_obs)?;
            let mut rng = Prng::seed_from(resolved.training.seed);
            let scm = resolved.build(Some(&train_obs), &mut rng)?;
            (scm, resolved, 0, Vec::new(), 0)
        }
    };
    check_data_compat(&resolved, &train_obs, &resolved.hash())?;

    let mut spec = resolved.training.clone();
    if let Some(e) = epochs {
        spec.epochs = e;
    }
    let outcome = train::train(&scm, &train_obs, &val_obs, &spec, start_step, |m| {
        if !quiet {
            eprintln!(
                "epoch {:>4}: train loss {:+.4}  val loss {:+.4}",
                m.epoch, m.train_loss, m.val_loss
            );
        }
    })?;
    history.extend(outcome.metrics.iter().cloned());
    let epochs_trained = prior_epochs + outcome.metrics.len();

    // best-validation checkpoint at --out, final state alongside it
    checkpoint::save(
        out,
        &scm,
        &resolved,
        outcome.steps,
        epochs_trained,
        &history,
        Some(&outcome.best_params),
    )?;
    let last_path = sibling(out, ".last");
    checkpoint::save(
        &last_path,
        &scm,
        &resolved,
        outcome.steps,
        epochs_trained,
        &history,
        None,
    )?;
    if !quiet {
        match outcome.best_epoch {
            Some(e) => println!(
                "saved best-validation checkpoint (epoch {e}) to {} and final state to {}",
                out.display(),
                last_path.display()
            ),
            None => println!("saved initialised model to {}", out.display()),
        }
    }
    Ok(())
}

/// `samples.csv` -> `samples<suffix>.csv`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = path.extension().and_then(|s| s.to_str());
    let name = match ext {
        Some(e) => format!("{stem}{suffix}.{e}"),
        None => format!("{stem}{suffix}"),
    };
    path.with_file_name(name)
}

fn cmd_eval(
    checkpoints: &[PathBuf],
    data_dir: &Path,
    out: &Path,
    seed: u64,
    quiet: bool,
) -> Result<()> {
    let test_dir = data_dir.join("test");
    if !test_dir.is_dir() {
        return Err(Error::Config(format!(
            "data dir {} has no test split",
            data_dir.display()
        )));
    }
    let mut loaded = Vec::new();
    for path in checkpoints {
        loaded.push(checkpoint::load(path)?);
    }
    let with_images = loaded.iter().any(|c| needs_images(&c.manifest.config));
    let (test_obs, _) = synthdata::read_split(&test_dir, with_images)?;
    for ckpt in &loaded {
        check_data_compat(&ckpt.manifest.config, &test_obs, &ckpt.manifest.config_hash)?;
    }
    let models: Vec<(String, &Scm)> = loaded
        .iter()
        .map(|c| (c.manifest.config.name.clone(), &c.scm))
        .collect();
    let report = evaluation::association_report(
        &models,
        &test_obs,
        loaded[0].manifest.config.training.particles,
        32,
        seed,
    )?;
    let csv = report.to_csv();
    std::fs::write(out, &csv)?;
    if !quiet {
        print!("{csv}");
    }
    Ok(())
}

/// Parsed intervention expression.
#[derive(Debug, Clone, PartialEq)]
enum DoExpr {
    Null,
    Const { node: String, value: f64 },
    Additive { node: String, delta: f64 },
    NoiseShift { node: String, shift: f64 },
}

fn parse_do(expr: &str) -> Result<DoExpr> {
    let fail = |message: &str| Error::InterventionParse {
        expr: expr.to_string(),
        message: message.to_string(),
    };
    let trimmed = expr.trim();
    if trimmed.is_empty() {
        return Ok(DoExpr::Null);
    }
    let (node, rhs) = trimmed
        .split_once('=')
        .ok_or_else(|| fail("expected <node>=<value>"))?;
    let node = node.trim().to_string();
    let rhs = rhs.trim();
    if node.is_empty() {
        return Err(fail("empty node name"));
    }
    if let Some(delta) = rhs.strip_prefix('+') {
        let delta: f64 = delta
            .parse()
            .map_err(|e| fail(&format!("bad additive delta: {e}")))?;
        return Ok(DoExpr::Additive { node, delta });
    }
    if let Some(rest) = rhs.strip_prefix("f_") {
        let (mech_node, tail) = rest
            .split_once("(eps)")
            .ok_or_else(|| fail("noise-shift form is f_<NODE>(eps)+<const>"))?;
        if !mech_node.eq_ignore_ascii_case(&node) {
            return Err(fail(&format!(
                "noise-shift mechanism f_{mech_node} must match the intervened node {node:?}"
            )));
        }
        let shift: f64 = tail
            .parse()
            .map_err(|e| fail(&format!("bad shift constant: {e}")))?;
        return Ok(DoExpr::NoiseShift { node, shift });
    }
    let value: f64 = rhs
        .parse()
        .map_err(|e| fail(&format!("bad constant: {e}")))?;
    Ok(DoExpr::Const { node, value })
}

fn cmd_intervene(
    checkpoint_path: &Path,
    do_expr: &str,
    n: usize,
    out: &Path,
    seed: u64,
    quiet: bool,
) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let expr = parse_do(do_expr)?;
    let ckpt = checkpoint::load(checkpoint_path)?;
    let iv = match &expr {
        DoExpr::Null => Intervention::empty(),
        DoExpr::Const { node, value } => Intervention::constant(node, *value),
        DoExpr::NoiseShift { node, shift } => ckpt.scm.noise_shift_intervention(node, *shift)?,
        DoExpr::Additive { .. } => {
            return Err(Error::InterventionParse {
                expr: do_expr.to_string(),
                message:
                    "additive interventions apply to an observed record; use the counterfactual command"
                        .into(),
            })
        }
    };
    let tilde = ckpt.scm.intervened(&iv)?;
    let mut rng = Prng::substream(seed, 5 << 40);
    let samples = tilde.ancestral_sample(n, &mut rng)?;
    let t = samples.get("t")?.data();
    let i = samples.get("i")?.data();
    let mut csv = String::from("t,i\n");
    let model_pts: Vec<(f64, f64)> = t.into_iter().zip(i).collect();
    for (tv, iv) in &model_pts {
        csv.push_str(&format!("{tv},{iv}\n"));
    }
    std::fs::write(out, csv)?;

    // the true generator under the same intervention
    let oracle_iv = match &expr {
        DoExpr::Null => OracleIntervention::Observational,
        DoExpr::Const { node, value } if node == "t" => OracleIntervention::ThicknessConst(*value),
        DoExpr::Const { node, value } if node == "i" => OracleIntervention::IntensityConst(*value),
        DoExpr::NoiseShift { node, shift } if node == "t" => {
            OracleIntervention::ThicknessShift(*shift)
        }
        _ => {
            return Err(Error::InterventionParse {
                expr: do_expr.to_string(),
                message: "the reference generator answers interventions on t (const or noise-shift) and i (const)"
                    .into(),
            })
        }
    };
    let oracle_pts = oracle_scalar_samples(oracle_iv, n, seed);
    let range_of = |pts: &[(f64, f64)], f: fn(&(f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi + 1e-9)
    };
    let xr = range_of(&oracle_pts, |p| p.0);
    let yr = range_of(&oracle_pts, |p| p.1);
    std::fs::write(
        sibling(out, ".hist"),
        histogram_2d(&model_pts, 64, xr, yr).to_csv(),
    )?;
    std::fs::write(
        sibling(out, ".oracle_hist"),
        histogram_2d(&oracle_pts, 64, xr, yr).to_csv(),
    )?;
    let ks2 = sliced_ks_2d(&model_pts, &oracle_pts, 16, 97)?;
    let ks_t = evaluation::ks_distance(
        &model_pts.iter().map(|p| p.0).collect::<Vec<_>>(),
        &oracle_pts.iter().map(|p| p.0).collect::<Vec<_>>(),
    )?;
    let ks_i = evaluation::ks_distance(
        &model_pts.iter().map(|p| p.1).collect::<Vec<_>>(),
        &oracle_pts.iter().map(|p| p.1).collect::<Vec<_>>(),
    )?;
    let ks_csv = format!("metric,value\nsliced_ks_2d,{ks2:.6}\nks_t,{ks_t:.6}\nks_i,{ks_i:.6}\n");
    std::fs::write(sibling(out, ".ks"), &ks_csv)?;
    if !quiet {
        println!(
            "{n} interventional samples under do({do_expr}) written to {}",
            out.display()
        );
        print!("{ks_csv}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_counterfactual(
    checkpoint_path: &Path,
    data_dir: &Path,
    index: usize,
    do_expr: &str,
    samples: usize,
    out: &Path,
    seed: u64,
    quiet: bool,
) -> Result<()> {
    if samples == 0 {
        return Err(Error::Config("--samples must be at least 1".into()));
    }
    let expr = parse_do(do_expr)?;
    let ckpt = checkpoint::load(checkpoint_path)?;
    let with_images = needs_images(&ckpt.manifest.config);
    let (test_obs, rows) = synthdata::read_split(&data_dir.join("test"), with_images)?;
    if index >= test_obs.len() {
        return Err(Error::Config(format!(
            "record index {index} out of range; the test split has {} records",
            test_obs.len()
        )));
    }
    let obs = test_obs.rows(&[index])?;
    let row = &rows[index];
    let iv = match &expr {
        DoExpr::Null => Intervention::empty(),
        DoExpr::Const { node, value } => Intervention::constant(node, *value),
        DoExpr::Additive { node, delta } => {
            let observed = obs.get(node)?.item();
            Intervention::constant(node, observed + delta)
        }
        DoExpr::NoiseShift { node, shift } => ckpt.scm.noise_shift_intervention(node, *shift)?,
    };
    let mut rng = Prng::substream(seed, 6 << 40);
    let cf = ckpt.scm.counterfactual(&obs, &iv, &mut rng, samples)?;

    std::fs::create_dir_all(out)?;
    let mut cov = String::from("node,observed,counterfactual\n");
    for (name, value) in cf.mean.iter() {
        if value.shape()[1] == 1 {
            cov.push_str(&format!(
                "{name},{},{}\n",
                obs.get(name)?.item(),
                value.item()
            ));
        }
    }
    std::fs::write(out.join("counterfactual_covariates.csv"), cov)?;

    let mut mae_value: Option<f64> = None;
    if with_images {
        let x_obs = obs.get("x")?.data();
        let x_cf = cf.mean.get("x")?.data();
        synthdata::write_images(&out.join("counterfactual_image"), &[x_cf.clone()])?;
        let diff: Vec<f64> = x_cf.iter().zip(&x_obs).map(|(a, b)| a - b).collect();
        synthdata::write_images(&out.join("difference_map"), &[diff])?;

        // reference counterfactual from the stored noise and identity
        let reference: Vec<f64> = match &expr {
            DoExpr::Null => x_obs.clone(),
            DoExpr::Const { node, value } if node == "t" => {
                reference_image(row, RefIntervention::Thickness(*value))?
            }
            DoExpr::Additive { node, delta } if node == "t" => {
                reference_image(row, RefIntervention::Thickness(row.t + delta))?
            }
            DoExpr::NoiseShift { node, shift } if node == "t" => {
                reference_image(row, RefIntervention::Thickness(row.t + shift))?
            }
            DoExpr::Const { node, value } if node == "i" => {
                reference_image(row, RefIntervention::Intensity(*value))?
            }
            DoExpr::Additive { node, delta } if node == "i" => {
                reference_image(row, RefIntervention::Intensity(row.i + delta))?
            }
            _ => {
                return Err(Error::InterventionParse {
                    expr: do_expr.to_string(),
                    message: "the reference oracle answers interventions on t or i".into(),
                })
            }
        };
        let mae = x_cf
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / x_cf.len() as f64;
        mae_value = Some(mae);
        std::fs::write(
            out.join("mae.csv"),
            format!("metric,value\nmae_vs_reference,{mae:.6}\n"),
        )?;
    }
    if !quiet {
        match mae_value {
            Some(m) => println!(
                "counterfactual for test record {index} under do({do_expr}) written to {}; MAE vs reference {m:.4}",
                out.display()
            ),
            None => println!(
                "counterfactual for test record {index} under do({do_expr}) written to {}",
                out.display()
            ),
        }
    }
    Ok(())
}

fn reference_image(row: &synthdata::CovariateRow, iv: RefIntervention) -> Result<Vec<f64>> {
    let record = synthdata::SyntheticRecord {
        index: row.index,
        t: row.t,
        i: row.i,
        eps_t: row.eps_t,
        eps_i: row.eps_i,
        identity: row.identity,
        image: Vec::new(),
    };
    Ok(synthdata::reference_counterfactual(&record, iv)?.image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn do_expression_grammar() {
        assert_eq!(parse_do("").unwrap(), DoExpr::Null);
        assert_eq!(
            parse_do("t=3.0").unwrap(),
            DoExpr::Const {
                node: "t".into(),
                value: 3.0
            }
        );
        assert_eq!(
            parse_do("t=+2.0").unwrap(),
            DoExpr::Additive {
                node: "t".into(),
                delta: 2.0
            }
        );
        assert_eq!(
            parse_do("t=+-0.5").unwrap(),
            DoExpr::Additive {
                node: "t".into(),
                delta: -0.5
            }
        );
        assert_eq!(
            parse_do("t=f_T(eps)+1.0").unwrap(),
            DoExpr::NoiseShift {
                node: "t".into(),
                shift: 1.0
            }
        );
        assert_eq!(
            parse_do("t=f_T(eps)-0.5").unwrap(),
            DoExpr::NoiseShift {
                node: "t".into(),
                shift: -0.5
            }
        );
        let err = parse_do("t=f_I(eps)+1.0").unwrap_err();
        assert!(err.to_string().contains("grammar"), "{err}");
        assert!(parse_do("nonsense").is_err());
        assert!(parse_do("t=abc").is_err());
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(
            sibling(Path::new("a/samples.csv"), ".ks"),
            PathBuf::from("a/samples.ks.csv")
        );
        assert_eq!(sibling(Path::new("plain"), ".x"), PathBuf::from("plain.x"));
    }
}
