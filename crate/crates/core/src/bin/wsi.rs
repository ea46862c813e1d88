//! Command-line entry point: simulate stacks, train networks, evaluate
//! sensitivities, demodulate stacks, sweep curves, and check hierarchies.
//!
//! Every command reads one TOML configuration (a file path or a shipped
//! preset name), applies `--set key=value` overrides, runs, and writes a
//! resolved-config sidecar next to its primary artifact so the run can be
//! reproduced byte for byte.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use wsi_demod::config::{
    load_config, write_sidecar, DemodConfig, EstimatorSpec, EvalConfig, PhantomConfig, RunConfig,
    TrainJob,
};
use wsi_demod::error::{Error, Result};
use wsi_demod::evaluate::{
    hierarchy_check, read_curves_csv, sweep_curve, write_curves_csv, CurveEstimator,
    SensitivityCurve,
};
use wsi_demod::imaging::{
    crop_stack, demod_stack, flat_phantom, gaussian_bump_phantom, load_stack, ramp_phantom,
    save_stack, sensitivity_histogram, snr_gain, synthesize_stack, write_map_csv, write_map_pgm,
    ScalarMap, StackEstimator,
};
use wsi_demod::net::{load_weights, save_weights, Network};
use wsi_demod::rng::SeedTree;
use wsi_demod::signal::{ParamBox, WavenumberGrid};
use wsi_demod::training::{
    build_bank, generate_training_set, load_bank, preset_param_box, save_bank, save_training_set,
    train_network, NetworkBank,
};

#[derive(Parser)]
#[command(
    name = "wsi",
    version,
    about = "Wavelength-shifting interferometry demodulation toolkit",
    long_about = "Simulates four-band interferometric acquisitions under shot noise, trains \
constraint-informed neural demodulators, and measures estimator sensitivity against the \
Cramer-Rao bound hierarchy.\n\nExit codes: 0 success, 2 config not found, 3 invalid config, \
4 I/O failure, 5 malformed artifact, 6 diverged training, 7 inconsistent inputs or failed \
run, 8 invalid domain parameters."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize an interferogram stack from a phantom.
    Simulate(RunArgs),
    /// Train the configured networks or banks.
    Train(RunArgs),
    /// Monte Carlo sensitivity of estimators at configured OPL points.
    Eval(RunArgs),
    /// Demodulate a stack into OPL and sensitivity maps.
    Demod(RunArgs),
    /// Sweep estimator sensitivity across an OPL range.
    Curves(RunArgs),
    /// Check the sensitivity ordering of curves in a CSV.
    Hierarchy(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file path, or a preset name (fig2, fig4, fig6,
    /// fig8-synthetic).
    #[arg(long)]
    config: String,
    /// Override a configuration key, e.g. --set curves.reps=1000.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Parallel workers; results never depend on this. Defaults to
    /// WSI_WORKERS or 1.
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, run): (&RunArgs, fn(&RunConfig, usize) -> Result<()>) = match &cli.cmd {
        Cmd::Simulate(a) => (a, cmd_simulate),
        Cmd::Train(a) => (a, cmd_train),
        Cmd::Eval(a) => (a, cmd_eval),
        Cmd::Demod(a) => (a, cmd_demod),
        Cmd::Curves(a) => (a, cmd_curves),
        Cmd::Hierarchy(a) => (a, cmd_hierarchy),
    };
    match load_config(&args.config, &args.set).and_then(|cfg| run(&cfg, workers_from(args))) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn workers_from(args: &RunArgs) -> usize {
    let from_env = || {
        std::env::var("WSI_WORKERS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
    };
    args.workers.or_else(from_env).unwrap_or(1).max(1)
}

fn section<'a, T>(field: &'a Option<T>, name: &str) -> Result<&'a T> {
    field
        .as_ref()
        .ok_or_else(|| Error::ConfigInvalid(format!("config has no [{name}] section")))
}

fn resolve_box(job: &TrainJob, opl_window: (f64, f64)) -> Result<ParamBox> {
    let base = match &job.preset {
        Some(name) => Some(preset_param_box(name, opl_window)?),
        None => None,
    };
    let alpha = job.alpha.or(base.map(|b| b.alpha)).ok_or_else(|| {
        Error::ConfigInvalid(format!(
            "train job {:?} needs a preset or an explicit alpha interval",
            job.name
        ))
    })?;
    let visibility = job.visibility.or(base.map(|b| b.visibility)).ok_or_else(|| {
        Error::ConfigInvalid(format!(
            "train job {:?} needs a preset or an explicit visibility interval",
            job.name
        ))
    })?;
    ParamBox::new(alpha, visibility, opl_window)
}

fn cmd_train(cfg: &RunConfig, _workers: usize) -> Result<()> {
    if cfg.train.is_empty() {
        return Err(Error::ConfigInvalid(
            "config has no [[train]] jobs".to_string(),
        ));
    }
    let grid = cfg.grid.to_grid()?;
    for (i, job) in cfg.train.iter().enumerate() {
        let tree = SeedTree::new(cfg.seed).child(i as u64);
        match (&job.window_um, &job.bank) {
            (Some(_), Some(_)) => {
                return Err(Error::ConfigInvalid(format!(
                    "train job {:?} sets both window_um and bank",
                    job.name
                )));
            }
            (None, None) => {
                return Err(Error::ConfigInvalid(format!(
                    "train job {:?} needs window_um or bank",
                    job.name
                )));
            }
            (Some(window), None) => {
                let window = *window;
                let param_box = resolve_box(job, window)?;
                let set = generate_training_set(
                    &param_box,
                    &grid,
                    job.opl_points,
                    job.param_draws,
                    tree.child(0),
                )?;
                if let Some(set_path) = &job.save_set {
                    std::fs::write(set_path, save_training_set(&set)?)?;
                    println!("wrote {}", set_path.display());
                }
                let (net, report) = train_network(&job.name, &set, &job.schedule, tree.child(1))?;
                std::fs::write(&job.out, save_weights(&net))?;
                let report_path = PathBuf::from(format!("{}.report.toml", job.out.display()));
                std::fs::write(&report_path, report.to_toml())?;
                write_sidecar(&job.out, "train", cfg)?;
                println!(
                    "trained {} for {} epochs (best validation loss {:.3e} at epoch {}); wrote {}",
                    job.name,
                    report.epochs_run,
                    report.best_val_loss,
                    report.best_epoch,
                    job.out.display()
                );
            }
            (None, Some(bank_cfg)) => {
                if job.save_set.is_some() {
                    return Err(Error::ConfigInvalid(format!(
                        "train job {:?}: save_set is not supported in bank mode",
                        job.name
                    )));
                }
                let template = resolve_box(job, (0.0, 0.0))?;
                let bank = build_bank(
                    &job.name,
                    &template,
                    &grid,
                    bank_cfg.span_um,
                    bank_cfg.window_um,
                    bank_cfg.overlap_um,
                    job.opl_points,
                    job.param_draws,
                    &job.schedule,
                    tree,
                    |w, total, net, report| {
                        println!(
                            "  window {}/{} [{:.3}, {:.3}] um: {} epochs, validation loss {:.3e}",
                            w + 1,
                            total,
                            net.opl_window.0,
                            net.opl_window.1,
                            report.epochs_run,
                            report.best_val_loss
                        );
                    },
                )?;
                save_bank(&job.out, &bank)?;
                write_sidecar(&job.out, "train", cfg)?;
                println!(
                    "trained bank {} with {} members; wrote {}",
                    job.name,
                    bank.networks.len(),
                    job.out.display()
                );
            }
        }
    }
    Ok(())
}

enum LoadedEstimator {
    Carre,
    Crb,
    Spcrb,
    Dnn(Network),
    Bank(NetworkBank),
}

fn load_estimator(spec: &str) -> Result<LoadedEstimator> {
    Ok(match EstimatorSpec::parse(spec)? {
        EstimatorSpec::Carre => LoadedEstimator::Carre,
        EstimatorSpec::Crb => LoadedEstimator::Crb,
        EstimatorSpec::Spcrb => LoadedEstimator::Spcrb,
        EstimatorSpec::Dnn(path) => LoadedEstimator::Dnn(load_weights(&std::fs::read(path)?)?),
        EstimatorSpec::Bank(path) => LoadedEstimator::Bank(load_bank(&path)?),
    })
}

fn sweep_all(
    specs: &[String],
    alpha: f64,
    visibility: f64,
    opls: &[f64],
    grid: &WavenumberGrid,
    reps: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<SensitivityCurve>> {
    let loaded: Vec<LoadedEstimator> = specs
        .iter()
        .map(|s| load_estimator(s))
        .collect::<Result<_>>()?;
    let mut curves = Vec::with_capacity(loaded.len());
    for le in &loaded {
        let est = match le {
            LoadedEstimator::Carre => CurveEstimator::Carre { k0: grid.k0() },
            LoadedEstimator::Crb => CurveEstimator::Crb,
            LoadedEstimator::Spcrb => CurveEstimator::Spcrb,
            LoadedEstimator::Dnn(net) => CurveEstimator::Network(net),
            LoadedEstimator::Bank(bank) => CurveEstimator::Bank(bank),
        };
        let curve = sweep_curve(&est, alpha, visibility, opls, grid, reps, seed, workers)?;
        println!(
            "evaluated {} at {} points",
            curve.estimator,
            curve.opl_um.len()
        );
        curves.push(curve);
    }
    Ok(curves)
}

fn write_curve_products(out: &Path, curves: &[SensitivityCurve], cfg: &RunConfig, cmd: &str) -> Result<()> {
    let refs: Vec<&SensitivityCurve> = curves.iter().collect();
    write_curves_csv(out, &refs)?;
    write_sidecar(out, cmd, cfg)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, workers: usize) -> Result<()> {
    let eval: &EvalConfig = section(&cfg.eval, "eval")?;
    let grid = cfg.grid.to_grid()?;
    let curves = sweep_all(
        &eval.estimators,
        eval.alpha,
        eval.visibility,
        &eval.opl_um,
        &grid,
        eval.reps,
        cfg.seed,
        workers,
    )?;
    write_curve_products(&eval.out, &curves, cfg, "eval")
}

fn cmd_curves(cfg: &RunConfig, workers: usize) -> Result<()> {
    let cc = section(&cfg.curves, "curves")?;
    if cc.points < 2 {
        return Err(Error::ConfigInvalid(
            "curves.points must be at least 2".to_string(),
        ));
    }
    let grid = cfg.grid.to_grid()?;
    let opls: Vec<f64> = (0..cc.points)
        .map(|i| {
            cc.opl_lo_um + (cc.opl_hi_um - cc.opl_lo_um) * i as f64 / (cc.points - 1) as f64
        })
        .collect();
    let curves = sweep_all(
        &cc.estimators,
        cc.alpha,
        cc.visibility,
        &opls,
        &grid,
        cc.reps,
        cfg.seed,
        workers,
    )?;
    write_curve_products(&cc.out, &curves, cfg, "curves")
}

fn cmd_hierarchy(cfg: &RunConfig, _workers: usize) -> Result<()> {
    let hc = section(&cfg.hierarchy, "hierarchy")?;
    let curves = read_curves_csv(&hc.curves)?;
    let mut ordered = Vec::with_capacity(hc.order.len());
    for tag in &hc.order {
        let found = curves.iter().find(|c| &c.estimator == tag).ok_or_else(|| {
            Error::ConfigInvalid(format!(
                "no curve tagged {tag:?} in {}",
                hc.curves.display()
            ))
        })?;
        ordered.push(found);
    }
    let report = hierarchy_check(&ordered, hc.slack_stderrs)?;
    std::fs::write(&hc.out, report.to_toml())?;
    write_sidecar(&hc.out, "hierarchy", cfg)?;
    if report.all_ok() {
        println!("hierarchy holds at every point; wrote {}", hc.out.display());
    } else {
        println!(
            "hierarchy violated at {} point(s); wrote {}",
            report.violations.len(),
            hc.out.display()
        );
    }
    Ok(())
}

fn cmd_simulate(cfg: &RunConfig, _workers: usize) -> Result<()> {
    let sim = section(&cfg.simulate, "simulate")?;
    let grid = cfg.grid.to_grid()?;
    let phantom = match sim.phantom {
        PhantomConfig::Flat { value_um } => flat_phantom(sim.width, sim.height, value_um)?,
        PhantomConfig::Ramp { lo_um, hi_um } => {
            ramp_phantom(sim.width, sim.height, lo_um, hi_um)?
        }
        PhantomConfig::Bump {
            base_um,
            amplitude_um,
            center_x,
            center_y,
            sigma_px,
        } => gaussian_bump_phantom(
            sim.width,
            sim.height,
            base_um,
            amplitude_um,
            (center_x, center_y),
            sigma_px,
        )?,
    };
    let alpha = ScalarMap::filled(sim.width, sim.height, sim.alpha)?;
    let visibility = ScalarMap::filled(sim.width, sim.height, sim.visibility)?;
    let stack = synthesize_stack(
        &phantom,
        &alpha,
        &visibility,
        &grid,
        sim.frames,
        sim.shot_noise,
        SeedTree::new(cfg.seed),
    )?;
    std::fs::write(&sim.out, save_stack(&stack)?)?;
    write_sidecar(&sim.out, "simulate", cfg)?;
    println!(
        "wrote {} ({}x{} pixels, {} frames)",
        sim.out.display(),
        stack.width,
        stack.height,
        stack.frames
    );
    Ok(())
}

fn cmd_demod(cfg: &RunConfig, workers: usize) -> Result<()> {
    let dc: &DemodConfig = section(&cfg.demod, "demod")?;
    if dc.estimators.is_empty() {
        return Err(Error::ConfigInvalid(
            "demod.estimators must not be empty".to_string(),
        ));
    }
    let mut stack = load_stack(&std::fs::read(&dc.stack)?)?;
    if let Some((x, y, w, h)) = dc.crop {
        stack = crop_stack(&stack, x, y, w, h)?;
    }
    let prior = match dc.prior_um {
        Some(p) => Some(ScalarMap::filled(stack.width, stack.height, p)?),
        None => None,
    };
    let mut summary = String::from("# per-estimator demodulation summary\n");
    let mut sigma_means: Vec<(String, f64)> = Vec::new();
    for spec in &dc.estimators {
        let loaded = match EstimatorSpec::parse(spec)? {
            EstimatorSpec::Carre => LoadedEstimator::Carre,
            EstimatorSpec::Dnn(path) => {
                LoadedEstimator::Dnn(load_weights(&std::fs::read(path)?)?)
            }
            EstimatorSpec::Bank(path) => LoadedEstimator::Bank(load_bank(&path)?),
            other => {
                return Err(Error::ConfigInvalid(format!(
                    "demod supports CARRE, dnn:, and bank: estimators, not {other:?}"
                )))
            }
        };
        let (est, tag): (StackEstimator, String) = match &loaded {
            LoadedEstimator::Carre => (
                StackEstimator::Carre { k0: stack.grid.k0() },
                "carre".to_string(),
            ),
            LoadedEstimator::Dnn(net) => (StackEstimator::Network(net), net.name.clone()),
            LoadedEstimator::Bank(bank) => {
                let prior_map = prior.as_ref().ok_or_else(|| {
                    Error::ConfigInvalid(
                        "demod with a bank estimator needs demod.prior_um".to_string(),
                    )
                })?;
                (
                    StackEstimator::Bank {
                        bank,
                        prior: prior_map,
                    },
                    bank.name.clone(),
                )
            }
            _ => unreachable!("filtered above"),
        };
        let maps = demod_stack(&stack, &est, workers)?;
        let prefix = format!("{}-{}", dc.out_prefix.display(), tag.to_lowercase());
        write_map_csv(Path::new(&format!("{prefix}-opl.csv")), &maps.opl)?;
        write_map_pgm(Path::new(&format!("{prefix}-opl.pgm")), &maps.opl)?;
        write_map_csv(Path::new(&format!("{prefix}-sigma.csv")), &maps.sensitivity)?;
        write_map_pgm(Path::new(&format!("{prefix}-sigma.pgm")), &maps.sensitivity)?;
        let hist = sensitivity_histogram(&maps.sensitivity, dc.bins)?;
        let mean_sigma = maps.sensitivity.defined_mean()?;
        let masked = maps.failure_mask().iter().filter(|m| **m).count();
        let hist_lines: Vec<String> = hist
            .counts
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let width = (hist.hi - hist.lo) / hist.counts.len() as f64;
                format!(
                    "  [{:.6}, {:.6}) {c}",
                    hist.lo + i as f64 * width,
                    hist.lo + (i + 1) as f64 * width
                )
            })
            .collect();
        std::fs::write(
            format!("{prefix}-histogram.txt"),
            format!(
                "sensitivity histogram for {tag}\nmean_sigma_um = {mean_sigma}\nexcluded_pixels = {}\n{}\n",
                hist.excluded,
                hist_lines.join("\n")
            ),
        )?;
        summary.push_str(&format!(
            "[{tag}]\nmean_sigma_um = {mean_sigma}\npixels_with_failures = {masked}\n"
        ));
        if let Some(selection) = &maps.selection {
            let distinct: std::collections::BTreeSet<u16> = selection.iter().copied().collect();
            summary.push_str(&format!("bank_members_used = {}\n", distinct.len()));
        }
        summary.push('\n');
        sigma_means.push((tag.clone(), mean_sigma));
        println!("demodulated with {tag}: mean sigma {mean_sigma:.6} um");
    }
    if sigma_means.len() > 1 {
        summary.push_str("[gains]\n");
        let (ref base_tag, base_sigma) = sigma_means[0];
        for (tag, sigma) in &sigma_means[1..] {
            let gain = snr_gain(base_sigma, *sigma)?;
            summary.push_str(&format!("{base_tag}_over_{tag}_db = {gain}\n"));
        }
    }
    let summary_path = PathBuf::from(format!("{}-summary.toml", dc.out_prefix.display()));
    std::fs::write(&summary_path, summary)?;
    write_sidecar(&dc.out_prefix, "demod", cfg)?;
    println!("wrote {}", summary_path.display());
    Ok(())
}
