//! `dynloss`: train, ablate, surface, gradcheck and saddle commands.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynloss_core::gradcheck::{run_checks, Check};
use dynloss_core::harness::{self, Axis, ExperimentConfig, GridSpec, SurfaceAxes};
use dynloss_core::saddle::{SweepConfig, MARGIN_TOLERANCE};
use dynloss_core::{Error, ParamSet, Result};

#[derive(Parser, Debug)]
#[command(
    name = "dynloss",
    version,
    about = "Learned loss networks trained by a teacher through unrolled SGD"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "DYNLOSS_OUT", default_value = "runs")]
    out: PathBuf,
    /// `key=value` override, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// One full run: record.csv, checkpoints, manifest.json.
    Train,
    /// One run per value and repeat along an ablation axis.
    Ablate {
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// DLN values over a 2-D grid for every snapshot of a run, or one checkpoint.
    Surface {
        /// Training output directory holding `dln_epoch*.ckpt`; defaults to `--out`.
        #[arg(long)]
        run: Option<PathBuf>,
        /// A single DLN checkpoint instead of a run directory.
        #[arg(long, conflicts_with = "run")]
        checkpoint: Option<PathBuf>,
        /// Epoch tag written with `--checkpoint`.
        #[arg(long, default_value_t = 0)]
        epoch: usize,
        /// `scores`: student scores through the DLN's input transform, over
        /// [-3, 3]² by default. `inputs`: the network's own input domain.
        #[arg(long, default_value = "scores")]
        axes: String,
        #[arg(long, allow_hyphen_values = true)]
        min: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        max: Option<f64>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Finite-difference checks of every gradient path.
    Gradcheck {
        /// Perturb the analytic side of one check.
        #[arg(long, value_name = "CHECK")]
        corrupt: Option<String>,
    },
    /// Random strict-saddle quadratics under alternating block descent.
    Saddle {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 10)]
        controls: usize,
        #[arg(long, default_value_t = 10)]
        starts: usize,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = common.seed {
        cfg.stage.seed = seed;
    }
    Ok(cfg)
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let outcome = harness::train(cfg, out)?;
    let o = &outcome.output;
    println!(
        "train: {} stages, {} SGD steps, final test accuracy {:.4}, {} skipped hypergradients",
        o.record.rows.len(),
        o.sgd_steps,
        o.record.final_accuracy().unwrap_or(f64::NAN),
        o.skipped
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

fn ablate(cfg: &ExperimentConfig, out: &Path, axis: &str, values: &[String], repeats: usize) -> Result<()> {
    let axis: Axis = axis.parse()?;
    let (_, summaries) = harness::ablate(cfg, axis, values, repeats, out)?;
    println!(
        "{:>12} {:>6} {:>6} {:>10} {:>10} {:>14}",
        axis, "runs", "failed", "median_acc", "mean_acc", "iter_ms"
    );
    for s in summaries {
        println!(
            "{:>12} {:>6} {:>6} {:>10.4} {:>10.4} {:>14.1}",
            s.value, s.runs, s.failed, s.median_acc, s.mean_acc, s.median_iter_ms
        );
    }
    Ok(())
}

fn surface(
    cfg: &ExperimentConfig,
    out: &Path,
    run: Option<&Path>,
    checkpoint: Option<&Path>,
    epoch: usize,
    axes: &str,
    grid: (Option<f64>, Option<f64>, Option<usize>),
) -> Result<()> {
    let dln = cfg.dln();
    let base = match axes.parse()? {
        SurfaceAxes::Scores => GridSpec::scores(),
        SurfaceAxes::Inputs => GridSpec::domain(cfg.dln_input),
    };
    let spec = GridSpec {
        min: grid.0.unwrap_or(base.min),
        max: grid.1.unwrap_or(base.max),
        points: grid.2.unwrap_or(base.points),
        axes: base.axes,
    };
    let grids = match checkpoint {
        Some(path) => {
            let g = harness::surface_grid(&dln, &ParamSet::load(path)?, epoch, spec)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let file = out.join(format!("surface_epoch{epoch}.json"));
            std::fs::write(&file, g.to_json()).map_err(|e| Error::io(&file, e))?;
            vec![g]
        }
        None => harness::export_surfaces(&dln, run.unwrap_or(out), spec, out)?,
    };
    for g in grids {
        println!(
            "surface epoch {}: {}x{} grid, finite {}, non-increasing rows {:.3}",
            g.epoch,
            g.x1.len(),
            g.x0.len(),
            g.is_finite(),
            g.non_increasing_rows()
        );
    }
    Ok(())
}

/// Returns whether every check passed.
fn gradcheck(cfg: &ExperimentConfig, corrupt: Option<&str>) -> Result<bool> {
    let corrupt = corrupt.map(str::parse::<Check>).transpose()?;
    let results = run_checks(cfg.stage.seed, corrupt)?;
    println!(
        "{:<10} {:>7} {:>12} {:>10}  status",
        "check", "params", "rel_error", "tolerance"
    );
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!(
            "{:<10} {:>7} {:>12.3e} {:>10.0e}  {status}",
            r.check.name(),
            r.params,
            r.error,
            r.tolerance
        );
        if !r.passed() {
            failed.push(r.check.name());
        }
    }
    if !failed.is_empty() {
        eprintln!("gradcheck failed: {}", failed.join(", "));
    }
    Ok(failed.is_empty())
}

fn saddle(cfg: &ExperimentConfig, out: &Path, instances: usize, controls: usize, starts: usize) -> Result<()> {
    let sweep = SweepConfig {
        instances,
        controls,
        starts,
        seed: cfg.stage.seed,
        ..SweepConfig::default()
    };
    let s = harness::saddle(&sweep, out)?;
    println!(
        "saddle: {}/{} strict-saddle instances satisfy the bound (pass rate {:.1}%, margin tolerance {:e}), \
         min margin {:.3e}, escape rate {:.3}, worst growth error {:.2e}, {} complex spectra, {} controls excluded",
        s.passed,
        s.saddles,
        100.0 * s.passed as f64 / s.saddles.max(1) as f64,
        MARGIN_TOLERANCE,
        s.min_margin,
        s.escape_rate,
        s.worst_growth_error,
        s.complex_instances,
        s.rows.len() - s.saddles
    );
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli.common)?;
    let out = cli.common.out.as_path();
    match cli.command {
        Command::Train => train(&cfg, out)?,
        Command::Ablate { axis, values, repeats } => ablate(&cfg, out, &axis, &values, repeats)?,
        Command::Surface {
            run,
            checkpoint,
            epoch,
            axes,
            min,
            max,
            points,
        } => surface(
            &cfg,
            out,
            run.as_deref(),
            checkpoint.as_deref(),
            epoch,
            &axes,
            (min, max, points),
        )?,
        Command::Gradcheck { corrupt } => return gradcheck(&cfg, corrupt.as_deref()),
        Command::Saddle {
            instances,
            controls,
            starts,
        } => saddle(&cfg, out, instances, controls, starts)?,
    }
    Ok(true)
}

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
