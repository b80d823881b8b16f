use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use ppboost::bench::{intensity_preset, run_scenario, write_results_csv, ProcessSpec, Scenario, Simulator};
use ppboost::geometry::{read_layer_csv, write_layer_csv, CovariateStack, Lattice, PointPattern, QuadratureGrid, Window};
use ppboost::metrics::{iae, kfold_eval, test_poisson_loglik};
use ppboost::secondorder::k_hat;
use ppboost::trainer::{cv_select, fit, fit_with_excess, predict_log_intensity, CvGrid, Ensemble, FitConfig, LossKind};

#[derive(Parser)]
#[command(name = "ppboost", version, about = "Boosted-tree intensity estimation for spatial point patterns")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Process {
    Poisson,
    Lgcp,
    Thomas,
}

#[derive(Clone, Copy, ValueEnum)]
enum Intensity {
    Loglinear2,
    Complex10,
    Nuisance2of10,
}

#[derive(Clone, Copy, ValueEnum)]
enum Loss {
    P,
    Wp,
}

impl From<Loss> for LossKind {
    fn from(l: Loss) -> Self {
        match l {
            Loss::P => LossKind::Poisson,
            Loss::Wp => LossKind::WeightedPoisson,
        }
    }
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Event CSV with an `x,y` header.
    #[arg(long)]
    pattern: PathBuf,
    /// Covariate directory (or its `covariates.json`).
    #[arg(long)]
    covariates: PathBuf,
    #[arg(long, value_enum, default_value = "p")]
    loss: Loss,
    /// K-function distance for the weighted loss.
    #[arg(long)]
    m: Option<f64>,
    #[arg(long, default_value_t = 6)]
    depth: usize,
    #[arg(long = "parallel-trees", default_value_t = 10)]
    parallel_trees: usize,
    #[arg(long = "feature-fraction", default_value_t = 1.0 / 3.0)]
    feature_fraction: f64,
    /// Clustering excess for the weighted loss; estimated from a Poisson fit when absent.
    #[arg(long)]
    excess: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainArgs {
    fn config(&self, iterations: usize, gamma: f64, eta: f64) -> FitConfig {
        FitConfig {
            loss: self.loss.into(),
            iterations,
            gamma,
            eta,
            m: self.m,
            parallel_trees: self.parallel_trees,
            feature_fraction: self.feature_fraction,
            max_depth: self.depth,
            seed: self.seed,
            ..FitConfig::default()
        }
    }

    fn load(&self) -> Result<(CovariateStack, PointPattern, QuadratureGrid)> {
        let stack = load_stack(&self.covariates)?;
        let pattern = PointPattern::load(&self.pattern, *stack.window())
            .with_context(|| format!("reading pattern {}", self.pattern.display()))?;
        let grid = QuadratureGrid::for_stack(&stack, 1)?;
        Ok((stack, pattern, grid))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate covariates and a point pattern.
    Simulate {
        #[arg(long, value_enum, default_value = "poisson")]
        process: Process,
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
        #[arg(long, default_value_t = 1.0)]
        tau2: f64,
        #[arg(long, default_value_t = 0.02)]
        sigma: f64,
        #[arg(long, default_value_t = 100.0)]
        kappa: f64,
        /// Number of covariate fields; defaults to what the intensity needs.
        #[arg(long)]
        covariates: Option<usize>,
        #[arg(long, value_enum, default_value = "loglinear2")]
        intensity: Intensity,
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long = "expected-count", default_value_t = 400.0)]
        expected_count: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "out-pattern")]
        out_pattern: PathBuf,
        #[arg(long = "out-covariates")]
        out_covariates: PathBuf,
        /// Optional grid CSV of the marginal intensity.
        #[arg(long = "out-truth")]
        out_truth: Option<PathBuf>,
    },
    /// Fit an ensemble with fixed hyperparameters.
    Fit {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long = "K", default_value_t = 100)]
        k: usize,
        #[arg(long, default_value_t = 10.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0.1)]
        eta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select hyperparameters by repeated two-fold cross-validation.
    Cv {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long = "K-max", default_value_t = 600)]
        k_max: usize,
        #[arg(long = "gamma-set", value_delimiter = ',', default_values_t = [10.0, 30.0, 50.0])]
        gamma_set: Vec<f64>,
        #[arg(long = "eta-set", value_delimiter = ',', default_values_t = [0.1, 0.05, 0.01])]
        eta_set: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the fitted log-intensity of every covariate cell as a grid CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        covariates: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Intensity-reweighted K-function at one distance.
    Kfn {
        #[arg(long)]
        pattern: PathBuf,
        /// Grid CSV of fitted intensity values, one row of cells per line.
        #[arg(long)]
        intensity: PathBuf,
        /// The intensity grid holds log-intensities (as written by `predict`).
        #[arg(long)]
        log: bool,
        #[arg(long)]
        m: f64,
        /// Window as `x_min,x_max,y_min,y_max`.
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1.0, 0.0, 1.0])]
        window: Vec<f64>,
    },
    /// Run a benchmark scenario and write the results table.
    Bench {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a fitted model on a pattern.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pattern: PathBuf,
        #[arg(long)]
        covariates: PathBuf,
        /// Grid CSV of the true intensity, required for `iae`.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "loglik,iae")]
        metrics: Vec<String>,
        #[arg(long, default_value_t = 4)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_stack(path: &Path) -> Result<CovariateStack> {
    CovariateStack::load_any(path).with_context(|| format!("reading covariates {}", path.display()))
}

fn read_grid(path: &Path, n_cells: usize) -> Result<Vec<f64>> {
    let values = read_layer_csv(File::open(path).with_context(|| format!("opening {}", path.display()))?)?;
    if values.len() != n_cells {
        bail!("{} holds {} values, expected {n_cells}", path.display(), values.len());
    }
    Ok(values)
}

fn write_grid(path: &Path, values: &[f64], nx: usize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_layer_csv(&mut w, values, nx)?;
    w.flush()?;
    Ok(())
}

fn emit(out: Option<&Path>, value: serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(&value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn simulate(cmd: Command) -> Result<()> {
    let Command::Simulate {
        process,
        beta,
        tau2,
        sigma,
        kappa,
        covariates,
        intensity,
        grid,
        expected_count,
        seed,
        out_pattern,
        out_covariates,
        out_truth,
    } = cmd
    else {
        unreachable!()
    };
    let preset = match intensity {
        Intensity::Loglinear2 => "loglinear2",
        Intensity::Complex10 => "complex10",
        Intensity::Nuisance2of10 => "nuisance2of10",
    };
    let (kind, default_p) = intensity_preset(preset)?;
    let process = match process {
        Process::Poisson => ProcessSpec::Poisson,
        Process::Lgcp => ProcessSpec::Lgcp { tau2, sigma },
        Process::Thomas => ProcessSpec::Thomas { kappa, sigma },
    };
    let mut scenario = Scenario::new("simulate", process, kind, covariates.unwrap_or(default_p), beta);
    scenario.grid = grid;
    scenario.expected_count = expected_count;
    scenario.seed = seed;
    let sim = Simulator::new(&scenario)?;
    let rep = sim.replicate(0)?;
    rep.stack.save(&out_covariates)?;
    rep.train.save(&out_pattern)?;
    if let Some(path) = out_truth {
        write_grid(&path, &rep.marginal, grid)?;
    }
    eprintln!("simulated {} events", rep.train.len());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        cmd @ Command::Simulate { .. } => simulate(cmd)?,
        Command::Fit {
            train,
            k,
            gamma,
            eta,
            out,
        } => {
            let (stack, pattern, grid) = train.load()?;
            let config = train.config(k, gamma, eta);
            let model = match (config.loss, train.excess) {
                (LossKind::WeightedPoisson, Some(e)) => fit_with_excess(&pattern, &stack, &grid, &config, e)?,
                _ => fit(&pattern, &stack, &grid, &config)?,
            };
            model.save(&out)?;
        }
        Command::Cv {
            train,
            k_max,
            gamma_set,
            eta_set,
            repeats,
            out,
        } => {
            let (stack, pattern, grid) = train.load()?;
            let cv = CvGrid {
                k_max,
                gammas: gamma_set,
                etas: eta_set,
                repeats,
            };
            let base = train.config(k_max, cv.gammas[0], cv.etas[0]);
            let report = cv_select(&pattern, &stack, &grid, &base, &cv, train.excess, train.seed)?;
            emit(out.as_deref(), serde_json::to_value(&report)?)?;
        }
        Command::Predict {
            model,
            covariates,
            out,
        } => {
            let model = Ensemble::load(&model)?;
            let stack = load_stack(&covariates)?;
            let grid = QuadratureGrid::for_stack(&stack, 1)?;
            let phi = model.predict_grid(&stack, &grid)?;
            write_grid(&out, &phi, stack.lattice().nx)?;
        }
        Command::Kfn {
            pattern,
            intensity,
            log,
            m,
            window,
        } => {
            let [x0, x1, y0, y1] = window[..] else {
                bail!("--window needs four values");
            };
            let window = Window::new(x0, x1, y0, y1)?;
            let pattern = PointPattern::load(&pattern, window)?;
            let mut values = read_layer_csv(File::open(&intensity)?)?;
            let n = (values.len() as f64).sqrt().round() as usize;
            if n * n != values.len() {
                bail!("intensity grid must be square, got {} values", values.len());
            }
            if log {
                values.iter_mut().for_each(|v| *v = v.exp());
            }
            let lattice = Lattice::new(window, n, n)?;
            let at_events = pattern
                .points()
                .iter()
                .map(|p| Ok(values[lattice.cell_of(p[0], p[1])?]))
                .collect::<Result<Vec<_>>>()?;
            emit(None, serde_json::to_value(k_hat(&pattern, &at_events, m)?)?)?;
        }
        Command::Bench {
            scenario,
            replicates,
            seed,
            out,
        } => {
            let mut s = Scenario::load(&scenario)?;
            if let Some(r) = replicates {
                s.replicates = r;
            }
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let result = run_scenario(&s)?;
            if result.failures > 0 {
                eprintln!("{} of {} replicates failed", result.failures, result.replicates);
            }
            write_results_csv(BufWriter::new(File::create(&out)?), &result.rows)?;
        }
        Command::Eval {
            model,
            pattern,
            covariates,
            truth,
            metrics,
            folds,
            seed,
        } => {
            let model = Ensemble::load(&model)?;
            let stack = load_stack(&covariates)?;
            let grid = QuadratureGrid::for_stack(&stack, 1)?;
            let pattern = PointPattern::load(&pattern, *stack.window())?;
            let lambda: Vec<f64> = model.predict_grid(&stack, &grid)?.into_iter().map(f64::exp).collect();
            let mut report = serde_json::Map::new();
            for metric in &metrics {
                let value = match metric.as_str() {
                    "loglik" => {
                        let at_events: Vec<f64> = predict_log_intensity(&model, &stack, pattern.points())?
                            .into_iter()
                            .map(f64::exp)
                            .collect();
                        test_poisson_loglik(&lambda, &at_events, &grid, 1.0)?
                    }
                    "iae" => {
                        let path = truth.as_ref().context("iae needs --truth")?;
                        iae(&read_grid(path, grid.n_cells())?, &lambda, &grid)?
                    }
                    "kfold" => kfold_eval(&pattern, &stack, &grid, folds, &model.config, seed)?,
                    other => bail!("unknown metric '{other}'"),
                };
                report.insert(metric.clone(), json!(value));
            }
            emit(None, report.into())?;
        }
    }
    Ok(())
}
