//! Monte Carlo benchmark: simulate covariates and patterns, fit both losses
//! with cross-validated hyperparameters and summarise the test metrics.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CovariateStack, Lattice, PointPattern, QuadratureGrid, Window};
use crate::metrics::{iae, test_loglik_cells};
use crate::rng::derive_seed;
use crate::simulate::{
    calibrate_alpha, sample_lgcp, sample_poisson, sample_thomas, GrfSampler, GrfSpec, IntensityKind,
};
use crate::trainer::{
    cv_select_data, estimate_excess, fit_selected, CvGrid, FitConfig, LossKind, TrainingData,
};

const COVARIATE_STREAM: u64 = 0x434f56;
const TRAIN_STREAM: u64 = 0x545241;
const TEST_STREAM: u64 = 0x544553;
const CV_STREAM: u64 = 0x4356;
const FIT_STREAM: u64 = 0x464954;

/// Point process generating the training and test patterns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProcessSpec {
    Poisson,
    Lgcp { tau2: f64, sigma: f64 },
    Thomas { kappa: f64, sigma: f64 },
}

impl ProcessSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ProcessSpec::Poisson => true,
            ProcessSpec::Lgcp { tau2, sigma } => tau2 >= 0.0 && sigma > 0.0,
            ProcessSpec::Thomas { kappa, sigma } => kappa > 0.0 && sigma > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid process {self:?}")))
        }
    }

    /// Scale of the deterministic intensity so the expected count is `target`.
    pub fn alpha_target(&self, target: f64) -> f64 {
        match *self {
            ProcessSpec::Poisson => target,
            ProcessSpec::Lgcp { tau2, .. } => target * (-tau2 / 2.0).exp(),
            ProcessSpec::Thomas { kappa, .. } => target / kappa,
        }
    }

    /// Ratio of the marginal intensity to the deterministic one.
    pub fn marginal_factor(&self) -> f64 {
        match *self {
            ProcessSpec::Poisson => 1.0,
            ProcessSpec::Lgcp { tau2, .. } => (tau2 / 2.0).exp(),
            ProcessSpec::Thomas { kappa, .. } => kappa,
        }
    }

    pub fn is_clustered(&self) -> bool {
        !matches!(self, ProcessSpec::Poisson)
    }

    /// Default K-function distance: a multiple of the cluster scale, or a
    /// fixed distance for Poisson data.
    pub fn default_m(&self, n_covariates: usize) -> f64 {
        let small = n_covariates <= 2;
        match *self {
            ProcessSpec::Poisson => {
                if small {
                    0.06
                } else {
                    0.04
                }
            }
            ProcessSpec::Lgcp { sigma, .. } | ProcessSpec::Thomas { sigma, .. } => {
                if small {
                    3.0 * sigma
                } else {
                    2.0 * sigma
                }
            }
        }
    }
}

/// Named intensity presets: the form plus the number of simulated covariates.
pub fn intensity_preset(name: &str) -> Result<(IntensityKind, usize)> {
    match name {
        "loglinear2" => Ok((IntensityKind::LogLinear2, 2)),
        "complex10" => Ok((IntensityKind::Complex10, 10)),
        "nuisance2of10" => Ok((IntensityKind::LogLinear2, 10)),
        other => Err(Error::Invalid(format!("unknown intensity preset '{other}'"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    True,
    XgbppP,
    XgbppWp,
}

/// Tree and ensemble settings shared by both losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeSettings {
    pub parallel_trees: usize,
    pub feature_fraction: f64,
    pub max_depth: usize,
}

impl Default for TreeSettings {
    fn default() -> Self {
        let d = FitConfig::default();
        TreeSettings {
            parallel_trees: d.parallel_trees,
            feature_fraction: d.feature_fraction,
            max_depth: d.max_depth,
        }
    }
}

fn default_count() -> f64 {
    400.0
}
fn default_grid() -> usize {
    64
}
fn default_replicates() -> usize {
    100
}
fn default_methods() -> Vec<Method> {
    vec![Method::True, Method::XgbppP, Method::XgbppWp]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub process: ProcessSpec,
    pub intensity: IntensityKind,
    pub covariates: usize,
    pub beta: f64,
    #[serde(default = "default_count")]
    pub expected_count: f64,
    /// K-function distance; a process-dependent preset when absent.
    #[serde(default)]
    pub m: Option<f64>,
    /// Cells per side of the unit-square covariate and quadrature lattice.
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub cv: CvGrid,
    #[serde(default)]
    pub trees: TreeSettings,
}

impl Scenario {
    pub fn new(id: &str, process: ProcessSpec, intensity: IntensityKind, covariates: usize, beta: f64) -> Self {
        Scenario {
            id: id.to_string(),
            process,
            intensity,
            covariates,
            beta,
            expected_count: default_count(),
            m: None,
            grid: default_grid(),
            replicates: default_replicates(),
            seed: 0,
            methods: default_methods(),
            cv: CvGrid::default(),
            trees: TreeSettings::default(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s: Scenario = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.process.validate()?;
        if self.covariates < self.intensity.required_covariates() {
            return Err(Error::Invalid(format!(
                "{:?} needs {} covariates, scenario has {}",
                self.intensity,
                self.intensity.required_covariates(),
                self.covariates
            )));
        }
        if self.grid == 0 || self.replicates == 0 || !(self.expected_count > 0.0) {
            return Err(Error::Invalid("grid, replicates and expected count must be positive".into()));
        }
        if self.m.is_some_and(|m| !(m > 0.0 && m < 1.0)) {
            return Err(Error::Invalid("m must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn m(&self) -> f64 {
        self.m.unwrap_or_else(|| self.process.default_m(self.covariates))
    }

    fn fit_config(&self, loss: LossKind) -> FitConfig {
        FitConfig {
            loss,
            m: Some(self.m()),
            parallel_trees: self.trees.parallel_trees,
            feature_fraction: self.trees.feature_fraction,
            max_depth: self.trees.max_depth,
            ..FitConfig::default()
        }
    }
}

/// One simulated replicate: covariates, training and test patterns and the
/// intensities they were drawn from.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub stack: CovariateStack,
    pub train: PointPattern,
    pub test: PointPattern,
    /// Marginal intensity `E Λ` per cell.
    pub marginal: Vec<f64>,
    /// Realised random intensity of the training pattern (LGCP only).
    pub train_realized: Option<Vec<f64>>,
    /// Realised random intensity of the test pattern (LGCP only).
    pub test_realized: Option<Vec<f64>>,
}

/// Cached Gaussian field samplers for a scenario's grid.
pub struct Simulator {
    scenario: Scenario,
    grid: QuadratureGrid,
    covariate: GrfSampler,
    noise: Option<GrfSampler>,
}

impl Simulator {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        let grid = QuadratureGrid::new(Lattice::new(Window::unit(), scenario.grid, scenario.grid)?);
        let covariate = GrfSampler::new(&GrfSpec::covariate(), &grid)?;
        let noise = match scenario.process {
            ProcessSpec::Lgcp { tau2, sigma } => {
                Some(GrfSampler::new(&GrfSpec::lgcp_noise(tau2, sigma), &grid)?)
            }
            _ => None,
        };
        Ok(Simulator {
            scenario: scenario.clone(),
            grid,
            covariate,
            noise,
        })
    }

    pub fn grid(&self) -> &QuadratureGrid {
        &self.grid
    }

    /// Covariates and deterministic intensity for a replicate seed.
    pub fn covariates(&self, seed: u64) -> Result<(CovariateStack, Vec<f64>)> {
        let s = &self.scenario;
        let layers: Vec<Vec<f64>> = (0..s.covariates)
            .map(|j| self.covariate.sample_seeded(derive_seed(seed, &[COVARIATE_STREAM, j as u64])))
            .collect();
        let alpha = calibrate_alpha(
            s.intensity,
            s.beta,
            &layers,
            s.process.alpha_target(s.expected_count),
            &self.grid,
        )?;
        let base = s
            .intensity
            .log_shape_cells(s.beta, &layers)?
            .into_iter()
            .map(|v| alpha * v.exp())
            .collect();
        Ok((CovariateStack::from_layers(*self.grid.lattice(), layers)?, base))
    }

    /// A pattern and, for LGCP, its realised intensity.
    pub fn pattern(&self, base: &[f64], seed: u64) -> Result<(PointPattern, Option<Vec<f64>>)> {
        match self.scenario.process {
            ProcessSpec::Poisson => Ok((sample_poisson(base, &self.grid, seed)?, None)),
            ProcessSpec::Lgcp { .. } => {
                let noise = self.noise.as_ref().expect("LGCP sampler");
                let s = sample_lgcp(base, noise, &self.grid, seed)?;
                Ok((s.pattern, Some(s.intensity)))
            }
            ProcessSpec::Thomas { kappa, sigma } => {
                Ok((sample_thomas(kappa, sigma, base, &self.grid, seed)?, None))
            }
        }
    }

    pub fn replicate(&self, index: usize) -> Result<Replicate> {
        let seed = derive_seed(self.scenario.seed, &[index as u64]);
        let (stack, base) = self.covariates(seed)?;
        let (train, train_realized) = self.pattern(&base, derive_seed(seed, &[TRAIN_STREAM]))?;
        let (test, test_realized) = self.pattern(&base, derive_seed(seed, &[TEST_STREAM]))?;
        let factor = self.scenario.process.marginal_factor();
        Ok(Replicate {
            stack,
            train,
            test,
            marginal: base.iter().map(|b| b * factor).collect(),
            train_realized,
            test_realized,
        })
    }
}

/// Metric values of one replicate, in insertion order.
pub type ReplicateMetrics = Vec<(String, String, f64)>;

fn fit_and_score(
    sim: &Simulator,
    rep: &Replicate,
    data: &TrainingData<'_>,
    loss: LossKind,
    excess: Option<f64>,
    seed: u64,
    out: &mut ReplicateMetrics,
) -> Result<crate::trainer::Ensemble> {
    let s = &sim.scenario;
    let base = FitConfig {
        seed: derive_seed(seed, &[FIT_STREAM, loss as u64]),
        ..s.fit_config(loss)
    };
    let report = cv_select_data(
        data,
        &rep.stack,
        &rep.train,
        &base,
        &s.cv,
        excess,
        derive_seed(seed, &[CV_STREAM, loss as u64]),
    )?;
    let counts = data.counts(&rep.train)?;
    let (model, _) = fit_selected(data, &counts, &base, &report, excess.unwrap_or(0.0))?;
    let lambda: Vec<f64> = model.predict_grid(&rep.stack, &sim.grid)?.into_iter().map(f64::exp).collect();
    let method = match loss {
        LossKind::Poisson => "xgbpp_p",
        LossKind::WeightedPoisson => "xgbpp_wp",
    };
    out.push((method.into(), "test_loglik".into(), test_loglik_cells(&lambda, &rep.test, &sim.grid, 1.0)?));
    out.push((method.into(), "iae".into(), iae(&rep.marginal, &lambda, &sim.grid)?));
    if let Some(real) = &rep.train_realized {
        out.push((method.into(), "iae_realized".into(), iae(real, &lambda, &sim.grid)?));
    }
    Ok(model)
}

/// Runs one replicate and returns its metrics.
pub fn run_replicate(sim: &Simulator, index: usize) -> Result<ReplicateMetrics> {
    let s = &sim.scenario;
    let rep = sim.replicate(index)?;
    let seed = derive_seed(s.seed, &[index as u64]);
    let mut out = ReplicateMetrics::new();
    if s.methods.contains(&Method::True) {
        out.push((
            "true".into(),
            "test_loglik".into(),
            test_loglik_cells(&rep.marginal, &rep.test, &sim.grid, 1.0)?,
        ));
        if let Some(real) = &rep.test_realized {
            out.push((
                "true_realized".into(),
                "test_loglik".into(),
                test_loglik_cells(real, &rep.test, &sim.grid, 1.0)?,
            ));
        }
    }
    let want_p = s.methods.contains(&Method::XgbppP);
    let want_wp = s.methods.contains(&Method::XgbppWp);
    if !(want_p || want_wp) {
        return Ok(out);
    }
    let data = TrainingData::new(&rep.stack, &sim.grid)?;
    let mut p_metrics = ReplicateMetrics::new();
    let pilot = fit_and_score(sim, &rep, &data, LossKind::Poisson, None, seed, &mut p_metrics)?;
    if want_p {
        out.extend(p_metrics);
    }
    if want_wp {
        let excess = match estimate_excess(&pilot, &rep.stack, &rep.train, s.m()) {
            Ok(k) => k.excess,
            Err(Error::Estimation(_)) => 0.0,
            Err(e) => return Err(e),
        };
        fit_and_score(sim, &rep, &data, LossKind::WeightedPoisson, Some(excess), seed, &mut out)?;
    }
    Ok(out)
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario_id: String,
    pub method: String,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; absent for a single replicate.
    pub std: Option<f64>,
    pub n_replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub scenario_id: String,
    pub replicates: usize,
    pub failures: usize,
    pub failure_messages: Vec<String>,
    pub rows: Vec<ResultRow>,
}

impl BenchResult {
    pub fn row(&self, method: &str, metric: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method && r.metric == metric)
    }

    pub fn mean(&self, method: &str, metric: &str) -> Option<f64> {
        self.row(method, metric).map(|r| r.mean)
    }
}

/// Mean and `n - 1` standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// Aggregates per-replicate metrics. More than 5% failed replicates fail
/// the run.
pub fn summarize(scenario_id: &str, outcomes: Vec<Result<ReplicateMetrics>>) -> Result<BenchResult> {
    let replicates = outcomes.len();
    let mut order: Vec<(String, String)> = Vec::new();
    let mut values: HashMap<(String, String), Vec<f64>> = HashMap::new();
    let mut failure_messages = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(metrics) => {
                for (method, metric, v) in metrics {
                    let key = (method, metric);
                    if !values.contains_key(&key) {
                        order.push(key.clone());
                    }
                    values.entry(key).or_default().push(v);
                }
            }
            Err(e) => failure_messages.push(e.to_string()),
        }
    }
    let failures = failure_messages.len();
    if failures * 20 > replicates {
        return Err(Error::Evaluation(format!(
            "{failures} of {replicates} replicates failed; first: {}",
            failure_messages[0]
        )));
    }
    let rows = order
        .into_iter()
        .map(|key| {
            let v = &values[&key];
            let (mean, std) = mean_std(v);
            ResultRow {
                scenario_id: scenario_id.to_string(),
                method: key.0,
                metric: key.1,
                mean,
                std,
                n_replicates: v.len(),
            }
        })
        .collect();
    Ok(BenchResult {
        scenario_id: scenario_id.to_string(),
        replicates,
        failures,
        failure_messages,
        rows,
    })
}

/// Runs every replicate of a scenario in parallel.
pub fn run_scenario(scenario: &Scenario) -> Result<BenchResult> {
    let sim = Simulator::new(scenario)?;
    let outcomes: Vec<Result<ReplicateMetrics>> = (0..scenario.replicates)
        .into_par_iter()
        .map(|i| run_replicate(&sim, i))
        .collect();
    summarize(&scenario.id, outcomes)
}

/// Writes results as `scenario_id,method,metric,mean,std,n_replicates`;
/// an undefined standard deviation is written as `NA`.
pub fn write_results_csv<W: Write>(writer: W, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["scenario_id", "method", "metric", "mean", "std", "n_replicates"])?;
    for r in rows {
        w.write_record([
            r.scenario_id.clone(),
            r.method.clone(),
            r.metric.clone(),
            r.mean.to_string(),
            r.std.map_or_else(|| "NA".to_string(), |s| s.to_string()),
            r.n_replicates.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn std_uses_n_minus_one() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert_relative_eq!(s.unwrap(), (5.0f64 / 3.0).sqrt(), max_relative = 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, None));
    }

    #[test]
    fn single_replicate_writes_na() {
        let r = summarize("s", vec![Ok(vec![("true".into(), "test_loglik".into(), 5.0)])]).unwrap();
        assert_eq!(r.rows[0].mean, 5.0);
        assert_eq!(r.rows[0].std, None);
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &r.rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "scenario_id,method,metric,mean,std,n_replicates\ns,true,test_loglik,5,NA,1\n"
        );
    }

    #[test]
    fn too_many_failures_fail_the_run() {
        let ok = || Ok(vec![("true".into(), "test_loglik".into(), 1.0)]);
        let mut outcomes: Vec<Result<ReplicateMetrics>> = (0..19).map(|_| ok()).collect();
        outcomes.push(Err(Error::Simulation("x".into())));
        let r = summarize("s", outcomes).unwrap();
        assert_eq!((r.failures, r.rows[0].n_replicates), (1, 19));
        let mut outcomes: Vec<Result<ReplicateMetrics>> = (0..18).map(|_| ok()).collect();
        outcomes.push(Err(Error::Simulation("x".into())));
        outcomes.push(Err(Error::Simulation("y".into())));
        assert!(summarize("s", outcomes).is_err());
    }

    #[test]
    fn presets() {
        assert_eq!(intensity_preset("nuisance2of10").unwrap(), (IntensityKind::LogLinear2, 10));
        assert!(intensity_preset("cubic").is_err());
        assert_eq!(ProcessSpec::Poisson.default_m(2), 0.06);
        assert_relative_eq!(
            ProcessSpec::Lgcp { tau2: 2.0, sigma: 0.04 }.default_m(2),
            0.12,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            ProcessSpec::Thomas { kappa: 100.0, sigma: 0.02 }.default_m(10),
            0.04,
            max_relative = 1e-12
        );
    }

    #[test]
    fn scenario_json_defaults() {
        let s: Scenario = serde_json::from_str(
            r#"{"id":"t","process":{"kind":"thomas","kappa":100,"sigma":0.02},
                "intensity":"complex10","covariates":10,"beta":1.0}"#,
        )
        .unwrap();
        assert_eq!(s.grid, 64);
        assert_eq!(s.replicates, 100);
        assert_eq!(s.cv, CvGrid::default());
        assert!(s.validate().is_ok());
        let bad = Scenario {
            covariates: 2,
            ..s
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn truth_only_scenario_is_reproducible() {
        let mut s = Scenario::new("p", ProcessSpec::Poisson, IntensityKind::LogLinear2, 2, 0.5);
        s.grid = 16;
        s.replicates = 3;
        s.methods = vec![Method::True];
        let a = run_scenario(&s).unwrap();
        let b = run_scenario(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 1);
    }
}
