//! Additive boosting of tree groups for the Poisson and the weighted Poisson
//! loss, ensemble prediction and hyperparameter selection by repeated
//! two-fold cross-validation.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boosting::{leaf_score, FeatureMatrix, RegressionTree, StageData, TreeConfig, TreeGrower};
use crate::error::{Error, Result};
use crate::geometry::{CovariateStack, PointPattern, QuadratureGrid, Window};
use crate::rng::{derive_seed, rng};
use crate::secondorder::{k_hat, weight_field, KEstimate, WeightField};

/// Version written into serialized ensembles.
pub const FORMAT_VERSION: u32 = 1;

/// `|φ̂|` above this aborts training.
pub const DIVERGENCE_BOUND: f64 = 50.0;

const CV_SPLIT: u64 = 0x5350_4c49;
const CV_FIT: u64 = 0x4649_54;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "p", alias = "poisson")]
    Poisson,
    #[serde(rename = "wp", alias = "weighted_poisson")]
    WeightedPoisson,
}

impl LossKind {
    pub fn label(&self) -> &'static str {
        match self {
            LossKind::Poisson => "p",
            LossKind::WeightedPoisson => "wp",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p" | "poisson" => Ok(LossKind::Poisson),
            "wp" | "weighted_poisson" => Ok(LossKind::WeightedPoisson),
            other => Err(Error::Invalid(format!("unknown loss '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub loss: LossKind,
    /// Number of boosting iterations.
    pub iterations: usize,
    pub gamma: f64,
    pub eta: f64,
    /// K-function distance for the weighted loss.
    pub m: Option<f64>,
    pub parallel_trees: usize,
    pub feature_fraction: f64,
    pub max_depth: usize,
    pub min_gain: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            loss: LossKind::Poisson,
            iterations: 100,
            gamma: 10.0,
            eta: 0.1,
            m: None,
            parallel_trees: 10,
            feature_fraction: 1.0 / 3.0,
            max_depth: 6,
            min_gain: 0.0,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Invalid("at least one boosting iteration is required".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Invalid(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.parallel_trees == 0 {
            return Err(Error::Invalid("parallel_trees must be >= 1".into()));
        }
        if self.loss == LossKind::WeightedPoisson && !self.m.is_some_and(|m| m > 0.0) {
            return Err(Error::Invalid("the weighted loss needs m > 0".into()));
        }
        self.tree_config().validate()
    }

    pub fn tree_config(&self) -> TreeConfig {
        TreeConfig {
            max_depth: self.max_depth,
            gamma: self.gamma,
            feature_fraction: self.feature_fraction,
            min_gain: self.min_gain,
        }
    }
}

/// Fitted log-intensity: `intercept + η Σ_k mean(group_k predictions)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub format_version: u32,
    pub intercept: f64,
    pub eta: f64,
    pub parallel_trees: usize,
    pub groups: Vec<Vec<RegressionTree>>,
    pub covariate_names: Vec<String>,
    pub window: Window,
    pub config: FitConfig,
    /// Clustering excess held fixed during a weighted fit.
    pub excess: Option<f64>,
}

impl Ensemble {
    pub fn n_iterations(&self) -> usize {
        self.groups.len()
    }

    fn tree_scale(&self) -> f64 {
        self.eta / self.parallel_trees as f64
    }

    /// Log-intensity at a covariate vector.
    pub fn predict_z(&self, z: &[f64]) -> f64 {
        let scale = self.tree_scale();
        self.intercept
            + self
                .groups
                .iter()
                .flatten()
                .map(|t| scale * t.predict(z))
                .sum::<f64>()
    }

    /// Log-intensity for every row of a column-major covariate table.
    pub fn predict_columns(&self, columns: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_features(columns.len())?;
        let n = columns.first().map_or(0, Vec::len);
        let mut z = vec![0.0; columns.len()];
        Ok((0..n)
            .map(|i| {
                for (zj, col) in z.iter_mut().zip(columns) {
                    *zj = col[i];
                }
                self.predict_z(&z)
            })
            .collect())
    }

    /// Log-intensity at every quadrature cell.
    pub fn predict_grid(&self, stack: &CovariateStack, grid: &QuadratureGrid) -> Result<Vec<f64>> {
        self.predict_columns(&grid.covariate_columns(stack)?)
    }

    fn check_features(&self, p: usize) -> Result<()> {
        let used = self
            .groups
            .iter()
            .flatten()
            .filter_map(RegressionTree::max_feature)
            .max();
        match used {
            Some(j) if j >= p => Err(Error::Contract(format!(
                "model uses covariate {j} but only {p} are available"
            ))),
            _ => Ok(()),
        }
    }

    /// `γ Σ_k Σ_v |θ_kv|` over the effective trees `η/P · f`.
    pub fn penalty(&self, gamma: f64) -> f64 {
        gamma * self.tree_scale() * self.groups.iter().flatten().map(|t| t.l1_norm()).sum::<f64>()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let e: Ensemble = serde_json::from_str(json)?;
        if e.format_version != FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported model format version {}",
                e.format_version
            )));
        }
        if e.parallel_trees == 0 || !e.intercept.is_finite() || !e.eta.is_finite() {
            return Err(Error::Invalid("malformed model".into()));
        }
        Ok(e)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Log-intensity at arbitrary in-window locations.
pub fn predict_log_intensity(
    ensemble: &Ensemble,
    stack: &CovariateStack,
    locations: &[[f64; 2]],
) -> Result<Vec<f64>> {
    ensemble.check_features(stack.n_covariates())?;
    locations
        .iter()
        .map(|&[x, y]| {
            if !ensemble.window.contains(x, y) {
                return Err(Error::Domain(format!("location ({x}, {y}) is outside the window")));
            }
            Ok(ensemble.predict_z(&stack.covariate_at(x, y)?))
        })
        .collect()
}

/// `γΣ|θ| - Σ φ(x) + ∫ exp(φ)`.
pub fn loss_poisson(
    ensemble: &Ensemble,
    pattern: &PointPattern,
    grid: &QuadratureGrid,
    stack: &CovariateStack,
    gamma: f64,
) -> Result<f64> {
    let phi_events = predict_log_intensity(ensemble, stack, pattern.points())?;
    let exp_cells: Vec<f64> = ensemble.predict_grid(stack, grid)?.into_iter().map(f64::exp).collect();
    Ok(ensemble.penalty(gamma) - phi_events.iter().sum::<f64>() + grid.integrate(&exp_cells)?)
}

/// `γΣ|θ| - Σ w(x) φ(x) + ∫ w exp(φ)` with `w` read per quadrature cell.
pub fn loss_weighted(
    ensemble: &Ensemble,
    pattern: &PointPattern,
    grid: &QuadratureGrid,
    stack: &CovariateStack,
    weights: &WeightField,
    gamma: f64,
) -> Result<f64> {
    if weights.values.len() != grid.n_cells() {
        return Err(Error::Contract("weight field does not match the grid".into()));
    }
    let phi_events = predict_log_intensity(ensemble, stack, pattern.points())?;
    let mut data = 0.0;
    for (p, phi) in pattern.points().iter().zip(&phi_events) {
        data += weights.values[grid.cell_of(p[0], p[1])?] * phi;
    }
    let weighted: Vec<f64> = ensemble
        .predict_grid(stack, grid)?
        .into_iter()
        .zip(&weights.values)
        .map(|(phi, w)| w * phi.exp())
        .collect();
    Ok(ensemble.penalty(gamma) - data + grid.integrate(&weighted)?)
}

/// Weight field for the current fit; the trainer recomputes it every
/// iteration of a weighted fit.
pub fn weights_stage(phi_hat: &[f64], excess: f64, grid: &QuadratureGrid) -> Result<WeightField> {
    weight_field(phi_hat, excess, grid)
}

/// Covariates resolved on a quadrature grid, shared by every fit on that grid.
#[derive(Debug, Clone)]
pub struct TrainingData<'a> {
    grid: &'a QuadratureGrid,
    features: FeatureMatrix,
    names: Vec<String>,
}

impl<'a> TrainingData<'a> {
    pub fn new(stack: &CovariateStack, grid: &'a QuadratureGrid) -> Result<Self> {
        Ok(TrainingData {
            grid,
            features: FeatureMatrix::new(grid.covariate_columns(stack)?)?,
            names: stack.names().to_vec(),
        })
    }

    pub fn grid(&self) -> &QuadratureGrid {
        self.grid
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    /// Events per quadrature cell.
    pub fn counts(&self, pattern: &PointPattern) -> Result<Vec<f64>> {
        if pattern.window() != self.grid.window() {
            return Err(Error::Contract("pattern and grid windows differ".into()));
        }
        self.grid.counts(pattern)
    }
}

/// Current fit on the grid, passed to iteration observers.
pub struct FitState<'s> {
    pub iteration: usize,
    pub phi: &'s [f64],
    pub exp_phi: &'s [f64],
}

/// Runs the boosting loop on per-cell event counts. `observe` sees the fit
/// after every iteration. Trees are only stored when `keep_trees` is set.
fn boost(
    data: &TrainingData<'_>,
    counts: &[f64],
    config: &FitConfig,
    excess: f64,
    keep_trees: bool,
    mut observe: impl FnMut(FitState<'_>),
) -> Result<(f64, Vec<Vec<RegressionTree>>)> {
    config.validate()?;
    let grid = data.grid;
    let n = grid.n_cells();
    let total: f64 = counts.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Contract("training pattern has no events".into()));
    }
    let intercept = (total / grid.window().area()).ln();
    let weighted = config.loss == LossKind::WeightedPoisson;
    let tree_cfg = config.tree_config();
    let scale = config.eta / config.parallel_trees as f64;
    let volumes = grid.volumes();

    let mut phi = vec![intercept; n];
    let mut exp_phi = vec![intercept.exp(); n];
    let mut group_sum = vec![0.0; n];
    let mut groups = Vec::with_capacity(if keep_trees { config.iterations } else { 0 });
    let mut grower = TreeGrower::new();
    let mut rng = rng(config.seed);
    let mut stalled = false;

    let mut k = 0;
    while k < config.iterations {
        let (grad, hess) = if weighted {
            let w = weight_field(&phi, excess, grid)?;
            let grad = counts.iter().zip(&w.values).map(|(c, w)| c * w).collect();
            let hess = (0..n).map(|i| w.values[i] * exp_phi[i] * volumes[i]).collect();
            (grad, hess)
        } else {
            let hess = exp_phi.iter().zip(volumes).map(|(e, v)| e * v).collect();
            (counts.to_vec(), hess)
        };
        let stage = StageData::new(&data.features, grad, hess)?;

        // An unchanged fit whose stage admits neither a nonzero root score
        // nor any positive-gain root split can only produce zero trees again.
        if stalled
            && leaf_score(stage.totals(), config.gamma)? == 0.0
            && !TreeGrower::root_has_split(&stage, config.gamma)
        {
            for it in k..config.iterations {
                if keep_trees {
                    groups.push(vec![RegressionTree::leaf(0.0); config.parallel_trees]);
                }
                observe(FitState {
                    iteration: it + 1,
                    phi: &phi,
                    exp_phi: &exp_phi,
                });
            }
            break;
        }

        group_sum.iter_mut().for_each(|s| *s = 0.0);
        let group = grower.grow_group(&stage, &tree_cfg, &mut rng, config.parallel_trees, &mut group_sum);
        stalled = group_sum.iter().all(|s| *s == 0.0);
        if !stalled {
            for i in 0..n {
                phi[i] += scale * group_sum[i];
                if !(phi[i].abs() <= DIVERGENCE_BOUND) {
                    return Err(Error::Diverged {
                        iteration: k + 1,
                        detail: format!(
                            "log-intensity {} in cell {i} (gamma {}, eta {})",
                            phi[i], config.gamma, config.eta
                        ),
                    });
                }
                exp_phi[i] = phi[i].exp();
            }
        }
        if keep_trees {
            groups.push(group);
        }
        k += 1;
        observe(FitState {
            iteration: k,
            phi: &phi,
            exp_phi: &exp_phi,
        });
    }
    Ok((intercept, groups))
}

fn assemble(
    data: &TrainingData<'_>,
    config: &FitConfig,
    excess: Option<f64>,
    intercept: f64,
    groups: Vec<Vec<RegressionTree>>,
) -> Ensemble {
    Ensemble {
        format_version: FORMAT_VERSION,
        intercept,
        eta: config.eta,
        parallel_trees: config.parallel_trees,
        groups,
        covariate_names: data.names.clone(),
        window: *data.grid.window(),
        config: *config,
        excess,
    }
}

/// Fits on precomputed per-cell counts. The weighted loss uses `excess`,
/// which the Poisson loss ignores.
pub fn fit_counts(
    data: &TrainingData<'_>,
    counts: &[f64],
    config: &FitConfig,
    excess: f64,
) -> Result<Ensemble> {
    let (intercept, groups) = boost(data, counts, config, excess, true, |_| {})?;
    let excess = (config.loss == LossKind::WeightedPoisson).then_some(excess);
    Ok(assemble(data, config, excess, intercept, groups))
}

/// `K̂(m)` of `pattern` reweighted by a fitted intensity.
pub fn estimate_excess(
    ensemble: &Ensemble,
    stack: &CovariateStack,
    pattern: &PointPattern,
    m: f64,
) -> Result<KEstimate> {
    let lambda: Vec<f64> = predict_log_intensity(ensemble, stack, pattern.points())?
        .into_iter()
        .map(f64::exp)
        .collect();
    k_hat(pattern, &lambda, m)
}

/// Fits an ensemble. A weighted fit first fits the Poisson loss with the
/// same hyperparameters to fix the clustering excess.
pub fn fit(
    pattern: &PointPattern,
    stack: &CovariateStack,
    grid: &QuadratureGrid,
    config: &FitConfig,
) -> Result<Ensemble> {
    config.validate()?;
    let data = TrainingData::new(stack, grid)?;
    let counts = data.counts(pattern)?;
    match config.loss {
        LossKind::Poisson => fit_counts(&data, &counts, config, 0.0),
        LossKind::WeightedPoisson => {
            let poisson = FitConfig {
                loss: LossKind::Poisson,
                ..*config
            };
            let pilot = fit_counts(&data, &counts, &poisson, 0.0)?;
            let m = config.m.expect("validated");
            let excess = estimate_excess(&pilot, stack, pattern, m)?.excess;
            fit_counts(&data, &counts, config, excess)
        }
    }
}

/// Weighted fit with a given excess.
pub fn fit_with_excess(
    pattern: &PointPattern,
    stack: &CovariateStack,
    grid: &QuadratureGrid,
    config: &FitConfig,
    excess: f64,
) -> Result<Ensemble> {
    let data = TrainingData::new(stack, grid)?;
    let counts = data.counts(pattern)?;
    fit_counts(&data, &counts, config, excess)
}

/// Hyperparameter grid searched by cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvGrid {
    pub k_max: usize,
    pub gammas: Vec<f64>,
    pub etas: Vec<f64>,
    pub repeats: usize,
}

impl Default for CvGrid {
    fn default() -> Self {
        CvGrid {
            k_max: 600,
            gammas: vec![10.0, 30.0, 50.0],
            etas: vec![0.1, 0.05, 0.01],
            repeats: 3,
        }
    }
}

impl CvGrid {
    fn validate(&self) -> Result<()> {
        if self.k_max == 0 || self.gammas.is_empty() || self.etas.is_empty() || self.repeats == 0 {
            return Err(Error::Invalid(format!("empty cross-validation grid {self:?}")));
        }
        Ok(())
    }
}

/// Averaged held-out log-likelihood after each iteration for one `(γ, η)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCurve {
    pub gamma: f64,
    pub eta: f64,
    /// Set when some fold failed to train.
    pub error: Option<String>,
    /// Entry `k - 1` scores `k` iterations.
    pub loglik: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvSelection {
    pub iterations: usize,
    pub gamma: f64,
    pub eta: f64,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub loss: LossKind,
    pub repeats: usize,
    pub excess: Option<f64>,
    pub curves: Vec<CvCurve>,
    pub selected: CvSelection,
}

impl CvReport {
    /// `base` with the selected hyperparameters.
    pub fn apply(&self, base: &FitConfig) -> FitConfig {
        FitConfig {
            iterations: self.selected.iterations,
            gamma: self.selected.gamma,
            eta: self.selected.eta,
            ..*base
        }
    }

    /// The optimum of every valid curve, best first under the selection order.
    pub fn ranked(&self) -> Vec<CvSelection> {
        let mut out: Vec<CvSelection> = Vec::with_capacity(self.curves.len());
        for c in self.curves.iter().filter(|c| c.error.is_none()) {
            let mut best: Option<CvSelection> = None;
            for (k, &ll) in c.loglik.iter().enumerate() {
                let cand = CvSelection {
                    iterations: k + 1,
                    gamma: c.gamma,
                    eta: c.eta,
                    loglik: ll,
                };
                if best.as_ref().is_none_or(|b| preferred(&cand, b)) {
                    best = Some(cand);
                }
            }
            out.extend(best);
        }
        out.sort_by(|a, b| {
            if preferred(a, b) {
                std::cmp::Ordering::Less
            } else if preferred(b, a) {
                std::cmp::Ordering::Greater
            } else {
                std::cmp::Ordering::Equal
            }
        });
        out
    }
}

/// Fits the full data at the cross-validated optimum. A combination whose
/// full-data fit diverges is invalidated like a failed fold, and the next
/// best combination is tried.
pub fn fit_selected(
    data: &TrainingData<'_>,
    counts: &[f64],
    base: &FitConfig,
    report: &CvReport,
    excess: f64,
) -> Result<(Ensemble, CvSelection)> {
    let mut last = None;
    for sel in report.ranked() {
        let config = FitConfig {
            iterations: sel.iterations,
            gamma: sel.gamma,
            eta: sel.eta,
            ..*base
        };
        match fit_counts(data, counts, &config, excess) {
            Ok(model) => return Ok((model, sel)),
            Err(e @ Error::Diverged { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Invalid("no valid hyperparameter combination".into())))
}

/// Splits event indices into two random halves per repeat.
fn cv_halves(n: usize, repeats: usize, seed: u64) -> Vec<[Vec<usize>; 2]> {
    (0..repeats)
        .map(|r| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng(derive_seed(seed, &[CV_SPLIT, r as u64])));
            let b = idx.split_off(n / 2);
            [idx, b]
        })
        .collect()
}

fn cell_counts(cells: &[usize], indices: &[usize], n_cells: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n_cells];
    for &i in indices {
        counts[cells[i]] += 1.0;
    }
    counts
}

/// Whether `(loglik, k, γ, η)` beats the incumbent: higher log-likelihood,
/// then fewer iterations, larger γ, smaller η.
fn preferred(cand: &CvSelection, best: &CvSelection) -> bool {
    if cand.loglik != best.loglik {
        return cand.loglik > best.loglik;
    }
    (cand.iterations, -cand.gamma, cand.eta) < (best.iterations, -best.gamma, best.eta)
}

/// Repeated two-fold cross-validation over `grid`.
///
/// Each repeat splits the events into random halves; each half trains for
/// `k_max` iterations and is scored after every iteration on the other half
/// by `Σ φ̂(x) - ∫ exp(φ̂)` over the full window. Fold scores are summed
/// per repeat and averaged over repeats. A weighted search uses `excess`
/// when given; otherwise it is estimated from a Poisson fit at the Poisson
/// cross-validation optimum.
pub fn cv_select(
    pattern: &PointPattern,
    stack: &CovariateStack,
    grid: &QuadratureGrid,
    base: &FitConfig,
    cv: &CvGrid,
    excess: Option<f64>,
    seed: u64,
) -> Result<CvReport> {
    let data = TrainingData::new(stack, grid)?;
    cv_select_data(&data, stack, pattern, base, cv, excess, seed)
}

/// [`cv_select`] on prepared training data.
pub fn cv_select_data(
    data: &TrainingData<'_>,
    stack: &CovariateStack,
    pattern: &PointPattern,
    base: &FitConfig,
    cv: &CvGrid,
    excess: Option<f64>,
    seed: u64,
) -> Result<CvReport> {
    cv.validate()?;
    if pattern.len() < 4 {
        return Err(Error::Contract(format!(
            "cross-validation needs at least 4 events, got {}",
            pattern.len()
        )));
    }
    let excess = match (base.loss, excess) {
        (LossKind::Poisson, _) => None,
        (LossKind::WeightedPoisson, Some(e)) => Some(e),
        (LossKind::WeightedPoisson, None) => {
            let poisson = FitConfig {
                loss: LossKind::Poisson,
                ..*base
            };
            let report = cv_select_data(data, stack, pattern, &poisson, cv, None, seed)?;
            let counts = data.counts(pattern)?;
            let (pilot, _) = fit_selected(data, &counts, &poisson, &report, 0.0)?;
            let m = base.m.ok_or_else(|| Error::Invalid("the weighted loss needs m".into()))?;
            Some(estimate_excess(&pilot, stack, pattern, m)?.excess)
        }
    };

    let grid = data.grid;
    let cells: Vec<usize> = pattern
        .points()
        .iter()
        .map(|p| grid.cell_of(p[0], p[1]))
        .collect::<Result<_>>()?;
    let halves = cv_halves(pattern.len(), cv.repeats, seed);
    let combos: Vec<(f64, f64)> = cv
        .gammas
        .iter()
        .flat_map(|&g| cv.etas.iter().map(move |&e| (g, e)))
        .collect();
    let tasks: Vec<(usize, usize, usize)> = (0..combos.len())
        .flat_map(|c| (0..cv.repeats).flat_map(move |r| (0..2).map(move |f| (c, r, f))))
        .collect();
    let volumes = grid.volumes();

    let scores: Vec<Result<Vec<f64>>> = tasks
        .par_iter()
        .map(|&(c, r, f)| {
            let (gamma, eta) = combos[c];
            let config = FitConfig {
                iterations: cv.k_max,
                gamma,
                eta,
                seed: derive_seed(seed, &[CV_FIT, r as u64, f as u64]),
                ..*base
            };
            let train = cell_counts(&cells, &halves[r][f], grid.n_cells());
            let test = cell_counts(&cells, &halves[r][1 - f], grid.n_cells());
            let mut curve = Vec::with_capacity(cv.k_max);
            boost(data, &train, &config, excess.unwrap_or(0.0), false, |s| {
                let mut ll = 0.0;
                for i in 0..s.phi.len() {
                    ll += test[i] * s.phi[i] - s.exp_phi[i] * volumes[i];
                }
                curve.push(ll);
            })?;
            Ok(curve)
        })
        .collect();

    let mut curves = Vec::with_capacity(combos.len());
    let mut best: Option<CvSelection> = None;
    let per_combo = cv.repeats * 2;
    for (c, &(gamma, eta)) in combos.iter().enumerate() {
        let chunk = &scores[c * per_combo..(c + 1) * per_combo];
        if let Some(Err(e)) = chunk.iter().find(|s| s.is_err()) {
            curves.push(CvCurve {
                gamma,
                eta,
                error: Some(e.to_string()),
                loglik: Vec::new(),
            });
            continue;
        }
        let mut mean = vec![0.0; cv.k_max];
        for s in chunk.iter().flatten() {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v / cv.repeats as f64;
            }
        }
        for (k, &ll) in mean.iter().enumerate() {
            let cand = CvSelection {
                iterations: k + 1,
                gamma,
                eta,
                loglik: ll,
            };
            if best.as_ref().is_none_or(|b| preferred(&cand, b)) {
                best = Some(cand);
            }
        }
        curves.push(CvCurve {
            gamma,
            eta,
            error: None,
            loglik: mean,
        });
    }
    let selected = best.ok_or_else(|| {
        Error::Invalid(format!(
            "every hyperparameter combination failed: {}",
            curves
                .iter()
                .filter_map(|c| c.error.as_deref())
                .next()
                .unwrap_or("unknown")
        ))
    })?;
    Ok(CvReport {
        loss: base.loss,
        repeats: cv.repeats,
        excess,
        curves,
        selected,
    })
}
