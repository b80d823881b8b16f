//! Held-out Poisson log-likelihood, integrated absolute error and the k-fold
//! cross-validated log-likelihood of a fitting configuration.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::geometry::{CovariateStack, PointPattern, QuadratureGrid};
use crate::rng::rng;
use crate::trainer::{fit, predict_log_intensity, FitConfig};

/// `Σ_x log(thin · λ̂(x)) - thin · ∫ λ̂`.
pub fn test_poisson_loglik(
    lambda_cells: &[f64],
    lambda_events: &[f64],
    grid: &QuadratureGrid,
    thin: f64,
) -> Result<f64> {
    if !(thin > 0.0) || !thin.is_finite() {
        return Err(Error::Metric(format!("thinning factor must be positive, got {thin}")));
    }
    if let Some(l) = lambda_events.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        return Err(Error::Metric(format!("fitted intensity at a test event is {l}")));
    }
    let data: f64 = lambda_events.iter().map(|l| (thin * l).ln()).sum();
    Ok(data - thin * grid.integrate(lambda_cells)?)
}

/// [`test_poisson_loglik`] with event intensities read from the cell that
/// contains each event.
pub fn test_loglik_cells(
    lambda_cells: &[f64],
    pattern: &PointPattern,
    grid: &QuadratureGrid,
    thin: f64,
) -> Result<f64> {
    if lambda_cells.len() != grid.n_cells() {
        return Err(Error::Contract(format!(
            "{} intensities for {} cells",
            lambda_cells.len(),
            grid.n_cells()
        )));
    }
    let at_events = pattern
        .points()
        .iter()
        .map(|p| Ok(lambda_cells[grid.cell_of(p[0], p[1])?]))
        .collect::<Result<Vec<_>>>()?;
    test_poisson_loglik(lambda_cells, &at_events, grid, thin)
}

/// `∫ |λ - λ̂|`.
pub fn iae(lambda_true: &[f64], lambda_hat: &[f64], grid: &QuadratureGrid) -> Result<f64> {
    if lambda_true.len() != lambda_hat.len() {
        return Err(Error::Contract(format!(
            "intensity fields have {} and {} cells",
            lambda_true.len(),
            lambda_hat.len()
        )));
    }
    let diff: Vec<f64> = lambda_true
        .iter()
        .zip(lambda_hat)
        .map(|(a, b)| (a - b).abs())
        .collect();
    grid.integrate(&diff)
}

/// Assigns shuffled event indices to `folds` groups in turn.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(seed));
    let mut out = vec![Vec::with_capacity(n / folds.max(1) + 1); folds];
    for (k, i) in idx.into_iter().enumerate() {
        out[k % folds].push(i);
    }
    out
}

/// Sum over folds of the held-out log-likelihood of a model fitted on the
/// remaining folds, scored with thinning factor `1 / (folds - 1)`.
pub fn kfold_eval(
    pattern: &PointPattern,
    stack: &CovariateStack,
    grid: &QuadratureGrid,
    folds: usize,
    config: &FitConfig,
    seed: u64,
) -> Result<f64> {
    if folds < 2 {
        return Err(Error::Evaluation(format!("need at least 2 folds, got {folds}")));
    }
    if pattern.len() < folds {
        return Err(Error::Evaluation(format!(
            "{} events cannot fill {folds} folds",
            pattern.len()
        )));
    }
    let assignment = fold_assignment(pattern.len(), folds, seed);
    let thin = 1.0 / (folds - 1) as f64;
    let mut total = 0.0;
    for (f, test_idx) in assignment.iter().enumerate() {
        let train_idx: Vec<usize> = assignment
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, idx)| idx.iter().copied())
            .collect();
        if train_idx.is_empty() {
            return Err(Error::Evaluation(format!("fold {f} has no training events")));
        }
        let model = fit(&pattern.select(&train_idx), stack, grid, config)?;
        let cells: Vec<f64> = model.predict_grid(stack, grid)?.into_iter().map(f64::exp).collect();
        let test = pattern.select(test_idx);
        let at_events: Vec<f64> = predict_log_intensity(&model, stack, test.points())?
            .into_iter()
            .map(f64::exp)
            .collect();
        total += test_poisson_loglik(&cells, &at_events, grid, thin)?;
    }
    Ok(total)
}
