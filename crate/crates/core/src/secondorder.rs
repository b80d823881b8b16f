//! Ripley's K at a single distance with translation edge correction, closed
//! form pair correlation functions, and the spatial weight field derived from
//! the clustering excess `K(m) - πm²`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointPattern, QuadratureGrid};

/// `K̂(m)` and its clamped excess over the Poisson value `πm²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KEstimate {
    pub m: f64,
    pub k_hat: f64,
    pub poisson_k: f64,
    /// `max(K̂(m) - πm², 0)`.
    pub excess: f64,
}

impl KEstimate {
    pub fn new(m: f64, k_hat: f64) -> Self {
        let poisson_k = PI * m * m;
        KEstimate {
            m,
            k_hat,
            poisson_k,
            excess: (k_hat - poisson_k).max(0.0),
        }
    }
}

/// Intensity-reweighted `K̂(m)` with translation edge correction.
///
/// Sums over ordered pairs of distinct events (each unordered pair counted
/// twice) within distance `m`, each weighted by
/// `1 / [λ̂(x₁) λ̂(x₂) (a - |Δx|)(b - |Δy|)]` for window sides `a`, `b`.
pub fn k_hat(pattern: &PointPattern, intensity_at_events: &[f64], m: f64) -> Result<KEstimate> {
    let w = pattern.window();
    let (a, b) = (w.width(), w.height());
    if !(m > 0.0) {
        return Err(Error::Domain(format!("m must be positive, got {m}")));
    }
    if m >= a.min(b) {
        return Err(Error::Domain(format!(
            "m = {m} must be below the shorter window side {}",
            a.min(b)
        )));
    }
    let pts = pattern.points();
    if intensity_at_events.len() != pts.len() {
        return Err(Error::Contract(format!(
            "{} intensities for {} events",
            intensity_at_events.len(),
            pts.len()
        )));
    }
    if pts.len() < 2 {
        return Err(Error::Estimation(format!(
            "K-function needs at least 2 events, got {}",
            pts.len()
        )));
    }
    if let Some(l) = intensity_at_events.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        return Err(Error::Contract(format!("fitted intensity must be positive, got {l}")));
    }
    let m2 = m * m;
    let mut sum = 0.0;
    for i in 0..pts.len() {
        let (xi, li) = (pts[i], intensity_at_events[i]);
        for j in (i + 1)..pts.len() {
            let dx = (xi[0] - pts[j][0]).abs();
            if dx > m {
                continue;
            }
            let dy = (xi[1] - pts[j][1]).abs();
            if dx * dx + dy * dy <= m2 {
                sum += 2.0 / (li * intensity_at_events[j] * (a - dx) * (b - dy));
            }
        }
    }
    Ok(KEstimate::new(m, sum))
}

/// Closed-form pair correlation functions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "process", rename_all = "snake_case")]
pub enum PairCorrelation {
    Poisson,
    Lgcp { tau2: f64, sigma: f64 },
    Thomas { kappa: f64, sigma: f64 },
}

impl PairCorrelation {
    pub fn g(&self, r: f64) -> f64 {
        match *self {
            PairCorrelation::Poisson => 1.0,
            PairCorrelation::Lgcp { tau2, sigma } => (tau2 * (-r / sigma).exp()).exp(),
            PairCorrelation::Thomas { kappa, sigma } => {
                1.0 + (-r * r / (4.0 * sigma * sigma)).exp() / (4.0 * PI * kappa * sigma * sigma)
            }
        }
    }
}

pub fn pair_correlation(spec: &PairCorrelation, r: f64) -> f64 {
    spec.g(r)
}

/// Per-cell weights `ω / (1 + exp(φ̂) · excess)` normalised to integrate to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightField {
    pub values: Vec<f64>,
    pub omega: f64,
}

pub fn weight_field(phi_hat: &[f64], excess: f64, grid: &QuadratureGrid) -> Result<WeightField> {
    if phi_hat.len() != grid.n_cells() {
        return Err(Error::Contract(format!(
            "{} log-intensities for {} cells",
            phi_hat.len(),
            grid.n_cells()
        )));
    }
    if !(excess >= 0.0) || !excess.is_finite() {
        return Err(Error::Contract(format!("excess must be finite and >= 0, got {excess}")));
    }
    let mut values: Vec<f64> = phi_hat
        .iter()
        .map(|phi| 1.0 / (1.0 + phi.exp() * excess))
        .collect();
    let omega = 1.0 / grid.integrate(&values)?;
    for v in &mut values {
        *v *= omega;
    }
    Ok(WeightField { values, omega })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Lattice, Window};
    use approx::assert_relative_eq;

    #[test]
    fn distant_pair_gives_zero() {
        let p = PointPattern::new(vec![[0.1, 0.1], [0.8, 0.8]], Window::unit()).unwrap();
        let k = k_hat(&p, &[400.0, 400.0], 0.06).unwrap();
        assert_eq!(k.k_hat, 0.0);
        assert_eq!(k.excess, 0.0);
    }

    #[test]
    fn hand_evaluated_pair() {
        let p = PointPattern::new(vec![[0.2, 0.2], [0.2, 0.25]], Window::unit()).unwrap();
        let k = k_hat(&p, &[400.0, 400.0], 0.06).unwrap();
        let want = 2.0 / (400.0f64 * 400.0 * (1.0 - 0.0) * (1.0 - 0.05));
        assert_relative_eq!(k.k_hat, want, max_relative = 1e-12);
        assert_relative_eq!(k.k_hat, 1.3158e-5, max_relative = 1e-4);
    }

    #[test]
    fn k_hat_errors() {
        let w = Window::unit();
        let one = PointPattern::new(vec![[0.5, 0.5]], w).unwrap();
        assert!(matches!(k_hat(&one, &[1.0], 0.1), Err(Error::Estimation(_))));
        let two = PointPattern::new(vec![[0.5, 0.5], [0.4, 0.4]], w).unwrap();
        assert!(matches!(k_hat(&two, &[1.0, 1.0], 1.0), Err(Error::Domain(_))));
        assert!(k_hat(&two, &[1.0, 0.0], 0.1).is_err());
        assert!(k_hat(&two, &[1.0], 0.1).is_err());
    }

    #[test]
    fn closed_form_pcfs() {
        assert_eq!(pair_correlation(&PairCorrelation::Poisson, 0.3), 1.0);
        let lgcp = PairCorrelation::Lgcp {
            tau2: 1.0,
            sigma: 0.02,
        };
        assert_relative_eq!(lgcp.g(0.0), std::f64::consts::E, max_relative = 1e-15);
        let thomas = PairCorrelation::Thomas {
            kappa: 100.0,
            sigma: 0.02,
        };
        assert!(thomas.g(1.0) - 1.0 < 1e-200);
        assert_relative_eq!(
            thomas.g(0.02),
            1.0 + (-0.25f64).exp() / (4.0 * PI * 100.0 * 0.0004),
            max_relative = 1e-12
        );
    }

    #[test]
    fn zero_excess_gives_uniform_weights() {
        let w = Window::new(0.0, 2.0, 0.0, 3.0).unwrap();
        let grid = QuadratureGrid::new(Lattice::new(w, 5, 7).unwrap());
        let phi: Vec<f64> = (0..35).map(|i| i as f64 * 0.1).collect();
        let wf = weight_field(&phi, 0.0, &grid).unwrap();
        assert_relative_eq!(wf.omega, 1.0 / 6.0, max_relative = 1e-12);
        for v in &wf.values {
            assert_relative_eq!(*v, 1.0 / 6.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn constant_phi_weights() {
        let grid = QuadratureGrid::new(Lattice::unit(8).unwrap());
        let phi = vec![400f64.ln(); 64];
        let wf = weight_field(&phi, 0.001, &grid).unwrap();
        assert_relative_eq!(wf.omega, 1.4, max_relative = 1e-12);
        for v in &wf.values {
            assert_relative_eq!(*v, 1.0, max_relative = 1e-12);
        }
        assert_relative_eq!(grid.integrate(&wf.values).unwrap(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn higher_intensity_lower_weight() {
        let grid = QuadratureGrid::new(Lattice::unit(2).unwrap());
        let wf = weight_field(&[1.0, 2.0, 3.0, 4.0], 0.01, &grid).unwrap();
        assert!(wf.values.windows(2).all(|w| w[0] > w[1]));
        assert!(wf.values.iter().all(|v| *v > 0.0 && *v <= wf.omega));
    }
}
