//! Synthetic covariate fields and point patterns: Gaussian random fields on
//! the quadrature lattice, inhomogeneous Poisson, log-Gaussian Cox and Thomas
//! cluster processes.

use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointPattern, QuadratureGrid};
use crate::rng::{derive_seed, rng, Rng};

const NOISE_STREAM: u64 = 0x4e4f495345;
const GRF_JITTER: f64 = 1e-10;

/// Correlation length of an exponential covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrfScale {
    /// `exp(-rate · r)`.
    Rate(f64),
    /// `exp(-r / range)`.
    Range(f64),
}

/// Zero-mean isotropic Gaussian field with exponential covariance
/// `variance · exp(-r / range)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrfSpec {
    pub variance: f64,
    pub scale: GrfScale,
}

impl GrfSpec {
    /// Unit-variance covariate field with covariance `exp(-10 r)`.
    pub fn covariate() -> Self {
        GrfSpec {
            variance: 1.0,
            scale: GrfScale::Rate(10.0),
        }
    }

    /// LGCP noise `τ² exp(-r/σ)`.
    pub fn lgcp_noise(tau2: f64, sigma: f64) -> Self {
        GrfSpec {
            variance: tau2,
            scale: GrfScale::Range(sigma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scale_ok = match self.scale {
            GrfScale::Rate(v) | GrfScale::Range(v) => v > 0.0 && v.is_finite(),
        };
        if !scale_ok || !(self.variance >= 0.0) || !self.variance.is_finite() {
            return Err(Error::Contract(format!("invalid GRF spec {self:?}")));
        }
        Ok(())
    }

    pub fn covariance(&self, r: f64) -> f64 {
        match self.scale {
            GrfScale::Rate(rate) => self.variance * (-rate * r).exp(),
            GrfScale::Range(range) => self.variance * (-r / range).exp(),
        }
    }
}

/// Cholesky-factored covariance of a GRF at fixed locations; draws are
/// `L ε` with `ε` standard normal.
#[derive(Debug, Clone)]
pub struct GrfSampler {
    n: usize,
    /// Lower triangle, row-packed: row `i` starts at `i(i+1)/2`.
    factor: Option<Vec<f64>>,
}

impl GrfSampler {
    pub fn new(spec: &GrfSpec, grid: &QuadratureGrid) -> Result<Self> {
        Self::at_locations(spec, grid.centers())
    }

    pub fn at_locations(spec: &GrfSpec, locations: &[[f64; 2]]) -> Result<Self> {
        spec.validate()?;
        let n = locations.len();
        if n == 0 {
            return Err(Error::Contract("GRF needs at least one location".into()));
        }
        if spec.variance == 0.0 {
            return Ok(GrfSampler { n, factor: None });
        }
        let mut l = vec![0.0; n * (n + 1) / 2];
        for i in 0..n {
            let row_i = i * (i + 1) / 2;
            for j in 0..=i {
                let row_j = j * (j + 1) / 2;
                let r = dist(locations[i], locations[j]);
                let mut a = spec.covariance(r);
                if i == j {
                    a += GRF_JITTER * spec.variance;
                }
                let s = a - dot(&l[row_i..row_i + j], &l[row_j..row_j + j]);
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::Simulation(format!(
                            "covariance not positive definite at pivot {i} (s = {s:e})"
                        )));
                    }
                    l[row_i + i] = s.sqrt();
                } else {
                    l[row_i + j] = s / l[row_j + j];
                }
            }
        }
        Ok(GrfSampler { n, factor: Some(l) })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let Some(l) = &self.factor else {
            return vec![0.0; self.n];
        };
        let eps: Vec<f64> = (0..self.n).map(|_| rng.sample(StandardNormal)).collect();
        (0..self.n)
            .map(|i| {
                let row = i * (i + 1) / 2;
                dot(&l[row..=row + i], &eps[..=i])
            })
            .collect()
    }

    pub fn sample_seeded(&self, seed: u64) -> Vec<f64> {
        self.sample(&mut rng(seed))
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Dot product with four independent accumulators so the loop vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// One GRF draw on the grid cell centres.
pub fn sample_grf(spec: &GrfSpec, grid: &QuadratureGrid, seed: u64) -> Result<Vec<f64>> {
    Ok(GrfSampler::new(spec, grid)?.sample_seeded(seed))
}

/// Functional form of the log-intensity in the covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityKind {
    /// `β z₁ + β z₂`.
    #[serde(rename = "loglinear2")]
    LogLinear2,
    /// `β {z₁ + ½ z₂z₃ + ⅙ exp(z₄) + ½ z₅² + 3 sin(z₆)}`.
    #[serde(rename = "complex10")]
    Complex10,
}

impl IntensityKind {
    /// Minimum number of covariates the form reads.
    pub fn required_covariates(&self) -> usize {
        match self {
            IntensityKind::LogLinear2 => 2,
            IntensityKind::Complex10 => 6,
        }
    }

    /// Log-intensity without the `log α` offset.
    pub fn log_shape(&self, beta: f64, z: &[f64]) -> f64 {
        match self {
            IntensityKind::LogLinear2 => beta * (z[0] + z[1]),
            IntensityKind::Complex10 => {
                beta * (z[0]
                    + 0.5 * z[1] * z[2]
                    + z[3].exp() / 6.0
                    + 0.5 * z[4] * z[4]
                    + 3.0 * z[5].sin())
            }
        }
    }

    /// `log_shape` at every cell, given covariate columns.
    pub fn log_shape_cells(&self, beta: f64, columns: &[Vec<f64>]) -> Result<Vec<f64>> {
        if columns.len() < self.required_covariates() {
            return Err(Error::Contract(format!(
                "{self:?} needs {} covariates, got {}",
                self.required_covariates(),
                columns.len()
            )));
        }
        let n = columns[0].len();
        let mut z = vec![0.0; columns.len()];
        Ok((0..n)
            .map(|i| {
                for (zj, col) in z.iter_mut().zip(columns) {
                    *zj = col[i];
                }
                self.log_shape(beta, &z)
            })
            .collect())
    }
}

/// Deterministic intensity `α exp(shape(z))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityModel {
    pub kind: IntensityKind,
    pub beta: f64,
    pub alpha: f64,
}

impl IntensityModel {
    pub fn intensity_cells(&self, columns: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self
            .kind
            .log_shape_cells(self.beta, columns)?
            .into_iter()
            .map(|s| self.alpha * s.exp())
            .collect())
    }

    /// Calibrates `α` so the intensity integrates to `target_count`.
    pub fn calibrated(
        kind: IntensityKind,
        beta: f64,
        columns: &[Vec<f64>],
        target_count: f64,
        grid: &QuadratureGrid,
    ) -> Result<Self> {
        let alpha = calibrate_alpha(kind, beta, columns, target_count, grid)?;
        Ok(IntensityModel { kind, beta, alpha })
    }
}

/// `α = target / ∫ exp(shape(z(s))) ds`.
pub fn calibrate_alpha(
    kind: IntensityKind,
    beta: f64,
    columns: &[Vec<f64>],
    target_count: f64,
    grid: &QuadratureGrid,
) -> Result<f64> {
    if !(target_count > 0.0) || !target_count.is_finite() {
        return Err(Error::Calibration(format!(
            "target count must be positive, got {target_count}"
        )));
    }
    let shape: Vec<f64> = kind
        .log_shape_cells(beta, columns)?
        .into_iter()
        .map(f64::exp)
        .collect();
    let integral = grid.integrate(&shape)?;
    if !(integral > 0.0) || !integral.is_finite() {
        return Err(Error::Calibration(format!(
            "intensity integral is {integral}"
        )));
    }
    Ok(target_count / integral)
}

/// Inhomogeneous Poisson pattern from a per-cell intensity: cell counts are
/// Poisson(λ_i |T_i|), events uniform within their cell.
pub fn sample_poisson(intensity: &[f64], grid: &QuadratureGrid, seed: u64) -> Result<PointPattern> {
    if intensity.len() != grid.n_cells() {
        return Err(Error::Contract(format!(
            "{} intensity values for {} cells",
            intensity.len(),
            grid.n_cells()
        )));
    }
    if let Some(v) = intensity.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Contract(format!("intensity must be finite and >= 0, got {v}")));
    }
    let mut rng = rng(seed);
    let lattice = grid.lattice();
    let mut points = Vec::new();
    for (cell, (&lam, &vol)) in intensity.iter().zip(grid.volumes()).enumerate() {
        let mean = lam * vol;
        if mean <= 0.0 {
            continue;
        }
        let count = Poisson::new(mean)
            .map_err(|e| Error::Simulation(e.to_string()))?
            .sample(&mut rng) as usize;
        let (lo, hi) = lattice.bounds(cell);
        for _ in 0..count {
            let x = lo[0] + (hi[0] - lo[0]) * rng.random::<f64>();
            let y = lo[1] + (hi[1] - lo[1]) * rng.random::<f64>();
            points.push([x, y]);
        }
    }
    PointPattern::new(points, *grid.window())
}

/// An LGCP draw together with the realised random intensity.
#[derive(Debug, Clone)]
pub struct LgcpSample {
    pub pattern: PointPattern,
    /// `Λ(t_i) = λ̃(t_i) exp(Y(t_i))` per cell.
    pub intensity: Vec<f64>,
}

/// Log-Gaussian Cox pattern: `Λ = λ̃ exp(Y)` with `Y` from `noise`, then a
/// Poisson draw from `Λ`. The point stream is the one `sample_poisson` uses
/// for the same seed, so zero-variance noise reproduces it exactly.
pub fn sample_lgcp(
    base_intensity: &[f64],
    noise: &GrfSampler,
    grid: &QuadratureGrid,
    seed: u64,
) -> Result<LgcpSample> {
    if noise.len() != grid.n_cells() || base_intensity.len() != grid.n_cells() {
        return Err(Error::Contract("LGCP inputs do not match the grid".into()));
    }
    let y = noise.sample_seeded(derive_seed(seed, &[NOISE_STREAM]));
    let intensity: Vec<f64> = base_intensity
        .iter()
        .zip(&y)
        .map(|(l, y)| l * y.exp())
        .collect();
    let pattern = sample_poisson(&intensity, grid, seed)?;
    Ok(LgcpSample { pattern, intensity })
}

/// Thomas cluster pattern with overall intensity `κ λ̃`.
///
/// Parents are homogeneous Poisson(κ) on the window dilated by 4σ. Each parent
/// proposes Poisson(max λ̃) Gaussian(σ)-displaced offspring, each kept with
/// probability `λ̃(s) / max λ̃`; offspring outside the window are dropped.
pub fn sample_thomas(
    kappa: f64,
    sigma: f64,
    base_intensity: &[f64],
    grid: &QuadratureGrid,
    seed: u64,
) -> Result<PointPattern> {
    if !(kappa > 0.0) || !(sigma > 0.0) {
        return Err(Error::Contract(format!(
            "Thomas needs kappa > 0 and sigma > 0, got {kappa}, {sigma}"
        )));
    }
    if base_intensity.len() != grid.n_cells() {
        return Err(Error::Contract("Thomas intensity does not match the grid".into()));
    }
    if base_intensity.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Contract("Thomas intensity must be >= 0".into()));
    }
    let max = base_intensity.iter().cloned().fold(0.0, f64::max);
    if !max.is_finite() {
        return Err(Error::Contract("Thomas intensity has non-finite maximum".into()));
    }
    let window = *grid.window();
    if max == 0.0 {
        return Ok(PointPattern::empty(window));
    }
    let mut rng = rng(seed);
    let outer = window.dilate(4.0 * sigma);
    let n_parents = Poisson::new(kappa * outer.area())
        .map_err(|e| Error::Simulation(e.to_string()))?
        .sample(&mut rng) as usize;
    let offspring = Poisson::new(max).map_err(|e| Error::Simulation(e.to_string()))?;
    let mut points = Vec::new();
    for _ in 0..n_parents {
        let px = outer.x_min + outer.width() * rng.random::<f64>();
        let py = outer.y_min + outer.height() * rng.random::<f64>();
        let n = offspring.sample(&mut rng) as usize;
        for _ in 0..n {
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.random();
            let (x, y) = (px + sigma * dx, py + sigma * dy);
            if !window.contains(x, y) {
                continue;
            }
            let cell = grid.cell_of(x, y)?;
            if u * max < base_intensity[cell] {
                points.push([x, y]);
            }
        }
    }
    PointPattern::new(points, window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Lattice;
    use approx::assert_relative_eq;

    fn grid(n: usize) -> QuadratureGrid {
        QuadratureGrid::new(Lattice::unit(n).unwrap())
    }

    #[test]
    fn zero_variance_field_is_zero() {
        let g = grid(8);
        let y = sample_grf(&GrfSpec::lgcp_noise(0.0, 0.02), &g, 3).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn invalid_grf_spec_rejected() {
        let g = grid(4);
        assert!(sample_grf(&GrfSpec::lgcp_noise(1.0, 0.0), &g, 1).is_err());
        assert!(sample_grf(&GrfSpec::lgcp_noise(-1.0, 0.1), &g, 1).is_err());
    }

    #[test]
    fn cholesky_reproduces_covariance() {
        let locs = [[0.0, 0.0], [0.1, 0.0], [0.0, 0.3], [0.5, 0.5]];
        let spec = GrfSpec::covariate();
        let s = GrfSampler::at_locations(&spec, &locs).unwrap();
        let l = s.factor.as_ref().unwrap();
        let at = |i: usize, j: usize| if j <= i { l[i * (i + 1) / 2 + j] } else { 0.0 };
        for i in 0..4 {
            for j in 0..4 {
                let llt: f64 = (0..4).map(|k| at(i, k) * at(j, k)).sum();
                let mut want = spec.covariance(dist(locs[i], locs[j]));
                if i == j {
                    want += GRF_JITTER;
                }
                assert_relative_eq!(llt, want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn alpha_for_zero_covariates() {
        let g = grid(8);
        let cols = vec![vec![0.0; 64], vec![0.0; 64]];
        let a = calibrate_alpha(IntensityKind::LogLinear2, 1.0, &cols, 400.0, &g).unwrap();
        assert_relative_eq!(a, 400.0, max_relative = 1e-12);
        assert!(calibrate_alpha(IntensityKind::LogLinear2, 1.0, &cols, 0.0, &g).is_err());
    }

    #[test]
    fn alpha_calibrates_random_fields() {
        let g = grid(16);
        let spec = GrfSpec::covariate();
        let sampler = GrfSampler::new(&spec, &g).unwrap();
        let cols: Vec<Vec<f64>> = (0..10).map(|k| sampler.sample_seeded(k)).collect();
        for kind in [IntensityKind::LogLinear2, IntensityKind::Complex10] {
            let model = IntensityModel::calibrated(kind, 0.4, &cols, 400.0, &g).unwrap();
            let lam = model.intensity_cells(&cols).unwrap();
            assert_relative_eq!(g.integrate(&lam).unwrap(), 400.0, max_relative = 1e-9);
        }
    }

    #[test]
    fn zero_intensity_gives_empty_patterns() {
        let g = grid(8);
        assert!(sample_poisson(&vec![0.0; 64], &g, 1).unwrap().is_empty());
        assert!(sample_thomas(100.0, 0.02, &vec![0.0; 64], &g, 1)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn negative_intensity_rejected() {
        let g = grid(2);
        assert!(sample_poisson(&[1.0, -1.0, 1.0, 1.0], &g, 1).is_err());
        assert!(sample_thomas(1.0, 0.1, &[1.0, -1.0, 1.0, 1.0], &g, 1).is_err());
        assert!(sample_thomas(1.0, 0.1, &[1.0, f64::INFINITY, 1.0, 1.0], &g, 1).is_err());
    }

    #[test]
    fn samplers_are_reproducible() {
        let g = grid(16);
        let lam = vec![300.0; 256];
        assert_eq!(
            sample_poisson(&lam, &g, 9).unwrap(),
            sample_poisson(&lam, &g, 9).unwrap()
        );
        assert_ne!(
            sample_poisson(&lam, &g, 9).unwrap(),
            sample_poisson(&lam, &g, 10).unwrap()
        );
        assert_eq!(
            sample_thomas(50.0, 0.03, &lam, &g, 4).unwrap(),
            sample_thomas(50.0, 0.03, &lam, &g, 4).unwrap()
        );
        let noise = GrfSampler::new(&GrfSpec::lgcp_noise(1.0, 0.05), &g).unwrap();
        assert_eq!(
            sample_lgcp(&lam, &noise, &g, 2).unwrap().pattern,
            sample_lgcp(&lam, &noise, &g, 2).unwrap().pattern
        );
    }

    #[test]
    fn lgcp_without_noise_matches_poisson() {
        let g = grid(16);
        let lam: Vec<f64> = (0..256).map(|i| 100.0 + i as f64).collect();
        let noise = GrfSampler::new(&GrfSpec::lgcp_noise(0.0, 0.02), &g).unwrap();
        for seed in 0..5 {
            let lgcp = sample_lgcp(&lam, &noise, &g, seed).unwrap();
            assert_eq!(lgcp.pattern, sample_poisson(&lam, &g, seed).unwrap());
            assert_eq!(lgcp.intensity, lam);
        }
    }

    #[test]
    fn poisson_events_stay_in_their_cells() {
        let g = grid(4);
        let mut lam = vec![0.0; 16];
        lam[5] = 2000.0;
        let p = sample_poisson(&lam, &g, 3).unwrap();
        assert!(!p.is_empty());
        for pt in p.points() {
            assert_eq!(g.cell_of(pt[0], pt[1]).unwrap(), 5);
        }
    }
}
