use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sufficient statistics of a leaf under the quadratic stage loss.
///
/// `r` is the weighted event count in the leaf, `t` the integral of
/// `ŵ exp(φ̂)` over the leaf's region.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LeafStats {
    pub r: f64,
    pub t: f64,
}

impl LeafStats {
    pub fn new(r: f64, t: f64) -> Self {
        LeafStats { r, t }
    }
}

impl std::ops::Sub for LeafStats {
    type Output = LeafStats;

    fn sub(self, rhs: LeafStats) -> LeafStats {
        LeafStats {
            r: self.r - rhs.r,
            t: self.t - rhs.t,
        }
    }
}

/// Soft-thresholded minimiser of [`leaf_loss`]:
/// `sgn(R - T) max(|R - T| - γ, 0) / T`.
pub fn leaf_score(stats: LeafStats, gamma: f64) -> Result<f64> {
    if !(stats.t > 0.0) {
        return Err(Error::DegenerateLeaf);
    }
    Ok(soft_threshold(stats.r - stats.t, gamma) / stats.t)
}

fn soft_threshold(d: f64, gamma: f64) -> f64 {
    let mag = d.abs() - gamma;
    if mag > 0.0 {
        mag.copysign(d)
    } else {
        0.0
    }
}

/// `γ|θ| - Rθ + T(θ + θ²/2)`.
pub fn leaf_loss(stats: LeafStats, theta: f64, gamma: f64) -> f64 {
    gamma * theta.abs() - stats.r * theta + stats.t * (theta + 0.5 * theta * theta)
}

/// Loss at the optimal score, `-(|R - T| - γ)₊² / (2T)`.
pub(crate) fn optimal_leaf_loss(stats: LeafStats, gamma: f64) -> f64 {
    let mag = (stats.r - stats.t).abs() - gamma;
    if mag > 0.0 {
        -mag * mag / (2.0 * stats.t)
    } else {
        0.0
    }
}
