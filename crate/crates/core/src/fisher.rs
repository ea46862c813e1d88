//! Fisher information of the shot-noise-limited four-band measurement and
//! the Cramér-Rao sensitivity bounds derived from it.
//!
//! The photo-electron count in band `n` is Poisson with rate
//! `s_n = g * I_n(theta)`. The information matrix is evaluated in the
//! coordinates `(dc, amplitude, L)` where `dc = alpha` and
//! `amplitude = alpha * V`, which is the parameterization in which the
//! closed-form entries below are exact. The `(3,3)` entry of the inverse,
//! and with it the OPL bound, is invariant under reparameterizing the two
//! nuisance coordinates back to `(alpha, V)`; a unit test pins that fact.

use crate::error::{Error, Result};
use crate::estimators::CarreEstimator;
use crate::evaluate::{mc_sensitivity, McSensitivity};
use crate::rng::SeedTree;
use crate::signal::{mean_intensities, SceneParams, WavenumberGrid};

/// Determinant magnitude below which the information matrix is treated as
/// singular rather than inverted.
pub const SINGULAR_DET_THRESHOLD: f64 = 1e-300;

/// 3x3 Fisher information matrix in `(dc, amplitude, L)` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherMatrix {
    entries: [[f64; 3]; 3],
}

impl FisherMatrix {
    pub fn entries(&self) -> &[[f64; 3]; 3] {
        &self.entries
    }

    /// Determinant by cofactor expansion; exact closed form at this size.
    pub fn det(&self) -> f64 {
        let m = &self.entries;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Closed-form adjugate inverse, or `None` when the determinant falls
    /// below [`SINGULAR_DET_THRESHOLD`].
    pub fn inverse(&self) -> Option<[[f64; 3]; 3]> {
        let det = self.det();
        if !det.is_finite() || det.abs() < SINGULAR_DET_THRESHOLD {
            return None;
        }
        let m = &self.entries;
        let cof = |r1: usize, r2: usize, c1: usize, c2: usize| {
            m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]
        };
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        Some(adj.map(|row| row.map(|v| v / det)))
    }
}

/// Evaluate the information matrix at one scene point.
pub fn fisher_matrix(p: &SceneParams, grid: &WavenumberGrid) -> Result<FisherMatrix> {
    let means = mean_intensities(p, grid);
    if let Some(band) = means.0.iter().position(|&m| m <= 0.0) {
        return Err(Error::SingularModel { band });
    }
    let g = grid.g();
    let av = p.alpha * p.visibility;
    let mut m = [[0.0f64; 3]; 3];
    for (n, &k) in grid.k().iter().enumerate() {
        let ib = means.0[n];
        let (s, c) = (k * p.opl).sin_cos();
        m[0][0] += g / ib;
        m[0][1] += g * c / ib;
        m[0][2] += -g * k * av * s / ib;
        m[1][1] += g * c * c / ib;
        m[1][2] += -g * k * av * (2.0 * k * p.opl).sin() / (2.0 * ib);
        m[2][2] += g * k * k * av * av * s * s / ib;
    }
    m[1][0] = m[0][1];
    m[2][0] = m[0][2];
    m[2][1] = m[1][2];
    Ok(FisherMatrix { entries: m })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    Crb,
    Spcrb,
}

/// A sensitivity lower bound in um.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundValue {
    pub sigma: f64,
    pub kind: BoundKind,
}

/// Three-parameter Cramér-Rao bound on the OPL: `sqrt((J^-1)_33)`.
/// Alpha and V are unknown nuisance parameters.
pub fn crb(p: &SceneParams, grid: &WavenumberGrid) -> Result<BoundValue> {
    let j = fisher_matrix(p, grid)?;
    let inv = j.inverse().ok_or_else(|| Error::SingularInformation {
        context: format!(
            "det {} at alpha={}, V={}, L={}",
            j.det(),
            p.alpha,
            p.visibility,
            p.opl
        ),
    })?;
    let var = inv[2][2];
    if !(var.is_finite() && var > 0.0) {
        return Err(Error::SingularInformation {
            context: format!("nonpositive OPL variance {var}"),
        });
    }
    Ok(BoundValue {
        sigma: var.sqrt(),
        kind: BoundKind::Crb,
    })
}

/// Single-parameter Cramér-Rao bound on the OPL: `1/sqrt(J_33)`.
/// Alpha and V are exactly known.
pub fn spcrb(p: &SceneParams, grid: &WavenumberGrid) -> Result<BoundValue> {
    let j = fisher_matrix(p, grid)?;
    let j33 = j.entries()[2][2];
    if !(j33.is_finite() && j33 > 0.0) {
        return Err(Error::SingularInformation {
            context: format!(
                "J_33 = {j33} at alpha={}, V={}, L={}",
                p.alpha, p.visibility, p.opl
            ),
        });
    }
    Ok(BoundValue {
        sigma: 1.0 / j33.sqrt(),
        kind: BoundKind::Spcrb,
    })
}

/// Monte Carlo estimate of the Carré algorithm sensitivity at one scene
/// point: the standard deviation of the wrapped estimate over `reps` noisy
/// observations, with failed repetitions excluded and counted.
pub fn alg_sensitivity_mc(
    p: &SceneParams,
    grid: &WavenumberGrid,
    k0: f64,
    reps: usize,
    seed: SeedTree,
    workers: usize,
) -> Result<McSensitivity> {
    if reps < 1000 {
        return Err(Error::InvalidParameter(format!(
            "algorithm sensitivity needs at least 1000 repetitions, got {reps}"
        )));
    }
    mc_sensitivity(&CarreEstimator { k0 }, p, grid, reps, seed, workers)
}
