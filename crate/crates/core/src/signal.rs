//! Physical forward model: four-band mean intensities, Poisson shot noise,
//! and camera quantization.
//!
//! The mean interferogram intensity at wavenumber `k_n` is
//! `I_n = alpha * (1 + V * cos(k_n * L))` in ADU. Detection converts ADU to
//! photo-electrons through the conversion gain `g`, draws a Poisson count,
//! and digitizes back to integer ADU by truncation.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

/// Relative tolerance on the even-spacing invariant of the wavenumber grid.
pub const SPACING_REL_TOL: f64 = 1e-12;

/// The four acquisition wavenumbers plus the camera model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavenumberGrid {
    k: [f64; 4],
    dk: f64,
    g: f64,
    adu_max: u16,
}

impl WavenumberGrid {
    /// Build a grid from four explicit wavenumbers, requiring even spacing
    /// to relative tolerance [`SPACING_REL_TOL`].
    pub fn new(k: [f64; 4], g: f64, adu_max: u16) -> Result<Self> {
        Self::with_spacing_tolerance(k, g, adu_max, SPACING_REL_TOL)
    }

    /// Like [`WavenumberGrid::new`] but with a caller-chosen spacing
    /// tolerance. Published wavenumber values are often rounded to a few
    /// digits and fail the strict invariant even though they describe an
    /// evenly swept source; this constructor admits them when the caller
    /// accepts the rounding.
    pub fn with_spacing_tolerance(k: [f64; 4], g: f64, adu_max: u16, rel_tol: f64) -> Result<Self> {
        if !k.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "wavenumbers must be positive and finite, got {k:?}"
            )));
        }
        if !(k[0] < k[1] && k[1] < k[2] && k[2] < k[3]) {
            return Err(Error::InvalidParameter(format!(
                "wavenumbers must be strictly increasing, got {k:?}"
            )));
        }
        let dk = (k[3] - k[0]) / 3.0;
        for n in 0..3 {
            let step = k[n + 1] - k[n];
            if (step - dk).abs() > rel_tol * dk {
                return Err(Error::InvalidParameter(format!(
                    "wavenumbers not evenly spaced: step {} vs mean spacing {} (rel tol {})",
                    step, dk, rel_tol
                )));
            }
        }
        if !(g.is_finite() && g > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "conversion gain must be positive, got {g}"
            )));
        }
        if adu_max < 1 {
            return Err(Error::InvalidParameter(
                "adu_max must be at least 1".into(),
            ));
        }
        Ok(WavenumberGrid { k, dk, g, adu_max })
    }

    /// Build an exactly evenly spaced grid from the first wavenumber and the
    /// common spacing.
    pub fn evenly_spaced(k1: f64, dk: f64, g: f64, adu_max: u16) -> Result<Self> {
        if !(dk.is_finite() && dk > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "spacing must be positive, got {dk}"
            )));
        }
        Self::new([k1, k1 + dk, k1 + 2.0 * dk, k1 + 3.0 * dk], g, adu_max)
    }

    /// Default camera and sweep: wavenumbers spanning 7.22 to 7.63 rad/um
    /// (evenly spaced), g = 34.4 electrons per ADU, 8-bit saturation.
    pub fn default_grid() -> Self {
        let dk = (7.63 - 7.22) / 3.0;
        Self::evenly_spaced(7.22, dk, 34.4, 255).expect("default grid constants are valid")
    }

    pub fn k(&self) -> &[f64; 4] {
        &self.k
    }

    pub fn dk(&self) -> f64 {
        self.dk
    }

    pub fn g(&self) -> f64 {
        self.g
    }

    pub fn adu_max(&self) -> u16 {
        self.adu_max
    }

    /// Reference wavenumber for Carré demodulation: the mean of the four
    /// sweep wavenumbers. Configurable at the call sites that take `k0`.
    pub fn k0(&self) -> f64 {
        (self.k[0] + self.k[1] + self.k[2] + self.k[3]) / 4.0
    }

    /// Maximum admissible OPL training-window width, `2*pi / max(k)`.
    /// A wider window spans more than one fringe period and makes the
    /// intensity-to-OPL map ambiguous.
    pub fn max_window(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.k[3]
    }
}

/// One scene point: DC term alpha (ADU), fringe visibility V, and optical
/// path length L (um).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub alpha: f64,
    pub visibility: f64,
    pub opl: f64,
}

impl SceneParams {
    pub fn new(alpha: f64, visibility: f64, opl: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be nonnegative, got {alpha}"
            )));
        }
        if !(0.0..=1.0).contains(&visibility) {
            return Err(Error::InvalidParameter(format!(
                "visibility must lie in [0, 1], got {visibility}"
            )));
        }
        if !(opl.is_finite() && opl >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "OPL must be nonnegative, got {opl}"
            )));
        }
        Ok(SceneParams {
            alpha,
            visibility,
            opl,
        })
    }

    /// Peak mean intensity `alpha * (1 + V)` in ADU.
    pub fn peak(&self) -> f64 {
        self.alpha * (1.0 + self.visibility)
    }

    /// Whether this scene can drive the camera into saturation.
    pub fn saturates(&self, grid: &WavenumberGrid) -> bool {
        self.peak() > f64::from(grid.adu_max())
    }
}

/// Closed intervals for (alpha, V, L), the constraint box a network is
/// trained on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub alpha: (f64, f64),
    pub visibility: (f64, f64),
    pub opl: (f64, f64),
}

impl ParamBox {
    pub fn new(alpha: (f64, f64), visibility: (f64, f64), opl: (f64, f64)) -> Result<Self> {
        for (name, (lo, hi)) in [("alpha", alpha), ("visibility", visibility), ("opl", opl)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidParameter(format!(
                    "{name} interval [{lo}, {hi}] is empty or not finite"
                )));
            }
        }
        if alpha.0 < 0.0 {
            return Err(Error::InvalidParameter(
                "alpha interval must be nonnegative".into(),
            ));
        }
        if visibility.0 < 0.0 || visibility.1 > 1.0 {
            return Err(Error::InvalidParameter(format!(
                "visibility interval [{}, {}] must lie within [0, 1]",
                visibility.0, visibility.1
            )));
        }
        if opl.0 < 0.0 {
            return Err(Error::InvalidParameter(
                "OPL interval must be nonnegative".into(),
            ));
        }
        Ok(ParamBox {
            alpha,
            visibility,
            opl,
        })
    }

    /// Same (alpha, V) constraints over a different OPL window.
    pub fn with_opl(&self, opl: (f64, f64)) -> Result<Self> {
        Self::new(self.alpha, self.visibility, opl)
    }

    pub fn opl_width(&self) -> f64 {
        self.opl.1 - self.opl.0
    }

    /// Center of the (alpha, V) box at the given OPL.
    pub fn center_scene(&self, opl: f64) -> Result<SceneParams> {
        SceneParams::new(
            0.5 * (self.alpha.0 + self.alpha.1),
            0.5 * (self.visibility.0 + self.visibility.1),
            opl,
        )
    }

    pub fn contains(&self, p: &SceneParams) -> bool {
        (self.alpha.0..=self.alpha.1).contains(&p.alpha)
            && (self.visibility.0..=self.visibility.1).contains(&p.visibility)
            && (self.opl.0..=self.opl.1).contains(&p.opl)
    }
}

/// Noise-free mean intensities, real-valued ADU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanIntensities(pub [f64; 4]);

/// Observed, shot-noise-sampled and quantized intensities, integer ADU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservedIntensities(pub [u16; 4]);

impl ObservedIntensities {
    pub fn as_f64(&self) -> [f64; 4] {
        self.0.map(f64::from)
    }
}

/// Evaluate the mean intensity model at one scene point.
pub fn mean_intensities(p: &SceneParams, grid: &WavenumberGrid) -> MeanIntensities {
    MeanIntensities(
        grid.k()
            .map(|k| p.alpha * (1.0 + p.visibility * (k * p.opl).cos())),
    )
}

/// One draw of Poisson photo-electrons at rate `s`.
fn poisson_electrons(s: f64, rng: &mut (impl Rng + ?Sized)) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    Poisson::new(s)
        .expect("positive finite Poisson rate")
        .sample(rng)
}

/// Measure a noise-free intensity vector: convert to photo-electrons,
/// draw Poisson counts, digitize back to ADU by truncation, clamp to the
/// camera's range.
pub fn sample_observation(
    mean: &MeanIntensities,
    grid: &WavenumberGrid,
    rng: &mut (impl Rng + ?Sized),
) -> ObservedIntensities {
    let g = grid.g();
    let max = f64::from(grid.adu_max());
    ObservedIntensities(mean.0.map(|m| {
        debug_assert!(m >= 0.0, "mean intensity must be nonnegative");
        let x = poisson_electrons(g * m, rng);
        let adu = (x / g).floor().clamp(0.0, max);
        adu as u16
    }))
}

/// Split a total OPL into the part above a reference level, for scenes
/// described as `L(x, y) = L0 + Ls(x, y)`.
pub fn decompose_opl(total: f64, reference: f64) -> Result<f64> {
    if !(reference >= 0.0 && total >= reference) {
        return Err(Error::InvalidDecomposition { total, reference });
    }
    Ok(total - reference)
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use approx::assert_relative_eq;

    /// Literal published wavenumbers, rounded to two decimals; spacing is
    /// uneven at the third digit, so they need the tolerance constructor.
    fn literal_grid() -> WavenumberGrid {
        WavenumberGrid::with_spacing_tolerance([7.22, 7.36, 7.50, 7.63], 34.4, 255, 0.05).unwrap()
    }

    #[test]
    fn grid_rejects_uneven_spacing_at_strict_tolerance() {
        let err = WavenumberGrid::new([7.22, 7.36, 7.50, 7.63], 34.4, 255);
        assert!(matches!(err, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn grid_rejects_non_increasing_and_bad_gain() {
        assert!(WavenumberGrid::new([7.5, 7.4, 7.6, 7.7], 34.4, 255).is_err());
        assert!(WavenumberGrid::evenly_spaced(7.22, 0.1, 0.0, 255).is_err());
        assert!(WavenumberGrid::evenly_spaced(7.22, 0.1, 34.4, 0).is_err());
        assert!(WavenumberGrid::evenly_spaced(-1.0, 0.1, 34.4, 255).is_err());
    }

    #[test]
    fn default_grid_preserves_published_endpoints() {
        let grid = WavenumberGrid::default_grid();
        assert_relative_eq!(grid.k()[0], 7.22, max_relative = 1e-15);
        assert_relative_eq!(grid.k()[3], 7.63, max_relative = 1e-15);
        assert_relative_eq!(grid.max_window(), 0.823484312867573588, max_relative = 1e-15);
        assert_relative_eq!(grid.k0(), 7.425, max_relative = 1e-12);
    }

    #[test]
    fn zero_visibility_erases_modulation() {
        let p = SceneParams::new(100.0, 0.0, 5.0).unwrap();
        let m = mean_intensities(&p, &WavenumberGrid::default_grid());
        assert_eq!(m.0, [100.0; 4]);
    }

    #[test]
    fn zero_opl_gives_peak_everywhere() {
        let p = SceneParams::new(128.0, 0.7, 0.0).unwrap();
        let m = mean_intensities(&p, &WavenumberGrid::default_grid());
        for v in m.0 {
            assert_relative_eq!(v, 217.6, max_relative = 1e-15);
        }
    }

    #[test]
    fn mean_intensities_match_high_precision_reference() {
        // Frozen from a 50-digit evaluation of the intensity model at
        // (alpha=128, V=0.7, L=4.901) on the literal wavenumbers.
        let expected = [
            67.379272551950917621,
            122.8995443726139075,
            180.72830998535973164,
            213.47861714566405411,
        ];
        let p = SceneParams::new(128.0, 0.7, 4.901).unwrap();
        let m = mean_intensities(&p, &literal_grid());
        for (got, want) in m.0.iter().zip(expected) {
            assert_relative_eq!(*got, want, max_relative = 1e-12);
        }
    }

    #[test]
    fn mean_intensities_stay_within_envelope() {
        let grid = WavenumberGrid::default_grid();
        for i in 0..200 {
            let p = SceneParams::new(
                50.0 + f64::from(i),
                f64::from(i % 100) / 100.0,
                f64::from(i) * 0.09,
            )
            .unwrap();
            let m = mean_intensities(&p, &grid);
            let lo = p.alpha * (1.0 - p.visibility) - 1e-9;
            let hi = p.alpha * (1.0 + p.visibility) + 1e-9;
            for v in m.0 {
                assert!(v >= lo && v <= hi, "{v} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn per_band_periodicity() {
        let grid = WavenumberGrid::default_grid();
        let l = 4.31;
        let a = mean_intensities(&SceneParams::new(128.0, 0.7, l).unwrap(), &grid);
        for n in 0..4 {
            let period = 2.0 * std::f64::consts::PI / grid.k()[n];
            let b = mean_intensities(&SceneParams::new(128.0, 0.7, l + period).unwrap(), &grid);
            assert!((a.0[n] - b.0[n]).abs() < 1e-9, "band {n} not periodic");
        }
    }

    #[test]
    fn zero_mean_observation_is_zero() {
        let grid = WavenumberGrid::default_grid();
        let mut rng = SeedTree::new(1).rng();
        for _ in 0..100 {
            let obs = sample_observation(&MeanIntensities([0.0; 4]), &grid, &mut rng);
            assert_eq!(obs.0, [0; 4]);
        }
    }

    #[test]
    fn observation_is_reproducible_and_clamped() {
        let grid = WavenumberGrid::default_grid();
        let mean = MeanIntensities([10.0, 100.0, 250.0, 400.0]);
        let a = sample_observation(&mean, &grid, &mut SeedTree::new(9).rng());
        let b = sample_observation(&mean, &grid, &mut SeedTree::new(9).rng());
        assert_eq!(a, b);
        let mut rng = SeedTree::new(10).rng();
        for _ in 0..200 {
            let obs = sample_observation(&mean, &grid, &mut rng);
            assert!(obs.0.iter().all(|&v| v <= grid.adu_max()));
        }
    }

    #[test]
    fn poisson_stage_matches_rate_mean_and_variance() {
        // The raw electron-count stage, before quantization: mean and
        // variance must both equal the rate within Monte Carlo error.
        let s = 3440.0;
        let n = 1_000_000usize;
        let mut rng = SeedTree::new(11).rng();
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x = poisson_electrons(s, &mut rng);
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let se_mean = (s / n as f64).sqrt();
        assert!(
            (mean - s).abs() < 3.0 * se_mean,
            "mean {mean} vs rate {s} (3se {})",
            3.0 * se_mean
        );
        // Var(sample variance) for Poisson ~ (2 var^2 + ...) / n; the rate
        // term dominates here, so use the Gaussian approximation.
        let se_var = (2.0 / n as f64).sqrt() * s;
        assert!(
            (var - s).abs() < 4.0 * se_var,
            "variance {var} vs rate {s} (4se {})",
            4.0 * se_var
        );
    }

    #[test]
    fn quantization_shifts_mean_down_by_less_than_one_adu() {
        let grid = WavenumberGrid::default_grid();
        let target = 217.6;
        let mean = MeanIntensities([target; 4]);
        let n = 250_000usize;
        let mut rng = SeedTree::new(12).rng();
        let mut sum = 0.0;
        for _ in 0..n {
            let obs = sample_observation(&mean, &grid, &mut rng);
            sum += f64::from(obs.0[0]);
        }
        let empirical = sum / n as f64;
        let se = (target / grid.g() / n as f64).sqrt();
        // Truncation moves the mean into [target - 1, target]; shot noise
        // adds Monte Carlo error on top.
        assert!(
            empirical < target + 3.0 * se && empirical > target - 1.0 - 3.0 * se,
            "empirical mean {empirical} incompatible with truncated {target}"
        );
    }

    #[test]
    fn scene_params_validate() {
        assert!(SceneParams::new(-1.0, 0.5, 1.0).is_err());
        assert!(SceneParams::new(100.0, 1.5, 1.0).is_err());
        assert!(SceneParams::new(100.0, 0.5, -1.0).is_err());
        assert!(SceneParams::new(128.0, 0.7, 4.901).is_ok());
    }

    #[test]
    fn saturation_check_uses_peak() {
        let grid = WavenumberGrid::default_grid();
        assert!(SceneParams::new(140.0, 0.95, 1.0).unwrap().saturates(&grid));
        assert!(!SceneParams::new(128.0, 0.7, 1.0).unwrap().saturates(&grid));
    }

    #[test]
    fn param_box_validates_intervals() {
        assert!(ParamBox::new((70.0, 140.0), (0.59, 0.95), (4.5, 5.3)).is_ok());
        assert!(ParamBox::new((140.0, 70.0), (0.59, 0.95), (4.5, 5.3)).is_err());
        assert!(ParamBox::new((70.0, 140.0), (0.59, 1.05), (4.5, 5.3)).is_err());
        assert!(ParamBox::new((70.0, 140.0), (0.59, 0.95), (-0.1, 0.5)).is_err());
    }

    #[test]
    fn decompose_opl_handles_ordering() {
        assert_relative_eq!(decompose_opl(7.3, 7.0).unwrap(), 0.3, max_relative = 1e-12);
        assert_eq!(decompose_opl(7.0, 7.0).unwrap(), 0.0);
        assert!(matches!(
            decompose_opl(6.9, 7.0),
            Err(Error::InvalidDecomposition { .. })
        ));
    }
}
