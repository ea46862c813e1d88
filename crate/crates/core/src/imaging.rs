//! Per-pixel demodulation of interferogram image stacks into OPL maps,
//! experimental-sensitivity maps, and histograms, plus synthetic phantom
//! generation and the stack/map file formats.

use crate::error::{Error, Result};
use crate::estimators::{carre, wrap_opl, CarreEstimator, OplEstimator};
use crate::evaluate::mean_std;
use crate::net::Network;
use crate::rng::SeedTree;
use crate::signal::{mean_intensities, sample_observation, SceneParams, WavenumberGrid};
use crate::training::NetworkBank;
use std::path::Path;

/// A width x height image of f64 values in row-major order. Undefined
/// pixels hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ScalarMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter("map dimensions must be positive".into()));
        }
        if values.len() != width * height {
            return Err(Error::InvalidParameter(format!(
                "map payload is {} values, expected {}",
                values.len(),
                width * height
            )));
        }
        Ok(ScalarMap {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.values[y * self.width + x] = value;
    }

    /// Mean over pixels holding a defined (finite) value.
    pub fn defined_mean(&self) -> Result<f64> {
        let defined: Vec<f64> = self.values.iter().copied().filter(|v| v.is_finite()).collect();
        if defined.is_empty() {
            return Err(Error::AllMasked);
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn defined_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_finite()).count()
    }
}

/// Uniform-value phantom.
pub fn flat_phantom(width: usize, height: usize, value_um: f64) -> Result<ScalarMap> {
    ScalarMap::filled(width, height, value_um)
}

/// Values sweep linearly from `lo_um` in the first column to `hi_um` in
/// the last.
pub fn ramp_phantom(width: usize, height: usize, lo_um: f64, hi_um: f64) -> Result<ScalarMap> {
    let mut values = Vec::with_capacity(width * height);
    for _ in 0..height {
        for x in 0..width {
            let t = if width == 1 {
                0.0
            } else {
                x as f64 / (width - 1) as f64
            };
            values.push(lo_um + (hi_um - lo_um) * t);
        }
    }
    ScalarMap::new(width, height, values)
}

/// Isotropic Gaussian bump over a flat base, the synthetic stand-in for a
/// cell-like sample.
pub fn gaussian_bump_phantom(
    width: usize,
    height: usize,
    base_um: f64,
    amplitude_um: f64,
    center: (f64, f64),
    sigma_px: f64,
) -> Result<ScalarMap> {
    if !(sigma_px > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "bump sigma {sigma_px} must be positive"
        )));
    }
    let mut values = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let dx = x as f64 - center.0;
            let dy = y as f64 - center.1;
            let r2 = dx * dx + dy * dy;
            values.push(base_um + amplitude_um * (-r2 / (2.0 * sigma_px * sigma_px)).exp());
        }
    }
    ScalarMap::new(width, height, values)
}

/// A stack of `frames` four-band acquisitions of the same scene. Layout
/// is frame-major, then band-major, then row-major within the band image.
#[derive(Debug, Clone, PartialEq)]
pub struct InterferogramStack {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub grid: WavenumberGrid,
    /// Provenance notes; travels in run sidecars, not the stack container.
    pub metadata: String,
    pub data: Vec<u8>,
}

impl InterferogramStack {
    pub fn index(&self, frame: usize, band: usize, x: usize, y: usize) -> usize {
        ((frame * 4 + band) * self.height + y) * self.width + x
    }

    pub fn observation(&self, frame: usize, x: usize, y: usize) -> [f64; 4] {
        [
            self.data[self.index(frame, 0, x, y)] as f64,
            self.data[self.index(frame, 1, x, y)] as f64,
            self.data[self.index(frame, 2, x, y)] as f64,
            self.data[self.index(frame, 3, x, y)] as f64,
        ]
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Simulate a stack from per-pixel scene maps. Each frame is an
/// independent shot-noise realization; with `shot_noise` off every frame
/// is the quantized noise-free signal. Deterministic in `seed` with one
/// stream per (frame, pixel).
pub fn synthesize_stack(
    phantom: &ScalarMap,
    alpha: &ScalarMap,
    visibility: &ScalarMap,
    grid: &WavenumberGrid,
    frames: usize,
    shot_noise: bool,
    seed: SeedTree,
) -> Result<InterferogramStack> {
    if alpha.width != phantom.width
        || alpha.height != phantom.height
        || visibility.width != phantom.width
        || visibility.height != phantom.height
    {
        return Err(Error::MismatchedGrids(
            "phantom, alpha, and visibility maps must share dimensions".into(),
        ));
    }
    if frames == 0 {
        return Err(Error::EmptyStack);
    }
    if grid.adu_max() > u8::MAX as u16 {
        return Err(Error::InvalidParameter(format!(
            "stack payload is 8-bit but adu_max is {}",
            grid.adu_max()
        )));
    }
    let (w, h) = (phantom.width, phantom.height);
    let npix = w * h;
    let mut scenes = Vec::with_capacity(npix);
    for y in 0..h {
        for x in 0..w {
            let p = SceneParams::new(alpha.at(x, y), visibility.at(x, y), phantom.at(x, y))?;
            if p.saturates(grid) {
                return Err(Error::SaturationRisk {
                    x,
                    y,
                    peak: p.peak(),
                    adu_max: grid.adu_max(),
                });
            }
            scenes.push(mean_intensities(&p, grid));
        }
    }
    let mut data = vec![0u8; npix * 4 * frames];
    for (pix, mean) in scenes.iter().enumerate() {
        let (x, y) = (pix % w, pix / w);
        for f in 0..frames {
            let obs = if shot_noise {
                let mut rng = seed.child((f * npix + pix) as u64).rng();
                sample_observation(mean, grid, &mut rng).0
            } else {
                let mut quantized = [0u16; 4];
                for (q, m) in quantized.iter_mut().zip(&mean.0) {
                    *q = (m.floor().max(0.0) as u16).min(grid.adu_max());
                }
                quantized
            };
            for band in 0..4 {
                data[((f * 4 + band) * h + y) * w + x] = obs[band] as u8;
            }
        }
    }
    Ok(InterferogramStack {
        width: w,
        height: h,
        frames,
        grid: grid.clone(),
        metadata: format!("synthetic seed {}", seed.value()),
        data,
    })
}

/// Copy out a rectangular region of every band and frame.
pub fn crop_stack(
    stack: &InterferogramStack,
    x0: usize,
    y0: usize,
    width: usize,
    height: usize,
) -> Result<InterferogramStack> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidParameter("crop dimensions must be positive".into()));
    }
    if x0 + width > stack.width || y0 + height > stack.height {
        return Err(Error::InvalidParameter(format!(
            "crop {width}x{height}+{x0}+{y0} exceeds the {}x{} stack",
            stack.width, stack.height
        )));
    }
    let mut data = Vec::with_capacity(width * height * 4 * stack.frames);
    for f in 0..stack.frames {
        for band in 0..4 {
            for y in 0..height {
                for x in 0..width {
                    data.push(stack.data[stack.index(f, band, x0 + x, y0 + y)]);
                }
            }
        }
    }
    Ok(InterferogramStack {
        width,
        height,
        frames: stack.frames,
        grid: stack.grid.clone(),
        metadata: stack.metadata.clone(),
        data,
    })
}

/// Estimator choices for [`demod_stack`]. A bank needs a per-pixel prior
/// map to place the wrapped Carré seed on the right period (and to fall
/// back on when Carré fails outright).
pub enum StackEstimator<'a> {
    Carre { k0: f64 },
    Network(&'a Network),
    Bank { bank: &'a NetworkBank, prior: &'a ScalarMap },
}

/// Per-pixel demodulation products.
#[derive(Debug, Clone)]
pub struct DemodMaps {
    /// Mean estimate over the frames the estimator accepted; NaN when it
    /// accepted none.
    pub opl: ScalarMap,
    /// Standard deviation over accepted frames; NaN when fewer than two.
    pub sensitivity: ScalarMap,
    /// Frames the estimator rejected, per pixel.
    pub failed_frames: Vec<u32>,
    /// Bank member applied at each pixel, when a bank was used.
    pub selection: Option<Vec<u16>>,
}

impl DemodMaps {
    /// Pixels where at least one frame failed to demodulate.
    pub fn failure_mask(&self) -> Vec<bool> {
        self.failed_frames.iter().map(|&f| f > 0).collect()
    }
}

struct PixelDemod {
    mean: f64,
    sigma: f64,
    failed: u32,
    selected: u16,
}

fn demod_pixel(
    stack: &InterferogramStack,
    est: &StackEstimator,
    x: usize,
    y: usize,
) -> Result<PixelDemod> {
    let run = |e: &dyn OplEstimator| -> (f64, f64, u32) {
        let mut ok = Vec::with_capacity(stack.frames);
        let mut failed = 0u32;
        for f in 0..stack.frames {
            match e.estimate(stack.observation(f, x, y)) {
                Ok(v) => ok.push(v),
                Err(_) => failed += 1,
            }
        }
        if ok.is_empty() {
            return (f64::NAN, f64::NAN, failed);
        }
        let (mean, sigma) = mean_std(&ok);
        let sigma = if ok.len() < 2 { f64::NAN } else { sigma };
        (mean, sigma, failed)
    };
    match est {
        StackEstimator::Carre { k0 } => {
            let (mean, sigma, failed) = run(&CarreEstimator { k0: *k0 });
            Ok(PixelDemod {
                mean,
                sigma,
                failed,
                selected: 0,
            })
        }
        StackEstimator::Network(net) => {
            let (mean, sigma, failed) = run(*net);
            Ok(PixelDemod {
                mean,
                sigma,
                failed,
                selected: 0,
            })
        }
        StackEstimator::Bank { bank, prior } => {
            let prior_l = prior.at(x, y);
            let k0 = stack.grid.k0();
            // Seed selection with the pixel's Carré estimate where any frame
            // demodulates, unwrapped onto the period nearest the prior.
            let mut wrapped = Vec::with_capacity(stack.frames);
            for f in 0..stack.frames {
                if let Ok(w) = carre(stack.observation(f, x, y), k0) {
                    wrapped.push(w.value);
                }
            }
            let seed_l = if wrapped.is_empty() {
                prior_l
            } else {
                let (w_mean, _) = mean_std(&wrapped);
                let period = wrap_opl(0.0, k0).period();
                let candidate = w_mean + period * ((prior_l - w_mean) / period).round();
                if (bank.span.0..=bank.span.1).contains(&candidate) {
                    candidate
                } else {
                    prior_l
                }
            };
            let idx = bank.select_index(seed_l)?;
            let (mean, sigma, failed) = run(&bank.networks[idx]);
            Ok(PixelDemod {
                mean,
                sigma,
                failed,
                selected: idx as u16,
            })
        }
    }
}

/// Demodulate every pixel of the stack: per frame estimates are reduced to
/// a mean OPL map and a temporal standard-deviation (sensitivity) map,
/// with rejected frames counted per pixel. Results are independent of
/// `workers`.
pub fn demod_stack(
    stack: &InterferogramStack,
    est: &StackEstimator,
    workers: usize,
) -> Result<DemodMaps> {
    if stack.frames == 0 || stack.pixels() == 0 || stack.data.is_empty() {
        return Err(Error::EmptyStack);
    }
    let w = stack.width;
    let pixels: Vec<usize> = (0..stack.pixels()).collect();
    let demod_one = |&pix: &usize| demod_pixel(stack, est, pix % w, pix / w);
    let results: Vec<Result<PixelDemod>> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("worker pool");
        pool.install(|| {
            use rayon::prelude::*;
            pixels.par_iter().map(demod_one).collect()
        })
    } else {
        pixels.iter().map(demod_one).collect()
    };
    let mut opl = Vec::with_capacity(stack.pixels());
    let mut sens = Vec::with_capacity(stack.pixels());
    let mut failed = Vec::with_capacity(stack.pixels());
    let mut selection = Vec::with_capacity(stack.pixels());
    for r in results {
        let p = r?;
        opl.push(p.mean);
        sens.push(p.sigma);
        failed.push(p.failed);
        selection.push(p.selected);
    }
    Ok(DemodMaps {
        opl: ScalarMap::new(stack.width, stack.height, opl)?,
        sensitivity: ScalarMap::new(stack.width, stack.height, sens)?,
        failed_frames: failed,
        selection: match est {
            StackEstimator::Bank { .. } => Some(selection),
            _ => None,
        },
    })
}

/// Histogram of the defined values of a map.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    /// Pixels without a defined value, excluded from the counts.
    pub excluded: usize,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Median of the binned values, estimated at bin centers.
    pub fn median_estimate(&self) -> f64 {
        let total = self.total();
        let mut seen = 0usize;
        for (i, &c) in self.counts.iter().enumerate() {
            seen += c;
            if seen * 2 >= total {
                let width = (self.hi - self.lo) / self.counts.len() as f64;
                return self.lo + (i as f64 + 0.5) * width;
            }
        }
        self.hi
    }
}

/// Bin the defined values of a sensitivity (or any scalar) map into
/// `bins` equal-width bins spanning the defined range.
pub fn sensitivity_histogram(map: &ScalarMap, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidParameter("need at least one bin".into()));
    }
    let defined: Vec<f64> = map.values.iter().copied().filter(|v| v.is_finite()).collect();
    if defined.is_empty() {
        return Err(Error::AllMasked);
    }
    let excluded = map.values.len() - defined.len();
    let lo = defined.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0usize; bins];
    if hi == lo {
        counts[0] = defined.len();
        return Ok(Histogram {
            lo,
            hi,
            counts,
            excluded,
        });
    }
    for v in defined {
        let t = (v - lo) / (hi - lo);
        let bin = ((t * bins as f64) as usize).min(bins - 1);
        counts[bin] += 1;
    }
    Ok(Histogram {
        lo,
        hi,
        counts,
        excluded,
    })
}

/// Signal-to-noise gain of sensitivity `sigma_b` over `sigma_a`, in dB.
pub fn snr_gain(sigma_a: f64, sigma_b: f64) -> Result<f64> {
    for s in [sigma_a, sigma_b] {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::NonPositiveSigma(s));
        }
    }
    Ok(20.0 * (sigma_a / sigma_b).log10())
}

const STACK_MAGIC: [u8; 4] = *b"WSI1";
const STACK_VERSION: u8 = 1;

/// Serialize a stack: magic, version, u32 dims (width, height, bands,
/// frames), f64 wavenumbers, f64 gain, u16 saturation, then the payload
/// in stack layout order. Little-endian.
pub fn save_stack(stack: &InterferogramStack) -> Result<Vec<u8>> {
    let expect = stack.pixels() * 4 * stack.frames;
    if stack.data.len() != expect {
        return Err(Error::format(
            "stack container",
            format!("payload is {} bytes, expected {expect}", stack.data.len()),
        ));
    }
    let mut out = Vec::with_capacity(63 + stack.data.len());
    out.extend_from_slice(&STACK_MAGIC);
    out.push(STACK_VERSION);
    for dim in [stack.width, stack.height, 4, stack.frames] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for k in stack.grid.k() {
        out.extend_from_slice(&k.to_le_bytes());
    }
    out.extend_from_slice(&stack.grid.g().to_le_bytes());
    out.extend_from_slice(&stack.grid.adu_max().to_le_bytes());
    out.extend_from_slice(&stack.data);
    Ok(out)
}

/// Deserialize a stack produced by [`save_stack`].
pub fn load_stack(bytes: &[u8]) -> Result<InterferogramStack> {
    let what = "stack container";
    let mut c = crate::training::container_cursor(bytes, what);
    if c.take(4)? != STACK_MAGIC {
        return Err(Error::format(what, "bad magic".to_string()));
    }
    let version = c.u8()?;
    if version != STACK_VERSION {
        return Err(Error::format(what, format!("unsupported version {version}")));
    }
    let width = c.u32()? as usize;
    let height = c.u32()? as usize;
    let bands = c.u32()? as usize;
    let frames = c.u32()? as usize;
    if bands != 4 {
        return Err(Error::format(what, format!("{bands} bands, expected 4")));
    }
    if width == 0 || height == 0 || frames == 0 {
        return Err(Error::format(what, "zero-sized stack".to_string()));
    }
    let k = [c.f64()?, c.f64()?, c.f64()?, c.f64()?];
    let g = c.f64()?;
    let adu_max = c.u16()?;
    let grid = WavenumberGrid::with_spacing_tolerance(k, g, adu_max, 0.05)
        .map_err(|e| Error::format(what, e.to_string()))?;
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_mul(frames))
        .ok_or_else(|| Error::format(what, "dimension overflow".to_string()))?;
    let data = c.take(n)?.to_vec();
    c.done()?;
    if let Some(&v) = data.iter().find(|&&v| v as u16 > grid.adu_max()) {
        return Err(Error::format(
            what,
            format!("intensity {v} exceeds saturation {}", grid.adu_max()),
        ));
    }
    Ok(InterferogramStack {
        width,
        height,
        frames,
        grid,
        metadata: String::new(),
        data,
    })
}

/// Write a map as a CSV matrix, one row per image row. Undefined pixels
/// serialize as NaN.
pub fn write_map_csv(path: &Path, map: &ScalarMap) -> Result<()> {
    let mut out = String::new();
    for y in 0..map.height {
        for x in 0..map.width {
            if x > 0 {
                out.push(',');
            }
            out.push_str(&map.at(x, y).to_string());
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write a map as a 16-bit portable graymap plus a `<stem>.scale.toml`
/// sidecar recording the linear value scale. Undefined pixels are written
/// as 0 and counted in the sidecar.
pub fn write_map_pgm(path: &Path, map: &ScalarMap) -> Result<()> {
    let defined: Vec<f64> = map.values.iter().copied().filter(|v| v.is_finite()).collect();
    if defined.is_empty() {
        return Err(Error::AllMasked);
    }
    let lo = defined.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
    for &v in &map.values {
        let level: u16 = if !v.is_finite() || hi == lo {
            0
        } else {
            (((v - lo) / (hi - lo) * 65535.0).round() as i64).clamp(0, 65535) as u16
        };
        // Portable graymaps store 16-bit samples most significant byte
        // first.
        out.extend_from_slice(&level.to_be_bytes());
    }
    std::fs::write(path, out)?;
    let sidecar = format!(
        "min_um = {}\nmax_um = {}\nundefined_level = 0\nundefined_count = {}\n",
        lo,
        hi,
        map.values.len() - defined.len()
    );
    std::fs::write(path.with_extension("scale.toml"), sidecar)?;
    Ok(())
}
