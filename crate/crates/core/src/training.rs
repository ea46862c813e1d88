//! Constraint-informed training-set generation, network training with
//! validation-based early stopping, and banks of window-specialized
//! networks covering a long OPL span.

use crate::error::{Error, Result};
use crate::net::{
    adam_step, backward, forward_train, loss, save_weights, Architecture, DropoutMasks, Network,
    TrainState, ADAM_LR, DROPOUT_RATE,
};
use crate::rng::SeedTree;
use crate::signal::{mean_intensities, sample_observation, ParamBox, SceneParams, WavenumberGrid};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Named (alpha, V) constraint presets over a caller-chosen OPL window.
pub fn preset_param_box(name: &str, opl_window: (f64, f64)) -> Result<ParamBox> {
    let (alpha, visibility) = match name {
        "DNN1" => ((70.0, 140.0), (0.59, 0.95)),
        "DNN2" => ((115.0, 135.0), (0.65, 0.75)),
        "DNN3" => ((125.0, 130.0), (0.67, 0.72)),
        "DNN4" => ((60.0, 90.0), (0.8, 1.0)),
        other => {
            return Err(Error::InvalidParameter(format!(
                "unknown constraint preset {other:?} (expected DNN1..DNN4)"
            )))
        }
    };
    ParamBox::new(alpha, visibility, opl_window)
}

/// Labelled observations drawn from a constraint box: `opl_points`
/// uniformly gridded OPLs, each observed under `param_draws` random
/// (alpha, V) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub grid: WavenumberGrid,
    pub param_box: ParamBox,
    pub opl_points: usize,
    pub param_draws: usize,
    /// Seed-tree position the set was generated from.
    pub seed: u64,
    pub inputs: Vec<[u16; 4]>,
    /// True OPL of each input, um.
    pub targets: Vec<f64>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

const SAMPLE_ATTEMPTS: usize = 10_000;

/// Generate a training set. OPLs form a uniform grid over the box window
/// including both endpoints (the window midpoint when `opl_points` is 1);
/// (alpha, V) pairs are uniform over the box, rejecting draws whose peak
/// intensity would saturate the camera. Deterministic in `seed` with one
/// stream per sample.
pub fn generate_training_set(
    param_box: &ParamBox,
    grid: &WavenumberGrid,
    opl_points: usize,
    param_draws: usize,
    seed: SeedTree,
) -> Result<TrainingSet> {
    if opl_points < 1 || param_draws < 1 {
        return Err(Error::InvalidParameter(
            "training set needs at least one OPL point and one (alpha, V) draw".into(),
        ));
    }
    let width = param_box.opl_width();
    let limit = grid.max_window();
    if width > limit {
        return Err(Error::WindowTooWide {
            width_um: width,
            limit_um: limit,
        });
    }
    if opl_points > 1 && width == 0.0 {
        return Err(Error::InvalidParameter(
            "degenerate OPL window supports only a single OPL point".into(),
        ));
    }
    let min_peak = param_box.alpha.0 * (1.0 + param_box.visibility.0);
    if min_peak > grid.adu_max() as f64 {
        return Err(Error::InvalidParameter(format!(
            "every (alpha, V) in the box saturates: minimum peak {min_peak} exceeds {}",
            grid.adu_max()
        )));
    }
    let (lo, hi) = param_box.opl;
    let opl_at = |i: usize| -> f64 {
        if opl_points == 1 {
            0.5 * (lo + hi)
        } else {
            lo + width * i as f64 / (opl_points - 1) as f64
        }
    };
    let n = opl_points * param_draws;
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for i in 0..opl_points {
        let l = opl_at(i);
        for j in 0..param_draws {
            let mut rng = seed.child((i * param_draws + j) as u64).rng();
            let mut scene = None;
            for _ in 0..SAMPLE_ATTEMPTS {
                let alpha = rng.random_range(param_box.alpha.0..=param_box.alpha.1);
                let visibility =
                    rng.random_range(param_box.visibility.0..=param_box.visibility.1);
                let p = SceneParams::new(alpha, visibility, l)?;
                if !p.saturates(grid) {
                    scene = Some(p);
                    break;
                }
            }
            let p = scene.ok_or_else(|| {
                Error::InvalidParameter(
                    "could not draw a non-saturating (alpha, V) from the box".into(),
                )
            })?;
            let obs = sample_observation(&mean_intensities(&p, grid), grid, &mut rng);
            inputs.push(obs.0);
            targets.push(l);
        }
    }
    Ok(TrainingSet {
        grid: grid.clone(),
        param_box: *param_box,
        opl_points,
        param_draws,
        seed: seed.value(),
        inputs,
        targets,
    })
}

const SET_MAGIC: [u8; 4] = *b"WSIT";
const SET_VERSION: u8 = 1;

/// Serialize a training set to the binary container: header (magic,
/// version, counts, grid, box, seed), then one byte per intensity in
/// sample-major band order, then the f64 targets. Little-endian.
pub fn save_training_set(set: &TrainingSet) -> Result<Vec<u8>> {
    if set.grid.adu_max() > u8::MAX as u16 {
        return Err(Error::format(
            "training set container",
            format!(
                "intensity payload is 8-bit but adu_max is {}",
                set.grid.adu_max()
            ),
        ));
    }
    if set.len() != set.opl_points * set.param_draws || set.targets.len() != set.len() {
        return Err(Error::format(
            "training set container",
            "sample count does not match opl_points * param_draws".to_string(),
        ));
    }
    let mut out = Vec::with_capacity(21 + 4 * 8 + 8 + 2 + 6 * 8 + 8 + set.len() * 12);
    out.extend_from_slice(&SET_MAGIC);
    out.push(SET_VERSION);
    out.extend_from_slice(&(set.opl_points as u32).to_le_bytes());
    out.extend_from_slice(&(set.param_draws as u32).to_le_bytes());
    for k in set.grid.k() {
        out.extend_from_slice(&k.to_le_bytes());
    }
    out.extend_from_slice(&set.grid.g().to_le_bytes());
    out.extend_from_slice(&set.grid.adu_max().to_le_bytes());
    for v in [
        set.param_box.alpha.0,
        set.param_box.alpha.1,
        set.param_box.visibility.0,
        set.param_box.visibility.1,
        set.param_box.opl.0,
        set.param_box.opl.1,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&set.seed.to_le_bytes());
    for obs in &set.inputs {
        for &band in obs {
            out.push(band as u8);
        }
    }
    for t in &set.targets {
        out.extend_from_slice(&t.to_le_bytes());
    }
    Ok(out)
}

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

/// Reader over a binary container body with truncation diagnostics.
pub(crate) fn container_cursor<'a>(bytes: &'a [u8], what: &'static str) -> Cursor<'a> {
    Cursor {
        bytes,
        pos: 0,
        what,
    }
}

impl<'a> Cursor<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.what, "truncated".to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("width")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("width")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("width")))
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("width")))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.what,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

/// Deserialize a training set container produced by [`save_training_set`].
pub fn load_training_set(bytes: &[u8]) -> Result<TrainingSet> {
    let what = "training set container";
    let mut c = container_cursor(bytes, what);
    if c.take(4)? != SET_MAGIC {
        return Err(Error::format(what, "bad magic".to_string()));
    }
    let version = c.u8()?;
    if version != SET_VERSION {
        return Err(Error::format(what, format!("unsupported version {version}")));
    }
    let opl_points = c.u32()? as usize;
    let param_draws = c.u32()? as usize;
    let k = [c.f64()?, c.f64()?, c.f64()?, c.f64()?];
    let g = c.f64()?;
    let adu_max = c.u16()?;
    let grid = WavenumberGrid::with_spacing_tolerance(k, g, adu_max, 0.05)
        .map_err(|e| Error::format(what, e.to_string()))?;
    let alpha = (c.f64()?, c.f64()?);
    let visibility = (c.f64()?, c.f64()?);
    let opl = (c.f64()?, c.f64()?);
    let param_box =
        ParamBox::new(alpha, visibility, opl).map_err(|e| Error::format(what, e.to_string()))?;
    let seed = c.u64()?;
    let n = opl_points
        .checked_mul(param_draws)
        .ok_or_else(|| Error::format(what, "sample count overflow".to_string()))?;
    let mut inputs = Vec::with_capacity(n);
    for _ in 0..n {
        let raw = c.take(4)?;
        inputs.push([
            raw[0] as u16,
            raw[1] as u16,
            raw[2] as u16,
            raw[3] as u16,
        ]);
    }
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        targets.push(c.f64()?);
    }
    c.done()?;
    Ok(TrainingSet {
        grid,
        param_box,
        opl_points,
        param_draws,
        seed,
        inputs,
        targets,
    })
}

/// Architecture and optimization schedule for [`train_network`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Fraction of samples held out for validation.
    pub val_fraction: f64,
    /// Relative validation-loss decrease that counts as improvement.
    pub min_rel_improvement: f64,
    pub dropout_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Architecture::default(),
            batch_size: 256,
            learning_rate: ADAM_LR,
            max_epochs: 200,
            patience: 20,
            val_fraction: 0.1,
            min_rel_improvement: 1e-4,
            dropout_rate: DROPOUT_RATE,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::InvalidParameter(
                "max_epochs and patience must be positive".into(),
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "validation fraction {} must lie in (0, 0.5)",
                self.val_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidParameter(format!(
                "dropout rate {} must lie in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Loss history and stopping diagnostics from one training run.
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Epoch whose weights the returned network carries.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Mean train-mode batch loss per epoch, normalized units.
    pub train_loss: Vec<f64>,
    /// Infer-mode validation loss per epoch, normalized units.
    pub val_loss: Vec<f64>,
    pub stopped_early: bool,
}

impl TrainReport {
    /// Render as a structured-text (TOML) document.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("train report serializes")
    }
}

/// Train a network on the set with ADAM and early stopping: the samples
/// are split into train and validation parts, and the weights returned
/// are those of the epoch with the lowest validation loss, not the last.
/// Deterministic in `seed` (initialization, split, shuffles, dropout).
pub fn train_network(
    name: &str,
    set: &TrainingSet,
    cfg: &TrainConfig,
    seed: SeedTree,
) -> Result<(Network, TrainReport)> {
    cfg.validate()?;
    let n = set.len();
    if n < 10 {
        return Err(Error::InvalidParameter(format!(
            "training needs at least 10 samples, got {n}"
        )));
    }
    let mut net = Network::init(
        &cfg.arch,
        set.grid.adu_max(),
        set.param_box.opl,
        &mut seed.child(0).rng(),
    )?;
    net.name = name.to_string();
    net.train_box = Some(set.param_box);

    let mut x_all = Vec::with_capacity(n * 4);
    let mut y_all = Vec::with_capacity(n);
    for (obs, &t) in set.inputs.iter().zip(&set.targets) {
        let o = [
            obs[0] as f64,
            obs[1] as f64,
            obs[2] as f64,
            obs[3] as f64,
        ];
        x_all.extend_from_slice(&net.normalize_input(o));
        y_all.push(net.normalize_target(t));
    }

    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut seed.child(1).rng());
    let val_n = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = indices.split_at(val_n);
    let gather = |idx: &[usize]| -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::with_capacity(idx.len() * 4);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(&x_all[i * 4..i * 4 + 4]);
            y.push(y_all[i]);
        }
        (x, y)
    };
    let (val_x, val_y) = gather(val_idx);
    let mut train_order: Vec<usize> = train_idx.to_vec();

    let mut state = TrainState::new(&net, cfg.learning_rate)?;
    let mut best_net = net.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut stall = 0usize;
    let mut report = TrainReport {
        epochs_run: 0,
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        stopped_early: false,
    };

    for epoch in 0..cfg.max_epochs {
        train_order.shuffle(&mut seed.child(2).child(epoch as u64).rng());
        let mut sq_sum = 0.0;
        for (b, batch) in train_order.chunks(cfg.batch_size).enumerate() {
            let (bx, by) = gather(batch);
            let nb = batch.len();
            let masks = DropoutMasks::sample(
                &net,
                nb,
                cfg.dropout_rate,
                &mut seed.child(3).child(epoch as u64).child(b as u64).rng(),
            );
            let cache = forward_train(&net, &bx, nb, &masks);
            sq_sum += cache
                .output
                .iter()
                .zip(&by)
                .map(|(o, t)| (o - t) * (o - t))
                .sum::<f64>();
            let grads = backward(&net, &cache, &by, &masks);
            adam_step(&mut state, &mut net, &grads);
        }
        let train_loss = sq_sum / train_order.len() as f64;
        let val_loss = loss(&net, &val_x, &val_y, val_idx.len());
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::DivergedTraining { epoch });
        }
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        report.epochs_run = epoch + 1;
        if val_loss < best_val * (1.0 - cfg.min_rel_improvement) {
            best_val = val_loss;
            best_epoch = epoch;
            best_net = net.clone();
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }

    report.best_epoch = best_epoch;
    report.best_val_loss = best_val;
    Ok((best_net, report))
}

/// Consecutive training windows stepped by `window - overlap` across the
/// span, the final window shifted back to end exactly at the span's upper
/// edge.
pub fn plan_windows(span: (f64, f64), window: f64, overlap: f64) -> Result<Vec<(f64, f64)>> {
    if !(span.0.is_finite() && span.1.is_finite() && span.0 < span.1) {
        return Err(Error::InvalidParameter(format!(
            "span [{}, {}] is empty or not finite",
            span.0, span.1
        )));
    }
    let width = span.1 - span.0;
    if !(window > 0.0 && window.is_finite()) || window > width + 1e-9 * window.max(width) {
        return Err(Error::InvalidParameter(format!(
            "window {window} must be positive and no wider than the span"
        )));
    }
    if !(overlap >= 0.0 && overlap < window) {
        return Err(Error::InvalidParameter(format!(
            "overlap {overlap} must lie in [0, window)"
        )));
    }
    let step = window - overlap;
    let count = ((span.1 - span.0 - window) / step).ceil() as usize + 1;
    let mut windows: Vec<(f64, f64)> = Vec::with_capacity(count);
    for i in 0..count {
        let mut lo = span.0 + i as f64 * step;
        let mut hi = lo + window;
        if hi > span.1 {
            lo = (span.1 - window).max(span.0);
            hi = span.1;
        }
        if let Some(&(prev_lo, _)) = windows.last() {
            if (lo - prev_lo).abs() < 1e-12 {
                continue;
            }
        }
        windows.push((lo, hi));
    }
    Ok(windows)
}

/// Ordered collection of window-specialized networks jointly covering an
/// OPL span.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkBank {
    pub name: String,
    pub span: (f64, f64),
    pub networks: Vec<Network>,
}

impl NetworkBank {
    /// Assemble a bank from trained members. Windows must be ascending and
    /// each pair of neighbours must overlap.
    pub fn new(name: &str, networks: Vec<Network>) -> Result<Self> {
        if networks.is_empty() {
            return Err(Error::InvalidParameter("bank has no networks".into()));
        }
        for pair in networks.windows(2) {
            let (a, b) = (pair[0].opl_window, pair[1].opl_window);
            if b.0 <= a.0 {
                return Err(Error::InvalidParameter(format!(
                    "bank windows out of order: [{}, {}] then [{}, {}]",
                    a.0, a.1, b.0, b.1
                )));
            }
            if b.0 >= a.1 {
                return Err(Error::InvalidParameter(format!(
                    "bank windows [{}, {}] and [{}, {}] do not overlap",
                    a.0, a.1, b.0, b.1
                )));
            }
        }
        let span = (
            networks.first().expect("nonempty").opl_window.0,
            networks.last().expect("nonempty").opl_window.1,
        );
        Ok(NetworkBank {
            name: name.to_string(),
            span,
            networks,
        })
    }

    pub fn windows(&self) -> Vec<(f64, f64)> {
        self.networks.iter().map(|n| n.opl_window).collect()
    }

    pub fn tag(&self) -> String {
        format!("DNN:{}", self.name)
    }

    /// The member whose window center is nearest the prior estimate; ties
    /// go to the lower window.
    pub fn select(&self, prior_opl: f64) -> Result<&Network> {
        if !(self.span.0..=self.span.1).contains(&prior_opl) {
            return Err(Error::OutOfSpan {
                estimate_um: prior_opl,
                lo_um: self.span.0,
                hi_um: self.span.1,
            });
        }
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (i, net) in self.networks.iter().enumerate() {
            let center = 0.5 * (net.opl_window.0 + net.opl_window.1);
            let dist = (prior_opl - center).abs();
            if dist < best_dist {
                best_dist = dist;
                best = i;
            }
        }
        Ok(&self.networks[best])
    }

    /// Index of the member [`NetworkBank::select`] would return.
    pub fn select_index(&self, prior_opl: f64) -> Result<usize> {
        let net = self.select(prior_opl)?;
        Ok(self
            .networks
            .iter()
            .position(|n| std::ptr::eq(n, net))
            .expect("selected from this bank"))
    }
}

/// Generate a set and train one network per planned window, deriving
/// per-window seeds so results do not depend on evaluation order.
/// `on_window` observes each freshly trained member.
#[allow(clippy::too_many_arguments)]
pub fn build_bank(
    name: &str,
    template: &ParamBox,
    grid: &WavenumberGrid,
    span: (f64, f64),
    window: f64,
    overlap: f64,
    opl_points: usize,
    param_draws: usize,
    cfg: &TrainConfig,
    seed: SeedTree,
    mut on_window: impl FnMut(usize, usize, &Network, &TrainReport),
) -> Result<NetworkBank> {
    let windows = plan_windows(span, window, overlap)?;
    let mut networks = Vec::with_capacity(windows.len());
    for (i, &win) in windows.iter().enumerate() {
        let box_w = template.with_opl(win)?;
        let set = generate_training_set(
            &box_w,
            grid,
            opl_points,
            param_draws,
            seed.child(i as u64).child(0),
        )?;
        let member = format!("{name}-W{i:02}");
        let (net, report) = train_network(&member, &set, cfg, seed.child(i as u64).child(1))?;
        on_window(i, windows.len(), &net, &report);
        networks.push(net);
    }
    NetworkBank::new(name, networks)
}

/// Write a bank as a directory: one weights file per member plus an index.
pub fn save_bank(dir: &Path, bank: &NetworkBank) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut members = Vec::with_capacity(bank.networks.len());
    for (i, net) in bank.networks.iter().enumerate() {
        let file = format!("member-{i:02}.json");
        std::fs::write(dir.join(&file), save_weights(net))?;
        members.push(file);
    }
    #[derive(Serialize)]
    struct Index {
        name: String,
        members: Vec<String>,
    }
    let index = Index {
        name: bank.name.clone(),
        members,
    };
    std::fs::write(
        dir.join("bank.toml"),
        toml::to_string_pretty(&index).expect("bank index serializes"),
    )?;
    Ok(())
}

/// Load a bank saved with [`save_bank`].
pub fn load_bank(dir: &Path) -> Result<NetworkBank> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Index {
        name: String,
        members: Vec<String>,
    }
    let raw = std::fs::read_to_string(dir.join("bank.toml"))?;
    let index: Index =
        toml::from_str(&raw).map_err(|e| Error::format("bank index", e.to_string()))?;
    let mut networks = Vec::with_capacity(index.members.len());
    for file in &index.members {
        let bytes = std::fs::read(dir.join(file))?;
        networks.push(crate::net::load_weights(&bytes)?);
    }
    NetworkBank::new(&index.name, networks)
}
