//! From-scratch fully connected regression network: sigmoid activations
//! throughout, two light dropout sites, mean-squared-error loss, exact
//! backpropagation, and the ADAM optimizer.
//!
//! The published topology is nine layers counted as node ranks: the 4-wide
//! input, seven hidden layers each half the width of the previous one, and
//! a single output neuron. Inputs are intensities scaled by `1/adu_max`
//! into [0, 1]; the target OPL is affinely mapped from the training window
//! onto [0, 1] so the sigmoid output can represent it, and mapped back at
//! inference. Both constants travel with the weights.
//!
//! Everything is dense `f64` on flat row-major buffers. Training is
//! single-threaded and bit-deterministic for a fixed seed.

use crate::error::{Error, EstimateError, Result};
use crate::estimators::OplEstimator;
use crate::signal::ParamBox;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dropout keep-one-in rate at the two declared sites.
pub const DROPOUT_RATE: f64 = 0.01;

/// Default ADAM hyperparameters; the learning rate is the published value.
pub const ADAM_LR: f64 = 0.0005;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Hidden-layer widths. The published network halves the width seven
/// times starting from a configurable first width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<usize>,
}

impl Architecture {
    /// Seven hidden layers, each half the previous width (integer floor,
    /// never below 1).
    pub fn halving(start: usize) -> Self {
        let mut hidden = Vec::with_capacity(7);
        let mut w = start.max(1);
        for _ in 0..7 {
            hidden.push(w);
            w = (w / 2).max(1);
        }
        Architecture { hidden }
    }

    /// Node ranks including input and output. The published count is 9.
    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 2
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::halving(512)
    }
}

/// One dense stage: row-major `rows x cols` weights plus a bias per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    #[serde(rename = "in")]
    pub rows: usize,
    #[serde(rename = "out")]
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// A trained (or training) network plus the normalization constants and
/// provenance needed to use it as an OPL estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub name: String,
    pub layers: Vec<Layer>,
    /// Camera saturation level used to scale inputs into [0, 1].
    pub adu_max: u16,
    /// OPL window (um) the sigmoid output is affinely mapped onto.
    pub opl_window: (f64, f64),
    /// Constraint box the training set was drawn from, if trained.
    pub train_box: Option<ParamBox>,
}

impl Network {
    /// Fresh network with uniform `[-1, 1] / sqrt(fan_in)` weights and zero
    /// biases.
    pub fn init(
        arch: &Architecture,
        adu_max: u16,
        opl_window: (f64, f64),
        rng: &mut (impl Rng + ?Sized),
    ) -> Result<Self> {
        if opl_window.1 <= opl_window.0 {
            return Err(Error::InvalidParameter(format!(
                "OPL window [{}, {}] is empty",
                opl_window.0, opl_window.1
            )));
        }
        if arch.hidden.is_empty() {
            return Err(Error::InvalidParameter("no hidden layers".into()));
        }
        let mut dims = Vec::with_capacity(arch.hidden.len() + 2);
        dims.push(4usize);
        dims.extend_from_slice(&arch.hidden);
        dims.push(1usize);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for win in dims.windows(2) {
            let (rows, cols) = (win[0], win[1]);
            let scale = 1.0 / (rows as f64).sqrt();
            let w = (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0) * scale)
                .collect();
            layers.push(Layer {
                rows,
                cols,
                w,
                b: vec![0.0; cols],
            });
        }
        Ok(Network {
            name: "DNN".to_string(),
            layers,
            adu_max,
            opl_window,
            train_box: None,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len() + 1
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Scale raw ADU intensities into the unit inputs the network sees.
    pub fn normalize_input(&self, obs: [f64; 4]) -> [f64; 4] {
        obs.map(|v| v / f64::from(self.adu_max))
    }

    /// Map a unit-interval network output back to um.
    pub fn denormalize_output(&self, y: f64) -> f64 {
        self.opl_window.0 + y * (self.opl_window.1 - self.opl_window.0)
    }

    /// Map an OPL in um onto the unit training target.
    pub fn normalize_target(&self, opl: f64) -> f64 {
        (opl - self.opl_window.0) / (self.opl_window.1 - self.opl_window.0)
    }

    /// Inference on a batch of raw ADU intensity vectors, returning um.
    /// Dropout is disabled; inherently deterministic.
    pub fn infer(&self, obs: &[[f64; 4]]) -> Vec<f64> {
        let n = obs.len();
        let mut x = Vec::with_capacity(n * 4);
        for o in obs {
            x.extend_from_slice(&self.normalize_input(*o));
        }
        let out = self.forward_normalized(&x, n);
        out.into_iter().map(|y| self.denormalize_output(y)).collect()
    }

    /// Infer-mode forward pass on already normalized inputs (row-major
    /// `n x 4`), returning the raw unit-interval outputs.
    pub fn forward_normalized(&self, x: &[f64], n: usize) -> Vec<f64> {
        assert_eq!(x.len(), n * 4, "input buffer shape mismatch");
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            next.clear();
            next.resize(n * layer.cols, 0.0);
            affine(&cur, n, layer, &mut next);
            sigmoid_in_place(&mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }
}

/// `out = x . w + b` with `x: n x rows`, `w: rows x cols` row-major.
/// The k-loop is unrolled by four to cut traffic on the accumulator rows.
fn affine(x: &[f64], n: usize, layer: &Layer, out: &mut [f64]) {
    let (rows, cols) = (layer.rows, layer.cols);
    debug_assert_eq!(x.len(), n * rows);
    debug_assert_eq!(out.len(), n * cols);
    for i in 0..n {
        let orow = &mut out[i * cols..(i + 1) * cols];
        orow.copy_from_slice(&layer.b);
        let xrow = &x[i * rows..(i + 1) * rows];
        let mut k = 0;
        while k + 4 <= rows {
            let (a0, a1, a2, a3) = (xrow[k], xrow[k + 1], xrow[k + 2], xrow[k + 3]);
            let w0 = &layer.w[k * cols..(k + 1) * cols];
            let w1 = &layer.w[(k + 1) * cols..(k + 2) * cols];
            let w2 = &layer.w[(k + 2) * cols..(k + 3) * cols];
            let w3 = &layer.w[(k + 3) * cols..(k + 4) * cols];
            for j in 0..cols {
                orow[j] += a0 * w0[j] + a1 * w1[j] + a2 * w2[j] + a3 * w3[j];
            }
            k += 4;
        }
        while k < rows {
            let a = xrow[k];
            let wrow = &layer.w[k * cols..(k + 1) * cols];
            for j in 0..cols {
                orow[j] += a * wrow[j];
            }
            k += 1;
        }
    }
}

fn sigmoid_in_place(z: &mut [f64]) {
    for v in z.iter_mut() {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
}

/// Inverted-dropout masks for the two sites: after the first hidden layer
/// and on the input of the output layer. Entries are `0` or `1/(1-rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub first_hidden: Vec<f64>,
    pub before_output: Vec<f64>,
}

impl DropoutMasks {
    /// Sample fresh masks for a batch of `n` samples.
    pub fn sample(net: &Network, n: usize, rate: f64, rng: &mut (impl Rng + ?Sized)) -> Self {
        let keep = 1.0 / (1.0 - rate);
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect()
        };
        let first = net.layers.first().expect("network has layers").cols;
        let last = net.layers.last().expect("network has layers").rows;
        DropoutMasks {
            first_hidden: draw(n * first),
            before_output: draw(n * last),
        }
    }

    /// All-pass masks; makes train-mode forward equal infer-mode forward.
    pub fn identity(net: &Network, n: usize) -> Self {
        let first = net.layers.first().expect("network has layers").cols;
        let last = net.layers.last().expect("network has layers").rows;
        DropoutMasks {
            first_hidden: vec![1.0; n * first],
            before_output: vec![1.0; n * last],
        }
    }
}

/// Activations recorded by a train-mode forward pass, as inputs to each
/// stage (dropout already applied) plus the final output.
pub struct ForwardCache {
    /// `stage_inputs[i]` is the activation row-block fed to layer `i`.
    stage_inputs: Vec<Vec<f64>>,
    /// Raw (pre-dropout) activations of each hidden stage output.
    raw_activations: Vec<Vec<f64>>,
    /// Final outputs, `n x 1`.
    pub output: Vec<f64>,
    n: usize,
}

/// Train-mode forward pass with explicit dropout masks. Masks are passed
/// in rather than sampled here so gradient checks can freeze them.
pub fn forward_train(net: &Network, x: &[f64], n: usize, masks: &DropoutMasks) -> ForwardCache {
    assert_eq!(x.len(), n * 4);
    let stages = net.layers.len();
    let mut stage_inputs = Vec::with_capacity(stages);
    let mut raw_activations = Vec::with_capacity(stages);
    let mut cur = x.to_vec();
    for (i, layer) in net.layers.iter().enumerate() {
        stage_inputs.push(cur.clone());
        let mut z = vec![0.0; n * layer.cols];
        affine(&cur, n, layer, &mut z);
        sigmoid_in_place(&mut z);
        raw_activations.push(z.clone());
        if i == 0 {
            for (v, m) in z.iter_mut().zip(&masks.first_hidden) {
                *v *= m;
            }
        }
        if i == stages - 2 {
            for (v, m) in z.iter_mut().zip(&masks.before_output) {
                *v *= m;
            }
        }
        cur = z;
    }
    ForwardCache {
        stage_inputs,
        raw_activations,
        output: cur,
        n,
    }
}

/// Mean-squared-error loss of infer-mode predictions against unit-interval
/// targets.
pub fn loss(net: &Network, x: &[f64], y: &[f64], n: usize) -> f64 {
    assert_eq!(y.len(), n);
    let out = net.forward_normalized(x, n);
    out.iter()
        .zip(y)
        .map(|(o, t)| (o - t) * (o - t))
        .sum::<f64>()
        / n as f64
}

/// Gradients of the batch MSE with respect to every weight and bias.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

/// Exact backpropagation through the cached forward pass. The masks must
/// be the ones used in the forward pass.
pub fn backward(
    net: &Network,
    cache: &ForwardCache,
    y: &[f64],
    masks: &DropoutMasks,
) -> Gradients {
    let n = cache.n;
    assert_eq!(y.len(), n);
    let stages = net.layers.len();
    let mut gw: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.w.len()]).collect();
    let mut gb: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect();

    // Output stage: d(mse)/d(o) = 2 (o - y) / n, chained through the final
    // sigmoid. The output activation is never dropped.
    let mut delta: Vec<f64> = cache
        .output
        .iter()
        .zip(y)
        .map(|(o, t)| 2.0 * (o - t) / n as f64 * o * (1.0 - o))
        .collect();

    for i in (0..stages).rev() {
        let layer = &net.layers[i];
        let a_in = &cache.stage_inputs[i];
        // gw[i] = a_in^T . delta, accumulated sample by sample.
        let g = &mut gw[i];
        let gbi = &mut gb[i];
        let cols = layer.cols;
        let rows = layer.rows;
        for s in 0..n {
            let arow = &a_in[s * rows..(s + 1) * rows];
            let drow = &delta[s * cols..(s + 1) * cols];
            for (r, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let grow = &mut g[r * cols..(r + 1) * cols];
                for j in 0..cols {
                    grow[j] += a * drow[j];
                }
            }
            for j in 0..cols {
                gbi[j] += drow[j];
            }
        }
        if i == 0 {
            break;
        }
        // delta_prev = (delta . w^T) * mask * a' where a' = a (1 - a) uses
        // the raw (pre-dropout) activation of the previous stage.
        let prev_raw = &cache.raw_activations[i - 1];
        let mut next_delta = vec![0.0; n * rows];
        for s in 0..n {
            let drow = &delta[s * cols..(s + 1) * cols];
            let ndrow = &mut next_delta[s * rows..(s + 1) * rows];
            for r in 0..rows {
                let wrow = &layer.w[r * cols..(r + 1) * cols];
                let mut acc = 0.0;
                for j in 0..cols {
                    acc += drow[j] * wrow[j];
                }
                ndrow[r] = acc;
            }
        }
        if i == 1 {
            for (v, m) in next_delta.iter_mut().zip(&masks.first_hidden) {
                *v *= m;
            }
        }
        if i == stages - 1 {
            for (v, m) in next_delta.iter_mut().zip(&masks.before_output) {
                *v *= m;
            }
        }
        for (v, a) in next_delta.iter_mut().zip(prev_raw) {
            *v *= a * (1.0 - a);
        }
        delta = next_delta;
    }
    Gradients { w: gw, b: gb }
}

/// ADAM optimizer state: bias-corrected first and second moments shaped
/// like the network.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
}

impl TrainState {
    pub fn new(net: &Network, lr: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(TrainState {
            step: 0,
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            m_w: net.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            v_w: net.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            m_b: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
            v_b: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        })
    }
}

/// One ADAM update of the network in place.
pub fn adam_step(state: &mut TrainState, net: &mut Network, grads: &Gradients) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    };
    for (i, layer) in net.layers.iter_mut().enumerate() {
        update(&mut layer.w, &grads.w[i], &mut state.m_w[i], &mut state.v_w[i]);
        update(&mut layer.b, &grads.b[i], &mut state.m_b[i], &mut state.v_b[i]);
    }
}

impl OplEstimator for Network {
    fn estimate(&self, obs: [f64; 4]) -> std::result::Result<f64, EstimateError> {
        Ok(self.infer(&[obs])[0])
    }

    fn estimate_batch(&self, obs: &[[f64; 4]]) -> Vec<std::result::Result<f64, EstimateError>> {
        self.infer(obs).into_iter().map(Ok).collect()
    }

    fn tag(&self) -> String {
        format!("DNN:{}", self.name)
    }
}

// ---------------------------------------------------------------------
// Weight file serialization
// ---------------------------------------------------------------------

const WEIGHTS_FORMAT: &str = "wsi-demod-network";
const WEIGHTS_VERSION: u32 = 1;

/// On-disk weight document. JSON with a fixed field order, so the
/// save -> load -> save round trip is byte-identical.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsFile {
    format: String,
    version: u32,
    name: String,
    activation: String,
    dropout_rate: f64,
    dropout_sites: [String; 2],
    adu_max: u16,
    opl_window_um: (f64, f64),
    train_box: Option<ParamBox>,
    layers: Vec<Layer>,
}

/// Serialize a network to the versioned weight document.
pub fn save_weights(net: &Network) -> Vec<u8> {
    let doc = WeightsFile {
        format: WEIGHTS_FORMAT.to_string(),
        version: WEIGHTS_VERSION,
        name: net.name.clone(),
        activation: "sigmoid".to_string(),
        dropout_rate: DROPOUT_RATE,
        dropout_sites: [
            "after-first-hidden".to_string(),
            "before-output".to_string(),
        ],
        adu_max: net.adu_max,
        opl_window_um: net.opl_window,
        train_box: net.train_box,
        layers: net.layers.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&doc).expect("weight document serializes");
    bytes.push(b'\n');
    bytes
}

/// Parse and validate a weight document.
pub fn load_weights(bytes: &[u8]) -> Result<Network> {
    let doc: WeightsFile = serde_json::from_slice(bytes)
        .map_err(|e| Error::format("weight file", e.to_string()))?;
    if doc.format != WEIGHTS_FORMAT {
        return Err(Error::format(
            "weight file",
            format!("unknown format tag {:?}", doc.format),
        ));
    }
    if doc.version != WEIGHTS_VERSION {
        return Err(Error::format(
            "weight file",
            format!("unsupported version {}", doc.version),
        ));
    }
    if doc.layers.is_empty() {
        return Err(Error::format("weight file", "no layers".to_string()));
    }
    let mut prev_cols = 4usize;
    for (i, layer) in doc.layers.iter().enumerate() {
        if layer.rows != prev_cols {
            return Err(Error::format(
                "weight file",
                format!(
                    "layer {i} expects {} inputs but previous layer provides {prev_cols}",
                    layer.rows
                ),
            ));
        }
        if layer.w.len() != layer.rows * layer.cols || layer.b.len() != layer.cols {
            return Err(Error::format(
                "weight file",
                format!("layer {i} dimension mismatch"),
            ));
        }
        if layer.w.iter().chain(&layer.b).any(|v| !v.is_finite()) {
            return Err(Error::format(
                "weight file",
                format!("layer {i} contains non-finite values"),
            ));
        }
        prev_cols = layer.cols;
    }
    if prev_cols != 1 {
        return Err(Error::format(
            "weight file",
            format!("output dimension {prev_cols}, expected 1"),
        ));
    }
    if doc.opl_window_um.1 <= doc.opl_window_um.0 {
        return Err(Error::format("weight file", "empty OPL window".to_string()));
    }
    Ok(Network {
        name: doc.name,
        layers: doc.layers,
        adu_max: doc.adu_max,
        opl_window: doc.opl_window_um,
        train_box: doc.train_box,
    })
}
