//! Q-network: a shared LSTM sequence encoder (pretrained as a sequence
//! autoencoder) applied to every asset window, followed by a feed-forward
//! regressor over the concatenated latents and the portfolio weights.
//!
//! Gradients are computed analytically (backpropagation through time for the
//! recurrent parts). Parameter updates are plain SGD.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actionspace::action_count;
use crate::environment::PortfolioState;
use crate::marketdata::{FeatureTensor, FEATURES};

#[derive(Debug, Error)]
pub enum QNetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {what} at epoch {epoch} (last finite loss {last_loss})")]
    Diverged {
        what: &'static str,
        epoch: usize,
        last_loss: f64,
    },
    #[error("no training windows")]
    EmptyDataset,
}

/// Layer sizes of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub assets: usize,
    pub window: usize,
    pub encoder_hidden: usize,
    pub latent: usize,
    pub regressor_hidden: Vec<usize>,
}

impl NetworkShape {
    /// Sizes used for the reported experiments (3 assets).
    pub fn standard(assets: usize) -> Self {
        Self {
            assets,
            window: 20,
            encoder_hidden: 128,
            latent: 20,
            regressor_hidden: vec![64, 32],
        }
    }

    pub fn regressor_input(&self) -> usize {
        self.assets * self.latent + self.assets + 1
    }

    pub fn outputs(&self) -> usize {
        action_count(self.assets)
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Fully connected layer, weights stored row-major as `(outputs, inputs)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            inputs,
            outputs,
            weights: uniform_init(rng, inputs * outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs, self.outputs)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad.weights[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }

    fn params(&self) -> [&[f64]; 2] {
        [&self.weights, &self.bias]
    }

    fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.weights, &mut self.bias]
    }
}

/// Single-layer LSTM. Gate blocks are ordered input, forget, cell, output;
/// weights are `(4 * hidden, inputs + hidden)` acting on `[x_t; h_{t-1}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub inputs: usize,
    pub hidden: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Values cached by [`Lstm::forward`] for backpropagation.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    /// `[x_t; h_{t-1}]` per step.
    concat: Vec<Vec<f64>>,
    /// Activated gates per step.
    gates: Vec<Vec<f64>>,
    cells: Vec<Vec<f64>>,
    cells_tanh: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
}

impl Lstm {
    pub fn new(inputs: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let cols = inputs + hidden;
        Self {
            inputs,
            hidden,
            weights: uniform_init(rng, 4 * hidden * cols, cols),
            bias: vec![0.0; 4 * hidden],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            inputs: self.inputs,
            hidden: self.hidden,
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    /// Runs over `steps` inputs, each of length `self.inputs`.
    pub fn forward<'a, I>(&self, steps: I) -> LstmTrace
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let h = self.hidden;
        let cols = self.inputs + h;
        let mut trace = LstmTrace {
            concat: Vec::new(),
            gates: Vec::new(),
            cells: Vec::new(),
            cells_tanh: Vec::new(),
            hidden: Vec::new(),
        };
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        for x in steps {
            debug_assert_eq!(x.len(), self.inputs);
            let mut u = Vec::with_capacity(cols);
            u.extend_from_slice(x);
            u.extend_from_slice(&h_prev);
            let mut gates: Vec<f64> = self
                .weights
                .chunks_exact(cols)
                .zip(&self.bias)
                .map(|(row, b)| b + row.iter().zip(&u).map(|(w, v)| w * v).sum::<f64>())
                .collect();
            for (k, g) in gates.iter_mut().enumerate() {
                *g = if (2 * h..3 * h).contains(&k) {
                    g.tanh()
                } else {
                    sigmoid(*g)
                };
            }
            let mut c = vec![0.0; h];
            let mut tc = vec![0.0; h];
            let mut hn = vec![0.0; h];
            for j in 0..h {
                c[j] = gates[h + j] * c_prev[j] + gates[j] * gates[2 * h + j];
                tc[j] = c[j].tanh();
                hn[j] = gates[3 * h + j] * tc[j];
            }
            trace.concat.push(u);
            trace.gates.push(gates);
            trace.cells.push(c.clone());
            trace.cells_tanh.push(tc);
            trace.hidden.push(hn.clone());
            h_prev = hn;
            c_prev = c;
        }
        trace
    }

    /// Backpropagation through time. `dh[t]` is the external gradient on
    /// `h_t`. Accumulates into `grad` and returns the gradient per input step.
    pub fn backward(&self, trace: &LstmTrace, dh: &[Vec<f64>], grad: &mut Lstm) -> Vec<Vec<f64>> {
        let h = self.hidden;
        let cols = self.inputs + h;
        let steps = trace.hidden.len();
        let mut dxs = vec![Vec::new(); steps];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let zero = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        for t in (0..steps).rev() {
            let gates = &trace.gates[t];
            let tc = &trace.cells_tanh[t];
            let c_prev = if t > 0 { &trace.cells[t - 1] } else { &zero };
            for j in 0..h {
                let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                let dhj = dh[t][j] + dh_next[j];
                let d_o = dhj * tc[j];
                let dc = dc_next[j] + dhj * o * (1.0 - tc[j] * tc[j]);
                dz[j] = dc * g * i * (1.0 - i);
                dz[h + j] = dc * c_prev[j] * f * (1.0 - f);
                dz[2 * h + j] = dc * i * (1.0 - g * g);
                dz[3 * h + j] = d_o * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            let u = &trace.concat[t];
            let mut du = vec![0.0; cols];
            for (r, &g) in dz.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad.bias[r] += g;
                let row = &self.weights[r * cols..(r + 1) * cols];
                let grow = &mut grad.weights[r * cols..(r + 1) * cols];
                for k in 0..cols {
                    grow[k] += g * u[k];
                    du[k] += g * row[k];
                }
            }
            dh_next.copy_from_slice(&du[self.inputs..]);
            du.truncate(self.inputs);
            dxs[t] = du;
        }
        dxs
    }

    fn params(&self) -> [&[f64]; 2] {
        [&self.weights, &self.bias]
    }

    fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.weights, &mut self.bias]
    }
}

/// Encodes one `(window, 5)` indicator sequence into a latent vector: the
/// last LSTM hidden state followed by a linear projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub lstm: Lstm,
    pub projection: Dense,
}

pub struct EncoderTrace {
    lstm: LstmTrace,
}

impl Encoder {
    pub fn new(hidden: usize, latent: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            lstm: Lstm::new(FEATURES, hidden, rng),
            projection: Dense::new(hidden, latent, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            lstm: self.lstm.zeros_like(),
            projection: self.projection.zeros_like(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden
    }

    pub fn latent(&self) -> usize {
        self.projection.outputs
    }

    pub fn encode(&self, window: &[f64]) -> Vec<f64> {
        self.encode_traced(window).0
    }

    pub fn encode_traced(&self, window: &[f64]) -> (Vec<f64>, EncoderTrace) {
        let lstm = self.lstm.forward(window.chunks_exact(FEATURES));
        let last = lstm.hidden.last().expect("non-empty window");
        (self.projection.forward(last), EncoderTrace { lstm })
    }

    pub fn backward(&self, trace: &EncoderTrace, dlatent: &[f64], grad: &mut Encoder) {
        let steps = trace.lstm.hidden.len();
        let last = &trace.lstm.hidden[steps - 1];
        let dlast = self
            .projection
            .backward(last, dlatent, &mut grad.projection);
        let mut dh = vec![vec![0.0; self.lstm.hidden]; steps];
        dh[steps - 1] = dlast;
        self.lstm.backward(&trace.lstm, &dh, &mut grad.lstm);
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.lstm
            .params()
            .into_iter()
            .chain(self.projection.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let Encoder { lstm, projection } = self;
        lstm.params_mut()
            .into_iter()
            .chain(projection.params_mut())
            .collect()
    }
}

/// Decoder used only during pretraining: the latent is fed at every step
/// and each hidden state is projected back to one feature row. It
/// reconstructs the window in reverse order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub lstm: Lstm,
    pub output: Dense,
}

impl Decoder {
    pub fn new(latent: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            lstm: Lstm::new(latent, hidden, rng),
            output: Dense::new(hidden, FEATURES, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            lstm: self.lstm.zeros_like(),
            output: self.output.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean reconstruction error over all windows: entry 0 before training,
    /// entry `k` after epoch `k`.
    pub losses: Vec<f64>,
}

impl PretrainReport {
    /// `epoch,reconstruction_mse`
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "reconstruction_mse"])?;
        for (epoch, loss) in self.losses.iter().enumerate() {
            w.write_record([epoch.to_string(), loss.to_string()])?;
        }
        w.flush()
    }
}

impl Autoencoder {
    pub fn new(hidden: usize, latent: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            encoder: Encoder::new(hidden, latent, rng),
            decoder: Decoder::new(latent, hidden, rng),
        }
    }

    pub fn seeded(hidden: usize, latent: usize, seed: u64) -> Self {
        Self::new(hidden, latent, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    /// Reconstruction of `window` (reversed order, same shape).
    pub fn reconstruct(&self, window: &[f64]) -> Vec<f64> {
        let latent = self.encoder.encode(window);
        let steps = window.len() / FEATURES;
        let trace = self
            .decoder
            .lstm
            .forward(std::iter::repeat_n(latent.as_slice(), steps));
        trace
            .hidden
            .iter()
            .flat_map(|h| self.decoder.output.forward(h))
            .collect()
    }

    /// Mean squared error between the reconstruction and the reversed window.
    pub fn loss(&self, window: &[f64]) -> f64 {
        let target = reversed(window);
        let out = self.reconstruct(window);
        out.iter()
            .zip(&target)
            .map(|(y, x)| (y - x).powi(2))
            .sum::<f64>()
            / window.len() as f64
    }

    /// Loss and its gradient for one window.
    pub fn gradient(&self, window: &[f64]) -> (f64, Autoencoder) {
        let mut grad = self.zeros_like();
        let steps = window.len() / FEATURES;
        let target = reversed(window);
        let (latent, enc_trace) = self.encoder.encode_traced(window);
        let trace = self
            .decoder
            .lstm
            .forward(std::iter::repeat_n(latent.as_slice(), steps));
        let scale = 2.0 / window.len() as f64;
        let mut loss = 0.0;
        let mut dh = Vec::with_capacity(steps);
        for (t, h) in trace.hidden.iter().enumerate() {
            let y = self.decoder.output.forward(h);
            let dy: Vec<f64> = y
                .iter()
                .zip(&target[t * FEATURES..(t + 1) * FEATURES])
                .map(|(y, x)| {
                    loss += (y - x).powi(2);
                    scale * (y - x)
                })
                .collect();
            dh.push(
                self.decoder
                    .output
                    .backward(h, &dy, &mut grad.decoder.output),
            );
        }
        let dxs = self
            .decoder
            .lstm
            .backward(&trace, &dh, &mut grad.decoder.lstm);
        let mut dlatent = vec![0.0; latent.len()];
        for dx in &dxs {
            add_into(&mut dlatent, dx);
        }
        self.encoder
            .backward(&enc_trace, &dlatent, &mut grad.encoder);
        (loss / window.len() as f64, grad)
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.lstm.params());
        p.extend(self.decoder.output.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let Autoencoder { encoder, decoder } = self;
        let mut p = encoder.params_mut();
        p.extend(decoder.lstm.params_mut());
        p.extend(decoder.output.params_mut());
        p
    }

    fn add_scaled(&mut self, grad: &Autoencoder, scale: f64) {
        for (p, g) in self.params_mut().into_iter().zip(grad.params()) {
            for (x, d) in p.iter_mut().zip(g) {
                *x += scale * d;
            }
        }
    }

    fn mean_loss(&self, windows: &[Vec<f64>]) -> f64 {
        let losses: Vec<f64> = windows.par_iter().map(|w| self.loss(w)).collect();
        losses.iter().sum::<f64>() / windows.len() as f64
    }

    /// Minibatch SGD on reconstruction error. Per-window gradients are
    /// computed in parallel and summed in window order.
    pub fn pretrain(
        &mut self,
        windows: &[Vec<f64>],
        cfg: &PretrainConfig,
    ) -> Result<PretrainReport, QNetError> {
        if windows.is_empty() {
            return Err(QNetError::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..windows.len()).collect();
        let initial = self.mean_loss(windows);
        if !initial.is_finite() {
            return Err(QNetError::Diverged {
                what: "reconstruction loss",
                epoch: 0,
                last_loss: initial,
            });
        }
        let mut losses = vec![initial];
        let batch = cfg.batch_size.max(1);
        for epoch in 1..=cfg.epochs {
            shuffle(&mut order, &mut rng);
            for chunk in order.chunks(batch) {
                let grads: Vec<Autoencoder> = chunk
                    .par_iter()
                    .map(|&i| self.gradient(&windows[i]).1)
                    .collect();
                let mut total = self.zeros_like();
                for g in &grads {
                    total.add_scaled(g, 1.0);
                }
                self.add_scaled(&total, -cfg.learning_rate / chunk.len() as f64);
            }
            let loss = self.mean_loss(windows);
            if !loss.is_finite() {
                return Err(QNetError::Diverged {
                    what: "reconstruction loss",
                    epoch,
                    last_loss: *losses.last().unwrap(),
                });
            }
            losses.push(loss);
        }
        Ok(PretrainReport { losses })
    }
}

fn reversed(window: &[f64]) -> Vec<f64> {
    window
        .chunks_exact(FEATURES)
        .rev()
        .flatten()
        .copied()
        .collect()
}

/// Fisher-Yates with the given generator.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Feed-forward regressor: ReLU hidden layers and a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    pub layers: Vec<Dense>,
}

pub struct RegressorTrace {
    /// Input of each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
}

impl Regressor {
    pub fn new(inputs: usize, hidden: &[usize], outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut sizes = vec![inputs];
        sizes.extend_from_slice(hidden);
        sizes.push(outputs);
        Self {
            layers: sizes
                .windows(2)
                .map(|w| Dense::new(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_traced(x).0
    }

    pub fn forward_traced(&self, x: &[f64]) -> (Vec<f64>, RegressorTrace) {
        let mut trace = RegressorTrace {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len() - 1),
        };
        let mut a = x.to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&a);
            trace.inputs.push(a);
            if k == last {
                return (z, trace);
            }
            a = z.iter().map(|v| v.max(0.0)).collect();
            trace.pre.push(z);
        }
        unreachable!("regressor has at least one layer")
    }

    pub fn backward(&self, trace: &RegressorTrace, dout: &[f64], grad: &mut Regressor) -> Vec<f64> {
        let mut d = dout.to_vec();
        for k in (0..self.layers.len()).rev() {
            d = self.layers[k].backward(&trace.inputs[k], &d, &mut grad.layers[k]);
            if k > 0 {
                for (dv, z) in d.iter_mut().zip(&trace.pre[k - 1]) {
                    if *z <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
        }
        d
    }

    /// ReLU on/off pattern for `x`; used to detect kinks in finite-difference checks.
    pub fn activation_pattern(&self, x: &[f64]) -> Vec<bool> {
        let (_, trace) = self.forward_traced(x);
        trace.pre.iter().flatten().map(|z| *z > 0.0).collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }
}

/// Gradients with the same layout as [`QNetwork`]. `encoder` is `None`
/// when the encoder is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Option<Encoder>,
    pub regressor: Regressor,
}

impl Gradients {
    pub fn zeros_for(net: &QNetwork) -> Self {
        Self {
            encoder: (!net.encoder_frozen).then(|| net.encoder.zeros_like()),
            regressor: net.regressor.zeros_like(),
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        if let (Some(a), Some(b)) = (self.encoder.as_mut(), other.encoder.as_ref()) {
            for (x, y) in a.params_mut().into_iter().zip(b.params()) {
                add_into(x, y);
            }
        }
        for (x, y) in self
            .regressor
            .params_mut()
            .into_iter()
            .zip(other.regressor.params())
        {
            add_into(x, y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        let mut slices = self.regressor.params_mut();
        if let Some(e) = self.encoder.as_mut() {
            slices.extend(e.params_mut());
        }
        for s in slices {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Flattened view, regressor first then encoder.
    pub fn flat(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.regressor.params().concat();
        if let Some(e) = &self.encoder {
            out.extend(e.params().concat());
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    pub assets: usize,
    pub window: usize,
    pub encoder: Encoder,
    pub regressor: Regressor,
    pub encoder_frozen: bool,
}

impl QNetwork {
    /// Random encoder and regressor from one seed.
    pub fn new(shape: &NetworkShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(shape.encoder_hidden, shape.latent, &mut rng);
        Self::with_encoder(shape, encoder, seed.wrapping_add(1))
    }

    /// Fresh regressor on top of a (pretrained) encoder, which starts frozen.
    pub fn with_encoder(shape: &NetworkShape, encoder: Encoder, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let regressor = Regressor::new(
            shape.assets * encoder.latent() + shape.assets + 1,
            &shape.regressor_hidden,
            shape.outputs(),
            &mut rng,
        );
        Self {
            assets: shape.assets,
            window: shape.window,
            encoder,
            regressor,
            encoder_frozen: true,
        }
    }

    pub fn shape(&self) -> NetworkShape {
        NetworkShape {
            assets: self.assets,
            window: self.window,
            encoder_hidden: self.encoder.hidden(),
            latent: self.encoder.latent(),
            regressor_hidden: self.regressor.layers[..self.regressor.layers.len() - 1]
                .iter()
                .map(|l| l.outputs)
                .collect(),
        }
    }

    pub fn outputs(&self) -> usize {
        self.regressor.outputs()
    }

    /// Sets every output-layer parameter to zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.regressor.layers.last_mut().unwrap();
        last.weights.iter_mut().for_each(|w| *w = 0.0);
        last.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    fn check_features(&self, features: &FeatureTensor, weights: &[f64]) -> Result<(), QNetError> {
        if features.shape() != (self.assets, self.window, FEATURES) {
            return Err(QNetError::Shape(format!(
                "features {:?}, network expects ({}, {}, {})",
                features.shape(),
                self.assets,
                self.window,
                FEATURES
            )));
        }
        if weights.len() != self.assets + 1 {
            return Err(QNetError::Shape(format!(
                "{} weights, network expects {}",
                weights.len(),
                self.assets + 1
            )));
        }
        Ok(())
    }

    /// Concatenated per-asset latents for a feature tensor.
    pub fn encode(&self, features: &FeatureTensor) -> Vec<f64> {
        (0..features.assets())
            .flat_map(|a| self.encoder.encode(features.asset_window(a)))
            .collect()
    }

    pub fn q_from_latents(&self, latents: &[f64], weights: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(latents.len() + weights.len());
        x.extend_from_slice(latents);
        x.extend_from_slice(weights);
        self.regressor.forward(&x)
    }

    pub fn q_values(
        &self,
        features: &FeatureTensor,
        weights: &[f64],
    ) -> Result<Vec<f64>, QNetError> {
        self.check_features(features, weights)?;
        Ok(self.q_from_latents(&self.encode(features), weights))
    }

    pub fn forward(&self, state: &PortfolioState) -> Result<Vec<f64>, QNetError> {
        self.q_values(&state.features, &state.weights)
    }

    /// Gradient of `sum_{active j} (z_j - Q_j)^2`. Inactive outputs take
    /// their own prediction as target and contribute nothing. Returns the
    /// loss together with the gradients.
    pub fn backward(
        &self,
        features: &FeatureTensor,
        weights: &[f64],
        targets: &[f64],
        active: &[bool],
    ) -> Result<(f64, Gradients), QNetError> {
        self.check_features(features, weights)?;
        self.check_targets(targets, active)?;
        let traces: Vec<(Vec<f64>, EncoderTrace)> = (0..self.assets)
            .map(|a| self.encoder.encode_traced(features.asset_window(a)))
            .collect();
        let latents: Vec<f64> = traces.iter().flat_map(|(l, _)| l.iter().copied()).collect();
        let (loss, dinput, regressor) = self.regressor_backward(&latents, weights, targets, active);
        let encoder = if self.encoder_frozen {
            None
        } else {
            let mut g = self.encoder.zeros_like();
            let latent = self.encoder.latent();
            for (a, (_, trace)) in traces.iter().enumerate() {
                self.encoder
                    .backward(trace, &dinput[a * latent..(a + 1) * latent], &mut g);
            }
            Some(g)
        };
        Ok((loss, Gradients { encoder, regressor }))
    }

    /// Same as [`QNetwork::backward`] with precomputed latents; only valid
    /// for a frozen encoder.
    pub fn backward_from_latents(
        &self,
        latents: &[f64],
        weights: &[f64],
        targets: &[f64],
        active: &[bool],
    ) -> Result<(f64, Gradients), QNetError> {
        self.check_targets(targets, active)?;
        let (loss, _, regressor) = self.regressor_backward(latents, weights, targets, active);
        Ok((
            loss,
            Gradients {
                encoder: None,
                regressor,
            },
        ))
    }

    fn check_targets(&self, targets: &[f64], active: &[bool]) -> Result<(), QNetError> {
        if targets.len() != self.outputs() || active.len() != self.outputs() {
            return Err(QNetError::Shape(format!(
                "targets {} / mask {}, network has {} outputs",
                targets.len(),
                active.len(),
                self.outputs()
            )));
        }
        Ok(())
    }

    fn regressor_backward(
        &self,
        latents: &[f64],
        weights: &[f64],
        targets: &[f64],
        active: &[bool],
    ) -> (f64, Vec<f64>, Regressor) {
        let mut x = Vec::with_capacity(latents.len() + weights.len());
        x.extend_from_slice(latents);
        x.extend_from_slice(weights);
        let (q, trace) = self.regressor.forward_traced(&x);
        let mut loss = 0.0;
        let dq: Vec<f64> = q
            .iter()
            .zip(targets)
            .zip(active)
            .map(|((q, z), on)| {
                if *on {
                    loss += (z - q).powi(2);
                    -2.0 * (z - q)
                } else {
                    0.0
                }
            })
            .collect();
        let mut grad = self.regressor.zeros_like();
        let dinput = self.regressor.backward(&trace, &dq, &mut grad);
        (loss, dinput, grad)
    }

    /// `theta <- theta - lr * grad`; the encoder is untouched while frozen.
    pub fn sgd_update(&mut self, grads: &Gradients, learning_rate: f64) {
        for (p, g) in self
            .regressor
            .params_mut()
            .into_iter()
            .zip(grads.regressor.params())
        {
            for (x, d) in p.iter_mut().zip(g) {
                *x -= learning_rate * d;
            }
        }
        if self.encoder_frozen {
            return;
        }
        if let Some(ge) = &grads.encoder {
            for (p, g) in self.encoder.params_mut().into_iter().zip(ge.params()) {
                for (x, d) in p.iter_mut().zip(g) {
                    *x -= learning_rate * d;
                }
            }
        }
    }

    /// Deep copy used as the target network.
    pub fn clone_to_target(&self) -> QNetwork {
        self.clone()
    }

    /// Flattened parameters, regressor first then encoder.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.regressor.params().concat();
        out.extend(self.encoder.params().concat());
        out
    }

    pub fn all_finite(&self) -> bool {
        self.flat_params().iter().all(|v| v.is_finite())
    }
}

/// Every per-asset `(window, 5)` block for periods in `periods`.
pub fn training_windows(
    market: &crate::marketdata::MarketData,
    periods: std::ops::RangeInclusive<usize>,
    window: usize,
) -> Result<Vec<Vec<f64>>, crate::marketdata::DataError> {
    let mut out = Vec::new();
    for t in periods {
        let x = market.feature_tensor(t, window)?;
        for a in 0..x.assets() {
            out.push(x.asset_window(a).to_vec());
        }
    }
    Ok(out)
}
