//! LSTM variational autoencoder over joint-state windows.
//!
//! The encoder runs an LSTM over the window, squeezes the final hidden state
//! through a tanh layer, and emits the mean and log-variance of a 2-D
//! diagonal Gaussian posterior. The decoder maps a latent sample through a
//! tanh layer, feeds that vector to a second LSTM at every timestep, and
//! projects each hidden state back to the input channels.
//!
//! Training minimizes the negative ELBO per window:
//! mean squared reconstruction error over all `W·channels` elements plus
//! `−(β/2)·Σ_j (1 + log σ²_j − μ_j² − σ²_j)` summed over the two latent
//! dimensions. The prior is the standard normal.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};
use crate::data::{DataError, Normalizer, Window, WindowSource};
use crate::nn::{
    dense_forward, lstm_sequence, lstm_unroll, Activation, BoundDense, BoundLstm, DenseLayer,
    LstmLayer, NnError, Optimizer, OptimizerKind,
};
use crate::random::{derive_seed, seeded, standard_normal};

pub const LATENT_DIM: usize = 2;
pub const FORMAT_VERSION: &str = "1";
/// Windows per tape during inference; bounds memory on long trajectories.
const INFERENCE_BATCH: usize = 128;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: String,
        actual: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("model file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<AutodiffError> for VaeError {
    fn from(e: AutodiffError) -> Self {
        VaeError::Nn(NnError::Autodiff(e))
    }
}

pub type Result<T> = std::result::Result<T, VaeError>;

/// Parameters of the diagonal Gaussian posterior for one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentCode {
    pub mu: [f64; LATENT_DIM],
    pub log_var: [f64; LATENT_DIM],
}

impl LatentCode {
    /// The standard normal prior `N(0, I)`.
    pub const PRIOR: LatentCode = LatentCode {
        mu: [0.0; LATENT_DIM],
        log_var: [0.0; LATENT_DIM],
    };

    pub fn sigma(&self) -> [f64; LATENT_DIM] {
        self.log_var.map(|lv| (0.5 * lv).exp())
    }

    pub fn variance(&self) -> [f64; LATENT_DIM] {
        self.log_var.map(f64::exp)
    }
}

/// `z = μ + ε ⊙ exp(½·log σ²)`.
pub fn reparameterize(code: &LatentCode, eps: [f64; LATENT_DIM]) -> [f64; LATENT_DIM] {
    let sigma = code.sigma();
    [
        code.mu[0] + eps[0] * sigma[0],
        code.mu[1] + eps[1] * sigma[1],
    ]
}

/// `KL(q ‖ N(0, I))` scaled by β: `−(β/2)·Σ_j (1 + log σ²_j − μ_j² − σ²_j)`.
pub fn kl_divergence(code: &LatentCode, beta: f64) -> f64 {
    let s: f64 = (0..LATENT_DIM)
        .map(|j| 1.0 + code.log_var[j] - code.mu[j] * code.mu[j] - code.log_var[j].exp())
        .sum();
    -0.5 * beta * s
}

/// Mean of `(x − x_pred)²` over every element of the window.
pub fn reconstruction_loss(x: &Window, x_pred: &Window) -> Result<f64> {
    if x.window_len != x_pred.window_len || x.channels != x_pred.channels {
        return Err(VaeError::Shape {
            what: "reconstruction",
            expected: format!("{}×{}", x.window_len, x.channels),
            actual: format!("{}×{}", x_pred.window_len, x_pred.channels),
        });
    }
    let n = x.values.len() as f64;
    Ok(x.values
        .iter()
        .zip(&x_pred.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// How squared reconstruction errors enter the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Mean over the window's elements.
    Mean,
    /// Sum over the window's elements: the unit-variance Gaussian negative
    /// log-likelihood up to constants.
    #[default]
    Sum,
}

impl Reduction {
    /// Factor applied to the per-element mean for a window of `elements`.
    pub fn weight(self, elements: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0,
            Reduction::Sum => elements as f64,
        }
    }
}

impl std::str::FromStr for Reduction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            other => Err(format!(
                "unknown reduction '{other}' (expected mean or sum)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub channels: usize,
    pub window_len: usize,
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    pub encoder_dense: usize,
    pub decoder_dense: usize,
    pub decoder_hidden: usize,
    pub beta: f64,
    #[serde(default)]
    pub reconstruction: Reduction,
}

impl VaeConfig {
    /// Default architecture for `channels` inputs and windows of `window_len`.
    pub fn new(channels: usize, window_len: usize) -> Self {
        Self {
            channels,
            window_len,
            latent_dim: LATENT_DIM,
            encoder_hidden: 32,
            encoder_dense: 16,
            decoder_dense: 16,
            decoder_hidden: 32,
            beta: 1.0,
            reconstruction: Reduction::Sum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim != LATENT_DIM {
            return Err(VaeError::Config(format!(
                "latent_dim must be {LATENT_DIM}, got {}",
                self.latent_dim
            )));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(3) {
            return Err(VaeError::Config(format!(
                "channels must be 3·n_J, got {}",
                self.channels
            )));
        }
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return Err(VaeError::Config(format!(
                "beta must be ≥ 1, got {}",
                self.beta
            )));
        }
        let sizes = [
            self.window_len,
            self.encoder_hidden,
            self.encoder_dense,
            self.decoder_dense,
            self.decoder_hidden,
        ];
        if sizes.contains(&0) {
            return Err(VaeError::Config(
                "layer sizes and window length must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn n_joints(&self) -> usize {
        self.channels / 3
    }

    /// Parameter names and shapes in canonical order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut layout = Vec::new();
        let lstm =
            |layout: &mut Vec<(String, Vec<usize>)>, prefix: &str, input: usize, hidden: usize| {
                for gate in ["w_i", "w_f", "w_o", "w_g"] {
                    layout.push((format!("{prefix}.{gate}"), vec![hidden, input + hidden]));
                }
                for gate in ["b_i", "b_f", "b_o", "b_g"] {
                    layout.push((format!("{prefix}.{gate}"), vec![hidden]));
                }
            };
        let dense =
            |layout: &mut Vec<(String, Vec<usize>)>, prefix: &str, input: usize, output: usize| {
                layout.push((format!("{prefix}.weight"), vec![output, input]));
                layout.push((format!("{prefix}.bias"), vec![output]));
            };
        lstm(
            &mut layout,
            "encoder.lstm",
            self.channels,
            self.encoder_hidden,
        );
        dense(
            &mut layout,
            "encoder.dense",
            self.encoder_hidden,
            self.encoder_dense,
        );
        dense(&mut layout, "encoder.mu", self.encoder_dense, LATENT_DIM);
        dense(
            &mut layout,
            "encoder.log_var",
            self.encoder_dense,
            LATENT_DIM,
        );
        dense(&mut layout, "decoder.dense", LATENT_DIM, self.decoder_dense);
        lstm(
            &mut layout,
            "decoder.lstm",
            self.decoder_dense,
            self.decoder_hidden,
        );
        dense(
            &mut layout,
            "decoder.output",
            self.decoder_hidden,
            self.channels,
        );
        layout
    }
}

/// Encoder and decoder weights together with the data statistics they were
/// trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub config: VaeConfig,
    pub encoder_lstm: LstmLayer,
    pub encoder_dense: DenseLayer,
    pub mu_head: DenseLayer,
    pub log_var_head: DenseLayer,
    pub decoder_dense: DenseLayer,
    pub decoder_lstm: LstmLayer,
    pub output: DenseLayer,
    pub normalizer: Normalizer,
    pub seed: u64,
    /// Anomaly threshold calibrated after training, if any.
    pub threshold: Option<f64>,
}

/// Loss terms averaged over the windows of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

impl VaeModel {
    /// Glorot-initialized model.
    pub fn new(config: VaeConfig, normalizer: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(derive_seed(seed, 0));
        let c = &config;
        let model = Self {
            encoder_lstm: LstmLayer::glorot(&mut rng, c.channels, c.encoder_hidden),
            encoder_dense: DenseLayer::glorot(
                &mut rng,
                c.encoder_hidden,
                c.encoder_dense,
                Activation::Tanh,
            ),
            mu_head: DenseLayer::glorot(
                &mut rng,
                c.encoder_dense,
                LATENT_DIM,
                Activation::Identity,
            ),
            log_var_head: DenseLayer::glorot(
                &mut rng,
                c.encoder_dense,
                LATENT_DIM,
                Activation::Identity,
            ),
            decoder_dense: DenseLayer::glorot(
                &mut rng,
                LATENT_DIM,
                c.decoder_dense,
                Activation::Tanh,
            ),
            decoder_lstm: LstmLayer::glorot(&mut rng, c.decoder_dense, c.decoder_hidden),
            output: DenseLayer::glorot(
                &mut rng,
                c.decoder_hidden,
                c.channels,
                Activation::Identity,
            ),
            normalizer,
            seed,
            threshold: None,
            config,
        };
        model.check_normalizer()?;
        Ok(model)
    }

    /// Model with every weight and bias set to zero.
    pub fn zeroed(config: VaeConfig, normalizer: Normalizer) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let model = Self {
            encoder_lstm: LstmLayer::zeros(c.channels, c.encoder_hidden),
            encoder_dense: DenseLayer::zeros(c.encoder_hidden, c.encoder_dense, Activation::Tanh),
            mu_head: DenseLayer::zeros(c.encoder_dense, LATENT_DIM, Activation::Identity),
            log_var_head: DenseLayer::zeros(c.encoder_dense, LATENT_DIM, Activation::Identity),
            decoder_dense: DenseLayer::zeros(LATENT_DIM, c.decoder_dense, Activation::Tanh),
            decoder_lstm: LstmLayer::zeros(c.decoder_dense, c.decoder_hidden),
            output: DenseLayer::zeros(c.decoder_hidden, c.channels, Activation::Identity),
            normalizer,
            seed: 0,
            threshold: None,
            config,
        };
        model.check_normalizer()?;
        Ok(model)
    }

    fn check_normalizer(&self) -> Result<()> {
        self.normalizer.validate()?;
        if self.normalizer.channels() != self.config.channels {
            return Err(VaeError::Config(format!(
                "normalizer has {} channels, model expects {}",
                self.normalizer.channels(),
                self.config.channels
            )));
        }
        Ok(())
    }

    /// Parameters in [`VaeConfig::parameter_layout`] order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::with_capacity(26);
        out.extend(self.encoder_lstm.params());
        out.extend(self.encoder_dense.params());
        out.extend(self.mu_head.params());
        out.extend(self.log_var_head.params());
        out.extend(self.decoder_dense.params());
        out.extend(self.decoder_lstm.params());
        out.extend(self.output.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(26);
        out.extend(self.encoder_lstm.params_mut());
        out.extend(self.encoder_dense.params_mut());
        out.extend(self.mu_head.params_mut());
        out.extend(self.log_var_head.params_mut());
        out.extend(self.decoder_dense.params_mut());
        out.extend(self.decoder_lstm.params_mut());
        out.extend(self.output.params_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundVae> {
        let ids: Vec<NodeId> = self
            .params()
            .into_iter()
            .map(|p| tape.variable(p.clone()))
            .collect();
        BoundVae::from_nodes(tape, &ids, self.config.window_len)
    }

    fn check_window(&self, w: &Window) -> Result<()> {
        if w.window_len != self.config.window_len || w.channels != self.config.channels {
            return Err(VaeError::Shape {
                what: "window",
                expected: format!("{}×{}", self.config.window_len, self.config.channels),
                actual: format!("{}×{}", w.window_len, w.channels),
            });
        }
        Ok(())
    }

    pub fn encode(&self, w: &Window) -> Result<LatentCode> {
        Ok(self.encode_batch(&[w])?.remove(0))
    }

    pub fn encode_batch(&self, windows: &[&Window]) -> Result<Vec<LatentCode>> {
        windows.iter().try_for_each(|w| self.check_window(w))?;
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(INFERENCE_BATCH) {
            let mut tape = Tape::new();
            let vae = self.bind(&mut tape)?;
            let (mu, log_var) = vae.encode(&mut tape, chunk)?;
            out.extend(latent_codes(&tape, mu, log_var));
        }
        Ok(out)
    }

    pub fn decode(&self, z: [f64; LATENT_DIM]) -> Result<Window> {
        Ok(self.decode_batch(&[z])?.remove(0))
    }

    pub fn decode_batch(&self, zs: &[[f64; LATENT_DIM]]) -> Result<Vec<Window>> {
        if zs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(VaeError::Config("latent sample is not finite".into()));
        }
        let mut out = Vec::with_capacity(zs.len());
        for chunk in zs.chunks(INFERENCE_BATCH) {
            let mut tape = Tape::new();
            let vae = self.bind(&mut tape)?;
            let z = tape.constant(Tensor::matrix(chunk.len(), LATENT_DIM, chunk.concat())?);
            let decoded = vae.decode(&mut tape, z)?;
            out.extend(self.windows_from_rows(&tape, decoded)?);
        }
        for (i, w) in out.iter_mut().enumerate() {
            w.source = WindowSource {
                trajectory: "decoded".into(),
                start: i,
            };
        }
        Ok(out)
    }

    /// Encode–decode with `z = μ` (no sampling noise).
    pub fn reconstruct_batch(&self, windows: &[&Window]) -> Result<Vec<Window>> {
        windows.iter().try_for_each(|w| self.check_window(w))?;
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(INFERENCE_BATCH) {
            let mut tape = Tape::new();
            let vae = self.bind(&mut tape)?;
            let fwd = vae.forward(&mut tape, chunk, None)?;
            out.extend(self.windows_from_rows(&tape, fwd.reconstruction)?);
        }
        for (o, w) in out.iter_mut().zip(windows) {
            o.source = w.source.clone();
        }
        Ok(out)
    }

    fn windows_from_rows(&self, tape: &Tape, node: NodeId) -> Result<Vec<Window>> {
        let (wl, ch) = (self.config.window_len, self.config.channels);
        tape.value(node)
            .data()
            .chunks_exact(wl * ch)
            .enumerate()
            .map(|(i, row)| {
                Window::new(
                    row.to_vec(),
                    wl,
                    ch,
                    WindowSource {
                        trajectory: String::new(),
                        start: i,
                    },
                )
                .map_err(VaeError::from)
            })
            .collect()
    }

    /// Negative ELBO for one window with a fixed noise draw.
    pub fn loss(&self, w: &Window, eps: [f64; LATENT_DIM]) -> Result<LossBreakdown> {
        self.check_window(w)?;
        let mut tape = Tape::new();
        let vae = self.bind(&mut tape)?;
        let terms = vae.loss(
            &mut tape,
            &[w],
            Some(&[eps]),
            self.config.beta,
            self.config.reconstruction,
        )?;
        Ok(terms.values(&tape))
    }

    /// Batch-mean loss and its gradient for every parameter.
    pub fn loss_and_gradients(
        &self,
        windows: &[&Window],
        eps: Option<&[[f64; LATENT_DIM]]>,
    ) -> Result<(LossBreakdown, Vec<Tensor>)> {
        windows.iter().try_for_each(|w| self.check_window(w))?;
        let mut tape = Tape::new();
        let vae = self.bind(&mut tape)?;
        let terms = vae.loss(
            &mut tape,
            windows,
            eps,
            self.config.beta,
            self.config.reconstruction,
        )?;
        tape.backward(terms.total)?;
        let grads = vae.params.iter().map(|&id| tape.grad(id)).collect();
        Ok((terms.values(&tape), grads))
    }

    /// Decodes `count` samples `z = reparameterize(base, ε)` with fresh
    /// standard-normal `ε`; `base = None` samples the prior. Outputs stay in
    /// normalized units.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        base: Option<&LatentCode>,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<Window>> {
        let base = base.copied().unwrap_or(LatentCode::PRIOR);
        let zs: Vec<[f64; LATENT_DIM]> = (0..count)
            .map(|_| {
                let eps = [standard_normal(rng), standard_normal(rng)];
                reparameterize(&base, eps)
            })
            .collect();
        let mut out = self.decode_batch(&zs)?;
        for (i, w) in out.iter_mut().enumerate() {
            w.source = WindowSource {
                trajectory: "generated".into(),
                start: i,
            };
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format_version: FORMAT_VERSION.to_string(),
            seed: self.seed,
            config: self.config.clone(),
            normalizer: self.normalizer.clone(),
            threshold: self.threshold,
            parameters: self
                .config
                .parameter_layout()
                .into_iter()
                .zip(self.params())
                .map(|((name, _), t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&file).expect("model serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| VaeError::Format(e.to_string()))?;
        if file.format_version != FORMAT_VERSION {
            return Err(VaeError::Format(format!(
                "unsupported format_version '{}' (expected '{FORMAT_VERSION}')",
                file.format_version
            )));
        }
        file.config.validate()?;
        if let Some(th) = file.threshold {
            if !(th.is_finite() && th >= 0.0) {
                return Err(VaeError::Format(format!(
                    "threshold {th} is not a non-negative number"
                )));
            }
        }
        let layout = file.config.parameter_layout();
        if layout.len() != file.parameters.len() {
            return Err(VaeError::Format(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                file.parameters.len()
            )));
        }
        let mut model = Self::zeroed(file.config, file.normalizer)?;
        model.seed = file.seed;
        model.threshold = file.threshold;
        for ((slot, (name, shape)), named) in model
            .params_mut()
            .into_iter()
            .zip(&layout)
            .zip(file.parameters)
        {
            if &named.name != name || &named.shape != shape {
                return Err(VaeError::Format(format!(
                    "parameter '{}' {:?} does not match expected '{name}' {shape:?}",
                    named.name, named.shape
                )));
            }
            let t = Tensor::new(named.shape, named.values)
                .map_err(|e| VaeError::Format(format!("{name}: {e}")))?;
            if !t.is_finite() {
                return Err(VaeError::Format(format!("{name}: non-finite values")));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|source| VaeError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| VaeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// SHA-256 of a serialized model, hex encoded.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: String,
    seed: u64,
    config: VaeConfig,
    normalizer: Normalizer,
    threshold: Option<f64>,
    parameters: Vec<NamedTensor>,
}

fn latent_codes(tape: &Tape, mu: NodeId, log_var: NodeId) -> Vec<LatentCode> {
    tape.value(mu)
        .data()
        .chunks_exact(LATENT_DIM)
        .zip(tape.value(log_var).data().chunks_exact(LATENT_DIM))
        .map(|(m, lv)| LatentCode {
            mu: [m[0], m[1]],
            log_var: [lv[0], lv[1]],
        })
        .collect()
}

/// Model parameters bound to a tape.
#[derive(Debug, Clone)]
pub struct BoundVae {
    /// Leaves in [`VaeConfig::parameter_layout`] order.
    pub params: Vec<NodeId>,
    encoder_lstm: BoundLstm,
    encoder_dense: BoundDense,
    mu_head: BoundDense,
    log_var_head: BoundDense,
    decoder_dense: BoundDense,
    decoder_lstm: BoundLstm,
    output: BoundDense,
    window_len: usize,
}

/// Graph nodes of one forward pass over a batch.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub mu: NodeId,
    pub log_var: NodeId,
    pub z: NodeId,
    /// `[batch × (W·channels)]`, rows laid out like [`Window::values`].
    pub reconstruction: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub reconstruction: NodeId,
    pub kl: NodeId,
}

impl LossNodes {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        let get = |id: NodeId| tape.value(id).data()[0];
        LossBreakdown {
            total: get(self.total),
            reconstruction: get(self.reconstruction),
            kl: get(self.kl),
        }
    }
}

impl BoundVae {
    /// Binds to 26 leaves in [`VaeConfig::parameter_layout`] order; the
    /// decoder unrolls for `window_len` steps.
    pub fn from_nodes(tape: &mut Tape, ids: &[NodeId], window_len: usize) -> Result<Self> {
        if ids.len() != 26 {
            return Err(VaeError::Config(format!(
                "expected 26 parameter nodes, got {}",
                ids.len()
            )));
        }
        let lstm = |tape: &mut Tape, s: &[NodeId]| {
            let mut arr = [s[0]; 8];
            arr.copy_from_slice(s);
            BoundLstm::from_nodes(tape, arr)
        };
        let dense =
            |tape: &mut Tape, s: &[NodeId], act| BoundDense::from_nodes(tape, s[0], s[1], act);
        Ok(Self {
            encoder_lstm: lstm(tape, &ids[0..8])?,
            encoder_dense: dense(tape, &ids[8..10], Activation::Tanh)?,
            mu_head: dense(tape, &ids[10..12], Activation::Identity)?,
            log_var_head: dense(tape, &ids[12..14], Activation::Identity)?,
            decoder_dense: dense(tape, &ids[14..16], Activation::Tanh)?,
            decoder_lstm: lstm(tape, &ids[16..24])?,
            output: dense(tape, &ids[24..26], Activation::Identity)?,
            params: ids.to_vec(),
            window_len,
        })
    }

    /// Posterior mean and log-variance nodes, each `[batch × 2]`.
    pub fn encode(&self, tape: &mut Tape, windows: &[&Window]) -> Result<(NodeId, NodeId)> {
        let window_len = windows[0].window_len;
        let channels = windows[0].channels;
        let xs: Vec<NodeId> = (0..window_len)
            .map(|t| {
                let rows: Vec<f64> = windows
                    .iter()
                    .flat_map(|w| w.row(t).iter().copied())
                    .collect();
                Tensor::matrix(windows.len(), channels, rows).map(|x| tape.constant(x))
            })
            .collect::<std::result::Result<_, _>>()?;
        let h = lstm_sequence(&self.encoder_lstm, &xs, tape)?;
        let hidden = dense_forward(&self.encoder_dense, h, tape)?;
        let mu = dense_forward(&self.mu_head, hidden, tape)?;
        let log_var = dense_forward(&self.log_var_head, hidden, tape)?;
        Ok((mu, log_var))
    }

    /// Reconstruction `[batch × (W·channels)]` from latent samples `[batch × 2]`.
    pub fn decode(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let u = dense_forward(&self.decoder_dense, z, tape)?;
        let inputs = vec![u; self.window_len];
        let run = lstm_unroll(&self.decoder_lstm, &inputs, None, tape)?;
        let steps = run
            .hidden
            .iter()
            .map(|&h| dense_forward(&self.output, h, tape))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(tape.concat(&steps, 1)?)
    }

    /// Full pass: encode, sample `z = μ + ε ⊙ σ` (or `z = μ` when `eps` is
    /// `None`), decode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        windows: &[&Window],
        eps: Option<&[[f64; LATENT_DIM]]>,
    ) -> Result<Forward> {
        let (mu, log_var) = self.encode(tape, windows)?;
        let z = match eps {
            None => mu,
            Some(eps) => {
                if eps.len() != windows.len() {
                    return Err(VaeError::Shape {
                        what: "noise",
                        expected: format!("{} draws", windows.len()),
                        actual: format!("{} draws", eps.len()),
                    });
                }
                let e = tape.constant(Tensor::matrix(eps.len(), LATENT_DIM, eps.concat())?);
                let half = tape.scale(log_var, 0.5)?;
                let sigma = tape.exp(half)?;
                let noise = tape.mul(e, sigma)?;
                tape.add(mu, noise)?
            }
        };
        let reconstruction = self.decode(tape, z)?;
        Ok(Forward {
            mu,
            log_var,
            z,
            reconstruction,
        })
    }

    /// Batch-mean negative ELBO. `reconstruction` is the per-element mean
    /// squared error weighted by `reduction`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        windows: &[&Window],
        eps: Option<&[[f64; LATENT_DIM]]>,
        beta: f64,
        reduction: Reduction,
    ) -> Result<LossNodes> {
        if windows.is_empty() {
            return Err(VaeError::Config("loss needs at least one window".into()));
        }
        let fwd = self.forward(tape, windows, eps)?;
        let per_window = windows[0].values.len();
        let target: Vec<f64> = windows
            .iter()
            .flat_map(|w| w.values.iter().copied())
            .collect();
        let target = tape.constant(Tensor::matrix(windows.len(), per_window, target)?);
        let diff = tape.sub(fwd.reconstruction, target)?;
        let sq = tape.square(diff)?;
        let mse = tape.mean(sq)?;
        let reconstruction = tape.scale(mse, reduction.weight(per_window))?;

        let one = tape.constant(Tensor::scalar(1.0));
        let mu_sq = tape.square(fwd.mu)?;
        let var = tape.exp(fwd.log_var)?;
        let inner = tape.add(fwd.log_var, one)?;
        let inner = tape.sub(inner, mu_sq)?;
        let inner = tape.sub(inner, var)?;
        let total_inner = tape.sum(inner)?;
        let kl = tape.scale(total_inner, -0.5 * beta / windows.len() as f64)?;

        let total = tape.add(reconstruction, kl)?;
        Ok(LossNodes {
            total,
            reconstruction,
            kl,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub beta: f64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 42,
            beta: 1.0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(VaeError::Config("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(VaeError::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(VaeError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return Err(VaeError::Config(format!(
                "beta must be ≥ 1, got {}",
                self.beta
            )));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(VaeError::Config(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-window negative ELBO over the training windows, sampled `ε`.
    pub train_loss: f64,
    pub train_reconstruction: f64,
    pub train_kl: f64,
    /// Mean per-window negative ELBO over the validation windows, `ε = 0`.
    pub validation_loss: f64,
    pub windows_seen: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: VaeModel,
    pub history: Vec<EpochStats>,
    /// Indices into the input slice.
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

/// Number of validation items [`split_indices`] holds out of `n`.
pub fn validation_size(n: usize, validation_fraction: f64) -> Result<usize> {
    if n < 2 {
        return Err(VaeError::Config(format!(
            "need at least 2 windows to split, got {n}"
        )));
    }
    Ok(((n as f64 * validation_fraction).round() as usize).clamp(1, n - 1))
}

/// Seeded split of `n` items into `(train, validation)` index lists.
pub fn split_indices(
    n: usize,
    validation_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_val = validation_size(n, validation_fraction)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed));
    let mut validation = idx.split_off(n - n_val);
    idx.sort_unstable();
    validation.sort_unstable();
    Ok((idx, validation))
}

/// Mini-batch training on normalized windows.
///
/// A seeded split holds out `validation_fraction` of the windows; each epoch
/// reshuffles the rest and draws one fresh `ε ~ N(0, I)` per window per step.
pub fn train(mut model: VaeModel, windows: &[Window], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(VaeError::Config("no training windows".into()));
    }
    windows.iter().try_for_each(|w| model.check_window(w))?;
    model.config.beta = cfg.beta;

    let (train_indices, validation_indices) = split_indices(
        windows.len(),
        cfg.validation_fraction,
        derive_seed(cfg.seed, 1),
    )?;
    let mut rng = seeded(derive_seed(cfg.seed, 2));
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut order = train_indices.clone();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut recon, mut kl) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Window> = chunk.iter().map(|&i| &windows[i]).collect();
            let eps: Vec<[f64; LATENT_DIM]> = (0..batch.len())
                .map(|_| [standard_normal(&mut rng), standard_normal(&mut rng)])
                .collect();
            let (terms, grads) = model.loss_and_gradients(&batch, Some(&eps))?;
            if !terms.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(VaeError::NonFinite {
                    epoch,
                    batch: b + 1,
                    detail: format!(
                        "loss {} (reconstruction {}, kl {})",
                        terms.total, terms.reconstruction, terms.kl
                    ),
                });
            }
            let n = batch.len() as f64;
            total += terms.total * n;
            recon += terms.reconstruction * n;
            kl += terms.kl * n;
            optimizer.step(&mut model.params_mut(), &grads)?;
        }
        let n = order.len() as f64;
        let validation_loss = mean_loss(&model, windows, &validation_indices, cfg.batch_size)?;
        history.push(EpochStats {
            epoch,
            train_loss: total / n,
            train_reconstruction: recon / n,
            train_kl: kl / n,
            validation_loss,
            windows_seen: order.len(),
        });
    }

    Ok(TrainOutcome {
        model,
        history,
        train_indices,
        validation_indices,
    })
}

/// Mean deterministic (`ε = 0`) loss over the selected windows.
fn mean_loss(
    model: &VaeModel,
    windows: &[Window],
    indices: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size) {
        let batch: Vec<&Window> = chunk.iter().map(|&i| &windows[i]).collect();
        let mut tape = Tape::new();
        let vae = model.bind(&mut tape)?;
        let terms = vae.loss(
            &mut tape,
            &batch,
            None,
            model.config.beta,
            model.config.reconstruction,
        )?;
        total += terms.values(&tape).total * batch.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

pub fn write_history_csv<W: std::io::Write>(
    history: &[EpochStats],
    writer: W,
) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record([
        "epoch",
        "train_loss",
        "train_reconstruction",
        "train_kl",
        "validation_loss",
    ])?;
    for s in history {
        w.write_record([
            s.epoch.to_string(),
            s.train_loss.to_string(),
            s.train_reconstruction.to_string(),
            s.train_kl.to_string(),
            s.validation_loss.to_string(),
        ])?;
    }
    w.flush()
}
