//! Dense and LSTM layers, Glorot initialization, and SGD/Adam optimizers.
//!
//! Layers own their parameters as plain [`Tensor`]s. To run a forward pass a
//! layer is *bound* to a [`Tape`], which registers the parameters as
//! differentiable leaves and returns node handles used by the forward
//! functions. Inputs are either a single vector `[features]` or a batch
//! `[batch × features]`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{what}: expected shape {expected:?}, got {actual:?}")]
    Shape {
        what: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        Ok(match self {
            Activation::Identity => x,
            Activation::Tanh => tape.tanh(x)?,
            Activation::Sigmoid => tape.sigmoid(x)?,
        })
    }
}

/// Half-width of the Glorot-uniform interval.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Tensor of `rows × cols` draws from `U(−s, s)`, `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let s = glorot_bound(fan_in, fan_out);
    let data = (0..rows * cols)
        .map(|_| s * (2.0 * rng.gen::<f64>() - 1.0))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("glorot shape")
}

fn expect_shape(what: &str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(NnError::Shape {
            what: what.to_string(),
            expected: expected.to_vec(),
            actual: t.shape().to_vec(),
        });
    }
    if !t.is_finite() {
        return Err(NnError::Invalid(format!("{what}: non-finite values")));
    }
    Ok(())
}

/// Fully connected layer `activation(W x + b)` with `W: [out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(NnError::Invalid("dense weight must be a matrix".into()));
        }
        let out = weight.shape()[0];
        expect_shape("dense weight", &weight, weight.shape())?;
        expect_shape("dense bias", &bias, &[out])?;
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
            activation,
        }
    }

    pub fn glorot<R: Rng + ?Sized>(
        rng: &mut R,
        inputs: usize,
        outputs: usize,
        activation: Activation,
    ) -> Self {
        Self {
            weight: glorot_uniform(rng, outputs, inputs, inputs, outputs),
            bias: Tensor::zeros(&[outputs]),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundDense> {
        let weight = tape.variable(self.weight.clone());
        let bias = tape.variable(self.bias.clone());
        BoundDense::from_nodes(tape, weight, bias, self.activation)
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDense {
    pub weight: NodeId,
    pub bias: NodeId,
    weight_t: NodeId,
    activation: Activation,
}

impl BoundDense {
    /// Binds to leaves already on the tape (`weight: [out × in]`, `bias: [out]`).
    pub fn from_nodes(
        tape: &mut Tape,
        weight: NodeId,
        bias: NodeId,
        activation: Activation,
    ) -> Result<Self> {
        let weight_t = tape.transpose(weight)?;
        Ok(Self {
            weight,
            bias,
            weight_t,
            activation,
        })
    }

    pub fn param_nodes(&self) -> [NodeId; 2] {
        [self.weight, self.bias]
    }
}

/// Promotes a `[n]` vector to `[1 × n]`; returns whether it did.
fn as_batch(tape: &mut Tape, x: NodeId) -> Result<(NodeId, bool)> {
    match tape.value(x).shape() {
        [n] => {
            let n = *n;
            Ok((tape.reshape(x, &[1, n])?, true))
        }
        [_, _] => Ok((x, false)),
        other => Err(NnError::Invalid(format!(
            "expected a vector or batch matrix, got shape {other:?}"
        ))),
    }
}

fn unbatch(tape: &mut Tape, x: NodeId, was_vector: bool) -> Result<NodeId> {
    if was_vector {
        let n = tape.value(x).shape()[1];
        Ok(tape.reshape(x, &[n])?)
    } else {
        Ok(x)
    }
}

pub fn dense_forward(layer: &BoundDense, x: NodeId, tape: &mut Tape) -> Result<NodeId> {
    let (xb, was_vector) = as_batch(tape, x)?;
    let affine = tape.matmul(xb, layer.weight_t)?;
    let affine = tape.add_row(affine, layer.bias)?;
    let y = layer.activation.apply(tape, affine)?;
    unbatch(tape, y, was_vector)
}

/// LSTM layer with one `[hidden × (input + hidden)]` matrix per gate acting
/// on the concatenation `[x; h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub w_i: Tensor,
    pub w_f: Tensor,
    pub w_o: Tensor,
    pub w_g: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_o: Tensor,
    pub b_g: Tensor,
    pub hidden_size: usize,
}

impl LstmLayer {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        let w = Tensor::zeros(&[hidden_size, input_size + hidden_size]);
        let b = Tensor::zeros(&[hidden_size]);
        Self {
            w_i: w.clone(),
            w_f: w.clone(),
            w_o: w.clone(),
            w_g: w,
            b_i: b.clone(),
            b_f: b.clone(),
            b_o: b.clone(),
            b_g: b,
            hidden_size,
        }
    }

    /// Glorot-uniform gate weights, zero biases except the forget gate at 1.
    pub fn glorot<R: Rng + ?Sized>(rng: &mut R, input_size: usize, hidden_size: usize) -> Self {
        let cols = input_size + hidden_size;
        let mut gate = || glorot_uniform(rng, hidden_size, cols, cols, hidden_size);
        let (w_i, w_f, w_o, w_g) = (gate(), gate(), gate(), gate());
        Self {
            w_i,
            w_f,
            w_o,
            w_g,
            b_i: Tensor::zeros(&[hidden_size]),
            b_f: Tensor::filled(&[hidden_size], 1.0),
            b_o: Tensor::zeros(&[hidden_size]),
            b_g: Tensor::zeros(&[hidden_size]),
            hidden_size,
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_i.shape()[1] - self.hidden_size
    }

    pub fn validate(&self) -> Result<()> {
        let w = [
            self.hidden_size,
            self.w_i.shape().get(1).copied().unwrap_or(0),
        ];
        if self.hidden_size == 0 || w[1] <= self.hidden_size {
            return Err(NnError::Invalid(
                "lstm gate matrices must be [hidden × (input + hidden)]".into(),
            ));
        }
        for (name, t) in [
            ("w_i", &self.w_i),
            ("w_f", &self.w_f),
            ("w_o", &self.w_o),
            ("w_g", &self.w_g),
        ] {
            expect_shape(&format!("lstm {name}"), t, &w)?;
        }
        for (name, t) in [
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_o", &self.b_o),
            ("b_g", &self.b_g),
        ] {
            expect_shape(&format!("lstm {name}"), t, &[self.hidden_size])?;
        }
        Ok(())
    }

    pub fn params(&self) -> [&Tensor; 8] {
        [
            &self.w_i, &self.w_f, &self.w_o, &self.w_g, &self.b_i, &self.b_f, &self.b_o, &self.b_g,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.w_i,
            &mut self.w_f,
            &mut self.w_o,
            &mut self.w_g,
            &mut self.b_i,
            &mut self.b_f,
            &mut self.b_o,
            &mut self.b_g,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundLstm> {
        let params = self.params().map(|p| tape.variable(p.clone()));
        BoundLstm::from_nodes(tape, params)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLstm {
    /// Leaves in [`LstmLayer::params`] order.
    pub params: [NodeId; 8],
    gates_t: [NodeId; 4],
    hidden_size: usize,
}

impl BoundLstm {
    /// Binds to leaves already on the tape, in [`LstmLayer::params`] order.
    pub fn from_nodes(tape: &mut Tape, params: [NodeId; 8]) -> Result<Self> {
        let hidden_size = tape.value(params[4]).numel();
        let mut gates_t = [params[0]; 4];
        for (slot, &w) in gates_t.iter_mut().zip(&params[..4]) {
            *slot = tape.transpose(w)?;
        }
        Ok(Self {
            params,
            gates_t,
            hidden_size,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    /// Zero `(h, c)` for a batch of `batch` sequences (`None` for a single vector).
    pub fn zero_state(&self, tape: &mut Tape, batch: Option<usize>) -> (NodeId, NodeId) {
        let shape = match batch {
            Some(b) => vec![b, self.hidden_size],
            None => vec![self.hidden_size],
        };
        let h = tape.constant(Tensor::zeros(&shape));
        let c = tape.constant(Tensor::zeros(&shape));
        (h, c)
    }
}

/// One LSTM step:
/// `i, f, o = σ(W·[x; h] + b)`, `g = tanh(W_g·[x; h] + b_g)`,
/// `c = f ⊙ c_prev + i ⊙ g`, `h = o ⊙ tanh(c)`.
pub fn lstm_step(
    layer: &BoundLstm,
    x_t: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    tape: &mut Tape,
) -> Result<(NodeId, NodeId)> {
    let (x, was_vector) = as_batch(tape, x_t)?;
    let (h_prev, _) = as_batch(tape, h_prev)?;
    let (c_prev, _) = as_batch(tape, c_prev)?;
    let xh = tape.concat(&[x, h_prev], 1)?;

    let [wi, wf, wo, wg] = layer.gates_t;
    let [_, _, _, _, bi, bf, bo, bg] = layer.params;
    let mut gate = |w: NodeId, b: NodeId, act: Activation| -> Result<NodeId> {
        let pre = tape.matmul(xh, w)?;
        let pre = tape.add_row(pre, b)?;
        act.apply(tape, pre)
    };
    let i = gate(wi, bi, Activation::Sigmoid)?;
    let f = gate(wf, bf, Activation::Sigmoid)?;
    let o = gate(wo, bo, Activation::Sigmoid)?;
    let g = gate(wg, bg, Activation::Tanh)?;

    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let squashed = tape.tanh(c)?;
    let h = tape.mul(o, squashed)?;

    Ok((unbatch(tape, h, was_vector)?, unbatch(tape, c, was_vector)?))
}

/// Result of unrolling an LSTM over a sequence.
#[derive(Debug, Clone)]
pub struct LstmRun {
    /// Hidden state after every step.
    pub hidden: Vec<NodeId>,
    pub h: NodeId,
    pub c: NodeId,
}

/// Unrolls left to right from `init` (zero state when `None`).
pub fn lstm_unroll(
    layer: &BoundLstm,
    xs: &[NodeId],
    init: Option<(NodeId, NodeId)>,
    tape: &mut Tape,
) -> Result<LstmRun> {
    let first = *xs
        .first()
        .ok_or_else(|| NnError::Invalid("lstm sequence is empty".into()))?;
    let first_shape = tape.value(first).shape().to_vec();
    let (mut h, mut c) = match init {
        Some(state) => state,
        None => {
            let batch = (first_shape.len() == 2).then(|| first_shape[0]);
            layer.zero_state(tape, batch)
        }
    };
    let mut hidden = Vec::with_capacity(xs.len());
    for &x in xs {
        if tape.value(x).shape() != first_shape.as_slice() {
            return Err(NnError::Shape {
                what: "lstm sequence element".into(),
                expected: first_shape,
                actual: tape.value(x).shape().to_vec(),
            });
        }
        (h, c) = lstm_step(layer, x, h, c, tape)?;
        hidden.push(h);
    }
    Ok(LstmRun { hidden, h, c })
}

/// Final hidden state of the sequence, starting from zero state.
pub fn lstm_sequence(layer: &BoundLstm, xs: &[NodeId], tape: &mut Tape) -> Result<NodeId> {
    Ok(lstm_unroll(layer, xs, None, tape)?.h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!(
                "unknown optimizer '{other}' (expected sgd or adam)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(NnError::Invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(NnError::Shape {
                    what: format!("gradient {i}"),
                    expected: p.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
        }
        if !(self.learning_rate >= 0.0)
            || !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0)
        {
            return Err(NnError::Invalid(
                "optimizer hyperparameters out of range".into(),
            ));
        }
        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= self.learning_rate * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.is_empty() {
                    self.first_moment = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                    self.second_moment = self.first_moment.clone();
                }
                if self.first_moment.len() != params.len() {
                    return Err(NnError::Invalid(
                        "parameter list changed between optimizer steps".into(),
                    ));
                }
                let t = self.step_count as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(
                    self.first_moment
                        .iter_mut()
                        .zip(self.second_moment.iter_mut()),
                ) {
                    for (((x, &d), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut())
                        .zip(v.data_mut().iter_mut())
                    {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * d;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * d * d;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *x -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use crate::random::seeded;

    fn vec_node(tape: &mut Tape, v: &[f64]) -> NodeId {
        tape.constant(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn dense_identity() {
        let layer = DenseLayer::new(
            Tensor::identity(2),
            Tensor::zeros(&[2]),
            Activation::Identity,
        )
        .unwrap();
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape).unwrap();
        let x = vec_node(&mut tape, &[3.0, 4.0]);
        let y = dense_forward(&bound, x, &mut tape).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
        assert_eq!(tape.value(y).shape(), &[2]);
    }

    #[test]
    fn dense_sigmoid_at_zero_preactivation() {
        let w = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let layer = DenseLayer::new(w, Tensor::vector(vec![-2.0]), Activation::Sigmoid).unwrap();
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape).unwrap();
        let x = vec_node(&mut tape, &[1.0, 1.0]);
        let y = dense_forward(&bound, x, &mut tape).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn dense_affine_by_hand() {
        let w = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let layer =
            DenseLayer::new(w, Tensor::vector(vec![1.0, 1.0]), Activation::Identity).unwrap();
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape).unwrap();
        let x = vec_node(&mut tape, &[1.0, 2.0]);
        let y = dense_forward(&bound, x, &mut tape).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
    }

    #[test]
    fn dense_rejects_wrong_input_width() {
        let layer = DenseLayer::zeros(3, 2, Activation::Tanh);
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape).unwrap();
        let x = vec_node(&mut tape, &[1.0, 2.0]);
        assert!(matches!(
            dense_forward(&bound, x, &mut tape),
            Err(NnError::Autodiff(AutodiffError::ShapeMismatch {
                op: "matmul",
                ..
            }))
        ));
        assert!(DenseLayer::new(
            Tensor::identity(2),
            Tensor::zeros(&[3]),
            Activation::Identity
        )
        .is_err());
    }

    #[test]
    fn dense_batch_rows_are_independent() {
        let mut rng = seeded(1);
        let layer = DenseLayer::glorot(&mut rng, 3, 2, Activation::Tanh);
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape).unwrap();
        let batch =
            tape.constant(Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 1.0, 0.5, -0.5]).unwrap());
        let yb = dense_forward(&bound, batch, &mut tape).unwrap();
        let row = vec_node(&mut tape, &[1.0, 0.5, -0.5]);
        let yr = dense_forward(&bound, row, &mut tape).unwrap();
        assert_eq!(&tape.value(yb).data()[2..], tape.value(yr).data());
    }

    #[test]
    fn lstm_zero_params_from_zero_state() {
        let layer = LstmLayer::zeros(2, 3);
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape).unwrap();
        let x = vec_node(&mut tape, &[0.7, -1.2]);
        let (h0, c0) = bound.zero_state(&mut tape, None);
        let (h, c) = lstm_step(&bound, x, h0, c0, &mut tape).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0; 3]);
        assert_eq!(tape.value(c).data(), &[0.0; 3]);
    }

    #[test]
    fn lstm_zero_params_halve_the_cell() {
        // i = f = o = σ(0) = 0.5, g = tanh(0) = 0
        let layer = LstmLayer::zeros(1, 1);
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape).unwrap();
        let x = vec_node(&mut tape, &[3.0]);
        let h0 = vec_node(&mut tape, &[0.0]);
        let c0 = vec_node(&mut tape, &[1.0]);
        let (h, c) = lstm_step(&bound, x, h0, c0, &mut tape).unwrap();
        assert_eq!(tape.value(c).data(), &[0.5]);
        assert!((tape.value(h).data()[0] - 0.5 * 0.5f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn lstm_saturated_forget_gate_keeps_cell() {
        let mut layer = LstmLayer::zeros(1, 1);
        layer.b_f = Tensor::vector(vec![10.0]);
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape).unwrap();
        let x = vec_node(&mut tape, &[0.0]);
        let h0 = vec_node(&mut tape, &[0.0]);
        let c0 = vec_node(&mut tape, &[1.0]);
        let (h, c) = lstm_step(&bound, x, h0, c0, &mut tape).unwrap();
        // c = σ(10)·1 + 0.5·tanh(0)
        let f = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((tape.value(c).data()[0] - f).abs() < 1e-15);
        assert!((tape.value(h).data()[0] - 0.5 * f.tanh()).abs() < 1e-15);
    }

    #[test]
    fn lstm_sequence_errors_and_single_step() {
        let mut rng = seeded(2);
        let layer = LstmLayer::glorot(&mut rng, 2, 3);
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape).unwrap();
        assert!(lstm_sequence(&bound, &[], &mut tape).is_err());

        let x = vec_node(&mut tape, &[0.4, -0.9]);
        let seq = lstm_sequence(&bound, &[x], &mut tape).unwrap();
        let (h0, c0) = bound.zero_state(&mut tape, None);
        let (h, _) = lstm_step(&bound, x, h0, c0, &mut tape).unwrap();
        assert_eq!(tape.value(seq), tape.value(h));
    }

    #[test]
    fn lstm_constant_input_with_zero_params_stays_at_origin() {
        let layer = LstmLayer::zeros(3, 4);
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape).unwrap();
        let xs: Vec<NodeId> = (0..5)
            .map(|_| vec_node(&mut tape, &[1.0, 2.0, 3.0]))
            .collect();
        let h = lstm_sequence(&bound, &xs, &mut tape).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0; 4]);
    }

    #[test]
    fn lstm_sequence_equals_manual_steps() {
        let mut rng = seeded(3);
        let layer = LstmLayer::glorot(&mut rng, 2, 3);
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape).unwrap();
        let xs: Vec<NodeId> = [[0.1, 0.2], [-0.5, 1.0], [0.9, -0.3]]
            .iter()
            .map(|v| vec_node(&mut tape, v))
            .collect();
        let seq = lstm_sequence(&bound, &xs, &mut tape).unwrap();
        let (mut h, mut c) = bound.zero_state(&mut tape, None);
        for &x in &xs {
            (h, c) = lstm_step(&bound, x, h, c, &mut tape).unwrap();
        }
        assert_eq!(tape.value(seq), tape.value(h));
        assert!(tape.value(h).data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn lstm_rechunking_carries_state() {
        let mut rng = seeded(4);
        let layer = LstmLayer::glorot(&mut rng, 2, 3);
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape).unwrap();
        let xs: Vec<NodeId> = (0..4)
            .map(|t| vec_node(&mut tape, &[t as f64 * 0.3, 1.0 - t as f64 * 0.5]))
            .collect();
        let whole = lstm_unroll(&bound, &xs, None, &mut tape).unwrap();
        let first = lstm_unroll(&bound, &xs[..2], None, &mut tape).unwrap();
        let second = lstm_unroll(&bound, &xs[2..], Some((first.h, first.c)), &mut tape).unwrap();
        assert_eq!(tape.value(whole.h), tape.value(second.h));
        assert_eq!(tape.value(whole.c), tape.value(second.c));
    }

    #[test]
    fn lstm_dense_stack_passes_gradient_check() {
        for (seed, hidden, steps) in [(10u64, 3usize, 2usize), (11, 5, 4), (12, 8, 5)] {
            let mut rng = seeded(seed);
            let lstm = LstmLayer::glorot(&mut rng, 2, hidden);
            let dense = DenseLayer::glorot(&mut rng, hidden, 2, Activation::Tanh);
            let inputs: Vec<Tensor> = (0..steps)
                .map(|_| glorot_uniform(&mut rng, 3, 2, 1, 1))
                .collect();
            let mut params: Vec<Tensor> = lstm.params().into_iter().cloned().collect();
            params.extend(dense.params().into_iter().cloned());

            let report = gradient_check(
                |tape: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
                    let mut lstm_ids = [ids[0]; 8];
                    lstm_ids.copy_from_slice(&ids[..8]);
                    let bound = BoundLstm::from_nodes(tape, lstm_ids)?;
                    let bd = BoundDense::from_nodes(tape, ids[8], ids[9], dense.activation)?;
                    let xs: Vec<NodeId> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
                    let h = lstm_sequence(&bound, &xs, tape)?;
                    let y = dense_forward(&bd, h, tape)?;
                    let sq = tape.square(y)?;
                    Ok(tape.mean(sq)?)
                },
                &params,
                1e-5,
                1e-3,
            )
            .unwrap();
            assert!(report.passed, "hidden={hidden} steps={steps}: {report:?}");
        }
    }

    #[test]
    fn sgd_updates() {
        let mut p = Tensor::vector(vec![1.0]);
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut [&mut p], &[Tensor::vector(vec![1.0])])
            .unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);

        let mut q = Tensor::vector(vec![1.5, -2.0]);
        let mut frozen = Optimizer::sgd(0.0);
        frozen
            .step(&mut [&mut q], &[Tensor::vector(vec![3.0, 4.0])])
            .unwrap();
        assert_eq!(q.data(), &[1.5, -2.0]);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // m̂ = g, v̂ = g² on the first step, so Δp = −lr·g/(|g| + ε).
        let mut p = Tensor::vector(vec![0.0]);
        let mut opt = Optimizer::adam(0.001);
        opt.step(&mut [&mut p], &[Tensor::vector(vec![1.0])])
            .unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = Tensor::vector(vec![0.25, -3.0, 7.5]);
            let mut opt = Optimizer::new(kind, 0.01);
            for _ in 0..5 {
                opt.step(&mut [&mut p], &[Tensor::zeros(&[3])]).unwrap();
            }
            assert_eq!(p.data(), &[0.25, -3.0, 7.5], "{kind:?}");
        }
    }

    #[test]
    fn optimizer_rejects_misaligned_gradients() {
        let mut p = Tensor::vector(vec![0.0, 0.0]);
        let mut opt = Optimizer::adam(0.01);
        assert!(opt.step(&mut [&mut p], &[Tensor::zeros(&[3])]).is_err());
        assert!(opt.step(&mut [&mut p], &[]).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = LstmLayer::glorot(&mut seeded(9), 3, 4);
        let b = LstmLayer::glorot(&mut seeded(9), 3, 4);
        assert_eq!(a, b);
        let bits = |l: &LstmLayer| l.w_g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.b_f.data(), &[1.0; 4]);
        assert_eq!(a.b_i.data(), &[0.0; 4]);
        a.validate().unwrap();
    }

    #[test]
    fn glorot_bound_three_by_three() {
        assert_eq!(glorot_bound(3, 3), 1.0);
        let mut rng = seeded(17);
        let t = glorot_uniform(&mut rng, 100, 100, 3, 3);
        assert!(t.data().iter().all(|v| v.abs() < 1.0));
        let max = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max > 0.99, "draws should fill the interval, max {max}");
    }
}
