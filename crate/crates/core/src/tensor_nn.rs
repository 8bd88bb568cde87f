//! Minimal dense feed-forward neural core with exact analytic gradients.
//!
//! Everything is 64-bit and deterministic: forward passes in train mode draw
//! inverted-dropout masks from a caller-supplied seeded RNG, eval mode is a
//! pure function of parameters and input, and `backward` reproduces the exact
//! chain-rule gradient for the recorded masks. `finite_difference_check` is
//! the verification harness used by the test suites.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{mean, population_std, Matrix};

pub const ANNUALIZATION_DAYS: f64 = 252.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            // Subgradient at 0 is defined as 0.
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Identity => x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidSpec(format!("unknown activation `{other}`"))),
        }
    }
}

/// One dense layer: affine map, activation, optional inverted dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub has_bias: bool,
    pub dropout_p: f64,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self { in_dim, out_dim, activation, has_bias: true, dropout_p: 0.0 }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_p = p;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::InvalidSpec("layer dims must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidSpec(format!(
                "dropout_p {} outside [0,1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Chain of dense layers with weights `W` (out_dim × in_dim) and optional
/// bias vectors.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<LayerSpec>,
    weights: Vec<Matrix>,
    biases: Vec<Option<Vec<f64>>>,
    mode: Mode,
    version: u64,
}

impl Network {
    /// Seeded symmetric fan-based init: weights uniform in
    /// ±√(6/(in+out)), biases zero.
    pub fn init(specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(specs, &mut rng)
    }

    /// As `init`, drawing from an existing RNG stream. Lets composite
    /// architectures share one stream so sub-network draws line up.
    pub fn init_with_rng(specs: Vec<LayerSpec>, rng: &mut ChaCha8Rng) -> Result<Self> {
        for (i, spec) in specs.iter().enumerate() {
            spec.validate()?;
            if i > 0 && specs[i - 1].out_dim != spec.in_dim {
                return Err(Error::DimensionMismatch {
                    expected: specs[i - 1].out_dim,
                    got: spec.in_dim,
                });
            }
        }
        let mut weights = Vec::with_capacity(specs.len());
        let mut biases = Vec::with_capacity(specs.len());
        for spec in &specs {
            let bound = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
            let mut w = Matrix::zeros(spec.out_dim, spec.in_dim);
            for v in w.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            weights.push(w);
            biases.push(if spec.has_bias { Some(vec![0.0; spec.out_dim]) } else { None });
        }
        Ok(Self { layers: specs, weights, biases, mode: Mode::Train, version: 0 })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Option<Vec<f64>>] {
        &self.biases
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Matrix {
        self.version += 1;
        &mut self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> Option<&mut Vec<f64>> {
        self.version += 1;
        self.biases[layer].as_mut()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|l| l.in_dim).unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.in_dim * l.out_dim + if l.has_bias { l.out_dim } else { 0 })
            .sum()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.cols() });
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    /// Forward pass over a batch (rows are samples).
    ///
    /// Train mode draws fresh inverted-dropout masks from `rng`; eval mode
    /// is deterministic and never touches the RNG. The trace records every
    /// intermediate needed for `backward` or a frozen-mask replay.
    pub fn forward(&self, x: &Matrix, rng: &mut ChaCha8Rng) -> Result<Trace> {
        self.check_input(x)?;
        let masks: Vec<Option<Matrix>> = self
            .layers
            .iter()
            .map(|spec| {
                if self.mode == Mode::Train && spec.dropout_p > 0.0 {
                    let keep = 1.0 - spec.dropout_p;
                    let mut m = Matrix::zeros(x.rows(), spec.out_dim);
                    for v in m.data_mut() {
                        *v = if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 };
                    }
                    Some(m)
                } else {
                    None
                }
            })
            .collect();
        self.forward_with_masks(x, &masks)
    }

    /// Replays a forward pass with pinned dropout masks (`None` = no mask).
    pub fn forward_with_masks(&self, x: &Matrix, masks: &[Option<Matrix>]) -> Result<Trace> {
        self.check_input(x)?;
        if masks.len() != self.layers.len() {
            return Err(Error::DimensionMismatch { expected: self.layers.len(), got: masks.len() });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(x.clone());
        for (l, spec) in self.layers.iter().enumerate() {
            let input = activations.last().unwrap();
            // pre = input * Wᵀ + b
            let mut pre = input.matmul(&self.weights[l].transpose());
            if let Some(b) = &self.biases[l] {
                for i in 0..pre.rows() {
                    for (j, bj) in b.iter().enumerate() {
                        pre[(i, j)] += bj;
                    }
                }
            }
            let mut post = Matrix::zeros(pre.rows(), pre.cols());
            for (o, p) in post.data_mut().iter_mut().zip(pre.data()) {
                *o = spec.activation.apply(*p);
            }
            if let Some(mask) = &masks[l] {
                for (o, m) in post.data_mut().iter_mut().zip(mask.data()) {
                    *o *= m;
                }
            }
            pre_activations.push(pre);
            activations.push(post);
        }
        Ok(Trace {
            version: self.version,
            activations,
            pre_activations,
            masks: masks.to_vec(),
        })
    }

    /// Deterministic eval-mode output (inverted dropout means no rescale).
    pub fn eval(&self, x: &Matrix) -> Result<Matrix> {
        let masks = vec![None; self.layers.len()];
        Ok(self.forward_with_masks(x, &masks)?.into_output())
    }

    /// Eval-mode output of the first `n_layers` layers only, e.g. the
    /// encoder half of an autoencoder.
    pub fn eval_layers(&self, x: &Matrix, n_layers: usize) -> Result<Matrix> {
        assert!(n_layers >= 1 && n_layers <= self.layers.len());
        let masks = vec![None; self.layers.len()];
        let trace = self.forward_with_masks(x, &masks)?;
        Ok(trace.activations[n_layers].clone())
    }

    pub fn eval_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec());
        Ok(self.eval(&m)?.row(0).to_vec())
    }

    /// Exact analytic gradients of a scalar loss given `dLoss/dOutput`.
    ///
    /// Also returns `dLoss/dInput` so composite objectives can chain
    /// through several networks.
    pub fn backward(&self, trace: &Trace, upstream: &Matrix) -> Result<Gradients> {
        if trace.version != self.version {
            return Err(Error::StaleTrace);
        }
        let last = self.layers.len() - 1;
        if upstream.rows() != trace.activations[0].rows()
            || upstream.cols() != self.layers[last].out_dim
        {
            return Err(Error::DimensionMismatch {
                expected: self.layers[last].out_dim,
                got: upstream.cols(),
            });
        }
        let mut d_weights = Vec::with_capacity(self.layers.len());
        let mut d_biases = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            let spec = &self.layers[l];
            if let Some(mask) = &trace.masks[l] {
                for (gv, m) in g.data_mut().iter_mut().zip(mask.data()) {
                    *gv *= m;
                }
            }
            let pre = &trace.pre_activations[l];
            for (gv, p) in g.data_mut().iter_mut().zip(pre.data()) {
                *gv *= spec.activation.derivative(*p);
            }
            let input = &trace.activations[l];
            d_weights.push(g.t_matmul(input));
            d_biases.push(if spec.has_bias {
                let mut db = vec![0.0; spec.out_dim];
                for i in 0..g.rows() {
                    for (j, d) in db.iter_mut().enumerate() {
                        *d += g[(i, j)];
                    }
                }
                Some(db)
            } else {
                None
            });
            g = g.matmul(&self.weights[l]);
        }
        d_weights.reverse();
        d_biases.reverse();
        Ok(Gradients { weights: d_weights, biases: d_biases, input: g })
    }
}

/// Everything `forward` recorded: per-layer inputs, pre-activations, and
/// dropout masks.
#[derive(Debug, Clone)]
pub struct Trace {
    version: u64,
    activations: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    masks: Vec<Option<Matrix>>,
}

impl Trace {
    pub fn output(&self) -> &Matrix {
        self.activations.last().unwrap()
    }

    pub fn into_output(mut self) -> Matrix {
        self.activations.pop().unwrap()
    }

    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre_activations
    }

    pub fn masks(&self) -> &[Option<Matrix>] {
        &self.masks
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Option<Vec<f64>>>,
    pub input: Matrix,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            biases: net
                .biases
                .iter()
                .map(|b| b.as_ref().map(|v| vec![0.0; v.len()]))
                .collect(),
            input: Matrix::zeros(0, 0),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += scale * y;
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
            && self.biases.iter().flatten().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

/// Adam moment buffers plus hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    m_weights: Vec<Matrix>,
    v_weights: Vec<Matrix>,
    m_biases: Vec<Option<Vec<f64>>>,
    v_biases: Vec<Option<Vec<f64>>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(net: &Network, learning_rate: f64) -> Self {
        let zeros_w: Vec<Matrix> =
            net.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        let zeros_b: Vec<Option<Vec<f64>>> =
            net.biases.iter().map(|b| b.as_ref().map(|v| vec![0.0; v.len()])).collect();
        Self {
            m_weights: zeros_w.clone(),
            v_weights: zeros_w,
            m_biases: zeros_b.clone(),
            v_biases: zeros_b,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            learning_rate,
        }
    }
}

fn adam_update(theta: &mut f64, g: f64, m: &mut f64, v: &mut f64, state_step: u64, st: &AdamState) {
    *m = st.beta1 * *m + (1.0 - st.beta1) * g;
    *v = st.beta2 * *v + (1.0 - st.beta2) * g * g;
    let m_hat = *m / (1.0 - st.beta1.powi(state_step as i32));
    let v_hat = *v / (1.0 - st.beta2.powi(state_step as i32));
    *theta -= st.learning_rate * m_hat / (v_hat.sqrt() + st.eps);
}

/// One Adam step with bias correction. Rejects non-finite gradients before
/// touching any parameter.
pub fn adam_step(net: &mut Network, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient("adam step".into()));
    }
    if grads.weights.len() != net.weights.len() {
        return Err(Error::DimensionMismatch {
            expected: net.weights.len(),
            got: grads.weights.len(),
        });
    }
    state.step += 1;
    let step = state.step;
    let st = state.clone();
    for l in 0..net.weights.len() {
        if grads.weights[l].rows() != net.weights[l].rows()
            || grads.weights[l].cols() != net.weights[l].cols()
        {
            return Err(Error::DimensionMismatch {
                expected: net.weights[l].rows() * net.weights[l].cols(),
                got: grads.weights[l].rows() * grads.weights[l].cols(),
            });
        }
        for i in 0..net.weights[l].data().len() {
            let g = grads.weights[l].data()[i];
            adam_update(
                &mut net.weights[l].data_mut()[i],
                g,
                &mut state.m_weights[l].data_mut()[i],
                &mut state.v_weights[l].data_mut()[i],
                step,
                &st,
            );
        }
        if let (Some(b), Some(gb)) = (&mut net.biases[l], &grads.biases[l]) {
            for i in 0..b.len() {
                adam_update(
                    &mut b[i],
                    gb[i],
                    state.m_biases[l].as_mut().unwrap().get_mut(i).unwrap(),
                    state.v_biases[l].as_mut().unwrap().get_mut(i).unwrap(),
                    step,
                    &st,
                );
            }
        }
    }
    net.version += 1;
    Ok(())
}

/// Mean squared error over every entry, with the gradient w.r.t. the
/// reconstruction.
pub fn mse_loss(target: &Matrix, recon: &Matrix) -> Result<(f64, Matrix)> {
    if target.rows() != recon.rows() || target.cols() != recon.cols() {
        return Err(Error::DimensionMismatch {
            expected: target.rows() * target.cols(),
            got: recon.rows() * recon.cols(),
        });
    }
    let n = (target.rows() * target.cols()) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(recon.rows(), recon.cols());
    for i in 0..target.data().len() {
        let d = target.data()[i] - recon.data()[i];
        loss += d * d;
        grad.data_mut()[i] = -2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// Annualized Sharpe ratio of a daily return series, returned as a loss
/// (`-Sharpe`) with its analytic gradient w.r.t. each daily return.
///
/// Uses the population standard deviation (divisor T). Reporting metrics
/// elsewhere use divisor T-1; only the training objective uses this form.
pub fn sharpe_loss(returns: &[f64]) -> Result<(f64, Vec<f64>)> {
    let t = returns.len();
    if t < 2 {
        return Err(Error::InsufficientData { need: 2, have: t });
    }
    let mu = mean(returns);
    let sigma = population_std(returns);
    // Constant series leave only accumulation roundoff in sigma.
    if sigma == 0.0 || sigma <= 1e-12 * mu.abs() {
        return Err(Error::DegenerateVariance);
    }
    let ann = ANNUALIZATION_DAYS.sqrt();
    let sharpe = ann * mu / sigma;
    let tf = t as f64;
    let grad: Vec<f64> = returns
        .iter()
        .map(|&r| {
            let d_sharpe = ann / (tf * sigma) * (1.0 - mu * (r - mu) / (sigma * sigma));
            -d_sharpe
        })
        .collect();
    Ok((-sharpe, grad))
}

/// Max relative error between `analytic` parameter gradients and central
/// finite differences of `loss` (step `h`), walking every weight and bias.
///
/// `loss` must be a pure function of the network parameters; freeze any
/// dropout masks before calling.
pub fn finite_difference_check<F>(
    net: &Network,
    analytic: &Gradients,
    mut loss: F,
    h: f64,
) -> f64
where
    F: FnMut(&Network) -> f64,
{
    let mut worst = 0.0f64;
    let mut probe = net.clone();
    for l in 0..net.weights.len() {
        for idx in 0..net.weights[l].data().len() {
            let orig = net.weights[l].data()[idx];
            probe.weights[l].data_mut()[idx] = orig + h;
            let up = loss(&probe);
            probe.weights[l].data_mut()[idx] = orig - h;
            let down = loss(&probe);
            probe.weights[l].data_mut()[idx] = orig;
            let num = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(num, analytic.weights[l].data()[idx]));
        }
        if let Some(b) = &net.biases[l] {
            for idx in 0..b.len() {
                let orig = b[idx];
                probe.biases[l].as_mut().unwrap()[idx] = orig + h;
                let up = loss(&probe);
                probe.biases[l].as_mut().unwrap()[idx] = orig - h;
                let down = loss(&probe);
                probe.biases[l].as_mut().unwrap()[idx] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = analytic.biases[l].as_ref().unwrap()[idx];
                worst = worst.max(relative_error(num, ana));
            }
        }
    }
    worst
}

fn relative_error(numerical: f64, analytic: f64) -> f64 {
    if numerical.abs() < 1e-7 && analytic.abs() < 1e-7 {
        return 0.0;
    }
    (numerical - analytic).abs() / numerical.abs().max(analytic.abs())
}

const CHECKPOINT_MAGIC: &str = "statarb-net v1";

/// Writes a text checkpoint: layer specs followed by row-major parameters.
/// Debugging aid only; floats round-trip exactly.
pub fn save_checkpoint<W: Write>(net: &Network, out: &mut W) -> Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    writeln!(out, "layers {}", net.layers.len())?;
    for spec in &net.layers {
        writeln!(
            out,
            "layer {} {} {} {} {}",
            spec.in_dim,
            spec.out_dim,
            spec.activation.name(),
            u8::from(spec.has_bias),
            spec.dropout_p
        )?;
    }
    for (l, w) in net.weights.iter().enumerate() {
        for v in w.data() {
            writeln!(out, "{v}")?;
        }
        if let Some(b) = &net.biases[l] {
            for v in b {
                writeln!(out, "{v}")?;
            }
        }
    }
    Ok(())
}

pub fn load_checkpoint<R: BufRead>(input: &mut R) -> Result<Network> {
    let mut lines = input.lines().enumerate();
    let mut next = |what: &str| -> Result<(u64, String)> {
        match lines.next() {
            Some((i, Ok(line))) => Ok((i as u64 + 1, line)),
            Some((i, Err(e))) => Err(Error::Parse { line: i as u64 + 1, msg: e.to_string() }),
            None => Err(Error::Parse { line: 0, msg: format!("missing {what}") }),
        }
    };
    let (line_no, magic) = next("header")?;
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(Error::Parse { line: line_no, msg: "bad checkpoint header".into() });
    }
    let (line_no, count_line) = next("layer count")?;
    let n_layers: usize = count_line
        .trim()
        .strip_prefix("layers ")
        .and_then(|s| s.parse().ok())
        .ok_or(Error::Parse { line: line_no, msg: "bad layer count".into() })?;
    let mut specs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let (line_no, l) = next("layer spec")?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        if parts.len() != 6 || parts[0] != "layer" {
            return Err(Error::Parse { line: line_no, msg: "bad layer spec".into() });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })
        };
        specs.push(LayerSpec {
            in_dim: parse(parts[1])? as usize,
            out_dim: parse(parts[2])? as usize,
            activation: Activation::from_name(parts[3])?,
            has_bias: parts[4] == "1",
            dropout_p: parse(parts[5])?,
        });
    }
    let mut net = Network::init(specs, 0)?;
    for l in 0..n_layers {
        for idx in 0..net.weights[l].data().len() {
            let (line_no, v) = next("weight")?;
            net.weights[l].data_mut()[idx] = v
                .trim()
                .parse()
                .map_err(|e: std::num::ParseFloatError| Error::Parse {
                    line: line_no,
                    msg: e.to_string(),
                })?;
        }
        if net.biases[l].is_some() {
            let len = net.biases[l].as_ref().unwrap().len();
            for idx in 0..len {
                let (line_no, v) = next("bias")?;
                net.biases[l].as_mut().unwrap()[idx] = v
                    .trim()
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| Error::Parse {
                        line: line_no,
                        msg: e.to_string(),
                    })?;
            }
        }
    }
    Ok(net)
}
