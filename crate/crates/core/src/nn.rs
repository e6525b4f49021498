//! Dense feed-forward networks with exact reverse-mode gradients and Adam.
//!
//! Parameters of an [`Mlp`] live in a single flat vector. Layer `k` stores a
//! row-major `dims[k+1] x dims[k]` weight matrix followed by its bias, so the
//! optimizer and the checkpoint writer can treat a network as one slice.
//!
//! Batched evaluation is the workhorse: inputs are `batch x in` matrices and
//! the per-vector [`Mlp::forward`] / [`Mlp::backward`] wrap a batch of one.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng as _;

use crate::error::{dim_check, Error, Result};
use crate::rng::{self, Rng};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Rectified quadratic unit, `max(0, x)^2`.
    Requ,
    Tanh,
}

/// Output head applied after the last affine map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputActivation {
    Identity,
    /// `b * tanh(z / b)`, keeping every coordinate inside `[-b, b]`.
    ScaledTanh(f64),
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Requ => {
                let r = z.max(0.0);
                r * r
            }
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Requ => 2.0 * z.max(0.0),
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Requ => "requ",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "requ" => Ok(Activation::Requ),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

impl OutputActivation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            OutputActivation::Identity => z,
            OutputActivation::ScaledTanh(b) => b * (z / b).tanh(),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            OutputActivation::Identity => 1.0,
            OutputActivation::ScaledTanh(b) => {
                let t = (z / b).tanh();
                1.0 - t * t
            }
        }
    }
}

/// Width/depth/activation description used to build networks from config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetShape {
    pub width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
}

impl NetShape {
    pub fn new(width: usize, hidden_layers: usize, activation: Activation) -> Self {
        Self {
            width,
            hidden_layers,
            activation,
        }
    }

    pub fn dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 2);
        dims.push(input);
        dims.extend(std::iter::repeat_n(self.width, self.hidden_layers));
        dims.push(output);
        dims
    }
}

impl Default for NetShape {
    fn default() -> Self {
        Self::new(128, 3, Activation::Relu)
    }
}

/// A feed-forward network `A_L s(... s(A_1 x + b_1) ...) + b_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    params: Vec<f64>,
    hidden: Activation,
    output: OutputActivation,
}

/// Intermediate values of a batched forward pass, consumed by
/// [`Mlp::backward_batch`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the network input).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(
        layer_dims: Vec<usize>,
        hidden: Activation,
        output: OutputActivation,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config(
                "an mlp needs at least an input and an output dimension".into(),
            ));
        }
        if layer_dims[1..].contains(&0) {
            return Err(Error::Config(format!(
                "layer widths must be positive: {layer_dims:?}"
            )));
        }
        if let OutputActivation::ScaledTanh(b) = output {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("scaled_tanh bound must be > 0, got {b}")));
            }
        }
        let n = param_count(&layer_dims);
        Ok(Self {
            layer_dims,
            params: vec![0.0; n],
            hidden,
            output,
        })
    }

    /// Randomly initialized network: He-uniform for layers feeding a
    /// relu/requ, Xavier-uniform otherwise; zero biases.
    pub fn new(
        layer_dims: Vec<usize>,
        hidden: Activation,
        output: OutputActivation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, hidden, output)?;
        let n_layers = net.num_layers();
        for k in 0..n_layers {
            let (fan_in, fan_out) = (net.layer_dims[k], net.layer_dims[k + 1]);
            let feeds_hidden = k + 1 < n_layers;
            let bound = match (feeds_hidden, hidden) {
                (true, Activation::Relu | Activation::Requ) => (6.0 / fan_in.max(1) as f64).sqrt(),
                _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let (w0, w1) = net.weight_range(k);
            for w in &mut net.params[w0..w1] {
                *w = rng.random_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    pub fn from_params(
        layer_dims: Vec<usize>,
        hidden: Activation,
        output: OutputActivation,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, hidden, output)?;
        dim_check("mlp parameter count", net.params.len(), params.len())?;
        net.params = params;
        Ok(net)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("non-empty dims")
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layer_offset(&self, k: usize) -> usize {
        param_count(&self.layer_dims[..=k])
    }

    fn weight_range(&self, k: usize) -> (usize, usize) {
        let o = self.layer_offset(k);
        (o, o + self.layer_dims[k + 1] * self.layer_dims[k])
    }

    fn bias_range(&self, k: usize) -> (usize, usize) {
        let (_, w1) = self.weight_range(k);
        (w1, w1 + self.layer_dims[k + 1])
    }

    /// Weight matrix of layer `k`, shape `out x in`.
    pub fn weight(&self, k: usize) -> ArrayView2<'_, f64> {
        let (a, b) = self.weight_range(k);
        ArrayView2::from_shape((self.layer_dims[k + 1], self.layer_dims[k]), &self.params[a..b])
            .expect("weight shape")
    }

    pub fn bias(&self, k: usize) -> ArrayView1<'_, f64> {
        let (a, b) = self.bias_range(k);
        ArrayView1::from(&self.params[a..b])
    }

    pub fn weight_mut(&mut self, k: usize) -> ArrayViewMut2<'_, f64> {
        let (a, b) = self.weight_range(k);
        let shape = (self.layer_dims[k + 1], self.layer_dims[k]);
        ArrayViewMut2::from_shape(shape, &mut self.params[a..b]).expect("weight shape")
    }

    pub fn bias_mut(&mut self, k: usize) -> ArrayViewMut1<'_, f64> {
        let (a, b) = self.bias_range(k);
        ArrayViewMut1::from(&mut self.params[a..b])
    }

    /// Zeroes the final affine layer, making the network output identically
    /// zero (and, for a coupling network, the layer an identity map).
    pub fn zero_last_layer(&mut self) {
        let k = self.num_layers() - 1;
        let (a, _) = self.weight_range(k);
        let (_, b) = self.bias_range(k);
        self.params[a..b].iter_mut().for_each(|p| *p = 0.0);
    }

    /// Clamps every parameter to `[-bound, bound]`.
    pub fn clip_params(&mut self, bound: f64) {
        for p in &mut self.params {
            *p = p.clamp(-bound, bound);
        }
    }

    /// Evaluates the network on one input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        dim_check("mlp input", self.input_dim(), input.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row shape");
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Evaluates the network on every row of `x`.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        dim_check("mlp input", self.input_dim(), x.ncols())?;
        let mut a = x.to_owned();
        let last = self.num_layers() - 1;
        for k in 0..=last {
            let mut z = self.affine(k, a.view());
            if k < last {
                z.mapv_inplace(|v| self.hidden.apply(v));
            } else {
                z.mapv_inplace(|v| self.output.apply(v));
            }
            a = z;
        }
        Ok(a)
    }

    /// Forward pass that keeps what the backward pass needs.
    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        dim_check("mlp input", self.input_dim(), x.ncols())?;
        let n_layers = self.num_layers();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        inputs.push(x.to_owned());
        for k in 0..n_layers {
            let z = self.affine(k, inputs[k].view());
            if k + 1 < n_layers {
                inputs.push(z.mapv(|v| self.hidden.apply(v)));
            }
            pre.push(z);
        }
        let out = pre[n_layers - 1].mapv(|v| self.output.apply(v));
        Ok((out, ForwardCache { inputs, pre }))
    }

    fn affine(&self, k: usize, a: ArrayView2<'_, f64>) -> Array2<f64> {
        let w = self.weight(k);
        let b = self.bias(k);
        let mut z = Array2::zeros((a.nrows(), w.nrows()));
        z.rows_mut().into_iter().for_each(|mut r| r.assign(&b));
        if a.ncols() > 0 {
            general_mat_mul(1.0, &a, &w.t(), 1.0, &mut z);
        }
        z
    }

    /// Reverse-mode pass for a batch.
    ///
    /// Accumulates `d <sum_rows out . out_grad> / d params` into
    /// `param_grads` and returns the input gradient when asked for it.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        out_grad: ArrayView2<'_, f64>,
        param_grads: &mut [f64],
        want_input_grad: bool,
    ) -> Result<Option<Array2<f64>>> {
        dim_check("mlp gradient buffer", self.params.len(), param_grads.len())?;
        let n_layers = self.num_layers();
        let batch = cache.inputs[0].nrows();
        if out_grad.dim() != (batch, self.output_dim()) {
            return Err(Error::Dimension(format!(
                "output gradient shape {:?}, expected {:?}",
                out_grad.dim(),
                (batch, self.output_dim())
            )));
        }
        let mut dz = out_grad.to_owned();
        let out_act = self.output;
        if out_act != OutputActivation::Identity {
            dz.zip_mut_with(&cache.pre[n_layers - 1], |g, &z| *g *= out_act.derivative(z));
        }
        for k in (0..n_layers).rev() {
            let a = &cache.inputs[k];
            let (w0, w1) = self.weight_range(k);
            let (b0, b1) = self.bias_range(k);
            {
                let mut dw = ArrayViewMut2::from_shape(
                    (self.layer_dims[k + 1], self.layer_dims[k]),
                    &mut param_grads[w0..w1],
                )
                .expect("grad shape");
                if a.ncols() > 0 {
                    general_mat_mul(1.0, &dz.t(), a, 1.0, &mut dw);
                }
            }
            {
                let mut db = ArrayViewMut1::from(&mut param_grads[b0..b1]);
                db += &dz.sum_axis(Axis(0));
            }
            if k == 0 && !want_input_grad {
                return Ok(None);
            }
            let w = self.weight(k);
            let mut da = Array2::zeros((batch, self.layer_dims[k]));
            if da.ncols() > 0 {
                general_mat_mul(1.0, &dz, &w, 0.0, &mut da);
            }
            if k == 0 {
                return Ok(Some(da));
            }
            let hidden = self.hidden;
            da.zip_mut_with(&cache.pre[k - 1], |g, &z| *g *= hidden.derivative(z));
            dz = da;
        }
        unreachable!("loop returns at k == 0")
    }

    /// Exact gradients of `<f(input), output_grad>` with respect to the
    /// parameters and the input.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        dim_check("mlp input", self.input_dim(), input.len())?;
        dim_check("mlp output gradient", self.output_dim(), output_grad.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row shape");
        let (_, cache) = self.forward_cached(x)?;
        let g = ArrayView2::from_shape((1, output_grad.len()), output_grad).expect("row shape");
        let mut pg = vec![0.0; self.params.len()];
        let ig = self
            .backward_batch(&cache, g, &mut pg, true)?
            .expect("input grad requested");
        Ok((pg, ig.into_raw_vec_and_offset().0))
    }

    /// 64-bit fingerprint of the exact parameter bit patterns.
    pub fn param_hash(&self) -> u64 {
        param_hash(&self.params)
    }
}

/// FNV-1a over the little-endian bytes of `params`.
pub fn param_hash(params: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        for b in p.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Convenience: evaluates `net` on one input.
pub fn mlp_forward(net: &Mlp, input: &[f64]) -> Result<Vec<f64>> {
    net.forward(input)
}

/// Convenience: `(param_grads, input_grad)` for one input.
pub fn mlp_backward(net: &Mlp, input: &[f64], output_grad: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    net.backward(input, output_grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Moment buffers of the Adam optimizer for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
            config,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        dim_check("adam parameters", self.first_moment.len(), params.len())?;
        dim_check("adam gradients", self.first_moment.len(), grads.len())?;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient entry {i} is {} at adam step {}",
                grads[i],
                self.step_count + 1
            )));
        }
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    state.step(params, grads)
}

/// Central-difference gradient of `loss` at `params`.
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = loss(&p);
        p[i] = orig - step;
        let down = loss(&p);
        p[i] = orig;
        grad.push((up - down) / (2.0 * step));
    }
    grad
}

/// Draws a network with random shape for property tests.
pub fn random_mlp(rng: &mut Rng, max_width: usize, max_layers: usize, hidden: Activation) -> Mlp {
    let n_layers = rng.random_range(1..=max_layers);
    let dims: Vec<usize> = (0..=n_layers)
        .map(|_| rng.random_range(1..=max_width))
        .collect();
    let mut net = Mlp::new(dims, hidden, OutputActivation::Identity, rng).expect("valid dims");
    // Non-zero biases so every code path in the backward pass is exercised.
    for p in net.params_mut() {
        *p += 0.1 * rng::normal(rng);
    }
    net
}

pub(crate) fn scale(v: &mut [f64], by: f64) {
    v.iter_mut().for_each(|x| *x *= by);
}

pub(crate) fn row_vec(v: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, v.len()), v).expect("row shape")
}
