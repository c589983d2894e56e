//! Convolutional network for cochleogram classification and orientation
//! regression, with hand-written backpropagation.

pub mod checkpoint;
pub mod layers;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use layers::Scalar;
use layers::{affine_relu_pool, channel_stats, conv_backward_sample, conv_forward, gemm, ConvScratch, ConvShape};

pub const INPUT_HEIGHT: usize = 40;
pub const INPUT_WIDTH: usize = 106;
pub const NUM_CLASSES: usize = 11;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    TrainConfig(String),
    #[error("empty dataset: {0}")]
    EmptyData(&'static str),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
}

fn shape_err(what: &'static str, expected: impl ToString, got: impl ToString) -> NetError {
    NetError::Shape {
        what,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// 11-way softmax over empty + ten landmark radii.
    Classification,
    /// Orientation γ, emitted as γ/60.
    Regression,
}

impl Task {
    pub fn output_units(self) -> usize {
        match self {
            Task::Classification => NUM_CLASSES,
            Task::Regression => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub fc1_units: usize,
    pub output_units: usize,
    pub batch_norm: bool,
    pub input_height: usize,
    pub input_width: usize,
}

impl NetworkConfig {
    /// Conv 16/32/64, FC 128, for the given task.
    pub fn for_task(task: Task) -> Self {
        Self {
            conv_channels: vec![16, 32, 64],
            kernel: 3,
            fc1_units: 128,
            output_units: task.output_units(),
            batch_norm: true,
            input_height: INPUT_HEIGHT,
            input_width: INPUT_WIDTH,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if ![NUM_CLASSES, 1].contains(&self.output_units) {
            return Err(NetError::Config(format!(
                "output_units must be {NUM_CLASSES} or 1, got {}",
                self.output_units
            )));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(NetError::Config("conv_channels must be non-empty and positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(NetError::Config("kernel must be odd".into()));
        }
        if self.fc1_units == 0 {
            return Err(NetError::Config("fc1_units must be positive".into()));
        }
        let (h, w) = self.spatial_after(self.conv_channels.len());
        if h == 0 || w == 0 {
            return Err(NetError::Config(format!(
                "{}×{} input vanishes after {} poolings",
                self.input_height,
                self.input_width,
                self.conv_channels.len()
            )));
        }
        Ok(())
    }

    pub fn task(&self) -> Task {
        if self.output_units == 1 {
            Task::Regression
        } else {
            Task::Classification
        }
    }

    /// Spatial size after `blocks` conv+pool blocks.
    pub fn spatial_after(&self, blocks: usize) -> (usize, usize) {
        (0..blocks).fold((self.input_height, self.input_width), |(h, w), _| (h / 2, w / 2))
    }

    pub fn flat_features(&self) -> usize {
        let (h, w) = self.spatial_after(self.conv_channels.len());
        h * w * self.conv_channels.last().copied().unwrap_or(0)
    }

    fn layout(&self) -> Layout {
        let mut off = 0;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let mut blocks = Vec::new();
        let mut c_in = 1;
        for (i, &c) in self.conv_channels.iter().enumerate() {
            let (h, w) = self.spatial_after(i);
            let w_r = take(c * c_in * self.kernel * self.kernel);
            let (bias, gamma, beta) = if self.batch_norm {
                (None, Some(take(c)), Some(take(c)))
            } else {
                (Some(take(c)), None, None)
            };
            blocks.push(BlockLayout {
                shape: ConvShape {
                    c: c_in,
                    h,
                    w,
                    kh: self.kernel,
                    kw: self.kernel,
                    pad: self.kernel / 2,
                },
                c_out: c,
                weight: w_r,
                bias,
                gamma,
                beta,
                state: 0,
            });
            c_in = c;
        }
        let flat = self.flat_features();
        let fc1_w = take(self.fc1_units * flat);
        let fc1_b = take(self.fc1_units);
        let fc2_w = take(self.output_units * self.fc1_units);
        let fc2_b = take(self.output_units);
        let mut state_off = 0;
        for b in blocks.iter_mut() {
            b.state = state_off;
            if self.batch_norm {
                state_off += 2 * b.c_out;
            }
        }
        Layout {
            blocks,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            num_params: off,
            num_state: state_off,
        }
    }

    /// Trainable parameter count.
    pub fn num_params(&self) -> usize {
        self.layout().num_params
    }
}

type Span = std::ops::Range<usize>;

#[derive(Debug, Clone)]
struct BlockLayout {
    shape: ConvShape,
    c_out: usize,
    weight: Span,
    bias: Option<Span>,
    gamma: Option<Span>,
    beta: Option<Span>,
    /// Offset of `[running_mean; c_out] [running_var; c_out]` in the state.
    state: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    blocks: Vec<BlockLayout>,
    fc1_w: Span,
    fc1_b: Span,
    fc2_w: Span,
    fc2_b: Span,
    num_params: usize,
    num_state: usize,
}

/// Dense (batch, channels, height, width) tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    data: Vec<T>,
    dims: [usize; 4],
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(data: Vec<T>, dims: [usize; 4]) -> Result<Self, NetError> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(shape_err("tensor data", expected, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite("tensor value"));
        }
        Ok(Self { data, dims })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            data: vec![T::zero(); dims.iter().product()],
            dims,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    params: Vec<T>,
    state: Vec<T>,
}

/// Intermediates kept by [`Network::forward`] for [`Network::backward`].
/// Buffers are reused when the same cache is passed to
/// [`Network::forward_into`] again.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    n: usize,
    mode: Mode,
    /// `acts[0]` is the input, `acts[i + 1]` the pooled output of block `i`.
    acts: Vec<Vec<T>>,
    blocks: Vec<BlockCache<T>>,
    hidden: Vec<T>,
    out: Vec<T>,
    cols: Vec<T>,
}

#[derive(Debug, Clone, Default)]
struct BlockCache<T> {
    /// Raw convolution output, before normalization or bias.
    z: Vec<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
    pool_arg: Vec<u32>,
    /// `z` at each pooling window's maximum.
    pool_z: Vec<T>,
}

impl<T> Default for ForwardCache<T> {
    fn default() -> Self {
        Self {
            n: 0,
            mode: Mode::Eval,
            acts: Vec::new(),
            blocks: Vec::new(),
            hidden: Vec::new(),
            out: Vec::new(),
            cols: Vec::new(),
        }
    }
}

impl<T> ForwardCache<T> {
    pub fn batch(&self) -> usize {
        self.n
    }

    /// Outputs of the last forward pass.
    pub fn output(&self) -> &[T] {
        &self.out
    }
}

/// Scratch buffers for [`Network::backward_into`].
#[derive(Debug, Clone, Default)]
pub struct GradWorkspace<T> {
    grad: Vec<T>,
    dh: Vec<T>,
    dact: Vec<T>,
    dx: Vec<T>,
    dz: Vec<T>,
    scratch: ConvScratch<T>,
}

/// Resizes without clearing; callers overwrite or fill the contents.
fn fit<T: Scalar>(v: &mut Vec<T>, len: usize) {
    v.resize(len, T::zero());
}
impl<T: Scalar> Network<T> {
    /// He-uniform `±√(6/fan_in)` weights, zero biases, unit BN scale.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let lay = config.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); lay.num_params];
        let mut fill = |r: &Span, fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut params[r.clone()] {
                *p = T::lit(rng.random_range(-bound..bound));
            }
        };
        for b in &lay.blocks {
            fill(&b.weight, b.shape.patch(), &mut rng);
        }
        fill(&lay.fc1_w, config.flat_features(), &mut rng);
        fill(&lay.fc2_w, config.fc1_units, &mut rng);
        for b in &lay.blocks {
            if let Some(g) = &b.gamma {
                params[g.clone()].fill(T::one());
            }
        }
        let mut state = vec![T::zero(); lay.num_state];
        for b in &lay.blocks {
            if config.batch_norm {
                state[b.state + b.c_out..b.state + 2 * b.c_out].fill(T::one());
            }
        }
        Ok(Self { config, params, state })
    }

    pub fn from_parts(config: NetworkConfig, params: Vec<T>, state: Vec<T>) -> Result<Self, NetError> {
        config.validate()?;
        let lay = config.layout();
        if params.len() != lay.num_params {
            return Err(shape_err("parameters", lay.num_params, params.len()));
        }
        if state.len() != lay.num_state {
            return Err(shape_err("batch-norm state", lay.num_state, state.len()));
        }
        Ok(Self { config, params, state })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn state(&self) -> &[T] {
        &self.state
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Casts parameters and state to another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64().unwrap_or(0.0))).collect();
        Network {
            config: self.config.clone(),
            params: conv(&self.params),
            state: conv(&self.state),
        }
    }

    /// Network outputs (logits, or γ/60 for regression) as `N × units`.
    pub fn forward(&self, x: &Tensor4<T>, mode: Mode) -> Result<(Vec<T>, ForwardCache<T>), NetError> {
        let mut cache = ForwardCache::default();
        self.forward_into(x, mode, &mut cache)?;
        Ok((std::mem::take(&mut cache.out), cache))
    }

    /// [`forward`](Self::forward) into a reusable cache; the outputs are
    /// left in [`ForwardCache::output`].
    pub fn forward_into(&self, x: &Tensor4<T>, mode: Mode, cache: &mut ForwardCache<T>) -> Result<(), NetError> {
        let cfg = &self.config;
        let expect = [x.dims[0], 1, cfg.input_height, cfg.input_width];
        if x.dims != expect || x.dims[0] == 0 {
            return Err(shape_err(
                "forward input",
                format!("(N≥1, 1, {}, {})", cfg.input_height, cfg.input_width),
                format!("{:?}", x.dims),
            ));
        }
        let lay = cfg.layout();
        let n = x.dims[0];
        let p = &self.params;
        let eps = T::lit(BN_EPS);
        cache.n = n;
        cache.mode = mode;
        cache.acts.resize_with(lay.blocks.len() + 1, Vec::new);
        cache.blocks.resize_with(lay.blocks.len(), BlockCache::default);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(&x.data);
        for (bi, b) in lay.blocks.iter().enumerate() {
            let s = &b.shape;
            let hw = s.out_len();
            let c = &mut cache.blocks[bi];
            let (done, rest) = cache.acts.split_at_mut(bi + 1);
            let (act, pooled) = (&done[bi], &mut rest[0]);
            fit(&mut c.z, n * b.c_out * hw);
            conv_forward(act, n, s, &p[b.weight.clone()], b.c_out, &mut c.z, &mut cache.cols);
            let (scale, shift) = if let (Some(g), Some(be)) = (&b.gamma, &b.beta) {
                let (mean, var) = match mode {
                    Mode::Train => channel_stats(&c.z, n, b.c_out, hw),
                    Mode::Eval => (
                        self.state[b.state..b.state + b.c_out].to_vec(),
                        self.state[b.state + b.c_out..b.state + 2 * b.c_out].to_vec(),
                    ),
                };
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let scale: Vec<T> = p[g.clone()].iter().zip(&inv_std).map(|(&g, &is)| g * is).collect();
                let shift: Vec<T> = p[be.clone()]
                    .iter()
                    .zip(&scale)
                    .zip(&mean)
                    .map(|((&be, &sc), &mu)| be - mu * sc)
                    .collect();
                (c.batch_mean, c.batch_var, c.inv_std) = (mean, var, inv_std);
                (scale, shift)
            } else {
                let bias = p[b.bias.clone().expect("bias without batch norm")].to_vec();
                (vec![T::one(); b.c_out], bias)
            };
            let pool_len = n * b.c_out * (s.out_h() / 2) * (s.out_w() / 2);
            fit(pooled, pool_len);
            fit(&mut c.pool_z, pool_len);
            c.pool_arg.resize(pool_len, 0);
            affine_relu_pool(
                &c.z,
                n,
                b.c_out,
                s.out_h(),
                s.out_w(),
                &scale,
                &shift,
                pooled,
                &mut c.pool_arg,
                &mut c.pool_z,
            );
        }
        let act = cache.acts.last().expect("at least one block");
        let flat_len = cfg.flat_features();
        let u = cfg.fc1_units;
        fit(&mut cache.hidden, n * u);
        gemm(n, flat_len, u, act, false, &p[lay.fc1_w.clone()], true, &mut cache.hidden, false);
        let b1 = &p[lay.fc1_b.clone()];
        for row in cache.hidden.chunks_mut(u) {
            for (h, b) in row.iter_mut().zip(b1) {
                *h = (*h + *b).max(T::zero());
            }
        }
        let k = cfg.output_units;
        fit(&mut cache.out, n * k);
        gemm(n, u, k, &cache.hidden, false, &p[lay.fc2_w.clone()], true, &mut cache.out, false);
        let b2 = &p[lay.fc2_b.clone()];
        for row in cache.out.chunks_mut(k) {
            for (o, b) in row.iter_mut().zip(b2) {
                *o = *o + *b;
            }
        }
        if cache.out.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite("network output"));
        }
        Ok(())
    }

    /// Gradient of the loss w.r.t. every trainable parameter, given the
    /// gradient w.r.t. the outputs. Requires a [`Mode::Train`] cache when
    /// batch norm is on.
    pub fn backward(&self, cache: &ForwardCache<T>, dout: &[T]) -> Result<Vec<T>, NetError> {
        let mut ws = GradWorkspace::default();
        self.backward_into(cache, dout, &mut ws)?;
        Ok(ws.grad)
    }

    /// [`backward`](Self::backward) with reusable scratch buffers.
    pub fn backward_into<'w>(
        &self,
        cache: &ForwardCache<T>,
        dout: &[T],
        ws: &'w mut GradWorkspace<T>,
    ) -> Result<&'w [T], NetError> {
        let cfg = &self.config;
        let lay = cfg.layout();
        let n = cache.n;
        let (u, k) = (cfg.fc1_units, cfg.output_units);
        if dout.len() != n * k || cache.acts.len() != lay.blocks.len() + 1 {
            return Err(shape_err("output gradient", n * k, dout.len()));
        }
        if cfg.batch_norm && cache.mode != Mode::Train {
            return Err(NetError::Config("backward needs a training-mode forward".into()));
        }
        let p = &self.params;
        let grad = &mut ws.grad;
        grad.clear();
        grad.resize(lay.num_params, T::zero());
        // FC2
        let flat_len = cfg.flat_features();
        let flat = cache.acts.last().expect("at least one block");
        gemm(k, n, u, dout, true, &cache.hidden, false, &mut grad[lay.fc2_w.clone()], false);
        for row in dout.chunks(k) {
            for (g, d) in grad[lay.fc2_b.clone()].iter_mut().zip(row) {
                *g = *g + *d;
            }
        }
        fit(&mut ws.dh, n * u);
        gemm(n, k, u, dout, false, &p[lay.fc2_w.clone()], false, &mut ws.dh, false);
        for (d, h) in ws.dh.iter_mut().zip(&cache.hidden) {
            if *h <= T::zero() {
                *d = T::zero();
            }
        }
        // FC1
        gemm(u, n, flat_len, &ws.dh, true, flat, false, &mut grad[lay.fc1_w.clone()], false);
        for row in ws.dh.chunks(u) {
            for (g, d) in grad[lay.fc1_b.clone()].iter_mut().zip(row) {
                *g = *g + *d;
            }
        }
        fit(&mut ws.dact, n * flat_len);
        gemm(n, u, flat_len, &ws.dh, false, &p[lay.fc1_w.clone()], false, &mut ws.dact, false);
        for (bi, b) in lay.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[bi];
            let s = &b.shape;
            let hw = s.out_len();
            let pool_len = (s.out_h() / 2) * (s.out_w() / 2);
            let out = &cache.acts[bi + 1];
            // ReLU gate: pooled outputs clamped to zero pass no gradient
            for (d, o) in ws.dact.iter_mut().zip(out) {
                if *o <= T::zero() {
                    *d = T::zero();
                }
            }
            let dact = &ws.dact;
            // dz = α·z + β per channel from the normalization, plus `gain·d`
            // at each pooling argmax
            let (alpha, beta, gain) = match (&b.gamma, &b.beta) {
                (Some(g), Some(be)) => {
                    let mut sdy = vec![T::zero(); b.c_out];
                    let mut sdyx = vec![T::zero(); b.c_out];
                    for (i, (d, zs)) in dact.chunks(pool_len).zip(c.pool_z.chunks(pool_len)).enumerate() {
                        let ch = i % b.c_out;
                        let mu = c.batch_mean[ch];
                        let mut acc = (T::zero(), T::zero());
                        for (&d, &z) in d.iter().zip(zs) {
                            acc = (acc.0 + d, acc.1 + d * (z - mu));
                        }
                        sdy[ch] = sdy[ch] + acc.0;
                        sdyx[ch] = sdyx[ch] + acc.1 * c.inv_std[ch];
                    }
                    grad[g.clone()].copy_from_slice(&sdyx);
                    grad[be.clone()].copy_from_slice(&sdy);
                    let m = T::from_usize(n * hw).expect("count fits");
                    let mut alpha = Vec::with_capacity(b.c_out);
                    let mut beta = Vec::with_capacity(b.c_out);
                    let mut gain = Vec::with_capacity(b.c_out);
                    for ch in 0..b.c_out {
                        let is = c.inv_std[ch];
                        let kc = p[g.start + ch] * is / m;
                        alpha.push(-kc * is * sdyx[ch]);
                        beta.push(-kc * (sdy[ch] - c.batch_mean[ch] * is * sdyx[ch]));
                        gain.push(kc * m);
                    }
                    (alpha, beta, gain)
                }
                _ => {
                    let bias = b.bias.clone().expect("bias without batch norm");
                    for (i, d) in dact.chunks(pool_len).enumerate() {
                        let ch = bias.start + i % b.c_out;
                        grad[ch] = grad[ch] + d.iter().copied().sum();
                    }
                    (vec![T::zero(); b.c_out], vec![T::zero(); b.c_out], vec![T::one(); b.c_out])
                }
            };
            let w = &p[b.weight.clone()];
            let in_len = s.c * s.h * s.w;
            let dw = &mut grad[b.weight.clone()];
            fit(&mut ws.dx, if bi > 0 { n * in_len } else { 0 });
            fit(&mut ws.dz, b.c_out * hw);
            ws.scratch.fit(s);
            for i in 0..n {
                let zi = &c.z[i * b.c_out * hw..(i + 1) * b.c_out * hw];
                for ch in 0..b.c_out {
                    let r = ch * hw..(ch + 1) * hw;
                    let (a, be) = (alpha[ch], beta[ch]);
                    for (d, &zv) in ws.dz[r.clone()].iter_mut().zip(&zi[r]) {
                        *d = a * zv + be;
                    }
                }
                let base = i * b.c_out * hw;
                let pr = i * b.c_out * pool_len..(i + 1) * b.c_out * pool_len;
                for (j, (d, at)) in dact[pr.clone()].chunks(pool_len).zip(c.pool_arg[pr].chunks(pool_len)).enumerate() {
                    let g = gain[j];
                    for (&d, &at) in d.iter().zip(at) {
                        let at = at as usize - base;
                        ws.dz[at] = ws.dz[at] + g * d;
                    }
                }
                let dxi = (bi > 0).then(|| &mut ws.dx[i * in_len..(i + 1) * in_len]);
                conv_backward_sample(
                    &cache.acts[bi][i * in_len..(i + 1) * in_len],
                    s,
                    w,
                    b.c_out,
                    &ws.dz,
                    dw,
                    dxi,
                    &mut ws.scratch,
                );
            }
            if bi > 0 {
                std::mem::swap(&mut ws.dact, &mut ws.dx);
            }
        }
        Ok(&ws.grad)
    }

    /// Moves running statistics toward the batch statistics of a training
    /// forward: `r ← m·r + (1 − m)·batch` (variance unbiased).
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>, momentum: f64) {
        if !self.config.batch_norm || cache.mode != Mode::Train {
            return;
        }
        let lay = self.config.layout();
        let m = T::lit(momentum);
        let one_m = T::one() - m;
        for (b, c) in lay.blocks.iter().zip(&cache.blocks) {
            let count = (cache.n * b.shape.out_len()) as f64;
            let unbias = T::lit(if count > 1.0 { count / (count - 1.0) } else { 1.0 });
            for ch in 0..b.c_out {
                let rm = &mut self.state[b.state + ch];
                *rm = m * *rm + one_m * c.batch_mean[ch];
                let rv = &mut self.state[b.state + b.c_out + ch];
                *rv = m * *rv + one_m * c.batch_var[ch] * unbias;
            }
        }
    }
}

/// Row-wise softmax of `n × k` logits.
pub fn softmax<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Index of the largest value in each row.
pub fn argmax_rows<T: Scalar>(values: &[T], k: usize) -> Vec<usize> {
    values
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
