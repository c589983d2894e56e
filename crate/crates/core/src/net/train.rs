//! Losses, class weights, ADAM and the early-stopping training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax_rows, softmax, ForwardCache, GradWorkspace, Mode, NetError, Network, Scalar, Task, Tensor4};

/// Orientation targets are stored as γ/60.
pub const GAMMA_SCALE: f64 = 60.0;

/// `w_k = N/(K·n_k)`.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>, NetError> {
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(NetError::TrainConfig(format!("class {k} has no samples")));
    }
    if counts.is_empty() {
        return Err(NetError::TrainConfig("no classes".into()));
    }
    let total: usize = counts.iter().sum();
    let k = counts.len() as f64;
    Ok(counts.iter().map(|&c| total as f64 / (k * c as f64)).collect())
}

/// Weighted softmax cross-entropy averaged over the batch, and its gradient
/// w.r.t. the logits.
pub fn cross_entropy<T: Scalar>(
    logits: &[T],
    k: usize,
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<(f64, Vec<T>), NetError> {
    let n = labels.len();
    if logits.len() != n * k || n == 0 {
        return Err(super::shape_err("logits", n * k, logits.len()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFinite("logits"));
    }
    if let Some(w) = weights {
        if w.len() != k {
            return Err(super::shape_err("class weights", k, w.len()));
        }
    }
    let mut grad = softmax(logits, k);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(super::shape_err("label", format!("< {k}"), y));
        }
        let w = weights.map_or(1.0, |w| w[y]);
        let row = &mut grad[i * k..(i + 1) * k];
        let p = row[y].to_f64().unwrap_or(0.0).max(1e-300);
        loss += -w * p.ln();
        row[y] = row[y] - T::one();
        let scale = T::lit(w * inv_n);
        row.iter_mut().for_each(|g| *g = *g * scale);
    }
    Ok((loss * inv_n, grad))
}

/// Mean squared error and its gradient.
pub fn mse<T: Scalar>(outputs: &[T], targets: &[f64]) -> Result<(f64, Vec<T>), NetError> {
    if outputs.len() != targets.len() || outputs.is_empty() {
        return Err(super::shape_err("regression outputs", targets.len(), outputs.len()));
    }
    if outputs.iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFinite("regression outputs"));
    }
    let inv_n = 1.0 / targets.len() as f64;
    let mut loss = 0.0;
    let grad = outputs
        .iter()
        .zip(targets)
        .map(|(o, t)| {
            let d = o.to_f64().unwrap_or(0.0) - t;
            loss += d * d;
            T::lit(2.0 * d * inv_n)
        })
        .collect();
    Ok((loss * inv_n, grad))
}

/// Supervision for a [`TrainSet`].
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Regression targets in network units (γ/60).
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn subset(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(v) => Targets::Classes(idx.iter().map(|&i| v[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Inputs `N × (1·H·W)` with their targets.
#[derive(Debug, Clone)]
pub struct TrainSet<T> {
    inputs: Vec<T>,
    sample_len: usize,
    dims: [usize; 3],
    targets: Targets,
}

impl<T: Scalar> TrainSet<T> {
    pub fn new(inputs: Vec<T>, height: usize, width: usize, targets: Targets) -> Result<Self, NetError> {
        let sample_len = height * width;
        if sample_len == 0 || inputs.len() != sample_len * targets.len() {
            return Err(super::shape_err(
                "training inputs",
                sample_len * targets.len(),
                inputs.len(),
            ));
        }
        Ok(Self {
            inputs,
            sample_len,
            dims: [1, height, width],
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor4<T>, Targets) {
        let mut t = Tensor4 {
            data: Vec::new(),
            dims: [0; 4],
        };
        let y = self.batch_into(idx, &mut t);
        (t, y)
    }

    /// [`batch`](Self::batch) reusing the tensor's allocation.
    pub fn batch_into(&self, idx: &[usize], t: &mut Tensor4<T>) -> Targets {
        t.data.clear();
        for &i in idx {
            t.data.extend_from_slice(&self.inputs[i * self.sample_len..(i + 1) * self.sample_len]);
        }
        t.dims = [idx.len(), self.dims[0], self.dims[1], self.dims[2]];
        self.targets.subset(idx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Per-class loss weights (classification only).
    pub class_weights: Option<Vec<f64>>,
    pub seed: u64,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 100,
            patience: 20,
            batch_size: 64,
            class_weights: None,
            seed: 0,
            bn_momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.lr > 0.0) {
            return Err(NetError::TrainConfig("lr must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(NetError::TrainConfig("patience exceeds max_epochs".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(NetError::TrainConfig("batch_size and max_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(NetError::TrainConfig("ADAM betas must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// ADAM moment estimates for a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize, tc: &TrainConfig) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
            lr: tc.lr,
            beta1: tc.beta1,
            beta2: tc.beta2,
            eps: tc.adam_eps,
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        // bias corrections folded into the step size
        let step = self.lr * (1.0 - self.beta2.powi(self.t)).sqrt() / (1.0 - self.beta1.powi(self.t));
        let eps_hat = T::lit(self.eps * (1.0 - self.beta2.powi(self.t)).sqrt());
        let step = T::lit(step);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + c1 * *g;
            *v = b2 * *v + c2 * *g * *g;
            *p = *p - step * *m / (v.sqrt() + eps_hat);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation accuracy (classification) or RMSE in degrees (regression).
    pub val_metric: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the lowest validation loss.
    pub network: Network<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// History as `epoch,train_loss,val_loss,val_metric` CSV.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_metric\n");
    for r in history {
        s.push_str(&format!("{},{:.8},{:.8},{:.6}\n", r.epoch, r.train_loss, r.val_loss, r.val_metric));
    }
    s
}

fn batch_loss<T: Scalar>(
    task: Task,
    out: &[T],
    targets: &Targets,
    weights: Option<&[f64]>,
) -> Result<(f64, Vec<T>), NetError> {
    match (task, targets) {
        (Task::Classification, Targets::Classes(y)) => cross_entropy(out, super::NUM_CLASSES, y, weights),
        (Task::Regression, Targets::Values(y)) => mse(out, y),
        _ => Err(NetError::Config("targets do not match the network task".into())),
    }
}

/// Outputs for every sample in eval mode, in order.
pub fn predict<T: Scalar>(net: &Network<T>, set: &TrainSet<T>, batch: usize) -> Result<Vec<T>, NetError> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len() * net.config().output_units);
    let mut x = Tensor4::zeros([0; 4]);
    let mut cache = ForwardCache::default();
    for chunk in idx.chunks(batch.max(1)) {
        set.batch_into(chunk, &mut x);
        net.forward_into(&x, Mode::Eval, &mut cache)?;
        out.extend_from_slice(cache.output());
    }
    Ok(out)
}

/// Loss and metric of `net` on `set` in eval mode.
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    set: &TrainSet<T>,
    weights: Option<&[f64]>,
) -> Result<(f64, f64), NetError> {
    let task = net.config().task();
    let out = predict(net, set, 64)?;
    let (loss, _) = batch_loss(task, &out, set.targets(), weights)?;
    let metric = match set.targets() {
        Targets::Classes(y) => {
            let pred = argmax_rows(&out, super::NUM_CLASSES);
            pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64
        }
        Targets::Values(y) => {
            let se: f64 = out
                .iter()
                .zip(y)
                .map(|(o, t)| ((o.to_f64().unwrap_or(0.0) - t) * GAMMA_SCALE).powi(2))
                .sum();
            (se / y.len() as f64).sqrt()
        }
    };
    Ok((loss, metric))
}

/// Seeded mini-batch ADAM with early stopping on validation loss.
///
/// Stops after `max_epochs`, or once validation loss has not improved for
/// `patience` consecutive epochs (at least one). Returns the parameters of
/// the best validation epoch.
pub fn train<T: Scalar>(
    mut net: Network<T>,
    train_set: &TrainSet<T>,
    val_set: &TrainSet<T>,
    tc: &TrainConfig,
) -> Result<TrainOutcome<T>, NetError> {
    tc.validate()?;
    if train_set.is_empty() {
        return Err(NetError::EmptyData("training set"));
    }
    if val_set.is_empty() {
        return Err(NetError::EmptyData("validation set"));
    }
    let task = net.config().task();
    let weights = match task {
        Task::Classification => tc.class_weights.as_deref(),
        Task::Regression => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut adam = Adam::new(net.num_params(), tc);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, net.clone());
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut x = Tensor4::zeros([0; 4]);
    let mut cache = ForwardCache::default();
    let mut ws = GradWorkspace::default();
    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let y = train_set.batch_into(chunk, &mut x);
            net.forward_into(&x, Mode::Train, &mut cache)?;
            let (loss, dout) = batch_loss(task, cache.output(), &y, weights)?;
            if !loss.is_finite() {
                return Err(NetError::Diverged { epoch, loss });
            }
            total += loss * chunk.len() as f64;
            let grad = net.backward_into(&cache, &dout, &mut ws)?;
            adam.step(net.params_mut(), grad);
            net.update_running_stats(&cache, tc.bn_momentum);
        }
        let train_loss = total / train_set.len() as f64;
        let (val_loss, val_metric) = match evaluate(&net, val_set, weights) {
            Ok(v) => v,
            Err(NetError::NonFinite(_)) => return Err(NetError::Diverged { epoch, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Err(NetError::Diverged { epoch, loss: val_loss });
        }
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} metric {val_metric:.4}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_metric,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, net.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience.max(1) {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        network: best.2,
        history,
        best_epoch: best.1,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkConfig;

    #[test]
    fn reference_count_weights() {
        let landmark: f64 = 10_293.0 / 10.0;
        let mut counts = vec![46_901usize];
        // 10293 split over ten classes: three of 1030 and seven of 1029
        counts.extend([1030, 1030, 1030, 1029, 1029, 1029, 1029, 1029, 1029, 1029]);
        assert_eq!(counts.iter().sum::<usize>(), 57_194);
        let w = class_weights(&counts).unwrap();
        assert!((w[0] - 57_194.0 / (11.0 * 46_901.0)).abs() < 1e-12);
        assert!((w[0] - 0.1109).abs() < 1e-3);
        assert!((57_194.0 / (11.0 * landmark) - 5.052).abs() < 1e-3);
        assert!(w[1..].iter().all(|v| (v - 5.05).abs() < 1e-2));
    }

    #[test]
    fn weight_edge_cases() {
        assert_eq!(class_weights(&[7, 7, 7]).unwrap(), vec![1.0; 3]);
        let w = class_weights(&[1, 3]).unwrap();
        assert!((w[0] - 2.0).abs() < 1e-12 && (w[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!(class_weights(&[3, 0]).is_err());
    }

    #[test]
    fn toy_losses() {
        let (l, _) = cross_entropy(&[0.0f64, 0.0], 2, &[0], Some(&[2.0, 1.0])).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
        let (l, _) = cross_entropy(&[50.0f64, -50.0, -50.0], 3, &[0], None).unwrap();
        assert!(l <= 1e-6);
        let (l, g) = mse(&[0.5f64, -0.25], &[0.5, -0.25]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(cross_entropy(&[f64::NAN, 0.0], 2, &[0], None).is_err());
    }

    #[test]
    fn softmax_ce_gradient_closed_form() {
        let logits = [0.3f64, -1.2, 2.0, 0.1, 0.0, -0.5];
        let labels = [2usize, 0];
        let (_, g) = cross_entropy(&logits, 3, &labels, None).unwrap();
        let p = softmax(&logits, 3);
        for i in 0..2 {
            for j in 0..3 {
                let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                assert!((g[i * 3 + j] - (p[i * 3 + j] - onehot) / 2.0).abs() < 1e-12);
            }
        }
        // and against a numeric derivative
        let h = 1e-6;
        for j in 0..6 {
            let mut a = logits;
            let mut b = logits;
            a[j] += h;
            b[j] -= h;
            let num = (cross_entropy(&a, 3, &labels, None).unwrap().0 - cross_entropy(&b, 3, &labels, None).unwrap().0)
                / (2.0 * h);
            assert!((num - g[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn argmax_invariant_to_shift() {
        let logits = [0.3f64, -1.2, 2.0, 0.1, 0.0, -0.5];
        let shifted: Vec<f64> = logits.iter().map(|v| v + 17.5).collect();
        assert_eq!(argmax_rows(&softmax(&logits, 3), 3), argmax_rows(&softmax(&shifted, 3), 3));
    }

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig {
            conv_channels: vec![2, 2],
            kernel: 3,
            fc1_units: 8,
            output_units: 11,
            batch_norm: true,
            input_height: 8,
            input_width: 8,
        }
    }

    /// Two classes: bright top half vs bright bottom half, with jitter.
    fn toy_set(n: usize, seed: u64) -> TrainSet<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let class = i % 2;
            for r in 0..8 {
                for _ in 0..8 {
                    let on = (r < 4) == (class == 0);
                    x.push(if on { 1.0 } else { 0.0 } + rng.random_range(-0.3f32..0.3));
                }
            }
            y.push(class + 1);
        }
        TrainSet::new(x, 8, 8, Targets::Classes(y)).unwrap()
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let tr = toy_set(64, 1);
        let va = toy_set(32, 2);
        let tc = TrainConfig {
            max_epochs: 50,
            patience: 50,
            batch_size: 16,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train(Network::new(tiny_cfg(), 4).unwrap(), &tr, &va, &tc).unwrap();
        let (_, acc) = evaluate(&out.network, &tr, None).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn patience_zero_stops_at_first_plateau() {
        let tr = toy_set(32, 1);
        let va = toy_set(16, 2);
        let tc = TrainConfig {
            max_epochs: 40,
            patience: 0,
            batch_size: 8,
            lr: 0.05,
            ..TrainConfig::default()
        };
        let out = train(Network::new(tiny_cfg(), 4).unwrap(), &tr, &va, &tc).unwrap();
        let h = &out.history;
        let last = h.len() - 1;
        // every epoch but the last improved on all earlier ones
        for i in 1..last {
            assert!(h[i].val_loss < h[..i].iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min));
        }
        if out.stopped_early {
            assert!(h[last].val_loss >= h[..last].iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min));
        } else {
            assert_eq!(h.len(), 40);
        }
    }

    #[test]
    fn same_seed_same_history() {
        let tr = toy_set(32, 1);
        let va = toy_set(16, 2);
        let tc = TrainConfig {
            max_epochs: 5,
            batch_size: 8,
            patience: 5,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train(Network::new(tiny_cfg(), 4).unwrap(), &tr, &va, &tc).unwrap();
        let b = train(Network::new(tiny_cfg(), 4).unwrap(), &tr, &va, &tc).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.network, b.network);
    }

    #[test]
    fn divergence_reports_epoch() {
        let tr = toy_set(32, 1);
        let va = toy_set(16, 2);
        let tc = TrainConfig {
            max_epochs: 30,
            patience: 30,
            batch_size: 8,
            lr: 1e30,
            ..TrainConfig::default()
        };
        match train(Network::new(tiny_cfg(), 4).unwrap(), &tr, &va, &tc) {
            Err(NetError::Diverged { epoch, .. }) => assert!(epoch >= 1),
            Err(NetError::NonFinite(_)) => {}
            other => panic!("expected divergence, got {:?}", other.map(|o| o.history.len())),
        }
    }

    #[test]
    fn best_epoch_parameters_returned() {
        let tr = toy_set(32, 1);
        let va = toy_set(16, 2);
        let tc = TrainConfig {
            max_epochs: 8,
            patience: 8,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let out = train(Network::new(tiny_cfg(), 4).unwrap(), &tr, &va, &tc).unwrap();
        let best = out.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.history[out.best_epoch - 1].val_loss, best);
        let (loss, _) = evaluate(&out.network, &va, None).unwrap();
        assert!((loss - best).abs() < 1e-9);
    }

    #[test]
    fn config_checks() {
        let bad = TrainConfig {
            patience: 200,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
