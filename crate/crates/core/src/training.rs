//! Training loops: the target model on `(key, value)` pairs with early
//! stopping, and the prompt generator against a frozen target, with or
//! without GPD-guided pruning of the active training set.

use std::collections::BTreeSet;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extreme_stats::{select_threshold, PatienceState, DEFAULT_THRESHOLD_QUANTILE};
use crate::models::{
    stack_rows, to_precision, Mode, ModelConfig, ModelError, ParamSet, Scalar, Seq2SeqModel,
    Tape,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("empty training data: {0}")]
    Empty(&'static str),
    #[error("data shape {got:?} does not match model shape {expected:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid training options: {0}")]
    Options(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping (target only).
    pub es_patience: usize,
}

impl TrainOptions {
    pub const TARGET_DEFAULT: TrainOptions = TrainOptions {
        max_epochs: 1000,
        batch_size: 32,
        lr: 1e-4,
        seed: 0,
        es_patience: 30,
    };

    pub const PROMPTER_DEFAULT: TrainOptions = TrainOptions {
        max_epochs: 500,
        batch_size: 32,
        lr: 1e-4,
        seed: 0,
        es_patience: 30,
    };

    fn validate(&self) -> Result<(), TrainError> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Options("max_epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Options("learning rate must be positive".into()));
        }
        if self.es_patience == 0 {
            return Err(TrainError::Options("es_patience must be positive".into()));
        }
        Ok(())
    }
}

/// How the pruning cutoff is chosen once patience fires.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ThresholdRule {
    /// Sample error nearest the fitted GPD quantile.
    Gpd { quantile: f64 },
    /// Prune every element the floor allows. Stress setting for the floor
    /// invariant.
    Exhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruningOptions {
    /// Patience length; `usize::MAX` never fires.
    pub alpha: usize,
    pub omega: f64,
    pub rule: ThresholdRule,
}

impl PruningOptions {
    pub fn gpd(alpha: usize, omega: f64) -> Self {
        Self {
            alpha,
            omega,
            rule: ThresholdRule::Gpd {
                quantile: DEFAULT_THRESHOLD_QUANTILE,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningEvent {
    pub epoch: usize,
    pub tau: f64,
    pub n_removed: usize,
    pub active_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample training error of each epoch, collected before each
    /// batch update.
    pub epoch_loss: Vec<f64>,
    /// Validation loss per epoch (target model only).
    pub val_loss: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    /// Active training-set size during each epoch.
    pub active_sizes: Vec<usize>,
    pub pruning_events: Vec<PruningEvent>,
    /// Epochs where pruning fired but no threshold could be fitted.
    pub skipped_pruning: Vec<(usize, String)>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    fn new() -> Self {
        Self {
            epoch_loss: Vec::new(),
            val_loss: Vec::new(),
            epoch_seconds: Vec::new(),
            active_sizes: Vec::new(),
            pruning_events: Vec::new(),
            skipped_pruning: Vec::new(),
            best_epoch: 0,
            best_loss: f64::INFINITY,
            stopped_early: false,
        }
    }

    pub fn total_seconds(&self) -> f64 {
        self.epoch_seconds.iter().sum()
    }
}

/// Adam with bias correction.
pub struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    step: i32,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, params: &ParamSet<T>) -> Self {
        let zeros = || params.values.iter().map(|p| Array2::zeros(p.dim())).collect();
        Self {
            lr: T::from_f64_lossy(lr),
            beta1: T::from_f64_lossy(0.9),
            beta2: T::from_f64_lossy(0.999),
            eps: T::from_f64_lossy(1e-8),
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Array2<T>]) {
        assert_eq!(grads.len(), params.values.len());
        self.step += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.step);
        let c2 = one - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params
            .values
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        }
    }
}

fn mix_seed(seed: u64, stream: u64, epoch: u64) -> u64 {
    // SplitMix64 finalizer over the combined words.
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_SHUFFLE, epoch as u64))
}

/// Per-sample mean squared errors of stacked predictions.
fn per_sample_errors<T: Scalar>(pred: &Array2<T>, target: &Array2<T>, parts: usize) -> Vec<f64> {
    let rows = pred.nrows() / parts;
    (0..parts)
        .map(|i| {
            let a = pred.slice(ndarray::s![i * rows..(i + 1) * rows, ..]);
            let b = target.slice(ndarray::s![i * rows..(i + 1) * rows, ..]);
            let s: f64 = a
                .iter()
                .zip(b.iter())
                .map(|(&x, &y)| {
                    let d = x.to_f64().unwrap() - y.to_f64().unwrap();
                    d * d
                })
                .sum();
            s / a.len() as f64
        })
        .collect()
}

fn collect_grads<T: Scalar>(
    grads: &mut crate::models::Gradients<T>,
    params: &[crate::models::Var],
    model: &Seq2SeqModel<T>,
) -> Vec<Array2<T>> {
    params
        .iter()
        .zip(&model.params().values)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Array2::zeros(p.dim())))
        .collect()
}

fn check_shapes(data: &[Array2<f64>], expected: (usize, usize)) -> Result<(), TrainError> {
    match data.iter().find(|x| x.dim() != expected) {
        Some(x) => Err(TrainError::Shape {
            expected,
            got: x.dim(),
        }),
        None => Ok(()),
    }
}

/// Mean distance between `model(inputs[i])` and `targets[i]`, in
/// inference mode.
pub fn evaluate<T: Scalar>(
    model: &Seq2SeqModel<T>,
    inputs: &[Array2<T>],
    targets: &[Array2<T>],
) -> Result<Vec<f64>, TrainError> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(inputs.len());
    for (xs, ys) in inputs.chunks(CHUNK).zip(targets.chunks(CHUNK)) {
        let preds = model.forward_batch(xs)?;
        for (p, y) in preds.iter().zip(ys) {
            out.push(crate::models::distance(y, p)?);
        }
    }
    Ok(out)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Train the target model on `(key, value)` pairs, keeping the parameters
/// with the lowest validation loss and stopping after `es_patience` epochs
/// without improvement. The returned model is in INFERENCE mode.
pub fn train_target<T: Scalar>(
    config: &ModelConfig,
    train: &[(Array2<f64>, Array2<f64>)],
    validation: &[(Array2<f64>, Array2<f64>)],
    opts: &TrainOptions,
) -> Result<(Seq2SeqModel<T>, TrainReport), TrainError> {
    opts.validate()?;
    if train.is_empty() {
        return Err(TrainError::Empty("training split"));
    }
    if validation.is_empty() {
        return Err(TrainError::Empty("validation split"));
    }
    let keys: Vec<Array2<f64>> = train.iter().map(|(k, _)| k.clone()).collect();
    let vals: Vec<Array2<f64>> = train.iter().map(|(_, v)| v.clone()).collect();
    check_shapes(&keys, config.input_shape())?;
    check_shapes(&vals, config.output_shape())?;
    let keys: Vec<Array2<T>> = keys.iter().map(to_precision).collect();
    let vals: Vec<Array2<T>> = vals.iter().map(to_precision).collect();
    let val_keys: Vec<Array2<T>> = validation.iter().map(|(k, _)| to_precision(k)).collect();
    let val_vals: Vec<Array2<T>> = validation.iter().map(|(_, v)| to_precision(v)).collect();
    check_shapes(
        &validation.iter().map(|(k, _)| k.clone()).collect::<Vec<_>>(),
        config.input_shape(),
    )?;

    let mut model = Seq2SeqModel::<T>::build(*config, opts.seed)?;
    let mut adam = Adam::new(opts.lr, model.params());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, STREAM_DROPOUT, 0));
    let mut report = TrainReport::new();
    let mut best_params = model.params().clone();
    let mut stall = 0usize;

    for epoch in 0..opts.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..keys.len()).collect();
        order.shuffle(&mut epoch_rng(opts.seed, epoch));
        let mut errors = Vec::with_capacity(order.len());
        for batch in order.chunks(opts.batch_size) {
            let xs: Vec<Array2<T>> = batch.iter().map(|&i| keys[i].clone()).collect();
            let ys: Vec<Array2<T>> = batch.iter().map(|&i| vals[i].clone()).collect();
            let target = stack_rows(&ys);
            let mut tape = Tape::new();
            let input = tape.constant(stack_rows(&xs));
            let traced = model.trace(&mut tape, input, batch.len(), Some(&mut dropout_rng))?;
            let batch_errors = per_sample_errors(tape.value(traced.output), &target, batch.len());
            let loss = tape.mse(traced.output, target);
            let lv = tape.value(loss)[[0, 0]].to_f64().unwrap();
            if !lv.is_finite() {
                return Err(TrainError::Divergence { epoch, loss: lv });
            }
            errors.extend(batch_errors);
            let mut grads = tape.backward(loss);
            let grads = collect_grads(&mut grads, &traced.params, &model);
            adam.step(model.params_mut(), &grads);
        }
        let train_loss = mean(&errors);
        model.set_mode(Mode::Inference);
        let val = evaluate(&model, &val_keys, &val_vals);
        model.set_mode(Mode::Train);
        let val_loss = match val {
            Ok(v) => mean(&v),
            Err(TrainError::Model(ModelError::NonFinite)) => f64::NAN,
            Err(e) => return Err(e),
        };
        if !val_loss.is_finite() {
            return Err(TrainError::Divergence { epoch, loss: val_loss });
        }
        report.epoch_loss.push(train_loss);
        report.val_loss.push(val_loss);
        report.active_sizes.push(keys.len());
        log::debug!("target epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");

        if val_loss < report.best_loss {
            report.best_loss = val_loss;
            report.best_epoch = epoch;
            best_params = model.params().clone();
            stall = 0;
        } else {
            stall += 1;
        }
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
        if stall >= opts.es_patience {
            report.stopped_early = true;
            break;
        }
    }

    *model.params_mut() = best_params;
    model.set_mode(Mode::Inference);
    model.meta.epoch = Some(report.best_epoch);
    model.meta.best_metric = Some(report.best_loss);
    Ok((model, report))
}

/// Remove from `active` the indices whose error is at least `tau`, largest
/// errors first, while the active set stays strictly above a third of
/// `total` (`3 * |active| > total` after every removal). Returns the
/// number removed.
pub fn prune_active(
    active: &mut Vec<usize>,
    indexes: &[usize],
    errors: &[f64],
    tau: f64,
    total: usize,
) -> usize {
    let mut pairs: Vec<(usize, f64)> = indexes.iter().copied().zip(errors.iter().copied()).collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut removed = BTreeSet::new();
    let mut size = active.len();
    for (idx, err) in pairs {
        if 3 * (size - 1) <= total || size == 0 {
            break;
        }
        if err >= tau && !removed.contains(&idx) {
            removed.insert(idx);
            size -= 1;
        }
    }
    active.retain(|i| !removed.contains(i));
    removed.len()
}

/// Train a prompt generator `theta` so that `phi(theta(v))` reproduces each
/// value `v`. `phi` must be in INFERENCE mode and is never modified.
///
/// With `pruning`, after each epoch where the active set is above a third
/// of the data and the patience counter fires on the epoch's mean error,
/// the highest-error elements at or above the chosen threshold are dropped
/// from further epochs. The kept parameters are those with the lowest
/// epoch-mean error over the active set.
pub fn train_prompter<T: Scalar>(
    config: &ModelConfig,
    phi: &Seq2SeqModel<T>,
    values: &[Array2<f64>],
    opts: &TrainOptions,
    pruning: Option<&PruningOptions>,
) -> Result<(Seq2SeqModel<T>, TrainReport), TrainError> {
    assert_eq!(
        phi.mode(),
        Mode::Inference,
        "the target model must be frozen while training the prompt generator"
    );
    opts.validate()?;
    if values.is_empty() {
        return Err(TrainError::Empty("copyrighted set"));
    }
    check_shapes(values, config.input_shape())?;
    if config.output_shape() != phi.config().input_shape() {
        return Err(TrainError::Shape {
            expected: phi.config().input_shape(),
            got: config.output_shape(),
        });
    }
    if phi.config().output_shape() != config.input_shape() {
        return Err(TrainError::Shape {
            expected: config.input_shape(),
            got: phi.config().output_shape(),
        });
    }
    if let Some(p) = pruning {
        if p.alpha == 0 || !(p.omega >= 0.0) {
            return Err(TrainError::Options("alpha must be >= 1 and omega >= 0".into()));
        }
    }

    let vals: Vec<Array2<T>> = values.iter().map(to_precision).collect();
    let total = vals.len();
    let mut theta = Seq2SeqModel::<T>::build(*config, opts.seed)?;
    let mut adam = Adam::new(opts.lr, theta.params());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, STREAM_DROPOUT, 0));
    let mut patience = pruning.map(|p| PatienceState::new(p.alpha, p.omega));
    let mut active: Vec<usize> = (0..total).collect();
    let mut report = TrainReport::new();
    let mut best_params = theta.params().clone();

    for epoch in 0..opts.max_epochs {
        let started = Instant::now();
        let mut order = active.clone();
        order.shuffle(&mut epoch_rng(opts.seed, epoch));
        let mut errors = Vec::with_capacity(order.len());
        let mut indexes = Vec::with_capacity(order.len());
        for batch in order.chunks(opts.batch_size) {
            let vs: Vec<Array2<T>> = batch.iter().map(|&i| vals[i].clone()).collect();
            let target = stack_rows(&vs);
            let mut tape = Tape::new();
            let input = tape.constant(target.clone());
            let prompts = theta.trace(&mut tape, input, batch.len(), Some(&mut dropout_rng))?;
            let reproduced = phi.trace(&mut tape, prompts.output, batch.len(), None)?;
            debug_assert!(reproduced.params.is_empty());
            let batch_errors = per_sample_errors(tape.value(reproduced.output), &target, batch.len());
            let loss = tape.mse(reproduced.output, target);
            let lv = tape.value(loss)[[0, 0]].to_f64().unwrap();
            if !lv.is_finite() {
                return Err(TrainError::Divergence { epoch, loss: lv });
            }
            errors.extend(batch_errors);
            indexes.extend_from_slice(batch);
            let mut grads = tape.backward(loss);
            let grads = collect_grads(&mut grads, &prompts.params, &theta);
            adam.step(theta.params_mut(), &grads);
        }
        let epoch_loss = mean(&errors);
        report.epoch_loss.push(epoch_loss);
        report.active_sizes.push(active.len());
        if epoch_loss < report.best_loss {
            report.best_loss = epoch_loss;
            report.best_epoch = epoch;
            best_params = theta.params().clone();
        }

        if let (Some(p), Some(state)) = (pruning, patience.as_mut()) {
            if 3 * active.len() > total && state.step(epoch_loss) {
                let tau = match p.rule {
                    ThresholdRule::Gpd { quantile } => select_threshold(&errors, quantile),
                    ThresholdRule::Exhaustive => Ok(f64::NEG_INFINITY),
                };
                match tau {
                    Ok(tau) => {
                        let n_removed = prune_active(&mut active, &indexes, &errors, tau, total);
                        log::debug!("epoch {epoch}: pruned {n_removed} at tau {tau:.5}, {} left", active.len());
                        report.pruning_events.push(PruningEvent {
                            epoch,
                            tau,
                            n_removed,
                            active_after: active.len(),
                        });
                    }
                    Err(e) => {
                        log::info!("epoch {epoch}: skipping pruning, threshold fit failed: {e}");
                        report.skipped_pruning.push((epoch, e.to_string()));
                    }
                }
            }
        }
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
        log::debug!("prompter epoch {epoch}: loss {epoch_loss:.5} active {}", report.active_sizes[epoch]);
    }

    *theta.params_mut() = best_params;
    theta.set_mode(Mode::Inference);
    theta.meta.epoch = Some(report.best_epoch);
    theta.meta.best_metric = Some(report.best_loss);
    Ok((theta, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Preset;
    use rand::Rng;

    fn tiny(in_len: usize, f: usize, out_len: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            in_features: f,
            out_features: f,
            in_len,
            out_len,
            dropout: 0.1,
        }
    }

    fn pairs(n: usize, seed: u64) -> Vec<(Array2<f64>, Array2<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let k = Array2::from_shape_fn((3, 2), |_| rng.random::<f64>() * 2.0 - 1.0);
                let v = k.mapv(|x| 0.5 * x + 0.3);
                (k, v)
            })
            .collect()
    }

    fn opts(max_epochs: usize, lr: f64) -> TrainOptions {
        TrainOptions {
            max_epochs,
            batch_size: 8,
            lr,
            seed: 3,
            es_patience: 1000,
        }
    }

    #[test]
    fn target_learns() {
        let data = pairs(20, 1);
        let (_, report) = train_target::<f32>(&tiny(3, 2, 3), &data, &data, &opts(30, 1e-3)).unwrap();
        assert!(report.epoch_loss.last().unwrap() < &report.epoch_loss[0]);
    }

    #[test]
    fn early_stop_with_patience_one() {
        let data = pairs(20, 2);
        let o = TrainOptions {
            es_patience: 1,
            ..opts(200, 3e-2)
        };
        let (model, report) = train_target::<f32>(&tiny(3, 2, 3), &data, &data, &o).unwrap();
        let first_bad = report
            .val_loss
            .windows(2)
            .enumerate()
            .scan(f64::INFINITY, |best, (i, w)| {
                *best = best.min(w[0]);
                Some((i + 1, w[1] >= *best))
            })
            .find(|&(_, bad)| bad)
            .map(|(i, _)| i);
        if report.stopped_early {
            assert_eq!(Some(report.val_loss.len() - 1), first_bad);
        }
        assert_eq!(model.meta.epoch, Some(report.best_epoch));
        let argmin = report
            .val_loss
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(report.best_epoch, argmin);
    }

    #[test]
    fn prompter_single_sample_overfits_and_phi_frozen() {
        let data = pairs(16, 4);
        let cfg = tiny(3, 2, 3);
        let (phi, _) = train_target::<f32>(&cfg, &data, &data, &opts(5, 1e-3)).unwrap();
        let before = phi.param_digest();
        let values = vec![data[0].1.clone()];
        let o = TrainOptions {
            batch_size: 1,
            ..opts(50, 1e-3)
        };
        let (_, report) = train_prompter(&cfg.swapped(), &phi, &values, &o, None).unwrap();
        assert_eq!(phi.param_digest(), before);
        assert!(report.epoch_loss.iter().skip(1).any(|&l| l < report.epoch_loss[0]));
        assert!(report.best_loss < report.epoch_loss[0]);
    }

    #[test]
    #[should_panic(expected = "frozen")]
    fn unfrozen_phi_is_rejected() {
        let cfg = tiny(3, 2, 3);
        let phi = Seq2SeqModel::<f32>::build(cfg, 0).unwrap();
        let _ = train_prompter(&cfg.swapped(), &phi, &[Array2::zeros((3, 2))], &opts(1, 1e-3), None);
    }

    #[test]
    fn disabled_patience_matches_baseline() {
        let data = pairs(12, 5);
        let cfg = tiny(3, 2, 3);
        let (phi, _) = train_target::<f32>(&cfg, &data, &data, &opts(2, 1e-3)).unwrap();
        let values: Vec<_> = data.iter().map(|(_, v)| v.clone()).collect();
        let o = opts(6, 1e-3);
        let (a, ra) = train_prompter(&cfg.swapped(), &phi, &values, &o, None).unwrap();
        let never = PruningOptions::gpd(usize::MAX, 0.0);
        let (b, rb) = train_prompter(&cfg.swapped(), &phi, &values, &o, Some(&never)).unwrap();
        assert_eq!(ra.epoch_loss, rb.epoch_loss);
        assert_eq!(a.param_digest(), b.param_digest());
        assert!(rb.pruning_events.is_empty());
    }

    #[test]
    fn floor_arithmetic_nine() {
        // 9 elements, everything prunable: stops at 4 because 3 * 3 = 9.
        let mut active: Vec<usize> = (0..9).collect();
        let errors: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let idx: Vec<usize> = (0..9).collect();
        let removed = prune_active(&mut active, &idx, &errors, f64::NEG_INFINITY, 9);
        assert_eq!(removed, 5);
        assert_eq!(active, vec![0, 1, 2, 3]);
        // The largest errors went first.
        assert!(prune_active(&mut active, &idx[..4], &errors[..4], f64::NEG_INFINITY, 9) == 0);
    }

    #[test]
    fn pruning_respects_tau() {
        let mut active: Vec<usize> = (0..10).collect();
        let errors = [0.1, 5.0, 0.2, 4.0, 0.3, 0.4, 3.0, 0.5, 0.6, 0.7];
        let idx: Vec<usize> = (0..10).collect();
        let removed = prune_active(&mut active, &idx, &errors, 3.0, 10);
        assert_eq!(removed, 3);
        assert_eq!(active, vec![0, 2, 4, 5, 7, 8, 9]);
    }

    #[test]
    fn divergence_is_reported() {
        let mut data = pairs(4, 6);
        data[0].1[[0, 0]] = f64::MAX;
        let err = train_target::<f32>(&tiny(3, 2, 3), &data, &data, &opts(2, 1e-3)).unwrap_err();
        assert!(matches!(err, TrainError::Divergence { .. }));
    }

    #[test]
    fn desk_preset_single_epoch_smoke() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<_> = (0..4)
            .map(|_| {
                (
                    Array2::from_shape_fn((5, 3), |_| rng.random::<f64>()),
                    Array2::from_shape_fn((5, 3), |_| rng.random::<f64>()),
                )
            })
            .collect();
        let cfg = Preset::DESK.config(5, 3, 5, 3);
        let (phi, r) = train_target::<f32>(&cfg, &data, &data, &opts(1, 1e-4)).unwrap();
        assert_eq!(r.epoch_loss.len(), 1);
        assert_eq!(phi.mode(), Mode::Inference);
    }
}
