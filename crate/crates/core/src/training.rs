//! Training protocol: chronological split handled by the data pipeline,
//! MSE loss on normalized targets, a 30-epoch cap with early stopping on
//! validation loss, best-epoch weight retention, and 3-seed replication.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::pipeline::WindowedDataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::models::{Arch, ModelGraph};
use crate::nn::ForwardCtx;
use crate::seed::rng_for;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Sgd {
        lr: f64,
    },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Hard cap on epochs; 30 across all experiments.
    pub epochs_cap: usize,
    /// Early stop after this many epochs without validation improvement.
    pub patience: usize,
    /// Overrides the per-architecture default (RNN 128, CNN 256).
    pub batch_size: Option<usize>,
    pub optimizer: OptimizerKind,
    /// Train on every k-th window (windows overlap heavily; >1 trades
    /// redundant samples for speed). Validation is never thinned.
    pub window_stride: usize,
    /// Shuffle training windows each epoch (validation is never
    /// shuffled).
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_cap: 30,
            patience: 5,
            batch_size: None,
            optimizer: OptimizerKind::default(),
            window_stride: 1,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn batch_size_for(&self, arch: Arch) -> usize {
        self.batch_size.unwrap_or(match arch {
            Arch::Rnn => 128,
            Arch::Cnn => 256,
        })
    }
}

/// Outcome of one training run (or one evaluation).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean of the per-output MSEs (equal weights).
    pub mse: f64,
    pub per_output_mse: Vec<f64>,
    pub epochs_used: usize,
    /// Seconds spent inside the optimizer loop.
    pub wall_time_s: f64,
    pub seed: u64,
    /// MSE of the predict-the-last-observed-row baseline on the same
    /// validation data.
    pub persistence_mse: f64,
}

/// Deterministic eval-mode MSE of model predictions and of the
/// persistence baseline over a dataset.
pub fn evaluate(model: &ModelGraph, ds: &WindowedDataset) -> Result<EvalResult> {
    if ds.is_empty() {
        return Err(Error::InvalidData("evaluate: empty dataset".into()));
    }
    let q = ds.q();
    let n = ds.len();
    let mut sq = vec![0.0; q];
    let chunk = 512;
    let mut idx = 0;
    while idx < n {
        let hi = (idx + chunk).min(n);
        let idxs: Vec<usize> = (idx..hi).collect();
        let (xb, yb) = ds.gather_batch(&idxs);
        let pred = model.forward(&xb)?;
        for (prow, yrow) in pred.data().chunks(q).zip(yb.data().chunks(q)) {
            for j in 0..q {
                let d = prow[j] - yrow[j];
                sq[j] += d * d;
            }
        }
        idx = hi;
    }
    let per_output: Vec<f64> = sq.iter().map(|s| s / n as f64).collect();

    let mut psq = vec![0.0; q];
    for (prow, yrow) in ds
        .persistence
        .data()
        .chunks(q)
        .zip(ds.y.data().chunks(q))
    {
        for j in 0..q {
            let d = prow[j] - yrow[j];
            psq[j] += d * d;
        }
    }
    let persistence: Vec<f64> = psq.iter().map(|s| s / n as f64).collect();

    Ok(EvalResult {
        mse: mean(&per_output),
        per_output_mse: per_output,
        epochs_used: 0,
        wall_time_s: 0.0,
        seed: 0,
        persistence_mse: mean(&persistence),
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

/// Train in place. Only unfrozen layers are updated; the weights from
/// the best validation epoch are restored at the end. Returns the final
/// validation metrics of the restored model.
pub fn train(
    model: &mut ModelGraph,
    train_ds: &WindowedDataset,
    val_ds: &WindowedDataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<EvalResult> {
    if model.trainable_param_count() == 0 {
        // Nothing to optimize: zero epochs, zero optimizer steps.
        let mut result = evaluate(model, val_ds)?;
        result.seed = seed;
        return Ok(result);
    }
    let train_ds = if config.window_stride > 1 {
        std::borrow::Cow::Owned(train_ds.subsample(config.window_stride))
    } else {
        std::borrow::Cow::Borrowed(train_ds)
    };
    if train_ds.is_empty() {
        return Err(Error::InvalidData("train: empty training split".into()));
    }
    let batch_size = config.batch_size_for(model.arch).max(1);
    let mut rng = rng_for(seed, "train");

    // Index the trainable parameters once; Adam state lives alongside.
    let trainable: Vec<(usize, usize)> = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.frozen)
        .flat_map(|(li, l)| (0..l.params.len()).map(move |pi| (li, pi)))
        .collect();
    let mut adam = AdamState {
        m: trainable
            .iter()
            .map(|&(li, pi)| vec![0.0; model.layers[li].params[pi].value.len()])
            .collect(),
        v: trainable
            .iter()
            .map(|&(li, pi)| vec![0.0; model.layers[li].params[pi].value.len()])
            .collect(),
        t: 0,
    };

    let mut best_mse = f64::INFINITY;
    let mut best_weights: Option<Vec<Tensor>> = None;
    let mut stale_epochs = 0usize;
    let mut epochs_used = 0usize;
    let started = Instant::now();

    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    for epoch in 0..config.epochs_cap {
        epochs_used = epoch + 1;
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        for (batch_no, batch) in order.chunks(batch_size).enumerate() {
            let (xb, yb) = train_ds.gather_batch(batch);
            step(model, &trainable, &mut adam, &config.optimizer, xb, yb, &mut rng).map_err(
                |e| e.with_context(format!("epoch {epoch}, batch {batch_no}, seed {seed}")),
            )?;
        }
        let val = evaluate(model, val_ds)?;
        if val.mse < best_mse {
            best_mse = val.mse;
            best_weights = Some(snapshot(model, &trainable));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= config.patience {
                break;
            }
        }
    }
    let wall = started.elapsed().as_secs_f64();

    if let Some(weights) = best_weights {
        restore(model, &trainable, weights);
    }
    let mut result = evaluate(model, val_ds)?;
    result.epochs_used = epochs_used;
    result.wall_time_s = wall;
    result.seed = seed;
    Ok(result)
}

fn snapshot(model: &ModelGraph, trainable: &[(usize, usize)]) -> Vec<Tensor> {
    trainable
        .iter()
        .map(|&(li, pi)| model.layers[li].params[pi].value.clone())
        .collect()
}

fn restore(model: &mut ModelGraph, trainable: &[(usize, usize)], weights: Vec<Tensor>) {
    for (&(li, pi), w) in trainable.iter().zip(weights) {
        model.layers[li].params[pi].value = w;
    }
}

fn step(
    model: &mut ModelGraph,
    trainable: &[(usize, usize)],
    adam: &mut AdamState,
    optimizer: &OptimizerKind,
    xb: Tensor,
    yb: Tensor,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<()> {
    let mut tape = Tape::new();
    let ids = model.register(&mut tape);
    let x = tape.leaf(xb);
    let y = tape.leaf(yb);
    let mut ctx = ForwardCtx {
        training: true,
        rng: Some(rng),
    };
    let pred = model.forward_tape(&mut tape, &ids, x, &mut ctx)?;
    let diff = tape.sub(pred, y)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean(sq)?;
    let mut grads = tape.backward(loss)?;

    adam.t += 1;
    for (slot, &(li, pi)) in trainable.iter().enumerate() {
        let id = ids[li][pi];
        let Some(grad) = grads.take(id) else {
            continue; // parameter did not reach the loss this step
        };
        let w = model.layers[li].params[pi].value.data_mut();
        match optimizer {
            OptimizerKind::Sgd { lr } => {
                for (wv, g) in w.iter_mut().zip(grad.data()) {
                    *wv -= lr * g;
                }
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let m = &mut adam.m[slot];
                let v = &mut adam.v[slot];
                let bc1 = 1.0 - beta1.powi(adam.t as i32);
                let bc2 = 1.0 - beta2.powi(adam.t as i32);
                for ((wv, g), (ms, vs)) in w
                    .iter_mut()
                    .zip(grad.data())
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    *ms = beta1 * *ms + (1.0 - beta1) * g;
                    *vs = beta2 * *vs + (1.0 - beta2) * g * g;
                    let mhat = *ms / bc1;
                    let vhat = *vs / bc2;
                    *wv -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

/// Train one model per seed (in parallel) and return each trained model
/// with its metrics, in seed order.
pub fn train_replicated<F>(
    build: F,
    train_ds: &WindowedDataset,
    val_ds: &WindowedDataset,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<(ModelGraph, EvalResult)>>
where
    F: Fn(u64) -> Result<ModelGraph> + Sync + Send,
{
    let runs = exec::par_map(seeds.to_vec(), |seed| -> Result<(ModelGraph, EvalResult)> {
        let mut model = build(seed)?;
        let result = train(&mut model, train_ds, val_ds, config, seed)?;
        Ok((model, result))
    });
    runs.into_iter().collect()
}

/// Average MSE across replicated runs.
pub fn mean_mse(results: &[EvalResult]) -> f64 {
    mean(&results.iter().map(|r| r.mse).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pipeline::window;
    use crate::models::{build_cnn, build_rnn, CnnHyper, RnnHyper};
    use crate::tensor::Tensor;

    /// Deterministic toy series: two sine tracks + linear blend, easy to
    /// overfit.
    fn toy_dataset(t: usize, p: usize, dn: usize) -> (WindowedDataset, WindowedDataset) {
        let m = 5;
        let q = 5;
        let mut inputs = Vec::with_capacity(t * m);
        let mut targets = Vec::with_capacity(t * q);
        for i in 0..t {
            let x = i as f64 * 0.07;
            let row = [
                (x).sin() * 0.8,
                (x * 0.5).cos() * 0.6,
                (x * 0.23).sin() * 0.4,
                (x * 0.11).cos() * 0.7,
                (x * 0.31).sin() * 0.5,
            ];
            inputs.extend_from_slice(&row);
            targets.extend_from_slice(&row);
        }
        let inputs = Tensor::new(vec![t, m], inputs).unwrap();
        let targets = Tensor::new(vec![t, q], targets).unwrap();
        let all = window(&inputs, &targets, p, dn, 0).unwrap();
        all.split_at_row(t * 3 / 4)
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let (_, val) = toy_dataset(120, 4, 0);
        // Perfect predictor: mse 0 is unreachable for a real model, but
        // the evaluator itself must report ~variance for a zero guess.
        let zero_pred_mse: f64 = {
            let q = val.q();
            let mut sq = vec![0.0; q];
            for row in val.y.data().chunks(q) {
                for j in 0..q {
                    sq[j] += row[j] * row[j];
                }
            }
            sq.iter().map(|s| s / val.len() as f64).sum::<f64>() / q as f64
        };
        assert!(zero_pred_mse > 0.0);
    }

    #[test]
    fn overfit_small_sample() {
        // 32 windows, generous epoch budget: training MSE collapses.
        let (train_ds, _) = toy_dataset(60, 4, 0);
        let idxs: Vec<usize> = (0..32.min(train_ds.len())).collect();
        let small = train_ds.select(&idxs);
        let mut model = build_rnn(4, 5, 5, &RnnHyper::default(), 11).unwrap();
        let config = TrainConfig {
            epochs_cap: 200,
            patience: 200,
            batch_size: Some(32),
            ..TrainConfig::default()
        };
        // Validate on the training windows themselves: pure memorization.
        let result = train(&mut model, &small, &small, &config, 1).unwrap();
        assert!(
            result.mse < 1e-3,
            "overfit sanity: train MSE {} should collapse",
            result.mse
        );
    }

    #[test]
    fn frozen_everything_is_a_no_op() {
        let (train_ds, val) = toy_dataset(150, 6, 0);
        let mut model = build_cnn(6, 5, 5, &CnnHyper::default(), 5).unwrap();
        for l in &mut model.layers {
            l.set_frozen(true);
        }
        let before = model.clone();
        let config = TrainConfig::default();
        let r1 = train(&mut model, &train_ds, &val, &config, 3).unwrap();
        assert_eq!(model, before, "frozen params must be bit-identical");
        assert_eq!(r1.epochs_used, 0);
        assert_eq!(r1.wall_time_s, 0.0);
        // Val loss identical across repeated runs.
        let r2 = train(&mut model, &train_ds, &val, &config, 4).unwrap();
        assert_eq!(r1.mse.to_bits(), r2.mse.to_bits());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (train_ds, val) = toy_dataset(160, 5, 0);
        let config = TrainConfig {
            epochs_cap: 3,
            batch_size: Some(32),
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = build_rnn(5, 5, 5, &RnnHyper::default(), 21).unwrap();
            train(&mut model, &train_ds, &val, &config, 7).unwrap().mse
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn three_seed_replication_reports_each_run() {
        let (train_ds, val) = toy_dataset(140, 4, 0);
        let config = TrainConfig {
            epochs_cap: 2,
            batch_size: Some(64),
            ..TrainConfig::default()
        };
        let runs = train_replicated(
            |seed| build_cnn(4, 5, 5, &CnnHyper::default(), seed),
            &train_ds,
            &val,
            &config,
            &[1, 2, 3],
        )
        .unwrap();
        assert_eq!(runs.len(), 3);
        let seeds: Vec<u64> = runs.iter().map(|(_, r)| r.seed).collect();
        assert_eq!(seeds, vec![1, 2, 3]);
        let mses: Vec<f64> = runs.iter().map(|(_, r)| r.mse).collect();
        let mean = mean_mse(&runs.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>());
        assert!((mean - mses.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    }

    #[test]
    fn aggregate_mse_is_mean_of_per_output() {
        let (_, val) = toy_dataset(120, 4, 0);
        let model = build_cnn(4, 5, 5, &CnnHyper::default(), 9).unwrap();
        let r = evaluate(&model, &val).unwrap();
        let m = r.per_output_mse.iter().sum::<f64>() / r.per_output_mse.len() as f64;
        assert!((r.mse - m).abs() < 1e-15);
        assert!(r.persistence_mse > 0.0);
    }
}
