//! Teacher-to-student transfer by layer freezing.
//!
//! The student starts from the teacher's weights; a freeze mask decides
//! which of the last three parameterized layers (conv3/conv4/dense for
//! the CNN, gru3/gru4/dense for the RNN) are retrained on the student's
//! data. Everything closer to the input stays frozen in transfer mode.
//! The full sweep enumerates all 8 retrain combinations; the all-frozen
//! member is knowledge transfer at zero training cost.

use serde::{Deserialize, Serialize};

use crate::data::pipeline::WindowedDataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::models::ModelGraph;
use crate::training::{train, EvalResult, TrainConfig};

/// How many of the trailing parameterized layers take part in the sweep.
pub const SWEEP_LAYERS: usize = 3;

/// Per-layer freeze flags aligned with `ModelGraph::layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeMask {
    pub frozen: Vec<bool>,
}

impl FreezeMask {
    /// Transfer-mode mask: everything frozen except the selected members
    /// of the last three parameterized layers. `retrain` is ordered
    /// [antepenultimate, penultimate, last].
    pub fn dtl(model: &ModelGraph, retrain: [bool; SWEEP_LAYERS]) -> Result<FreezeMask> {
        let param_layers = model.parameterized_layers();
        if param_layers.len() < SWEEP_LAYERS {
            return Err(Error::InvalidArg(format!(
                "model has only {} parameterized layers; transfer sweep needs {SWEEP_LAYERS}",
                param_layers.len()
            )));
        }
        let tail = &param_layers[param_layers.len() - SWEEP_LAYERS..];
        let mut frozen = vec![true; model.layers.len()];
        for (slot, &layer_idx) in tail.iter().enumerate() {
            frozen[layer_idx] = !retrain[slot];
        }
        Ok(FreezeMask { frozen })
    }

    pub fn all_frozen(model: &ModelGraph) -> Result<FreezeMask> {
        FreezeMask::dtl(model, [false; SWEEP_LAYERS])
    }

    /// All 8 combinations, ordered by their bit string "000".."111"
    /// (bit i = retrain the i-th of the last three parameterized
    /// layers).
    pub fn sweep(model: &ModelGraph) -> Result<Vec<(String, FreezeMask)>> {
        let mut out = Vec::with_capacity(1 << SWEEP_LAYERS);
        for bits in 0..(1usize << SWEEP_LAYERS) {
            let retrain = [
                bits & 0b100 != 0,
                bits & 0b010 != 0,
                bits & 0b001 != 0,
            ];
            let mask = FreezeMask::dtl(model, retrain)?;
            out.push((format!("{bits:03b}"), mask));
        }
        Ok(out)
    }

    pub fn apply(&self, model: &mut ModelGraph) -> Result<()> {
        if self.frozen.len() != model.layers.len() {
            return Err(Error::InvalidArg(format!(
                "freeze mask covers {} layers, model has {}",
                self.frozen.len(),
                model.layers.len()
            )));
        }
        for (layer, &flag) in model.layers.iter_mut().zip(&self.frozen) {
            layer.set_frozen(flag);
        }
        Ok(())
    }

    /// Exact total of parameters in unfrozen layers.
    pub fn trainable_param_count(&self, model: &ModelGraph) -> usize {
        model
            .layers
            .iter()
            .zip(&self.frozen)
            .filter(|(_, &f)| !f)
            .map(|(l, _)| l.param_count())
            .sum()
    }
}

fn check_data_matches(teacher: &ModelGraph, ds: &WindowedDataset) -> Result<()> {
    if teacher.p != ds.p || teacher.m != ds.m() || teacher.q != ds.q() {
        return Err(Error::InvalidArg(format!(
            "teacher expects p={}, m={}, q={}; student data has p={}, m={}, q={}",
            teacher.p,
            teacher.m,
            teacher.q,
            ds.p,
            ds.m(),
            ds.q()
        )));
    }
    Ok(())
}

/// Warm-start a student from the teacher, apply the freeze mask and
/// retrain on the student's data. With the all-frozen mask no optimizer
/// step runs at all.
pub fn transfer(
    teacher: &ModelGraph,
    train_ds: &WindowedDataset,
    val_ds: &WindowedDataset,
    mask: &FreezeMask,
    config: &TrainConfig,
    seed: u64,
) -> Result<(ModelGraph, EvalResult)> {
    check_data_matches(teacher, train_ds)?;
    check_data_matches(teacher, val_ds)?;
    let mut student = teacher.clone();
    mask.apply(&mut student)?;
    let result = train(&mut student, train_ds, val_ds, config, seed)?;
    Ok((student, result))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub mask_bits: String,
    pub trainable_param_count: usize,
    pub results: Vec<EvalResult>,
    pub mean_mse: f64,
    pub mean_epochs: f64,
    pub mean_wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    /// Index of the entry with the lowest mean MSE (ties resolve toward
    /// fewer trainable parameters, then lower bits).
    pub best: usize,
}

impl SweepReport {
    pub fn best_entry(&self) -> &SweepEntry {
        &self.entries[self.best]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "mask_bits,trainable_params,mean_mse,mean_epochs,mean_wall_time_s,best\n",
        );
        for (i, e) in self.entries.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{:.6},{:.2},{:.4},{}\n",
                e.mask_bits,
                e.trainable_param_count,
                e.mean_mse,
                e.mean_epochs,
                e.mean_wall_time_s,
                if i == self.best { 1 } else { 0 }
            ));
        }
        out
    }
}

/// Run the full 8-mask sweep, each mask replicated over `seeds`, in
/// parallel. Entries come back in bit order.
pub fn sweep(
    teacher: &ModelGraph,
    train_ds: &WindowedDataset,
    val_ds: &WindowedDataset,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<SweepReport> {
    check_data_matches(teacher, train_ds)?;
    check_data_matches(teacher, val_ds)?;
    let members = FreezeMask::sweep(teacher)?;
    let tasks: Vec<(usize, String, FreezeMask, u64)> = members
        .iter()
        .flat_map(|(bits, mask)| {
            seeds
                .iter()
                .map(move |&s| (0usize, bits.clone(), mask.clone(), s))
        })
        .enumerate()
        .map(|(i, (_, b, m, s))| (i, b, m, s))
        .collect();

    let runs = exec::par_map(tasks, |(i, bits, mask, seed)| {
        let outcome = transfer(teacher, train_ds, val_ds, &mask, config, seed)
            .map(|(_, result)| result);
        (i, bits, mask, seed, outcome)
    });

    let mut entries: Vec<SweepEntry> = members
        .iter()
        .map(|(bits, mask)| SweepEntry {
            mask_bits: bits.clone(),
            trainable_param_count: mask.trainable_param_count(teacher),
            results: Vec::new(),
            mean_mse: 0.0,
            mean_epochs: 0.0,
            mean_wall_time_s: 0.0,
        })
        .collect();
    let per_mask = seeds.len();
    for (i, _bits, _mask, _seed, outcome) in runs {
        entries[i / per_mask].results.push(outcome?);
    }
    for e in &mut entries {
        let n = e.results.len() as f64;
        e.mean_mse = e.results.iter().map(|r| r.mse).sum::<f64>() / n;
        e.mean_epochs = e.results.iter().map(|r| r.epochs_used as f64).sum::<f64>() / n;
        e.mean_wall_time_s = e.results.iter().map(|r| r.wall_time_s).sum::<f64>() / n;
    }
    let mut best = 0;
    for i in 1..entries.len() {
        let a = &entries[i];
        let b = &entries[best];
        let better = a.mean_mse < b.mean_mse
            || (a.mean_mse == b.mean_mse
                && a.trainable_param_count < b.trainable_param_count);
        if better {
            best = i;
        }
    }
    Ok(SweepReport { entries, best })
}
