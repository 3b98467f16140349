//! Model construction: the RNN (stacked GRU) and CNN architectures,
//! built from their tuned hyperparameters.
//!
//! Parameter totals are load-bearing: RNN at p=10 must come to 100,981
//! parameters and the CNN to 33,285 / 34,885 / 37,285 at p=10/15/20.
//! That arithmetic pins several structural choices: the single-bias GRU
//! formulation, same-padding convolutions, floor-division pooling, and
//! the dense head consuming the full flattened hidden sequence.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::nn::{self, Activation, ForwardCtx, Layer, LayerKind, LayerParamIds, Stream};
use crate::seed::rng_from;
use crate::tensor::{Tape, Tensor, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Rnn,
    Cnn,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::Rnn => "rnn",
            Arch::Cnn => "cnn",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" => Ok(Arch::Rnn),
            "cnn" => Ok(Arch::Cnn),
            other => Err(Error::InvalidArg(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Tuned RNN hyperparameters: four stacked GRU layers; dropout on the
/// inputs of the first and fourth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnHyper {
    pub units: [usize; 4],
    pub dropout_first: f64,
    pub dropout_last: f64,
}

impl Default for RnnHyper {
    fn default() -> Self {
        RnnHyper {
            units: [128, 64, 32, 16],
            dropout_first: 0.0,
            dropout_last: 0.2,
        }
    }
}

/// Tuned CNN hyperparameters: four same-padding conv layers (16, 16, 32,
/// 32 filters) with leaky-ReLU, then a [2,1] average pool over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnHyper {
    pub filters_first: usize,
    pub filters_second: usize,
    pub kernels: [(usize, usize); 4],
    pub pool: (usize, usize),
    pub leaky_slope: f64,
}

impl Default for CnnHyper {
    fn default() -> Self {
        CnnHyper {
            filters_first: 16,
            filters_second: 32,
            kernels: [(16, 3), (3, 5), (8, 3), (4, 3)],
            pool: (2, 1),
            leaky_slope: 0.01,
        }
    }
}

/// Column permutation applied to CNN inputs: with the canonical input
/// order [rnti_count, rb_down, rb_up, mcs_down, mcs_up], the CNN sees
/// [rb_down, rb_up, rnti_count, mcs_down, mcs_up] so the user count sits
/// between the block of RB columns and the MCS columns.
pub const CNN_FEATURE_ORDER: [usize; 5] = [1, 2, 0, 3, 4];

/// An ordered stack of layers with fixed input window `[p, m]` and
/// output dimension `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub arch: Arch,
    pub p: usize,
    pub m: usize,
    pub q: usize,
    /// Input column permutation applied before the first layer.
    pub feature_order: Option<Vec<usize>>,
    pub layers: Vec<Layer>,
}

pub fn build_rnn(p: usize, m: usize, q: usize, hyper: &RnnHyper, seed: u64) -> Result<ModelGraph> {
    if p < 1 {
        return Err(Error::InvalidArg("build_rnn: p must be >= 1".into()));
    }
    let mut rng = rng_from(seed);
    let [n1, n2, n3, n4] = hyper.units;
    let layers = vec![
        nn::gru(m, n1, hyper.dropout_first, &mut rng)?,
        nn::gru(n1, n2, 0.0, &mut rng)?,
        nn::gru(n2, n3, 0.0, &mut rng)?,
        nn::gru(n3, n4, hyper.dropout_last, &mut rng)?,
        nn::flatten(),
        nn::dense(p * n4, q, Activation::Tanh, &mut rng),
    ];
    Ok(ModelGraph {
        arch: Arch::Rnn,
        p,
        m,
        q,
        feature_order: None,
        layers,
    })
}

pub fn build_cnn(p: usize, m: usize, q: usize, hyper: &CnnHyper, seed: u64) -> Result<ModelGraph> {
    if p < 2 {
        return Err(Error::InvalidArg(
            "build_cnn: p must be >= 2 (pooling needs two rows)".into(),
        ));
    }
    let mut rng = rng_from(seed);
    let act = Activation::LeakyRelu {
        slope: hyper.leaky_slope,
    };
    let (fa, fb) = (hyper.filters_first, hyper.filters_second);
    let pooled_rows = p / hyper.pool.0;
    let pooled_cols = m / hyper.pool.1;
    let layers = vec![
        nn::conv2d_same(1, fa, hyper.kernels[0], act, &mut rng),
        nn::conv2d_same(fa, fa, hyper.kernels[1], act, &mut rng),
        nn::conv2d_same(fa, fb, hyper.kernels[2], act, &mut rng),
        nn::conv2d_same(fb, fb, hyper.kernels[3], act, &mut rng),
        nn::avgpool2d(hyper.pool),
        nn::flatten(),
        nn::dense(pooled_rows * pooled_cols * fb, q, Activation::Tanh, &mut rng),
    ];
    Ok(ModelGraph {
        arch: Arch::Cnn,
        p,
        m,
        q,
        feature_order: Some(CNN_FEATURE_ORDER.to_vec()),
        layers,
    })
}

impl ModelGraph {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| !l.frozen)
            .map(Layer::param_count)
            .sum()
    }

    /// Indices of layers that own parameters, in order.
    pub fn parameterized_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_params())
            .map(|(i, _)| i)
            .collect()
    }

    /// Put every layer's parameters on a tape (frozen layers become
    /// constants).
    pub fn register(&self, tape: &mut Tape) -> Vec<LayerParamIds> {
        self.layers.iter().map(|l| l.register(tape)).collect()
    }

    /// Forward pass over a `[batch, p, m]` input already on the tape.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        ids: &[LayerParamIds],
        x: TensorId,
        ctx: &mut ForwardCtx,
    ) -> Result<TensorId> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != self.p || shape[2] != self.m {
            return Err(Error::InvalidArg(format!(
                "model expects input [batch, {}, {}], got {shape:?}",
                self.p, self.m
            )));
        }
        let batch = shape[0];
        let x = match &self.feature_order {
            None => x,
            Some(order) => {
                let cols: Vec<TensorId> = order
                    .iter()
                    .map(|&c| tape.slice(x, 2, c, 1))
                    .collect::<Result<_>>()?;
                tape.concat(&cols, 2)?
            }
        };
        let mut stream = match self.arch {
            Arch::Rnn => {
                let mut seq = Vec::with_capacity(self.p);
                for t in 0..self.p {
                    let s = tape.slice(x, 1, t, 1)?;
                    seq.push(tape.reshape(s, vec![batch, self.m])?);
                }
                Stream::Seq(seq)
            }
            Arch::Cnn => Stream::Image(tape.reshape(x, vec![batch, self.p, self.m, 1])?),
        };
        for (layer, layer_ids) in self.layers.iter().zip(ids) {
            stream = layer.forward_tape(tape, layer_ids, stream, ctx)?;
        }
        match stream {
            Stream::Flat(out) => Ok(out),
            _ => Err(Error::InvalidArg(
                "model did not end in a flat output layer".into(),
            )),
        }
    }

    /// Run the model in eval mode on `[batch, p, m]` input, returning
    /// `[batch, q]` predictions.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ids: Vec<LayerParamIds> = self
            .layers
            .iter()
            .map(|l| l.params.iter().map(|p| tape.leaf(p.value.clone())).collect())
            .collect();
        let xid = tape.leaf(x.clone());
        let out = self.forward_tape(&mut tape, &ids, xid, &mut ForwardCtx::eval())?;
        Ok(tape.value(out).clone())
    }

    /// Check that another model was built from the same architecture and
    /// window configuration; on mismatch the error lists the differing
    /// layers.
    pub fn check_compatible(&self, other: &ModelGraph) -> Result<()> {
        if self.arch != other.arch
            || self.p != other.p
            || self.m != other.m
            || self.q != other.q
            || self.feature_order != other.feature_order
        {
            return Err(Error::InvalidArg(format!(
                "architecture mismatch: {}(p={},m={},q={}) vs {}(p={},m={},q={})",
                self.arch.name(),
                self.p,
                self.m,
                self.q,
                other.arch.name(),
                other.p,
                other.m,
                other.q
            )));
        }
        if self.layers.len() != other.layers.len() {
            return Err(Error::InvalidArg(format!(
                "architecture mismatch: {} vs {} layers",
                self.layers.len(),
                other.layers.len()
            )));
        }
        let mut diffs = Vec::new();
        for (i, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a.kind != b.kind {
                diffs.push(format!(
                    "layer {i}: {} vs {}",
                    serde_json::to_string(&a.kind).unwrap_or_default(),
                    serde_json::to_string(&b.kind).unwrap_or_default()
                ));
            }
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArg(format!(
                "architecture mismatch in layers: {}",
                diffs.join("; ")
            )))
        }
    }

    /// Per-layer summary (kind, hyperparameters, parameter count, freeze
    /// flag) plus totals, as JSON.
    pub fn summary(&self) -> serde_json::Value {
        let layers: Vec<serde_json::Value> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                json!({
                    "index": i,
                    "hyper": l.kind,
                    "param_count": l.param_count(),
                    "frozen": l.frozen,
                })
            })
            .collect();
        json!({
            "arch": self.arch,
            "input_shape": [self.p, self.m],
            "output_dim": self.q,
            "feature_order": self.feature_order,
            "total_params": self.param_count(),
            "trainable_params": self.trainable_param_count(),
            "layers": layers,
        })
    }

    /// Write weights + manifest (`<stem>.bin` / `<stem>.json`).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let meta = ModelMeta {
            arch: self.arch,
            p: self.p,
            m: self.m,
            q: self.q,
            feature_order: self.feature_order.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerMeta {
                    kind: l.kind.clone(),
                    frozen: l.frozen,
                })
                .collect(),
        };
        let entries: Vec<(String, &Tensor)> = self
            .layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params
                    .iter()
                    .map(move |p| (format!("layer{i}.{}", p.name), &p.value))
            })
            .collect();
        nn::serialize::save_container(
            &stem.with_extension("bin"),
            &stem.with_extension("json"),
            serde_json::to_value(&meta)?,
            &entries,
        )
    }

    pub fn load(stem: &Path) -> Result<ModelGraph> {
        let (meta, tensors) = nn::serialize::load_container(
            &stem.with_extension("bin"),
            &stem.with_extension("json"),
        )?;
        let meta: ModelMeta = serde_json::from_value(meta)?;
        let mut layers = Vec::with_capacity(meta.layers.len());
        let mut cursor = 0usize;
        for (i, lm) in meta.layers.iter().enumerate() {
            let expected = expected_param_names(&lm.kind);
            let mut params = Vec::with_capacity(expected.len());
            for name in expected {
                let full = format!("layer{i}.{name}");
                let (got_name, tensor) = tensors.get(cursor).ok_or_else(|| {
                    Error::InvalidData(format!("weight container missing entry {full:?}"))
                })?;
                if got_name != &full {
                    return Err(Error::InvalidData(format!(
                        "weight container entry {got_name:?} where {full:?} was expected"
                    )));
                }
                params.push(nn::Param {
                    name: name.to_string(),
                    value: tensor.clone(),
                });
                cursor += 1;
            }
            layers.push(Layer {
                kind: lm.kind.clone(),
                params,
                frozen: lm.frozen,
            });
        }
        if cursor != tensors.len() {
            return Err(Error::InvalidData(format!(
                "weight container has {} extra entries",
                tensors.len() - cursor
            )));
        }
        Ok(ModelGraph {
            arch: meta.arch,
            p: meta.p,
            m: meta.m,
            q: meta.q,
            feature_order: meta.feature_order,
            layers,
        })
    }
}

fn expected_param_names(kind: &LayerKind) -> Vec<&'static str> {
    match kind {
        LayerKind::Gru { .. } => vec!["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"],
        LayerKind::Conv2dSame { .. } => vec!["filters", "bias"],
        LayerKind::Dense { .. } => vec!["weight", "bias"],
        LayerKind::AvgPool2d { .. } | LayerKind::Flatten => vec![],
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    arch: Arch,
    p: usize,
    m: usize,
    q: usize,
    feature_order: Option<Vec<usize>>,
    layers: Vec<LayerMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerMeta {
    kind: LayerKind,
    frozen: bool,
}
