//! Trainable layers: GRU, same-padding Conv2D, Dense, AvgPool, Flatten,
//! with per-layer freeze flags and closed-form parameter counts.
//!
//! Dropout is carried as a layer hyperparameter (applied to the input of
//! the owning GRU layer) rather than as a separate layer, so the logical
//! layer list matches the model descriptions: a frozen layer contributes
//! its parameters to the forward pass but never to the gradient map.

pub mod serialize;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Tanh,
    LeakyRelu { slope: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerKind {
    /// Gated recurrent layer returning the full hidden sequence.
    /// `input_dropout` masks the layer input during training only.
    Gru { units: usize, input_dropout: f64 },
    Conv2dSame {
        filters: usize,
        kernel: (usize, usize),
        activation: Activation,
    },
    AvgPool2d { pool: (usize, usize) },
    Dense { units: usize, activation: Activation },
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Gru { .. } => "gru",
            LayerKind::Conv2dSame { .. } => "conv2d_same",
            LayerKind::AvgPool2d { .. } => "avgpool2d",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Flatten => "flatten",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// One logical layer: kind + named parameter tensors + freeze flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub params: Vec<Param>,
    pub frozen: bool,
}

impl Layer {
    /// Total parameter count. Closed forms per kind:
    /// GRU `3*u*(in+u+1)`, Conv2D `f*(kh*kw*cin)+f`, Dense `out*(in+1)`,
    /// pool/flatten `0`.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn has_params(&self) -> bool {
        !self.params.is_empty()
    }

    pub fn set_frozen(&mut self, flag: bool) {
        self.frozen = flag;
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }
}

fn glorot_uniform(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// GRU layer; parameters follow the classic single-bias formulation:
/// per gate one input-to-hidden matrix `[in,u]`, one hidden-to-hidden
/// matrix `[u,u]` and one bias `[u]`, totalling `3*u*(in+u+1)`.
pub fn gru(input: usize, units: usize, input_dropout: f64, rng: &mut ChaCha8Rng) -> Result<Layer> {
    if !(0.0..1.0).contains(&input_dropout) {
        return Err(Error::InvalidArg(format!(
            "gru: dropout rate {input_dropout} outside [0,1)"
        )));
    }
    let mut params = Vec::new();
    for gate in ["z", "r", "h"] {
        params.push(Param {
            name: format!("w_{gate}"),
            value: glorot_uniform(rng, vec![input, units], input, units),
        });
    }
    for gate in ["z", "r", "h"] {
        params.push(Param {
            name: format!("u_{gate}"),
            value: glorot_uniform(rng, vec![units, units], units, units),
        });
    }
    for gate in ["z", "r", "h"] {
        params.push(Param {
            name: format!("b_{gate}"),
            value: Tensor::zeros(vec![units]),
        });
    }
    Ok(Layer {
        kind: LayerKind::Gru {
            units,
            input_dropout,
        },
        params,
        frozen: false,
    })
}

pub fn conv2d_same(
    cin: usize,
    filters: usize,
    kernel: (usize, usize),
    activation: Activation,
    rng: &mut ChaCha8Rng,
) -> Layer {
    let (kh, kw) = kernel;
    let rf = kh * kw;
    Layer {
        kind: LayerKind::Conv2dSame {
            filters,
            kernel,
            activation,
        },
        params: vec![
            Param {
                name: "filters".into(),
                value: glorot_uniform(rng, vec![filters, kh, kw, cin], rf * cin, rf * filters),
            },
            Param {
                name: "bias".into(),
                value: Tensor::zeros(vec![filters]),
            },
        ],
        frozen: false,
    }
}

pub fn dense(input: usize, units: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Layer {
    Layer {
        kind: LayerKind::Dense { units, activation },
        params: vec![
            Param {
                name: "weight".into(),
                value: glorot_uniform(rng, vec![input, units], input, units),
            },
            Param {
                name: "bias".into(),
                value: Tensor::zeros(vec![units]),
            },
        ],
        frozen: false,
    }
}

pub fn avgpool2d(pool: (usize, usize)) -> Layer {
    Layer {
        kind: LayerKind::AvgPool2d { pool },
        params: vec![],
        frozen: false,
    }
}

pub fn flatten() -> Layer {
    Layer {
        kind: LayerKind::Flatten,
        params: vec![],
        frozen: false,
    }
}

/// Data flowing between layers on the tape: a per-timestep sequence for
/// the recurrent path, an image for the convolutional path, a flat
/// matrix after Flatten.
pub enum Stream {
    /// `p` tensors of shape `[batch, dim]`, oldest first.
    Seq(Vec<TensorId>),
    /// `[batch, h, w, c]`.
    Image(TensorId),
    /// `[batch, n]`.
    Flat(TensorId),
}

/// Per-forward context: training toggles dropout; the RNG drives mask
/// sampling and must be the run's own stream.
pub struct ForwardCtx<'a> {
    pub training: bool,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl ForwardCtx<'_> {
    pub fn eval() -> ForwardCtx<'static> {
        ForwardCtx {
            training: false,
            rng: None,
        }
    }
}

/// Parameter tensor ids for one layer, in `Layer::params` order.
pub type LayerParamIds = Vec<TensorId>;

impl Layer {
    /// Put this layer's parameters on the tape. Frozen layers are
    /// recorded as constants so the backward pass never touches them.
    pub fn register(&self, tape: &mut Tape) -> LayerParamIds {
        self.params
            .iter()
            .map(|p| {
                if self.frozen {
                    tape.leaf(p.value.clone())
                } else {
                    tape.param(p.value.clone())
                }
            })
            .collect()
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        ids: &LayerParamIds,
        input: Stream,
        ctx: &mut ForwardCtx,
    ) -> Result<Stream> {
        match (&self.kind, input) {
            (
                LayerKind::Gru {
                    units,
                    input_dropout,
                },
                Stream::Seq(seq),
            ) => {
                let out = gru_forward_tape(tape, ids, &seq, *units, *input_dropout, ctx)?;
                Ok(Stream::Seq(out))
            }
            (LayerKind::Conv2dSame { activation, .. }, Stream::Image(x)) => {
                let c = tape.conv2d_same(x, ids[0], ids[1])?;
                Ok(Stream::Image(apply_activation(tape, c, *activation)?))
            }
            (LayerKind::AvgPool2d { pool }, Stream::Image(x)) => {
                Ok(Stream::Image(tape.avgpool2d(x, *pool)?))
            }
            (LayerKind::Dense { activation, .. }, Stream::Flat(x)) => {
                let h = tape.matmul(x, ids[0])?;
                let h = tape.add(h, ids[1])?;
                Ok(Stream::Flat(apply_activation(tape, h, *activation)?))
            }
            (LayerKind::Flatten, Stream::Seq(seq)) => {
                // Timestep-major flatten: [h(1) .. h(p)] side by side.
                Ok(Stream::Flat(tape.concat(&seq, 1)?))
            }
            (LayerKind::Flatten, Stream::Image(x)) => {
                let s = tape.value(x).shape().to_vec();
                let flat: usize = s[1..].iter().product();
                Ok(Stream::Flat(tape.reshape(x, vec![s[0], flat])?))
            }
            (kind, _) => Err(Error::InvalidArg(format!(
                "layer {} received an incompatible input stream",
                kind.name()
            ))),
        }
    }
}

pub fn apply_activation(tape: &mut Tape, x: TensorId, a: Activation) -> Result<TensorId> {
    match a {
        Activation::None => Ok(x),
        Activation::Tanh => tape.tanh(x),
        Activation::LeakyRelu { slope } => tape.leaky_relu(x, slope),
    }
}

/// Inverted-dropout mask: kept entries are scaled by `1/(1-rate)` so the
/// mask has unit expectation; applied only in training mode.
pub fn dropout_mask(shape: Vec<usize>, rate: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let scale = 1.0 / (1.0 - rate);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                scale
            }
        })
        .collect();
    Tensor::new(shape, data).expect("mask shape")
}

/// Classic single-bias GRU over a timestep sequence:
/// `z = sig(W_z x + U_z h + b_z)`, `r = sig(W_r x + U_r h + b_r)`,
/// `hh = tanh(W_h x + U_h (r.h) + b_h)`, `h' = (1-z).h + z.hh`
/// (computed as `h + z.(hh - h)`). `h0` is zero; the full hidden
/// sequence is returned. One dropout mask is drawn per call and shared
/// across timesteps.
fn gru_forward_tape(
    tape: &mut Tape,
    ids: &LayerParamIds,
    seq: &[TensorId],
    units: usize,
    input_dropout: f64,
    ctx: &mut ForwardCtx,
) -> Result<Vec<TensorId>> {
    if !(0.0..1.0).contains(&input_dropout) {
        return Err(Error::InvalidArg(format!(
            "gru: dropout rate {input_dropout} outside [0,1)"
        )));
    }
    let (w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h) = (
        ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6], ids[7], ids[8],
    );
    let batch = tape.value(seq[0]).shape()[0];
    let input_dim = tape.value(seq[0]).shape()[1];

    let mask = if ctx.training && input_dropout > 0.0 {
        let rng = ctx.rng.as_deref_mut().ok_or_else(|| {
            Error::InvalidArg("gru: training forward requires an RNG for dropout".into())
        })?;
        Some(tape.leaf(dropout_mask(vec![batch, input_dim], input_dropout, rng)))
    } else {
        None
    };

    let mut h = tape.leaf(Tensor::zeros(vec![batch, units]));
    let mut out = Vec::with_capacity(seq.len());
    for &x_t in seq {
        let x = match mask {
            Some(m) => tape.mul(x_t, m)?,
            None => x_t,
        };
        let zx = tape.matmul(x, w_z)?;
        let zh = tape.matmul(h, u_z)?;
        let z_pre = tape.add(zx, zh)?;
        let z_pre = tape.add(z_pre, b_z)?;
        let z = tape.sigmoid(z_pre)?;

        let rx = tape.matmul(x, w_r)?;
        let rh_ = tape.matmul(h, u_r)?;
        let r_pre = tape.add(rx, rh_)?;
        let r_pre = tape.add(r_pre, b_r)?;
        let r = tape.sigmoid(r_pre)?;

        let gated = tape.mul(r, h)?;
        let hx = tape.matmul(x, w_h)?;
        let hu = tape.matmul(gated, u_h)?;
        let h_pre = tape.add(hx, hu)?;
        let h_pre = tape.add(h_pre, b_h)?;
        let hh = tape.tanh(h_pre)?;

        let delta = tape.sub(hh, h)?;
        let step = tape.mul(z, delta)?;
        h = tape.add(h, step)?;
        out.push(h);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    #[test]
    fn gru_param_count_closed_form() {
        let mut rng = rng_from(1);
        let layer = gru(5, 128, 0.0, &mut rng).unwrap();
        assert_eq!(layer.param_count(), 3 * 128 * (5 + 128 + 1));
        assert_eq!(layer.param_count(), 51_456);
    }

    #[test]
    fn conv_dense_param_counts() {
        let mut rng = rng_from(1);
        let c = conv2d_same(1, 16, (16, 3), Activation::LeakyRelu { slope: 0.01 }, &mut rng);
        assert_eq!(c.param_count(), 16 * 48 + 16);
        assert_eq!(c.param_count(), 784);
        let d = dense(800, 5, Activation::Tanh, &mut rng);
        assert_eq!(d.param_count(), 800 * 5 + 5);
        assert_eq!(d.param_count(), 4_005);
        assert_eq!(avgpool2d((2, 1)).param_count(), 0);
        assert_eq!(flatten().param_count(), 0);
    }

    #[test]
    fn gru_zero_input_zero_params_gives_zero_sequence() {
        let mut rng = rng_from(3);
        let mut layer = gru(2, 3, 0.0, &mut rng).unwrap();
        for p in &mut layer.params {
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
        let mut tape = Tape::new();
        let ids = layer.register(&mut tape);
        let seq: Vec<TensorId> = (0..4).map(|_| tape.leaf(Tensor::zeros(vec![1, 2]))).collect();
        let out = layer
            .forward_tape(&mut tape, &ids, Stream::Seq(seq), &mut ForwardCtx::eval())
            .unwrap();
        let Stream::Seq(hs) = out else { panic!() };
        for h in hs {
            assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gru_single_step_matches_scalar_hand_computation() {
        // units=1, input=1, p=1: one gated update, checked by hand.
        let mut rng = rng_from(4);
        let mut layer = gru(1, 1, 0.0, &mut rng).unwrap();
        let vals = [
            ("w_z", 0.5),
            ("w_r", -0.3),
            ("w_h", 0.8),
            ("u_z", 0.2),
            ("u_r", 0.1),
            ("u_h", -0.4),
            ("b_z", 0.05),
            ("b_r", -0.02),
            ("b_h", 0.11),
        ];
        for (name, v) in vals {
            let p = layer.params.iter_mut().find(|p| p.name == name).unwrap();
            p.value = Tensor::new(p.value.shape().to_vec(), vec![v]).unwrap();
        }
        let x = 0.7;
        let mut tape = Tape::new();
        let ids = layer.register(&mut tape);
        let xs = vec![tape.leaf(Tensor::new(vec![1, 1], vec![x]).unwrap())];
        let out = layer
            .forward_tape(&mut tape, &ids, Stream::Seq(xs), &mut ForwardCtx::eval())
            .unwrap();
        let Stream::Seq(hs) = out else { panic!() };
        let got = tape.value(hs[0]).item();

        // h0 = 0, so: z = sig(0.5*0.7 + 0.05), hh = tanh(0.8*0.7 + 0.11),
        // h1 = z * hh.
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let z = sig(0.5 * x + 0.05);
        let hh = (0.8 * x + 0.11f64).tanh();
        let expected = z * hh;
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn dropout_eval_is_identity_and_training_mask_has_unit_mean() {
        let mut rng = rng_from(5);
        let mask = dropout_mask(vec![200, 50], 0.2, &mut rng);
        let mean: f64 = mask.data().iter().sum::<f64>() / mask.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "inverted mask mean {mean}");
        for &v in mask.data() {
            assert!(v == 0.0 || (v - 1.25).abs() < 1e-12);
        }

        // Eval mode never applies a mask: identical output with rate set.
        let mut rng = rng_from(6);
        let layer = gru(2, 3, 0.4, &mut rng).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.3, -0.6]).unwrap();
        let run_eval = || {
            let mut tape = Tape::new();
            let ids = layer.register(&mut tape);
            let xs = vec![tape.leaf(x.clone())];
            let out = layer
                .forward_tape(&mut tape, &ids, Stream::Seq(xs), &mut ForwardCtx::eval())
                .unwrap();
            let Stream::Seq(hs) = out else { panic!() };
            tape.value(hs[0]).data().to_vec()
        };
        assert_eq!(run_eval(), run_eval());
    }

    #[test]
    fn invalid_dropout_rate_rejected() {
        let mut rng = rng_from(7);
        assert!(gru(2, 3, 1.0, &mut rng).is_err());
        assert!(gru(2, 3, -0.1, &mut rng).is_err());
    }

    #[test]
    fn frozen_layer_registers_constants() {
        let mut rng = rng_from(8);
        let mut layer = dense(3, 2, Activation::Tanh, &mut rng);
        layer.set_frozen(true);
        let mut tape = Tape::new();
        let ids = layer.register(&mut tape);
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap());
        let out = layer
            .forward_tape(&mut tape, &ids, Stream::Flat(x), &mut ForwardCtx::eval())
            .unwrap();
        let Stream::Flat(y) = out else { panic!() };
        let loss = tape.mean(y).unwrap();
        // Loss depends only on frozen params -> detached.
        assert!(tape.backward(loss).is_err());
    }
}
