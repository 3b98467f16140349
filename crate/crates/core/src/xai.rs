//! Attribution maps over trained models: gradient sensitivity,
//! SmoothGrad (noise-averaged gradients) and layer-wise relevance
//! propagation, aggregated over a dataset as the squared average.
//!
//! LRP redistributes the predicted value backward through each layer in
//! proportion to `a_j * w_jk`, with an epsilon-stabilized denominator
//! that excludes the bias so every redistribution step conserves
//! relevance. Elementwise activations pass relevance through unchanged;
//! average pooling splits it equally across the pooled cells. Through
//! GRU cells the gates act as constant multiplicative weights at their
//! cached activation values: relevance follows the two linear signal
//! paths (previous state and candidate state) and none sticks to the
//! gates themselves.

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::pipeline::WindowedDataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::models::ModelGraph;
use crate::nn::{Activation, ForwardCtx, LayerKind};
use crate::seed::rng_for;
use crate::tensor::{self, ConvDims, Tape, Tensor};

/// Inputs are normalized into [-1, 1]; sigma is a fraction of this range.
const INPUT_RANGE: f64 = 2.0;
const STABILIZER: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Smoothgrad,
    Lrp,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Smoothgrad => "smoothgrad",
            Method::Lrp => "lrp",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct XaiOptions {
    /// SmoothGrad noise draws per sample.
    pub noise_samples: usize,
    /// Noise std as a fraction of the input range.
    pub sigma_frac: f64,
    /// Use every k-th window of the dataset.
    pub stride: usize,
    pub seed: u64,
}

impl Default for XaiOptions {
    fn default() -> Self {
        XaiOptions {
            noise_samples: 50,
            sigma_frac: 0.1,
            stride: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionMeta {
    pub arch: String,
    pub n_samples: usize,
    pub noise_samples: Option<usize>,
    pub sigma: Option<f64>,
    pub input_columns: Vec<String>,
    pub output_column: String,
}

/// Squared-average attribution grid for one output feature: rows are
/// the p input time steps (oldest first), columns the m input features
/// in canonical order.
#[derive(Debug, Clone)]
pub struct AttributionMap {
    pub method: Method,
    pub output_index: usize,
    pub grid: Tensor,
    pub meta: AttributionMeta,
}

/// d(S_i)/dx via the tape: the input is registered as the differentiable
/// leaf, parameters as constants.
pub fn sensitivity_map(model: &ModelGraph, x: &Tensor, output_index: usize) -> Result<Tensor> {
    if x.shape() != [model.p, model.m] {
        return Err(Error::InvalidArg(format!(
            "sensitivity_map: input must be [{}, {}], got {:?}",
            model.p,
            model.m,
            x.shape()
        )));
    }
    if output_index >= model.q {
        return Err(Error::InvalidArg(format!(
            "sensitivity_map: output index {output_index} out of range (q={})",
            model.q
        )));
    }
    let mut tape = Tape::new();
    let ids: Vec<Vec<_>> = model
        .layers
        .iter()
        .map(|l| l.params.iter().map(|p| tape.leaf(p.value.clone())).collect())
        .collect();
    let xid = tape.param(x.clone().reshaped(vec![1, model.p, model.m])?);
    let out = model.forward_tape(&mut tape, &ids, xid, &mut ForwardCtx::eval())?;
    let s_i = tape.slice(out, 1, output_index, 1)?;
    let grads = tape.backward(s_i)?;
    let grad = grads
        .get(xid)
        .ok_or_else(|| Error::InvalidArg("sensitivity_map: no input gradient".into()))?;
    grad.clone().reshaped(vec![model.p, model.m])
}

/// SmoothGrad: average of `n` sensitivity maps at Gaussian-perturbed
/// inputs. `sigma_frac = 0` reduces exactly to the raw sensitivity map.
pub fn smoothgrad(
    model: &ModelGraph,
    x: &Tensor,
    output_index: usize,
    n: usize,
    sigma_frac: f64,
    seed: u64,
) -> Result<Tensor> {
    if n < 1 {
        return Err(Error::InvalidArg("smoothgrad: need n >= 1".into()));
    }
    if sigma_frac < 0.0 {
        return Err(Error::InvalidArg("smoothgrad: sigma must be >= 0".into()));
    }
    if sigma_frac == 0.0 {
        return sensitivity_map(model, x, output_index);
    }
    let sigma = sigma_frac * INPUT_RANGE;
    let maps = exec::par_map_range(n, |k| -> Result<Tensor> {
        let mut rng = rng_for(seed, &format!("smoothgrad/{output_index}/{k}"));
        let noisy: Vec<f64> = x
            .data()
            .iter()
            .map(|v| {
                let eps: f64 = StandardNormal.sample(&mut rng);
                v + sigma * eps
            })
            .collect();
        let xk = Tensor::new(x.shape().to_vec(), noisy)?;
        sensitivity_map(model, &xk, output_index)
    });
    let mut acc = Tensor::zeros(vec![model.p, model.m]);
    for map in maps {
        let map = map?;
        for (a, b) in acc.data_mut().iter_mut().zip(map.data()) {
            *a += b;
        }
    }
    let inv = 1.0 / n as f64;
    for a in acc.data_mut() {
        *a *= inv;
    }
    Ok(acc)
}

/// Squared average over per-sample maps: `grid = mean(map^2)`,
/// sign-independent and permutation-invariant over samples.
pub fn aggregate_maps(maps: &[Tensor]) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArg("aggregate_maps: no maps".into()))?;
    let mut acc = Tensor::zeros(first.shape().to_vec());
    for map in maps {
        if map.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "aggregate_maps",
                lhs: first.shape().to_vec(),
                rhs: map.shape().to_vec(),
            });
        }
        for (a, b) in acc.data_mut().iter_mut().zip(map.data()) {
            *a += b * b;
        }
    }
    let inv = 1.0 / maps.len() as f64;
    for a in acc.data_mut() {
        *a *= inv;
    }
    Ok(acc)
}

/// Min-max scale a grid into [0, 1] for rendering. A constant grid maps
/// to zeros.
pub fn scale_unit(grid: &Tensor) -> Tensor {
    let min = grid.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = grid.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = grid.clone();
    if max > min {
        for v in out.data_mut() {
            *v = (*v - min) / (max - min);
        }
    } else {
        for v in out.data_mut() {
            *v = 0.0;
        }
    }
    out
}

// ---- traced forward pass (eval mode) used by LRP ----

struct GruTrace {
    inputs: Vec<Vec<f64>>,
    h_prev: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    hh: Vec<Vec<f64>>,
    hh_pre: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
}

enum LayerTrace {
    Gru(GruTrace),
    Conv {
        input: Vec<f64>,
        pre: Vec<f64>,
        dims: ConvDims,
    },
    Pool {
        in_shape: (usize, usize, usize),
        pool: (usize, usize),
    },
    Dense {
        input: Vec<f64>,
        pre: Vec<f64>,
    },
    FlattenSeq {
        steps: usize,
        dim: usize,
    },
    FlattenImage {
        shape: (usize, usize, usize),
    },
}

enum TraceStream {
    Seq(Vec<Vec<f64>>),
    Image(Vec<f64>, (usize, usize, usize)),
    Flat(Vec<f64>),
}

fn matvec(x: &[f64], w: &Tensor) -> Vec<f64> {
    tensor::matmul(x, w.data(), 1, w.shape()[0], w.shape()[1])
}

/// Single-sample eval forward that records the activations LRP needs.
/// Uses the same kernels in the same order as the tape path, so values
/// agree bit for bit.
fn forward_trace(model: &ModelGraph, x: &Tensor) -> Result<(Vec<f64>, Vec<LayerTrace>)> {
    if x.shape() != [model.p, model.m] {
        return Err(Error::InvalidArg(format!(
            "forward_trace: input must be [{}, {}], got {:?}",
            model.p,
            model.m,
            x.shape()
        )));
    }
    let permuted: Vec<Vec<f64>> = (0..model.p)
        .map(|t| {
            let row = &x.data()[t * model.m..(t + 1) * model.m];
            match &model.feature_order {
                None => row.to_vec(),
                Some(order) => order.iter().map(|&c| row[c]).collect(),
            }
        })
        .collect();

    let mut stream = match model.arch {
        crate::models::Arch::Rnn => TraceStream::Seq(permuted),
        crate::models::Arch::Cnn => {
            let flat: Vec<f64> = permuted.into_iter().flatten().collect();
            TraceStream::Image(flat, (model.p, model.m, 1))
        }
    };
    let mut traces = Vec::with_capacity(model.layers.len());

    for layer in &model.layers {
        stream = match (&layer.kind, stream) {
            (LayerKind::Gru { units, .. }, TraceStream::Seq(seq)) => {
                let u = *units;
                let w_z = layer.param("w_z").unwrap();
                let w_r = layer.param("w_r").unwrap();
                let w_h = layer.param("w_h").unwrap();
                let u_z = layer.param("u_z").unwrap();
                let u_r = layer.param("u_r").unwrap();
                let u_h = layer.param("u_h").unwrap();
                let b_z = layer.param("b_z").unwrap().data();
                let b_r = layer.param("b_r").unwrap().data();
                let b_h = layer.param("b_h").unwrap().data();
                let mut trace = GruTrace {
                    inputs: Vec::with_capacity(seq.len()),
                    h_prev: Vec::with_capacity(seq.len()),
                    z: Vec::with_capacity(seq.len()),
                    r: Vec::with_capacity(seq.len()),
                    hh: Vec::with_capacity(seq.len()),
                    hh_pre: Vec::with_capacity(seq.len()),
                    h: Vec::with_capacity(seq.len()),
                };
                let mut h = vec![0.0; u];
                let mut out_seq = Vec::with_capacity(seq.len());
                for x_t in seq {
                    let zx = matvec(&x_t, w_z);
                    let zh = matvec(&h, u_z);
                    let z: Vec<f64> = zx
                        .iter()
                        .zip(&zh)
                        .zip(b_z)
                        .map(|((a, b), c)| tensor::sigmoid(a + b + c))
                        .collect();
                    let rx = matvec(&x_t, w_r);
                    let rh = matvec(&h, u_r);
                    let r: Vec<f64> = rx
                        .iter()
                        .zip(&rh)
                        .zip(b_r)
                        .map(|((a, b), c)| tensor::sigmoid(a + b + c))
                        .collect();
                    let gated: Vec<f64> = r.iter().zip(&h).map(|(rv, hv)| rv * hv).collect();
                    let hx = matvec(&x_t, w_h);
                    let hu = matvec(&gated, u_h);
                    let hh_pre: Vec<f64> = hx
                        .iter()
                        .zip(&hu)
                        .zip(b_h)
                        .map(|((a, b), c)| a + b + c)
                        .collect();
                    let hh: Vec<f64> = hh_pre.iter().map(|v| v.tanh()).collect();
                    let h_new: Vec<f64> = h
                        .iter()
                        .zip(&z)
                        .zip(&hh)
                        .map(|((hv, zv), hhv)| hv + zv * (hhv - hv))
                        .collect();
                    trace.inputs.push(x_t);
                    trace.h_prev.push(h.clone());
                    trace.z.push(z);
                    trace.r.push(r);
                    trace.hh.push(hh);
                    trace.hh_pre.push(hh_pre);
                    trace.h.push(h_new.clone());
                    out_seq.push(h_new.clone());
                    h = h_new;
                }
                traces.push(LayerTrace::Gru(trace));
                TraceStream::Seq(out_seq)
            }
            (LayerKind::Conv2dSame { activation, .. }, TraceStream::Image(img, (h, w, cin))) => {
                let filters = layer.param("filters").unwrap();
                let bias = layer.param("bias").unwrap();
                let f = filters.shape()[0];
                let dims = ConvDims {
                    h,
                    w,
                    cin,
                    filters: f,
                    kh: filters.shape()[1],
                    kw: filters.shape()[2],
                };
                let wt = tensor::filters_to_wt(filters.data(), &dims);
                let pre = tensor::conv2d_same_sample(&img, &wt, bias.data(), &dims);
                let out = apply_activation_slice(&pre, *activation);
                traces.push(LayerTrace::Conv {
                    input: img,
                    pre,
                    dims,
                });
                TraceStream::Image(out, (h, w, f))
            }
            (LayerKind::AvgPool2d { pool }, TraceStream::Image(img, (h, w, c))) => {
                let out = tensor::avgpool2d_sample(&img, h, w, c, pool.0, pool.1);
                traces.push(LayerTrace::Pool {
                    in_shape: (h, w, c),
                    pool: *pool,
                });
                TraceStream::Image(out, (h / pool.0, w / pool.1, c))
            }
            (LayerKind::Dense { activation, .. }, TraceStream::Flat(v)) => {
                let weight = layer.param("weight").unwrap();
                let bias = layer.param("bias").unwrap().data();
                let mut pre = matvec(&v, weight);
                for (p, b) in pre.iter_mut().zip(bias) {
                    *p += b;
                }
                let out = apply_activation_slice(&pre, *activation);
                traces.push(LayerTrace::Dense { input: v, pre });
                TraceStream::Flat(out)
            }
            (LayerKind::Flatten, TraceStream::Seq(seq)) => {
                let steps = seq.len();
                let dim = seq[0].len();
                let flat: Vec<f64> = seq.into_iter().flatten().collect();
                traces.push(LayerTrace::FlattenSeq { steps, dim });
                TraceStream::Flat(flat)
            }
            (LayerKind::Flatten, TraceStream::Image(img, shape)) => {
                traces.push(LayerTrace::FlattenImage { shape });
                TraceStream::Flat(img)
            }
            _ => {
                return Err(Error::InvalidArg(format!(
                    "forward_trace: layer {} got an incompatible stream",
                    layer.kind.name()
                )))
            }
        };
    }
    match stream {
        TraceStream::Flat(out) => Ok((out, traces)),
        _ => Err(Error::InvalidArg(
            "forward_trace: model did not end in a flat output".into(),
        )),
    }
}

fn apply_activation_slice(pre: &[f64], a: Activation) -> Vec<f64> {
    match a {
        Activation::None => pre.to_vec(),
        Activation::Tanh => pre.iter().map(|v| v.tanh()).collect(),
        Activation::LeakyRelu { slope } => pre
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect(),
    }
}

fn stabilize(d: f64) -> f64 {
    if d >= 0.0 {
        d + STABILIZER
    } else {
        d - STABILIZER
    }
}

fn check_denominator(raw: f64, relevance: f64, what: &str) -> Result<()> {
    if raw == 0.0 && relevance != 0.0 {
        return Err(Error::InvalidData(format!(
            "lrp: zero denominator redistributing relevance through {what}"
        )));
    }
    Ok(())
}

enum Rel {
    Seq(Vec<Vec<f64>>),
    Image(Vec<f64>, (usize, usize, usize)),
    Flat(Vec<f64>),
}

/// Layer-wise relevance propagation for output neuron `output_index`,
/// initialized with the predicted value and redistributed down to a
/// [p, m] input grid (canonical column order).
pub fn lrp(model: &ModelGraph, x: &Tensor, output_index: usize) -> Result<Tensor> {
    if output_index >= model.q {
        return Err(Error::InvalidArg(format!(
            "lrp: output index {output_index} out of range (q={})",
            model.q
        )));
    }
    let (out, traces) = forward_trace(model, x)?;
    let mut rel = vec![0.0; model.q];
    rel[output_index] = out[output_index];
    let mut rel = Rel::Flat(rel);

    for (layer, trace) in model.layers.iter().zip(&traces).rev() {
        rel = match (trace, rel) {
            (LayerTrace::Dense { input, pre }, Rel::Flat(r_out)) => {
                let weight = layer.param("weight").unwrap();
                let bias = layer.param("bias").unwrap().data();
                let (n_in, n_out) = (weight.shape()[0], weight.shape()[1]);
                let mut scale = vec![0.0; n_out];
                for k in 0..n_out {
                    if r_out[k] != 0.0 {
                        let raw = pre[k] - bias[k];
                        check_denominator(raw, r_out[k], "a dense layer")?;
                        scale[k] = r_out[k] / stabilize(raw);
                    }
                }
                let mut r_in = vec![0.0; n_in];
                let w = weight.data();
                for j in 0..n_in {
                    let a_j = input[j];
                    if a_j == 0.0 {
                        continue;
                    }
                    let row = &w[j * n_out..(j + 1) * n_out];
                    let mut acc = 0.0;
                    for (wv, s) in row.iter().zip(&scale) {
                        acc += wv * s;
                    }
                    r_in[j] = a_j * acc;
                }
                Rel::Flat(r_in)
            }
            (LayerTrace::FlattenSeq { steps, dim }, Rel::Flat(r)) => {
                let seq: Vec<Vec<f64>> = (0..*steps)
                    .map(|t| r[t * dim..(t + 1) * dim].to_vec())
                    .collect();
                Rel::Seq(seq)
            }
            (LayerTrace::FlattenImage { shape }, Rel::Flat(r)) => Rel::Image(r, *shape),
            (LayerTrace::Pool { in_shape, pool }, Rel::Image(r, _)) => {
                let (h, w, c) = *in_shape;
                let (ph, pw) = *pool;
                let (oh, ow) = (h / ph, w / pw);
                let share = 1.0 / (ph * pw) as f64;
                let mut r_in = vec![0.0; h * w * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let v = r[(oy * ow + ox) * c + ch] * share;
                            for dy in 0..ph {
                                for dx in 0..pw {
                                    r_in[((oy * ph + dy) * w + ox * pw + dx) * c + ch] += v;
                                }
                            }
                        }
                    }
                }
                Rel::Image(r_in, (h, w, c))
            }
            (LayerTrace::Conv { input, pre, dims }, Rel::Image(r_out, _)) => {
                let filters = layer.param("filters").unwrap().data();
                let bias = layer.param("bias").unwrap().data();
                let (h, w, cin, f) = (dims.h, dims.w, dims.cin, dims.filters);
                let (kh, kw) = (dims.kh, dims.kw);
                let (pt, pl) = (dims.pad_top() as isize, dims.pad_left() as isize);
                let mut r_in = vec![0.0; h * w * cin];
                for y in 0..h {
                    for xx in 0..w {
                        for fi in 0..f {
                            let rk = r_out[(y * w + xx) * f + fi];
                            if rk == 0.0 {
                                continue;
                            }
                            let raw = pre[(y * w + xx) * f + fi] - bias[fi];
                            check_denominator(raw, rk, "a convolution layer")?;
                            let scale = rk / stabilize(raw);
                            for dy in 0..kh {
                                let iy = y as isize + dy as isize - pt;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for dx in 0..kw {
                                    let ix = xx as isize + dx as isize - pl;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let base = ((iy as usize) * w + ix as usize) * cin;
                                    let wbase = ((fi * kh + dy) * kw + dx) * cin;
                                    for c in 0..cin {
                                        r_in[base + c] +=
                                            input[base + c] * filters[wbase + c] * scale;
                                    }
                                }
                            }
                        }
                    }
                }
                Rel::Image(r_in, (h, w, cin))
            }
            (LayerTrace::Gru(trace), Rel::Seq(r_seq)) => {
                let w_h = layer.param("w_h").unwrap();
                let u_h = layer.param("u_h").unwrap();
                let b_h = layer.param("b_h").unwrap().data();
                let steps = trace.inputs.len();
                let n_in = trace.inputs[0].len();
                let units = trace.h[0].len();
                let mut r_inputs = vec![vec![0.0; n_in]; steps];
                let mut carry = vec![0.0; units];
                for t in (0..steps).rev() {
                    // Relevance attached to h_t: from the layer above plus
                    // what flowed back from step t+1.
                    let mut r_h = r_seq[t].clone();
                    for (a, b) in r_h.iter_mut().zip(&carry) {
                        *a += b;
                    }
                    // Split h_t = (1-z) h_prev + z hh per unit.
                    let mut r_prev = vec![0.0; units];
                    let mut r_hh = vec![0.0; units];
                    for u in 0..units {
                        if r_h[u] == 0.0 {
                            continue;
                        }
                        let raw = trace.h[t][u];
                        check_denominator(raw, r_h[u], "a GRU state update")?;
                        let denom = stabilize(raw);
                        let c_prev = (1.0 - trace.z[t][u]) * trace.h_prev[t][u];
                        let c_hh = trace.z[t][u] * trace.hh[t][u];
                        r_prev[u] = c_prev / denom * r_h[u];
                        r_hh[u] = c_hh / denom * r_h[u];
                    }
                    // Candidate state: linear over [x_t ; r .* h_prev].
                    let mut scale = vec![0.0; units];
                    for k in 0..units {
                        if r_hh[k] != 0.0 {
                            let raw = trace.hh_pre[t][k] - b_h[k];
                            check_denominator(raw, r_hh[k], "a GRU candidate state")?;
                            scale[k] = r_hh[k] / stabilize(raw);
                        }
                    }
                    let wh = w_h.data();
                    for j in 0..n_in {
                        let a_j = trace.inputs[t][j];
                        if a_j == 0.0 {
                            continue;
                        }
                        let row = &wh[j * units..(j + 1) * units];
                        let mut acc = 0.0;
                        for (wv, s) in row.iter().zip(&scale) {
                            acc += wv * s;
                        }
                        r_inputs[t][j] = a_j * acc;
                    }
                    let uh = u_h.data();
                    for j in 0..units {
                        let a_j = trace.r[t][j] * trace.h_prev[t][j];
                        if a_j == 0.0 {
                            continue;
                        }
                        let row = &uh[j * units..(j + 1) * units];
                        let mut acc = 0.0;
                        for (wv, s) in row.iter().zip(&scale) {
                            acc += wv * s;
                        }
                        // The reset gate is a constant multiplier here, so
                        // this relevance belongs to h_prev.
                        r_prev[j] += a_j * acc;
                    }
                    carry = r_prev;
                }
                Rel::Seq(r_inputs)
            }
            _ => {
                return Err(Error::InvalidArg(
                    "lrp: relevance stream does not match layer trace".into(),
                ))
            }
        };
    }

    let grid_permuted: Vec<f64> = match rel {
        Rel::Seq(seq) => seq.into_iter().flatten().collect(),
        Rel::Image(img, (_, _, 1)) => img,
        Rel::Image(..) => {
            return Err(Error::InvalidArg(
                "lrp: input relevance has more than one channel".into(),
            ))
        }
        Rel::Flat(_) => {
            return Err(Error::InvalidArg(
                "lrp: relevance never reached the input grid".into(),
            ))
        }
    };
    // Undo the model's input column permutation.
    let mut grid = vec![0.0; model.p * model.m];
    match &model.feature_order {
        None => grid.copy_from_slice(&grid_permuted),
        Some(order) => {
            for t in 0..model.p {
                for (k, &c) in order.iter().enumerate() {
                    grid[t * model.m + c] = grid_permuted[t * model.m + k];
                }
            }
        }
    }
    Tensor::new(vec![model.p, model.m], grid)
}

/// Sum of an LRP grid; conservation checks compare this against the
/// model output.
pub fn total_relevance(grid: &Tensor) -> f64 {
    grid.data().iter().sum()
}

/// Per-output aggregated attribution over a dataset: per-sample maps
/// (computed in parallel), squared-averaged in sample order.
pub fn dataset_attribution(
    model: &ModelGraph,
    ds: &WindowedDataset,
    method: Method,
    opts: &XaiOptions,
) -> Result<Vec<AttributionMap>> {
    if ds.is_empty() {
        return Err(Error::InvalidData("dataset_attribution: empty dataset".into()));
    }
    let idxs: Vec<usize> = (0..ds.len()).step_by(opts.stride.max(1)).collect();
    let mut out = Vec::with_capacity(model.q);
    for i in 0..model.q {
        let maps = exec::par_map(idxs.clone(), |n| -> Result<Tensor> {
            let x = ds.sample_x(n);
            match method {
                Method::Smoothgrad => smoothgrad(
                    model,
                    &x,
                    i,
                    opts.noise_samples,
                    opts.sigma_frac,
                    opts.seed.wrapping_add(n as u64),
                ),
                Method::Lrp => lrp(model, &x, i),
            }
        });
        let maps: Vec<Tensor> = maps.into_iter().collect::<Result<_>>()?;
        let grid = aggregate_maps(&maps)?;
        out.push(AttributionMap {
            method,
            output_index: i,
            grid,
            meta: AttributionMeta {
                arch: model.arch.name().to_string(),
                n_samples: idxs.len(),
                noise_samples: matches!(method, Method::Smoothgrad).then_some(opts.noise_samples),
                sigma: matches!(method, Method::Smoothgrad)
                    .then_some(opts.sigma_frac * INPUT_RANGE),
                input_columns: ds.input_columns.clone(),
                output_column: ds
                    .target_columns
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| format!("output{i}")),
            },
        });
    }
    Ok(out)
}

/// Write one CSV grid per map plus an index JSON; returns the CSV paths.
pub fn write_heatmaps(dir: &Path, maps: &[AttributionMap]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(maps.len());
    let mut index = Vec::with_capacity(maps.len());
    for map in maps {
        let name = format!("heatmap_{}_{}.csv", map.method.name(), map.meta.output_column);
        let path = dir.join(&name);
        let mut text = String::new();
        text.push_str("time_index,");
        text.push_str(&map.meta.input_columns.join(","));
        text.push('\n');
        for t in 0..map.grid.shape()[0] {
            text.push_str(&t.to_string());
            for c in 0..map.grid.shape()[1] {
                text.push_str(&format!(",{:.9e}", map.grid.at2(t, c)));
            }
            text.push('\n');
        }
        std::fs::write(&path, text)?;
        index.push(serde_json::json!({
            "file": name,
            "method": map.method,
            "output_index": map.output_index,
            "meta": map.meta,
        }));
        paths.push(path);
    }
    std::fs::write(
        dir.join("heatmaps.json"),
        serde_json::to_string_pretty(&serde_json::Value::Array(index))?,
    )?;
    Ok(paths)
}
