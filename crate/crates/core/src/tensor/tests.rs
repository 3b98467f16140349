use super::*;
use crate::error::Error;

/// Central finite differences over a scalar-valued function of flat
/// parameter vectors. Independent of the tape backward path.
pub fn finite_diff_grads(
    f: &dyn Fn(&[Vec<f64>]) -> f64,
    params: &[Vec<f64>],
    step: f64,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let mut plus = params.to_vec();
            plus[p][i] += step;
            let mut minus = params.to_vec();
            minus[p][i] -= step;
            g[i] = (f(&plus) - f(&minus)) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Naive quadruple-loop same-padding convolution, the reference the
/// im2col path is checked against.
pub fn conv2d_same_naive(
    input: &[f64],
    filters: &[f64],
    bias: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    f: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let pad_top = (kh - 1) / 2;
    let pad_left = (kw - 1) / 2;
    let mut out = vec![0.0; h * w * f];
    for y in 0..h {
        for x in 0..w {
            for fi in 0..f {
                let mut acc = bias[fi];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let iy = y as isize + dy as isize - pad_top as isize;
                        let ix = x as isize + dx as isize - pad_left as isize;
                        if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                            continue;
                        }
                        for c in 0..cin {
                            let iv = input[((iy as usize) * w + ix as usize) * cin + c];
                            let wv = filters[((fi * kh + dy) * kw + dx) * cin + c];
                            acc += iv * wv;
                        }
                    }
                }
                out[(y * w + x) * f + fi] = acc;
            }
        }
    }
    out
}

fn lcg(seed: &mut u64) -> f64 {
    // Small deterministic generator for test data; values in (-1, 1).
    *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
}

fn random_vec(n: usize, seed: &mut u64) -> Vec<f64> {
    (0..n).map(|_| lcg(seed)).collect()
}

#[test]
fn trivial_forward_values() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    let t = tape.tanh(x).unwrap();
    assert_eq!(tape.value(t).item(), 0.0);
    let s = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(s).item(), 0.5);

    // matmul(I3, A) == A for 3xk A
    let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let a = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
    let i3 = tape.leaf(eye);
    let av = tape.leaf(a.clone());
    let prod = tape.matmul(i3, av).unwrap();
    assert_eq!(tape.value(prod), &a);
}

#[test]
fn matmul_shape_mismatch_names_op() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(vec![2, 3]));
    let b = tape.leaf(Tensor::zeros(vec![4, 2]));
    match tape.matmul(a, b) {
        Err(Error::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn linear_map_gradient_is_input_broadcast() {
    // loss = sum(W x): dL/dW[i][j] = x[j] for every row i.
    let mut tape = Tape::new();
    let w = tape.param(Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1]).unwrap());
    let x = tape.leaf(Tensor::new(vec![2, 1], vec![4.0, -2.0]).unwrap());
    let y = tape.matmul(w, x).unwrap();
    let loss = tape.sum(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    let gw = grads.get(w).unwrap();
    assert_eq!(gw.data(), &[4.0, -2.0, 4.0, -2.0, 4.0, -2.0]);
}

#[test]
fn quadratic_gradient() {
    // loss = mean((y - t)^2): dL/dy = 2 (y - t) / n.
    let mut tape = Tape::new();
    let y = tape.param(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let t = tape.leaf(Tensor::new(vec![1, 4], vec![0.0, 1.0, 5.0, 4.0]).unwrap());
    let d = tape.sub(y, t).unwrap();
    let sq = tape.mul(d, d).unwrap();
    let loss = tape.mean(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    let gy = grads.get(y).unwrap();
    let expected = [0.5, 0.5, -1.0, 0.0];
    for (a, b) in gy.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn conv_matches_naive_loop_reference() {
    // random 5x5x1 input, 3x3 kernels vs the quadruple loop, 1e-12.
    let mut seed = 42u64;
    for f in [1usize, 3] {
        let input = random_vec(25, &mut seed);
        let filters = random_vec(f * 9, &mut seed);
        let bias = random_vec(f, &mut seed);
        let reference = conv2d_same_naive(&input, &filters, &bias, 5, 5, 1, f, 3, 3);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![5, 5, 1], input).unwrap());
        let w = tape.leaf(Tensor::new(vec![f, 3, 3, 1], filters).unwrap());
        let b = tape.leaf(Tensor::new(vec![f], bias).unwrap());
        let out = tape.conv2d_same(x, w, b).unwrap();
        assert_eq!(tape.value(out).shape(), &[5, 5, f]);
        for (a, r) in tape.value(out).data().iter().zip(&reference) {
            assert!((a - r).abs() < 1e-12, "{a} vs {r}");
        }
    }
}

#[test]
fn conv_kernel_taller_than_input() {
    // kh=16 over h=10 works via zero padding; trivial 1x1 checks too.
    let mut seed = 7u64;
    let input = random_vec(10 * 5, &mut seed);
    let filters = random_vec(4 * 16 * 3, &mut seed);
    let bias = random_vec(4, &mut seed);
    let reference = conv2d_same_naive(&input, &filters, &bias, 10, 5, 1, 4, 16, 3);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![10, 5, 1], input).unwrap());
    let w = tape.leaf(Tensor::new(vec![4, 16, 3, 1], filters).unwrap());
    let b = tape.leaf(Tensor::new(vec![4], bias).unwrap());
    let out = tape.conv2d_same(x, w, b).unwrap();
    for (a, r) in tape.value(out).data().iter().zip(&reference) {
        assert!((a - r).abs() < 1e-12);
    }

    // 1x1 input, 1x1 filter w, bias b -> w*x + b
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap());
    let w = tape.leaf(Tensor::new(vec![1, 1, 1, 1], vec![2.5]).unwrap());
    let b = tape.leaf(Tensor::new(vec![1], vec![-0.5]).unwrap());
    let out = tape.conv2d_same(x, w, b).unwrap();
    assert_eq!(tape.value(out).item(), 3.0 * 2.5 - 0.5);

    // all-zero filters, bias b -> constant map b
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![4, 2, 1], random_vec(8, &mut seed)).unwrap());
    let w = tape.leaf(Tensor::zeros(vec![2, 3, 3, 1]));
    let b = tape.leaf(Tensor::new(vec![2], vec![1.25, -2.0]).unwrap());
    let out = tape.conv2d_same(x, w, b).unwrap();
    for row in tape.value(out).data().chunks(2) {
        assert_eq!(row, &[1.25, -2.0]);
    }
}

#[test]
fn pool_output_heights() {
    // h=10 pool [2,1] -> 5; h=15 -> 7; constant input stays constant.
    for (h, expect) in [(10usize, 5usize), (15, 7)] {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(vec![h, 5, 2], 3.25));
        let out = tape.avgpool2d(x, (2, 1)).unwrap();
        assert_eq!(tape.value(out).shape(), &[expect, 5, 2]);
        assert!(tape.value(out).data().iter().all(|&v| v == 3.25));
    }
}

#[test]
fn batched_ops_match_per_sample() {
    let mut seed = 99u64;
    let b = 3;
    let sample: Vec<Vec<f64>> = (0..b).map(|_| random_vec(6 * 4 * 2, &mut seed)).collect();
    let filters = random_vec(5 * 3 * 3 * 2, &mut seed);
    let bias = random_vec(5, &mut seed);

    let mut batched = Vec::new();
    for s in &sample {
        batched.extend_from_slice(s);
    }
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![b, 6, 4, 2], batched).unwrap());
    let w = tape.leaf(Tensor::new(vec![5, 3, 3, 2], filters.clone()).unwrap());
    let bi = tape.leaf(Tensor::new(vec![5], bias.clone()).unwrap());
    let out = tape.conv2d_same(x, w, bi).unwrap();
    let pooled = tape.avgpool2d(out, (2, 1)).unwrap();
    assert_eq!(tape.value(pooled).shape(), &[b, 3, 4, 5]);

    for (i, s) in sample.iter().enumerate() {
        let mut t2 = Tape::new();
        let x2 = t2.leaf(Tensor::new(vec![6, 4, 2], s.clone()).unwrap());
        let w2 = t2.leaf(Tensor::new(vec![5, 3, 3, 2], filters.clone()).unwrap());
        let b2 = t2.leaf(Tensor::new(vec![5], bias.clone()).unwrap());
        let o2 = t2.conv2d_same(x2, w2, b2).unwrap();
        let p2 = t2.avgpool2d(o2, (2, 1)).unwrap();
        let chunk = 3 * 4 * 5;
        assert_eq!(
            &tape.value(pooled).data()[i * chunk..(i + 1) * chunk],
            t2.value(p2).data()
        );
    }
}

#[test]
fn gradients_match_finite_differences_per_op() {
    // One composite graph touching matmul/add/sub/mul/sigmoid/tanh/
    // leaky_relu/concat/slice/reshape/sum; conv and pool are covered by
    // their own test below.
    let mut seed = 2024u64;
    let w_data = random_vec(6, &mut seed);
    let b_data = random_vec(3, &mut seed);
    let v_data = random_vec(6, &mut seed);

    let build = |params: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![2, 3], params[0].clone()).unwrap());
        let b = tape.param(Tensor::new(vec![3], params[1].clone()).unwrap());
        let v = tape.param(Tensor::new(vec![2, 3], params[2].clone()).unwrap());
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![0.3, -0.8, 1.2, 0.4]).unwrap());
        let h = tape.matmul(x, w).unwrap();
        let h = tape.add(h, b).unwrap();
        let s = tape.sigmoid(h).unwrap();
        let t = tape.tanh(h).unwrap();
        let lr = tape.leaky_relu(v, 0.01).unwrap();
        let c = tape.concat(&[s, t, lr], 1).unwrap();
        let sl = tape.slice(c, 1, 2, 5).unwrap();
        let r = tape.reshape(sl, vec![10]).unwrap();
        let d = tape.sub(r, r).unwrap(); // zero, keeps sub on the path
        let m = tape.mul(r, r).unwrap();
        let a = tape.add(m, d).unwrap();
        let loss = tape.sum(a).unwrap();
        tape.value(loss).item()
    };

    let params = vec![w_data.clone(), b_data.clone(), v_data.clone()];
    let fd = finite_diff_grads(&build, &params, 1e-5);

    let mut tape = Tape::new();
    let w = tape.param(Tensor::new(vec![2, 3], w_data).unwrap());
    let b = tape.param(Tensor::new(vec![3], b_data).unwrap());
    let v = tape.param(Tensor::new(vec![2, 3], v_data).unwrap());
    let x = tape.leaf(Tensor::new(vec![2, 2], vec![0.3, -0.8, 1.2, 0.4]).unwrap());
    let h = tape.matmul(x, w).unwrap();
    let h = tape.add(h, b).unwrap();
    let s = tape.sigmoid(h).unwrap();
    let t = tape.tanh(h).unwrap();
    let lr = tape.leaky_relu(v, 0.01).unwrap();
    let c = tape.concat(&[s, t, lr], 1).unwrap();
    let sl = tape.slice(c, 1, 2, 5).unwrap();
    let r = tape.reshape(sl, vec![10]).unwrap();
    let d = tape.sub(r, r).unwrap();
    let m = tape.mul(r, r).unwrap();
    let a = tape.add(m, d).unwrap();
    let loss = tape.sum(a).unwrap();
    let grads = tape.backward(loss).unwrap();

    for (id, fd_g) in [(w, &fd[0]), (b, &fd[1]), (v, &fd[2])] {
        let g = grads.get(id).unwrap();
        for (a, b) in g.data().iter().zip(fd_g) {
            assert!(rel_err(*a, *b) < 1e-4, "analytic {a} vs fd {b}");
        }
    }
}

#[test]
fn conv_pool_gradients_match_finite_differences() {
    let mut seed = 5u64;
    let input = random_vec(6 * 3 * 2, &mut seed);
    let filters = random_vec(4 * 3 * 3 * 2, &mut seed);
    let bias = random_vec(4, &mut seed);

    let run = |params: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![6, 3, 2], params[0].clone()).unwrap());
        let w = tape.param(Tensor::new(vec![4, 3, 3, 2], params[1].clone()).unwrap());
        let b = tape.param(Tensor::new(vec![4], params[2].clone()).unwrap());
        let c = tape.conv2d_same(x, w, b).unwrap();
        let lr = tape.leaky_relu(c, 0.01).unwrap();
        let p = tape.avgpool2d(lr, (2, 1)).unwrap();
        let loss = tape.mean(p).unwrap();
        tape.value(loss).item()
    };

    let params = vec![input.clone(), filters.clone(), bias.clone()];
    let fd = finite_diff_grads(&run, &params, 1e-5);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![6, 3, 2], input).unwrap());
    let w = tape.param(Tensor::new(vec![4, 3, 3, 2], filters).unwrap());
    let b = tape.param(Tensor::new(vec![4], bias).unwrap());
    let c = tape.conv2d_same(x, w, b).unwrap();
    let lr = tape.leaky_relu(c, 0.01).unwrap();
    let p = tape.avgpool2d(lr, (2, 1)).unwrap();
    let loss = tape.mean(p).unwrap();
    let grads = tape.backward(loss).unwrap();

    for (i, id) in [x, w, b].into_iter().enumerate() {
        let g = grads.get(id).unwrap();
        for (a, b) in g.data().iter().zip(&fd[i]) {
            assert!(rel_err(*a, *b) < 1e-4, "param {i}: analytic {a} vs fd {b}");
        }
    }
}

#[test]
fn replay_is_bit_identical() {
    let mut seed = 11u64;
    let w_data = random_vec(20, &mut seed);
    let x_data = random_vec(8, &mut seed);
    let run = || {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![4, 5], w_data.clone()).unwrap());
        let x = tape.leaf(Tensor::new(vec![2, 4], x_data.clone()).unwrap());
        let h = tape.matmul(x, w).unwrap();
        let t = tape.tanh(h).unwrap();
        let loss = tape.mean(t).unwrap();
        let grads = tape.backward(loss).unwrap();
        (
            tape.value(loss).item(),
            grads.get(w).unwrap().data().to_vec(),
        )
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}

#[test]
fn nan_is_reported_with_op_name() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::new(vec![2], vec![1.0e308, 1.0]).unwrap());
    let b = tape.leaf(Tensor::new(vec![2], vec![1.0e308, 1.0]).unwrap());
    match tape.add(a, b) {
        Err(Error::NonFinite { op, .. }) => assert_eq!(op, "add"),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn backward_rejects_detached_and_nonscalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(1.0));
    let y = tape.tanh(x).unwrap();
    assert!(tape.backward(y).is_err(), "detached loss must error");

    let p = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let s = tape.sigmoid(p).unwrap();
    assert!(tape.backward(s).is_err(), "non-scalar loss must error");
}
