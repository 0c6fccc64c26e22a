//! Forward and backward passes.
//!
//! Activations are stored batch-major as flat `f64` buffers. Dense layers and
//! convolutions (via im2col) run on `matrixmultiply::dgemm`.

use rand::Rng;

use super::{ArchitectureConfig, NnError, ParamSet};
use crate::dataset::{IMAGE_SIDE, NUM_CLASSES, PIXELS};

#[derive(Debug, Clone)]
enum Op {
    Conv {
        name: &'static str,
        w: usize,
        b: usize,
        in_c: usize,
        out_c: usize,
        k: usize,
        in_side: usize,
    },
    MaxPool {
        name: &'static str,
        c: usize,
        in_side: usize,
    },
    Relu {
        name: &'static str,
    },
    Dropout {
        name: &'static str,
        rate: f64,
    },
    /// Zeroes whole channels.
    Dropout2d {
        name: &'static str,
        rate: f64,
        c: usize,
        spatial: usize,
    },
    Dense {
        name: &'static str,
        w: usize,
        b: usize,
        inp: usize,
        out: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Conv { name, .. }
            | Op::MaxPool { name, .. }
            | Op::Relu { name }
            | Op::Dropout { name, .. }
            | Op::Dropout2d { name, .. }
            | Op::Dense { name, .. } => name,
        }
    }
}

fn plan(arch: &ArchitectureConfig) -> Vec<Op> {
    match *arch {
        ArchitectureConfig::Cnn(c) => {
            let s1 = IMAGE_SIDE - c.kernel + 1;
            let p1 = s1 / 2;
            let s2 = p1 - c.kernel + 1;
            let p2 = s2 / 2;
            vec![
                Op::Conv {
                    name: "conv1",
                    w: 0,
                    b: 1,
                    in_c: 1,
                    out_c: c.conv1_channels,
                    k: c.kernel,
                    in_side: IMAGE_SIDE,
                },
                Op::MaxPool {
                    name: "pool1",
                    c: c.conv1_channels,
                    in_side: s1,
                },
                Op::Relu { name: "relu1" },
                Op::Conv {
                    name: "conv2",
                    w: 2,
                    b: 3,
                    in_c: c.conv1_channels,
                    out_c: c.conv2_channels,
                    k: c.kernel,
                    in_side: p1,
                },
                Op::Dropout2d {
                    name: "dropout2d",
                    rate: c.conv_dropout,
                    c: c.conv2_channels,
                    spatial: s2 * s2,
                },
                Op::MaxPool {
                    name: "pool2",
                    c: c.conv2_channels,
                    in_side: s2,
                },
                Op::Relu { name: "relu2" },
                Op::Dense {
                    name: "fc1",
                    w: 4,
                    b: 5,
                    inp: c.conv2_channels * p2 * p2,
                    out: c.fc1_units,
                },
                Op::Relu { name: "relu3" },
                Op::Dropout {
                    name: "dropout",
                    rate: c.fc_dropout,
                },
                Op::Dense {
                    name: "fc2",
                    w: 6,
                    b: 7,
                    inp: c.fc1_units,
                    out: NUM_CLASSES,
                },
            ]
        }
        ArchitectureConfig::Mlp(m) => vec![
            Op::Dense {
                name: "fc1",
                w: 0,
                b: 1,
                inp: PIXELS,
                out: m.hidden_units,
            },
            Op::Relu { name: "relu1" },
            Op::Dropout {
                name: "dropout",
                rate: m.dropout,
            },
            Op::Dense {
                name: "fc2",
                w: 2,
                b: 3,
                inp: m.hidden_units,
                out: NUM_CLASSES,
            },
        ],
    }
}

/// What backward needs from each forward op.
enum Cache {
    Conv { cols: Vec<f64> },
    MaxPool { argmax: Vec<u32> },
    Relu { out: Vec<f64> },
    Mask { mask: Vec<f64> },
    Identity,
    Dense { input: Vec<f64> },
}

/// `c[m x n] = a[m x k] * b[k x n] + beta * c`, all with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa + k.saturating_sub(1) * csa + usize::from(k > 0));
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the slices cover every index addressed by the given shapes and
    // strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn im2col(x: &[f64], in_c: usize, side: usize, k: usize, cols: &mut [f64]) {
    let os = side - k + 1;
    let p = os * os;
    for c in 0..in_c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..os {
                    let src = &x[c * side * side + (oy + ki) * side + kj..];
                    dst[oy * os..(oy + 1) * os].copy_from_slice(&src[..os]);
                }
            }
        }
    }
}

fn col2im(cols: &[f64], in_c: usize, side: usize, k: usize, dx: &mut [f64]) {
    let os = side - k + 1;
    let p = os * os;
    for c in 0..in_c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..os {
                    let dst = &mut dx[c * side * side + (oy + ki) * side + kj..];
                    for ox in 0..os {
                        dst[ox] += src[oy * os + ox];
                    }
                }
            }
        }
    }
}

fn check_finite(name: &str, values: &[f64]) -> Result<(), NnError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NnError::Numeric {
            layer: name.to_string(),
        })
    }
}

fn forward_op<R: Rng + ?Sized>(
    op: &Op,
    p: &ParamSet,
    x: Vec<f64>,
    batch: usize,
    train: bool,
    rng: &mut R,
    keep_cache: bool,
) -> (Vec<f64>, Cache) {
    match *op {
        Op::Conv {
            w,
            b,
            in_c,
            out_c,
            k,
            in_side,
            ..
        } => {
            let os = in_side - k + 1;
            let pp = os * os;
            let ckk = in_c * k * k;
            let in_len = in_c * in_side * in_side;
            let wt = &p.tensors[w].data;
            let bias = &p.tensors[b].data;
            let mut out = vec![0.0; batch * out_c * pp];
            let mut cols = vec![
                0.0;
                if keep_cache {
                    batch * ckk * pp
                } else {
                    ckk * pp
                }
            ];
            for s in 0..batch {
                let col = if keep_cache {
                    &mut cols[s * ckk * pp..(s + 1) * ckk * pp]
                } else {
                    &mut cols[..]
                };
                im2col(&x[s * in_len..(s + 1) * in_len], in_c, in_side, k, col);
                let o = &mut out[s * out_c * pp..(s + 1) * out_c * pp];
                for (oc, chunk) in o.chunks_mut(pp).enumerate() {
                    chunk.fill(bias[oc]);
                }
                gemm(out_c, ckk, pp, wt, (ckk, 1), col, (pp, 1), 1.0, o, (pp, 1));
            }
            (
                out,
                if keep_cache {
                    Cache::Conv { cols }
                } else {
                    Cache::Identity
                },
            )
        }
        Op::MaxPool { c, in_side, .. } => {
            let os = in_side / 2;
            let mut out = vec![0.0; batch * c * os * os];
            let mut argmax = vec![0u32; out.len()];
            for plane in 0..batch * c {
                let src = &x[plane * in_side * in_side..(plane + 1) * in_side * in_side];
                for oy in 0..os {
                    for ox in 0..os {
                        let mut best = (2 * oy) * in_side + 2 * ox;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = (2 * oy + dy) * in_side + 2 * ox + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                        let o = plane * os * os + oy * os + ox;
                        out[o] = src[best];
                        argmax[o] = best as u32;
                    }
                }
            }
            (out, Cache::MaxPool { argmax })
        }
        Op::Relu { .. } => {
            let mut out = x;
            for v in out.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            let cache = if keep_cache {
                Cache::Relu { out: out.clone() }
            } else {
                Cache::Identity
            };
            (out, cache)
        }
        Op::Dropout { rate, .. } => {
            if !train || rate == 0.0 {
                return (x, Cache::Identity);
            }
            let scale = 1.0 / (1.0 - rate);
            let mask: Vec<f64> = (0..x.len())
                .map(|_| {
                    if rng.random::<f64>() < rate {
                        0.0
                    } else {
                        scale
                    }
                })
                .collect();
            let out = x.iter().zip(&mask).map(|(a, m)| a * m).collect();
            (out, Cache::Mask { mask })
        }
        Op::Dropout2d {
            rate, c, spatial, ..
        } => {
            if !train || rate == 0.0 {
                return (x, Cache::Identity);
            }
            let scale = 1.0 / (1.0 - rate);
            let channel: Vec<f64> = (0..batch * c)
                .map(|_| {
                    if rng.random::<f64>() < rate {
                        0.0
                    } else {
                        scale
                    }
                })
                .collect();
            let mask: Vec<f64> = channel
                .iter()
                .flat_map(|&m| std::iter::repeat_n(m, spatial))
                .collect();
            let out = x.iter().zip(&mask).map(|(a, m)| a * m).collect();
            (out, Cache::Mask { mask })
        }
        Op::Dense {
            w,
            b,
            inp,
            out: units,
            ..
        } => {
            let wt = &p.tensors[w].data;
            let bias = &p.tensors[b].data;
            let mut out = Vec::with_capacity(batch * units);
            for _ in 0..batch {
                out.extend_from_slice(bias);
            }
            gemm(
                batch,
                inp,
                units,
                &x,
                (inp, 1),
                wt,
                (1, inp),
                1.0,
                &mut out,
                (units, 1),
            );
            (
                out,
                if keep_cache {
                    Cache::Dense { input: x }
                } else {
                    Cache::Identity
                },
            )
        }
    }
}

fn backward_op(
    op: &Op,
    cache: Cache,
    p: &ParamSet,
    grads: &mut ParamSet,
    dout: Vec<f64>,
    batch: usize,
    need_input_grad: bool,
) -> Vec<f64> {
    match (op, cache) {
        (
            &Op::Conv {
                w,
                b,
                in_c,
                out_c,
                k,
                in_side,
                ..
            },
            Cache::Conv { cols },
        ) => {
            let os = in_side - k + 1;
            let pp = os * os;
            let ckk = in_c * k * k;
            let in_len = in_c * in_side * in_side;
            let wt = &p.tensors[w].data;
            let mut dx = if need_input_grad {
                vec![0.0; batch * in_len]
            } else {
                Vec::new()
            };
            let mut dcol = vec![0.0; ckk * pp];
            for s in 0..batch {
                let col = &cols[s * ckk * pp..(s + 1) * ckk * pp];
                let d = &dout[s * out_c * pp..(s + 1) * out_c * pp];
                {
                    let db = &mut grads.tensors[b].data;
                    for (oc, chunk) in d.chunks(pp).enumerate() {
                        db[oc] += chunk.iter().sum::<f64>();
                    }
                }
                gemm(
                    out_c,
                    pp,
                    ckk,
                    d,
                    (pp, 1),
                    col,
                    (1, pp),
                    1.0,
                    &mut grads.tensors[w].data,
                    (ckk, 1),
                );
                if need_input_grad {
                    gemm(
                        ckk,
                        out_c,
                        pp,
                        wt,
                        (1, ckk),
                        d,
                        (pp, 1),
                        0.0,
                        &mut dcol,
                        (pp, 1),
                    );
                    col2im(
                        &dcol,
                        in_c,
                        in_side,
                        k,
                        &mut dx[s * in_len..(s + 1) * in_len],
                    );
                }
            }
            dx
        }
        (&Op::MaxPool { c, in_side, .. }, Cache::MaxPool { argmax }) => {
            let os = in_side / 2;
            let mut dx = vec![0.0; batch * c * in_side * in_side];
            for plane in 0..batch * c {
                for o in 0..os * os {
                    let g = plane * os * os + o;
                    dx[plane * in_side * in_side + argmax[g] as usize] += dout[g];
                }
            }
            dx
        }
        (Op::Relu { .. }, Cache::Relu { out }) => {
            let mut d = dout;
            for (g, &o) in d.iter_mut().zip(&out) {
                if o <= 0.0 {
                    *g = 0.0;
                }
            }
            d
        }
        (Op::Dropout { .. } | Op::Dropout2d { .. }, Cache::Mask { mask }) => {
            dout.iter().zip(&mask).map(|(g, m)| g * m).collect()
        }
        (Op::Dropout { .. } | Op::Dropout2d { .. }, Cache::Identity) => dout,
        (
            &Op::Dense {
                w,
                b,
                inp,
                out: units,
                ..
            },
            Cache::Dense { input },
        ) => {
            {
                let db = &mut grads.tensors[b].data;
                for row in dout.chunks(units) {
                    for (acc, g) in db.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
            }
            gemm(
                units,
                batch,
                inp,
                &dout,
                (1, units),
                &input,
                (inp, 1),
                1.0,
                &mut grads.tensors[w].data,
                (inp, 1),
            );
            if need_input_grad {
                let mut dx = vec![0.0; batch * inp];
                gemm(
                    batch,
                    units,
                    inp,
                    &dout,
                    (units, 1),
                    &p.tensors[w].data,
                    (inp, 1),
                    0.0,
                    &mut dx,
                    (inp, 1),
                );
                dx
            } else {
                Vec::new()
            }
        }
        _ => unreachable!("forward cache does not match layer"),
    }
}

fn batch_size(p: &ParamSet, inputs: &[f64]) -> Result<usize, NnError> {
    p.arch.validate()?;
    if !inputs.len().is_multiple_of(PIXELS) {
        return Err(NnError::Shape(format!(
            "input length {} is not a multiple of {PIXELS}",
            inputs.len()
        )));
    }
    Ok(inputs.len() / PIXELS)
}

/// Logits `[batch, 10]` for a batch of flattened 28x28 images.
///
/// Dropout is active only when `train_mode` is set.
pub fn forward<R: Rng + ?Sized>(
    p: &ParamSet,
    inputs: &[f64],
    train_mode: bool,
    rng: &mut R,
) -> Result<Vec<f64>, NnError> {
    let batch = batch_size(p, inputs)?;
    let mut x = inputs.to_vec();
    for op in plan(&p.arch) {
        let (out, _) = forward_op(&op, p, x, batch, train_mode, rng, false);
        check_finite(op.name(), &out)?;
        x = out;
    }
    Ok(x)
}

/// Dropout never draws in evaluation mode; this stream only satisfies the signature.
fn eval_rng() -> crate::rng::SimRng {
    rand::SeedableRng::seed_from_u64(0)
}

/// Class with the highest logit per sample; ties go to the lowest class id.
pub fn predict(p: &ParamSet, inputs: &[f64]) -> Result<Vec<u8>, NnError> {
    let mut no_rng = eval_rng();
    let logits = forward(p, inputs, false, &mut no_rng)?;
    Ok(logits
        .chunks(NUM_CLASSES)
        .map(|row| {
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}

/// Mean softmax cross-entropy over the batch and its gradient, computed in
/// training mode (dropout active).
pub fn loss_and_grad<R: Rng + ?Sized>(
    p: &ParamSet,
    inputs: &[f64],
    labels: &[u8],
    rng: &mut R,
) -> Result<(f64, ParamSet), NnError> {
    let batch = batch_size(p, inputs)?;
    if labels.len() != batch {
        return Err(NnError::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(NnError::Parameter(format!("label {bad} outside 0..10")));
    }
    if batch == 0 {
        return Err(NnError::Shape("empty batch".into()));
    }
    let ops = plan(&p.arch);
    let mut caches = Vec::with_capacity(ops.len());
    let mut x = inputs.to_vec();
    for op in &ops {
        let (out, cache) = forward_op(op, p, x, batch, true, rng, true);
        check_finite(op.name(), &out)?;
        caches.push(cache);
        x = out;
    }
    let (loss, dlogits) = softmax_cross_entropy(&x, labels);
    if !loss.is_finite() {
        return Err(NnError::Numeric {
            layer: "loss".into(),
        });
    }
    let mut grads = p.zeros_like();
    let mut d = dlogits;
    for (i, (op, cache)) in ops.iter().zip(caches).enumerate().rev() {
        d = backward_op(op, cache, p, &mut grads, d, batch, i > 0);
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(NnError::Numeric {
            layer: format!("gradient of {name}"),
        });
    }
    Ok((loss, grads))
}

/// Mean cross-entropy via log-sum-exp, plus d(loss)/d(logits).
pub(crate) fn softmax_cross_entropy(logits: &[f64], labels: &[u8]) -> (f64, Vec<f64>) {
    let batch = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (s, (row, &y)) in logits.chunks(NUM_CLASSES).zip(labels).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[y as usize];
        let g = &mut grad[s * NUM_CLASSES..(s + 1) * NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            g[c] = (row[c] - lse).exp() / batch as f64;
        }
        g[y as usize] -= 1.0 / batch as f64;
    }
    (total / batch as f64, grad)
}

/// Mean cross-entropy in evaluation mode (no dropout).
pub fn eval_loss(p: &ParamSet, inputs: &[f64], labels: &[u8]) -> Result<f64, NnError> {
    let mut no_rng = eval_rng();
    let logits = forward(p, inputs, false, &mut no_rng)?;
    let (loss, _) = softmax_cross_entropy(&logits, labels);
    if !loss.is_finite() {
        return Err(NnError::Numeric {
            layer: "loss".into(),
        });
    }
    Ok(loss)
}
