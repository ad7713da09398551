//! Forward passes for the seven architectures.
//!
//! Inputs are `[batch, window, channels]`. Recurrent models read steps in
//! time order and feed the final hidden state to a linear head; the
//! convolutional variants are described on their builders below.

use super::params::{pooled_len, ParamVars};
use super::spec::{Architecture, ModelSpec, Task};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub(crate) fn build(spec: &ModelSpec, g: &mut Graph, p: &ParamVars, x: Var) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 || shape[1] != spec.window || shape[2] != spec.channels {
        return Err(Error::shape(
            "forward",
            format!("{} expects [batch, {}, {}], got {:?}", spec.architecture, spec.window, spec.channels, shape),
        ));
    }
    let batch = shape[0];
    let features = match spec.architecture {
        Architecture::Lstm | Architecture::StackedLstm => {
            let mut seq = time_steps(g, x, spec.window)?;
            for layer in 0..spec.layers {
                seq = lstm(g, p, &format!("lstm{layer}"), &seq, batch, spec.hidden)?;
            }
            *seq.last().expect("window >= 2")
        }
        Architecture::Gru => {
            let seq = time_steps(g, x, spec.window)?;
            gru(g, p, &seq, batch, spec.hidden)?
        }
        Architecture::Rnn => {
            let seq = time_steps(g, x, spec.window)?;
            rnn(g, p, &seq, batch, spec.hidden)?
        }
        Architecture::Cnn => cnn(g, p, spec, x, batch)?,
        Architecture::CnnLstm => cnn_lstm(g, p, spec, x, batch)?,
        Architecture::ConvLstm => conv_lstm(g, p, spec, x, batch)?,
    };
    let w = p.get("head.weight")?;
    let b = p.get("head.bias")?;
    let z = g.matmul(features, w)?;
    let out = g.add(z, b)?;
    match spec.task {
        Task::Regression => Ok(out),
        Task::Classification => g.sigmoid(out),
    }
}

/// Split `[B, T, C]` into `T` tensors of shape `[B, C]`.
fn time_steps(g: &mut Graph, x: Var, steps: usize) -> Result<Vec<Var>> {
    let shape = g.value(x).shape().to_vec();
    (0..steps)
        .map(|t| {
            let s = g.slice(x, 1, t, 1)?;
            g.reshape(s, &[shape[0], shape[2]])
        })
        .collect()
}

struct Gates {
    input: Var,
    forget: Var,
    cell: Var,
    output: Var,
}

/// Slice a pre-activation block `[.., 4h]` along `axis` into LSTM gates
/// (input, forget, candidate, output).
fn lstm_gates(g: &mut Graph, z: Var, axis: usize, h: usize) -> Result<Gates> {
    let zi = g.slice(z, axis, 0, h)?;
    let zf = g.slice(z, axis, h, h)?;
    let zg = g.slice(z, axis, 2 * h, h)?;
    let zo = g.slice(z, axis, 3 * h, h)?;
    Ok(Gates { input: g.sigmoid(zi)?, forget: g.sigmoid(zf)?, cell: g.tanh(zg)?, output: g.sigmoid(zo)? })
}

/// `c' = f*c + i*g`, `h' = o*tanh(c')`
fn lstm_update(g: &mut Graph, gates: &Gates, c: Var) -> Result<(Var, Var)> {
    let keep = g.mul(gates.forget, c)?;
    let write = g.mul(gates.input, gates.cell)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(gates.output, tc)?;
    Ok((h, c))
}

fn lstm(g: &mut Graph, p: &ParamVars, prefix: &str, seq: &[Var], batch: usize, hidden: usize) -> Result<Vec<Var>> {
    let w_ih = p.get(&format!("{prefix}.w_ih"))?;
    let w_hh = p.get(&format!("{prefix}.w_hh"))?;
    let bias = p.get(&format!("{prefix}.bias"))?;
    let mut h = g.constant(Tensor::zeros(&[batch, hidden]));
    let mut c = g.constant(Tensor::zeros(&[batch, hidden]));
    let mut out = Vec::with_capacity(seq.len());
    for &xt in seq {
        let a = g.matmul(xt, w_ih)?;
        let r = g.matmul(h, w_hh)?;
        let z = g.add(a, r)?;
        let z = g.add(z, bias)?;
        let gates = lstm_gates(g, z, 1, hidden)?;
        (h, c) = lstm_update(g, &gates, c)?;
        out.push(h);
    }
    Ok(out)
}

/// GRU with the reset gate applied after the recurrent product:
/// `n = tanh(x W_n + b_n + r * (h U_n))`, `h' = n + z * (h - n)`.
fn gru(g: &mut Graph, p: &ParamVars, seq: &[Var], batch: usize, hidden: usize) -> Result<Var> {
    let w_ih = p.get("gru.w_ih")?;
    let w_hh = p.get("gru.w_hh")?;
    let bias = p.get("gru.bias")?;
    let mut h = g.constant(Tensor::zeros(&[batch, hidden]));
    for &xt in seq {
        let a = g.matmul(xt, w_ih)?;
        let a = g.add(a, bias)?;
        let r = g.matmul(h, w_hh)?;
        let (az, ar, an) =
            (g.slice(a, 1, 0, hidden)?, g.slice(a, 1, hidden, hidden)?, g.slice(a, 1, 2 * hidden, hidden)?);
        let (rz, rr, rn) =
            (g.slice(r, 1, 0, hidden)?, g.slice(r, 1, hidden, hidden)?, g.slice(r, 1, 2 * hidden, hidden)?);
        let z = g.add(az, rz)?;
        let z = g.sigmoid(z)?;
        let reset = g.add(ar, rr)?;
        let reset = g.sigmoid(reset)?;
        let gated = g.mul(reset, rn)?;
        let n = g.add(an, gated)?;
        let n = g.tanh(n)?;
        let diff = g.sub(h, n)?;
        let carry = g.mul(z, diff)?;
        h = g.add(n, carry)?;
    }
    Ok(h)
}

/// Elman RNN: `h' = tanh(x W + h U + b)`.
fn rnn(g: &mut Graph, p: &ParamVars, seq: &[Var], batch: usize, hidden: usize) -> Result<Var> {
    let w_ih = p.get("rnn.w_ih")?;
    let w_hh = p.get("rnn.w_hh")?;
    let bias = p.get("rnn.bias")?;
    let mut h = g.constant(Tensor::zeros(&[batch, hidden]));
    for &xt in seq {
        let a = g.matmul(xt, w_ih)?;
        let r = g.matmul(h, w_hh)?;
        let z = g.add(a, r)?;
        let z = g.add(z, bias)?;
        h = g.tanh(z)?;
    }
    Ok(h)
}

/// `conv(kernel) -> relu -> max_pool(2)` over `[n, len, c]`, flattened to
/// `[n, pooled * filters]`.
fn conv_block(g: &mut Graph, p: &ParamVars, x: Var, n: usize, len: usize, spec: &ModelSpec) -> Result<Var> {
    let w = p.get("conv.weight")?;
    let b = p.get("conv.bias")?;
    let y = g.conv1d(x, w)?;
    let y = g.add(y, b)?;
    let y = g.relu(y)?;
    let y = g.max_pool1d(y, 2)?;
    g.reshape(y, &[n, pooled_len(len, spec.kernel) * spec.filters])
}

fn cnn(g: &mut Graph, p: &ParamVars, spec: &ModelSpec, x: Var, batch: usize) -> Result<Var> {
    conv_block(g, p, x, batch, spec.window, spec)
}

/// Fit the window to `subsequences * subsequence_len` steps: keep the most
/// recent steps when the window is longer, repeat the first step at the
/// front when it is shorter.
fn align_window(g: &mut Graph, spec: &ModelSpec, x: Var) -> Result<Var> {
    let need = spec.aligned_len();
    let t = spec.window;
    if t == need {
        Ok(x)
    } else if t > need {
        g.slice(x, 1, t - need, need)
    } else {
        let first = g.slice(x, 1, 0, 1)?;
        let mut parts = vec![first; need - t];
        parts.push(x);
        g.concat(&parts, 1)
    }
}

/// Shared conv block over each subsequence, then an LSTM over the
/// per-subsequence feature vectors.
fn cnn_lstm(g: &mut Graph, p: &ParamVars, spec: &ModelSpec, x: Var, batch: usize) -> Result<Var> {
    let (s, l) = (spec.subsequences, spec.subsequence_len);
    let aligned = align_window(g, spec, x)?;
    let blocks = g.reshape(aligned, &[batch * s, l, spec.channels])?;
    let feats = conv_block(g, p, blocks, batch * s, l, spec)?;
    let width = pooled_len(l, spec.kernel) * spec.filters;
    let feats = g.reshape(feats, &[batch, s, width])?;
    let seq = (0..s)
        .map(|i| {
            let f = g.slice(feats, 1, i, 1)?;
            g.reshape(f, &[batch, width])
        })
        .collect::<Result<Vec<_>>>()?;
    let hs = lstm(g, p, "lstm0", &seq, batch, spec.hidden)?;
    Ok(*hs.last().expect("at least one subsequence"))
}

/// LSTM over subsequences whose state is a `[columns, hidden]` map per
/// sample. The input transform is a valid convolution over the subsequence
/// axis; the recurrent transform is a zero-padded ("same") convolution of
/// the hidden map.
fn conv_lstm(g: &mut Graph, p: &ParamVars, spec: &ModelSpec, x: Var, batch: usize) -> Result<Var> {
    let (s, l, k, h) = (spec.subsequences, spec.subsequence_len, spec.kernel, spec.hidden);
    let cols = l + 1 - k;
    let pad = (k - 1) / 2;
    let w_x = p.get("convlstm.w_x")?;
    let w_h = p.get("convlstm.w_h")?;
    let bias = p.get("convlstm.bias")?;
    let aligned = align_window(g, spec, x)?;

    let mut hidden = g.constant(Tensor::zeros(&[batch, cols, h]));
    let mut cell = g.constant(Tensor::zeros(&[batch, cols, h]));
    let zeros = (pad > 0).then(|| g.constant(Tensor::zeros(&[batch, pad, h])));
    for i in 0..s {
        let xs = g.slice(aligned, 1, i * l, l)?;
        let a = g.conv1d(xs, w_x)?;
        let padded = match zeros {
            Some(z) => g.concat(&[z, hidden, z], 1)?,
            None => hidden,
        };
        let r = g.conv1d(padded, w_h)?;
        let z = g.add(a, r)?;
        let z = g.add(z, bias)?;
        let gates = lstm_gates(g, z, 2, h)?;
        (hidden, cell) = lstm_update(g, &gates, cell)?;
    }
    g.reshape(hidden, &[batch, cols * h])
}
