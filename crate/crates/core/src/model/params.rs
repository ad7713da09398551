use rand::Rng;

use super::spec::{Architecture, ModelSpec};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    Uniform {
        fan_in: usize,
    },
    Zeros,
    /// LSTM gate bias: zeros except the forget-gate block `[h, 2h)`, set to 1.
    LstmBias {
        hidden: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn decl(name: impl Into<String>, shape: &[usize], init: Init) -> ParamDecl {
    ParamDecl { name: name.into(), shape: shape.to_vec(), init }
}

fn dense(prefix: &str, input: usize, output: usize, out: &mut Vec<ParamDecl>) {
    out.push(decl(format!("{prefix}.w_ih"), &[input, output], Init::Uniform { fan_in: input }));
}

fn lstm_layer(prefix: &str, input: usize, h: usize, out: &mut Vec<ParamDecl>) {
    dense(prefix, input, 4 * h, out);
    out.push(decl(format!("{prefix}.w_hh"), &[h, 4 * h], Init::Uniform { fan_in: h }));
    out.push(decl(format!("{prefix}.bias"), &[4 * h], Init::LstmBias { hidden: h }));
}

/// Spatial length after `conv(kernel) -> max_pool(2)`.
pub(crate) fn pooled_len(len: usize, kernel: usize) -> usize {
    (len + 1 - kernel) / 2
}

/// Parameter tensors in declaration order.
pub(crate) fn layout(spec: &ModelSpec) -> Vec<ParamDecl> {
    let (c, h) = (spec.channels, spec.hidden);
    let mut out = Vec::new();
    let features = match spec.architecture {
        Architecture::Lstm | Architecture::StackedLstm => {
            for layer in 0..spec.layers {
                let input = if layer == 0 { c } else { h };
                lstm_layer(&format!("lstm{layer}"), input, h, &mut out);
            }
            h
        }
        Architecture::Gru => {
            dense("gru", c, 3 * h, &mut out);
            out.push(decl("gru.w_hh", &[h, 3 * h], Init::Uniform { fan_in: h }));
            out.push(decl("gru.bias", &[3 * h], Init::Zeros));
            h
        }
        Architecture::Rnn => {
            dense("rnn", c, h, &mut out);
            out.push(decl("rnn.w_hh", &[h, h], Init::Uniform { fan_in: h }));
            out.push(decl("rnn.bias", &[h], Init::Zeros));
            h
        }
        Architecture::Cnn => {
            let (k, f) = (spec.kernel, spec.filters);
            out.push(decl("conv.weight", &[k, c, f], Init::Uniform { fan_in: k * c }));
            out.push(decl("conv.bias", &[f], Init::Zeros));
            pooled_len(spec.window, k) * f
        }
        Architecture::CnnLstm => {
            let (k, f) = (spec.kernel, spec.filters);
            out.push(decl("conv.weight", &[k, c, f], Init::Uniform { fan_in: k * c }));
            out.push(decl("conv.bias", &[f], Init::Zeros));
            lstm_layer("lstm0", pooled_len(spec.subsequence_len, k) * f, h, &mut out);
            h
        }
        Architecture::ConvLstm => {
            let k = spec.kernel;
            out.push(decl("convlstm.w_x", &[k, c, 4 * h], Init::Uniform { fan_in: k * c }));
            out.push(decl("convlstm.w_h", &[k, h, 4 * h], Init::Uniform { fan_in: k * h }));
            out.push(decl("convlstm.bias", &[4 * h], Init::LstmBias { hidden: h }));
            (spec.subsequence_len + 1 - k) * h
        }
    };
    out.push(decl("head.weight", &[features, 1], Init::Uniform { fan_in: features }));
    out.push(decl("head.bias", &[1], Init::Zeros));
    out
}

/// Named parameter tensors of a model, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    /// Seeded initialization. Tensor `i` draws from stream `i` of a ChaCha8
    /// generator keyed by `spec.seed`.
    pub fn init(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let entries = layout(spec)
            .into_iter()
            .enumerate()
            .map(|(i, d)| {
                let n: usize = d.shape.iter().product();
                let data = match d.init {
                    Init::Zeros => vec![0.0; n],
                    Init::LstmBias { hidden } => {
                        (0..n).map(|j| if (hidden..2 * hidden).contains(&j) { 1.0 } else { 0.0 }).collect()
                    }
                    Init::Uniform { fan_in } => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        let mut rng = stream_rng(spec.seed, i as u64);
                        (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                    }
                };
                (d.name, Tensor::new(d.shape, data).expect("declared shape"))
            })
            .collect();
        Ok(Self { entries })
    }

    /// Every tensor of the layout filled with zeros.
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let entries = layout(spec)
            .into_iter()
            .map(|d| {
                let t = Tensor::zeros(&d.shape);
                (d.name, t)
            })
            .collect();
        Ok(Self { entries })
    }

    /// Build from explicit entries, checking names and shapes against the
    /// spec's layout.
    pub fn from_entries(spec: &ModelSpec, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = layout(spec);
        if expected.len() != entries.len() {
            return Err(Error::InvalidSpec(format!(
                "{} expects {} parameter tensors, got {}",
                spec.architecture,
                expected.len(),
                entries.len()
            )));
        }
        for (d, (name, t)) in expected.iter().zip(&entries) {
            if &d.name != name || d.shape != t.shape() {
                return Err(Error::InvalidSpec(format!(
                    "parameter {name} {:?} does not match layout entry {} {:?}",
                    t.shape(),
                    d.name,
                    d.shape
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((a, x), (b, y))| a == b && x.bit_eq(y))
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.entries.iter().zip(&other.entries).map(|((_, a), (_, b))| a.max_abs_diff(b)).fold(0.0, f64::max)
    }

    /// Record every tensor on `g`, as differentiable inputs when `trainable`.
    pub fn attach(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(name, t)| {
                let v = if trainable { g.input(t.clone()) } else { g.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }

    /// Name already-recorded vars, one per tensor in layout order.
    pub fn bind(&self, vars: &[Var]) -> Result<ParamVars> {
        if vars.len() != self.entries.len() {
            return Err(Error::InvalidSpec(format!(
                "expected {} parameter vars, got {}",
                self.entries.len(),
                vars.len()
            )));
        }
        let vars = self.entries.iter().zip(vars).map(|((n, _), &v)| (n.clone(), v)).collect();
        Ok(ParamVars { vars })
    }
}

/// Graph handles for a [`ModelParams`], same order.
///
/// Built by [`ModelParams::attach`] or, for vars created elsewhere, by
/// [`ModelParams::bind`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::InvalidSpec(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().map(|(_, v)| *v)
    }
}
