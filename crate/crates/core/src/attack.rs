//! White-box gradient-sign attacks under an L∞ budget: FGSM, BIM and PGD.
//!
//! Every attack works on the perturbation `delta` directly and only accepts
//! an element update when `x + delta` stays inside `[0, 1]`; a rejected
//! element keeps its previous value. `perturbed` is always computed as
//! `original + delta`, so the two agree exactly.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{loss_with, per_sample_loss, Model, Reduction};
use crate::rng::{derive_seed, stream_rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttackKind {
    #[serde(rename = "FGSM")]
    Fgsm,
    #[serde(rename = "BIM")]
    Bim,
    #[serde(rename = "PGD")]
    Pgd,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] = [AttackKind::Fgsm, AttackKind::Bim, AttackKind::Pgd];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "FGSM",
            AttackKind::Bim => "BIM",
            AttackKind::Pgd => "PGD",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FGSM" => Ok(AttackKind::Fgsm),
            "BIM" => Ok(AttackKind::Bim),
            "PGD" => Ok(AttackKind::Pgd),
            _ => Err(Error::InvalidAttack(format!("unknown attack {s:?}"))),
        }
    }
}

pub const DEFAULT_ITERATIONS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L∞ budget in normalized units.
    pub epsilon: f64,
    /// Step size for BIM and PGD.
    pub alpha: f64,
    pub iterations: usize,
    /// Extra PGD runs after the first.
    pub restarts: usize,
    /// PGD random start range as a fraction of `epsilon`.
    pub init_scale: f64,
    pub seed: u64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self { kind: AttackKind::Fgsm, epsilon, alpha: epsilon, iterations: 1, restarts: 0, init_scale: 1.0, seed: 0 }
    }

    pub fn bim(epsilon: f64, alpha: f64, iterations: usize) -> Self {
        Self { kind: AttackKind::Bim, alpha, iterations, ..Self::fgsm(epsilon) }
    }

    pub fn pgd(epsilon: f64, alpha: f64, iterations: usize) -> Self {
        Self { kind: AttackKind::Pgd, alpha, iterations, ..Self::fgsm(epsilon) }
    }

    /// Config for `kind` with the given budget and step, default iterations.
    pub fn of_kind(kind: AttackKind, epsilon: f64, alpha: f64) -> Self {
        match kind {
            AttackKind::Fgsm => Self::fgsm(epsilon),
            AttackKind::Bim => Self::bim(epsilon, alpha, DEFAULT_ITERATIONS),
            AttackKind::Pgd => Self::pgd(epsilon, alpha, DEFAULT_ITERATIONS),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_init_scale(mut self, init_scale: f64) -> Self {
        self.init_scale = init_scale;
        self
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidAttack(format!("{}: {msg}", self.kind)));
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return bad(format!("epsilon must be finite and non-negative, got {}", self.epsilon));
        }
        if self.kind == AttackKind::Fgsm {
            return Ok(());
        }
        if !(0.0..=self.epsilon).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, epsilon = {}], got {}", self.epsilon, self.alpha));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.kind == AttackKind::Pgd && !(0.0..=1.0).contains(&self.init_scale) {
            return bad(format!("init_scale must lie in [0, 1], got {}", self.init_scale));
        }
        Ok(())
    }
}

/// PGD bookkeeping per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PgdTrace {
    /// Loss of the returned example.
    pub best_loss: Vec<f64>,
    /// Loss of the first run's final iterate.
    pub first_loss: Vec<f64>,
    /// Run that produced the returned example.
    pub best_restart: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialBatch {
    pub original: Tensor,
    pub perturbed: Tensor,
    pub delta: Tensor,
    pub trace: Option<PgdTrace>,
}

impl AdversarialBatch {
    fn from_delta(original: &Tensor, delta: Tensor, trace: Option<PgdTrace>) -> Result<Self> {
        let data = original.data().iter().zip(delta.data()).map(|(x, d)| x + d).collect();
        Ok(Self { original: original.clone(), perturbed: Tensor::new(original.shape().to_vec(), data)?, delta, trace })
    }

    pub fn len(&self) -> usize {
        self.original.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest `|delta|` element.
    pub fn linf(&self) -> f64 {
        self.delta.data().iter().fold(0.0, |m, d| m.max(d.abs()))
    }
}

/// Signum with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Anything the attacks can differentiate: a loss over a batch whose rows
/// are independent samples.
pub trait AttackTarget: Sync {
    /// Gradient of the summed loss with respect to `x`. Summing keeps each
    /// sample's gradient independent of the rest of the batch.
    fn loss_gradient(&self, x: &Tensor, y: &Tensor) -> Result<Tensor>;

    /// Loss of each row.
    fn sample_losses(&self, x: &Tensor, y: &Tensor) -> Result<Vec<f64>>;
}

impl AttackTarget for Model {
    fn loss_gradient(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.attach(&mut g, false);
        let xv = g.input(x.clone());
        let pred = self.forward(&mut g, &p, xv)?;
        let l = loss_with(&mut g, pred, y, self.spec.task, Reduction::Sum)?;
        let mut grads = g.backward(l)?;
        Ok(grads.take(xv).expect("input is differentiable"))
    }

    fn sample_losses(&self, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        Ok(per_sample_loss(&self.predict(x)?.into_data(), y.data(), self.spec.task))
    }
}

/// [`AttackTarget::loss_gradient`], failing on the first non-finite element.
/// `offset` is the global index of the first row, used in the error.
pub fn input_gradient<M: AttackTarget + ?Sized>(model: &M, x: &Tensor, y: &Tensor, offset: usize) -> Result<Tensor> {
    let grad = model.loss_gradient(x, y)?;
    if let Some(i) = grad.data().iter().position(|v| !v.is_finite()) {
        let per_sample = x.len() / x.shape()[0].max(1);
        return Err(Error::NonFiniteGradient { sample: offset + i / per_sample });
    }
    Ok(grad)
}

/// One signed step of size `step`, projected onto the budget. Elements whose
/// update would leave `[0, 1]` are left unchanged.
fn signed_step(x: &[f64], delta: &mut [f64], grad: &[f64], step: f64, epsilon: f64) {
    for ((d, &xi), &gi) in delta.iter_mut().zip(x).zip(grad) {
        let cand = (*d + step * sign(gi)).clamp(-epsilon, epsilon);
        if (0.0..=1.0).contains(&(xi + cand)) {
            *d = cand;
        }
    }
}

fn iterate<M: AttackTarget + ?Sized>(
    model: &M,
    x: &Tensor,
    y: &Tensor,
    delta: &mut Tensor,
    cfg: &AttackConfig,
    steps: usize,
    step: f64,
    offset: usize,
) -> Result<()> {
    for _ in 0..steps {
        let xk = AdversarialBatch::from_delta(x, delta.clone(), None)?.perturbed;
        let grad = input_gradient(model, &xk, y, offset)?;
        signed_step(x.data(), delta.data_mut(), grad.data(), step, cfg.epsilon);
    }
    Ok(())
}

fn expect_kind(cfg: &AttackConfig, kind: AttackKind) -> Result<()> {
    if cfg.kind != kind {
        return Err(Error::InvalidAttack(format!("expected a {kind} config, got {}", cfg.kind)));
    }
    cfg.validate()
}

/// `x + epsilon * sign(grad_x J)`, with elements that would leave `[0, 1]`
/// left unperturbed.
pub fn fgsm<M: AttackTarget + ?Sized>(
    model: &M,
    x: &Tensor,
    y: &Tensor,
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    expect_kind(cfg, AttackKind::Fgsm)?;
    let mut delta = Tensor::zeros(x.shape());
    iterate(model, x, y, &mut delta, cfg, 1, cfg.epsilon, 0)?;
    AdversarialBatch::from_delta(x, delta, None)
}

/// `cfg.iterations` FGSM steps of size `cfg.alpha`, each projected back onto
/// the epsilon ball around `x`.
pub fn bim<M: AttackTarget + ?Sized>(
    model: &M,
    x: &Tensor,
    y: &Tensor,
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    expect_kind(cfg, AttackKind::Bim)?;
    let mut delta = Tensor::zeros(x.shape());
    iterate(model, x, y, &mut delta, cfg, cfg.iterations, cfg.alpha, 0)?;
    AdversarialBatch::from_delta(x, delta, None)
}

pub fn pgd<M: AttackTarget + ?Sized>(
    model: &M,
    x: &Tensor,
    y: &Tensor,
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    pgd_at(model, x, y, cfg, 0)
}

/// PGD on rows whose global indices start at `offset`. Random starts are
/// drawn per sample from a stream keyed by `(cfg.seed, global index)` and
/// indexed by the run number, so results do not depend on batching.
pub fn pgd_at<M: AttackTarget + ?Sized>(
    model: &M,
    x: &Tensor,
    y: &Tensor,
    cfg: &AttackConfig,
    offset: usize,
) -> Result<AdversarialBatch> {
    expect_kind(cfg, AttackKind::Pgd)?;
    let batch = x.shape()[0];
    let per_sample = x.len() / batch.max(1);
    let mut best: Option<(Tensor, Vec<f64>)> = None;
    let mut first_loss = Vec::new();
    let mut best_restart = vec![0; batch];

    for run in 0..=cfg.restarts {
        let mut delta = Tensor::zeros(x.shape());
        if cfg.init_scale > 0.0 {
            let r = cfg.init_scale * cfg.epsilon;
            for (i, chunk) in delta.data_mut().chunks_mut(per_sample).enumerate() {
                let key = derive_seed(cfg.seed, "pgd-start", "", "", (offset + i) as u64);
                let mut rng = stream_rng(key, run as u64);
                let xs = &x.data()[i * per_sample..(i + 1) * per_sample];
                for (d, &xi) in chunk.iter_mut().zip(xs) {
                    let u = rng.random_range(-r..=r);
                    let cand = u.clamp(-xi, 1.0 - xi);
                    if (0.0..=1.0).contains(&(xi + cand)) {
                        *d = cand;
                    }
                }
            }
        }
        iterate(model, x, y, &mut delta, cfg, cfg.iterations, cfg.alpha, offset)?;
        let pert = AdversarialBatch::from_delta(x, delta.clone(), None)?.perturbed;
        let losses = model.sample_losses(&pert, y)?;

        match &mut best {
            None => {
                first_loss = losses.clone();
                best = Some((delta, losses));
            }
            Some((best_delta, best_losses)) => {
                for i in 0..batch {
                    if losses[i] > best_losses[i] {
                        best_losses[i] = losses[i];
                        best_restart[i] = run;
                        let span = i * per_sample..(i + 1) * per_sample;
                        best_delta.data_mut()[span.clone()].copy_from_slice(&delta.data()[span]);
                    }
                }
            }
        }
    }
    let (delta, best_loss) = best.expect("at least one run");
    let trace = PgdTrace { best_loss, first_loss, best_restart };
    AdversarialBatch::from_delta(x, delta, Some(trace))
}

/// Dispatch on `cfg.kind`.
pub fn run_attack<M: AttackTarget + ?Sized>(
    model: &M,
    x: &Tensor,
    y: &Tensor,
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    run_attack_at(model, x, y, cfg, 0)
}

fn run_attack_at<M: AttackTarget + ?Sized>(
    model: &M,
    x: &Tensor,
    y: &Tensor,
    cfg: &AttackConfig,
    offset: usize,
) -> Result<AdversarialBatch> {
    match cfg.kind {
        AttackKind::Fgsm | AttackKind::Bim => {
            cfg.validate()?;
            let (steps, step) = match cfg.kind {
                AttackKind::Fgsm => (1, cfg.epsilon),
                _ => (cfg.iterations, cfg.alpha),
            };
            let mut delta = Tensor::zeros(x.shape());
            iterate(model, x, y, &mut delta, cfg, steps, step, offset)?;
            AdversarialBatch::from_delta(x, delta, None)
        }
        AttackKind::Pgd => pgd_at(model, x, y, cfg, offset),
    }
}

/// Attack a whole dataset in chunks of `chunk` rows, in parallel. The result
/// is identical for any chunk size and thread count.
pub fn attack_dataset<M: AttackTarget + ?Sized>(
    model: &M,
    x: &Tensor,
    y: &Tensor,
    cfg: &AttackConfig,
    chunk: usize,
) -> Result<AdversarialBatch> {
    cfg.validate()?;
    let n = x.shape()[0];
    let chunk = chunk.max(1);
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let len = chunk.min(n - s);
            run_attack_at(model, &x.rows(s, len), &y.rows(s, len), cfg, s)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let delta = Tensor::cat_rows(&parts.iter().map(|p| &p.delta).collect::<Vec<_>>())?;
    let trace = (cfg.kind == AttackKind::Pgd).then(|| {
        let mut t = PgdTrace { best_loss: vec![], first_loss: vec![], best_restart: vec![] };
        for p in &parts {
            let pt = p.trace.as_ref().expect("pgd records a trace");
            t.best_loss.extend(&pt.best_loss);
            t.first_loss.extend(&pt.first_loss);
            t.best_restart.extend(&pt.best_restart);
        }
        t
    });
    AdversarialBatch::from_delta(x, delta, trace)
}
