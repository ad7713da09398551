//! Clean training and min-max adversarial training.
//!
//! Adversarial training alternates, per mini-batch, an inner maximization
//! (attack the current parameters) with an outer minimization (one descent
//! step on the mean loss over the clean batch followed by its adversarial
//! copy).

use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_dataset, run_attack, AttackConfig, AttackKind};
use crate::autodiff::{Graph, Tensor};
use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::model::{loss, Architecture, Model, ModelParams, ModelSpec};
use crate::rng::{derive_seed, stream_rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// How adversarial examples are produced during adversarial training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvMode {
    /// Regenerated for every batch against the current parameters.
    MinMax,
    /// Generated once against the starting parameters and reused.
    Static,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub adv: Option<AttackConfig>,
    /// Attack iterations during the inner maximization; `None` picks
    /// [`default_inner_steps`].
    pub inner_steps: Option<usize>,
    pub mode: AdvMode,
}

/// 1 for FGSM, 5 for the iterative attacks.
pub fn default_inner_steps(kind: AttackKind) -> usize {
    match kind {
        AttackKind::Fgsm => 1,
        AttackKind::Bim | AttackKind::Pgd => 5,
    }
}

impl TrainConfig {
    /// Clean SGD training.
    pub fn new(epochs: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            learning_rate,
            optimizer: Optimizer::Sgd,
            seed,
            adv: None,
            inner_steps: None,
            mode: AdvMode::MinMax,
        }
    }

    pub fn with_optimizer(mut self, optimizer: Optimizer) -> Self {
        self.optimizer = optimizer;
        self
    }

    pub fn with_adversary(mut self, adv: AttackConfig) -> Self {
        self.adv = Some(adv);
        self
    }

    pub fn with_inner_steps(mut self, steps: usize) -> Self {
        self.inner_steps = Some(steps);
        self
    }

    /// Inner maximization steps for the configured adversary.
    pub fn effective_inner_steps(&self) -> Option<usize> {
        self.adv.as_ref().map(|a| self.inner_steps.unwrap_or(default_inner_steps(a.kind)))
    }

    pub fn with_mode(mut self, mode: AdvMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidTraining(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad(format!("epochs and batch size must be positive, got {} and {}", self.epochs, self.batch_size));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if let Some(adv) = &self.adv {
            adv.validate()?;
            if self.inner_steps == Some(0) {
                return bad("inner steps must be at least 1".into());
            }
        }
        Ok(())
    }

    /// The attack used for the inner maximization of step `step`.
    pub fn inner_attack(&self, step: usize) -> Option<AttackConfig> {
        self.adv.as_ref().map(|a| {
            let mut a = a.clone();
            if a.kind != AttackKind::Fgsm {
                a.iterations = self.effective_inner_steps().expect("adversary present");
            }
            a.seed = derive_seed(a.seed, "inner", "", "", step as u64);
            a
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
    pub wall_time_secs: f64,
    pub config: TrainConfig,
}

/// Visiting order of `n` samples in `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, epoch as u64));
    order
}

/// Mean loss and its gradient with respect to every parameter tensor.
pub fn loss_and_gradient(model: &Model, x: &Tensor, y: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = model.params.attach(&mut g, true);
    let xv = g.constant(x.clone());
    let pred = model.forward(&mut g, &p, xv)?;
    let l = loss(&mut g, pred, y, model.spec.task)?;
    let value = g.value(l).item().expect("scalar loss");
    let mut grads = g.backward(l)?;
    let grads = p.vars().map(|v| grads.take(v).expect("parameter is differentiable")).collect();
    Ok((value, grads))
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state for one model.
pub struct Stepper {
    optimizer: Optimizer,
    learning_rate: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Stepper {
    pub fn new(optimizer: Optimizer, learning_rate: f64, params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { optimizer, learning_rate, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn apply(&mut self, params: &mut ModelParams, grads: &[Tensor]) {
        let lr = self.learning_rate;
        match self.optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.tensors_mut().zip(grads) {
                    p.data_mut().iter_mut().zip(g.data()).for_each(|(w, d)| *w -= lr * d);
                }
            }
            Optimizer::Adam => {
                self.t += 1;
                let c1 = 1.0 - BETA1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    for (((w, &d), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        *m = BETA1 * *m + (1.0 - BETA1) * d;
                        *v = BETA2 * *v + (1.0 - BETA2) * d * d;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// One descent step on `(x, y)`; returns the loss before the step.
pub fn clean_step(model: &mut Model, stepper: &mut Stepper, x: &Tensor, y: &Tensor) -> Result<f64> {
    let (l, grads) = loss_and_gradient(model, x, y)?;
    stepper.apply(&mut model.params, &grads);
    Ok(l)
}

/// Inner maximization against the current parameters, then one descent step
/// on the clean batch followed by its adversarial copy.
pub fn adversarial_step(
    model: &mut Model,
    stepper: &mut Stepper,
    x: &Tensor,
    y: &Tensor,
    attack: &AttackConfig,
) -> Result<f64> {
    let adv = run_attack(&*model, x, y, attack)?;
    let xs = Tensor::cat_rows(&[x, &adv.perturbed])?;
    let ys = Tensor::cat_rows(&[y, y])?;
    clean_step(model, stepper, &xs, &ys)
}

fn check_data(model: &Model, data: &WindowedDataset) -> Result<()> {
    if data.task != model.spec.task {
        return Err(Error::InvalidTraining(format!(
            "dataset task {:?} does not match model task {:?}",
            data.task, model.spec.task
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidTraining("empty training set".into()));
    }
    Ok(())
}

/// Train `model` in place; clean when `cfg.adv` is absent, adversarial
/// otherwise.
pub fn fit(model: &mut Model, data: &WindowedDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_data(model, data)?;
    let start = Instant::now();
    let mut stepper = Stepper::new(cfg.optimizer, cfg.learning_rate, &model.params);
    let fixed_adv = match (&cfg.adv, cfg.mode) {
        (Some(_), AdvMode::Static) => {
            let attack = cfg.inner_attack(0).expect("adversary present");
            Some(attack_dataset(&*model, &data.x, &data.y, &attack, 256)?.perturbed)
        }
        _ => None,
    };

    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, data.len());
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(idx);
            let l = match (&fixed_adv, cfg.inner_attack(step)) {
                (Some(adv), _) => {
                    let xs = Tensor::cat_rows(&[&x, &adv.select_rows(idx)])?;
                    let ys = Tensor::cat_rows(&[&y, &y])?;
                    clean_step(model, &mut stepper, &xs, &ys)?
                }
                (None, Some(attack)) => adversarial_step(model, &mut stepper, &x, &y, &attack)?,
                (None, None) => clean_step(model, &mut stepper, &x, &y)?,
            };
            if !l.is_finite() || !model.params.all_finite() {
                return Err(Error::Divergence { epoch, step, loss: l });
            }
            total += l;
            batches += 1;
            step += 1;
        }
        let mean = total / batches as f64;
        info!("{} epoch {}/{}: loss {mean:.6}", model.spec.architecture, epoch + 1, cfg.epochs);
        epoch_loss.push(mean);
    }
    Ok(TrainReport { epoch_loss, steps: step, wall_time_secs: start.elapsed().as_secs_f64(), config: cfg.clone() })
}

/// Clean training from a fresh initialization.
pub fn train(spec: &ModelSpec, data: &WindowedDataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    if cfg.adv.is_some() {
        return Err(Error::InvalidTraining("train() expects no adversary; use adversarial_train()".into()));
    }
    let mut model = Model::init(spec.clone())?;
    let report = fit(&mut model, data, cfg)?;
    Ok((model.params, report))
}

/// Adversarial training from a fresh initialization.
pub fn adversarial_train(
    spec: &ModelSpec,
    data: &WindowedDataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    if cfg.adv.is_none() {
        return Err(Error::InvalidTraining("adversarial_train() needs an attack config".into()));
    }
    let mut model = Model::init(spec.clone())?;
    let report = fit(&mut model, data, cfg)?;
    Ok((model.params, report))
}

/// Outcome of one (model, attack) cell.
pub struct DefenseCell {
    pub architecture: Architecture,
    pub attack: AttackKind,
    pub outcome: Result<(Model, TrainReport)>,
}

/// Adversarially fine-tune every base model against every attack. Cells run
/// in parallel; a failing cell does not stop the others. Each cell's shuffle
/// and attack seeds derive from `cfg.seed` and the cell's names.
pub fn run_defense_suite(
    data: &WindowedDataset,
    models: &[Model],
    attacks: &[AttackConfig],
    cfg: &TrainConfig,
) -> Result<Vec<DefenseCell>> {
    if attacks.is_empty() {
        return Err(Error::NoAttacks);
    }
    if models.is_empty() {
        return Err(Error::NoModels);
    }
    let cells: Vec<(&Model, &AttackConfig)> = models.iter().flat_map(|m| attacks.iter().map(move |a| (m, a))).collect();
    Ok(cells
        .into_par_iter()
        .map(|(base, attack)| {
            let arch = base.spec.architecture;
            let cell_cfg = defense_config(cfg, arch, attack);
            let mut model = base.clone();
            let outcome = fit(&mut model, data, &cell_cfg).map(|r| (model, r));
            DefenseCell { architecture: arch, attack: attack.kind, outcome }
        })
        .collect())
}

/// `cfg` specialised to one (model, attack) cell.
pub fn defense_config(cfg: &TrainConfig, arch: Architecture, attack: &AttackConfig) -> TrainConfig {
    let mut adv = attack.clone();
    adv.seed = derive_seed(cfg.seed, "defend-attack", arch.name(), attack.kind.name(), 0);
    let mut c = cfg.clone().with_adversary(adv);
    c.seed = derive_seed(cfg.seed, "defend-shuffle", arch.name(), attack.kind.name(), 0);
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, synth_series, SynthKind};
    use crate::model::Task;

    fn square(len: usize) -> WindowedDataset {
        let s = synth_series(SynthKind::Square, len, 0.03, 1).unwrap();
        make_windows(&s, 0.8, Task::Classification).unwrap().0
    }

    fn sine(len: usize) -> WindowedDataset {
        let s = synth_series(SynthKind::Sine, len, 0.02, 2).unwrap();
        make_windows(&s, 0.8, Task::Regression).unwrap().0
    }

    fn spec(a: Architecture, task: Task) -> ModelSpec {
        ModelSpec::new(a, 23, 1, task, 7).with_hidden(4).with_filters(3)
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let data = sine(200);
        let init = Model::init(spec(Architecture::Gru, Task::Regression)).unwrap();
        let (params, report) = train(&init.spec, &data, &TrainConfig::new(2, 8, 0.0, 1)).unwrap();
        assert!(params.bit_eq(&init.params));
        assert_eq!(report.epoch_loss.len(), 2);
        let adam = TrainConfig::new(1, 8, 0.0, 1).with_optimizer(Optimizer::Adam);
        assert!(train(&init.spec, &data, &adam).unwrap().0.bit_eq(&init.params));
    }

    #[test]
    fn hand_computed_sgd_step() {
        // an RNN with zero recurrent weights and a zero hidden layer reduces
        // to the head bias: pred = b, loss = (b - y)^2, grad = 2 (b - y)
        let mut model = Model::zeroed(spec(Architecture::Rnn, Task::Regression)).unwrap();
        let b0 = 0.3;
        model.params.tensors_mut().last().unwrap().data_mut()[0] = b0;
        let x = Tensor::full(&[1, 23, 1], 0.5);
        let y = Tensor::column(vec![1.0]);
        let mut stepper = Stepper::new(Optimizer::Sgd, 0.1, &model.params);
        let l = clean_step(&mut model, &mut stepper, &x, &y).unwrap();
        assert!((l - 0.49).abs() < 1e-15);
        let b1 = model.params.get("head.bias").unwrap().data()[0];
        assert!((b1 - (b0 - 0.1 * 2.0 * (b0 - 1.0))).abs() < 1e-15);
    }

    #[test]
    fn zero_budget_collapses_to_clean_steps_on_duplicated_batches() {
        let data = square(160);
        for kind in AttackKind::ALL {
            let cfg = TrainConfig::new(1, 16, 0.05, 3).with_adversary(AttackConfig::of_kind(kind, 0.0, 0.0));
            let mut adv_model = Model::init(spec(Architecture::Lstm, Task::Classification)).unwrap();
            let mut clean_model = adv_model.clone();
            let mut s1 = Stepper::new(Optimizer::Sgd, 0.05, &adv_model.params);
            let mut s2 = Stepper::new(Optimizer::Sgd, 0.05, &clean_model.params);
            for (step, idx) in epoch_order(3, 0, data.len()).chunks(16).enumerate() {
                let (x, y) = data.batch(idx);
                adversarial_step(&mut adv_model, &mut s1, &x, &y, &cfg.inner_attack(step).unwrap()).unwrap();
                let xx = Tensor::cat_rows(&[&x, &x]).unwrap();
                let yy = Tensor::cat_rows(&[&y, &y]).unwrap();
                clean_step(&mut clean_model, &mut s2, &xx, &yy).unwrap();
                assert!(adv_model.params.max_abs_diff(&clean_model.params) <= 1e-12, "{kind} step {step}");
            }
            let mut fitted = Model::init(spec(Architecture::Lstm, Task::Classification)).unwrap();
            fit(&mut fitted, &data, &cfg).unwrap();
            assert!(fitted.params.bit_eq(&adv_model.params));
        }
    }

    #[test]
    fn deterministic() {
        let data = square(120);
        let cfg = TrainConfig::new(2, 10, 0.1, 5).with_adversary(AttackConfig::pgd(0.1, 0.05, 3));
        let s = spec(Architecture::Cnn, Task::Classification);
        let a = adversarial_train(&s, &data, &cfg).unwrap().0;
        let b = adversarial_train(&s, &data, &cfg).unwrap().0;
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn inner_attack_does_not_touch_outer_params() {
        let data = sine(200);
        let model = Model::init(spec(Architecture::Rnn, Task::Regression)).unwrap();
        let (x, y) = data.batch(&[0, 1, 2]);
        let attack = AttackConfig::bim(0.1, 0.05, 5);
        let snapshot = model.params.clone();
        let adv = run_attack(&model, &x, &y, &attack).unwrap();
        assert!(model.params.bit_eq(&snapshot));

        let mut stepped = model.clone();
        let mut s = Stepper::new(Optimizer::Sgd, 0.1, &stepped.params);
        adversarial_step(&mut stepped, &mut s, &x, &y, &attack).unwrap();
        let mut manual = model.clone();
        let mut s = Stepper::new(Optimizer::Sgd, 0.1, &manual.params);
        let xs = Tensor::cat_rows(&[&x, &adv.perturbed]).unwrap();
        let ys = Tensor::cat_rows(&[&y, &y]).unwrap();
        clean_step(&mut manual, &mut s, &xs, &ys).unwrap();
        assert!(stepped.params.bit_eq(&manual.params));
    }

    #[test]
    fn loss_decreases_over_first_epochs() {
        let data = square(400);
        let cfg = TrainConfig::new(3, 16, 0.01, 11).with_optimizer(Optimizer::Adam);
        let s = ModelSpec::new(Architecture::Lstm, 23, 1, Task::Classification, 42).with_hidden(8);
        let (_, report) = train(&s, &data, &cfg).unwrap();
        let l = &report.epoch_loss;
        assert!(l[0] > l[1] && l[1] > l[2], "{l:?}");
        let pinned = PINNED_LOSSES;
        for (a, b) in l.iter().zip(pinned) {
            assert!((a - b).abs() <= 1e-9 * b.abs(), "{l:?}");
        }
    }

    const PINNED_LOSSES: [f64; 3] = [0.6713126620886423, 0.5829055968785554, 0.4825975875384816];

    #[test]
    fn static_mode_reuses_one_adversarial_set() {
        let data = sine(200);
        let base = TrainConfig::new(2, 8, 0.05, 1).with_adversary(AttackConfig::fgsm(0.1));
        let s = spec(Architecture::Rnn, Task::Regression);
        let a = adversarial_train(&s, &data, &base.clone().with_mode(AdvMode::Static)).unwrap().0;
        let b = adversarial_train(&s, &data, &base).unwrap().0;
        assert!(a.all_finite() && !a.bit_eq(&b));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::new(0, 8, 0.1, 0).validate().is_err());
        assert!(TrainConfig::new(1, 8, f64::NAN, 0).validate().is_err());
        let adam = TrainConfig::new(1, 8, 0.1, 0).with_optimizer(Optimizer::Adam);
        assert!(adam.validate().is_ok());
        assert!(adam.with_adversary(AttackConfig::fgsm(0.1)).validate().is_ok());
        let c = TrainConfig::new(1, 8, 0.1, 0).with_adversary(AttackConfig::bim(0.1, 0.1, 10));
        assert_eq!(c.effective_inner_steps(), Some(5));
        assert_eq!(c.inner_attack(0).unwrap().iterations, 5);
        assert_eq!(c.clone().with_inner_steps(2).inner_attack(0).unwrap().iterations, 2);
        assert!(c.with_inner_steps(0).validate().is_err());
        let c = TrainConfig::new(1, 8, 0.1, 0).with_adversary(AttackConfig::fgsm(0.1));
        assert_eq!(c.effective_inner_steps(), Some(1));
    }

    #[test]
    fn task_mismatch_is_rejected() {
        let data = sine(200);
        let s = spec(Architecture::Rnn, Task::Classification);
        assert!(matches!(train(&s, &data, &TrainConfig::new(1, 8, 0.1, 0)), Err(Error::InvalidTraining(_))));
    }

    #[test]
    fn suite_cardinality_and_errors() {
        let data = sine(200).head(20);
        let models: Vec<Model> = [Architecture::Rnn, Architecture::Cnn]
            .into_iter()
            .map(|a| Model::init(spec(a, Task::Regression)).unwrap())
            .collect();
        let attacks: Vec<AttackConfig> = AttackKind::ALL.iter().map(|&k| AttackConfig::of_kind(k, 0.1, 0.05)).collect();
        let cfg = TrainConfig::new(1, 10, 0.05, 0);
        let cells = run_defense_suite(&data, &models, &attacks, &cfg).unwrap();
        assert_eq!(cells.len(), 6);
        assert!(cells.iter().all(|c| c.outcome.is_ok()));

        let one = run_defense_suite(&data, &models[..1], &attacks[..1], &cfg).unwrap();
        assert_eq!(one.len(), 1);

        let err = run_defense_suite(&data, &models, &[], &cfg).err().unwrap();
        assert_eq!(err.to_string(), "no attacks configured");

        let mut broken = attacks.clone();
        broken[1].alpha = 1.0;
        let cells = run_defense_suite(&data, &models, &broken, &cfg).unwrap();
        assert_eq!(cells.iter().filter(|c| c.outcome.is_err()).count(), 2);
        assert_eq!(cells.iter().filter(|c| c.outcome.is_ok()).count(), 4);
    }
}
