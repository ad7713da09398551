//! Finite-difference gradient checks over every op kind and architecture.

use rand::Rng;
use rayon::prelude::*;
use tsadv_core::autodiff::{op_grad_check, GradCheckReport, Graph, OpKind, Tensor};
use tsadv_core::data::PREDICTORS;
use tsadv_core::model::{Architecture, Model, ModelSpec, Task};
use tsadv_core::rng::{derive_seed, stream_rng};
use tsadv_core::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Cases closer than this to a relu or max-pool kink are redrawn: a
/// finite difference straddling a kink measures the jump, not the slope.
pub const KINK_MARGIN: f64 = 1e-3;

/// Worst result of one subject over all seeds.
#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: String,
    pub seeds: u64,
    pub max_rel_error: f64,
    pub non_finite: usize,
    pub checked: usize,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.non_finite == 0 && self.max_rel_error < TOLERANCE
    }

    fn fold(name: String, seeds: u64, reports: Vec<GradCheckReport>) -> Self {
        Self {
            name,
            seeds,
            max_rel_error: reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
            non_finite: reports.iter().map(|r| r.non_finite).sum(),
            checked: reports.iter().map(|r| r.checked).sum(),
        }
    }
}

pub fn check_ops(seeds: u64) -> Result<Vec<CheckRow>> {
    OpKind::catalog()
        .iter()
        .map(|kind| {
            let reports =
                (0..seeds).into_par_iter().map(|s| op_grad_check(kind, s, STEP)).collect::<Result<Vec<_>>>()?;
            Ok(CheckRow::fold(format!("{kind:?}"), seeds, reports))
        })
        .collect()
}

/// A small random model of `arch` with its batch, varying size, channels and
/// task with the seed, at least [`KINK_MARGIN`] away from any kink.
pub fn random_case(arch: Architecture, seed: u64) -> Result<(Model, Tensor, Tensor)> {
    let key = derive_seed(seed, "gradcheck", arch.name(), "", 0);
    for draw in 0.. {
        let case = draw_case(arch, seed, key, draw)?;
        if kink_margin(&case.0, &case.1)? >= KINK_MARGIN {
            return Ok(case);
        }
    }
    unreachable!()
}

fn kink_margin(model: &Model, x: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params.attach(&mut g, false);
    let xv = g.constant(x.clone());
    model.forward(&mut g, &p, xv)?;
    Ok(g.kink_margin())
}

fn draw_case(arch: Architecture, seed: u64, key: u64, draw: u64) -> Result<(Model, Tensor, Tensor)> {
    let mut rng = stream_rng(key, draw);
    let task = if seed.is_multiple_of(2) { Task::Regression } else { Task::Classification };
    let channels = rng.random_range(1..=2);
    let spec = ModelSpec::new(arch, PREDICTORS, channels, task, rng.random())
        .with_hidden(rng.random_range(2..=4))
        .with_filters(rng.random_range(2..=3));
    let model = Model::init(spec)?;
    let batch = 2;
    let x: Vec<f64> = (0..batch * PREDICTORS * channels).map(|_| rng.random()).collect();
    let y: Vec<f64> = (0..batch)
        .map(|_| match task {
            Task::Regression => rng.random(),
            Task::Classification => f64::from(rng.random_bool(0.5)),
        })
        .collect();
    Ok((model, Tensor::new(vec![batch, PREDICTORS, channels], x)?, Tensor::column(y)))
}

pub fn check_models(seeds: u64) -> Result<Vec<CheckRow>> {
    Architecture::ALL
        .iter()
        .map(|&arch| {
            let reports = (0..seeds)
                .into_par_iter()
                .map(|s| {
                    let (model, x, y) = random_case(arch, s)?;
                    model.grad_check(&x, &y, STEP)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CheckRow::fold(arch.name().to_string(), seeds, reports))
        })
        .collect()
}
