//! The seven architectures, their parameters, losses and checkpoints.

mod arch;
pub mod checkpoint;
mod loss;
mod params;
mod spec;

pub use loss::{loss, loss_with, per_sample_loss, Reduction, PROB_CLAMP};
pub use params::{ModelParams, ParamVars};
pub use spec::{Architecture, ModelSpec, Task};

use crate::autodiff::{grad_check_many, GradCheckReport, Graph, Tensor, Var};
use crate::error::Result;

/// An architecture together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ModelParams,
}

impl Model {
    /// Seeded initialization from `spec.seed`.
    pub fn init(spec: ModelSpec) -> Result<Self> {
        let params = ModelParams::init(&spec)?;
        Ok(Self { spec, params })
    }

    pub fn zeroed(spec: ModelSpec) -> Result<Self> {
        let params = ModelParams::zeros(&spec)?;
        Ok(Self { spec, params })
    }

    /// Record the forward pass of `x` (`[batch, window, channels]`) on `g`,
    /// returning `[batch, 1]`.
    pub fn forward(&self, g: &mut Graph, params: &ParamVars, x: Var) -> Result<Var> {
        arch::build(&self.spec, g, params, x)
    }

    /// Predictions without gradient bookkeeping.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.attach(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }

    /// [`Model::predict`] over chunks of at most `chunk` rows.
    pub fn predict_chunked(&self, x: &Tensor, chunk: usize) -> Result<Vec<f64>> {
        let n = x.shape()[0];
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let len = chunk.max(1).min(n - start);
            out.extend(self.predict(&x.rows(start, len))?.into_data());
            start += len;
        }
        Ok(out)
    }
}

impl Model {
    /// Mean loss of `x` against `y` as a differentiable function of the
    /// window and every parameter tensor, checked against central finite
    /// differences with step `h`.
    pub fn grad_check(&self, x: &Tensor, y: &Tensor, h: f64) -> Result<GradCheckReport> {
        let mut points = vec![x.clone()];
        points.extend(self.params.entries().iter().map(|(_, t)| t.clone()));
        grad_check_many(
            |g, vars| {
                let p = self.params.bind(&vars[1..])?;
                let pred = self.forward(g, &p, vars[0])?;
                loss(g, pred, y, self.spec.task)
            },
            &points,
            h,
        )
    }
}
