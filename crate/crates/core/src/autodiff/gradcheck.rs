//! Central finite-difference verification of analytic gradients.

use rand::Rng;

use super::graph::{Graph, OpKind, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - fd| / max(1, |fd|)` over every checked element.
    pub max_rel_error: f64,
    /// `(point index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    /// Elements whose finite difference or analytic value was not finite.
    pub non_finite: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.non_finite == 0 && self.max_rel_error < tolerance
    }
}

/// Check the gradient of a scalar function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(point), h)
}

/// Check the gradient of a scalar function with respect to every element of
/// every tensor in `points`.
pub fn grad_check_many<F>(f: F, points: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Domain { op: "grad_check", detail: format!("step must be positive, got {h}") });
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.input(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        g.value(loss).item().ok_or_else(|| Error::NonScalarLoss(g.value(loss).shape().to_vec()))
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, non_finite: 0, checked: 0 };
    let mut work: Vec<Tensor> = points.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).clone();
        for ei in 0..points[pi].len() {
            let x0 = points[pi].data()[ei];
            work[pi].data_mut()[ei] = x0 + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = x0 - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = x0;

            let fd = (plus - minus) / (2.0 * h);
            let a = analytic.data()[ei];
            report.checked += 1;
            if !fd.is_finite() || !a.is_finite() {
                report.non_finite += 1;
                report.max_rel_error = f64::INFINITY;
                report.worst = Some((pi, ei));
                continue;
            }
            let rel = (a - fd).abs() / fd.abs().max(1.0);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, ei));
            }
        }
    }
    Ok(report)
}

impl OpKind {
    /// One representative of every op kind, as exercised by [`op_grad_check`].
    pub fn catalog() -> Vec<OpKind> {
        vec![
            OpKind::Add,
            OpKind::Sub,
            OpKind::Mul,
            OpKind::MatMul,
            OpKind::Sigmoid,
            OpKind::Tanh,
            OpKind::Relu,
            OpKind::Conv1d,
            OpKind::MaxPool1d { size: 2 },
            OpKind::Concat { axis: 1 },
            OpKind::Slice { axis: 1, start: 1, len: 2 },
            OpKind::Reshape { shape: vec![4, 3] },
            OpKind::Mean,
            OpKind::Sum,
            OpKind::Square,
            OpKind::Scale(-1.5),
            OpKind::Ln,
            OpKind::Clamp { lo: -0.5, hi: 0.5 },
        ]
    }
}

/// Gradient check of a single op at a random point drawn from `seed`.
///
/// Non-scalar outputs are reduced with random weights so that every output
/// element contributes. Binary elementwise ops use a broadcast right operand
/// on odd seeds.
pub fn op_grad_check(kind: &OpKind, seed: u64, h: f64) -> Result<GradCheckReport> {
    let mut rng = stream_rng(seed, 0);
    let shapes: Vec<Vec<usize>> = match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul if seed % 2 == 1 => vec![vec![3, 4], vec![4]],
        OpKind::Add | OpKind::Sub | OpKind::Mul => vec![vec![3, 4], vec![3, 4]],
        OpKind::MatMul => vec![vec![3, 4], vec![4, 2]],
        OpKind::Conv1d => vec![vec![2, 6, 3], vec![3, 3, 2]],
        OpKind::MaxPool1d { .. } => vec![vec![2, 7, 3]],
        OpKind::Concat { .. } => vec![vec![2, 3], vec![2, 2]],
        OpKind::Slice { .. } => vec![vec![2, 4, 3]],
        _ => vec![vec![3, 4]],
    };
    let (lo, hi) = if *kind == OpKind::Ln { (0.5, 2.0) } else { (-1.0, 1.0) };
    let points: Vec<Tensor> = shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::new(s.clone(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        })
        .collect::<Result<_>>()?;

    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = points.iter().map(|p| g.constant(p.clone())).collect();
        let y = g.apply(kind.clone(), &vars)?;
        g.value(y).shape().to_vec()
    };
    let n: usize = out_shape.iter().product();
    let weights = Tensor::new(out_shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    grad_check_many(
        |g, vars| {
            let y = g.apply(kind.clone(), vars)?;
            if g.value(y).rank() == 0 {
                return Ok(y);
            }
            let w = g.constant(weights.clone());
            let wy = g.mul(y, w)?;
            g.sum(wy)
        },
        &points,
        h,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_at_three() {
        let r = grad_check(|g, x| g.square(x), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(0.0));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x).item(), Some(0.25));
        let r = grad_check(|g, x| g.sigmoid(x), &Tensor::scalar(0.0), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn non_finite_difference_is_a_failure() {
        // (1e200 x)^2 overflows, so both finite-difference probes are infinite
        let r = grad_check(
            |g, x| {
                let s = g.scale(x, 1e200)?;
                g.square(s)
            },
            &Tensor::scalar(1.0),
            1e-5,
        )
        .unwrap();
        assert_eq!(r.non_finite, 1);
        assert!(!r.passed(1e-4));
    }

    #[test]
    fn every_op_matches_finite_differences() {
        for kind in OpKind::catalog() {
            for seed in 0..100 {
                let r = op_grad_check(&kind, seed, 1e-5).unwrap();
                assert!(r.passed(1e-4), "{} seed {seed}: {r:?}", kind.name());
            }
        }
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(grad_check(|g, x| g.square(x), &Tensor::scalar(1.0), 0.0).is_err());
    }
}
