use super::spec::Task;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

pub(crate) fn check_targets(target: &Tensor, task: Task) -> Result<()> {
    if task == Task::Classification {
        if let Some((index, &value)) = target.data().iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidLabel { index, value });
        }
    }
    Ok(())
}

/// Mean loss: squared error for regression, binary cross-entropy for
/// classification.
pub fn loss(g: &mut Graph, pred: Var, target: &Tensor, task: Task) -> Result<Var> {
    loss_with(g, pred, target, task, Reduction::Mean)
}

pub fn loss_with(g: &mut Graph, pred: Var, target: &Tensor, task: Task, reduction: Reduction) -> Result<Var> {
    let shape = g.value(pred).shape().to_vec();
    if shape != target.shape() {
        return Err(Error::shape("loss", format!("prediction {:?} vs target {:?}", shape, target.shape())));
    }
    check_targets(target, task)?;
    let per_element = match task {
        Task::Regression => {
            let y = g.constant(target.clone());
            let r = g.sub(pred, y)?;
            g.square(r)?
        }
        Task::Classification => {
            let p = g.clamp(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
            let ones = g.constant(Tensor::full(&shape, 1.0));
            let q = g.sub(ones, p)?;
            let lp = g.ln(p)?;
            let lq = g.ln(q)?;
            let y = g.constant(target.clone());
            let not_y = {
                let data = target.data().iter().map(|v| 1.0 - v).collect();
                g.constant(Tensor::new(shape.clone(), data)?)
            };
            let a = g.mul(lp, y)?;
            let b = g.mul(lq, not_y)?;
            let ll = g.add(a, b)?;
            g.scale(ll, -1.0)?
        }
    };
    match reduction {
        Reduction::Mean => g.mean(per_element),
        Reduction::Sum => g.sum(per_element),
    }
}

/// Loss of each sample, outside any graph.
pub fn per_sample_loss(pred: &[f64], target: &[f64], task: Task) -> Vec<f64> {
    pred.iter()
        .zip(target)
        .map(|(&p, &y)| match task {
            Task::Regression => (p - y) * (p - y),
            Task::Classification => {
                let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(pred: &[f64], target: &[f64], task: Task) -> Result<f64> {
        let mut g = Graph::new();
        let p = g.input(Tensor::column(pred.to_vec()));
        let l = loss(&mut g, p, &Tensor::column(target.to_vec()), task)?;
        Ok(g.value(l).item().unwrap())
    }

    #[test]
    fn mse_examples() {
        assert_eq!(eval(&[0.3, 0.7], &[0.3, 0.7], Task::Regression).unwrap(), 0.0);
        assert_eq!(eval(&[0.0, 0.0], &[3.0, 4.0], Task::Regression).unwrap(), 12.5);
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let v = eval(&[0.5], &[1.0], Task::Classification).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_clamps_saturated_probabilities() {
        let v = eval(&[1.0], &[0.0], Task::Classification).unwrap();
        assert!(v.is_finite());
        assert!((v + (PROB_CLAMP).ln()).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_binary_labels() {
        assert!(matches!(
            eval(&[0.5, 0.5], &[1.0, 0.5], Task::Classification),
            Err(Error::InvalidLabel { index: 1, .. })
        ));
    }

    #[test]
    fn rejects_shape_mismatch() {
        assert!(eval(&[0.5, 0.5], &[1.0], Task::Regression).is_err());
    }

    #[test]
    fn per_sample_mean_matches_graph() {
        let pred = [0.2, 0.9, 0.4];
        let target = [0.0, 1.0, 1.0];
        for task in [Task::Regression, Task::Classification] {
            let ps = per_sample_loss(&pred, &target, task);
            let mean = ps.iter().sum::<f64>() / 3.0;
            assert!((mean - eval(&pred, &target, task).unwrap()).abs() < 1e-14);
        }
    }
}
