use super::{Graph, Var};
use crate::error::{invalid, Result};
use crate::tensor::Param;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `max |analytic − central| / max(1, |central|)` over every checked entry.
    pub max_relative_error: f64,
    pub per_param: Vec<(String, f64)>,
    /// Frozen parameters passed in `wrt`: reported with zero gradient, not checked.
    pub frozen: Vec<String>,
    pub entries_checked: usize,
}

/// Compare analytic gradients against central finite differences.
///
/// `build` must construct the same scalar loss from the graph leaves it is
/// handed (one per entry of `wrt`, in order) on every call.
pub fn grad_check<F>(wrt: &[Param], mut build: F, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(invalid!("grad_check eps must be > 0, got {eps}"));
    }
    let mut eval = |params: &[Param]| -> Result<(Graph, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
        let loss = build(&mut g, &leaves)?;
        Ok((g, loss, leaves))
    };

    let (g, loss, leaves) = eval(wrt)?;
    let grads = g.backward(loss)?;
    let mut report = GradCheckReport::default();
    let mut work: Vec<Param> = wrt.to_vec();

    for (pi, p) in wrt.iter().enumerate() {
        if p.frozen {
            debug_assert!(grads.get(leaves[pi]).is_none());
            report.frozen.push(p.name.clone());
            continue;
        }
        let analytic = grads
            .get(leaves[pi])
            .cloned()
            .unwrap_or_else(|| crate::Tensor::zeros(p.value.rows(), p.value.cols()));
        let mut worst: f64 = 0.0;
        for i in 0..p.value.len() {
            let orig = work[pi].value.data()[i];
            work[pi].value.data_mut()[i] = orig + eps;
            let (gp, lp, _) = eval(&work)?;
            let plus = gp.value(lp).item();
            work[pi].value.data_mut()[i] = orig - eps;
            let (gm, lm, _) = eval(&work)?;
            let minus = gm.value(lm).item();
            work[pi].value.data_mut()[i] = orig;

            let central = (plus - minus) / (2.0 * eps);
            let err = (analytic.data()[i] - central).abs() / central.abs().max(1.0);
            worst = worst.max(err);
            report.entries_checked += 1;
        }
        report.max_relative_error = report.max_relative_error.max(worst);
        report.per_param.push((p.name.clone(), worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn linear_map_is_exact_up_to_rounding() {
        let w = Param::new("w", Tensor::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let report = grad_check(
            &[w],
            |g, v| {
                let x = g.constant(Tensor::from_vec(1, 2, vec![0.7, -1.1]).unwrap());
                let y = g.matmul(x, v[0])?;
                Ok(g.sum(y))
            },
            1e-4,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-9, "{report:?}");
        assert_eq!(report.entries_checked, 4);
    }

    #[test]
    fn frozen_param_is_flagged() {
        let w = Param::new("w", Tensor::scalar(1.5));
        let f = Param::frozen("f", Tensor::scalar(2.0));
        let report = grad_check(&[w, f], |g, v| g.mul(v[0], v[1]), 1e-4).unwrap();
        assert_eq!(report.frozen, vec!["f".to_string()]);
        assert_eq!(report.per_param.len(), 1);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        assert!(grad_check(&[], |g, _| Ok(g.constant(Tensor::scalar(0.0))), 0.0).is_err());
    }
}
