//! Central-difference gradient checking in 64-bit precision.

use super::graph::{Graph, Var};
use super::model::{Bound, ParamSet};
use crate::error::{Error, Result};

/// Denominator floor so near-zero gradients compare by absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter and element index with the largest error.
    pub worst: Option<(String, usize)>,
    pub n_checked: usize,
    /// Elements skipped because a perturbation flipped a rectifier.
    pub n_excluded: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares backward against the fourth-order central difference
/// `(f(θ−2h) − 8f(θ−h) + 8f(θ+h) − f(θ+2h)) / (12h)`, `h = eps`, for every
/// parameter element. `build` records the loss on a fresh graph.
pub fn grad_check<B>(params: &ParamSet<f64>, eps: f64, build: B) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidEps(eps));
    }
    let eval = |p: &ParamSet<f64>| -> Result<(f64, Vec<bool>, Graph<f64>, Var)> {
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let loss = build(&mut g, &bound)?;
        let value = g.value(loss).data[0];
        let pattern = g.relu_pattern();
        Ok((value, pattern, g, loss))
    };
    let (_, base_pattern, g, loss) = eval(params)?;
    let grads = g.backward(loss);
    let analytic = g.param_grads(&grads, &params.names);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        n_checked: 0,
        n_excluded: 0,
    };
    let mut work = params.clone();
    for (pi, name) in params.names.iter().enumerate() {
        for j in 0..params.tensors[pi].len() {
            let orig = params.tensors[pi].data[j];
            let mut f = [0.0; 4];
            let mut flipped = false;
            for (k, step) in [-2.0, -1.0, 1.0, 2.0].into_iter().enumerate() {
                work.tensors[pi].data[j] = orig + step * eps;
                let (v, pattern, _, _) = eval(&work)?;
                f[k] = v;
                flipped |= pattern != base_pattern;
            }
            work.tensors[pi].data[j] = orig;
            if flipped {
                report.n_excluded += 1;
                continue;
            }
            let numeric = (f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (12.0 * eps);
            let e = rel_err(analytic[pi].data[j], numeric);
            report.n_checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some((name.clone(), j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    #[test]
    fn linear_map_is_exact() {
        let mut p = ParamSet::default();
        p.push("w", Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.5, 1.1, 0.7, -0.4]));
        p.push("b", Tensor::new(vec![2], vec![0.1, -0.3]));
        let x = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let r = grad_check(&p, 1e-5, |g, b| {
            let xv = g.input(x.clone());
            let y = g.linear(xv, b.var("w"), b.var("b"));
            Ok(g.sum(y))
        })
        .unwrap();
        assert_eq!(r.n_checked, 8);
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn zero_eps_is_rejected() {
        let p = ParamSet::<f64>::default();
        let r = grad_check(&p, 0.0, |g, _| Ok(g.input(Tensor::scalar(0.0))));
        assert!(matches!(r, Err(Error::InvalidEps(_))));
    }
}
