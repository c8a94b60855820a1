use super::graph::{Graph, Var};
use super::tensor::ParameterStore;
use crate::{Error, Result};

/// Smallest magnitude used in the relative-error denominator, so gradients
/// that are zero up to rounding do not report spurious failures.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Outcome of comparing analytic gradients with central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval_loss<F>(loss_fn: &F, params: &ParameterStore) -> Result<f64>
where
    F: for<'p> Fn(&mut Graph<'p>, &'p ParameterStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = loss_fn(&mut g, params)?;
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(Error::NonFinite("loss during gradient check".into()));
    }
    Ok(v)
}

/// Checks every entry of every parameter in `params` against central
/// differences with step `eps`.
pub fn grad_check<F>(
    loss_fn: F,
    params: &ParameterStore,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Graph<'p>, &'p ParameterStore) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps}"
        )));
    }
    let analytic = {
        let mut g = Graph::new();
        g.bind_all(params)?;
        let out = loss_fn(&mut g, params)?;
        if !g.scalar(out).is_finite() {
            return Err(Error::NonFinite("loss during gradient check".into()));
        }
        g.backward(out)?
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        params: Vec::new(),
        tol,
    };
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let n = params.get(&name)?.len();
        let grad = analytic
            .get(&name)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for i in 0..n {
            let orig = probe.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + eps;
            let up = eval_loss(&loss_fn, &probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - eps;
            let down = eval_loss(&loss_fn, &probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            check.max_rel_err = check.max_rel_err.max(relative_error(grad[i], numeric));
            check.max_abs_err = check.max_abs_err.max((grad[i] - numeric).abs());
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_regression_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut params = ParameterStore::new();
        params
            .insert(
                "w",
                Tensor::matrix(3, 1, (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            )
            .unwrap();
        params.insert("b", Tensor::vector(vec![0.3])).unwrap();
        let report = grad_check(
            |g, p| {
                let x = g.constant(Tensor::matrix(4, 3, xs.clone())?);
                let y = g.constant(Tensor::matrix(4, 1, ys.clone())?);
                let w = g.param(p, "w")?;
                let b = g.param(p, "b")?;
                let xw = g.matmul(x, w)?;
                let pred = g.add_row(xw, b)?;
                g.mse(pred, y)
            },
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite_loss() {
        let mut params = ParameterStore::new();
        params.insert("x", Tensor::scalar(1.0)).unwrap();
        assert!(grad_check(|g, p| g.param(p, "x"), &params, 0.0, 1e-3).is_err());
        let r = grad_check(
            |g, p| {
                let x = g.param(p, "x")?;
                Ok(g.scale(x, f64::INFINITY))
            },
            &params,
            1e-5,
            1e-3,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
