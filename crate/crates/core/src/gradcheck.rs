//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Params, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst coordinate.
    pub worst_param_path: String,
    pub coords_checked: usize,
}

const DENOM_FLOOR: f64 = 1e-8;

fn eval<F>(f: &F, params: &Params) -> Result<f64>
where
    F: Fn(&mut Graph, &Params) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    Ok(v.item())
}

/// Compares the analytic gradient of `f` at `params` with
/// `(f(p+eps) - f(p-eps)) / (2 eps)` for every coordinate of every parameter.
///
/// `params` grads are overwritten with the analytic gradient.
pub fn grad_check<F>(f: F, params: &mut Params, eps: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &Params) -> Result<Var>,
{
    grad_check_with_floor(f, params, eps, DENOM_FLOOR)
}

/// [`grad_check`] with a caller-chosen lower bound on the relative-error
/// denominator, for functions whose smallest gradients sit near roundoff.
pub fn grad_check_with_floor<F>(
    f: F,
    params: &mut Params,
    eps: f64,
    denom_floor: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &Params) -> Result<Var>,
{
    if !(denom_floor > 0.0) {
        return Err(Error::InvalidInput(format!(
            "denominator floor {denom_floor} must be positive"
        )));
    }
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidInput(format!("eps {eps} outside (0, 1e-2]")));
    }
    let a = eval(&f, params)?;
    let b = eval(&f, params)?;
    if a.to_bits() != b.to_bits() {
        return Err(Error::Nondeterminism(format!(
            "two evaluations gave {a} and {b}"
        )));
    }

    params.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    g.backward(loss, params)?;

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_param_path: String::new(),
        coords_checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for i in 0..params.value(id).numel() {
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&f, params)?;
            params.value_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&f, params)?;
            params.value_mut(id).data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let analytic = params.grad(id).data()[i];
            let denom = analytic.abs().max(numeric.abs()).max(denom_floor);
            let rel = (analytic - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_err || report.worst_param_path.is_empty() {
                report.max_rel_err = rel;
                report.worst_param_path = format!("{}[{i}]", params.name(id));
            }
        }
    }
    Ok(report)
}
