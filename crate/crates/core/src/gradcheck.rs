//! Central finite-difference verification of tape gradients.
//!
//! For every entry of every checked parameter the analytic gradient is
//! compared against `(f(p+eps) - f(p-eps)) / 2 eps`. The error metric is
//! `|a - fd| / max(|a|, |fd|, 1)`, i.e. relative above unit magnitude and
//! absolute below it, which keeps f32 forward rounding out of the verdict
//! for near-zero gradients.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::{Error, Result, Tensor};

/// Loss value plus named analytic gradients for one evaluation.
pub struct LossEval {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamReport>,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn rel_err(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(1.0)
}

/// Check tape gradients of `f` against central finite differences for all
/// parameters in the store (or `names` when non-empty).
pub fn grad_check<F>(
    store: &ParamStore,
    names: &[&str],
    f: F,
    eps: f32,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<LossEval>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let base = f(store)?;
    if !base.loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", base.loss)));
    }
    let selected: Vec<String> = if names.is_empty() {
        store.names().map(|s| s.to_string()).collect()
    } else {
        names.iter().map(|s| s.to_string()).collect()
    };

    let mut per_param = Vec::new();
    let mut overall = 0.0f64;
    for name in &selected {
        let value = store.get(name)?.clone();
        let zero;
        let analytic = match base.grads.get(name) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(value.shape().to_vec());
                &zero
            }
        };
        let mut report = ParamReport {
            name: name.clone(),
            checked: value.numel(),
            max_rel_err: 0.0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in 0..value.numel() {
            let probe = |delta: f32| -> Result<f64> {
                let mut s = store.clone();
                let mut t = value.clone();
                t.data_mut()[i] += delta;
                s.set(name, t)?;
                let e = f(&s)?;
                if !e.loss.is_finite() {
                    return Err(Error::Numeric("non-finite loss during probe".into()));
                }
                Ok(e.loss)
            };
            let fd = (probe(eps)? - probe(-eps)?) / (2.0 * eps as f64);
            let a = analytic.data()[i] as f64;
            let err = rel_err(a, fd);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_analytic = a;
                report.worst_numeric = fd;
            }
        }
        overall = overall.max(report.max_rel_err);
        per_param.push(report);
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: overall,
        passed: overall < tol,
    })
}
