//! Central-difference verification of hand-written backward passes.
//!
//! The caller runs its analytic backward first (filling `ParamStore` grads),
//! then hands the store and a pure loss closure to [`finite_difference_check`].
//! Every scalar of every trainable tensor is perturbed by `±step` and the
//! numeric slope `(loss(θ+h) - loss(θ-h)) / 2h` is compared against the
//! stored analytic value.

use std::collections::BTreeMap;
use std::fmt;

use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub enum GradCheckError {
    /// The loss closure produced a non-finite value at a perturbed point.
    NonFiniteLoss { name: String, index: usize },
}

impl fmt::Display for GradCheckError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradCheckError::NonFiniteLoss { name, index } => {
                write!(f, "non-finite loss while perturbing {name:?}[{index}]")
            }
        }
    }
}

impl std::error::Error for GradCheckError {}

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    /// Worst relative error seen per parameter name.
    pub per_param: BTreeMap<String, f64>,
    /// Worst relative error over all scalars.
    pub max_rel_err: f64,
    /// Number of scalar slots compared.
    pub scalars_checked: usize,
    pub pass: bool,
}

impl GradCheckReport {
    /// Name of the worst-offending parameter, if any scalar was checked.
    pub fn worst_param(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, &v)| (k.as_str(), v))
    }
}

/// Relative error with a floor that treats tiny disagreements near zero as zero.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Sweeps every trainable scalar in `params`, comparing the stored analytic
/// gradient against a central difference of `loss_fn`.
///
/// `loss_fn` must be a pure function of the parameter values. Analytic
/// gradients already in the store are read, never modified; parameter values
/// are restored exactly after each probe.
pub fn finite_difference_check<F>(
    params: &mut ParamStore,
    mut loss_fn: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&ParamStore) -> f64,
{
    let names = params.names();
    let mut per_param = BTreeMap::new();
    let mut max_rel_err: f64 = 0.0;
    let mut scalars_checked = 0;

    for name in names {
        if !params.get(&name).expect("listed name").trainable {
            continue;
        }
        let n = params.get(&name).expect("listed name").value.len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let (orig, analytic) = {
                let p = params.get(&name).expect("listed name");
                (p.value.data()[i], p.grad.data()[i])
            };

            params.get_mut(&name).expect("listed name").value.data_mut()[i] = orig + step;
            let plus = loss_fn(params);
            params.get_mut(&name).expect("listed name").value.data_mut()[i] = orig - step;
            let minus = loss_fn(params);
            params.get_mut(&name).expect("listed name").value.data_mut()[i] = orig;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(GradCheckError::NonFiniteLoss {
                    name: name.clone(),
                    index: i,
                });
            }

            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic, numeric);
            if err > worst {
                worst = err;
            }
            scalars_checked += 1;
        }
        if worst > max_rel_err {
            max_rel_err = worst;
        }
        per_param.insert(name, worst);
    }

    Ok(GradCheckReport {
        step,
        tolerance,
        per_param,
        max_rel_err,
        scalars_checked,
        pass: max_rel_err <= tolerance,
    })
}
