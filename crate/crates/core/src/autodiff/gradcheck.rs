use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over every parameter element.
    pub max_relative_error: f64,
    /// Per-tensor maximum, in store order.
    pub per_param: Vec<(String, f64)>,
    pub elements_checked: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Relative error `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks `loss_fn`'s analytic gradient against central finite differences
/// with step `eps`, perturbing every element of every parameter in turn.
///
/// `loss_fn` must build a scalar on a fresh tape from the store's values.
/// The store is restored before returning.
pub fn grad_check<F>(store: &mut ParamStore<f64>, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let analytic = tape.backward(loss, store)?;
    drop(tape);

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store)?;
        tape.scalar(loss)
            .ok_or_else(|| Error::Contract("loss is not scalar".into()))
    };

    let ids: Vec<ParamId> = store.ids().collect();
    let mut per_param = Vec::with_capacity(ids.len());
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in ids {
        let mut param_worst = 0.0f64;
        for k in 0..store.get(id).len() {
            let original = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = original + eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[k] = original - eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[k] = original;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let err = relative_error(analytic.get(id).data()[k], numeric);
            param_worst = param_worst.max(err);
            checked += 1;
        }
        worst = worst.max(param_worst);
        per_param.push((store.name(id).to_string(), param_worst));
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        per_param,
        elements_checked: checked,
    })
}
