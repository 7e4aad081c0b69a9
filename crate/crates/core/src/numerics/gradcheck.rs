//! Central finite-difference checks against the tape's analytic gradients.
//!
//! The numerical side only ever calls the forward closure, so it stays
//! independent of every backward rule it checks.

use super::{Bound, Graph, ParamStore, Var};
use crate::error::Result;

/// Finite-difference step used by the checks in this crate.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Largest `‖a − n‖ / max(‖a‖, ‖n‖)` over the checked elements of one
    /// tensor, with the same floor as [`rel_err`].
    pub max_tensor_rel_err: f64,
    pub worst_tensor: String,
}

/// Relative error with an absolute floor. Below the floor the comparison is
/// absolute: a gradient that is zero in exact arithmetic (softmax shift
/// invariance, cancelling weights) comes back from central differences as
/// rounding noise of order `ε·|loss| / FD_STEP`, not as zero.
pub const ABS_FLOOR: f64 = 1e-5;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(ABS_FLOOR)
}

/// Checks up to `per_param` evenly spaced elements of every tracked
/// parameter (`usize::MAX` checks them all).
pub fn check_params<F>(store: &mut ParamStore<f64>, per_param: usize, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    check(store, per_param, false, loss)
}

/// [`check_params`] for large ReLU networks. Rounding in the loss gives an
/// error of about `ε·|L| / h`, while every unit whose input crosses zero
/// inside the step adds an error that grows with `h`. Each element gets the
/// smallest step whose rounding error stays near 1e-5 of a first estimate
/// taken at [`FD_STEP`], clamped to `[1e-8, 1e-4]`. The analytic value never
/// enters the choice.
pub fn check_params_adaptive<F>(store: &mut ParamStore<f64>, per_param: usize, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    check(store, per_param, true, loss)
}

fn check<F>(store: &mut ParamStore<f64>, per_param: usize, adaptive: bool, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g)?;
    let l = loss(&mut g, &bound)?;
    let rounding = 4.0 * f64::EPSILON * g.value(l).item().abs().max(1.0);
    let grads = g.backward(l)?;
    let analytic: Vec<Option<Vec<f64>>> =
        store.ids().map(|id| grads.raw(bound.get(id)).map(<[f64]>::to_vec)).collect();
    drop(g);

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let b = store.bind(&mut g)?;
        let l = loss(&mut g, &b)?;
        Ok(g.value(l).item())
    };

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        if !store.get(id).requires_grad {
            continue;
        }
        let n = store.get(id).value.len();
        let stride = if per_param >= n { 1 } else { n.div_ceil(per_param) };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for e in (0..n).step_by(stride) {
            let mut central = |h: f64| -> Result<f64> {
                let orig = store.get(id).value.data()[e];
                store.get_mut(id).value.data_mut()[e] = orig + h;
                let up = eval(store)?;
                store.get_mut(id).value.data_mut()[e] = orig - h;
                let down = eval(store)?;
                store.get_mut(id).value.data_mut()[e] = orig;
                Ok((up - down) / (2.0 * h))
            };
            let mut numeric = central(FD_STEP)?;
            if adaptive {
                let h = (rounding / (1e-5 * numeric.abs())).clamp(1e-8, 1e-4);
                numeric = central(h)?;
            }
            let analytic = analytic[pi].as_ref().map_or(0.0, |g| g[e]);
            let err = rel_err(analytic, numeric);
            diff += (analytic - numeric) * (analytic - numeric);
            na += analytic * analytic;
            nn += numeric * numeric;
            report.checked += 1;
            if report.checked == 1 || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = e;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
        let err = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(ABS_FLOOR);
        if report.worst_tensor.is_empty() || err > report.max_tensor_rel_err {
            report.max_tensor_rel_err = err;
            report.worst_tensor = store.get(id).name.clone();
        }
    }
    Ok(report)
}
