use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{dim_err, Result};

/// Denominator floor for the relative error, so entries whose true gradient
/// is near zero are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries_checked: usize,
    /// Parameter and flat element index of the worst entry.
    pub worst: Option<(ParamId, usize)>,
}

/// Compares tape gradients of the scalar `f` against central finite
/// differences for every element of the listed parameters.
///
/// `f` builds the forward pass on a fresh tape and returns a `[1, 1]` node.
pub fn grad_check<F>(store: &mut ParamStore, ids: &[ParamId], eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut scratch = store.clone();
    scratch.zero_grad();
    let mut tape = Tape::new();
    let root = f(&mut tape, &scratch)?;
    if tape.shape(root) != (1, 1) {
        return Err(dim_err("grad_check needs a scalar function"));
    }
    let grads = tape.backward(root);
    tape.accumulate(&grads, &mut scratch)?;

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let root = f(&mut tape, store)?;
        Ok(tape.value(root)[[0, 0]])
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, entries_checked: 0, worst: None };
    for &id in ids {
        let analytic: Vec<f64> = scratch.get(id).grad.iter().copied().collect();
        for (e, &a) in analytic.iter().enumerate() {
            let orig = *store.get(id).values.iter().nth(e).expect("index in range");
            set_flat(store, id, e, orig + eps);
            let up = eval(store)?;
            set_flat(store, id, e, orig - eps);
            let down = eval(store)?;
            set_flat(store, id, e, orig);
            let numeric = (up - down) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((id, e));
            }
        }
    }
    Ok(report)
}

fn set_flat(store: &mut ParamStore, id: ParamId, e: usize, v: f64) {
    *store.get_mut(id).values.iter_mut().nth(e).expect("index in range") = v;
}
