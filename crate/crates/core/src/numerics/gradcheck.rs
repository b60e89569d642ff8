use super::registry::{BoundParams, ParamRegistry};
use super::tape::{Tape, Var};
use super::NumericsError;

/// Location and size of the worst disagreement found by [`grad_check_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates left out because the difference stencil crosses a kink
    /// of a piecewise op, where the derivative does not exist.
    pub skipped: usize,
}

fn evaluate<F>(f: &F, params: &ParamRegistry) -> Result<(f64, u64), NumericsError>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(NumericsError::NonFinite { op: "grad_check" });
    }
    Ok((v, tape.branch_signature()))
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences for every scalar in `params`.
///
/// The error per coordinate is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check_report<F>(f: F, params: &ParamRegistry, eps: f64) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var, NumericsError>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(NumericsError::InvalidArgument(format!("eps {eps} outside (0, 1e-3]")));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    if !tape.value(out).item().is_finite() {
        return Err(NumericsError::NonFinite { op: "grad_check" });
    }
    let base = tape.branch_signature();
    let mut grads = tape.backward(out)?;
    let analytic = bound.collect(&tape, &mut grads);
    drop(tape);

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    for id in params.ids() {
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let (plus, sig_plus) = evaluate(&f, &work)?;
            work.get_mut(id).data_mut()[k] = orig - eps;
            let (minus, sig_minus) = evaluate(&f, &work)?;
            work.get_mut(id).data_mut()[k] = orig;
            if sig_plus != base || sig_minus != base {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id.index()].data()[k];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if report.checked == 1 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = params.name(id).to_string();
                report.worst_index = k;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Maximum relative error between analytic and central-difference gradients.
pub fn grad_check<F>(f: F, params: &ParamRegistry, eps: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var, NumericsError>,
{
    grad_check_report(f, params, eps).map(|r| r.max_rel_error)
}
