//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::params::{Bindings, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all entries.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Compares the tape gradient of `f` against central differences for every
/// scalar entry of `params`.
pub fn grad_check<F>(f: F, params: &ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Contract(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let out = f(&mut tape, &b).map_err(unstable)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite objective".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let bindings = params.bind(&mut tape);
    let out = f(&mut tape, &bindings).map_err(unstable)?;
    tape.backward(out)?;
    let analytic = bindings.gradients(&tape);

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.require(&name)?.data().len();
        for k in 0..n {
            let orig = params.require(&name)?.data()[k];
            work.get_mut(&name).unwrap().data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.require(&name)?.data()[k];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst_param = name.clone();
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}

fn unstable(e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("unstable intermediate: {msg}")),
        other => other,
    }
}
