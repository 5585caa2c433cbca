use super::{BoundParams, Fault, Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter and flat offset attaining the maximum.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub n_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `backward` against central differences `(f(x+h) - f(x-h)) / 2h`
/// over every scalar entry of every parameter.
///
/// `build` records the scalar objective on the supplied tape; it must be a
/// pure function of the bound parameters.
pub fn finite_difference_check<F>(params: &ParamStore, h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BoundParams<'_>) -> Result<Var>,
{
    check(params, h, None, build)
}

#[doc(hidden)]
pub fn finite_difference_check_with_fault<F>(
    params: &ParamStore,
    h: f64,
    fault: Fault,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BoundParams<'_>) -> Result<Var>,
{
    check(params, h, Some(fault), build)
}

fn check<F>(params: &ParamStore, h: f64, fault: Option<Fault>, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BoundParams<'_>) -> Result<Var>,
{
    let mut tape = match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let bound = tape.bind(params);
    let loss = build(&mut tape, &bound)?;
    let grads = tape.gradients(loss, params)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = tape.bind(store);
        let loss = build(&mut tape, &bound)?;
        Ok(tape.scalar(loss))
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        n_checked: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for (pi, name) in names.iter().enumerate() {
        let n = params.get(name).map_or(0, |t| t.len());
        for flat in 0..n {
            let original = entry(&probe, name, flat);
            set_entry(&mut probe, name, flat, original + h);
            let plus = eval(&probe)?;
            set_entry(&mut probe, name, flat, original - h);
            let minus = eval(&probe)?;
            set_entry(&mut probe, name, flat, original);

            let numeric = (plus - minus) / (2.0 * h);
            let g = grads.get(pi);
            let analytic = g[[flat / g.ncols(), flat % g.ncols()]];
            let err = relative_error(analytic, numeric);
            report.n_checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), flat));
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn entry(store: &ParamStore, name: &str, flat: usize) -> f64 {
    let t = store.get(name).expect("known parameter");
    let cols = t.ncols();
    t[[flat / cols, flat % cols]]
}

fn set_entry(store: &mut ParamStore, name: &str, flat: usize, value: f64) {
    let t = store.get_mut(name).expect("known parameter");
    let cols = t.ncols();
    t[[flat / cols, flat % cols]] = value;
}
