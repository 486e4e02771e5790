use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tape, Var};
use crate::rng::SplitMix64;

/// Settings for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per tensor; `None` checks every coordinate.
    pub coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// Denominator floor of the relative error, as a multiple of
    /// `max(1, |loss|)`. Central differences carry roundoff of roughly
    /// `1e-16·|loss| / eps`, so derivatives much smaller than this floor
    /// (for instance ones that are exactly zero by symmetry) cannot be
    /// resolved and are compared absolutely instead.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            coords_per_tensor: None,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    /// Checked coordinates whose derivative exceeds the floor, i.e. those
    /// compared in the relative sense.
    pub resolved: usize,
}

/// Relative discrepancy between an analytic and a numeric derivative.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    rel_error_floored(analytic, numeric, 1e-8)
}

/// [`rel_error`] with an explicit denominator floor.
pub fn rel_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, params: &ParamSet, name: &str) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::Numeric {
            name: name.to_string(),
            detail: format!("loss evaluated to {v} while perturbing this parameter"),
        });
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences, returning the largest relative error over the
/// checked coordinates.
pub fn grad_check<F>(f: F, params: &ParamSet, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::Numeric {
            name: "loss".into(),
            detail: "non-finite loss at the unperturbed point".into(),
        });
    }
    let grads = tape.backward(loss)?;
    let floor = opts.floor * tape.scalar(loss).abs().max(1.0);

    let mut rng = SplitMix64::new(opts.seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        resolved: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name)?.len();
        let mut coords: Vec<usize> = (0..n).collect();
        if let Some(k) = opts.coords_per_tensor {
            if k < n {
                rng.shuffle(&mut coords);
                coords.truncate(k);
            }
        }
        for idx in coords {
            let orig = params.get(&name)?.data()[idx];
            probe.get_mut(&name)?.data_mut()[idx] = orig + opts.eps;
            let up = eval(&f, &probe, &name)?;
            probe.get_mut(&name)?.data_mut()[idx] = orig - opts.eps;
            let down = eval(&f, &probe, &name)?;
            probe.get_mut(&name)?.data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * opts.eps);
            let analytic = grads.get(&name).map_or(0.0, |g| g[idx]);
            let err = rel_error_floored(analytic, numeric, floor);
            report.checked += 1;
            if analytic.abs().max(numeric.abs()) > floor {
                report.resolved += 1;
            }
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                if err >= report.max_rel_error {
                    report.worst_param = name.clone();
                    report.worst_index = idx;
                }
            }
        }
    }
    Ok(report)
}
