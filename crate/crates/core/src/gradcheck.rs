//! Central finite-difference audit of tape gradients.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tape::{Tape, Var};

/// Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
/// A central difference resolves derivatives only to about
/// `ulp(f) / eps`, roughly `1e-10 * |f|` at `eps = 1e-6`; the floor keeps
/// that round-off on zero or near-zero gradients from reading as error.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_error: f64,
    pub elements: usize,
}

impl GradCheckReport {
    pub fn worst_group(&self) -> Option<&GroupReport> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// `group,elements,max_rel_error,max_abs_error` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,elements,max_rel_error,max_abs_error\n");
        for g in &self.groups {
            s.push_str(&format!(
                "{},{},{:e},{:e}\n",
                g.name, g.elements, g.max_rel_error, g.max_abs_error
            ));
        }
        s
    }
}

fn evaluate<F>(params: &ParamSet, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Dimension(format!(
            "objective must be scalar, got {:?}",
            v.shape()
        )));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

pub fn finite_diff_check<F>(params: &ParamSet, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    finite_diff_check_with(
        params,
        GradCheckOptions {
            eps,
            ..GradCheckOptions::default()
        },
        f,
    )
}

/// Compares the tape gradient of the scalar objective `f` against central
/// differences `(f(x + eps) - f(x - eps)) / (2 eps)` for every element of
/// every parameter. `f` must be a pure function of the bound parameters.
pub fn finite_diff_check_with<F>(
    params: &ParamSet,
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    if opts.eps <= 0.0 {
        return Err(Error::Config(format!("eps must be positive, got {}", opts.eps)));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    let analytic = bound.gradients(&tape.backward(out)?, params);
    drop(tape);

    let mut work = params.clone();
    let mut groups = Vec::with_capacity(params.len());
    let mut elements = 0;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name)?.len();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..n {
            let x0 = params.get(name)?.data()[k];
            work.get_mut(name)?.data_mut()[k] = x0 + opts.eps;
            let fp = evaluate(&work, &f)?;
            work.get_mut(name)?.data_mut()[k] = x0 - opts.eps;
            let fm = evaluate(&work, &f)?;
            work.get_mut(name)?.data_mut()[k] = x0;

            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic.get(name)?.data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
        }
        elements += n;
        groups.push(GroupReport {
            name: name.clone(),
            elements: n,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups,
        max_rel_error,
        elements,
    })
}
