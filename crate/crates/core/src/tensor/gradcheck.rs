use super::{ModelParams, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes skipped because x-h or x+h fell on a different ReLU/max branch
    /// than x, where the central difference does not estimate the derivative.
    pub kinked: usize,
    /// (input index, flat coordinate, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative error with a small absolute floor so that exact zeros compare cleanly.
fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Check `f` at `inputs` with step `h`.
///
/// `f` rebuilds the graph from scratch each call and returns a scalar var.
/// `coords` limits which flat coordinates of each input are probed
/// (`None` probes all of them).
pub fn check_gradients<F>(
    inputs: &[Tensor],
    coords: Option<&[Vec<usize>]>,
    h: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let base = tape.branch_signature();

    let eval = |perturbed: &[Tensor]| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok((t.value(l).data()[0], t.branch_signature()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        kinked: 0,
        worst: None,
    };
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let all: Vec<usize>;
        let probe: &[usize] = match coords {
            Some(c) => &c[k],
            None => {
                all = (0..input.numel()).collect();
                &all
            }
        };
        let analytic = grads.wrt(vars[k]);
        for &i in probe {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            if plus.1 != base || minus.1 != base {
                report.kinked += 1;
                continue;
            }
            let numeric = (plus.0 - minus.0) / (2.0 * h);
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((k, i, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Same check over named model parameters.
///
/// `probes` lists (parameter name, flat coordinate) pairs to perturb.
pub fn check_param_gradients<F>(
    params: &ModelParams,
    probes: &[(String, usize)],
    h: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ModelParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let grads = tape.backward(loss)?.for_params(params);
    let base = tape.branch_signature();

    let eval = |p: &ModelParams| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let l = f(&mut t, p)?;
        Ok((t.value(l).data()[0], t.branch_signature()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        kinked: 0,
        worst: None,
    };
    let mut work = params.clone();
    for (k, (name, i)) in probes.iter().enumerate() {
        let orig = *slot(&mut work, name, *i)?;
        *slot(&mut work, name, *i)? = orig + h;
        let plus = eval(&work)?;
        *slot(&mut work, name, *i)? = orig - h;
        let minus = eval(&work)?;
        *slot(&mut work, name, *i)? = orig;
        if plus.1 != base || minus.1 != base {
            report.kinked += 1;
            continue;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * h);
        let a = grads[name].data()[*i];
        let err = rel_error(a, numeric);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((k, *i, a, numeric));
        }
    }
    Ok(report)
}

fn slot<'a>(p: &'a mut ModelParams, name: &str, i: usize) -> Result<&'a mut f64> {
    p.get_mut(name)
        .and_then(|t| t.data_mut().get_mut(i))
        .ok_or_else(|| Error::contract(format!("no coordinate {i} in {name}")))
}
