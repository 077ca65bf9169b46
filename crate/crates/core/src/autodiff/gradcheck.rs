//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{CoraError, Result};

/// Denominator floor for relative error, so that gradients that are zero up to
/// round-off are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries whose perturbation flipped a ReLU, gate or sign decision.
    pub excluded: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }

    pub fn excluded(&self) -> usize {
        self.params.iter().map(|p| p.excluded).sum()
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[(String, Tensor)]) -> Result<(f64, u64)>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = f(&g, &vars)?;
    let v = g.value(loss).item();
    Ok((v, g.signature()))
}

/// Compare the analytic gradient of `f` with central differences.
///
/// `f` builds a scalar loss from one graph leaf per entry of `params`. Probes
/// whose `+step` or `-step` evaluation takes a different branch than the base
/// point are excluded and counted rather than compared.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(CoraError::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = f(&g, &vars)?;
    let base_value = g.value(loss).item();
    let base_sig = g.signature();
    let grads = g.backward(loss)?;

    let (again, again_sig) = evaluate(&f, params)?;
    if again.to_bits() != base_value.to_bits() || again_sig != base_sig {
        return Err(CoraError::NonDeterministic {
            first: base_value,
            second: again,
        });
    }

    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut rep = ParamReport {
            name: params[pi].0.clone(),
            max_rel_err: 0.0,
            checked: 0,
            excluded: 0,
        };
        for e in 0..analytic.numel() {
            let orig = work[pi].1.data()[e];
            work[pi].1.data_mut()[e] = orig + step;
            let (fp, sp) = evaluate(&f, &work)?;
            work[pi].1.data_mut()[e] = orig - step;
            let (fm, sm) = evaluate(&f, &work)?;
            work[pi].1.data_mut()[e] = orig;
            if sp != base_sig || sm != base_sig {
                rep.excluded += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * step);
            rep.max_rel_err = rep.max_rel_err.max(relative_error(analytic.data()[e], numeric));
            rep.checked += 1;
        }
        reports.push(rep);
    }
    Ok(GradCheckReport { params: reports, tol })
}
