//! Reverse-mode gradients compared against central finite differences.
//!
//! The analytic side runs on the `f32` training path; the numeric side
//! re-evaluates the same loss in `f64`.

use serde::Serialize;

use super::array::{ParamId, ParamStore};
use super::error::{Result, TensorError};
use super::scalar::Scalar;
use super::tape::{Tape, Var};

/// A scalar loss that can be evaluated at any precision.
pub trait Differentiable {
    fn loss<F: Scalar>(&self, tape: &mut Tape<F>, params: &ParamStore<F>) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Larger tensors are checked on an evenly strided subset of coordinates.
    pub max_coords_per_param: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            tolerance: 1e-4,
            max_coords_per_param: 256,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamGradError {
    pub name: String,
    pub rel_error: f64,
    pub coords_checked: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamGradError>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Reverse-mode gradients in `f32`, one buffer per parameter.
pub fn analytic_grads<N: Differentiable>(
    net: &N,
    params: &ParamStore<f32>,
) -> Result<Vec<Vec<f32>>> {
    let mut work = params.detached();
    let mut tape = Tape::new();
    let loss = net.loss(&mut tape, &work)?;
    tape.backward(loss, &mut work)?;
    Ok(work
        .iter()
        .map(|(_, _, t)| {
            t.grad()
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect())
}

fn eval64<N: Differentiable>(net: &N, params: &ParamStore<f64>) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let l = net.loss(&mut tape, params)?;
    Ok(tape.scalar_value(l))
}

fn coords(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        (0..n).collect()
    } else {
        (0..cap).map(|i| i * n / cap).collect()
    }
}

/// Compares supplied gradients with central differences of the `f64` loss.
pub fn compare_with_finite_differences<N: Differentiable>(
    net: &N,
    params: &ParamStore<f32>,
    analytic: &[Vec<f32>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut p64: ParamStore<f64> = params.detached().cast();
    let base = eval64(net, &p64)?;
    let again = eval64(net, &p64)?;
    if base != again {
        return Err(TensorError::NonDeterministic {
            first: base,
            second: again,
        });
    }
    let mut per_param = Vec::new();
    for (idx, grad) in analytic.iter().enumerate() {
        let id = ParamId(idx);
        let name = p64.name(id).to_string();
        let picks = coords(p64.get(id).numel(), cfg.max_coords_per_param);
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        for &i in &picks {
            let orig = p64.get(id).data()[i];
            p64.get_mut(id).data_mut()[i] = orig + cfg.step;
            let up = eval64(net, &p64)?;
            p64.get_mut(id).data_mut()[i] = orig - cfg.step;
            let down = eval64(net, &p64)?;
            p64.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = grad[i] as f64;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        let rel_error = if scale > 1e-8 {
            diff2.sqrt() / scale
        } else {
            0.0
        };
        per_param.push(ParamGradError {
            name,
            rel_error,
            coords_checked: picks.len(),
        });
    }
    let max_rel_error = per_param.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < cfg.tolerance,
        per_param,
        max_rel_error,
        tolerance: cfg.tolerance,
    })
}

pub fn grad_check<N: Differentiable>(
    net: &N,
    params: &ParamStore<f32>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic = analytic_grads(net, params)?;
    compare_with_finite_differences(net, params, &analytic, cfg)
}
