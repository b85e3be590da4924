//! Central finite-difference oracle for tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::error::Result;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor on the denominator of the relative error so that entries whose true
/// gradient is ~0 are judged by absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the tape gradient of `f` at `point` with central differences.
pub fn finite_diff_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = check_gradients(|t, v| f(t, v[0]), std::slice::from_ref(point), eps, None)?;
    Ok(report.max_rel_error)
}

/// Multi-input variant. With `max_coords = Some(k)`, only `k` seeded random
/// coordinates per input are perturbed.
pub fn check_gradients<F>(f: F, points: &[Tensor], eps: f64, max_coords: Option<usize>) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };

    let mut rng = Rng::seed_from_u64(0x9e37);
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = points.to_vec();
    for (input, point) in points.iter().enumerate() {
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < point.len() => {
                let mut c = sample(&mut rng, point.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..point.len()).collect(),
        };
        for j in coords {
            let orig = point.data()[j];
            work[input].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[input].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[input].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = rel_error(analytic[input].data()[j], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (input, j);
            }
        }
    }
    Ok(report)
}
