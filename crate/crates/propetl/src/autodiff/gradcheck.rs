//! Central-difference gradient checking for graph-built scalar functions.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Compares the analytic gradient of `build` (a tensor-to-scalar function
/// expressed as graph construction from a single leaf) against central
/// differences with the given epsilon. Checks `coords` if provided, else
/// every coordinate. Relative error uses |analytic| + 1e-8 as denominator.
pub fn finite_difference_check(
    point: &Tensor,
    epsilon: f64,
    coords: Option<&[usize]>,
    build: &dyn Fn(&mut Graph, NodeId) -> Result<NodeId>,
) -> Result<FdReport> {
    let eval = |data: &[f32], want_grad: bool| -> Result<(f64, Option<Vec<f32>>)> {
        let mut g = Graph::new();
        let x = g.leaf_parts(point.shape().to_vec(), data.to_vec(), want_grad);
        let loss = build(&mut g, x)?;
        if g.value(loss).len() != 1 {
            return Err(Error::invalid("finite_difference_check", "build must return a scalar"));
        }
        let v = g.scalar_f64(loss);
        if want_grad {
            g.backward(loss)?;
            let grad = g
                .grad(x)
                .ok_or_else(|| Error::invalid("finite_difference_check", "no gradient reached the leaf"))?
                .to_vec();
            Ok((v, Some(grad)))
        } else {
            Ok((v, None))
        }
    };

    let (_, grad) = eval(point.data(), true)?;
    let grad = grad.unwrap();

    let all: Vec<usize>;
    let coords: &[usize] = match coords {
        Some(c) => c,
        None => {
            all = (0..point.numel()).collect();
            &all
        }
    };

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    let mut perturbed = point.data().to_vec();
    for &i in coords {
        if i >= perturbed.len() {
            return Err(Error::invalid(
                "finite_difference_check",
                format!("coordinate {i} out of range for {} elements", perturbed.len()),
            ));
        }
        let orig = perturbed[i];
        let plus = (orig as f64 + epsilon) as f32;
        let minus = (orig as f64 - epsilon) as f32;
        perturbed[i] = plus;
        let (up, _) = eval(&perturbed, false)?;
        perturbed[i] = minus;
        let (down, _) = eval(&perturbed, false)?;
        perturbed[i] = orig;
        // Divide by the step that was actually realized after the f32 cast.
        let numeric = (up - down) / (plus as f64 - minus as f64);
        let analytic = grad[i] as f64;
        let rel = (analytic - numeric).abs() / (analytic.abs() + 1e-8);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = i;
            report.analytic_at_worst = analytic;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}
