//! 2D multilateration: linear initial guess refined by Levenberg-Marquardt.

use crate::error::{Error, Result};
use crate::geometry::Point;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 100;
const MAX_CONDITION: f64 = 1e8;
const SINGULAR_NUDGE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionEstimate {
    pub position: Point,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn check_inputs(anchors: &[Point], distances: &[f64]) -> Result<()> {
    if anchors.len() != distances.len() {
        return Err(Error::Validation(format!(
            "{} anchors but {} distances",
            anchors.len(),
            distances.len()
        )));
    }
    if anchors.len() < 3 {
        return Err(Error::InsufficientSamples {
            needed: 3,
            got: anchors.len(),
        });
    }
    Ok(())
}

/// Closed-form guess: subtracts the first circle equation from the others
/// and solves the normal equations of the resulting linear system.
pub fn linear_init(anchors: &[Point], distances: &[f64]) -> Result<Point> {
    check_inputs(anchors, distances)?;
    let (p0, d0) = (anchors[0], distances[0]);
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, d) in anchors[1..].iter().zip(&distances[1..]) {
        let row = (*p - p0) * 2.0;
        let rhs = d0 * d0 - d * d + p.dot(*p) - p0.dot(p0);
        a11 += row.x * row.x;
        a12 += row.x * row.y;
        a22 += row.y * row.y;
        b1 += row.x * rhs;
        b2 += row.y * rhs;
    }
    let cond = condition_2x2(a11, a12, a22);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::DegenerateGeometry(cond));
    }
    let det = a11 * a22 - a12 * a12;
    Ok(Point::new((a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det))
}

/// Condition number of a symmetric 2×2 matrix.
fn condition_2x2(a11: f64, a12: f64, a22: f64) -> f64 {
    let mean = 0.5 * (a11 + a22);
    let spread = (0.25 * (a11 - a22).powi(2) + a12 * a12).sqrt();
    let (hi, lo) = (mean + spread, mean - spread);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Residuals `‖p − aᵢ‖ − dᵢ`.
pub fn residuals(anchors: &[Point], distances: &[f64], p: Point) -> Vec<f64> {
    anchors.iter().zip(distances).map(|(a, d)| p.distance(*a) - d).collect()
}

/// Analytic Jacobian of [`residuals`]; rows are `(p − aᵢ)/‖p − aᵢ‖`.
pub fn jacobian(anchors: &[Point], p: Point) -> Vec<[f64; 2]> {
    anchors
        .iter()
        .map(|a| {
            let mut diff = p - *a;
            let mut r = diff.norm();
            if r < SINGULAR_NUDGE {
                diff = diff + Point::new(SINGULAR_NUDGE, 0.0);
                r = diff.norm();
            }
            [diff.x / r, diff.y / r]
        })
        .collect()
}

fn cost(anchors: &[Point], distances: &[f64], p: Point) -> f64 {
    residuals(anchors, distances, p).iter().map(|r| r * r).sum()
}

/// Levenberg-Marquardt refinement of `init`.
pub fn nlls_solve(anchors: &[Point], distances: &[f64], init: Point, tol: f64, max_iter: usize) -> Result<PositionEstimate> {
    nlls_solve_traced(anchors, distances, init, tol, max_iter).map(|(e, _)| e)
}

/// Like [`nlls_solve`], also returning the cost after every accepted step.
pub fn nlls_solve_traced(
    anchors: &[Point],
    distances: &[f64],
    init: Point,
    tol: f64,
    max_iter: usize,
) -> Result<(PositionEstimate, Vec<f64>)> {
    check_inputs(anchors, distances)?;
    let mut p = init;
    let mut c = cost(anchors, distances, p);
    let mut history = vec![c];
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let r = residuals(anchors, distances, p);
        let j = jacobian(anchors, p);
        let (mut h11, mut h12, mut h22, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (row, ri) in j.iter().zip(&r) {
            h11 += row[0] * row[0];
            h12 += row[0] * row[1];
            h22 += row[1] * row[1];
            g1 += row[0] * ri;
            g2 += row[1] * ri;
        }
        let (d11, d22) = (h11 + lambda * h11.max(1e-12), h22 + lambda * h22.max(1e-12));
        let det = d11 * d22 - h12 * h12;
        if !(det.abs() > 0.0) {
            break;
        }
        let step = Point::new(-(d22 * g1 - h12 * g2) / det, -(d11 * g2 - h12 * g1) / det);
        let candidate = p + step;
        let c_new = cost(anchors, distances, candidate);
        if c_new <= c {
            p = candidate;
            c = c_new;
            history.push(c);
            lambda = (lambda / 3.0).max(1e-12);
            if step.norm() < tol {
                converged = true;
                break;
            }
        } else {
            lambda *= 4.0;
            if step.norm() < tol {
                converged = true;
                break;
            }
        }
    }
    Ok((
        PositionEstimate {
            position: p,
            residual_norm: c.sqrt(),
            iterations,
            converged,
        },
        history,
    ))
}

/// Linear initialisation followed by NLLS refinement.
pub fn locate(anchors: &[Point], distances: &[f64], tol: f64, max_iter: usize) -> Result<PositionEstimate> {
    let init = linear_init(anchors, distances)?;
    nlls_solve(anchors, distances, init, tol, max_iter)
}
