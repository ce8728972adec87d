//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Result, VredError};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
/// Step for [`Stencil::Richardson`] on full training objectives.
pub const RICHARDSON_EPS: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
    pub max_rel_error: f64,
    /// `(group, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// `(analytic, numeric)` at the worst coordinate.
    pub worst_values: Option<(f64, f64)>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if !analytic.is_finite() || !numeric.is_finite() {
        return f64::INFINITY;
    }
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Finite-difference formula used by [`finite_difference_check_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(p+e) − f(p−e)) / 2e`.
    Central,
    /// Richardson extrapolation of two central differences at `e` and `2e`,
    /// accurate to `O(e⁴)`. The larger usable step keeps cancellation error
    /// small when a loss of order 10 has gradient coordinates near 1e-8.
    Richardson,
    /// Ridders' method: central differences at steps `e, e/1.4, e/1.4², ...`
    /// extrapolated to zero step, stopping once the error estimate grows.
    /// Up to 20 evaluations per coordinate.
    Ridders,
    /// [`Stencil::Richardson`] at `e`, re-estimated with [`Stencil::Ridders`]
    /// from [`RIDDERS_STEP`] wherever the cheap estimate and the analytic
    /// value differ by more than [`REFINE_BELOW`] relative error.
    Adaptive,
}

/// Initial step of the Ridders refinement in [`Stencil::Adaptive`].
pub const RIDDERS_STEP: f64 = 0.1;
/// Relative error above which [`Stencil::Adaptive`] refines a coordinate.
pub const REFINE_BELOW: f64 = 1e-6;

const RIDDERS_SHRINK: f64 = 1.4;
const RIDDERS_TABLE: usize = 10;

/// Ridders' extrapolation over a central-difference function `d(h)`.
fn ridders(mut d: impl FnMut(f64) -> f64, h0: f64) -> f64 {
    let shrink2 = RIDDERS_SHRINK * RIDDERS_SHRINK;
    let mut h = h0;
    let mut prev: Vec<f64> = vec![d(h)];
    let mut best = prev[0];
    let mut err = f64::INFINITY;
    for i in 1..RIDDERS_TABLE {
        h /= RIDDERS_SHRINK;
        let mut row = vec![d(h)];
        let mut fac = shrink2;
        for j in 1..=i {
            let next = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= shrink2;
            let e = (next - row[j - 1]).abs().max((next - prev[j - 1]).abs());
            if e <= err {
                err = e;
                best = next;
            }
            row.push(next);
        }
        if (row[i] - prev[i - 1]).abs() >= 2.0 * err {
            break;
        }
        prev = row;
    }
    best
}

/// Compares `backward()` against central differences for every coordinate of
/// every parameter group. `build` must construct a scalar loss from leaves
/// bound to `params` (in order), and must be a deterministic function of them.
pub fn finite_difference_check<F>(params: &[Tensor], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_difference_check_with(params, Stencil::Central, eps, build)
}

pub fn finite_difference_check_with<F>(
    params: &[Tensor],
    stencil: Stencil,
    eps: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(VredError::Config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let analytic = {
        let mut g = Graph::new();
        let vars = params
            .iter()
            .map(|p| g.variable(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter()
            .zip(params)
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect::<Vec<_>>()
    };

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = ps
            .iter()
            .map(|p| g.constant_ref(p))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut work = params.to_vec();
    // Central difference at step `h` for one coordinate; NaN if either side fails.
    let central = |work: &mut [Tensor], gi: usize, ci: usize, h: f64| -> f64 {
        let orig = work[gi].data()[ci];
        work[gi].data_mut()[ci] = orig + h;
        let plus = eval(work);
        work[gi].data_mut()[ci] = orig - h;
        let minus = eval(work);
        work[gi].data_mut()[ci] = orig;
        match (plus, minus) {
            (Ok(p), Ok(m)) => (p - m) / (2.0 * h),
            _ => f64::NAN,
        }
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: None,
        coordinates: 0,
    };
    for gi in 0..params.len() {
        for ci in 0..params[gi].len() {
            let numeric = match stencil {
                Stencil::Central => central(&mut work, gi, ci, eps),
                Stencil::Richardson => {
                    let d1 = central(&mut work, gi, ci, eps);
                    let d2 = central(&mut work, gi, ci, 2.0 * eps);
                    (4.0 * d1 - d2) / 3.0
                }
                Stencil::Ridders => ridders(|h| central(&mut work, gi, ci, h), eps),
                Stencil::Adaptive => {
                    let d1 = central(&mut work, gi, ci, eps);
                    let d2 = central(&mut work, gi, ci, 2.0 * eps);
                    let quick = (4.0 * d1 - d2) / 3.0;
                    if relative_error(analytic[gi].data()[ci], quick) > REFINE_BELOW {
                        ridders(|h| central(&mut work, gi, ci, h), RIDDERS_STEP)
                    } else {
                        quick
                    }
                }
            };
            let err = relative_error(analytic[gi].data()[ci], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = Some((gi, ci));
                report.worst_values = Some((analytic[gi].data()[ci], numeric));
            }
        }
    }
    Ok(report)
}

/// Single-tensor convenience form of [`finite_difference_check`].
pub fn check_gradient<F>(param: &Tensor, eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_difference_check(std::slice::from_ref(param), eps, |g, vs| build(g, vs[0]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn richardson_is_exact_for_quartics() {
        let p = Tensor::vector(vec![0.7, -1.3]);
        let r = finite_difference_check_with(
            std::slice::from_ref(&p),
            Stencil::Richardson,
            0.1,
            |g, v| {
                let y = g.square(v[0])?;
                let y = g.square(y)?;
                g.sum(y)
            },
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-12, "{r:?}");
    }

    #[test]
    fn square_matches_closed_form() {
        let p = Tensor::scalar(3.0);
        let r = check_gradient(&p, DEFAULT_EPS, |g, x| {
            let y = g.square(x)?;
            g.sum(y)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::vector(vec![1.0, -2.0]);
        let r = check_gradient(&p, DEFAULT_EPS, |g, x| {
            let z = g.scale(x, 0.0)?;
            let s = g.sum(z)?;
            g.offset(s, 4.0)
        })
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.coordinates, 2);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        // log near zero: a large eps straddles the domain boundary and evaluation fails.
        let p = Tensor::scalar(1e-6);
        let r = check_gradient(&p, 1e-3, |g, x| {
            let y = g.log(x)?;
            g.sum(y)
        })
        .unwrap();
        assert!(r.max_rel_error.is_infinite());
    }
}
