//! Derivative-free minimization over control sets.

use super::{Control, ControlSet};

const GOLDEN: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Scalar {
    pub u: f64,
    pub val: f64,
    pub achieved: bool,
}

fn eval<F: Fn(f64) -> f64>(f: &F, u: f64) -> f64 {
    let v = f(u);
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

fn sample_points(lo: f64, hi: f64) -> Vec<f64> {
    let mut pts = Vec::with_capacity(200);
    if lo.is_finite() && hi.is_finite() {
        let n = 128;
        pts.extend((0..=n).map(|k| lo + (hi - lo) * k as f64 / n as f64));
        pts[n] = hi;
        pts.push(0f64.clamp(lo, hi));
    } else {
        let c = 0f64.clamp(lo, hi);
        pts.push(c);
        // geometric ladder from 2^-6 out to 2^30 in steps of sqrt(2)
        for k in -12..=60 {
            let d = 2f64.powf(k as f64 * 0.5);
            for v in [c - d, c + d] {
                if v >= lo && v <= hi {
                    pts.push(v);
                }
            }
        }
        let (a, b) = ((c - 4.0).max(lo), (c + 4.0).min(hi));
        pts.extend((0..=64).map(|k| a + (b - a) * k as f64 / 64.0));
        if lo.is_finite() {
            pts.push(lo);
        }
        if hi.is_finite() {
            pts.push(hi);
        }
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    pts
}

/// Golden-section search on `[a, b]` until the bracket is narrower than `tol`.
fn golden<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let mut x1 = b - GOLDEN * (b - a);
    let mut x2 = a + GOLDEN * (b - a);
    let mut f1 = eval(f, x1);
    let mut f2 = eval(f, x2);
    while (b - a) > tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - GOLDEN * (b - a);
            f1 = eval(f, x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + GOLDEN * (b - a);
            f2 = eval(f, x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Minimize a scalar function on `[lo, hi]` (bounds may be infinite).
///
/// A sample scan brackets the global minimum, golden-section refines it, and
/// among near-equal candidates the one of smallest magnitude is returned.
pub(crate) fn minimize_scalar<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64, tol: f64) -> Scalar {
    let pts = sample_points(lo, hi);
    let vals: Vec<f64> = pts.iter().map(|&u| eval(f, u)).collect();
    let mut i = 0;
    for k in 1..vals.len() {
        if vals[k] < vals[i] || (vals[k] == vals[i] && pts[k].abs() < pts[i].abs()) {
            i = k;
        }
    }
    let last = pts.len() - 1;
    if (i == 0 && lo == f64::NEG_INFINITY && pts.len() > 1 && vals[0] < vals[1])
        || (i == last && hi == f64::INFINITY && last > 0 && vals[last] < vals[last - 1])
    {
        return Scalar { u: pts[i], val: vals[i], achieved: false };
    }
    let a = pts[i.saturating_sub(1)];
    let b = pts[(i + 1).min(last)];
    let (ug, vg) = golden(f, a, b, tol);

    let mut best = Scalar { u: pts[i], val: vals[i], achieved: true };
    if vg < best.val {
        best = Scalar { u: ug, val: vg, achieved: true };
    }
    // smallest-norm tie break among evaluated points
    let tie = 1e-13 * (1.0 + best.val.abs());
    for (&u, &v) in pts.iter().zip(&vals) {
        if v <= best.val + tie && u.abs() < best.u.abs() {
            best = Scalar { u, val: v, achieved: true };
        }
    }
    best
}

/// Minimize over a control set; coordinate descent on boxes.
pub(crate) fn minimize(f: &dyn Fn(&[f64]) -> f64, set: &ControlSet, tol: f64) -> (Control, f64, bool) {
    let m = set.dim();
    let bounds: Vec<(f64, f64)> = (0..m).map(|i| set.bounds(i)).collect();
    let mut u = set.smallest_norm_point();
    if m == 1 {
        let s = minimize_scalar(&|v| f(&[v]), bounds[0].0, bounds[0].1, tol);
        u[0] = s.u;
        return (u, s.val, s.achieved);
    }
    let mut val = f(&u);
    for _ in 0..200 {
        let mut change: f64 = 0.0;
        for i in 0..m {
            let base = u.clone();
            let s = minimize_scalar(
                &|v| {
                    let mut trial = base.clone();
                    trial[i] = v;
                    f(&trial)
                },
                bounds[i].0,
                bounds[i].1,
                tol,
            );
            if !s.achieved {
                u[i] = s.u;
                return (u.clone(), f(&u), false);
            }
            if s.val <= val {
                change = change.max((s.u - u[i]).abs());
                u[i] = s.u;
                val = s.val;
            }
        }
        if change <= tol {
            break;
        }
    }
    (u, val, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_quadratic() {
        let s = minimize_scalar(&|u: f64| (u - 0.3).powi(2), -1.0, 1.0, 1e-10);
        assert!(s.achieved);
        assert!((s.u - 0.3).abs() < 1e-8);
    }

    #[test]
    fn scalar_unbounded_linear_is_not_attained() {
        let s = minimize_scalar(&|u: f64| 2.0 * u, f64::NEG_INFINITY, f64::INFINITY, 1e-8);
        assert!(!s.achieved);
    }

    #[test]
    fn flat_function_picks_smallest_norm() {
        let s = minimize_scalar(&|_u: f64| 1.0, -2.0, 3.0, 1e-8);
        assert_eq!(s.u, 0.0);
    }

    #[test]
    fn box_descent_on_separable_quadratic() {
        let set = ControlSet::boxed(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let (u, _, ok) = minimize(&|u| (u[0] - 0.5).powi(2) + (u[1] + 2.0).powi(2) + 0.1 * u[0] * u[1], &set, 1e-9);
        assert!(ok);
        // u1 saturates at -1; then u0 minimizes (u0-0.5)^2 - 0.1 u0
        assert!((u[1] + 1.0).abs() < 1e-8);
        assert!((u[0] - 0.55).abs() < 1e-7);
    }
}
