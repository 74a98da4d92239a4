// SPDX-License-Identifier: Apache-2.0

//! Lower real branch of the Lambert W function.

use std::f64::consts::E;

use super::PrivacyError;

/// -1/e, the branch point.
pub const BRANCH_POINT: f64 = -1.0 / E;

const MAX_ITER: usize = 100;

/// Solves `w * exp(w) = x` for `w <= -1`, with `x` in `[-1/e, 0)`.
///
/// Halley iteration from a series (near the branch point) or asymptotic
/// (near zero) start, kept inside a shrinking bracket `[lo, -1]` so that a
/// bad step degrades to bisection instead of diverging.
pub fn lambert_w_minus1(x: f64) -> Result<f64, PrivacyError> {
    if !x.is_finite() || x >= 0.0 {
        return Err(PrivacyError::Domain(format!("lambert W-1 argument {x} not in [-1/e, 0)")));
    }
    // 1 + e*x, computed with a fused multiply-add to keep precision near the branch point.
    let q = E.mul_add(x, 1.0);
    if q < -4.0 * f64::EPSILON {
        return Err(PrivacyError::Domain(format!("lambert W-1 argument {x} below -1/e")));
    }
    // The f64 nearest -1/e sits a few ulps off the true branch point; snap
    // anything that close to the exact answer.
    if q <= 4.0 * f64::EPSILON {
        return Ok(-1.0);
    }

    let residual = |w: f64| w * w.exp() - x;

    let l1 = (-x).ln();
    // w*e^w is decreasing on (-inf, -1]; residual(lo) > 0 >= residual(hi).
    let mut lo = 2.0 * l1 - 2.0;
    let mut hi = -1.0;

    let mut w = if q < 0.25 {
        let p = -(2.0 * q).sqrt();
        -1.0 + p * (1.0 + p * (-1.0 / 3.0 + p * (11.0 / 72.0 + p * (-43.0 / 540.0))))
    } else {
        let l2 = (-l1).ln();
        l1 - l2 + l2 / l1
    };
    if !(w > lo && w < hi) {
        w = 0.5 * (lo + hi);
    }

    for _ in 0..MAX_ITER {
        let ew = w.exp();
        let f = w * ew - x;
        if f == 0.0 {
            return Ok(w);
        }
        if f > 0.0 {
            lo = w;
        } else {
            hi = w;
        }
        let wp1 = w + 1.0;
        let mut next = if wp1 != 0.0 {
            let fp = ew * wp1;
            w - f / (fp - (w + 2.0) * f / (2.0 * wp1))
        } else {
            f64::NAN
        };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - w).abs() <= 4.0 * f64::EPSILON * w.abs() || next == lo || next == hi {
            w = next;
            break;
        }
        w = next;
    }

    // Polish: pick whichever neighbour has the smallest residual.
    let mut best = w;
    let mut best_r = residual(w).abs();
    for cand in [w.next_up(), w.next_down()] {
        if cand <= -1.0 {
            let r = residual(cand).abs();
            if r < best_r {
                best = cand;
                best_r = r;
            }
        }
    }
    Ok(best)
}
