//! Balance distance of the two-atom potential.
//!
//! For fixed charges, the Coulomb loss between two atoms as a function of
//! their nucleus separation has the shape `f(d) = c1/d - c2/(d + r~)`, where
//! `c1` sums the homoelectric charge products, `c2` the (negated)
//! heteroelectric ones, and `r~` is the mean radius. When `c2 > c1` the
//! potential has an interior minimum — the balance distance — with the
//! closed form `d* = (c1 + sqrt(c1*c2)) / (c2 - c1) * r~`, which depends on
//! `(c1, c2)` only through `k = c2/c1`: `d* = r~ (sqrt(k)+1)/(k-1)`.
//!
//! [`balance_numeric`] is an independent golden-section minimizer used as
//! the ground truth for the closed form; [`derivative_bisection`] is a
//! second cross-check that brackets the sign change of `f'`.

use serde::Serialize;
use thiserror::Error;

use crate::num::Real;

/// Lower end of the default search bracket.
pub const BRACKET_FLOOR: f64 = 1e-9;
/// Default golden-section interval tolerance.
pub const GOLDEN_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum BalanceError {
    #[error("invalid potential spec: {0}")]
    InvalidSpec(String),
    #[error("no balance point: requires c1 < c2 (got c1 = {c1}, c2 = {c2})")]
    NoBalancePoint { c1: f64, c2: f64 },
    #[error("degenerate spec: r~ = 0 collapses the balance distance to 0")]
    DegenerateRadius,
    #[error("potential evaluated at non-positive distance {0}")]
    NonPositiveDistance(f64),
    #[error("no interior minimum in bracket ({lo}, {hi})")]
    NoInteriorMinimum { lo: f64, hi: f64 },
}

/// The two-atom pair potential `f(d) = c1/d - c2/(d + r~)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairPotentialSpec<F> {
    pub c1: F,
    pub c2: F,
    pub r_tilde: F,
}

impl<F: Real> PairPotentialSpec<F> {
    pub fn new(c1: F, c2: F, r_tilde: F) -> Result<Self, BalanceError> {
        if !(c1.is_finite() && c2.is_finite() && r_tilde.is_finite()) {
            return Err(BalanceError::InvalidSpec("non-finite parameter".into()));
        }
        if c1 <= F::zero() || c2 <= F::zero() {
            return Err(BalanceError::InvalidSpec(format!(
                "c1 and c2 must be positive (got {c1}, {c2})"
            )));
        }
        if r_tilde < F::zero() {
            return Err(BalanceError::InvalidSpec(format!(
                "r~ must be nonnegative (got {r_tilde})"
            )));
        }
        Ok(PairPotentialSpec { c1, c2, r_tilde })
    }

    /// Structure-difference ratio `k = c2/c1`.
    pub fn k(&self) -> F {
        self.c2 / self.c1
    }
}

/// Evaluates the potential at separation `d > 0`.
pub fn potential<F: Real>(spec: &PairPotentialSpec<F>, d: F) -> Result<F, BalanceError> {
    if d <= F::zero() {
        return Err(BalanceError::NonPositiveDistance(d.to_f64_lossy()));
    }
    Ok(spec.c1 / d - spec.c2 / (d + spec.r_tilde))
}

/// Closed-form balance distance `(c1 + sqrt(c1 c2)) / (c2 - c1) * r~`.
///
/// Requires `c2 > c1` (otherwise the potential has no interior minimum) and
/// `r~ > 0` (otherwise the minimum degenerates to zero separation).
pub fn balance_closed_form<F: Real>(spec: &PairPotentialSpec<F>) -> Result<F, BalanceError> {
    if spec.c1 >= spec.c2 {
        return Err(BalanceError::NoBalancePoint {
            c1: spec.c1.to_f64_lossy(),
            c2: spec.c2.to_f64_lossy(),
        });
    }
    if spec.r_tilde <= F::zero() {
        return Err(BalanceError::DegenerateRadius);
    }
    Ok((spec.c1 + (spec.c1 * spec.c2).sqrt()) / (spec.c2 - spec.c1) * spec.r_tilde)
}

/// Default upper bracket for the numeric search: `1e4 * r~`.
pub fn default_bracket<F: Real>(spec: &PairPotentialSpec<F>) -> F {
    F::of(1e4) * spec.r_tilde
}

/// Golden-section minimization of the potential on `[BRACKET_FLOOR, d_max]`
/// down to interval width `tol`. Errors when the minimum sits on the bracket
/// boundary (no interior minimum). Independent of the closed form.
pub fn balance_numeric<F: Real>(
    spec: &PairPotentialSpec<F>,
    d_max: F,
    tol: F,
) -> Result<F, BalanceError> {
    let lo = F::of(BRACKET_FLOOR);
    if d_max <= lo {
        return Err(BalanceError::InvalidSpec(format!(
            "bracket upper end {d_max} not above {lo}"
        )));
    }
    let f = |d: F| spec.c1 / d - spec.c2 / (d + spec.r_tilde);
    let inv_phi = F::of((5.0_f64.sqrt() - 1.0) / 2.0);
    let (mut a, mut b) = (lo, d_max);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    // bracket shrinks by inv_phi each step, so iteration count is bounded
    for _ in 0..10_000 {
        if b - a <= tol {
            break;
        }
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        }
    }
    let d_star = (a + b) / F::of(2.0);
    let margin = tol * F::of(100.0) + (d_max - lo) * F::of(1e-9);
    if d_star - lo < margin || d_max - d_star < margin {
        return Err(BalanceError::NoInteriorMinimum {
            lo: lo.to_f64_lossy(),
            hi: d_max.to_f64_lossy(),
        });
    }
    Ok(d_star)
}

/// Secondary cross-check: bisects the sign change of
/// `f'(d) = -c1/d^2 + c2/(d + r~)^2`.
pub fn derivative_bisection<F: Real>(
    spec: &PairPotentialSpec<F>,
    d_max: F,
    tol: F,
) -> Result<F, BalanceError> {
    let fp = |d: F| -spec.c1 / (d * d) + spec.c2 / ((d + spec.r_tilde) * (d + spec.r_tilde));
    let mut lo = F::of(BRACKET_FLOOR);
    let mut hi = d_max;
    if fp(lo) >= F::zero() || fp(hi) <= F::zero() {
        return Err(BalanceError::NoInteriorMinimum {
            lo: lo.to_f64_lossy(),
            hi: hi.to_f64_lossy(),
        });
    }
    while hi - lo > tol {
        let mid = (lo + hi) / F::of(2.0);
        if fp(mid) < F::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo + hi) / F::of(2.0))
}

/// One row of the balance-distance scan over `k`.
#[derive(Debug, Clone, Serialize)]
pub struct BalancePoint<F> {
    pub k: F,
    pub r_tilde: F,
    pub closed_form: F,
    pub numeric: F,
}

/// Balance distances for a grid of `k` values at a common `r~`. With `c1`
/// normalized to 1, `c2 = k`. All `k` must exceed 1.
pub fn monotonicity_scan<F: Real>(
    ks: &[F],
    r_tilde: F,
) -> Result<Vec<BalancePoint<F>>, BalanceError> {
    ks.iter()
        .map(|&k| {
            if k <= F::one() {
                return Err(BalanceError::InvalidSpec(format!("scan needs k > 1, got {k}")));
            }
            let spec = PairPotentialSpec::new(F::one(), k, r_tilde)?;
            let closed = balance_closed_form(&spec)?;
            let numeric = balance_numeric(&spec, default_bracket(&spec), F::of(GOLDEN_TOL))?;
            Ok(BalancePoint {
                k,
                r_tilde,
                closed_form: closed,
                numeric,
            })
        })
        .collect()
}

/// One sampled point of an energy curve.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint<F> {
    pub k: F,
    pub r_tilde: F,
    pub d: F,
    pub potential: F,
    pub is_balance_point: bool,
}

/// Samples the potential for `c1 = 1, c2 = k` on a log grid spanning
/// `[d*/10, 10 d*]`, with one extra row flagged at the balance point itself.
pub fn energy_curve<F: Real>(
    k: F,
    r_tilde: F,
    samples: usize,
) -> Result<Vec<CurvePoint<F>>, BalanceError> {
    let spec = PairPotentialSpec::new(F::one(), k, r_tilde)?;
    let d_star = balance_closed_form(&spec)?;
    let lo = d_star / F::of(10.0);
    let hi = d_star * F::of(10.0);
    let n = samples.max(2);
    let ratio = (hi / lo).ln() / F::of((n - 1) as f64);
    let mut points = Vec::with_capacity(n + 1);
    for i in 0..n {
        let d = lo * (ratio * F::of(i as f64)).exp();
        points.push(CurvePoint {
            k,
            r_tilde,
            d,
            potential: potential(&spec, d)?,
            is_balance_point: false,
        });
    }
    points.push(CurvePoint {
        k,
        r_tilde,
        d: d_star,
        potential: potential(&spec, d_star)?,
        is_balance_point: true,
    });
    points.sort_by(|a, b| a.d.partial_cmp(&b.d).expect("finite distances"));
    Ok(points)
}

/// Writes energy-curve rows as CSV with the columns
/// `k,r_tilde,d,potential,is_balance_point`.
pub fn write_energy_curve_csv<F: Real + Serialize, W: std::io::Write>(
    writer: W,
    rows: &[CurvePoint<F>],
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(c1: f64, c2: f64, r: f64) -> PairPotentialSpec<f64> {
        PairPotentialSpec::new(c1, c2, r).unwrap()
    }

    #[test]
    fn potential_closed_values() {
        // equal coefficients with zero radius cancel at any d
        let s = spec(1.0, 1.0, 0.0);
        for d in [0.1, 1.0, 42.0] {
            assert_eq!(potential(&s, d).unwrap(), 0.0);
        }
        // direct substitution
        let s2 = spec(1.0, 2.0, 1.0);
        assert_eq!(potential(&s2, 1.0).unwrap(), 0.0);
        // c1 > c2 decays to zero from above
        let s3 = spec(2.0, 1.0, 1.0);
        let tail = potential(&s3, 1e6).unwrap();
        assert!(tail > 0.0 && tail < 1e-5);
        assert!(potential(&s3, 0.0).is_err());
        assert!(potential(&s3, -1.0).is_err());
    }

    #[test]
    fn closed_form_examples_confirmed_by_golden_section() {
        for (c1, c2, r, expect) in [
            (1.0, 4.0, 1.0, 1.0),
            (2.0, 8.0, 2.0, 2.0),
            (1.0, 9.0, 1.0, 0.5),
        ] {
            let s = spec(c1, c2, r);
            let closed = balance_closed_form(&s).unwrap();
            assert!((closed - expect).abs() < 1e-12, "closed {closed} vs {expect}");
            let numeric = balance_numeric(&s, default_bracket(&s), GOLDEN_TOL).unwrap();
            assert!((numeric - expect).abs() < 1e-6, "numeric {numeric} vs {expect}");
            let bisect = derivative_bisection(&s, default_bracket(&s), 1e-12).unwrap();
            assert!((bisect - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn near_degenerate_k_keeps_agreement() {
        let s = spec(1.0, 1.0001, 1.0);
        let closed = balance_closed_form(&s).unwrap();
        // d* is huge here, so widen the bracket beyond the default
        let numeric = balance_numeric(&s, 1e6, 1e-8).unwrap();
        assert!(
            ((closed - numeric) / numeric).abs() < 1e-4,
            "closed {closed} vs numeric {numeric}"
        );
        assert!(closed > 2e4 - 1.0);
    }

    #[test]
    fn no_balance_point_when_c1_dominates() {
        let s = spec(2.0, 1.0, 1.0);
        assert!(matches!(
            balance_closed_form(&s),
            Err(BalanceError::NoBalancePoint { .. })
        ));
        assert!(matches!(
            balance_numeric(&s, default_bracket(&s), GOLDEN_TOL),
            Err(BalanceError::NoInteriorMinimum { .. })
        ));
        // equal coefficients are just as hopeless
        let eq = spec(3.0, 3.0, 1.0);
        assert!(balance_closed_form(&eq).is_err());
    }

    #[test]
    fn degenerate_radius_is_rejected() {
        let s = spec(1.0, 4.0, 0.0);
        assert_eq!(balance_closed_form(&s), Err(BalanceError::DegenerateRadius));
    }

    #[test]
    fn scan_is_strictly_decreasing_and_matches_frozen_values() {
        let rows = monotonicity_scan::<f64>(&[1.5, 2.0, 4.0, 10.0], 1.0).unwrap();
        // frozen from (sqrt(k)+1)/(k-1), confirmed by the golden-section
        // oracle below
        let frozen = [
            4.449489742783178,
            2.414213562373095,
            1.0,
            0.4624752955742944,
        ];
        for (row, expect) in rows.iter().zip(frozen) {
            assert!(
                (row.closed_form - expect).abs() < 1e-9,
                "closed {} vs {expect}",
                row.closed_form
            );
            assert!(
                ((row.numeric - row.closed_form) / row.closed_form).abs() < 1e-5,
                "numeric {} vs closed {}",
                row.numeric,
                row.closed_form
            );
        }
        for pair in rows.windows(2) {
            assert!(pair[1].closed_form < pair[0].closed_form, "strictly decreasing");
        }
    }

    #[test]
    fn scale_invariance_in_coefficients_and_linearity_in_radius() {
        let base = spec(1.0, 4.0, 1.0);
        let d0 = balance_closed_form(&base).unwrap();
        for alpha in [0.25, 3.0, 117.0] {
            let scaled = spec(alpha, 4.0 * alpha, 1.0);
            let d = balance_closed_form(&scaled).unwrap();
            assert!((d - d0).abs() < 1e-12 * alpha.max(1.0), "alpha {alpha}");
        }
        let doubled = spec(1.0, 4.0, 2.0);
        assert!((balance_closed_form(&doubled).unwrap() - 2.0 * d0).abs() < 1e-12);
    }

    #[test]
    fn local_minimum_certificate() {
        for (c1, c2, r) in [(1.0, 4.0, 1.0), (0.3, 2.1, 0.5), (5.0, 6.0, 3.0)] {
            let s = spec(c1, c2, r);
            let d_star = balance_closed_form(&s).unwrap();
            let at_min = potential(&s, d_star).unwrap();
            assert!(at_min < potential(&s, d_star / 2.0).unwrap());
            assert!(at_min < potential(&s, d_star * 2.0).unwrap());
        }
    }

    #[test]
    fn energy_curve_brackets_the_minimum() {
        let rows = energy_curve(4.0, 1.0, 50).unwrap();
        assert_eq!(rows.len(), 51);
        let flagged: Vec<_> = rows.iter().filter(|r| r.is_balance_point).collect();
        assert_eq!(flagged.len(), 1);
        let min_row = rows
            .iter()
            .min_by(|a, b| a.potential.partial_cmp(&b.potential).unwrap())
            .unwrap();
        assert!(min_row.is_balance_point, "flagged row has the lowest energy");
    }

    #[test]
    fn f32_instantiation_agrees_loosely() {
        let s = PairPotentialSpec::new(1.0_f32, 4.0, 1.0).unwrap();
        let closed = balance_closed_form(&s).unwrap();
        assert!((closed - 1.0).abs() < 1e-6);
        let numeric = balance_numeric(&s, 1e4_f32, 1e-5).unwrap();
        assert!((numeric - 1.0).abs() < 1e-3);
    }
}
