// SPDX-License-Identifier: Apache-2.0

//! Planar-Laplace location obfuscation.
//!
//! A broadcast position is displaced by a polar noise vector whose angle is
//! uniform and whose radius follows the radial law of the planar Laplace
//! density, `rate^2 * r * exp(-rate * r)`. The radius is drawn by inverting
//! the radial CDF through the lower Lambert W branch. The displaced point is
//! then clamped into an admissible region. Altitude gets its own
//! one-dimensional Laplace noise with independent parameters.
//!
//! Every sampler takes its uniform draws explicitly; callers own the
//! generator.

mod lambert;

use std::f64::consts::{E, TAU};

use rand::distributions::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{from_enu, to_enu, EnuPosition, GeoError, GeoPosition};

pub use lambert::{lambert_w_minus1, BRANCH_POINT};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrivacyError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// The `(epsilon, D)` pair and the effective rate `epsilon / D` in 1/m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct LaplaceParams {
    epsilon: f64,
    d_scale: f64,
    rate: f64,
}

#[derive(Serialize, Deserialize)]
struct RawParams {
    epsilon: f64,
    d_scale: f64,
}

impl TryFrom<RawParams> for LaplaceParams {
    type Error = PrivacyError;
    fn try_from(r: RawParams) -> Result<Self, PrivacyError> {
        LaplaceParams::new(r.epsilon, r.d_scale)
    }
}

impl From<LaplaceParams> for RawParams {
    fn from(p: LaplaceParams) -> Self {
        RawParams { epsilon: p.epsilon, d_scale: p.d_scale }
    }
}

impl LaplaceParams {
    pub fn new(epsilon: f64, d_scale: f64) -> Result<Self, PrivacyError> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(PrivacyError::Config(format!("epsilon must be > 0, got {epsilon}")));
        }
        if !(d_scale.is_finite() && d_scale > 0.0) {
            return Err(PrivacyError::Config(format!("D must be > 0 m, got {d_scale}")));
        }
        let rate = epsilon / d_scale;
        if !(rate.is_finite() && rate > 0.0) {
            return Err(PrivacyError::Config(format!(
                "rate epsilon/D = {rate} is not a positive finite number"
            )));
        }
        Ok(LaplaceParams { epsilon, d_scale, rate })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn d_scale(&self) -> f64 {
        self.d_scale
    }

    /// Effective rate in 1/m.
    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Expected planar displacement, `2 / rate`.
    pub fn mean_radius(&self) -> f64 {
        2.0 / self.rate
    }
}

/// Axis-aligned box of admissible obfuscated positions in an ENU frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleRegion {
    min_x: f64,
    max_x: f64,
    min_y: f64,
    max_y: f64,
    alt: Option<(f64, f64)>,
}

impl AdmissibleRegion {
    pub fn new(min_x: f64, max_x: f64, min_y: f64, max_y: f64) -> Result<Self, PrivacyError> {
        check_axis("x", min_x, max_x)?;
        check_axis("y", min_y, max_y)?;
        Ok(AdmissibleRegion { min_x, max_x, min_y, max_y, alt: None })
    }

    /// Square box of half-width `half_m` centred on the frame origin.
    pub fn square(half_m: f64) -> Result<Self, PrivacyError> {
        AdmissibleRegion::new(-half_m, half_m, -half_m, half_m)
    }

    /// Adds bounds on the local up coordinate.
    pub fn with_altitude(mut self, min_z: f64, max_z: f64) -> Result<Self, PrivacyError> {
        check_axis("altitude", min_z, max_z)?;
        self.alt = Some((min_z, max_z));
        Ok(self)
    }

    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        (self.min_x, self.max_x, self.min_y, self.max_y)
    }

    pub fn altitude_bounds(&self) -> Option<(f64, f64)> {
        self.alt
    }

    pub fn contains(&self, p: &EnuPosition) -> bool {
        let planar = (self.min_x..=self.max_x).contains(&p.x_m)
            && (self.min_y..=self.max_y).contains(&p.y_m);
        planar && self.alt.is_none_or(|(lo, hi)| (lo..=hi).contains(&p.z_m))
    }

    /// Closest point of the region. Points already inside are returned as is.
    pub fn truncate(&self, p: &EnuPosition) -> EnuPosition {
        if self.contains(p) {
            return *p;
        }
        let z_m = match self.alt {
            Some((lo, hi)) => p.z_m.clamp(lo, hi),
            None => p.z_m,
        };
        EnuPosition {
            x_m: p.x_m.clamp(self.min_x, self.max_x),
            y_m: p.y_m.clamp(self.min_y, self.max_y),
            z_m,
        }
    }
}

fn check_axis(name: &str, lo: f64, hi: f64) -> Result<(), PrivacyError> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(PrivacyError::Config(format!(
            "empty admissible region on {name}: [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// Free-function form of [`AdmissibleRegion::truncate`].
pub fn truncate(pos: &EnuPosition, region: &AdmissibleRegion) -> EnuPosition {
    region.truncate(pos)
}

/// Polar displacement: radius in metres and angle in `[0, 2pi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarNoise {
    pub radius_m: f64,
    pub theta_rad: f64,
}

/// The three uniforms one obfuscation consumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomDraws {
    /// Angle draw in `[0, 1)`.
    pub u_theta: f64,
    /// Radius draw in `[0, 1)`.
    pub p: f64,
    /// Altitude draw in `(0, 1)`.
    pub u_alt: f64,
}

impl RandomDraws {
    /// Draws that produce no displacement at all.
    pub const ZERO_NOISE: RandomDraws = RandomDraws { u_theta: 0.0, p: 0.0, u_alt: 0.5 };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        RandomDraws { u_theta: rng.gen(), p: rng.gen(), u_alt: rng.sample(Open01) }
    }
}

/// Radial CDF of the planar Laplace law: `1 - (1 + rate r) exp(-rate r)`.
pub fn radial_cdf(r: f64, params: &LaplaceParams) -> Result<f64, PrivacyError> {
    if r.is_nan() || r < 0.0 {
        return Err(PrivacyError::Domain(format!("radius {r} must be >= 0")));
    }
    let t = params.rate * r;
    // -expm1(-t) - t*exp(-t) avoids cancellation for small t.
    Ok((-(-t).exp_m1() - t * (-t).exp()).clamp(0.0, 1.0))
}

/// Inverse radial CDF: `-(W_{-1}((p - 1)/e) + 1) / rate`.
pub fn sample_radius(params: &LaplaceParams, p: f64) -> Result<f64, PrivacyError> {
    if !(0.0..1.0).contains(&p) {
        return Err(PrivacyError::Domain(format!("p = {p} not in [0, 1)")));
    }
    let w = lambert_w_minus1((p - 1.0) / E)?;
    Ok((-(w + 1.0) / params.rate).max(0.0))
}

pub fn sample_noise(
    params: &LaplaceParams,
    u_theta: f64,
    p: f64,
) -> Result<PolarNoise, PrivacyError> {
    if !(0.0..1.0).contains(&u_theta) {
        return Err(PrivacyError::Domain(format!("u_theta = {u_theta} not in [0, 1)")));
    }
    let mut theta_rad = TAU * u_theta;
    if theta_rad >= TAU {
        theta_rad = 0.0;
    }
    Ok(PolarNoise { radius_m: sample_radius(params, p)?, theta_rad })
}

/// Shifts the horizontal components; altitude is left alone.
pub fn perturb(pos: &EnuPosition, noise: &PolarNoise) -> EnuPosition {
    let (s, c) = noise.theta_rad.sin_cos();
    EnuPosition {
        x_m: pos.x_m + noise.radius_m * c,
        y_m: pos.y_m + noise.radius_m * s,
        z_m: pos.z_m,
    }
}

/// One-dimensional Laplace noise on altitude, by inverse CDF.
pub fn obfuscate_altitude(
    alt_m: f64,
    params: &LaplaceParams,
    u: f64,
) -> Result<f64, PrivacyError> {
    if !(u > 0.0 && u < 1.0) {
        return Err(PrivacyError::Domain(format!("u = {u} not in (0, 1)")));
    }
    let c = u - 0.5;
    if c == 0.0 {
        return Ok(alt_m);
    }
    let noise = -(1.0 / params.rate) * c.signum() * (-2.0 * c.abs()).ln_1p();
    Ok(alt_m + noise)
}

/// Privacy level after `k` observed reports of an `epsilon` mechanism.
pub fn privacy_budget(k: u64, epsilon: f64) -> f64 {
    k as f64 * epsilon
}

/// Everything the emitter needs to obfuscate positions: a local frame, the
/// planar and altitude parameters, and the admissible region in that frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obfuscator {
    pub origin: GeoPosition,
    pub planar: LaplaceParams,
    pub altitude: LaplaceParams,
    pub region: AdmissibleRegion,
}

impl Obfuscator {
    pub fn new(
        origin: GeoPosition,
        planar: LaplaceParams,
        altitude: LaplaceParams,
        region: AdmissibleRegion,
    ) -> Self {
        Obfuscator { origin, planar, altitude, region }
    }

    pub fn obfuscate(
        &self,
        true_pos: &GeoPosition,
        draws: RandomDraws,
    ) -> Result<GeoPosition, PrivacyError> {
        diprid_obfuscate(
            true_pos,
            &self.origin,
            &self.planar,
            &self.altitude,
            &self.region,
            draws,
        )
    }
}

/// Full obfuscation of one position: local frame, planar noise, altitude
/// noise, truncation, back to geodetic.
pub fn diprid_obfuscate(
    true_pos: &GeoPosition,
    origin: &GeoPosition,
    planar: &LaplaceParams,
    altitude: &LaplaceParams,
    region: &AdmissibleRegion,
    draws: RandomDraws,
) -> Result<GeoPosition, PrivacyError> {
    let enu = to_enu(true_pos, origin);
    let noise = sample_noise(planar, draws.u_theta, draws.p)?;
    let mut moved = perturb(&enu, &noise);
    moved.z_m = obfuscate_altitude(moved.z_m, altitude, draws.u_alt)?;
    let out = region.truncate(&moved);
    if out == enu {
        return Ok(*true_pos);
    }
    Ok(from_enu(&out, origin)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use std::f64::consts::PI;
    use rand_chacha::ChaCha8Rng;

    fn params(eps: f64, d: f64) -> LaplaceParams {
        LaplaceParams::new(eps, d).unwrap()
    }

    // 1 - 2/e: the radial CDF at rate*r = 1.
    const P_AT_ONE: f64 = 1.0 - 2.0 / E;

    #[test]
    fn rate_is_epsilon_over_d() {
        let p = params(0.5, 5.0);
        assert_eq!(p.rate(), 0.1);
        assert!(LaplaceParams::new(0.0, 1.0).is_err());
        assert!(LaplaceParams::new(1.0, -1.0).is_err());
    }

    #[test]
    fn radial_cdf_examples() {
        let p = params(1.0, 1.0);
        assert_eq!(radial_cdf(0.0, &p).unwrap(), 0.0);
        assert!((radial_cdf(1.0, &p).unwrap() - 0.264_241_117_657_115_4).abs() < 1e-15);
        assert!((radial_cdf(41.0, &p).unwrap() - 1.0).abs() < 1e-12);
        assert!(radial_cdf(-1.0, &p).is_err());
    }

    #[test]
    fn radial_cdf_matches_quadrature() {
        // Simpson's rule on the radial density rate^2 r exp(-rate r).
        let p = params(0.3, 1.0);
        let lam = p.rate();
        let r_end = 7.5;
        let n = 2000;
        let h = r_end / n as f64;
        let f = |r: f64| lam * lam * r * (-lam * r).exp();
        let mut acc = f(0.0) + f(r_end);
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        let integral = acc * h / 3.0;
        assert!((radial_cdf(r_end, &p).unwrap() - integral).abs() < 1e-10);
    }

    #[test]
    fn radius_examples() {
        assert_eq!(sample_radius(&params(1.0, 1.0), 0.0).unwrap(), 0.0);
        assert!((sample_radius(&params(1.0, 1.0), P_AT_ONE).unwrap() - 1.0).abs() < 1e-9);
        assert!((sample_radius(&params(0.5, 1.0), P_AT_ONE).unwrap() - 2.0).abs() < 1e-9);
        assert!(sample_radius(&params(1.0, 1.0), 1.0).is_err());
        assert!(sample_radius(&params(1.0, 1.0), -0.1).is_err());
    }

    #[test]
    fn noise_examples() {
        let p = params(1.0, 1.0);
        assert_eq!(sample_noise(&p, 0.0, 0.0).unwrap(), PolarNoise { radius_m: 0.0, theta_rad: 0.0 });
        assert_eq!(sample_noise(&p, 0.5, 0.7).unwrap().theta_rad, PI);
        let n = sample_noise(&p, 0.25, P_AT_ONE).unwrap();
        assert!((n.radius_m - 1.0).abs() < 1e-9);
        assert_eq!(n.theta_rad, PI / 2.0);
        assert!(sample_noise(&p, 1.0, 0.0).is_err());
    }

    #[test]
    fn perturb_examples() {
        let o = EnuPosition::ORIGIN;
        let p = EnuPosition::new(3.0, 4.0, 7.0);
        assert_eq!(perturb(&p, &PolarNoise { radius_m: 0.0, theta_rad: 1.0 }), p);
        assert_eq!(
            perturb(&o, &PolarNoise { radius_m: 10.0, theta_rad: 0.0 }),
            EnuPosition::new(10.0, 0.0, 0.0)
        );
        let q = perturb(&p, &PolarNoise { radius_m: 5.0, theta_rad: PI / 2.0 });
        assert!((q.x_m - 3.0).abs() < 1e-12 && q.y_m == 9.0 && q.z_m == 7.0);
    }

    #[test]
    fn truncate_examples() {
        let r = AdmissibleRegion::square(100.0).unwrap();
        let inside = EnuPosition::new(10.0, -20.0, 5.0);
        assert_eq!(r.truncate(&inside), inside);
        assert_eq!(
            r.truncate(&EnuPosition::new(150.0, 0.0, 0.0)),
            EnuPosition::new(100.0, 0.0, 0.0)
        );
        let r3 = r.with_altitude(0.0, 50.0).unwrap();
        assert_eq!(
            r3.truncate(&EnuPosition::new(0.0, 0.0, 80.0)),
            EnuPosition::new(0.0, 0.0, 50.0)
        );
        assert!(AdmissibleRegion::new(1.0, 1.0, 0.0, 1.0).is_err());
        assert!(AdmissibleRegion::new(0.0, 1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn truncate_matches_grid_search() {
        let r = AdmissibleRegion::new(-100.0, 100.0, -50.0, 80.0).unwrap();
        let p = EnuPosition::new(137.0, 91.0, 0.0);
        let t = r.truncate(&p);
        let mut best = f64::INFINITY;
        for i in 0..=400 {
            for j in 0..=260 {
                let c = EnuPosition::new(-100.0 + i as f64 * 0.5, -50.0 + j as f64 * 0.5, 0.0);
                best = best.min(crate::geo::distance_3d(&c, &p));
            }
        }
        assert!((crate::geo::distance_3d(&t, &p) - best).abs() < 1e-9);
    }

    #[test]
    fn altitude_examples() {
        let p = params(1.0, 1.0);
        assert_eq!(obfuscate_altitude(10.0, &p, 0.5).unwrap(), 10.0);
        let u = 0.5 * (1.0 + (1.0 - (-1.0f64).exp()));
        assert!((obfuscate_altitude(0.0, &p, u).unwrap() - 1.0).abs() < 1e-12);
        let a = obfuscate_altitude(0.0, &p, 0.2).unwrap();
        let b = obfuscate_altitude(0.0, &p, 0.8).unwrap();
        assert!((a + b).abs() < 1e-12 && a < 0.0);
        assert!(obfuscate_altitude(0.0, &p, 0.0).is_err());
        assert!(obfuscate_altitude(0.0, &p, 1.0).is_err());
    }

    #[test]
    fn budget() {
        assert_eq!(privacy_budget(0, 0.5), 0.0);
        assert_eq!(privacy_budget(10, 0.5), 5.0);
        assert_eq!(privacy_budget(3, 0.25) + privacy_budget(4, 0.25), privacy_budget(7, 0.25));
    }

    fn obfuscator() -> Obfuscator {
        let origin = GeoPosition::new(45.0, 9.0, 100.0).unwrap();
        Obfuscator::new(
            origin,
            params(0.5, 5.0),
            params(1.0, 10.0),
            AdmissibleRegion::square(200.0).unwrap(),
        )
    }

    #[test]
    fn zero_noise_is_identity() {
        let ob = obfuscator();
        let p = GeoPosition::new(45.0003, 9.0004, 130.0).unwrap();
        let draws = RandomDraws { u_theta: 0.37, p: 0.0, u_alt: 0.5 };
        assert_eq!(ob.obfuscate(&p, draws).unwrap(), p);
    }

    #[test]
    fn obfuscation_is_seeded_and_truncated() {
        let ob = obfuscator();
        let p = GeoPosition::new(45.0003, 9.0004, 130.0).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..500)
                .map(|_| ob.obfuscate(&p, RandomDraws::sample(&mut rng)).unwrap())
                .collect::<Vec<_>>()
        };
        let a = run(11);
        assert_eq!(a, run(11));
        assert_ne!(a, run(12));
        for g in &a {
            // from_enu/to_enu round trip costs a few nanometres at most.
            let e = to_enu(g, &ob.origin);
            let r = ob.region.truncate(&e);
            assert!(crate::geo::distance_3d(&e, &r) < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn inverse_cdf_consistency(rate in 1e-4..1e2f64, p in 0.0..1.0f64) {
            let params = LaplaceParams::new(rate, 1.0).unwrap();
            let r = sample_radius(&params, p).unwrap();
            prop_assert!(r >= 0.0);
            prop_assert!((radial_cdf(r, &params).unwrap() - p).abs() < 1e-9);
        }

        #[test]
        fn doubling_d_doubles_the_radius(eps in 0.01..5.0f64, d in 0.1..100.0f64, p in 0.0..1.0f64) {
            let a = LaplaceParams::new(eps, d).unwrap();
            let b = LaplaceParams::new(eps, 2.0 * d).unwrap();
            prop_assert!((b.rate() - a.rate() / 2.0).abs() <= 1e-15 * a.rate());
            let (ra, rb) = (sample_radius(&a, p).unwrap(), sample_radius(&b, p).unwrap());
            prop_assert!((rb - 2.0 * ra).abs() <= 1e-9 * (1.0 + rb));
        }

        #[test]
        fn truncation_is_idempotent(x in -1e3..1e3f64, y in -1e3..1e3f64, z in -1e3..1e3f64) {
            let r = AdmissibleRegion::new(-100.0, 50.0, -20.0, 300.0).unwrap()
                .with_altitude(-5.0, 5.0).unwrap();
            let once = r.truncate(&EnuPosition::new(x, y, z));
            prop_assert!(r.contains(&once));
            prop_assert_eq!(r.truncate(&once), once);
        }
    }
}
