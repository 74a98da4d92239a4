// SPDX-License-Identifier: Apache-2.0

//! Geodetic and local East/North/Up coordinates.
//!
//! Conversions use a small-area equirectangular tangent plane anchored at a
//! declared origin. Over the few-kilometre arenas this crate targets the
//! error against a full ellipsoidal model is far below a centimetre.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius used by every conversion, in metres.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Origins closer to a pole than this make the east axis degenerate.
pub const MAX_ORIGIN_LAT_DEG: f64 = 89.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),
    #[error("origin latitude {0} deg is too close to a pole for a local tangent frame")]
    PolarOrigin(f64),
}

/// A geodetic position. Longitude is normalised into (-180, 180].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGeo", into = "RawGeo")]
pub struct GeoPosition {
    lat_deg: f64,
    lon_deg: f64,
    alt_m: f64,
}

#[derive(Serialize, Deserialize)]
struct RawGeo {
    lat_deg: f64,
    lon_deg: f64,
    alt_m: f64,
}

impl TryFrom<RawGeo> for GeoPosition {
    type Error = GeoError;
    fn try_from(r: RawGeo) -> Result<Self, GeoError> {
        GeoPosition::new(r.lat_deg, r.lon_deg, r.alt_m)
    }
}

impl From<GeoPosition> for RawGeo {
    fn from(g: GeoPosition) -> Self {
        RawGeo { lat_deg: g.lat_deg, lon_deg: g.lon_deg, alt_m: g.alt_m }
    }
}

pub(crate) fn normalize_lon(lon: f64) -> f64 {
    let mut l = lon % 360.0;
    if l <= -180.0 {
        l += 360.0;
    } else if l > 180.0 {
        l -= 360.0;
    }
    l
}

impl GeoPosition {
    pub fn new(lat_deg: f64, lon_deg: f64, alt_m: f64) -> Result<Self, GeoError> {
        if !(lat_deg.is_finite() && lon_deg.is_finite() && alt_m.is_finite()) {
            return Err(GeoError::InvalidCoordinate(format!(
                "non-finite component ({lat_deg}, {lon_deg}, {alt_m})"
            )));
        }
        if !(-90.0..=90.0).contains(&lat_deg) {
            return Err(GeoError::InvalidCoordinate(format!(
                "latitude {lat_deg} outside [-90, 90]"
            )));
        }
        Ok(GeoPosition { lat_deg, lon_deg: normalize_lon(lon_deg), alt_m })
    }

    pub fn lat_deg(&self) -> f64 {
        self.lat_deg
    }

    pub fn lon_deg(&self) -> f64 {
        self.lon_deg
    }

    pub fn alt_m(&self) -> f64 {
        self.alt_m
    }

    /// Fixed-point form: micro-degrees, micro-degrees, millimetres.
    pub fn to_fixed(&self) -> (i64, i64, i64) {
        (
            (self.lat_deg * 1e6).round() as i64,
            (self.lon_deg * 1e6).round() as i64,
            (self.alt_m * 1e3).round() as i64,
        )
    }

    pub fn from_fixed(lat_udeg: i64, lon_udeg: i64, alt_mm: i64) -> Result<Self, GeoError> {
        GeoPosition::new(lat_udeg as f64 / 1e6, lon_udeg as f64 / 1e6, alt_mm as f64 / 1e3)
    }

    /// Snaps onto the fixed-point grid. Idempotent.
    pub fn quantized(&self) -> GeoPosition {
        let (a, b, c) = self.to_fixed();
        GeoPosition::from_fixed(a, b, c).expect("quantizing a valid position stays valid")
    }
}

/// Cartesian East/North/Up offsets in metres from some origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnuPosition {
    pub x_m: f64,
    pub y_m: f64,
    pub z_m: f64,
}

impl EnuPosition {
    pub const ORIGIN: EnuPosition = EnuPosition { x_m: 0.0, y_m: 0.0, z_m: 0.0 };

    pub const fn new(x_m: f64, y_m: f64, z_m: f64) -> Self {
        EnuPosition { x_m, y_m, z_m }
    }

    pub fn is_finite(&self) -> bool {
        self.x_m.is_finite() && self.y_m.is_finite() && self.z_m.is_finite()
    }

    pub fn norm(&self) -> f64 {
        distance_3d(self, &EnuPosition::ORIGIN)
    }
}

pub fn to_enu(p: &GeoPosition, origin: &GeoPosition) -> EnuPosition {
    let dlat = (p.lat_deg - origin.lat_deg).to_radians();
    let dlon = normalize_lon(p.lon_deg - origin.lon_deg).to_radians();
    EnuPosition {
        x_m: EARTH_RADIUS_M * origin.lat_deg.to_radians().cos() * dlon,
        y_m: EARTH_RADIUS_M * dlat,
        z_m: p.alt_m - origin.alt_m,
    }
}

pub fn from_enu(e: &EnuPosition, origin: &GeoPosition) -> Result<GeoPosition, GeoError> {
    if origin.lat_deg.abs() >= MAX_ORIGIN_LAT_DEG {
        return Err(GeoError::PolarOrigin(origin.lat_deg));
    }
    if !e.is_finite() {
        return Err(GeoError::InvalidCoordinate(format!("non-finite ENU offset {e:?}")));
    }
    let lat = origin.lat_deg + (e.y_m / EARTH_RADIUS_M).to_degrees();
    let lon = origin.lon_deg
        + (e.x_m / (EARTH_RADIUS_M * origin.lat_deg.to_radians().cos())).to_degrees();
    GeoPosition::new(lat, lon, origin.alt_m + e.z_m)
}

pub fn distance_3d(a: &EnuPosition, b: &EnuPosition) -> f64 {
    let (dx, dy, dz) = (a.x_m - b.x_m, a.y_m - b.y_m, a.z_m - b.z_m);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Horizontal distance; altitude is ignored.
pub fn planar_distance(a: &EnuPosition, b: &EnuPosition) -> f64 {
    (a.x_m - b.x_m).hypot(a.y_m - b.y_m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geo(lat: f64, lon: f64, alt: f64) -> GeoPosition {
        GeoPosition::new(lat, lon, alt).unwrap()
    }

    // Haversine great-circle distance; independent of the tangent-plane math.
    fn haversine(a: &GeoPosition, b: &GeoPosition) -> f64 {
        let (p1, p2) = (a.lat_deg.to_radians(), b.lat_deg.to_radians());
        let dp = p2 - p1;
        let dl = (b.lon_deg - a.lon_deg).to_radians();
        let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_M * h.sqrt().asin()
    }

    #[test]
    fn identity_and_altitude_offsets() {
        let o = geo(45.0, 9.0, 120.0);
        assert_eq!(to_enu(&o, &o), EnuPosition::ORIGIN);
        let o = geo(0.0, 0.0, 0.0);
        assert_eq!(to_enu(&geo(0.0, 0.0, 50.0), &o), EnuPosition::new(0.0, 0.0, 50.0));
        assert_eq!(from_enu(&EnuPosition::ORIGIN, &o).unwrap(), o);
    }

    #[test]
    fn one_degree_of_longitude_at_the_equator() {
        let o = geo(0.0, 0.0, 0.0);
        let p = geo(0.0, 1.0, 0.0);
        let e = to_enu(&p, &o);
        let oracle = haversine(&o, &p);
        assert!((e.x_m - oracle).abs() < 1e-6, "{} vs {}", e.x_m, oracle);
        assert!((e.x_m - 111_194.9).abs() < 0.1);
        assert_eq!((e.y_m, e.z_m), (0.0, 0.0));

        let back = from_enu(&EnuPosition::new(111_194.9, 0.0, 0.0), &o).unwrap();
        assert!((back.lon_deg() - 1.0).abs() < 1e-6);
        assert_eq!(back.lat_deg(), 0.0);
    }

    #[test]
    fn longitude_is_normalized() {
        assert_eq!(geo(0.0, 180.0, 0.0).lon_deg(), 180.0);
        assert_eq!(geo(0.0, -180.0, 0.0).lon_deg(), 180.0);
        assert_eq!(geo(0.0, 190.0, 0.0).lon_deg(), -170.0);
        assert_eq!(geo(0.0, 540.0, 0.0).lon_deg(), 180.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(GeoPosition::new(91.0, 0.0, 0.0).is_err());
        assert!(GeoPosition::new(f64::NAN, 0.0, 0.0).is_err());
        assert!(GeoPosition::new(0.0, f64::INFINITY, 0.0).is_err());
        let polar = geo(89.5, 0.0, 0.0);
        assert_eq!(
            from_enu(&EnuPosition::ORIGIN, &polar),
            Err(GeoError::PolarOrigin(89.5))
        );
    }

    #[test]
    fn distances() {
        let o = EnuPosition::ORIGIN;
        assert_eq!(distance_3d(&o, &o), 0.0);
        assert_eq!(distance_3d(&o, &EnuPosition::new(3.0, 4.0, 0.0)), 5.0);
        assert_eq!(distance_3d(&o, &EnuPosition::new(1.0, 2.0, 2.0)), 3.0);
        assert_eq!(planar_distance(&EnuPosition::new(0.0, 0.0, 100.0), &o), 0.0);
        assert_eq!(planar_distance(&EnuPosition::new(3.0, 4.0, 7.0), &o), 5.0);
    }

    #[test]
    fn fixed_point_is_idempotent() {
        let p = geo(45.123_456_789, -73.987_654_321, 12.345_6);
        let q = p.quantized();
        assert_eq!(q.quantized(), q);
        assert_eq!(q.to_fixed(), (45_123_457, -73_987_654, 12_346));
    }

    fn enu() -> impl Strategy<Value = EnuPosition> {
        (-1e4..1e4f64, -1e4..1e4f64, -1e3..1e3f64).prop_map(|(x, y, z)| EnuPosition::new(x, y, z))
    }

    proptest! {
        #[test]
        fn round_trips_within_50_km(
            lat0 in -80.0..80.0f64, lon0 in -180.0..180.0f64,
            dx in -35_000.0..35_000.0f64, dy in -35_000.0..35_000.0f64, dz in -500.0..500.0f64,
        ) {
            let origin = geo(lat0, lon0, 10.0);
            let e = EnuPosition::new(dx, dy, dz);
            let g = from_enu(&e, &origin).unwrap();
            let e2 = to_enu(&g, &origin);
            prop_assert!(distance_3d(&e, &e2) < 1e-6);
            let g2 = from_enu(&e2, &origin).unwrap();
            prop_assert!((g2.lat_deg() - g.lat_deg()).abs() < 1e-9);
            prop_assert!(normalize_lon(g2.lon_deg() - g.lon_deg()).abs() < 1e-9);
        }

        #[test]
        fn triangle_inequality(a in enu(), b in enu(), c in enu()) {
            prop_assert!(distance_3d(&a, &c) <= distance_3d(&a, &b) + distance_3d(&b, &c) + 1e-9);
            prop_assert_eq!(distance_3d(&a, &b), distance_3d(&b, &a));
            prop_assert!(planar_distance(&a, &b) <= distance_3d(&a, &b) + 1e-12);
        }
    }
}
