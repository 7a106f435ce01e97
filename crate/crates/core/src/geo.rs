//! Geographic points and great-circle distance on a spherical Earth.

use serde::{Deserialize, Serialize};

use crate::ValueError;

/// Mean Earth radius used by every distance computation in the crate.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Meters spanned by one degree of latitude on the sphere of [`EARTH_RADIUS_M`].
pub const METERS_PER_DEGREE: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

/// A GPS fix: latitude/longitude in degrees plus the reported margin of error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
    accuracy_m: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64, accuracy_m: f64) -> Result<Self, ValueError> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(ValueError::Latitude(lat));
        }
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(ValueError::Longitude(lon));
        }
        if !accuracy_m.is_finite() || accuracy_m < 0.0 {
            return Err(ValueError::Accuracy(accuracy_m));
        }
        Ok(Self { lat, lon, accuracy_m })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn accuracy_m(&self) -> f64 {
        self.accuracy_m
    }
}

/// Haversine great-circle distance in meters.
pub fn haversine_m(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Latitude/longitude half-widths (degrees) of a box that contains every point
/// within `radius_m` of `center`.
///
/// The longitude extent uses the exact spherical-cap bound
/// `asin(sin δ / cos φ)`, which is never smaller than the linear
/// `δ / cos φ` approximation. A small relative margin absorbs rounding so the
/// box is a strict superset of the haversine disk.
pub fn bounding_half_widths(center: &GeoPoint, radius_m: f64) -> (f64, f64) {
    const MARGIN: f64 = 1.0 + 1e-9;
    let angular = radius_m / EARTH_RADIUS_M;
    if angular >= std::f64::consts::PI {
        return (180.0, 360.0);
    }
    let dlat = angular.to_degrees() * MARGIN + 1e-12;
    let cos_lat = center.lat.to_radians().cos();
    let ratio = angular.sin() / cos_lat;
    let dlon = if angular >= std::f64::consts::FRAC_PI_2 || !(ratio < 1.0) {
        360.0
    } else {
        ratio.asin().to_degrees() * MARGIN + 1e-12
    };
    (dlat, dlon)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon, 0.0).unwrap()
    }

    #[test]
    fn identity_is_zero() {
        assert_eq!(haversine_m(&p(0.0, 0.0), &p(0.0, 0.0)), 0.0);
    }

    #[test]
    fn one_degree_on_equator() {
        // 6_371_000 * pi / 180
        let d = haversine_m(&p(0.0, 0.0), &p(0.0, 1.0));
        assert!((d - 111_194.93).abs() < 1.0, "{d}");
    }

    #[test]
    fn antipodal_on_equator() {
        // pi * 6_371_000
        let d = haversine_m(&p(0.0, 0.0), &p(0.0, 180.0));
        assert!((d - 20_015_086.8).abs() < 10.0, "{d}");
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(GeoPoint::new(90.5, 0.0, 1.0).is_err());
        assert!(GeoPoint::new(0.0, -181.0, 1.0).is_err());
        assert!(GeoPoint::new(0.0, 0.0, -1.0).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0, 1.0).is_err());
        assert!(GeoPoint::new(0.0, 0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn box_contains_disk_at_high_latitude() {
        let c = p(70.0, 20.0);
        let r = 500.0;
        let (dlat, dlon) = bounding_half_widths(&c, r);
        // walk the circle boundary and check every point is inside the box
        for i in 0..3600 {
            let bearing = (i as f64 / 10.0).to_radians();
            let ang = r / EARTH_RADIUS_M;
            let lat1 = c.lat().to_radians();
            let lat2 = (lat1.sin() * ang.cos() + lat1.cos() * ang.sin() * bearing.cos()).asin();
            let lon2 = c.lon().to_radians()
                + (bearing.sin() * ang.sin() * lat1.cos()).atan2(ang.cos() - lat1.sin() * lat2.sin());
            assert!((lat2.to_degrees() - c.lat()).abs() <= dlat);
            assert!((lon2.to_degrees() - c.lon()).abs() <= dlon);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn symmetric(a in -90.0f64..=90.0, b in -180.0f64..=180.0, c in -90.0f64..=90.0, d in -180.0f64..=180.0) {
                let x = p(a, b);
                let y = p(c, d);
                prop_assert_eq!(haversine_m(&x, &y), haversine_m(&y, &x));
                prop_assert!(haversine_m(&x, &y) >= 0.0);
            }
        }
    }
}
