//! Great-circle geometry on the WGS84 sphere.

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Haversine distance in meters between two (lat, lon) pairs in degrees.
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (phi1, phi2) = (lat1.to_radians(), lat2.to_radians());
    let dphi = (lat2 - lat1).to_radians();
    let dlam = (lon2 - lon1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlam / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().asin()
}

/// Approximate degrees of longitude per meter at the given latitude.
///
/// Used for sizing spatial-grid cells; fine for radii of a few meters.
pub fn meters_to_lon_deg(meters: f64, lat: f64) -> f64 {
    let circ = 2.0 * std::f64::consts::PI * EARTH_RADIUS_M * lat.to_radians().cos();
    if circ <= 0.0 {
        360.0
    } else {
        meters / circ * 360.0
    }
}

/// Approximate degrees of latitude per meter.
pub fn meters_to_lat_deg(meters: f64) -> f64 {
    meters / (2.0 * std::f64::consts::PI * EARTH_RADIUS_M) * 360.0
}
