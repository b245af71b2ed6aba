//! Shared domain types: identifiers, units, time windows and the geometry
//! primitives (great-circle distance, geofence containment, disk regions)
//! that every other module builds on.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Duration, DurationRound, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Mean Earth radius of the spherical model, in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Kilometres per degree of latitude on the spherical model.
pub const KM_PER_DEGREE: f64 = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;

/// UTC instant with microsecond resolution.
pub type Timestamp = DateTime<Utc>;

/// Truncates an instant to whole microseconds.
pub fn to_micros(t: Timestamp) -> Timestamp {
    t.duration_trunc(Duration::microseconds(1)).unwrap_or(t)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} is not finite")]
    Longitude(f64),
    #[error("geofence needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("degenerate geofence: {0}")]
    DegenerateFence(&'static str),
    #[error("geofence edges {0} and {1} intersect")]
    SelfIntersecting(usize, usize),
    #[error("time window ends before it starts")]
    InvertedWindow,
    #[error("invalid node id: {0}")]
    NodeId(String),
    #[error("invalid usage constraints: {0}")]
    Constraints(&'static str),
    #[error("feasible region needs at least one disk with positive radius")]
    EmptyDisks,
}

/// Opaque 16-byte node identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId([u8; 16]);

impl NodeId {
    pub const fn from_bytes(bytes: [u8; 16]) -> Self {
        Self(bytes)
    }

    /// Stable identifier derived from a human-readable node name.
    pub fn from_name(name: &str) -> Self {
        let digest = Sha256::digest(name.as_bytes());
        let mut id = [0u8; 16];
        id.copy_from_slice(&digest[..16]);
        Self(id)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({})", hex::encode(&self.0[..4]))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl FromStr for NodeId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let raw = hex::decode(s).map_err(|e| ModelError::NodeId(e.to_string()))?;
        let bytes: [u8; 16] = raw
            .try_into()
            .map_err(|_| ModelError::NodeId(format!("expected 16 bytes: {s}")))?;
        Ok(Self(bytes))
    }
}

impl Serialize for NodeId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A point on the sphere in degrees. Longitude is normalised into (-180, 180].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint", into = "RawPoint")]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPoint {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = ModelError;
    fn try_from(raw: RawPoint) -> Result<Self, Self::Error> {
        GeoPoint::new(raw.lat, raw.lon)
    }
}

impl From<GeoPoint> for RawPoint {
    fn from(p: GeoPoint) -> Self {
        RawPoint { lat: p.lat, lon: p.lon }
    }
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, ModelError> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(ModelError::Latitude(lat));
        }
        if !lon.is_finite() {
            return Err(ModelError::Longitude(lon));
        }
        let mut lon = lon % 360.0;
        if lon > 180.0 {
            lon -= 360.0;
        } else if lon <= -180.0 {
            lon += 360.0;
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Round-trip delay in whole microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DelayMicros(pub u64);

impl DelayMicros {
    pub fn as_u64(self) -> u64 {
        self.0
    }
}

impl fmt::Display for DelayMicros {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

/// Non-negative distance in kilometres.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DistanceKm(f64);

impl DistanceKm {
    /// Negative and NaN inputs clamp to zero.
    pub fn new(km: f64) -> Self {
        if km > 0.0 {
            Self(km)
        } else {
            Self(0.0)
        }
    }

    pub fn km(self) -> f64 {
        self.0
    }
}

/// Closed UTC interval `[not_before, not_after]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawWindow", into = "RawWindow")]
pub struct TimeWindow {
    not_before: Timestamp,
    not_after: Timestamp,
}

#[derive(Serialize, Deserialize)]
struct RawWindow {
    not_before: Timestamp,
    not_after: Timestamp,
}

impl TryFrom<RawWindow> for TimeWindow {
    type Error = ModelError;
    fn try_from(raw: RawWindow) -> Result<Self, Self::Error> {
        TimeWindow::new(raw.not_before, raw.not_after)
    }
}

impl From<TimeWindow> for RawWindow {
    fn from(w: TimeWindow) -> Self {
        RawWindow { not_before: w.not_before, not_after: w.not_after }
    }
}

impl TimeWindow {
    pub fn new(not_before: Timestamp, not_after: Timestamp) -> Result<Self, ModelError> {
        if not_before > not_after {
            return Err(ModelError::InvertedWindow);
        }
        Ok(Self { not_before: to_micros(not_before), not_after: to_micros(not_after) })
    }

    pub fn not_before(&self) -> Timestamp {
        self.not_before
    }

    pub fn not_after(&self) -> Timestamp {
        self.not_after
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        self.not_before <= t && t <= self.not_after
    }
}

/// Simple polygon in the lat/lon plane. The last vertex implicitly joins the first.
///
/// Containment is planar ray casting, so fences must not straddle the
/// antimeridian or enclose a pole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<GeoPoint>", into = "Vec<GeoPoint>")]
pub struct Geofence {
    vertices: Vec<GeoPoint>,
}

impl TryFrom<Vec<GeoPoint>> for Geofence {
    type Error = ModelError;
    fn try_from(v: Vec<GeoPoint>) -> Result<Self, Self::Error> {
        Geofence::new(v)
    }
}

impl From<Geofence> for Vec<GeoPoint> {
    fn from(g: Geofence) -> Self {
        g.vertices
    }
}

const PLANAR_EPS: f64 = 1e-12;

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn on_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> bool {
    let scale = 1.0 + a.0.abs().max(a.1.abs()).max(b.0.abs()).max(b.1.abs());
    cross(a, b, p).abs() <= 1e-9 * scale * scale
        && p.0 >= a.0.min(b.0) - 1e-12
        && p.0 <= a.0.max(b.0) + 1e-12
        && p.1 >= a.1.min(b.1) - 1e-12
        && p.1 <= a.1.max(b.1) + 1e-12
}

fn segments_intersect(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > PLANAR_EPS && d2 < -PLANAR_EPS) || (d1 < -PLANAR_EPS && d2 > PLANAR_EPS))
        && ((d3 > PLANAR_EPS && d4 < -PLANAR_EPS) || (d3 < -PLANAR_EPS && d4 > PLANAR_EPS))
    {
        return true;
    }
    on_segment(a, c, d) || on_segment(b, c, d) || on_segment(c, a, b) || on_segment(d, a, b)
}

impl Geofence {
    pub fn new(vertices: Vec<GeoPoint>) -> Result<Self, ModelError> {
        let n = vertices.len();
        if n < 3 {
            return Err(ModelError::TooFewVertices(n));
        }
        let pts: Vec<(f64, f64)> = vertices.iter().map(|v| (v.lon, v.lat)).collect();
        for i in 0..n {
            let a = pts[i];
            let b = pts[(i + 1) % n];
            if (a.0 - b.0).abs() < PLANAR_EPS && (a.1 - b.1).abs() < PLANAR_EPS {
                return Err(ModelError::DegenerateFence("repeated vertex"));
            }
        }
        let twice_area: f64 = (0..n)
            .map(|i| {
                let a = pts[i];
                let b = pts[(i + 1) % n];
                a.0 * b.1 - b.0 * a.1
            })
            .sum();
        if twice_area.abs() < 1e-10 {
            return Err(ModelError::DegenerateFence("zero area"));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                // adjacent edges share a vertex
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                if segments_intersect(pts[i], pts[(i + 1) % n], pts[j], pts[(j + 1) % n]) {
                    return Err(ModelError::SelfIntersecting(i, j));
                }
            }
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[GeoPoint] {
        &self.vertices
    }

    /// Even-odd containment; points on an edge count as inside.
    pub fn contains(&self, p: GeoPoint) -> bool {
        let q = (p.lon, p.lat);
        let n = self.vertices.len();
        let mut inside = false;
        for i in 0..n {
            let a = (self.vertices[i].lon, self.vertices[i].lat);
            let b = (self.vertices[(i + 1) % n].lon, self.vertices[(i + 1) % n].lat);
            if on_segment(q, a, b) {
                return true;
            }
            if (a.1 > q.1) != (b.1 > q.1) {
                let x = a.0 + (q.1 - a.1) * (b.0 - a.0) / (b.1 - a.1);
                if q.0 < x {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

/// Great-circle distance on the 6371 km sphere.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> DistanceKm {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    DistanceKm::new(2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin())
}

/// Containment of `p` in fence `g`.
pub fn point_in_geofence(p: GeoPoint, g: &Geofence) -> bool {
    g.contains(p)
}

/// Usage constraints the processor enforces before releasing any output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageConstraints {
    pub geofence: Geofence,
    pub time_window: TimeWindow,
    pub min_geoclients: usize,
    pub repetitions: u32,
    /// Maximum age of a geolocation report, in seconds.
    pub max_report_age_s: u64,
}

impl UsageConstraints {
    pub const DEFAULT_MAX_REPORT_AGE_S: u64 = 120;

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.min_geoclients < 3 {
            return Err(ModelError::Constraints("min_geoclients must be at least 3"));
        }
        if self.repetitions == 0 {
            return Err(ModelError::Constraints("repetitions must be at least 1"));
        }
        Ok(())
    }

    pub fn max_report_age(&self) -> Duration {
        Duration::seconds(self.max_report_age_s as i64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    pub center: GeoPoint,
    pub radius: DistanceKm,
}

impl Disk {
    pub fn contains(&self, p: GeoPoint) -> bool {
        haversine_km(self.center, p).km() <= self.radius.km()
    }

    /// Lat/lon bounding box as `(lat_min, lat_max, lon_min, lon_max)`.
    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        let r = self.radius.km();
        let dlat = r / KM_PER_DEGREE;
        let lat_min = (self.center.lat - dlat).max(-90.0);
        let lat_max = (self.center.lat + dlat).min(90.0);
        if lat_min <= -90.0 || lat_max >= 90.0 {
            return (lat_min, lat_max, -180.0, 180.0);
        }
        let angular = r / EARTH_RADIUS_KM;
        let s = angular.sin() / self.center.lat.to_radians().cos();
        if s >= 1.0 || angular >= std::f64::consts::FRAC_PI_2 {
            return (lat_min, lat_max, -180.0, 180.0);
        }
        let dlon = s.asin().to_degrees();
        (
            lat_min,
            lat_max,
            (self.center.lon - dlon).max(-180.0),
            (self.center.lon + dlon).min(180.0),
        )
    }
}

/// Intersection of distance-bound disks on the sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleRegion {
    disks: Vec<Disk>,
}

impl FeasibleRegion {
    pub fn new(disks: Vec<Disk>) -> Result<Self, ModelError> {
        if disks.is_empty() || disks.iter().any(|d| d.radius.km() <= 0.0) {
            return Err(ModelError::EmptyDisks);
        }
        Ok(Self { disks })
    }

    pub fn disks(&self) -> &[Disk] {
        &self.disks
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        self.disks.iter().all(|d| d.contains(p))
    }

    /// Intersection of the per-disk bounding boxes, or `None` when empty.
    pub fn bounding_box(&self) -> Option<(f64, f64, f64, f64)> {
        let mut bb = (-90.0f64, 90.0f64, -180.0f64, 180.0f64);
        for d in &self.disks {
            let b = d.bounding_box();
            bb = (bb.0.max(b.0), bb.1.min(b.1), bb.2.max(b.2), bb.3.min(b.3));
        }
        (bb.0 <= bb.1 && bb.2 <= bb.3).then_some(bb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn unit_square() -> Geofence {
        Geofence::new(vec![pt(0.0, 0.0), pt(0.0, 1.0), pt(1.0, 1.0), pt(1.0, 0.0)]).unwrap()
    }

    #[test]
    fn paris_madrid_and_virginia() {
        let paris = pt(48.8566, 2.3522);
        let madrid = pt(40.4168, -3.7038);
        let virginia = pt(38.95, -77.45);
        assert!((haversine_km(paris, madrid).km() - 1052.0).abs() <= 5.0);
        // 6189.90 km from an independent evaluation of the same formula; the
        // often-cited 6338 km is 2.4% higher
        let pv = haversine_km(paris, virginia).km();
        assert!((pv - 6189.90).abs() < 0.5, "{pv}");
        assert!((pv - 6338.0).abs() / 6338.0 < 0.025);
        assert_eq!(haversine_km(paris, paris).km(), 0.0);
    }

    #[test]
    fn square_containment() {
        let sq = unit_square();
        assert!(point_in_geofence(pt(0.5, 0.5), &sq));
        assert!(!point_in_geofence(pt(2.0, 2.0), &sq));
        // (lat 0, lon 0.5) lies on the bottom edge
        assert!(point_in_geofence(pt(0.0, 0.5), &sq));
        assert!(point_in_geofence(pt(1.0, 1.0), &sq));
        assert!(!point_in_geofence(pt(1.0000001, 0.5), &sq));
    }

    #[test]
    fn degenerate_fences_rejected() {
        assert_eq!(
            Geofence::new(vec![pt(0.0, 0.0), pt(1.0, 1.0)]),
            Err(ModelError::TooFewVertices(2))
        );
        assert!(matches!(
            Geofence::new(vec![pt(0.0, 0.0), pt(1.0, 1.0), pt(2.0, 2.0)]),
            Err(ModelError::DegenerateFence(_))
        ));
        // bow tie
        assert!(matches!(
            Geofence::new(vec![pt(0.0, 0.0), pt(2.0, 2.0), pt(0.0, 2.0), pt(1.0, 0.0)]),
            Err(ModelError::SelfIntersecting(..))
        ));
    }

    #[test]
    fn longitude_normalised() {
        assert_eq!(pt(0.0, 190.0).lon(), -170.0);
        assert_eq!(pt(0.0, -180.0).lon(), 180.0);
        assert!(GeoPoint::new(91.0, 0.0).is_err());
    }

    #[test]
    fn window_order() {
        let t0 = Utc::now();
        assert!(TimeWindow::new(t0, t0 - Duration::seconds(1)).is_err());
        let w = TimeWindow::new(t0, t0).unwrap();
        assert!(w.contains(to_micros(t0)));
    }

    #[test]
    fn node_id_hex_round_trip() {
        let id = NodeId::from_name("paris");
        let back: NodeId = id.to_string().parse().unwrap();
        assert_eq!(id, back);
        assert!("abcd".parse::<NodeId>().is_err());
    }

    #[test]
    fn disk_bbox_contains_disk_points() {
        let d = Disk { center: pt(50.0, 8.0), radius: DistanceKm::new(300.0) };
        let (a, b, c, e) = d.bounding_box();
        for k in 0..360 {
            let brg = (k as f64).to_radians();
            // walk ~300 km along bearing on the sphere
            let ang = 299.9 / EARTH_RADIUS_KM;
            let lat1 = 50f64.to_radians();
            let lat2 = (lat1.sin() * ang.cos() + lat1.cos() * ang.sin() * brg.cos()).asin();
            let lon2 = 8f64.to_radians()
                + (brg.sin() * ang.sin() * lat1.cos()).atan2(ang.cos() - lat1.sin() * lat2.sin());
            let p = pt(lat2.to_degrees(), lon2.to_degrees());
            assert!(d.contains(p));
            assert!(p.lat() >= a && p.lat() <= b && p.lon() >= c && p.lon() <= e);
        }
    }
}
