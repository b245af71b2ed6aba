//! Turns signed delay evidence into distance bounds, a feasible region, a
//! geofence verdict and a trusted-time estimate.

use std::io::Write;

use chrono::Duration;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::PkiRegistry;
use crate::geoclient::SignedMeasurements;
use crate::model::{
    haversine_km, DelayMicros, Disk, DistanceKm, FeasibleRegion, GeoPoint, Geofence, NodeId,
    Timestamp, KM_PER_DEGREE,
};

/// Distance bound per microsecond of round-trip time: light covers 0.3 km/us
/// and the signal travels the distance twice.
pub const KM_PER_RTT_MICROSECOND: f64 = 0.15;

/// Disks never shrink below one metre so a zero RTT still yields a region.
pub const MIN_DISK_RADIUS_KM: f64 = 0.001;

pub const DEFAULT_RESOLUTION_KM: f64 = 5.0;

const MAX_REFINEMENTS: u32 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoSolveError {
    #[error("no measurements supplied")]
    EmptyInput,
    #[error("issuer {0} has no registered location")]
    UnknownIssuerLocation(NodeId),
    #[error("disks have an empty intersection")]
    EmptyRegion,
    #[error("adjusted geoclient times spread over {spread_us}us")]
    TimeSpreadExceeded { spread_us: i64 },
    #[error("resolution must be positive")]
    BadResolution,
}

/// Processing time subtracted from an RTT before conversion.
///
/// Anything but zero is unsound unless the deduction is a proven lower bound
/// of the real processing time; it exists for experiments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverheadBudget {
    pub deduction: DelayMicros,
}

impl OverheadBudget {
    pub fn unsound(deduction: DelayMicros) -> Self {
        Self { deduction }
    }
}

/// `0.15 km * max(0, rtt - deduction)`.
pub fn delay_to_distance(rtt: DelayMicros, budget: OverheadBudget) -> DistanceKm {
    let us = rtt.0.saturating_sub(budget.deduction.0);
    // 3/20 == 0.15; the integer numerator keeps decimal results exact
    DistanceKm::new((us as f64 * 3.0) / 20.0)
}

pub fn build_region(
    sms: &[SignedMeasurements],
    registry: &PkiRegistry,
    budget: OverheadBudget,
) -> Result<FeasibleRegion, GeoSolveError> {
    if sms.is_empty() {
        return Err(GeoSolveError::EmptyInput);
    }
    let disks = sms
        .iter()
        .map(|sm| {
            let center = registry
                .location_of(&sm.issuer)
                .ok_or(GeoSolveError::UnknownIssuerLocation(sm.issuer))?;
            let r = delay_to_distance(sm.direct_min_delay.min_rtt, budget).km();
            Ok(Disk { center, radius: DistanceKm::new(r.max(MIN_DISK_RADIUS_KM)) })
        })
        .collect::<Result<Vec<_>, GeoSolveError>>()?;
    FeasibleRegion::new(disks).map_err(|_| GeoSolveError::EmptyInput)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionOutcome {
    ProvenInside,
    NotProven,
    ProvenOutside,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionVerdict {
    pub outcome: RegionOutcome,
    pub region: FeasibleRegion,
    /// A region point outside the fence, when one was found.
    pub witness: Option<GeoPoint>,
    pub region_samples: usize,
    pub resolution_km: f64,
}

impl RegionVerdict {
    pub fn area_km2(&self) -> f64 {
        self.region_samples as f64 * self.resolution_km * self.resolution_km
    }
}

/// Grid of points spaced `resolution_km` apart over the region's bounding box
/// that fall inside every disk.
pub fn region_samples(region: &FeasibleRegion, resolution_km: f64) -> Vec<GeoPoint> {
    let Some((lat0, lat1, lon0, lon1)) = region.bounding_box() else {
        return Vec::new();
    };
    let dlat = resolution_km / KM_PER_DEGREE;
    let mut out = Vec::new();
    let mut lat = lat0;
    while lat <= lat1 {
        let coslat = lat.to_radians().cos().max(1e-6);
        let dlon = (resolution_km / (KM_PER_DEGREE * coslat)).min(360.0);
        let mut lon = lon0;
        while lon <= lon1 {
            if let Ok(p) = GeoPoint::new(lat, lon) {
                if region.contains(p) {
                    out.push(p);
                }
            }
            lon += dlon;
        }
        lat += dlat;
    }
    out
}

/// Approximate region area from a grid count.
pub fn region_area_km2(region: &FeasibleRegion, resolution_km: f64) -> f64 {
    region_samples(region, resolution_km).len() as f64 * resolution_km * resolution_km
}

fn disjoint_pair(region: &FeasibleRegion) -> bool {
    let d = region.disks();
    for i in 0..d.len() {
        for j in (i + 1)..d.len() {
            if haversine_km(d[i].center, d[j].center).km() > d[i].radius.km() + d[j].radius.km() {
                return true;
            }
        }
    }
    false
}

/// Largest signed margin `distance - radius` over all disks; negative means
/// strictly inside the region.
fn region_margin(region: &FeasibleRegion, p: GeoPoint) -> f64 {
    region
        .disks()
        .iter()
        .map(|d| haversine_km(d.center, p).km() - d.radius.km())
        .fold(f64::NEG_INFINITY, f64::max)
}

fn lerp_point(a: GeoPoint, b: GeoPoint, t: f64) -> GeoPoint {
    GeoPoint::new(a.lat() + (b.lat() - a.lat()) * t, a.lon() + (b.lon() - a.lon()) * t)
        .expect("interpolated point between valid vertices")
}

/// Point on fence edge `a-b` deepest inside the region, if the edge enters it.
fn edge_entry(region: &FeasibleRegion, a: GeoPoint, b: GeoPoint, resolution_km: f64) -> Option<GeoPoint> {
    let len = haversine_km(a, b).km();
    let n = ((len / (resolution_km / 4.0)).ceil() as usize).clamp(16, 4096);
    let f = |t: f64| region_margin(region, lerp_point(a, b, t));
    let (mut best_t, mut best) = (0.0, f64::INFINITY);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let v = f(t);
        if v < best {
            best = v;
            best_t = t;
        }
    }
    // golden-section refinement around the best sample
    let h = 1.0 / n as f64;
    let (mut lo, mut hi) = ((best_t - h).max(0.0), (best_t + h).min(1.0));
    let g = 0.618_033_988_749_895;
    for _ in 0..40 {
        let m1 = hi - g * (hi - lo);
        let m2 = lo + g * (hi - lo);
        if f(m1) < f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let t = (lo + hi) / 2.0;
    let (t, v) = if f(t) < best { (t, f(t)) } else { (best_t, best) };
    (v < -1e-9).then(|| lerp_point(a, b, t))
}

/// Region point just off fence edge `a-b` near `p` that lies outside the fence.
fn nudge_witness(
    region: &FeasibleRegion,
    fence: &Geofence,
    a: GeoPoint,
    b: GeoPoint,
    p: GeoPoint,
    resolution_km: f64,
) -> Option<GeoPoint> {
    let (dx, dy) = (b.lon() - a.lon(), b.lat() - a.lat());
    let norm = (dx * dx + dy * dy).sqrt();
    if norm == 0.0 {
        return None;
    }
    let (nx, ny) = (-dy / norm, dx / norm);
    let mut step_km = resolution_km / 1000.0;
    while step_km <= resolution_km {
        let step_deg = step_km / KM_PER_DEGREE;
        for sign in [1.0, -1.0] {
            let lat = p.lat() + sign * ny * step_deg;
            let lon = p.lon() + sign * nx * step_deg / p.lat().to_radians().cos().max(1e-6);
            if let Ok(q) = GeoPoint::new(lat.clamp(-90.0, 90.0), lon) {
                if region.contains(q) && !fence.contains(q) {
                    return Some(q);
                }
            }
        }
        step_km *= 2.0;
    }
    None
}

/// Conservative containment test of the region in the fence.
///
/// The region's bounding box is sampled at `resolution_km`; every fence edge
/// is additionally searched for a point strictly inside the region, which
/// means the fence boundary cuts the region even if the grid missed it.
pub fn check_geofence(
    region: &FeasibleRegion,
    fence: &Geofence,
    resolution_km: f64,
) -> Result<RegionVerdict, GeoSolveError> {
    // also rejects NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(resolution_km > 0.0) {
        return Err(GeoSolveError::BadResolution);
    }
    if disjoint_pair(region) {
        return Err(GeoSolveError::EmptyRegion);
    }
    let mut res = resolution_km;
    let mut samples = region_samples(region, res);
    let mut refinements = 0;
    while samples.is_empty() && refinements < MAX_REFINEMENTS {
        res /= 2.0;
        refinements += 1;
        samples = region_samples(region, res);
    }
    if samples.is_empty() {
        return Err(GeoSolveError::EmptyRegion);
    }

    let outside = samples.iter().copied().find(|p| !fence.contains(*p));
    let any_inside = samples.iter().any(|p| fence.contains(*p));
    let verts = fence.vertices();
    let crossing = (0..verts.len()).find_map(|i| {
        let (a, b) = (verts[i], verts[(i + 1) % verts.len()]);
        edge_entry(region, a, b, res).map(|p| (a, b, p))
    });

    let (outcome, witness) = match (outside, crossing) {
        (None, None) => (RegionOutcome::ProvenInside, None),
        (Some(w), None) if !any_inside => (RegionOutcome::ProvenOutside, Some(w)),
        (Some(w), _) => (RegionOutcome::NotProven, Some(w)),
        (None, Some((a, b, p))) => {
            (RegionOutcome::NotProven, nudge_witness(region, fence, a, b, p, res))
        }
    };
    Ok(RegionVerdict {
        outcome,
        region: region.clone(),
        witness,
        region_samples: samples.len(),
        resolution_km: res,
    })
}

/// Median of the geoclient clocks, each advanced by half its direct RTT.
pub fn trusted_time(
    sms: &[SignedMeasurements],
    spread_tolerance: Duration,
) -> Result<Timestamp, GeoSolveError> {
    if sms.is_empty() {
        return Err(GeoSolveError::EmptyInput);
    }
    let mut adjusted: Vec<Timestamp> = sms
        .iter()
        .map(|sm| {
            sm.system_time + Duration::microseconds((sm.direct_min_delay.min_rtt.0 / 2) as i64)
        })
        .collect();
    adjusted.sort();
    let spread = *adjusted.last().expect("non-empty") - adjusted[0];
    if spread > spread_tolerance {
        return Err(GeoSolveError::TimeSpreadExceeded {
            spread_us: spread.num_microseconds().unwrap_or(i64::MAX),
        });
    }
    let n = adjusted.len();
    Ok(if n % 2 == 1 {
        adjusted[n / 2]
    } else {
        let (lo, hi) = (adjusted[n / 2 - 1], adjusted[n / 2]);
        lo + (hi - lo) / 2
    })
}

/// Writes the disks and the sampled region boundary as CSV for plotting.
pub fn write_region_csv<W: Write>(
    region: &FeasibleRegion,
    resolution_km: f64,
    out: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kind", "lat", "lon", "radius_km"])?;
    for d in region.disks() {
        w.write_record([
            "disk".to_string(),
            d.center.lat().to_string(),
            d.center.lon().to_string(),
            d.radius.km().to_string(),
        ])?;
    }
    let step = resolution_km / KM_PER_DEGREE;
    for p in region_samples(region, resolution_km) {
        let neighbours = [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)];
        let on_edge = neighbours.iter().any(|(dl, dn)| {
            let coslat = p.lat().to_radians().cos().max(1e-6);
            GeoPoint::new((p.lat() + dl).clamp(-90.0, 90.0), p.lon() + dn / coslat)
                .map(|q| !region.contains(q))
                .unwrap_or(true)
        });
        if on_edge {
            w.write_record(["boundary".to_string(), p.lat().to_string(), p.lon().to_string(), String::new()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{DirectoryEntry, Endpoint, KeyPair, Nonce, PublicKey};
    use crate::probe::MinDelayRecord;
    use chrono::{TimeZone, Utc};

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn disk(lat: f64, lon: f64, r: f64) -> Disk {
        Disk { center: pt(lat, lon), radius: DistanceKm::new(r) }
    }

    fn fence(pts: &[(f64, f64)]) -> Geofence {
        Geofence::new(pts.iter().map(|(a, b)| pt(*a, *b)).collect()).unwrap()
    }

    fn sm(issuer: NodeId, rtt: u64, t: Timestamp) -> SignedMeasurements {
        SignedMeasurements::new(
            issuer,
            MinDelayRecord { peer: NodeId::from_name("proc"), min_rtt: DelayMicros(rtt), samples: 1, measured_at: t },
            vec![],
            t,
            Nonce::from_bytes([0; 16]),
            &KeyPair::from_seed([5; 32]),
        )
    }

    #[test]
    fn table_one_conversions() {
        let pairs = [
            (405, 60.75),
            (808, 121.2),
            (1051, 157.65),
            (1710, 256.5),
            (80, 12.0),
            (84, 12.6),
            (296, 44.4),
            (330, 49.5),
        ];
        for (us, km) in pairs {
            assert_eq!(delay_to_distance(DelayMicros(us), OverheadBudget::default()).km(), km, "{us}us");
        }
        assert_eq!(delay_to_distance(DelayMicros(0), OverheadBudget::default()).km(), 0.0);
        assert_eq!(
            delay_to_distance(DelayMicros(100), OverheadBudget::unsound(DelayMicros(500))).km(),
            0.0
        );
    }

    #[test]
    fn build_region_disks() {
        let t = Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap();
        let mut reg = PkiRegistry::default();
        let ids: Vec<NodeId> = ["a", "b", "c"].iter().map(|n| NodeId::from_name(n)).collect();
        let key: PublicKey = KeyPair::from_seed([1; 32]).public();
        for (i, id) in ids.iter().enumerate() {
            reg.register_geoclient(
                *id,
                DirectoryEntry {
                    public_key: key,
                    endpoint: Endpoint { probe: String::new(), control: String::new() },
                    location: Some(pt(10.0 * i as f64, 0.0)),
                },
            );
        }
        let sms: Vec<_> = ids.iter().zip([100, 200, 300]).map(|(id, r)| sm(*id, r, t)).collect();
        let region = build_region(&sms, &reg, OverheadBudget::default()).unwrap();
        let radii: Vec<f64> = region.disks().iter().map(|d| d.radius.km()).collect();
        assert_eq!(radii, vec![15.0, 30.0, 45.0]);

        let stranger = sm(NodeId::from_name("zz"), 10, t);
        assert_eq!(
            build_region(&[stranger], &reg, OverheadBudget::default()),
            Err(GeoSolveError::UnknownIssuerLocation(NodeId::from_name("zz")))
        );
        assert_eq!(build_region(&[], &reg, OverheadBudget::default()), Err(GeoSolveError::EmptyInput));
    }

    #[test]
    fn region_inside_large_fence() {
        let region = FeasibleRegion::new(vec![disk(50.0, 8.0, 150.0), disk(50.5, 8.5, 150.0)]).unwrap();
        let f = fence(&[(40.0, -5.0), (40.0, 20.0), (56.0, 20.0), (56.0, -5.0)]);
        let v = check_geofence(&region, &f, 5.0).unwrap();
        assert_eq!(v.outcome, RegionOutcome::ProvenInside);
        assert!(v.witness.is_none());
    }

    #[test]
    fn fence_cutting_through_region() {
        let region = FeasibleRegion::new(vec![disk(45.0, 5.0, 100.0)]).unwrap();
        // eastern fence edge along lon 5.5 cuts the disk
        let f = fence(&[(40.0, 0.0), (40.0, 5.5), (50.0, 5.5), (50.0, 0.0)]);
        let v = check_geofence(&region, &f, 5.0).unwrap();
        assert_eq!(v.outcome, RegionOutcome::NotProven);
        let w = v.witness.unwrap();
        assert!(haversine_km(pt(45.0, 5.0), w).km() <= 100.0);
        assert!(!f.contains(w));
    }

    #[test]
    fn thin_sliver_missed_by_grid_still_not_proven() {
        // the fence edge dips only 2 km into a 100 km disk; a 50 km grid cannot see it
        let region = FeasibleRegion::new(vec![disk(45.0, 5.0, 100.0)]).unwrap();
        let edge_lon = 5.0 + (98.0 / (KM_PER_DEGREE * 45f64.to_radians().cos()));
        let f = fence(&[(40.0, 0.0), (40.0, edge_lon), (50.0, edge_lon), (50.0, 0.0)]);
        let v = check_geofence(&region, &f, 50.0).unwrap();
        assert_eq!(v.outcome, RegionOutcome::NotProven);
        if let Some(w) = v.witness {
            assert!(region.contains(w) && !f.contains(w));
        }
    }

    #[test]
    fn region_outside_fence() {
        let region = FeasibleRegion::new(vec![disk(40.4, -3.7, 80.0)]).unwrap();
        let f = fence(&[(45.0, 0.0), (45.0, 15.0), (55.0, 15.0), (55.0, 0.0)]);
        let v = check_geofence(&region, &f, 5.0).unwrap();
        assert_eq!(v.outcome, RegionOutcome::ProvenOutside);
    }

    #[test]
    fn fence_inside_region_is_not_proven() {
        let region = FeasibleRegion::new(vec![disk(50.0, 10.0, 500.0)]).unwrap();
        let f = fence(&[(49.9, 9.9), (49.9, 10.1), (50.1, 10.1), (50.1, 9.9)]);
        let v = check_geofence(&region, &f, 5.0).unwrap();
        assert_eq!(v.outcome, RegionOutcome::NotProven);
    }

    #[test]
    fn contradictory_disks() {
        let region = FeasibleRegion::new(vec![disk(40.0, 0.0, 100.0), disk(49.0, 0.0, 100.0)]).unwrap();
        let f = fence(&[(30.0, -10.0), (30.0, 10.0), (60.0, 10.0), (60.0, -10.0)]);
        assert_eq!(check_geofence(&region, &f, 5.0), Err(GeoSolveError::EmptyRegion));
    }

    #[test]
    fn tiny_region_found_by_refinement() {
        let region = FeasibleRegion::new(vec![disk(45.0, 5.0, 0.5)]).unwrap();
        let f = fence(&[(40.0, 0.0), (40.0, 10.0), (50.0, 10.0), (50.0, 0.0)]);
        let v = check_geofence(&region, &f, 5.0).unwrap();
        assert_eq!(v.outcome, RegionOutcome::ProvenInside);
    }

    #[test]
    fn trusted_time_median_and_spread() {
        let t = Utc.with_ymd_and_hms(2026, 3, 1, 12, 0, 0).unwrap();
        let id = NodeId::from_name("a");
        let same: Vec<_> = (0..3).map(|_| sm(id, 0, t)).collect();
        assert_eq!(trusted_time(&same, Duration::seconds(5)).unwrap(), t);

        let spread: Vec<_> = (0..3).map(|i| sm(id, 0, t + Duration::seconds(i))).collect();
        assert_eq!(trusted_time(&spread, Duration::seconds(5)).unwrap(), t + Duration::seconds(1));

        // half the RTT is added before taking the median
        let rtt = vec![sm(id, 2_000_000, t)];
        assert_eq!(trusted_time(&rtt, Duration::seconds(5)).unwrap(), t + Duration::seconds(1));

        let wide: Vec<_> = [0, 15, 30].iter().map(|s| sm(id, 0, t + Duration::seconds(*s))).collect();
        assert!(matches!(
            trusted_time(&wide, Duration::seconds(5)),
            Err(GeoSolveError::TimeSpreadExceeded { .. })
        ));
    }

    #[test]
    fn region_csv_has_disks_and_boundary() {
        let region = FeasibleRegion::new(vec![disk(45.0, 5.0, 30.0)]).unwrap();
        let mut buf = Vec::new();
        write_region_csv(&region, 5.0, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("kind,lat,lon,radius_km\ndisk,45,5,30\n"));
        assert!(text.lines().filter(|l| l.starts_with("boundary")).count() > 10);
    }
}
