mod common;

use proptest::prelude::*;

use common::{pt, t};
use dgate::analysis::quantile;
use dgate::channel::ProverIdentity;
use dgate::crypto::{KeyPair, Nonce, PkiRegistry, TeeKind};
use dgate::geoclient::{GeoClient, GeoClientConfig, SignedMeasurements, GEOCLIENT_CODE};
use dgate::geosolve::{check_geofence, delay_to_distance, OverheadBudget, RegionOutcome};
use dgate::model::{haversine_km, DelayMicros, Disk, DistanceKm, FeasibleRegion, GeoPoint, Geofence, NodeId};
use dgate::probe::MinDelayRecord;
use dgate::sim::{OverheadKind, OverheadModel};
use dgate::parties::DataMessage;
use dgate::wire::{decode_frame, decode_ping, encode_frame, encode_ping, ControlMessage, ErrorMessage, PingPacket};

fn point() -> impl Strategy<Value = GeoPoint> {
    (-89.0f64..89.0, -179.0f64..179.0).prop_map(|(a, b)| pt(a, b))
}

fn europe() -> impl Strategy<Value = GeoPoint> {
    (40.0f64..58.0, -5.0f64..25.0).prop_map(|(a, b)| pt(a, b))
}

fn fence() -> Geofence {
    Geofence::new(vec![pt(42.0, -5.0), pt(42.0, 24.0), pt(57.0, 24.0), pt(57.0, -5.0)]).unwrap()
}

fn record(peer: u16, us: u64) -> MinDelayRecord {
    MinDelayRecord {
        peer: NodeId::from_name(&format!("peer-{peer}")),
        min_rtt: DelayMicros(us),
        samples: 10,
        measured_at: t(9, 0, 0),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shrinking_a_disk_keeps_proven_inside(
        centers in prop::collection::vec(europe(), 1..4),
        radii in prop::collection::vec(20.0f64..400.0, 4),
        shrink in 0.1f64..1.0,
        which in 0usize..4,
    ) {
        let disks: Vec<Disk> = centers.iter().zip(&radii)
            .map(|(c, r)| Disk { center: *c, radius: DistanceKm::new(*r) }).collect();
        let mut smaller = disks.clone();
        let i = which % smaller.len();
        smaller[i].radius = DistanceKm::new(smaller[i].radius.km() * shrink);
        let big = check_geofence(&FeasibleRegion::new(disks).unwrap(), &fence(), 10.0);
        let small = check_geofence(&FeasibleRegion::new(smaller).unwrap(), &fence(), 10.0);
        if let (Ok(big), Ok(small)) = (big, small) {
            if big.outcome == RegionOutcome::ProvenInside {
                prop_assert_eq!(small.outcome, RegionOutcome::ProvenInside);
            }
        }
    }

    #[test]
    fn extra_disk_never_adds_points(
        disks in prop::collection::vec((europe(), 50.0f64..800.0), 1..4),
        extra in (europe(), 50.0f64..800.0),
        probe in europe(),
    ) {
        let base: Vec<Disk> = disks.iter().map(|(c, r)| Disk { center: *c, radius: DistanceKm::new(*r) }).collect();
        let mut more = base.clone();
        more.push(Disk { center: extra.0, radius: DistanceKm::new(extra.1) });
        let (base, more) = (FeasibleRegion::new(base).unwrap(), FeasibleRegion::new(more).unwrap());
        prop_assert!(!more.contains(probe) || base.contains(probe));
    }

    #[test]
    fn fence_is_independent_of_vertex_order(
        verts in prop::collection::vec(europe(), 3..8),
        rot in 0usize..8,
        reverse in any::<bool>(),
        probe in europe(),
    ) {
        // sort around the centroid to get a simple polygon
        let (clat, clon) = verts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.lat(), b + p.lon()));
        let (clat, clon) = (clat / verts.len() as f64, clon / verts.len() as f64);
        let mut v = verts.clone();
        v.sort_by(|a, b| {
            let fa = (a.lat() - clat).atan2(a.lon() - clon);
            let fb = (b.lat() - clat).atan2(b.lon() - clon);
            fa.total_cmp(&fb)
        });
        let Ok(g) = Geofence::new(v.clone()) else { return Ok(()) };
        let mut w = v.clone();
        let n = w.len();
        w.rotate_left(rot % n);
        if reverse {
            w.reverse();
        }
        let h = Geofence::new(w).unwrap();
        prop_assert_eq!(g.contains(probe), h.contains(probe));
    }

    #[test]
    fn haversine_is_a_metric(a in point(), b in point(), c in point()) {
        let ab = haversine_km(a, b).km();
        prop_assert!((ab - haversine_km(b, a).km()).abs() < 1e-6);
        prop_assert!(haversine_km(a, a).km() < 1e-6);
        prop_assert!(ab <= haversine_km(a, c).km() + haversine_km(c, b).km() + 1e-6);
        prop_assert!(ab <= 20_016.0);
    }

    #[test]
    fn distance_is_monotone_in_delay(a in 0u64..10_000_000, b in 0u64..10_000_000, d in 0u64..1_000_000) {
        let (lo, hi) = (a.min(b), a.max(b));
        let budget = OverheadBudget::default();
        prop_assert!(delay_to_distance(DelayMicros(lo), budget) <= delay_to_distance(DelayMicros(hi), budget));
        prop_assert!(
            delay_to_distance(DelayMicros(hi), OverheadBudget::unsound(DelayMicros(d)))
                <= delay_to_distance(DelayMicros(hi), budget)
        );
    }

    #[test]
    fn overhead_quantile_is_monotone(u in 0.0f64..1.0, v in 0.0f64..1.0) {
        let (lo, hi) = (u.min(v), u.max(v));
        for kind in OverheadKind::ALL {
            let m = OverheadModel::of(kind);
            prop_assert!(m.quantile(lo) <= m.quantile(hi));
            prop_assert!(m.quantile(lo) >= m.floor.0 as f64);
        }
    }

    #[test]
    fn sample_quantile_is_monotone(mut xs in prop::collection::vec(0.0f64..1e6, 1..50), p in 0.0f64..1.0, q in 0.0f64..1.0) {
        xs.sort_by(f64::total_cmp);
        let (lo, hi) = (p.min(q), p.max(q));
        let (a, b) = (quantile(&xs, lo).unwrap(), quantile(&xs, hi).unwrap());
        prop_assert!(a <= b);
        prop_assert!(xs[0] <= a && b <= xs[xs.len() - 1]);
    }

    #[test]
    fn excerpt_holds_the_k_lowest(delays in prop::collection::vec((0u16..40, 1u64..100_000), 0..60)) {
        let gc = GeoClient::new(
            ProverIdentity {
                id: NodeId::from_name("observer"),
                identity: KeyPair::from_seed([1; 32]),
                platform: KeyPair::from_seed([2; 32]),
                code_identity: GEOCLIENT_CODE.to_vec(),
                tee_kind: TeeKind::SgxLike,
            },
            GeoClientConfig::default(),
            PkiRegistry::default(),
        );
        for (peer, us) in &delays {
            gc.record_measurement(record(*peer, *us));
        }
        let ex = gc.excerpt();
        let k = GeoClientConfig::default().excerpt_size;
        let mut latest: Vec<u64> = gc.neighbor_table().iter().map(|e| e.record.min_rtt.0).collect();
        latest.sort();
        latest.truncate(k);
        prop_assert!(ex.len() <= k);
        prop_assert!(ex.windows(2).all(|w| w[0].min_rtt <= w[1].min_rtt));
        prop_assert_eq!(ex.iter().map(|r| r.min_rtt.0).collect::<Vec<_>>(), latest);
    }

    #[test]
    fn ping_codec_round_trip(sid in any::<[u8; 16]>(), seq in any::<u32>()) {
        let req = PingPacket::request(sid, seq);
        prop_assert_eq!(decode_ping(&encode_ping(&req)).unwrap(), req);
        let echo = req.echo();
        prop_assert_eq!(decode_ping(&encode_ping(&echo)).unwrap(), echo);
    }

    #[test]
    fn frame_codec_round_trip(
        code in "[A-Za-z]{1,20}",
        detail in ".{0,80}",
        payload in prop::collection::vec(any::<u8>(), 0..256),
        excerpt in prop::collection::vec((0u16..100, 1u64..1_000_000), 0..8),
        direct in 1u64..1_000_000,
    ) {
        let key = KeyPair::from_seed([9; 32]);
        let sm = SignedMeasurements::new(
            NodeId::from_name("gc"),
            record(1000, direct),
            excerpt.iter().map(|(p, us)| record(*p, *us)).collect(),
            t(10, 0, 0),
            Nonce::from_bytes([3; 16]),
            &key,
        );
        for msg in [
            ControlMessage::Error(ErrorMessage { code: code.clone(), detail: detail.clone() }),
            ControlMessage::Data(DataMessage { payload: payload.clone() }),
            ControlMessage::SM(sm),
        ] {
            let bytes = encode_frame(&msg).unwrap();
            let (back, used) = decode_frame(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back, msg);
        }
    }
}
