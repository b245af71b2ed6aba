//! Per-host processing overhead profiles.
//!
//! Each profile is an empirical quantile function: a piecewise-linear map
//! from a uniform draw `u` to microseconds of overhead added to a round trip.
//! Knots sit at the probabilities that dominate the minimum of R draws
//! (roughly `5/R`), so the max-over-runs of the minimum tracks the measured
//! envelopes at R = 10, 100, 1000 and 10000.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crypto::TeeKind;
use crate::model::DelayMicros;
use crate::sim::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverheadKind {
    SgxLike,
    SevLike,
    NoneIntel,
    NoneAmd,
    /// Ideal peer with no processing delay, for calibration runs.
    Zero,
}

impl OverheadKind {
    pub const ALL: [OverheadKind; 5] = [
        OverheadKind::SgxLike,
        OverheadKind::SevLike,
        OverheadKind::NoneIntel,
        OverheadKind::NoneAmd,
        OverheadKind::Zero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OverheadKind::SgxLike => "sgx-like",
            OverheadKind::SevLike => "sev-like",
            OverheadKind::NoneIntel => "none-intel",
            OverheadKind::NoneAmd => "none-amd",
            OverheadKind::Zero => "zero",
        }
    }

    /// Profile a host of the given TEE kind gets when none is configured.
    pub fn for_tee(tee: TeeKind) -> Self {
        match tee {
            TeeKind::SgxLike => OverheadKind::SgxLike,
            TeeKind::SevLike => OverheadKind::SevLike,
            TeeKind::None => OverheadKind::NoneIntel,
        }
    }

    fn knots(self) -> &'static [(f64, f64)] {
        match self {
            OverheadKind::SevLike => &[
                (0.0, 279.0),
                (5e-4, 360.0),
                (5e-3, 808.0),
                (5e-2, 1051.0),
                (0.15, 1350.0),
                (0.4, 1710.0),
                (1.0, 3420.0),
            ],
            OverheadKind::NoneAmd => &[
                (0.0, 159.0),
                (5e-4, 270.0),
                (5e-3, 298.0),
                (5e-2, 462.0),
                (0.4, 1393.0),
                (1.0, 2786.0),
            ],
            OverheadKind::SgxLike => &[
                (0.0, 71.0),
                (5e-4, 78.0),
                (5e-3, 84.0),
                (0.015, 96.0),
                (0.035, 280.0),
                (5e-2, 296.0),
                (0.4, 330.0),
                (1.0, 660.0),
            ],
            OverheadKind::NoneIntel => &[
                (0.0, 27.0),
                (5e-4, 29.0),
                (5e-3, 50.0),
                (5e-2, 77.0),
                (0.4, 307.0),
                (1.0, 614.0),
            ],
            OverheadKind::Zero => &[(0.0, 0.0), (1.0, 0.0)],
        }
    }
}

impl fmt::Display for OverheadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OverheadKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SimError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadModel {
    pub kind: OverheadKind,
    pub floor: DelayMicros,
    knots: Vec<(f64, f64)>,
}

impl OverheadModel {
    pub fn of(kind: OverheadKind) -> Self {
        let knots = kind.knots().to_vec();
        Self { kind, floor: DelayMicros(knots[0].1 as u64), knots }
    }

    /// Overhead in microseconds at cumulative probability `u`; never below the floor.
    pub fn quantile(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let i = self.knots.partition_point(|k| k.0 <= u).clamp(1, self.knots.len() - 1);
        let (p0, v0) = self.knots[i - 1];
        let (p1, v1) = self.knots[i];
        if p1 <= p0 {
            return v1;
        }
        v0 + (v1 - v0) * (u - p0) / (p1 - p0)
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }
}

/// The shipped model for `kind`. The same model serves every repetition
/// count; `repetitions` is validated only.
pub fn calibrate_overhead(kind: &str, repetitions: u32) -> Result<OverheadModel, SimError> {
    if repetitions == 0 {
        return Err(SimError::Config("repetitions must be at least 1".into()));
    }
    Ok(OverheadModel::of(kind.parse()?))
}

/// Uniform draw in [0, 1) keyed by `parts`; the simulator's only randomness.
pub fn keyed_unit(parts: &[&[u8]]) -> f64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u32).to_be_bytes());
        h.update(p);
    }
    let d = h.finalize();
    let x = u64::from_be_bytes(d[..8].try_into().expect("8 bytes"));
    (x >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floors() {
        let f = |k: &str| calibrate_overhead(k, 1000).unwrap().floor.0;
        assert_eq!(f("sev-like"), 279);
        assert_eq!(f("none-amd"), 159);
        assert_eq!(f("sgx-like"), 71);
        assert_eq!(f("none-intel"), 27);
        assert!(f("sgx-like") >= 2 * f("none-intel"));
        assert!(matches!(calibrate_overhead("tdx", 10), Err(SimError::UnknownKind(_))));
    }

    #[test]
    fn quantile_is_monotone_and_floored() {
        for kind in OverheadKind::ALL {
            let m = OverheadModel::of(kind);
            let mut prev = m.quantile(0.0);
            assert_eq!(prev, m.floor.0 as f64);
            for i in 1..=1000 {
                let q = m.quantile(i as f64 / 1000.0);
                assert!(q >= prev && q >= m.floor.0 as f64);
                prev = q;
            }
        }
        let sev = OverheadModel::of(OverheadKind::SevLike);
        assert_eq!(sev.quantile(5e-3), 808.0);
        assert_eq!(sev.quantile(2.5e-4), 319.5);
    }

    #[test]
    fn keyed_unit_range_and_determinism() {
        let a = keyed_unit(&[b"x", b"y"]);
        assert_eq!(a, keyed_unit(&[b"x", b"y"]));
        assert_ne!(a, keyed_unit(&[b"xy"]));
        let mean: f64 = (0..10_000u32).map(|i| keyed_unit(&[&i.to_be_bytes()])).sum::<f64>() / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02);
    }
}
