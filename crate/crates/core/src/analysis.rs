//! Offline statistics over calibration runs: quartiles of the per-run
//! minimum RTT, grouped by repetition count.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::sim::CalibrationSet;

/// One run of a calibration campaign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub repetitions: u32,
    pub run: u32,
    pub min_rtt_us: u64,
}

pub fn rows_of(set: &CalibrationSet) -> Vec<CalibrationRow> {
    set.min_rtts_us
        .iter()
        .enumerate()
        .map(|(run, m)| CalibrationRow { repetitions: set.repetitions, run: run as u32, min_rtt_us: *m })
        .collect()
}

/// Quantile of sorted data by linear interpolation between closest ranks.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    pub fn of(values: &[u64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().map(|x| *x as f64).collect();
        v.sort_by(f64::total_cmp);
        Some(Self {
            n: v.len(),
            min: *v.first()?,
            q1: quantile(&v, 0.25)?,
            median: quantile(&v, 0.5)?,
            q3: quantile(&v, 0.75)?,
            max: *v.last()?,
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Quartiles per repetition count. Counts listed in `expected` that have
/// no rows are logged and left out.
pub fn quartiles_by_repetitions(rows: &[CalibrationRow], expected: &[u32]) -> BTreeMap<u32, Quartiles> {
    let mut groups: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.repetitions).or_default().push(r.min_rtt_us);
    }
    for r in expected {
        if !groups.contains_key(r) {
            log::warn!("no runs for R={r}");
        }
    }
    groups.into_iter().filter_map(|(r, v)| Quartiles::of(&v).map(|q| (r, q))).collect()
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<CalibrationRow>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

pub fn write_rows<W: Write>(rows: &[CalibrationRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_quartiles<W: Write>(q: &BTreeMap<u32, Quartiles>, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["repetitions", "n", "min", "q1", "median", "q3", "max", "iqr"])?;
    for (r, s) in q {
        w.write_record([
            r.to_string(),
            s.n.to_string(),
            format!("{:.1}", s.min),
            format!("{:.1}", s.q1),
            format!("{:.1}", s.median),
            format!("{:.1}", s.q3),
            format!("{:.1}", s.max),
            format!("{:.1}", s.iqr()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_interpolation() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.25), Some(1.75));
        assert_eq!(quantile(&v, 0.5), Some(2.5));
        assert_eq!(quantile(&v, 1.0), Some(4.0));
        assert_eq!(quantile(&[], 0.5), None);
        let q = Quartiles::of(&[10, 20, 30, 40, 50]).unwrap();
        assert_eq!((q.q1, q.median, q.q3, q.iqr()), (20.0, 30.0, 40.0, 20.0));
    }

    #[test]
    fn csv_round_trip_and_grouping() {
        let rows = vec![
            CalibrationRow { repetitions: 10, run: 0, min_rtt_us: 300 },
            CalibrationRow { repetitions: 10, run: 1, min_rtt_us: 500 },
            CalibrationRow { repetitions: 100, run: 0, min_rtt_us: 290 },
        ];
        let mut buf = Vec::new();
        write_rows(&rows, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("repetitions,run,min_rtt_us\n"));
        assert_eq!(read_rows(buf.as_slice()).unwrap(), rows);
        let q = quartiles_by_repetitions(&rows, &[10, 100, 1000]);
        assert_eq!(q.len(), 2);
        assert_eq!(q[&10].median, 400.0);
    }
}
