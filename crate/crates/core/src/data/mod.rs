//! Raw DCI aggregates and their ingestion.
//!
//! Two CSV schemas are accepted: pre-aggregated 2-minute rows
//! (`timestamp,rnti_count,mcs_down,mcs_up,rb_down,rb_up`) and raw
//! per-record logs (`timestamp,rnti,mcs_down,mcs_up,rb_down,rb_up`),
//! which are downsampled here. Rows or buckets missing a variable for
//! the whole window are dropped, never zero-filled, so downstream series
//! contain no missing values but may contain time gaps.

pub mod pipeline;
pub mod tbs;

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// 2-minute aggregation bucket.
pub const BUCKET_SECONDS: i64 = 120;
pub const BUCKETS_PER_DAY: usize = 720;
/// 1 ms LTE subframes in one bucket.
pub const SUBFRAMES_PER_BUCKET: f64 = 120_000.0;
/// 20 MHz channel: 100 resource blocks per subframe.
pub const DEFAULT_BANDWIDTH_RB: f64 = 100.0;

pub const INPUT_COLUMNS: [&str; 5] = ["rnti_count", "rb_down", "rb_up", "mcs_down", "mcs_up"];
pub const TARGET_COLUMNS: [&str; 5] = ["rnti_count", "rb_down", "rb_up", "thr_down", "thr_up"];

/// One clean 2-minute row: the five observed features plus the derived
/// throughput estimates in bits.
#[derive(Debug, Clone, PartialEq)]
pub struct DciAggregate {
    /// Bucket start, epoch seconds.
    pub timestamp: i64,
    pub rnti_count: u32,
    pub mcs_down: f64,
    pub mcs_up: f64,
    /// Percent of available RBs assigned, [0, 100].
    pub rb_down: f64,
    pub rb_up: f64,
    pub thr_down: f64,
    pub thr_up: f64,
}

impl DciAggregate {
    /// Build a validated aggregate, deriving the throughput columns from
    /// the MCS/RB fields.
    pub fn with_derived_throughput(
        timestamp: i64,
        rnti_count: u32,
        mcs_down: f64,
        mcs_up: f64,
        rb_down: f64,
        rb_up: f64,
        bandwidth_rb: f64,
    ) -> Result<Self> {
        let mut agg = DciAggregate {
            timestamp,
            rnti_count,
            mcs_down,
            mcs_up,
            rb_down,
            rb_up,
            thr_down: 0.0,
            thr_up: 0.0,
        };
        agg.validate_observed()?;
        let (down, up) = tbs::derive_throughput(&agg, bandwidth_rb)?;
        agg.thr_down = down;
        agg.thr_up = up;
        Ok(agg)
    }

    fn validate_observed(&self) -> Result<()> {
        let checks = [
            ("mcs_down", self.mcs_down, 0.0, 31.0),
            ("mcs_up", self.mcs_up, 0.0, 31.0),
            ("rb_down", self.rb_down, 0.0, 100.0),
            ("rb_up", self.rb_up, 0.0, 100.0),
        ];
        for (name, v, lo, hi) in checks {
            if !v.is_finite() || v < lo || v > hi {
                return Err(Error::InvalidData(format!(
                    "aggregate at t={}: {name}={v} outside [{lo},{hi}]",
                    self.timestamp
                )));
            }
        }
        Ok(())
    }
}

/// One raw DCI record. Direction-specific fields may be absent when the
/// record carries only one link direction.
#[derive(Debug, Clone, PartialEq)]
pub struct DciRecord {
    pub timestamp: i64,
    pub rnti: u32,
    pub mcs_down: Option<f64>,
    pub mcs_up: Option<f64>,
    /// RB counts allocated by this record.
    pub rb_down: Option<f64>,
    pub rb_up: Option<f64>,
}

/// Aggregate raw records into 2-minute buckets: distinct RNTIs, mean
/// MCS, RB share of the bucket capacity. Buckets missing any variable
/// for the whole window (including empty buckets) are dropped.
pub fn downsample(records: &[DciRecord], bandwidth_rb: f64) -> Result<Vec<DciAggregate>> {
    let mut last_ts = i64::MIN;
    for r in records {
        if r.timestamp < last_ts {
            return Err(Error::InvalidData(format!(
                "records are not sorted by timestamp near t={}",
                r.timestamp
            )));
        }
        last_ts = r.timestamp;
    }
    let mut buckets: BTreeMap<i64, Vec<&DciRecord>> = BTreeMap::new();
    for r in records {
        let b = r.timestamp - r.timestamp.rem_euclid(BUCKET_SECONDS);
        buckets.entry(b).or_default().push(r);
    }
    let mut out = Vec::with_capacity(buckets.len());
    let capacity = bandwidth_rb * SUBFRAMES_PER_BUCKET;
    for (start, rows) in buckets {
        let mut rntis: Vec<u32> = rows.iter().map(|r| r.rnti).collect();
        rntis.sort_unstable();
        rntis.dedup();

        let mean = |vals: Vec<f64>| -> Option<f64> {
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        let mcs_down = mean(rows.iter().filter_map(|r| r.mcs_down).collect());
        let mcs_up = mean(rows.iter().filter_map(|r| r.mcs_up).collect());
        let rb_down: Vec<f64> = rows.iter().filter_map(|r| r.rb_down).collect();
        let rb_up: Vec<f64> = rows.iter().filter_map(|r| r.rb_up).collect();

        // Removal rule: a variable absent across the whole bucket drops
        // the bucket.
        let (Some(mcs_down), Some(mcs_up)) = (mcs_down, mcs_up) else {
            continue;
        };
        if rb_down.is_empty() || rb_up.is_empty() {
            continue;
        }
        let rb_down_pct = 100.0 * rb_down.iter().sum::<f64>() / capacity;
        let rb_up_pct = 100.0 * rb_up.iter().sum::<f64>() / capacity;
        out.push(DciAggregate::with_derived_throughput(
            start,
            rntis.len() as u32,
            mcs_down,
            mcs_up,
            rb_down_pct.min(100.0),
            rb_up_pct.min(100.0),
            bandwidth_rb,
        )?);
    }
    Ok(out)
}

/// Load either CSV schema; per-record input is downsampled. Aggregate
/// rows with any empty field are dropped (the removal rule), and the
/// throughput columns are derived.
pub fn load_csv(path: &Path) -> Result<Vec<DciAggregate>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 6 {
        return Err(Error::InvalidData(format!(
            "csv {path:?}: expected 6 columns, found {cols:?}"
        )));
    }
    let aggregate_schema = match cols[1] {
        "rnti_count" => true,
        "rnti" => false,
        other => {
            return Err(Error::InvalidData(format!(
                "csv {path:?}: second column must be rnti_count or rnti, found {other:?}"
            )))
        }
    };
    let expected = if aggregate_schema {
        ["timestamp", "rnti_count", "mcs_down", "mcs_up", "rb_down", "rb_up"]
    } else {
        ["timestamp", "rnti", "mcs_down", "mcs_up", "rb_down", "rb_up"]
    };
    if cols != expected {
        return Err(Error::InvalidData(format!(
            "csv {path:?}: header {cols:?} does not match {expected:?}"
        )));
    }

    if aggregate_schema {
        let mut out = Vec::new();
        let mut last_ts = i64::MIN;
        for row in reader.records() {
            let row = row?;
            let parse = |i: usize| -> Option<f64> {
                row.get(i)
                    .filter(|s| !s.trim().is_empty())
                    .and_then(|s| s.trim().parse::<f64>().ok())
            };
            let ts: i64 = row
                .get(0)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::InvalidData(format!("csv {path:?}: bad timestamp {row:?}")))?;
            if ts < last_ts {
                return Err(Error::InvalidData(format!(
                    "csv {path:?}: timestamps not sorted near t={ts}"
                )));
            }
            last_ts = ts;
            let fields = [parse(1), parse(2), parse(3), parse(4), parse(5)];
            let [Some(rnti), Some(mcs_down), Some(mcs_up), Some(rb_down), Some(rb_up)] = fields
            else {
                continue; // missing variable: bucket removed
            };
            out.push(DciAggregate::with_derived_throughput(
                ts,
                rnti as u32,
                mcs_down,
                mcs_up,
                rb_down,
                rb_up,
                DEFAULT_BANDWIDTH_RB,
            )?);
        }
        Ok(out)
    } else {
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row?;
            let parse = |i: usize| -> Option<f64> {
                row.get(i)
                    .filter(|s| !s.trim().is_empty())
                    .and_then(|s| s.trim().parse::<f64>().ok())
            };
            let ts: i64 = row
                .get(0)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::InvalidData(format!("csv {path:?}: bad timestamp {row:?}")))?;
            let rnti = parse(1).ok_or_else(|| {
                Error::InvalidData(format!("csv {path:?}: missing rnti at t={ts}"))
            })? as u32;
            records.push(DciRecord {
                timestamp: ts,
                rnti,
                mcs_down: parse(2),
                mcs_up: parse(3),
                rb_down: parse(4),
                rb_up: parse(5),
            });
        }
        downsample(&records, DEFAULT_BANDWIDTH_RB)
    }
}

/// Write aggregates in the 6-column schema the pipeline consumes
/// (throughputs are derived, not stored).
pub fn write_csv(path: &Path, aggs: &[DciAggregate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["timestamp", "rnti_count", "mcs_down", "mcs_up", "rb_down", "rb_up"])?;
    for a in aggs {
        w.write_record(&[
            a.timestamp.to_string(),
            a.rnti_count.to_string(),
            format!("{:.6}", a.mcs_down),
            format!("{:.6}", a.mcs_up),
            format!("{:.6}", a.rb_down),
            format!("{:.6}", a.rb_up),
        ])?;
    }
    w.flush()?;
    Ok(())
}
