//! Transport-block-size approximation behind the THR columns.
//!
//! A full standards-accurate TBS lookup is out of scope; instead each
//! subframe carries `n_rb * 12 subcarriers * 14 symbols * bits_per_symbol
//! * code_rate` bits, with the MCS mapped through a coarse table shipped
//! as a replaceable JSON data file. Fractional MCS values (bucket means)
//! interpolate linearly between adjacent entries, which preserves
//! monotonicity in both MCS and RB count.

use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::{DciAggregate, SUBFRAMES_PER_BUCKET};
use crate::error::{Error, Result};

const RE_PER_RB_SUBFRAME: f64 = 12.0 * 14.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McsEntry {
    pub mcs: u32,
    pub bits_per_symbol: f64,
    pub code_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McsTable {
    #[serde(default)]
    pub comment: String,
    pub entries: Vec<McsEntry>,
}

static DEFAULT_TABLE: OnceLock<McsTable> = OnceLock::new();

impl McsTable {
    pub fn default_table() -> &'static McsTable {
        DEFAULT_TABLE.get_or_init(|| {
            serde_json::from_str(include_str!("mcs_table.json")).expect("embedded MCS table")
        })
    }

    pub fn from_json_file(path: &Path) -> Result<McsTable> {
        let table: McsTable = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.len() != 32 {
            return Err(Error::InvalidData(format!(
                "MCS table must have 32 entries, found {}",
                self.entries.len()
            )));
        }
        let mut last = -1.0f64;
        for (i, e) in self.entries.iter().enumerate() {
            if e.mcs as usize != i {
                return Err(Error::InvalidData(format!(
                    "MCS table entry {i} labelled {}",
                    e.mcs
                )));
            }
            let eff = e.bits_per_symbol * e.code_rate;
            if eff < last {
                return Err(Error::InvalidData(format!(
                    "MCS table efficiency decreases at index {i}"
                )));
            }
            last = eff;
        }
        Ok(())
    }

    /// Bits per resource element at the given (possibly fractional) MCS.
    pub fn efficiency(&self, mcs: f64) -> Result<f64> {
        if !(0.0..=31.0).contains(&mcs) {
            return Err(Error::InvalidData(format!("mcs {mcs} outside [0,31]")));
        }
        let lo = mcs.floor() as usize;
        let hi = mcs.ceil() as usize;
        let e_lo = self.entries[lo].bits_per_symbol * self.entries[lo].code_rate;
        if lo == hi {
            return Ok(e_lo);
        }
        let e_hi = self.entries[hi].bits_per_symbol * self.entries[hi].code_rate;
        let frac = mcs - lo as f64;
        Ok(e_lo + frac * (e_hi - e_lo))
    }
}

/// Bits carried by one subframe at the given MCS over `rb` resource
/// blocks (fractional RBs allowed: they arise from bucket means).
pub fn tbs_per_subframe(table: &McsTable, mcs: f64, rb: f64) -> Result<f64> {
    Ok(rb * RE_PER_RB_SUBFRAME * table.efficiency(mcs)?)
}

/// Derive (thr_down, thr_up) in bits for one 2-minute aggregate using
/// the default table: per-subframe TBS at the bucket's mean MCS and mean
/// assigned-RB count, summed over the bucket's subframes.
pub fn derive_throughput(agg: &DciAggregate, bandwidth_rb: f64) -> Result<(f64, f64)> {
    let table = McsTable::default_table();
    let rb_down = agg.rb_down / 100.0 * bandwidth_rb;
    let rb_up = agg.rb_up / 100.0 * bandwidth_rb;
    let down = tbs_per_subframe(table, agg.mcs_down, rb_down)? * SUBFRAMES_PER_BUCKET;
    let up = tbs_per_subframe(table, agg.mcs_up, rb_up)? * SUBFRAMES_PER_BUCKET;
    Ok((down, up))
}
