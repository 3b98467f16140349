//! Synthetic site generator: PS/EB/LC-like 2-minute series with daily
//! periodicity, weekend-night boosts (EB), uplink event bursts (LC) and
//! a sub-2-permille missing-bucket rate.
//!
//! The generator is a deterministic template plus a slow AR(1) load
//! deviation plus seeded per-feature Gaussian noise, clipped into range.
//! The AR term makes near-future buckets genuinely easier to predict
//! than distant ones; the white term puts a floor under one-step
//! prediction that a persistence guess pays twice. MCS columns move
//! against the RB columns, uplink couples to the load more weakly than
//! downlink, and during events the construction forces the uplink
//! throughput above downlink. Profiles are data files, not code:
//! defaults ship with the crate and any profile can be loaded from JSON.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DciAggregate, BUCKETS_PER_DAY, BUCKET_SECONDS, DEFAULT_BANDWIDTH_RB};
use crate::error::{Error, Result};
use crate::seed::rng_from;

/// During events the uplink is pinned at or above these values and the
/// downlink RB share is capped, which (with the monotone TBS mapping)
/// guarantees thr_up > thr_down for every event bucket.
const EVENT_RB_UP_MIN: f64 = 70.0;
const EVENT_MCS_UP_MIN: f64 = 21.0;
const EVENT_RB_DOWN_MAX: f64 = 35.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub day: u32,
    pub hour: f64,
    pub duration_h: f64,
    /// Multiplier on the uplink RB share during the event.
    pub uplink_burst: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseStd {
    /// Relative (multiplicative) noise fractions.
    pub rnti_rel: f64,
    pub rb_down_rel: f64,
    pub rb_up_rel: f64,
    /// Absolute noise in MCS points.
    pub mcs_down_abs: f64,
    pub mcs_up_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteProfile {
    pub name: String,
    pub days: u32,
    /// 24 hourly load multipliers, linearly interpolated across the day.
    pub base_load: Vec<f64>,
    pub users_base: f64,
    pub rb_down_base: f64,
    pub rb_up_base: f64,
    pub mcs_down_base: f64,
    pub mcs_up_base: f64,
    /// MCS points subtracted per unit of relative RB excess.
    pub mcs_rb_slope: f64,
    /// Applied on Friday/Saturday nights (22:00-03:00); 1.0 disables.
    pub weekend_night_boost: f64,
    /// Uplink follows load^exponent, weakening its user-count coupling.
    pub uplink_load_exponent: f64,
    pub events: Vec<EventSpec>,
    pub noise: NoiseStd,
    /// Slow shared load deviation: AR(1) coefficient and innovation std.
    pub ar_rho: f64,
    pub ar_innov: f64,
    pub missing_rate: f64,
}

impl SiteProfile {
    /// Built-in PS / EB / LC profiles (case-insensitive).
    pub fn builtin(name: &str) -> Result<SiteProfile> {
        let text = match name.to_ascii_uppercase().as_str() {
            "PS" => include_str!("../profiles/ps.json"),
            "EB" => include_str!("../profiles/eb.json"),
            "LC" => include_str!("../profiles/lc.json"),
            other => {
                return Err(Error::InvalidArg(format!(
                    "unknown site {other:?} (expected PS, EB or LC, or a profile file)"
                )))
            }
        };
        let profile: SiteProfile = serde_json::from_str(text)?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn from_json_file(path: &Path) -> Result<SiteProfile> {
        let profile: SiteProfile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_load.len() != 24 {
            return Err(Error::InvalidData(format!(
                "profile {}: base_load must have 24 entries",
                self.name
            )));
        }
        if self.missing_rate > 0.002 {
            return Err(Error::InvalidData(format!(
                "profile {}: missing_rate {} exceeds 2 permille",
                self.name, self.missing_rate
            )));
        }
        if self.days == 0 {
            return Err(Error::InvalidData(format!(
                "profile {}: days == 0",
                self.name
            )));
        }
        if !(0.0..1.0).contains(&self.ar_rho) {
            return Err(Error::InvalidData(format!(
                "profile {}: ar_rho {} outside [0,1)",
                self.name, self.ar_rho
            )));
        }
        Ok(())
    }

    /// Piecewise-linear daily template at fractional hour `h`.
    fn load_at(&self, h: f64) -> f64 {
        let lo = h.floor() as usize % 24;
        let hi = (lo + 1) % 24;
        let frac = h - h.floor();
        self.base_load[lo] * (1.0 - frac) + self.base_load[hi] * frac
    }

    fn in_event(&self, day: u32, hour: f64) -> Option<&EventSpec> {
        self.events
            .iter()
            .find(|e| e.day == day && hour >= e.hour && hour < e.hour + e.duration_h)
    }
}

/// Generate the site's 2-minute series: `days * 720` buckets minus the
/// seeded missing injections. Day 0 is a Monday.
pub fn generate(profile: &SiteProfile, seed: u64) -> Result<Vec<DciAggregate>> {
    profile.validate()?;
    let mut rng = rng_from(seed);
    let n = profile.days as usize * BUCKETS_PER_DAY;
    let mut out = Vec::with_capacity(n);
    let mut ar = 0.0f64;
    let mut normal = move |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    for i in 0..n {
        let day = (i / BUCKETS_PER_DAY) as u32;
        let hour = (i % BUCKETS_PER_DAY) as f64 * 24.0 / BUCKETS_PER_DAY as f64;
        let dow = day % 7; // 0 = Monday

        ar = profile.ar_rho * ar + profile.ar_innov * normal(&mut rng);

        let mut curve = profile.load_at(hour);
        let night_boost = ((dow == 4 || dow == 5) && hour >= 22.0)
            || ((dow == 5 || dow == 6) && hour < 3.0);
        if night_boost {
            curve *= profile.weekend_night_boost;
        }
        let load = (curve * (1.0 + ar)).max(0.05);
        let load_up = load.powf(profile.uplink_load_exponent);

        let rnti = (profile.users_base * load * (1.0 + profile.noise.rnti_rel * normal(&mut rng)))
            .round()
            .max(0.0) as u32;
        let mut rb_down = (profile.rb_down_base
            * load
            * (1.0 + profile.noise.rb_down_rel * normal(&mut rng)))
        .clamp(0.5, 98.0);
        let mut rb_up = (profile.rb_up_base
            * load_up
            * (1.0 + profile.noise.rb_up_rel * normal(&mut rng)))
        .clamp(0.3, 95.0);

        let mcs_down = (profile.mcs_down_base
            - profile.mcs_rb_slope * (rb_down - profile.rb_down_base) / profile.rb_down_base
            + profile.noise.mcs_down_abs * normal(&mut rng))
        .clamp(0.5, 30.5);
        let mut mcs_up = (profile.mcs_up_base
            - profile.mcs_rb_slope * (rb_up - profile.rb_up_base) / profile.rb_up_base
            + profile.noise.mcs_up_abs * normal(&mut rng))
        .clamp(0.5, 30.5);

        if let Some(event) = profile.in_event(day, hour) {
            rb_up = (rb_up * event.uplink_burst).clamp(EVENT_RB_UP_MIN, 95.0);
            mcs_up = mcs_up.clamp(EVENT_MCS_UP_MIN, 30.5);
            rb_down = rb_down.min(EVENT_RB_DOWN_MAX);
        }

        // Missing-value injection: the bucket disappears, leaving a gap.
        if rng.random::<f64>() < profile.missing_rate {
            continue;
        }

        out.push(DciAggregate::with_derived_throughput(
            i as i64 * BUCKET_SECONDS,
            rnti,
            mcs_down,
            mcs_up,
            rb_down,
            rb_up,
            DEFAULT_BANDWIDTH_RB,
        )?);
    }
    Ok(out)
}

/// Sample autocorrelation of `series` at `lag`.
pub fn autocorrelation(series: &[f64], lag: usize) -> f64 {
    let n = series.len();
    assert!(lag < n, "lag {lag} >= series length {n}");
    let mean = series.iter().sum::<f64>() / n as f64;
    let var: f64 = series.iter().map(|v| (v - mean) * (v - mean)).sum();
    let cov: f64 = (0..n - lag)
        .map(|i| (series[i] - mean) * (series[i + lag] - mean))
        .sum();
    cov / var
}
