//! Scenario configuration. Every field has a default, so an empty config
//! file describes the honest 5-meter, 10-period run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::functions::{CppCalendar, DayPrices, PredictionWeights, RtpParams, StsModel, TouParams, HOURS};
use crate::protocols::gateway::{GridParams, TariffMode};
use crate::protocols::Timing;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("invalid scenario config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub meters: u64,
    pub periods: u64,
    /// Report interval; 15 minutes by default.
    pub period_ms: u64,
    pub seed: u64,
    pub latency_ms: u64,
    /// Extra uniform delay in `0..=jitter_ms`, preserving per-channel order.
    pub jitter_ms: u64,
    pub retry_timeout_ms: u64,
    pub time_tolerance_ms: u64,
    /// Control-centre wall clock at tick 0.
    pub wall_start_ms: u64,
    /// Tick at which meters start registering.
    pub sm_init_at_ms: u64,
    /// Tick of the start of report period 0.
    pub setup_ms: u64,
    /// Offset of each meter's report inside its period.
    pub report_offset_ms: u64,
    /// Time simulated after the last period ends.
    pub end_margin_ms: u64,
    pub reading_min_wh: u64,
    pub reading_max_wh: u64,
    /// Draw readings as large random values that are easy to spot in a byte scan.
    pub sentinel_readings: bool,
    /// Keep every message and stored record for leakage scans.
    pub capture_bytes: bool,
    /// Day index of report period 0.
    pub start_day: u32,
    pub tariff: TariffMode,
    pub tou: TouParams,
    pub cpp: CppCalendar,
    pub rtp: RtpParams,
    pub forecast: StsModel,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            meters: 5,
            periods: 10,
            period_ms: 15 * 60 * 1000,
            seed: 0,
            latency_ms: 1,
            jitter_ms: 0,
            retry_timeout_ms: 100,
            time_tolerance_ms: 5_000,
            wall_start_ms: 1_704_067_200_000,
            sm_init_at_ms: 1_000,
            setup_ms: 10_000,
            report_offset_ms: 1_000,
            end_margin_ms: 10_000,
            reading_min_wh: 50,
            reading_max_wh: 2_000,
            sentinel_readings: false,
            capture_bytes: false,
            start_day: 7,
            tariff: TariffMode::Tou,
            tou: TouParams::default(),
            cpp: CppCalendar::default(),
            rtp: default_rtp(),
            forecast: StsModel::default(),
        }
    }
}

/// Synthetic RTP history for days 0..=60: a daily shape with a mild weekly swing.
pub fn default_rtp() -> RtpParams {
    let mut days = BTreeMap::new();
    for day in 0..=60u32 {
        let weekly = 5 * (day % 7) as u64;
        let mut a = [0u64; HOURS];
        let mut b = [0u64; HOURS];
        for h in 0..HOURS {
            let shape = if (7..10).contains(&h) || (17..21).contains(&h) { 40 } else { 0 };
            a[h] = 90 + shape + weekly;
            b[h] = a[h] + 60;
        }
        days.insert(day, DayPrices { a, b });
    }
    RtpParams { m0: 1_000, weights: PredictionWeights::default(), days }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        if self.meters == 0 {
            return bad("meters must be at least 1");
        }
        if self.latency_ms == 0 {
            return bad("latency_ms must be at least 1");
        }
        if self.retry_timeout_ms == 0 {
            return bad("retry_timeout_ms must be at least 1");
        }
        if self.sm_init_at_ms >= self.setup_ms {
            return bad("sm_init_at_ms must come before setup_ms");
        }
        if self.report_offset_ms + 3 * self.retry_timeout_ms >= self.period_ms / 2 {
            return bad("reports and their retries must fit in the first half of a period");
        }
        if self.reading_min_wh > self.reading_max_wh {
            return bad("reading_min_wh exceeds reading_max_wh");
        }
        self.tou.validate().map_err(|e| ConfigError::Invalid(format!("tou: {e}")))?;
        for (day, p) in &self.cpp.events {
            p.validate().map_err(|e| ConfigError::Invalid(format!("cpp day {day}: {e}")))?;
        }
        self.forecast.validate().map_err(|e| ConfigError::Invalid(format!("forecast: {e}")))?;
        Ok(())
    }

    pub fn timing(&self) -> Timing {
        Timing { retry_timeout: self.retry_timeout_ms, time_tolerance: self.time_tolerance_ms }
    }

    pub fn grid(&self) -> GridParams {
        GridParams {
            period_ms: self.period_ms,
            origin_wall_ms: self.wall_start_ms + self.setup_ms,
            start_day: self.start_day,
            tariff: self.tariff,
            tou: self.tou.clone(),
            cpp: self.cpp.clone(),
            rtp: self.rtp.clone(),
            forecast: self.forecast.clone(),
        }
    }

    /// Tick at which meter reports for `period` are produced.
    pub fn report_tick(&self, period: u64) -> u64 {
        self.setup_ms + period * self.period_ms + self.report_offset_ms
    }

    pub fn end_tick(&self) -> u64 {
        self.setup_ms + self.periods * self.period_ms + self.end_margin_ms
    }

    pub fn meter_ids(&self) -> impl Iterator<Item = u64> {
        1..=self.meters
    }
}
