//! Grid functionalities executed inside the gateway enclave.
//!
//! Money and energy are integers: readings in watt-hours, prices in
//! milli-currency per kWh, bills in milli-currency·Wh (the raw product),
//! forecasts in milli-watt-hours. Coefficients are integers in thousandths.
//! Anything that touches per-meter readings is written against
//! [`Tracer`](crate::oblivious::Tracer) and uses only branchless arithmetic.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oblivious::{o_greater_t, o_move_t, NoTrace, TraceEvent, Tracer};

pub const MINUTES_PER_DAY: u32 = 24 * 60;
pub const HOURS: usize = 24;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FunctionError {
    #[error("arithmetic overflow")]
    Overflow,
    #[error("window shape mismatch: expected {expected} readings, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("need {needed} history values, have {have}")]
    InsufficientHistory { needed: usize, have: usize },
    #[error("no price history for day {0}")]
    MissingHistoryDay(u32),
    #[error("invalid parameters: {0}")]
    InvalidParams(&'static str),
}

/// Readings of the meters `S` over `span` report periods starting at
/// `period_start`, in report arrival order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UsageWindow {
    pub area_id: u32,
    pub period_start: u64,
    pub span: u32,
    pub meters: usize,
    pub readings: Vec<u64>,
}

impl UsageWindow {
    pub fn expected_len(&self) -> usize {
        self.meters * self.span as usize
    }
}

/// Total usage of the window, summed in arrival order.
pub fn aggregate_window(w: &UsageWindow) -> Result<u64, FunctionError> {
    aggregate_window_traced(&mut NoTrace, w)
}

pub fn aggregate_window_traced<T: Tracer>(t: &mut T, w: &UsageWindow) -> Result<u64, FunctionError> {
    if w.readings.len() != w.expected_len() {
        return Err(FunctionError::ShapeMismatch { expected: w.expected_len(), got: w.readings.len() });
    }
    sum_in_order(t, &w.readings)
}

/// Oblivious sum: a 128-bit accumulator cannot overflow for any slice that
/// fits in memory, so the range check happens once at the end.
pub fn sum_in_order<T: Tracer>(t: &mut T, values: &[u64]) -> Result<u64, FunctionError> {
    let mut acc: u128 = 0;
    for (i, &v) in values.iter().enumerate() {
        t.record(TraceEvent::Load { index: i, len: values.len() });
        t.record(TraceEvent::Add);
        acc += v as u128;
    }
    u64::try_from(acc).map_err(|_| FunctionError::Overflow)
}

/// Time-of-use tariff.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TouParams {
    /// Off-peak price, milli-currency per kWh.
    pub price: u64,
    /// Surcharge added during peak windows.
    pub peak_surcharge: u64,
    /// Daily half-open `[start, end)` minute ranges.
    pub peak_windows: Vec<(u32, u32)>,
}

impl TouParams {
    pub fn validate(&self) -> Result<(), FunctionError> {
        let mut windows = self.peak_windows.clone();
        windows.sort_unstable();
        for &(start, end) in &windows {
            if start >= end || end > MINUTES_PER_DAY {
                return Err(FunctionError::InvalidParams("peak window out of range"));
            }
        }
        if windows.windows(2).any(|pair| pair[0].1 > pair[1].0) {
            return Err(FunctionError::InvalidParams("peak windows overlap"));
        }
        Ok(())
    }
}

impl Default for TouParams {
    fn default() -> Self {
        TouParams { price: 120, peak_surcharge: 80, peak_windows: vec![(7 * 60, 10 * 60), (17 * 60, 21 * 60)] }
    }
}

/// The condition is public time, so a plain branch is fine here.
pub fn price_tou(minute_of_day: u32, params: &TouParams) -> u64 {
    let minute = minute_of_day % MINUTES_PER_DAY;
    if params.peak_windows.iter().any(|&(s, e)| minute >= s && minute < e) {
        params.price + params.peak_surcharge
    } else {
        params.price
    }
}

/// Critical event days with their own tariff.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CppCalendar {
    pub events: BTreeMap<u32, TouParams>,
}

pub fn price_cpp(day: u32, minute_of_day: u32, base: &TouParams, calendar: &CppCalendar) -> u64 {
    price_tou(minute_of_day, calendar.events.get(&day).unwrap_or(base))
}

/// Real-time price for hourly usage `m_h`: `a_h` below the threshold `m0`,
/// `b_h` at or above it.
pub fn price_rtp(m_h: u64, a_h: u64, b_h: u64, m0: u64) -> u64 {
    price_rtp_traced(&mut NoTrace, m_h, a_h, b_h, m0)
}

pub fn price_rtp_traced<T: Tracer>(t: &mut T, m_h: u64, a_h: u64, b_h: u64, m0: u64) -> u64 {
    let below = o_greater_t(t, m0, m_h);
    o_move_t(t, below, a_h, b_h)
}

/// Hourly RTP parameters of one day, milli-currency per kWh.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayPrices {
    pub a: [u64; HOURS],
    pub b: [u64; HOURS],
}

impl DayPrices {
    pub fn scaled(&self, factor: u64) -> Option<DayPrices> {
        let mut out = self.clone();
        for h in 0..HOURS {
            out.a[h] = self.a[h].checked_mul(factor)?;
            out.b[h] = self.b[h].checked_mul(factor)?;
        }
        Some(out)
    }
}

/// Weights of the day-ahead predictor, in thousandths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionWeights {
    pub yesterday: u64,
    pub two_days_ago: u64,
    pub week_ago: u64,
}

impl Default for PredictionWeights {
    fn default() -> Self {
        PredictionWeights { yesterday: 500, two_days_ago: 300, week_ago: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RtpParams {
    /// Usage threshold in watt-hours.
    pub m0: u64,
    pub weights: PredictionWeights,
    /// Actual parameters by day index.
    pub days: BTreeMap<u32, DayPrices>,
}

/// Predicted parameters for one day. Values are in micro-currency per kWh so
/// the weighted sum with thousandth weights is exact.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PricePrediction {
    pub day: u32,
    pub a_micro: [u64; HOURS],
    pub b_micro: [u64; HOURS],
}

impl PricePrediction {
    pub fn a_milli(&self, hour: usize) -> u64 {
        self.a_micro[hour] / 1000
    }

    pub fn b_milli(&self, hour: usize) -> u64 {
        self.b_micro[hour] / 1000
    }
}

/// Day-ahead prediction from days `t-1`, `t-2` and `t-7`.
pub fn rtp_predict_day(
    history: &BTreeMap<u32, DayPrices>,
    day: u32,
    weights: PredictionWeights,
) -> Result<PricePrediction, FunctionError> {
    let back = |n: u32| -> Result<&DayPrices, FunctionError> {
        let d = day.checked_sub(n).ok_or(FunctionError::MissingHistoryDay(0))?;
        history.get(&d).ok_or(FunctionError::MissingHistoryDay(d))
    };
    let (d1, d2, d7) = (back(1)?, back(2)?, back(7)?);
    let combine = |x1: u64, x2: u64, x7: u64| -> Result<u64, FunctionError> {
        let total = weights.yesterday as u128 * x1 as u128
            + weights.two_days_ago as u128 * x2 as u128
            + weights.week_ago as u128 * x7 as u128;
        u64::try_from(total).map_err(|_| FunctionError::Overflow)
    };
    let mut a_micro = [0u64; HOURS];
    let mut b_micro = [0u64; HOURS];
    for h in 0..HOURS {
        a_micro[h] = combine(d1.a[h], d2.a[h], d7.a[h])?;
        b_micro[h] = combine(d1.b[h], d2.b[h], d7.b[h])?;
    }
    Ok(PricePrediction { day, a_micro, b_micro })
}

/// Autoregressive load model `Load(t) = Σ φ_j Load(t-j) + noise(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StsModel {
    /// φ_1..φ_k in thousandths.
    pub phi_milli: Vec<i64>,
    /// Standard deviation of the noise term in milli-watt-hours; 0 disables it.
    pub noise_sigma: f64,
}

impl StsModel {
    pub fn order(&self) -> usize {
        self.phi_milli.len()
    }

    pub fn validate(&self) -> Result<(), FunctionError> {
        if self.phi_milli.is_empty() {
            return Err(FunctionError::InvalidParams("forecast order must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(FunctionError::InvalidParams("noise sigma must be finite and non-negative"));
        }
        Ok(())
    }

    /// One noise sample in milli-watt-hours.
    pub fn sample_noise<R: Rng>(&self, rng: &mut R) -> i64 {
        if self.noise_sigma == 0.0 {
            return 0;
        }
        let normal = Normal::new(0.0, self.noise_sigma).expect("validated sigma");
        normal.sample(rng).round() as i64
    }
}

impl Default for StsModel {
    fn default() -> Self {
        StsModel { phi_milli: vec![1000], noise_sigma: 0.0 }
    }
}

/// Next-period load in milli-watt-hours from history in watt-hours
/// (oldest first). With thousandth weights and Wh inputs the result is exact.
pub fn forecast_sts(history: &[u64], model: &StsModel) -> Result<i64, FunctionError> {
    forecast_sts_traced(&mut NoTrace, history, model, 0)
}

pub fn forecast_sts_traced<T: Tracer>(
    t: &mut T,
    history: &[u64],
    model: &StsModel,
    noise_mwh: i64,
) -> Result<i64, FunctionError> {
    let k = model.order();
    if k == 0 {
        return Err(FunctionError::InvalidParams("forecast order must be at least 1"));
    }
    if history.len() < k {
        return Err(FunctionError::InsufficientHistory { needed: k, have: history.len() });
    }
    let n = history.len();
    let mut acc: i128 = noise_mwh as i128;
    for (j, &phi) in model.phi_milli.iter().enumerate() {
        let idx = n - 1 - j;
        t.record(TraceEvent::Load { index: idx, len: n });
        t.record(TraceEvent::Mul);
        t.record(TraceEvent::Add);
        acc += phi as i128 * history[idx] as i128;
    }
    i64::try_from(acc).map_err(|_| FunctionError::Overflow)
}

/// `Σ_h reading_h × price_h` in milli-currency·Wh.
pub fn compute_bill(readings: &[u64], prices: &[u64]) -> Result<u64, FunctionError> {
    compute_bill_traced(&mut NoTrace, readings, prices)
}

pub fn compute_bill_traced<T: Tracer>(t: &mut T, readings: &[u64], prices: &[u64]) -> Result<u64, FunctionError> {
    if readings.len() != prices.len() {
        return Err(FunctionError::ShapeMismatch { expected: prices.len(), got: readings.len() });
    }
    // two 128-bit products can already overflow the accumulator; carries go
    // into a flag so the loop never branches
    let mut acc: u128 = 0;
    let mut overflow: u128 = 0;
    for (i, (&r, &p)) in readings.iter().zip(prices).enumerate() {
        t.record(TraceEvent::Load { index: i, len: readings.len() });
        t.record(TraceEvent::Mul);
        t.record(TraceEvent::Add);
        let (sum, carry) = acc.overflowing_add(r as u128 * p as u128);
        acc = sum;
        overflow |= carry as u128;
    }
    overflow |= acc >> 64;
    if overflow != 0 {
        return Err(FunctionError::Overflow);
    }
    Ok(acc as u64)
}

/// Tag-length-value records sent from the gateway enclave to the control
/// centre: `tag (u8) ‖ len (u16 BE) ‖ value`.
pub mod output {
    use super::{PricePrediction, HOURS};

    pub const TAG_AGG: u8 = 1;
    pub const TAG_PRICE: u8 = 2;
    pub const TAG_FORECAST: u8 = 3;
    pub const TAG_BILL: u8 = 4;
    pub const TAG_ALARM: u8 = 5;

    #[derive(Clone, Debug, PartialEq, Eq)]
    pub enum FunctionOutput {
        /// Area total of one report period.
        Agg { period: u64, total: u64 },
        Price(PricePrediction),
        /// Forecast for the given period, milli-watt-hours.
        Forecast { period: u64, load_mwh: i64 },
        Bill { meter_id: u64, hour: u64, amount: u64 },
        Alarm { kind: u8, meter_id: Option<u64> },
    }

    impl FunctionOutput {
        fn tag(&self) -> u8 {
            match self {
                FunctionOutput::Agg { .. } => TAG_AGG,
                FunctionOutput::Price(_) => TAG_PRICE,
                FunctionOutput::Forecast { .. } => TAG_FORECAST,
                FunctionOutput::Bill { .. } => TAG_BILL,
                FunctionOutput::Alarm { .. } => TAG_ALARM,
            }
        }

        fn value(&self) -> Vec<u8> {
            let mut v = Vec::new();
            match self {
                FunctionOutput::Agg { period, total } => {
                    v.extend_from_slice(&period.to_be_bytes());
                    v.extend_from_slice(&total.to_be_bytes());
                }
                FunctionOutput::Price(p) => {
                    v.extend_from_slice(&p.day.to_be_bytes());
                    for x in p.a_micro.iter().chain(&p.b_micro) {
                        v.extend_from_slice(&x.to_be_bytes());
                    }
                }
                FunctionOutput::Forecast { period, load_mwh } => {
                    v.extend_from_slice(&period.to_be_bytes());
                    v.extend_from_slice(&load_mwh.to_be_bytes());
                }
                FunctionOutput::Bill { meter_id, hour, amount } => {
                    v.extend_from_slice(&meter_id.to_be_bytes());
                    v.extend_from_slice(&hour.to_be_bytes());
                    v.extend_from_slice(&amount.to_be_bytes());
                }
                FunctionOutput::Alarm { kind, meter_id } => {
                    v.push(*kind);
                    if let Some(id) = meter_id {
                        v.extend_from_slice(&id.to_be_bytes());
                    }
                }
            }
            v
        }

        pub fn encode_into(&self, out: &mut Vec<u8>) {
            let value = self.value();
            out.push(self.tag());
            out.extend_from_slice(&(value.len() as u16).to_be_bytes());
            out.extend_from_slice(&value);
        }
    }

    pub fn encode_all(records: &[FunctionOutput]) -> Vec<u8> {
        let mut out = Vec::new();
        for r in records {
            r.encode_into(&mut out);
        }
        out
    }

    fn u64_at(v: &[u8], at: usize) -> u64 {
        u64::from_be_bytes(v[at..at + 8].try_into().unwrap())
    }

    pub fn decode_all(mut bytes: &[u8]) -> Option<Vec<FunctionOutput>> {
        let mut out = Vec::new();
        while !bytes.is_empty() {
            if bytes.len() < 3 {
                return None;
            }
            let tag = bytes[0];
            let len = u16::from_be_bytes([bytes[1], bytes[2]]) as usize;
            let v = bytes.get(3..3 + len)?;
            let rec = match (tag, len) {
                (TAG_AGG, 16) => FunctionOutput::Agg { period: u64_at(v, 0), total: u64_at(v, 8) },
                (TAG_PRICE, l) if l == 4 + 2 * HOURS * 8 => {
                    let day = u32::from_be_bytes(v[..4].try_into().unwrap());
                    let mut a_micro = [0u64; HOURS];
                    let mut b_micro = [0u64; HOURS];
                    for h in 0..HOURS {
                        a_micro[h] = u64_at(v, 4 + 8 * h);
                        b_micro[h] = u64_at(v, 4 + 8 * (HOURS + h));
                    }
                    FunctionOutput::Price(PricePrediction { day, a_micro, b_micro })
                }
                (TAG_FORECAST, 16) => {
                    FunctionOutput::Forecast { period: u64_at(v, 0), load_mwh: u64_at(v, 8) as i64 }
                }
                (TAG_BILL, 24) => {
                    FunctionOutput::Bill { meter_id: u64_at(v, 0), hour: u64_at(v, 8), amount: u64_at(v, 16) }
                }
                (TAG_ALARM, 1) => FunctionOutput::Alarm { kind: v[0], meter_id: None },
                (TAG_ALARM, 9) => FunctionOutput::Alarm { kind: v[0], meter_id: Some(u64_at(v, 1)) },
                _ => return None,
            };
            out.push(rec);
            bytes = &bytes[3 + len..];
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::output::*;
    use super::*;
    use crate::oblivious::record_trace;
    use proptest::prelude::{prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn window(readings: Vec<u64>, meters: usize, span: u32) -> UsageWindow {
        UsageWindow { area_id: 1, period_start: 0, span, meters, readings }
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_window(&window(vec![0; 6], 3, 2)), Ok(0));
        // brute force: 1+2+3+4+5+6
        assert_eq!(aggregate_window(&window(vec![1, 2, 3, 4, 5, 6], 3, 2)), Ok(21));
        assert_eq!(aggregate_window(&window(vec![4242], 1, 1)), Ok(4242));
        assert_eq!(
            aggregate_window(&window(vec![1, 2], 3, 2)),
            Err(FunctionError::ShapeMismatch { expected: 6, got: 2 })
        );
        assert_eq!(aggregate_window(&window(vec![u64::MAX, 1], 2, 1)), Err(FunctionError::Overflow));
    }

    #[test]
    fn aggregate_trace_depends_on_shape_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reference = record_trace(|t| aggregate_window_traced(t, &window(vec![0; 12], 4, 3))).1;
        for _ in 0..100 {
            let w = window((0..12).map(|_| rng.gen_range(0..5000)).collect(), 4, 3);
            assert_eq!(record_trace(|t| aggregate_window_traced(t, &w)).1.to_bytes(), reference.to_bytes());
        }
    }

    proptest! {
        #[test]
        fn aggregate_is_order_independent(mut readings in proptest::collection::vec(0u64..1_000_000, 1..40)) {
            let n = readings.len();
            let total = aggregate_window(&window(readings.clone(), n, 1)).unwrap();
            readings.reverse();
            prop_assert_eq!(aggregate_window(&window(readings.clone(), n, 1)).unwrap(), total);
            prop_assert_eq!(total, readings.iter().sum::<u64>());
        }
    }

    #[test]
    fn tou_examples() {
        let p = TouParams { price: 100, peak_surcharge: 50, peak_windows: vec![(600, 720)] };
        assert_eq!(price_tou(650, &p), 150);
        assert_eq!(price_tou(100, &p), 100);
        assert_eq!(price_tou(600, &p), 150);
        assert_eq!(price_tou(720, &p), 100);
        assert!(p.validate().is_ok());
        let overlapping = TouParams { peak_windows: vec![(0, 100), (50, 200)], ..p.clone() };
        assert!(overlapping.validate().is_err());
        let backwards = TouParams { peak_windows: vec![(300, 200)], ..p };
        assert!(backwards.validate().is_err());
    }

    #[test]
    fn cpp_examples() {
        let base = TouParams { price: 100, peak_surcharge: 50, peak_windows: vec![(600, 720)] };
        let event = TouParams { price: 100, peak_surcharge: 400, peak_windows: vec![(900, 1080)] };
        let mut cal = CppCalendar::default();
        for day in 0..3 {
            for minute in (0..MINUTES_PER_DAY).step_by(30) {
                assert_eq!(price_cpp(day, minute, &base, &cal), price_tou(minute, &base));
            }
        }
        cal.events.insert(2, event.clone());
        assert_eq!(price_cpp(1, 1000, &base, &cal), 100);
        assert_eq!(price_cpp(2, 1000, &base, &cal), 500);
        assert_eq!(price_cpp(2, 650, &base, &cal), 100);
    }

    #[test]
    fn rtp_examples() {
        assert_eq!(price_rtp(0, 10, 30, 1000), 10);
        assert_eq!(price_rtp(1000, 10, 30, 1000), 30);
        assert_eq!(price_rtp(999, 10, 30, 1000), 10);
        assert_eq!(price_rtp(5, 10, 30, 0), 30);
    }

    #[test]
    fn rtp_trace_is_value_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let reference = record_trace(|t| price_rtp_traced(t, 0, 1, 2, 1000)).1;
        for _ in 0..100 {
            let m: u64 = rng.gen_range(0..2000);
            assert_eq!(record_trace(|t| price_rtp_traced(t, m, 1, 2, 1000)).1, reference);
        }
    }

    fn day(rng: &mut ChaCha8Rng) -> DayPrices {
        let mut d = DayPrices { a: [0; HOURS], b: [0; HOURS] };
        for h in 0..HOURS {
            d.a[h] = rng.gen_range(50..200);
            d.b[h] = rng.gen_range(150..400);
        }
        d
    }

    #[test]
    fn predict_copy_forward_and_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let history: BTreeMap<u32, DayPrices> = (0..10).map(|d| (d, day(&mut rng))).collect();
        let copy = rtp_predict_day(&history, 9, PredictionWeights { yesterday: 1000, two_days_ago: 0, week_ago: 0 })
            .unwrap();
        for h in 0..HOURS {
            assert_eq!(copy.a_milli(h), history[&8].a[h]);
            assert_eq!(copy.b_micro[h], history[&8].b[h] * 1000);
        }

        let flat = DayPrices { a: [77; HOURS], b: [133; HOURS] };
        let constant: BTreeMap<u32, DayPrices> = (0..8).map(|d| (d, flat.clone())).collect();
        let p = rtp_predict_day(&constant, 7, PredictionWeights::default()).unwrap();
        assert_eq!(p.a_micro, [77_000; HOURS]);
        assert_eq!(p.b_micro, [133_000; HOURS]);
    }

    #[test]
    fn predict_missing_history() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut history: BTreeMap<u32, DayPrices> = (0..10).map(|d| (d, day(&mut rng))).collect();
        history.remove(&2);
        assert_eq!(
            rtp_predict_day(&history, 9, PredictionWeights::default()),
            Err(FunctionError::MissingHistoryDay(2))
        );
        assert!(rtp_predict_day(&history, 5, PredictionWeights::default()).is_err());
    }

    #[test]
    fn predict_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let history: BTreeMap<u32, DayPrices> = (0..8).map(|d| (d, day(&mut rng))).collect();
            let alpha = rng.gen_range(1..20u64);
            let scaled: BTreeMap<u32, DayPrices> =
                history.iter().map(|(d, p)| (*d, p.scaled(alpha).unwrap())).collect();
            let w = PredictionWeights { yesterday: 450, two_days_ago: 350, week_ago: 200 };
            let base = rtp_predict_day(&history, 7, w).unwrap();
            let big = rtp_predict_day(&scaled, 7, w).unwrap();
            for h in 0..HOURS {
                assert_eq!(big.a_micro[h], alpha * base.a_micro[h]);
                assert_eq!(big.b_micro[h], alpha * base.b_micro[h]);
            }
        }
    }

    #[test]
    fn forecast_examples() {
        let persistence = StsModel::default();
        assert_eq!(forecast_sts(&[5, 9, 42], &persistence), Ok(42_000));
        let two = StsModel { phi_milli: vec![500, 500], noise_sigma: 0.0 };
        // by hand: 0.5·200 + 0.5·100 = 150 Wh
        assert_eq!(forecast_sts(&[100, 200], &two), Ok(150_000));
        let three = StsModel { phi_milli: vec![200, 300, 500], noise_sigma: 0.0 };
        assert_eq!(forecast_sts(&[777, 777, 777], &three), Ok(777_000));
        assert_eq!(
            forecast_sts(&[1], &two),
            Err(FunctionError::InsufficientHistory { needed: 2, have: 1 })
        );
        let negative = StsModel { phi_milli: vec![1500, -500], noise_sigma: 0.0 };
        assert_eq!(forecast_sts(&[100, 200], &negative), Ok(250_000));
    }

    #[test]
    fn forecast_noise_is_seeded() {
        let model = StsModel { phi_milli: vec![1000], noise_sigma: 500.0 };
        let a = model.sample_noise(&mut ChaCha8Rng::seed_from_u64(9));
        let b = model.sample_noise(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(StsModel { phi_milli: vec![], noise_sigma: 0.0 }.validate().is_err());
        assert!(StsModel { phi_milli: vec![1], noise_sigma: -1.0 }.validate().is_err());
    }

    #[test]
    fn forecast_trace_is_value_independent() {
        let model = StsModel { phi_milli: vec![400, 300, 200, 100], noise_sigma: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let reference = record_trace(|t| forecast_sts_traced(t, &[0; 8], &model, 0)).1;
        for _ in 0..100 {
            let hist: Vec<u64> = (0..8).map(|_| rng.gen_range(0..1_000_000)).collect();
            assert_eq!(record_trace(|t| forecast_sts_traced(t, &hist, &model, 0)).1, reference);
        }
    }

    #[test]
    fn bill_examples() {
        assert_eq!(compute_bill(&[0; 24], &[100; 24]), Ok(0));
        assert_eq!(compute_bill(&[1000], &[5]), Ok(5000));
        assert_eq!(compute_bill(&[u64::MAX], &[2]), Err(FunctionError::Overflow));
        assert_eq!(compute_bill(&[u64::MAX, u64::MAX], &[u64::MAX, u64::MAX]), Err(FunctionError::Overflow));
        assert!(compute_bill(&[1, 2], &[1]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let r: Vec<u64> = (0..24).map(|_| rng.gen_range(0..5000)).collect();
            let p: Vec<u64> = (0..24).map(|_| rng.gen_range(50..400)).collect();
            let naive: u64 = r.iter().zip(&p).map(|(a, b)| a * b).sum();
            assert_eq!(compute_bill(&r, &p), Ok(naive));
        }
    }

    #[test]
    fn bill_trace_is_value_independent() {
        let prices = [120u64; 24];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let reference = record_trace(|t| compute_bill_traced(t, &[0; 24], &prices)).1;
        for _ in 0..100 {
            let r: Vec<u64> = (0..24).map(|_| rng.gen_range(0..5000)).collect();
            assert_eq!(record_trace(|t| compute_bill_traced(t, &r, &prices)).1, reference);
        }
    }

    #[test]
    fn output_records_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let history: BTreeMap<u32, DayPrices> = (0..8).map(|d| (d, day(&mut rng))).collect();
        let records = vec![
            FunctionOutput::Agg { period: 3, total: 12345 },
            FunctionOutput::Price(rtp_predict_day(&history, 7, PredictionWeights::default()).unwrap()),
            FunctionOutput::Forecast { period: 4, load_mwh: -17 },
            FunctionOutput::Bill { meter_id: 9, hour: 2, amount: 777 },
            FunctionOutput::Alarm { kind: 2, meter_id: Some(3) },
            FunctionOutput::Alarm { kind: 6, meter_id: None },
        ];
        let bytes = encode_all(&records);
        assert_eq!(bytes[0], TAG_AGG);
        assert_eq!(&bytes[1..3], &[0, 16]);
        assert_eq!(decode_all(&bytes), Some(records));
        assert_eq!(decode_all(&bytes[..bytes.len() - 1]), None);
    }
}
