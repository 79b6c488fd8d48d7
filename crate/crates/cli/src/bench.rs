//! Timing harness: enclave-side grid functions against a Paillier baseline,
//! report transmission into the enclave, and primitive micro-benchmarks.

use std::collections::HashMap;
use std::fmt;
use std::hint::black_box;
use std::sync::Arc;
use std::time::Instant;

use num_bigint::BigUint;
use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use secgrid_core::crypto::{ae_decrypt, verify, AeKey, SignKeypair, SymKey};
use secgrid_core::enclave::{AttestationService, Enclave, GATEWAY_IDENTITY};
use secgrid_core::functions::{
    aggregate_window, compute_bill, forecast_sts, price_rtp, sum_in_order, StsModel, UsageWindow, HOURS,
};
use secgrid_core::oblivious::NoTrace;
use secgrid_core::protocols::wire::{self, ReportPlain};

use crate::paillier::{Ciphertext, Keypair, NoisePool};

pub const CSV_HEADER: &str = "function,users,backend,median_ms,p95_ms,iterations";
pub const WARMUP: usize = 5;
pub const MIN_ITERATIONS: usize = 30;
pub const PAILLIER_BITS: usize = 2048;
/// Requests timed together per pricing iteration on the Paillier backend.
const PAILLIER_PRICING_BATCH: usize = 8;
const NOISE_POOL: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Function {
    Agg,
    Pricing,
    Forecast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Backend {
    Enclave,
    Paillier,
}

impl Function {
    pub fn name(self) -> &'static str {
        match self {
            Function::Agg => "agg",
            Function::Pricing => "pricing",
            Function::Forecast => "forecast",
        }
    }
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Enclave => "enclave",
            Backend::Paillier => "paillier",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub function: String,
    pub users: usize,
    pub backend: String,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub iterations: usize,
    /// Functional result of the measured code, for cross-checks. Not part of the CSV.
    pub checksum: u128,
}

impl fmt::Display for BenchRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{:.6},{:.6},{}",
            self.function, self.users, self.backend, self.median_ms, self.p95_ms, self.iterations
        )
    }
}

/// Median and 95th percentile (nearest rank) of the samples.
pub fn summarize(samples: &[f64]) -> (f64, f64) {
    assert!(!samples.is_empty());
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
    let rank = (0.95 * n as f64).ceil() as usize;
    (median, s[rank.clamp(1, n) - 1])
}

/// Runs `f` `WARMUP` times untimed, then `iterations` times timed. Returns
/// the per-iteration milliseconds divided by `per` and the last result.
pub fn time_it<R>(iterations: usize, per: usize, mut f: impl FnMut() -> R) -> (Vec<f64>, R) {
    for _ in 0..WARMUP {
        black_box(f());
    }
    let mut samples = Vec::with_capacity(iterations);
    let mut last = None;
    for _ in 0..iterations {
        let start = Instant::now();
        let r = black_box(f());
        samples.push(start.elapsed().as_secs_f64() * 1000.0 / per.max(1) as f64);
        last = Some(r);
    }
    (samples, last.expect("at least one iteration"))
}

fn row(function: &str, users: usize, backend: &str, samples: &[f64], checksum: u128) -> BenchRow {
    let (median_ms, p95_ms) = summarize(samples);
    BenchRow {
        function: function.to_string(),
        users,
        backend: backend.to_string(),
        median_ms,
        p95_ms,
        iterations: samples.len(),
        checksum,
    }
}

/// Synthetic inputs shared by both backends.
#[derive(Clone, Debug)]
pub struct Workload {
    /// One hourly reading per user, in Wh.
    pub usage: Vec<u64>,
    /// Per-user readings of the last `model.order()` periods, oldest first.
    pub history: Vec<Vec<u64>>,
    pub a: [u64; HOURS],
    pub b: [u64; HOURS],
    pub m0: u64,
    pub model: StsModel,
}

impl Workload {
    pub fn generate(users: usize, seed: u64) -> Workload {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let model = StsModel { phi_milli: vec![500, 300, 200], noise_sigma: 0.0 };
        let usage = (0..users).map(|_| rng.gen_range(0..=2_000)).collect();
        let history = (0..model.order()).map(|_| (0..users).map(|_| rng.gen_range(0..=2_000)).collect()).collect();
        let mut a = [0u64; HOURS];
        let mut b = [0u64; HOURS];
        for h in 0..HOURS {
            a[h] = rng.gen_range(80..200);
            b[h] = a[h] + rng.gen_range(20..100);
        }
        Workload { usage, history, a, b, m0: 1_000, model }
    }

    fn requests(&self, batch: usize) -> impl Iterator<Item = (usize, u64)> + '_ {
        (0..batch).map(move |i| (i % HOURS, self.usage.get(i % self.usage.len().max(1)).copied().unwrap_or(0)))
    }
}

/// Paillier key material reused across benchmark points.
pub struct PaillierContext {
    pub keys: Keypair,
    pool: NoisePool,
    rng: ChaCha20Rng,
}

impl PaillierContext {
    pub fn new(bits: usize, seed: u64) -> PaillierContext {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let keys = Keypair::generate(bits, &mut rng).expect("key generation");
        let pool = NoisePool::new(&keys, NOISE_POOL, &mut rng);
        PaillierContext { keys, pool, rng }
    }

    pub fn encrypt_all(&mut self, values: &[u64]) -> Vec<Ciphertext> {
        values.iter().map(|&v| self.pool.encrypt_u64(&self.keys.public, v, &mut self.rng)).collect()
    }

    fn decrypt_u128(&self, c: &Ciphertext) -> u128 {
        self.keys.decrypt(c).expect("valid ciphertext").to_u128().expect("small plaintext")
    }
}

pub struct BenchSpec {
    pub function: Function,
    pub users: usize,
    pub backend: Backend,
    pub iterations: usize,
    pub seed: u64,
}

/// One CSV row. The Paillier backend needs `paillier`; the enclave backend ignores it.
pub fn run_bench(spec: &BenchSpec, paillier: Option<&mut PaillierContext>) -> BenchRow {
    let w = Workload::generate(spec.users, spec.seed);
    let n = spec.users;
    let it = spec.iterations.max(MIN_ITERATIONS);
    let (f, b) = (spec.function.name(), spec.backend.name());
    match (spec.function, spec.backend) {
        (Function::Agg, Backend::Enclave) => {
            let window = UsageWindow { area_id: 0, period_start: 0, span: 1, meters: n, readings: w.usage.clone() };
            let (samples, total) = time_it(it, 1, || aggregate_window(black_box(&window)).expect("shape"));
            row(f, n, b, &samples, total as u128)
        }
        (Function::Agg, Backend::Paillier) => {
            let paillier = paillier.expect("the Paillier backend needs key material");
            let cts = paillier.encrypt_all(&w.usage);
            let pk = paillier.keys.public.clone();
            let (samples, sum) = time_it(it, 1, || pk.sum(black_box(&cts)));
            row(f, n, b, &samples, paillier.decrypt_u128(&sum))
        }
        (Function::Pricing, Backend::Enclave) => {
            let batch = n.max(1);
            let (samples, total) = time_it(it, batch, || {
                let mut total = 0u128;
                for (h, m) in w.requests(batch) {
                    let price = price_rtp(black_box(m), w.a[h], w.b[h], w.m0);
                    total += compute_bill(&[m], &[price]).expect("no overflow") as u128;
                }
                total
            });
            row(f, n, b, &samples, total)
        }
        (Function::Pricing, Backend::Paillier) => {
            let paillier = paillier.expect("the Paillier backend needs key material");
            // the threshold cannot be evaluated under encryption, so the
            // baseline bills every request at the low rate
            let batch = n.clamp(1, PAILLIER_PRICING_BATCH);
            let reqs: Vec<(usize, u64)> = w.requests(batch).collect();
            let values: Vec<u64> = reqs.iter().map(|&(_, m)| m).collect();
            let cts = paillier.encrypt_all(&values);
            let prices: Vec<BigUint> = reqs.iter().map(|&(h, _)| BigUint::from(w.a[h])).collect();
            let pk = paillier.keys.public.clone();
            let (samples, bills) = time_it(it, batch, || {
                cts.iter().zip(&prices).map(|(c, p)| pk.scalar_mul(black_box(c), p)).collect::<Vec<_>>()
            });
            row(f, n, b, &samples, paillier.decrypt_u128(&pk.sum(&bills)))
        }
        (Function::Forecast, Backend::Enclave) => {
            let (samples, load) = time_it(it, 1, || {
                let loads: Vec<u64> =
                    w.history.iter().map(|p| sum_in_order(&mut NoTrace, black_box(p)).expect("no overflow")).collect();
                forecast_sts(&loads, &w.model).expect("history covers the model")
            });
            row(f, n, b, &samples, load as u128)
        }
        (Function::Forecast, Backend::Paillier) => {
            let paillier = paillier.expect("the Paillier backend needs key material");
            let periods: Vec<Vec<Ciphertext>> = w.history.iter().map(|p| paillier.encrypt_all(p)).collect();
            let phis: Vec<BigUint> = w.model.phi_milli.iter().map(|&p| BigUint::from(p as u64)).collect();
            let pk = paillier.keys.public.clone();
            let k = periods.len();
            let (samples, load) = time_it(it, 1, || {
                let totals: Vec<Ciphertext> = periods.iter().map(|p| pk.sum(black_box(p))).collect();
                let terms: Vec<Ciphertext> = phis.iter().enumerate().map(|(j, phi)| pk.scalar_mul(&totals[k - 1 - j], phi)).collect();
                pk.sum(&terms)
            });
            row(f, n, b, &samples, paillier.decrypt_u128(&load))
        }
    }
}

/// Time to open `users` reports inside the enclave: parse, look up the
/// session key and decrypt.
pub fn transmit_bench(users: usize, iterations: usize, seed: u64) -> BenchRow {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut sessions: HashMap<u64, SymKey> = HashMap::with_capacity(users);
    let mut reports = Vec::with_capacity(users);
    for id in 1..=users as u64 {
        let key = SymKey::generate(&mut rng);
        let plain = ReportPlain { meter_id: id, reading: rng.gen_range(0..=2_000), nonce: rng.gen(), ctr: 1 };
        let env = AeKey::new(key.clone(), 2).encrypt(&plain.to_bytes(), wire::REPORT_AAD).expect("fresh key");
        reports.push(wire::encode_report(wire::REPORT, id, &env));
        sessions.insert(id, key);
    }
    let (samples, total) = time_it(iterations.max(MIN_ITERATIONS), 1, || {
        let mut total = 0u128;
        for bytes in &reports {
            let (_, id, env) = wire::decode_report(black_box(bytes)).expect("well-formed");
            let key = &sessions[&id];
            let plain = ae_decrypt(key, &env, wire::REPORT_AAD).expect("authentic");
            total += ReportPlain::from_bytes(&plain).expect("report body").reading as u128;
        }
        total
    });
    row("transmit", users, "enclave", &samples, total)
}

/// Primitive costs: authenticated encryption of 100 bytes, signatures and
/// sealing. Each sample covers `BATCH` operations.
pub fn micro_bench(iterations: usize, seed: u64) -> Vec<BenchRow> {
    const BATCH: usize = 64;
    let it = iterations.max(MIN_ITERATIONS);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let attestation = Arc::new(AttestationService::new(&mut rng));
    let mut enclave = Enclave::create(GATEWAY_IDENTITY, b"bench machine", attestation, &mut rng);
    let msg = [0x5au8; 100];
    let key = SymKey::generate(&mut rng);
    let mut ae = enclave.new_ae_key(key.clone());
    let env = ae.encrypt(&msg, b"bench").unwrap();
    let sign = SignKeypair::generate(&mut rng);
    let pk = sign.public();
    let sig = sign.sign(&msg);
    let sealed = enclave.seal("bench", &msg).unwrap();

    let mut rows = Vec::new();
    let (s, _) = time_it(it, BATCH, || (0..BATCH).map(|_| ae.encrypt(black_box(&msg), b"bench").unwrap().ciphertext.len()).sum::<usize>());
    rows.push(row("ae_encrypt_100b", 1, "enclave", &s, 0));
    let (s, _) = time_it(it, BATCH, || (0..BATCH).map(|_| ae_decrypt(&key, black_box(&env), b"bench").unwrap().len()).sum::<usize>());
    rows.push(row("ae_decrypt_100b", 1, "enclave", &s, 0));
    let (s, _) = time_it(it, BATCH, || (0..BATCH).map(|_| sign.sign(black_box(&msg)).0[0] as usize).sum::<usize>());
    rows.push(row("sign", 1, "enclave", &s, 0));
    let (s, _) = time_it(it, BATCH, || (0..BATCH).filter(|_| verify(&pk, black_box(&msg), &sig.0)).count());
    rows.push(row("verify", 1, "enclave", &s, 0));
    let (s, _) = time_it(it, BATCH, || (0..BATCH).map(|_| enclave.seal("bench", black_box(&msg)).unwrap().label.len()).sum::<usize>());
    rows.push(row("seal_100b", 1, "enclave", &s, 0));
    let (s, _) = time_it(it, BATCH, || (0..BATCH).map(|_| enclave.unseal(black_box(&sealed)).unwrap().len()).sum::<usize>());
    rows.push(row("unseal_100b", 1, "enclave", &s, 0));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let samples: Vec<f64> = (1..=40).map(|x| x as f64).collect();
        let (median, p95) = summarize(&samples);
        assert_eq!(median, 20.5);
        assert_eq!(p95, 38.0);
        assert_eq!(summarize(&[3.0]), (3.0, 3.0));
    }

    #[test]
    fn time_it_counts_iterations_and_warmup() {
        let mut calls = 0;
        let (samples, last) = time_it(30, 1, || {
            calls += 1;
            calls
        });
        assert_eq!(samples.len(), 30);
        assert_eq!(calls, 35);
        assert_eq!(last, 35);
    }

    #[test]
    fn csv_row_format() {
        let r = BenchRow {
            function: "agg".into(),
            users: 10,
            backend: "enclave".into(),
            median_ms: 0.5,
            p95_ms: 1.25,
            iterations: 30,
            checksum: 0,
        };
        assert_eq!(r.to_string(), "agg,10,enclave,0.500000,1.250000,30");
        assert_eq!(CSV_HEADER.split(',').count(), r.to_string().split(',').count());
    }

    #[test]
    fn empty_aggregate_row() {
        let mut ctx = PaillierContext::new(512, 1);
        let spec = BenchSpec { function: Function::Agg, users: 0, backend: Backend::Enclave, iterations: 30, seed: 1 };
        let row = run_bench(&spec, Some(&mut ctx));
        assert_eq!(row.checksum, 0);
        assert_eq!(row.iterations, 30);
    }

    #[test]
    fn backends_agree_on_aggregate_and_forecast() {
        let mut ctx = PaillierContext::new(512, 2);
        for function in [Function::Agg, Function::Forecast] {
            for users in [0, 1, 17, 200] {
                let spec = |backend| BenchSpec { function, users, backend, iterations: 30, seed: users as u64 };
                let e = run_bench(&spec(Backend::Enclave), None);
                let p = run_bench(&spec(Backend::Paillier), Some(&mut ctx));
                assert_eq!(e.checksum, p.checksum, "{function:?} n={users}");
            }
        }
    }

    #[test]
    fn timing_does_not_change_results() {
        let w = Workload::generate(300, 9);
        let plain: u64 = w.usage.iter().sum();
        let mut ctx = PaillierContext::new(512, 3);
        let spec = BenchSpec { function: Function::Agg, users: 300, backend: Backend::Enclave, iterations: 30, seed: 9 };
        assert_eq!(run_bench(&spec, Some(&mut ctx)).checksum, plain as u128);
        let loads: Vec<u64> = w.history.iter().map(|p| p.iter().sum()).collect();
        let expected = forecast_sts(&loads, &w.model).unwrap();
        let spec = BenchSpec { function: Function::Forecast, ..spec };
        assert_eq!(run_bench(&spec, Some(&mut ctx)).checksum, expected as u128);
    }

    #[test]
    fn transmit_sums_every_report() {
        let row = transmit_bench(50, 30, 4);
        assert!(row.checksum > 0);
        assert_eq!(transmit_bench(0, 30, 4).checksum, 0);
    }
}
