//! Experiment drivers: setup cost of validated admission, request latency
//! per engine, and disclosure ratios of the emergency path. Results are
//! emitted as CSV rows.

use std::fmt;
use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ccam::{scan_violations, validate_and_commit, ConflictPolicy, OverlapMode, ValidationOutcome};
use crate::consent::{
    ConsentDirective, ConsentError, ConsentRepository, Effect, SharedRepository, ValidityInterval,
};
use crate::cpdp::{Decision, EngineKind, EvalStats, RoleGate, StandardRequest};
use crate::eaa::{Eaa, EaaKeyMaterial};
use crate::ecdm::{build_context, BiometricRegistry, PatientClaim, RelevanceModel};
use crate::hrr::{disclosure_ratio, DisclosureRatio, HrrStore};
use crate::model::{DirectiveId, Role, Target};
use crate::synth::{
    gen_directive_stream, gen_emergency_fixture, gen_model, gen_workload, AnnotatedDraft,
    EmergencyFixtureSpec, StreamSpec, SynthError, WorkloadSpec,
};

pub const CSV_HEADER: [&str; 8] = ["experiment", "params", "metric", "mean", "p50", "p95", "samples", "wall_clock"];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Consent(#[from] ConsentError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad csv header {0:?}")]
    Header(Vec<String>),
    #[error("invalid row: {0}")]
    InvalidRow(String),
    #[error("{0}")]
    Config(String),
}

/// One CSV line. `params` is a `key=value` list joined with `;`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResultRow {
    pub experiment: String,
    pub params: String,
    pub metric: String,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub samples: usize,
    /// Seconds spent producing the row's samples.
    pub wall_clock: f64,
}

impl BenchResultRow {
    fn from_samples(experiment: &str, params: &Params, metric: &str, samples: &[f64], wall_clock: f64) -> Self {
        let s = Summary::of(samples);
        Self {
            experiment: experiment.to_owned(),
            params: params.to_string(),
            metric: metric.to_owned(),
            mean: s.mean,
            p50: s.p50,
            p95: s.p95,
            samples: samples.len(),
            wall_clock,
        }
    }

    fn single(experiment: &str, params: &Params, metric: &str, value: f64, wall_clock: f64) -> Self {
        Self::from_samples(experiment, params, metric, &[value], wall_clock)
    }

    pub fn param(&self, key: &str) -> Option<&str> {
        self.params
            .split(';')
            .filter_map(|kv| kv.split_once('='))
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
    }

    pub fn check(&self) -> Result<(), BenchError> {
        if self.samples == 0 {
            return Err(BenchError::InvalidRow(format!("{} has no samples", self.metric)));
        }
        if !(self.mean.is_finite() && self.p50.is_finite() && self.p95.is_finite()) {
            return Err(BenchError::InvalidRow(format!("{} is not finite", self.metric)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct Params(Vec<(&'static str, String)>);

impl Params {
    fn with(mut self, key: &'static str, value: impl fmt::Display) -> Self {
        self.0.push((key, value.to_string()));
        self
    }
}

impl fmt::Display for Params {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, v)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

impl Summary {
    /// Mean and nearest-rank percentiles. Empty input gives NaN.
    pub fn of(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self { mean: f64::NAN, p50: f64::NAN, p95: f64::NAN };
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = |p: f64| sorted[((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1];
        Self {
            mean: samples.iter().sum::<f64>() / samples.len() as f64,
            p50: rank(0.50),
            p95: rank(0.95),
        }
    }
}

pub fn write_csv<W: Write>(rows: &[BenchResultRow], out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<BenchResultRow>, BenchError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != CSV_HEADER {
        return Err(BenchError::Header(header));
    }
    let rows: Vec<BenchResultRow> = r.deserialize().collect::<Result<_, _>>()?;
    for row in &rows {
        row.check()?;
    }
    Ok(rows)
}

fn micros(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e6
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetupBenchConfig {
    /// Stream sizes, ascending.
    pub sizes: Vec<usize>,
    pub anomaly_rate: f64,
    /// Episodes in the shared model; defaults to the largest size, at
    /// least 20 so the model has two professionals.
    pub episode_count: Option<usize>,
    pub overlap_mode: OverlapMode,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for SetupBenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![2500, 5000, 7500, 10_000],
            anomaly_rate: 0.2,
            episode_count: None,
            overlap_mode: OverlapMode::ExactTarget,
            repetitions: 10,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetupPoint {
    pub size: usize,
    /// Mean over every timed commit.
    pub mean_us: f64,
    /// Median over repetitions of the per-consent mean.
    pub steady_mean_us: f64,
    pub accepted: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetupReport {
    pub points: Vec<SetupPoint>,
    pub rows: Vec<BenchResultRow>,
}

/// Commits a fresh stream per size through validated admission and times
/// each commit. One untimed pass precedes the timed repetitions, which cycle
/// through all sizes before repeating.
pub fn run_setup_bench(cfg: &SetupBenchConfig) -> Result<SetupReport, BenchError> {
    if cfg.sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(BenchError::Config("sizes must be ascending".into()));
    }
    let reps = cfg.repetitions.max(1);
    let episodes = cfg.episode_count.unwrap_or_else(|| cfg.sizes.iter().copied().max().unwrap_or(1).max(20));
    let model = gen_model(episodes, cfg.seed);
    let policy = ConflictPolicy { overlap_mode: cfg.overlap_mode };
    let streams: Vec<Vec<AnnotatedDraft>> = cfg
        .sizes
        .iter()
        .map(|&n| gen_directive_stream(&StreamSpec::with_anomaly_rate(episodes, n, cfg.anomaly_rate, cfg.seed), &model))
        .collect::<Result<_, _>>()?;

    // Untimed pass so first-touch allocation is not charged to the first size.
    for stream in &streams {
        let mut repo = ConsentRepository::new();
        for d in stream {
            validate_and_commit(d.directive.clone(), &mut repo, &model, policy, 0)?;
        }
    }

    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); cfg.sizes.len()];
    let mut rep_means: Vec<Vec<f64>> = vec![Vec::new(); cfg.sizes.len()];
    let mut counts = vec![(0, 0); cfg.sizes.len()];
    let mut wall = vec![0.0; cfg.sizes.len()];
    let largest = cfg.sizes.iter().copied().max().unwrap_or(1).max(1);
    for _ in 0..reps {
        for (i, stream) in streams.iter().enumerate() {
            let started = Instant::now();
            // Smaller streams are replayed into fresh repositories so every
            // size times about the same number of commits per repetition.
            let rounds = largest.div_ceil(stream.len().max(1));
            let mut total = 0.0;
            for _ in 0..rounds {
                let mut repo = ConsentRepository::new();
                let (mut acc, mut rej) = (0, 0);
                for d in stream {
                    let t = Instant::now();
                    let out = validate_and_commit(d.directive.clone(), &mut repo, &model, policy, 0)?;
                    let us = micros(t);
                    total += us;
                    samples[i].push(us);
                    if out.is_accepted() {
                        acc += 1;
                    } else {
                        rej += 1;
                    }
                }
                counts[i] = (acc, rej);
            }
            rep_means[i].push(total / (rounds * stream.len()).max(1) as f64);
            wall[i] += started.elapsed().as_secs_f64();
        }
    }

    let mut points = Vec::new();
    let mut rows = Vec::new();
    for (i, &n) in cfg.sizes.iter().enumerate() {
        let params = Params::default()
            .with("n", n)
            .with("anomaly_rate", cfg.anomaly_rate)
            .with("episodes", episodes)
            .with("overlap", overlap_name(cfg.overlap_mode))
            .with("seed", cfg.seed);
        let row = BenchResultRow::from_samples("setup", &params, "setup_latency_us", &samples[i], wall[i]);
        let steady = Summary::of(&rep_means[i]).p50;
        points.push(SetupPoint {
            size: n,
            mean_us: row.mean,
            steady_mean_us: steady,
            accepted: counts[i].0,
            rejected: counts[i].1,
        });
        rows.push(row);
        rows.push(BenchResultRow::single("setup", &params, "steady_setup_latency_us", steady, wall[i]));
        rows.push(BenchResultRow::single("setup", &params, "rejected", counts[i].1 as f64, wall[i]));
    }
    Ok(SetupReport { points, rows })
}

fn overlap_name(mode: OverlapMode) -> &'static str {
    match mode {
        OverlapMode::ExactTarget => "exact",
        OverlapMode::ScopeOverlap => "scope",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionBenchConfig {
    pub directive_count: usize,
    pub episode_count: usize,
    /// Overall anomaly rates, split evenly between conflicts and
    /// redundancies.
    pub rates: Vec<f64>,
    pub engines: Vec<EngineKind>,
    pub workload: WorkloadSpec,
    pub warmup: usize,
    pub repetitions: usize,
    pub overlap_mode: OverlapMode,
    pub seed: u64,
}

impl Default for DecisionBenchConfig {
    fn default() -> Self {
        Self {
            directive_count: 10_000,
            episode_count: 10_000,
            rates: vec![0.05, 0.10, 0.15, 0.20, 0.25],
            engines: vec![EngineKind::Cbac, EngineKind::Baseline],
            workload: WorkloadSpec { request_count: 1000, applicable_fraction: 0.6, seed: 1 },
            warmup: 100,
            repetitions: 20,
            overlap_mode: OverlapMode::ExactTarget,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionPoint {
    pub rate: f64,
    pub engine: EngineKind,
    /// Mean over every timed call.
    pub mean_us: f64,
    /// Mean over requests of each request's fastest repetition.
    pub steady_mean_us: f64,
    pub mean_scanned: f64,
    pub permits: usize,
    pub repo_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionReport {
    pub points: Vec<DecisionPoint>,
    /// Requests on which the engines disagreed, per rate.
    pub disagreements: Vec<(f64, usize)>,
    pub rows: Vec<BenchResultRow>,
}

impl DecisionReport {
    pub fn point(&self, rate: f64, engine: EngineKind) -> Option<&DecisionPoint> {
        self.points.iter().find(|p| p.rate == rate && p.engine == engine)
    }
}

struct RateSetup {
    validated: ConsentRepository,
    raw: ConsentRepository,
    workload: Vec<StandardRequest>,
}

/// Builds a validated repository for cbac and a raw one for the baseline
/// per rate, then times every request of a shared workload. Engines run one
/// after the other; within an engine, repetitions cycle through all rates.
pub fn run_decision_bench(cfg: &DecisionBenchConfig) -> Result<DecisionReport, BenchError> {
    let model = gen_model(cfg.episode_count, cfg.seed);
    let policy = ConflictPolicy { overlap_mode: cfg.overlap_mode };
    let gate = RoleGate::permissive();
    let mut setups = Vec::with_capacity(cfg.rates.len());
    for &rate in &cfg.rates {
        let spec = StreamSpec::with_anomaly_rate(cfg.episode_count, cfg.directive_count, rate, cfg.seed);
        let stream = gen_directive_stream(&spec, &model)?;
        let mut validated = ConsentRepository::new();
        let mut raw = ConsentRepository::new();
        for d in stream {
            raw.activate_unvalidated(d.directive.clone(), 0)?;
            validate_and_commit(d.directive, &mut validated, &model, policy, 0)?;
        }
        let workload = gen_workload(&cfg.workload, &validated, &model)?;
        setups.push(RateSetup { validated, raw, workload });
    }

    let n_engines = cfg.engines.len();
    let mut samples = vec![Vec::new(); cfg.rates.len() * n_engines];
    let mut stats = vec![EvalStats::default(); cfg.rates.len() * n_engines];
    let mut decisions: Vec<Vec<Decision>> = vec![Vec::new(); cfg.rates.len() * n_engines];
    let mut wall = vec![0.0; cfg.rates.len() * n_engines];
    for (ei, kind) in cfg.engines.iter().enumerate() {
        for rep in 0..cfg.repetitions.max(1) {
            for (ri, setup) in setups.iter().enumerate() {
                let slot = ri * n_engines + ei;
                let engine = kind.engine();
                let repo = match kind {
                    EngineKind::Cbac => &setup.validated,
                    EngineKind::Baseline => &setup.raw,
                };
                let mut scratch = EvalStats::default();
                for req in setup.workload.iter().cycle().take(cfg.warmup) {
                    std::hint::black_box(engine.decide(req, repo, &model, &gate, &mut scratch));
                }
                let started = Instant::now();
                let mut run_stats = EvalStats::default();
                let mut run_decisions = Vec::with_capacity(setup.workload.len());
                for req in &setup.workload {
                    let t = Instant::now();
                    let d = engine.decide(req, repo, &model, &gate, &mut run_stats);
                    samples[slot].push(micros(t));
                    run_decisions.push(d);
                }
                wall[slot] += started.elapsed().as_secs_f64();
                if rep == 0 {
                    stats[slot] = run_stats;
                    decisions[slot] = run_decisions;
                }
            }
        }
    }

    let mut points = Vec::new();
    let mut rows = Vec::new();
    let mut disagreements = Vec::new();
    for (ri, &rate) in cfg.rates.iter().enumerate() {
        for (ei, &kind) in cfg.engines.iter().enumerate() {
            let slot = ri * n_engines + ei;
            let repo_size = match kind {
                EngineKind::Cbac => setups[ri].validated.len(),
                EngineKind::Baseline => setups[ri].raw.len(),
            };
            let params = Params::default()
                .with("n", cfg.directive_count)
                .with("anomaly_rate", rate)
                .with("engine", kind)
                .with("repo_size", repo_size)
                .with("requests", cfg.workload.request_count)
                .with("seed", cfg.seed);
            let row = BenchResultRow::from_samples("decide", &params, "decision_latency_us", &samples[slot], wall[slot]);
            let steady = per_request_min(&samples[slot], setups[ri].workload.len());
            let steady_row = BenchResultRow::from_samples("decide", &params, "steady_latency_us", &steady, wall[slot]);
            let permits = decisions[slot].iter().filter(|d| d.is_permit()).count();
            points.push(DecisionPoint {
                rate,
                engine: kind,
                mean_us: row.mean,
                steady_mean_us: steady_row.mean,
                mean_scanned: stats[slot].mean_scanned(),
                permits,
                repo_size,
            });
            rows.push(row);
            rows.push(steady_row);
            rows.push(BenchResultRow::single("decide", &params, "scanned_per_request", stats[slot].mean_scanned(), wall[slot]));
            rows.push(BenchResultRow::single("decide", &params, "permits", permits as f64, wall[slot]));
        }
        if n_engines > 1 {
            let base = &decisions[ri * n_engines];
            let differing = (1..n_engines)
                .map(|ei| {
                    base.iter()
                        .zip(&decisions[ri * n_engines + ei])
                        .filter(|(a, b)| a.outcome != b.outcome)
                        .count()
                })
                .max()
                .unwrap_or(0);
            disagreements.push((rate, differing));
            let params = Params::default().with("n", cfg.directive_count).with("anomaly_rate", rate).with("seed", cfg.seed);
            rows.push(BenchResultRow::single("decide", &params, "engine_disagreements", differing as f64, 0.0));
        }
    }
    Ok(DecisionReport { points, disagreements, rows })
}

/// Samples are stored repetition-major; returns each request's minimum.
fn per_request_min(samples: &[f64], requests: usize) -> Vec<f64> {
    if requests == 0 {
        return Vec::new();
    }
    let mut best = samples[..requests].to_vec();
    for rep in samples.chunks(requests).skip(1) {
        for (b, &s) in best.iter_mut().zip(rep) {
            *b = b.min(s);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmergencyPoint {
    pub spec: EmergencyFixtureSpec,
    pub ratio: DisclosureRatio,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmergencyReport {
    pub points: Vec<EmergencyPoint>,
    /// Cases that could not run, with the reason.
    pub skipped: Vec<(EmergencyFixtureSpec, String)>,
    pub rows: Vec<BenchResultRow>,
}

/// Runs the whole emergency path for one fixture.
pub fn emergency_path(spec: &EmergencyFixtureSpec, g: &RelevanceModel) -> Result<DisclosureRatio, String> {
    let fx = gen_emergency_fixture(spec, g).map_err(|e| e.to_string())?;
    let now = 1_000;
    let claim = PatientClaim {
        biometric_ref: format!("bio:{}", fx.patient),
        patient: fx.patient.clone(),
    };
    let ctx = build_context(fx.requester.clone(), claim, &BiometricRegistry::stub(), &fx.observations, g, now)
        .map_err(|e| e.to_string())?;
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&spec.seed.to_le_bytes());
    let eaa = Eaa::new(EaaKeyMaterial::from_seed(seed));
    let token = eaa.issue(&ctx, &fx.model, now).map_err(|e| e.to_string())?;
    let store = HrrStore::new(eaa.verification_key());
    let episodes = store.retrieve(&token, &fx.model, now);
    let brief = store
        .clinical_brief(&episodes, &token, &fx.model, now)
        .map_err(|e| e.to_string())?;
    disclosure_ratio(&brief, &fx.model).map_err(|e| e.to_string())
}

/// Disclosure ratio and pruning per case. Infeasible cases yield a
/// diagnostic `skipped` row.
pub fn run_emergency_bench(cases: &[EmergencyFixtureSpec], g: &RelevanceModel) -> EmergencyReport {
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    let mut rows = Vec::new();
    for spec in cases {
        let params = Params::default()
            .with("case", &spec.case_id)
            .with("state", &spec.state)
            .with("total", spec.total_records)
            .with("relevant", spec.relevant_records)
            .with("seed", spec.seed);
        let started = Instant::now();
        match emergency_path(spec, g) {
            Ok(ratio) => {
                let wall = started.elapsed().as_secs_f64();
                rows.push(BenchResultRow::single("emergency", &params, "disclosed", ratio.disclosed as f64, wall));
                rows.push(BenchResultRow::single("emergency", &params, "eta", ratio.eta(), wall));
                rows.push(BenchResultRow::single("emergency", &params, "pruned_percent", ratio.pruned_percent(), wall));
                points.push(EmergencyPoint { spec: spec.clone(), ratio });
            }
            Err(reason) => {
                let params = params.with("error", reason.replace([';', '='], " "));
                rows.push(BenchResultRow::single("emergency", &params, "skipped", 1.0, started.elapsed().as_secs_f64()));
                skipped.push((spec.clone(), reason));
            }
        }
    }
    EmergencyReport { points, skipped, rows }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StressReport {
    pub submitted: usize,
    pub accepted: usize,
    pub rejected_conflict: usize,
    pub rejected_redundant: usize,
    /// Targets holding more than one Active directive afterwards.
    pub doubled_targets: usize,
    pub violations: usize,
}

/// Every thread submits one draft per pair target, Permit from even
/// threads and Deny from odd ones, all racing through the shared
/// repository.
pub fn run_atomicity_stress(threads: usize, pairs: usize, seed: u64) -> Result<StressReport, BenchError> {
    let model = gen_model((2 * pairs).max(20), seed);
    let grantee = model
        .users()
        .find(|(_, r)| *r == Role::HealthcareProfessional)
        .map(|(u, _)| u.clone())
        .ok_or_else(|| BenchError::Config("model has no professionals".into()))?;
    let targets: Vec<Target> = model
        .episodes()
        .filter(|e| e.creator != grantee)
        .take(pairs)
        .map(|e| Target::Episode(e.id.clone()))
        .collect();
    if targets.len() < pairs {
        return Err(BenchError::Config("not enough episodes for the pairs".into()));
    }
    let repo = SharedRepository::new(ConsentRepository::new());
    let policy = ConflictPolicy::default();
    let outcomes: Vec<Vec<ValidationOutcome>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let (repo, model, targets, grantee) = (&repo, &model, &targets, &grantee);
                s.spawn(move || {
                    let effect = if t % 2 == 0 { Effect::Permit } else { Effect::Deny };
                    targets
                        .iter()
                        .enumerate()
                        .map(|(k, target)| {
                            let draft = ConsentDirective::draft(
                                DirectiveId::new(format!("s{k}t{t}")).expect("valid id"),
                                grantee.clone(),
                                target.clone(),
                                effect,
                                ValidityInterval::unbounded(0),
                            );
                            repo.validate_and_commit(draft, model, policy, 0)
                        })
                        .collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("stress thread panicked"))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let mut report = StressReport::default();
    for o in outcomes.iter().flatten() {
        report.submitted += 1;
        match o {
            ValidationOutcome::Accepted(_) => report.accepted += 1,
            ValidationOutcome::RejectedConflict(_) => report.rejected_conflict += 1,
            ValidationOutcome::RejectedRedundant(_) => report.rejected_redundant += 1,
            ValidationOutcome::RejectedInvariant(_) => {}
        }
    }
    let repo = repo.into_inner();
    let mut per_target = std::collections::HashMap::new();
    for d in repo.active() {
        *per_target.entry(&d.target).or_insert(0usize) += 1;
    }
    report.doubled_targets = per_target.values().filter(|&&n| n > 1).count();
    report.violations = scan_violations(&repo, &model, OverlapMode::ScopeOverlap)
        .map_err(|e| BenchError::Config(e.to_string()))?
        .len();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_percentiles() {
        let s = Summary::of(&[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!((s.mean, s.p50, s.p95), (3.0, 3.0, 5.0));
        let one = Summary::of(&[7.0]);
        assert_eq!((one.mean, one.p50, one.p95), (7.0, 7.0, 7.0));
        assert!(Summary::of(&[]).mean.is_nan());
    }

    #[test]
    fn per_request_minimum() {
        assert_eq!(per_request_min(&[3.0, 1.0, 2.0, 2.0, 5.0, 0.5], 2), vec![2.0, 0.5]);
        assert!(per_request_min(&[], 0).is_empty());
    }

    #[test]
    fn csv_round_trip_with_quoting() {
        let rows = vec![BenchResultRow {
            experiment: "emergency".into(),
            params: "case=E01;error=a, \"quoted\" reason".into(),
            metric: "skipped".into(),
            mean: 1.0,
            p50: 1.0,
            p95: 1.0,
            samples: 1,
            wall_clock: 0.5,
        }];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("experiment,params,metric,mean,p50,p95,samples,wall_clock\n"));
        assert_eq!(read_csv(&buf[..]).unwrap(), rows);
        assert_eq!(rows[0].param("case"), Some("E01"));
    }

    #[test]
    fn csv_rejects_zero_samples_and_bad_header() {
        let text = "experiment,params,metric,mean,p50,p95,samples,wall_clock\nsetup,n=1,x,1,1,1,0,0\n";
        assert!(read_csv(text.as_bytes()).is_err());
        assert!(matches!(read_csv("a,b\n1,2\n".as_bytes()), Err(BenchError::Header(_))));
    }

    #[test]
    fn setup_single_size() {
        let cfg = SetupBenchConfig { sizes: vec![1], repetitions: 1, ..Default::default() };
        let report = run_setup_bench(&cfg).unwrap();
        assert_eq!(report.points.len(), 1);
        let p = &report.points[0];
        assert!((p.steady_mean_us - p.mean_us).abs() < 1e-9);
        assert!(run_setup_bench(&SetupBenchConfig { sizes: vec![5, 2], ..cfg }).is_err());
    }

    #[test]
    fn setup_counts_are_deterministic() {
        let cfg = SetupBenchConfig { sizes: vec![200, 400], repetitions: 1, ..Default::default() };
        let a = run_setup_bench(&cfg).unwrap();
        let b = run_setup_bench(&cfg).unwrap();
        let counts = |r: &SetupReport| r.points.iter().map(|p| (p.accepted, p.rejected)).collect::<Vec<_>>();
        assert_eq!(counts(&a), counts(&b));
        assert_eq!(counts(&a), vec![(160, 40), (320, 80)]);
    }

    #[test]
    fn decision_bench_small() {
        let cfg = DecisionBenchConfig {
            directive_count: 500,
            episode_count: 600,
            rates: vec![0.0, 0.2],
            workload: WorkloadSpec { request_count: 200, applicable_fraction: 0.6, seed: 2 },
            warmup: 10,
            repetitions: 1,
            ..Default::default()
        };
        let r = run_decision_bench(&cfg).unwrap();
        assert_eq!(r.points.len(), 4);
        assert_eq!(r.disagreements[0], (0.0, 0));
        let cbac = r.point(0.2, EngineKind::Cbac).unwrap();
        assert_eq!(cbac.permits, 120);
        assert_eq!(r.point(0.2, EngineKind::Baseline).unwrap().mean_scanned, 500.0);
        for row in &r.rows {
            row.check().unwrap();
        }
    }

    #[test]
    fn stress_small() {
        let r = run_atomicity_stress(4, 50, 3).unwrap();
        assert_eq!(r.submitted, 200);
        assert_eq!(r.accepted, 50);
        assert_eq!((r.doubled_targets, r.violations), (0, 0));
    }

    #[test]
    fn emergency_rows_and_skips() {
        let g = RelevanceModel::default_model();
        let cases = EmergencyFixtureSpec::parse_list(
            "case=E01\tstate=Trauma\ttotal=500\trelevant=110\tseed=1\ncase=EX\tstate=Trauma\ttotal=5\trelevant=9\tseed=1\n",
        )
        .unwrap();
        let r = run_emergency_bench(&cases, &g);
        assert_eq!(r.points.len(), 1);
        assert!(r.points[0].ratio.eta_is(220, 1000));
        assert!(r.points[0].ratio.pruned_is(780, 10));
        assert_eq!(r.skipped.len(), 1);
        assert!(r.rows.iter().any(|row| row.metric == "skipped"));
        for p in &r.points {
            assert!((p.ratio.pruned_percent() - 100.0 * (1.0 - p.ratio.eta())).abs() < 1e-9);
        }
    }
}
