//! Training loops: the sequential baseline, the two-worker speculative
//! pipeline, and the shadow mode that follows the baseline trajectory while
//! recording what speculation would have done.
//!
//! All modes share the same initialization (`init_params(seed)`), the same
//! per-epoch shuffle (`Prng(seed ^ epoch)`), and the same in-order gradient
//! accumulation, so with a threshold that never fires they perform exactly
//! the same floating-point operations.

pub mod clock;
mod handoff;
mod pipeline;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::math::{shuffle, Prng};
use crate::mnist_io::ImageSample;
use crate::network::{self, apply_update, forward_into, init_params, ForwardTrace, GradientSet, Layout, NetworkParams};
use crate::speculation::{fresh_gradients, DistanceMetric, GradientCache, HitCounters, ResolvePolicy};

pub use pipeline::{train_speculative, train_speculative_detailed, SpeculativeOutcome};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    #[default]
    Baseline,
    Speculative,
    Shadow,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Speculative => "speculative",
            Mode::Shadow => "shadow",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "speculative" => Ok(Mode::Speculative),
            "shadow" => Ok(Mode::Shadow),
            other => Err(Error::usage(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub clip_bound: f32,
    pub threshold: f32,
    pub epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub metric: DistanceMetric,
    /// Enables per-sample invariant checks (see [`Audit`]). Adds overhead to
    /// the timed region, so benchmark runs leave it off.
    pub audit: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 15,
            clip_bound: 5.0,
            threshold: 0.25,
            epochs: 10,
            seed: 42,
            mode: Mode::Baseline,
            metric: DistanceMetric::LInf,
            audit: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::usage("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch_size must be at least 1"));
        }
        if self.clip_bound.is_nan() || self.clip_bound <= 0.0 {
            return Err(Error::usage("clip_bound must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::usage("epochs must be at least 1"));
        }
        if self.threshold.is_nan() {
            return Err(Error::usage("threshold must not be NaN"));
        }
        Ok(())
    }

    pub fn policy(&self) -> ResolvePolicy {
        ResolvePolicy {
            threshold: self.threshold,
            metric: self.metric,
            clip_bound: self.clip_bound,
        }
    }
}

/// Invariant checks collected when [`TrainConfig::audit`] is set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Audit {
    /// Largest |component| of any per-sample gradient fed into accumulation.
    pub max_abs_gradient: f32,
    /// Largest |sum(probs) - 1| over training and evaluation forward passes.
    pub max_softmax_deviation: f64,
    /// Stages that observed a parameter update while they were running.
    pub snapshot_violations: u64,
    /// Training traces that broke `a == leaky_relu(z)` or positivity of probs.
    pub trace_violations: u64,
    pub samples_checked: u64,
}

impl Audit {
    fn check_trace(&mut self, trace: &ForwardTrace<f32>) {
        self.samples_checked += 1;
        self.observe_probs(&trace.probs);
        let act_ok = trace
            .a1
            .iter()
            .zip(&trace.z1)
            .chain(trace.a2.iter().zip(&trace.z2))
            .all(|(a, z)| *a == crate::math::leaky_relu(*z));
        if !act_ok || trace.probs.iter().any(|&p| p.is_nan() || p <= 0.0) {
            self.trace_violations += 1;
        }
    }

    fn observe_probs(&mut self, probs: &[f32]) {
        let sum: f64 = probs.iter().map(|&p| p as f64).sum();
        self.max_softmax_deviation = self.max_softmax_deviation.max((sum - 1.0).abs());
    }

    fn observe_gradient(&mut self, grads: &GradientSet<f32>) {
        self.max_abs_gradient = self.max_abs_gradient.max(grads.max_abs());
    }

    fn merge(&mut self, other: &Audit) {
        self.max_abs_gradient = self.max_abs_gradient.max(other.max_abs_gradient);
        self.max_softmax_deviation = self.max_softmax_deviation.max(other.max_softmax_deviation);
        self.snapshot_violations += other.snapshot_violations;
        self.trace_violations += other.trace_violations;
        self.samples_checked += other.samples_checked;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Training wall time since the start of the run; evaluation excluded.
    pub cumulative_time_s: f64,
    pub avg_step_us: f64,
    pub accuracy_pct: f64,
    pub hit_rate: f64,
    pub hits: u64,
    pub misses: u64,
    pub updates: u64,
    pub samples: u64,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub config: TrainConfig,
    pub records: Vec<EpochRecord>,
    pub final_params_digest: u64,
    pub final_params: NetworkParams<f32>,
    pub audit: Option<Audit>,
}

impl RunReport {
    pub fn total_updates(&self) -> u64 {
        self.records.iter().map(|r| r.updates).sum()
    }

    pub fn counters(&self) -> HitCounters {
        self.records.iter().fold(HitCounters::default(), |mut c, r| {
            c.merge(HitCounters {
                hits: r.hits,
                misses: r.misses,
            });
            c
        })
    }
}

/// Runs the mode selected in `cfg`.
pub fn train(cfg: &TrainConfig, train: &[ImageSample], test: &[ImageSample]) -> Result<RunReport> {
    match cfg.mode {
        Mode::Baseline => train_baseline(cfg, train, test),
        Mode::Speculative => train_speculative(cfg, train, test),
        Mode::Shadow => train_shadow(cfg, train, test).map(|s| s.report),
    }
}

pub(crate) fn check_inputs(cfg: &TrainConfig, train: &[ImageSample], test: &[ImageSample], expect: Mode) -> Result<()> {
    cfg.validate()?;
    if cfg.mode != expect {
        return Err(Error::usage(format!(
            "config mode is {}, expected {}",
            cfg.mode, expect
        )));
    }
    if train.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    if test.is_empty() {
        return Err(Error::usage("test set is empty"));
    }
    let layout = Layout::MNIST;
    for s in train.iter().chain(test) {
        if s.pixels.len() != layout.input {
            return Err(Error::shape(format!(
                "sample has {} pixels, expected {}",
                s.pixels.len(),
                layout.input
            )));
        }
        if s.label as usize >= layout.output {
            return Err(Error::Domain {
                label: s.label as u32,
                classes: layout.output,
            });
        }
    }
    Ok(())
}

/// Sample order for a 1-based epoch; identical in every mode.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut Prng::new(seed ^ epoch as u64));
    order
}

/// Accumulates per-epoch measurements into records.
pub(crate) struct EpochMeter {
    run_start_offset_ns: u64,
    step_ns: u64,
    steps: u64,
    pub(crate) counters: HitCounters,
    pub(crate) updates: u64,
}

impl EpochMeter {
    pub(crate) fn new() -> Self {
        Self {
            run_start_offset_ns: 0,
            step_ns: 0,
            steps: 0,
            counters: HitCounters::default(),
            updates: 0,
        }
    }

    pub(crate) fn step(&mut self, ns: u64) {
        // sub-resolution spans still count as one tick
        self.step_ns += ns.max(1);
        self.steps += 1;
    }

    pub(crate) fn add_training_time(&mut self, started: Instant) {
        self.run_start_offset_ns += clock::elapsed_ns(started, clock::now());
    }

    /// Closes the epoch: evaluates, emits a record, and resets per-epoch tallies.
    pub(crate) fn finish_epoch(
        &mut self,
        epoch: usize,
        params: &NetworkParams<f32>,
        test: &[ImageSample],
        report_hits: bool,
        audit: Option<&mut Audit>,
    ) -> Result<EpochRecord> {
        let accuracy = match audit {
            Some(a) => network::evaluate_with(params, test, |t| a.observe_probs(&t.probs))?,
            None => network::evaluate(params, test)?,
        };
        let record = EpochRecord {
            epoch,
            cumulative_time_s: self.run_start_offset_ns as f64 * 1e-9,
            avg_step_us: if self.steps == 0 {
                0.0
            } else {
                self.step_ns as f64 / self.steps as f64 * 1e-3
            },
            accuracy_pct: accuracy * 100.0,
            hit_rate: if report_hits {
                self.counters.hit_rate().unwrap_or(0.0)
            } else {
                0.0
            },
            hits: self.counters.hits,
            misses: self.counters.misses,
            updates: self.updates,
            samples: self.steps,
        };
        self.step_ns = 0;
        self.steps = 0;
        self.counters = HitCounters::default();
        self.updates = 0;
        Ok(record)
    }
}

/// Sequential reference loop: forward, backward, clip, accumulate, and an
/// update every `batch_size` samples (plus a final partial batch, if any).
pub fn train_baseline(cfg: &TrainConfig, train: &[ImageSample], test: &[ImageSample]) -> Result<RunReport> {
    check_inputs(cfg, train, test, Mode::Baseline)?;
    let layout = Layout::MNIST;
    let mut params: NetworkParams<f32> = init_params(layout, cfg.seed);
    let mut trace = ForwardTrace::zeros(layout);
    let mut grads = GradientSet::zeros(layout);
    let mut acc = GradientSet::zeros(layout);
    let mut meter = EpochMeter::new();
    let mut audit = cfg.audit.then(Audit::default);
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let started = clock::now();
        let order = epoch_order(train.len(), cfg.seed, epoch);
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let sample = &train[i];
                let t0 = clock::now();
                forward_into(&params, &sample.pixels, &mut trace)?;
                fresh_gradients(&params, &trace, sample.label as usize, cfg.clip_bound, &mut grads)?;
                meter.step(clock::elapsed_ns(t0, clock::now()));
                if let Some(a) = audit.as_mut() {
                    a.check_trace(&trace);
                    a.observe_gradient(&grads);
                }
                acc.accumulate(&grads);
            }
            apply_update(&mut params, &acc, cfg.learning_rate, batch.len())?;
            acc.fill_zero();
            meter.updates += 1;
        }
        meter.add_training_time(started);
        records.push(meter.finish_epoch(epoch, &params, test, false, audit.as_mut())?);
    }

    Ok(RunReport {
        config: cfg.clone(),
        records,
        final_params_digest: params.digest(),
        final_params: params,
        audit,
    })
}

/// One resolution observed in shadow mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadowObservation {
    pub epoch: usize,
    pub label: u8,
    /// Distance to the cached output; `None` on a cold slot.
    pub distance: Option<f32>,
}

#[derive(Clone, Debug)]
pub struct ShadowReport {
    pub report: RunReport,
    pub observations: Vec<ShadowObservation>,
}

impl ShadowReport {
    /// Hits an offline threshold would score against the recorded distance
    /// stream. Nondecreasing in `threshold` by construction.
    pub fn offline_hits(&self, threshold: f32) -> u64 {
        self.observations
            .iter()
            .filter(|o| o.distance.is_some_and(|d| d <= threshold))
            .count() as u64
    }
}

/// Baseline trajectory plus a live cache that records would-be hits at
/// `cfg.threshold`. Updates always use freshly computed gradients.
pub fn train_shadow(cfg: &TrainConfig, train: &[ImageSample], test: &[ImageSample]) -> Result<ShadowReport> {
    check_inputs(cfg, train, test, Mode::Shadow)?;
    let layout = Layout::MNIST;
    let policy = cfg.policy();
    let mut params: NetworkParams<f32> = init_params(layout, cfg.seed);
    let mut trace = ForwardTrace::zeros(layout);
    let mut grads = GradientSet::zeros(layout);
    let mut acc = GradientSet::zeros(layout);
    let mut cache = GradientCache::new(layout.output);
    let mut meter = EpochMeter::new();
    let mut audit = cfg.audit.then(Audit::default);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut observations = Vec::with_capacity(train.len() * cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let started = clock::now();
        let order = epoch_order(train.len(), cfg.seed, epoch);
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let sample = &train[i];
                let label = sample.label as usize;
                let t0 = clock::now();
                forward_into(&params, &sample.pixels, &mut trace)?;
                let lookup = cache.lookup(label, &trace.probs, policy.threshold, policy.metric)?;
                fresh_gradients(&params, &trace, label, cfg.clip_bound, &mut grads)?;
                meter.step(clock::elapsed_ns(t0, clock::now()));
                if let Some(a) = audit.as_mut() {
                    a.check_trace(&trace);
                    a.observe_gradient(&grads);
                }
                acc.accumulate(&grads);
                meter.counters.record(lookup.is_hit());
                observations.push(ShadowObservation {
                    epoch,
                    label: sample.label,
                    distance: lookup.distance(),
                });
                if !lookup.is_hit() {
                    // store swaps buffers; `grads` is fully rewritten next sample
                    cache.store(label, &trace.probs, &mut grads)?;
                }
            }
            apply_update(&mut params, &acc, cfg.learning_rate, batch.len())?;
            acc.fill_zero();
            meter.updates += 1;
        }
        meter.add_training_time(started);
        records.push(meter.finish_epoch(epoch, &params, test, true, audit.as_mut())?);
    }

    Ok(ShadowReport {
        report: RunReport {
            config: cfg.clone(),
            records,
            final_params_digest: params.digest(),
            final_params: params,
            audit,
        },
        observations,
    })
}
