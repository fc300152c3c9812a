//! Lag-1 speculative pipeline.
//!
//! The coordinator thread runs the forward pass (worker F) and a scoped
//! resolver thread (worker B) owns the gradient cache and the batch
//! accumulator. In stage `t`, F computes the forward pass of sample `t` while
//! B resolves sample `t - 1` against the cache and accumulates the result.
//! Once a whole batch has been resolved the pipeline drains, the coordinator
//! takes the accumulator and applies the update under the write lock, and the
//! next batch refills the pipeline.
//!
//! Resolutions happen strictly in sample order, so gradient accumulation
//! performs the same floating-point operations as the baseline loop.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{PoisonError, RwLock};

use super::handoff::{default_spin_limit, CloseOnDrop, Mailbox};
use super::{check_inputs, clock, epoch_order, Audit, EpochMeter, Mode, RunReport, TrainConfig};
use crate::error::{Error, Result};
use crate::mnist_io::ImageSample;
use crate::network::{apply_update, forward_into, init_params, ForwardTrace, GradientSet, Layout, NetworkParams};
use crate::speculation::{fresh_gradients, GradientCache, ResolvePolicy};

enum Job {
    Resolve {
        trace: Box<ForwardTrace<f32>>,
        label: usize,
    },
    /// Swap the accumulator for the (zeroed) one carried here.
    Drain(Box<GradientSet<f32>>),
    Stop,
}

enum Reply {
    Resolved {
        trace: Box<ForwardTrace<f32>>,
        resolve_ns: u64,
        hit: bool,
    },
    Drained(Box<GradientSet<f32>>),
    Failed(Error),
}

/// What the resolver hands back when the run ends.
struct ResolverState {
    cache: GradientCache,
    audit: Audit,
}

struct Shared {
    params: RwLock<NetworkParams<f32>>,
    /// Bumped by every weight update; stages check it is unchanged across
    /// their execution.
    version: AtomicU64,
    snapshot_violations: AtomicU64,
}

impl Shared {
    fn read(&self) -> std::sync::RwLockReadGuard<'_, NetworkParams<f32>> {
        self.params.read().unwrap_or_else(PoisonError::into_inner)
    }

    fn check_stable(&self, entered_at: u64) {
        if self.version.load(Ordering::Acquire) != entered_at {
            self.snapshot_violations.fetch_add(1, Ordering::Relaxed);
            debug_assert!(false, "parameter update overlapped a pipeline stage");
        }
    }
}

/// Everything a speculative run produced, including the final cache.
pub struct SpeculativeOutcome {
    pub report: RunReport,
    pub cache: GradientCache,
}

pub fn train_speculative(cfg: &TrainConfig, train: &[ImageSample], test: &[ImageSample]) -> Result<RunReport> {
    train_speculative_detailed(cfg, train, test).map(|o| o.report)
}

pub fn train_speculative_detailed(
    cfg: &TrainConfig,
    train: &[ImageSample],
    test: &[ImageSample],
) -> Result<SpeculativeOutcome> {
    check_inputs(cfg, train, test, Mode::Speculative)?;
    let layout = Layout::MNIST;
    let shared = Shared {
        params: RwLock::new(init_params(layout, cfg.seed)),
        version: AtomicU64::new(0),
        snapshot_violations: AtomicU64::new(0),
    };
    let spin = default_spin_limit();
    let jobs: Mailbox<Job> = Mailbox::new(spin);
    let replies: Mailbox<Reply> = Mailbox::new(spin);
    let policy = cfg.policy();

    let (coordinated, resolver) = std::thread::scope(|s| {
        let worker = s.spawn(|| resolver_loop(&shared, &jobs, &replies, policy, layout, cfg.audit));
        let coordinated = {
            let _hangup = CloseOnDrop(&jobs);
            let result = coordinate(cfg, train, test, &shared, &jobs, &replies, layout);
            jobs.send(Job::Stop);
            result
        };
        (coordinated, worker.join())
    });
    let resolver = resolver.map_err(|_| Error::WorkerPanic)?;
    let (records, coordinator_audit) = coordinated?;

    let params = shared.params.into_inner().unwrap_or_else(PoisonError::into_inner);
    let audit = coordinator_audit.map(|mut a| {
        a.merge(&resolver.audit);
        a.snapshot_violations += shared.snapshot_violations.load(Ordering::Relaxed);
        a
    });
    Ok(SpeculativeOutcome {
        report: RunReport {
            config: cfg.clone(),
            records,
            final_params_digest: params.digest(),
            final_params: params,
            audit,
        },
        cache: resolver.cache,
    })
}

fn resolver_loop(
    shared: &Shared,
    jobs: &Mailbox<Job>,
    replies: &Mailbox<Reply>,
    policy: ResolvePolicy,
    layout: Layout,
    audit_enabled: bool,
) -> ResolverState {
    let _hangup = CloseOnDrop(replies);
    let mut cache = GradientCache::new(layout.output);
    let mut scratch = GradientSet::zeros(layout);
    let mut acc = Box::new(GradientSet::zeros(layout));
    let mut audit = Audit::default();

    while let Some(job) = jobs.recv() {
        match job {
            Job::Resolve { trace, label } => {
                let params = shared.read();
                let entered = shared.version.load(Ordering::Acquire);
                let t0 = clock::now();
                let outcome = cache
                    .lookup(label, &trace.probs, policy.threshold, policy.metric)
                    .and_then(|lookup| {
                        if !lookup.is_hit() {
                            fresh_gradients(&params, &trace, label, policy.clip_bound, &mut scratch)?;
                        }
                        Ok(lookup)
                    });
                let resolve_ns = clock::elapsed_ns(t0, clock::now());
                shared.check_stable(entered);
                drop(params);

                let lookup = match outcome {
                    Ok(l) => l,
                    Err(e) => {
                        replies.send(Reply::Failed(e));
                        continue;
                    }
                };
                if !lookup.is_hit() {
                    if let Err(e) = cache.store(label, &trace.probs, &mut scratch) {
                        replies.send(Reply::Failed(e));
                        continue;
                    }
                }
                let grads = &cache.entry(label).expect("slot populated").grads;
                if audit_enabled {
                    audit.observe_gradient(grads);
                }
                acc.accumulate(grads);
                replies.send(Reply::Resolved {
                    trace,
                    resolve_ns,
                    hit: lookup.is_hit(),
                });
            }
            Job::Drain(empty) => {
                let full = std::mem::replace(&mut acc, empty);
                replies.send(Reply::Drained(full));
            }
            Job::Stop => break,
        }
    }
    ResolverState { cache, audit }
}

type Coordinated = (Vec<super::EpochRecord>, Option<Audit>);

fn coordinate(
    cfg: &TrainConfig,
    train: &[ImageSample],
    test: &[ImageSample],
    shared: &Shared,
    jobs: &Mailbox<Job>,
    replies: &Mailbox<Reply>,
    layout: Layout,
) -> Result<Coordinated> {
    let mut meter = EpochMeter::new();
    let mut audit = cfg.audit.then(Audit::default);
    let mut records = Vec::with_capacity(cfg.epochs);
    // two trace buffers ping-pong between F and B
    let mut ahead = Some(Box::new(ForwardTrace::zeros(layout)));
    let mut spare = Some(Box::new(ForwardTrace::zeros(layout)));
    let mut fresh_acc = Some(Box::new(GradientSet::zeros(layout)));

    let recv = || replies.recv().ok_or(Error::WorkerPanic);

    for epoch in 1..=cfg.epochs {
        let started = clock::now();
        let order = epoch_order(train.len(), cfg.seed, epoch);
        for batch in order.chunks(cfg.batch_size) {
            // stage 0: forward of the first sample, nothing to resolve yet
            let mut current = ahead.take().expect("trace buffer");
            let mut carried_ns = timed_forward(shared, &train[batch[0]], &mut current, audit.as_mut())?;

            for k in 1..=batch.len() {
                let label = train[batch[k - 1]].label as usize;
                jobs.send(Job::Resolve { trace: current, label });

                let forward_ns = match batch.get(k) {
                    Some(&next) => {
                        let mut buf = spare.take().expect("trace buffer");
                        let ns = timed_forward(shared, &train[next], &mut buf, audit.as_mut());
                        spare = Some(buf);
                        ns?
                    }
                    None => 0,
                };

                let (returned, resolve_ns, hit) = match recv()? {
                    Reply::Resolved { trace, resolve_ns, hit } => (trace, resolve_ns, hit),
                    Reply::Failed(e) => return Err(e),
                    Reply::Drained(_) => unreachable!("drain reply outside drain"),
                };
                meter.counters.record(hit);
                meter.step(carried_ns + forward_ns.max(resolve_ns));
                carried_ns = 0;

                // the freshly computed trace becomes the next to resolve
                current = spare.take().expect("trace buffer");
                spare = Some(returned);
            }
            ahead = Some(current);

            jobs.send(Job::Drain(fresh_acc.take().expect("accumulator buffer")));
            let mut acc = match recv()? {
                Reply::Drained(acc) => acc,
                Reply::Failed(e) => return Err(e),
                Reply::Resolved { .. } => unreachable!("resolve reply during drain"),
            };
            {
                let mut params = shared.params.write().unwrap_or_else(std::sync::PoisonError::into_inner);
                apply_update(&mut params, &acc, cfg.learning_rate, batch.len())?;
                shared.version.fetch_add(1, Ordering::AcqRel);
            }
            acc.fill_zero();
            fresh_acc = Some(acc);
            meter.updates += 1;
        }
        meter.add_training_time(started);
        let params = shared.read();
        records.push(meter.finish_epoch(epoch, &params, test, true, audit.as_mut())?);
    }
    Ok((records, audit))
}

fn timed_forward(
    shared: &Shared,
    sample: &ImageSample,
    trace: &mut ForwardTrace<f32>,
    audit: Option<&mut Audit>,
) -> Result<u64> {
    let params = shared.read();
    let entered = shared.version.load(Ordering::Acquire);
    let t0 = clock::now();
    forward_into(&params, &sample.pixels, trace)?;
    let ns = clock::elapsed_ns(t0, clock::now());
    shared.check_stable(entered);
    drop(params);
    if let Some(a) = audit {
        a.check_trace(trace);
    }
    Ok(ns)
}
