//! Per-label gradient cache and the hit/miss resolution step.
//!
//! Each class label owns one slot holding the softmax output and the clipped
//! gradients of the last sample of that label that went through a full
//! backward pass. A new sample reuses the slot's gradients when its own output
//! lies within the threshold of the stored output; otherwise it runs backward,
//! clips, and overwrites the slot. Hits leave the slot untouched.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::{backward_into, ForwardTrace, GradientSet, Layout, NetworkParams};

/// How two softmax outputs are compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DistanceMetric {
    /// Largest absolute componentwise difference.
    #[default]
    LInf,
    /// Euclidean distance.
    L2,
}

impl DistanceMetric {
    pub fn distance(self, a: &[f32], b: &[f32]) -> f32 {
        debug_assert_eq!(a.len(), b.len());
        match self {
            DistanceMetric::LInf => output_distance(a, b),
            DistanceMetric::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DistanceMetric::LInf => "linf",
            DistanceMetric::L2 => "l2",
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linf" => Ok(DistanceMetric::LInf),
            "l2" => Ok(DistanceMetric::L2),
            other => Err(Error::usage(format!("unknown metric `{other}` (expected linf or l2)"))),
        }
    }
}

/// L-infinity distance between two output vectors.
pub fn output_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |m, (x, y)| m.max((x - y).abs()))
}

#[derive(Clone, Debug)]
pub struct CacheEntry {
    pub output: Vec<f32>,
    pub grads: GradientSet<f32>,
    /// Label of the sample whose backward pass produced `grads`.
    pub source_label: u8,
}

/// Outcome of comparing a fresh output against its label's slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lookup {
    Hit {
        distance: f32,
    },
    /// `distance` is `None` when the slot was empty.
    Miss {
        distance: Option<f32>,
    },
}

impl Lookup {
    pub fn is_hit(&self) -> bool {
        matches!(self, Lookup::Hit { .. })
    }

    pub fn distance(&self) -> Option<f32> {
        match *self {
            Lookup::Hit { distance } => Some(distance),
            Lookup::Miss { distance } => distance,
        }
    }
}

#[derive(Debug)]
pub struct Resolution<'a> {
    pub grads: &'a GradientSet<f32>,
    pub hit: bool,
    pub distance: Option<f32>,
}

/// Threshold, metric, and clip bound used to resolve a sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolvePolicy {
    pub threshold: f32,
    pub metric: DistanceMetric,
    pub clip_bound: f32,
}

/// One slot per class label. Entries persist for the lifetime of the cache.
#[derive(Clone, Debug)]
pub struct GradientCache {
    slots: Vec<Option<CacheEntry>>,
}

impl GradientCache {
    pub fn new(classes: usize) -> Self {
        Self {
            slots: vec![None; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entry(&self, label: usize) -> Option<&CacheEntry> {
        self.slots.get(label).and_then(Option::as_ref)
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, &CacheEntry)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|e| (i, e)))
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.slots.len() {
            return Err(Error::Domain {
                label: label as u32,
                classes: self.slots.len(),
            });
        }
        Ok(())
    }

    /// Compares `output` with the slot for `label`. Never mutates the cache.
    pub fn lookup(&self, label: usize, output: &[f32], threshold: f32, metric: DistanceMetric) -> Result<Lookup> {
        self.check_label(label)?;
        Ok(match &self.slots[label] {
            None => Lookup::Miss { distance: None },
            Some(entry) => {
                let distance = metric.distance(output, &entry.output);
                if distance <= threshold {
                    Lookup::Hit { distance }
                } else {
                    Lookup::Miss {
                        distance: Some(distance),
                    }
                }
            }
        })
    }

    /// Moves `grads` into the slot for `label`. The slot's previous gradient
    /// buffer (or a zeroed one) is left in `grads` for reuse.
    pub fn store(&mut self, label: usize, output: &[f32], grads: &mut GradientSet<f32>) -> Result<()> {
        self.check_label(label)?;
        match &mut self.slots[label] {
            Some(entry) => {
                entry.output.clear();
                entry.output.extend_from_slice(output);
                std::mem::swap(&mut entry.grads, grads);
                entry.source_label = label as u8;
            }
            slot @ None => {
                let layout = grads.layout();
                let fresh = std::mem::replace(grads, GradientSet::zeros(layout));
                *slot = Some(CacheEntry {
                    output: output.to_vec(),
                    grads: fresh,
                    source_label: label as u8,
                });
            }
        }
        Ok(())
    }

    /// Full resolution step: reuse on a hit, otherwise backward + clip and
    /// refresh the slot. `scratch` is a reusable gradient buffer.
    pub fn resolve(
        &mut self,
        params: &NetworkParams<f32>,
        trace: &ForwardTrace<f32>,
        label: usize,
        policy: ResolvePolicy,
        scratch: &mut GradientSet<f32>,
    ) -> Result<Resolution<'_>> {
        let lookup = self.lookup(label, &trace.probs, policy.threshold, policy.metric)?;
        if !lookup.is_hit() {
            fresh_gradients(params, trace, label, policy.clip_bound, scratch)?;
            self.store(label, &trace.probs, scratch)?;
        }
        Ok(Resolution {
            grads: &self.slots[label].as_ref().expect("slot populated").grads,
            hit: lookup.is_hit(),
            distance: lookup.distance(),
        })
    }

    /// Checks that every slot holds gradients from its own label.
    pub fn is_label_pure(&self) -> bool {
        self.entries().all(|(i, e)| e.source_label as usize == i)
    }

    /// Number of reals held: outputs plus gradient sets.
    pub fn footprint(&self) -> usize {
        self.entries().map(|(_, e)| e.output.len() + e.grads.len()).sum()
    }
}

/// `clip(backward(...))` into `out`.
pub fn fresh_gradients(
    params: &NetworkParams<f32>,
    trace: &ForwardTrace<f32>,
    label: usize,
    clip_bound: f32,
    out: &mut GradientSet<f32>,
) -> Result<()> {
    backward_into(params, trace, label, out)?;
    out.clip(clip_bound);
    Ok(())
}

/// Hit and miss tallies, per epoch or cumulative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HitCounters {
    pub hits: u64,
    pub misses: u64,
}

impl HitCounters {
    pub fn record(&mut self, hit: bool) {
        if hit {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.hits + self.misses
    }

    pub fn merge(&mut self, other: HitCounters) {
        self.hits += other.hits;
        self.misses += other.misses;
    }

    pub fn hit_rate(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::usage("hit rate undefined with zero resolutions"));
        }
        Ok(self.hits as f64 / self.total() as f64)
    }
}

/// Scratch buffer sized for `layout`.
pub fn scratch_for(layout: Layout) -> GradientSet<f32> {
    GradientSet::zeros(layout)
}
