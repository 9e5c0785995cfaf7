//! Experience replay: epsilon-greedy data collection along a single
//! trajectory and mini-batch sampling in i.i.d. or sequential mode.
//!
//! Buffers are rebuilt from scratch for every outer training loop so the
//! stored transitions always come from the current behavior policy; no
//! stale data crosses loop boundaries.

use crate::env::{greedy_policy, MdpSpec, Policy};
use crate::error::{Error, Result};
use crate::numerics::RngState;
use crate::qnet::NetworkWeights;
use std::io::Write;

/// Default number of leading transitions dropped to wash out the random
/// start state.
pub const DEFAULT_BURN_IN: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: Vec<Transition>,
    /// Exploration probability the buffer was collected with.
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    Iid,
    Sequential,
}

impl ReplayBuffer {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[Transition] {
        &self.entries
    }

    /// Contiguous window of `size` transitions starting at `offset`,
    /// wrapping around the end of the buffer.
    pub fn window_at(&self, offset: usize, size: usize) -> Vec<Transition> {
        (0..size)
            .map(|i| self.entries[(offset + i) % self.entries.len()])
            .collect()
    }

    /// Debug dump, one `s,a,r,s_next` row per transition.
    pub fn dump_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "s,a,r,s_next")?;
        for t in &self.entries {
            writeln!(out, "{},{},{},{}", t.s, t.a, crate::format_f64(t.r), t.s_next)?;
        }
        Ok(())
    }
}

/// Rolls a single trajectory from a uniformly random start state under the
/// epsilon-greedy policy of `w_target`, drops the first `burn_in` steps and
/// stores the next `n`.
pub fn collect(
    spec: &MdpSpec,
    w_target: &NetworkWeights,
    epsilon: f64,
    n: usize,
    burn_in: usize,
    rng: &mut RngState,
) -> Result<ReplayBuffer> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Parameter(format!("epsilon {epsilon} outside [0,1]")));
    }
    if n == 0 {
        return Err(Error::Parameter("buffer size must be at least 1".into()));
    }
    let greedy = match greedy_policy(spec, w_target)? {
        Policy::Deterministic(v) => v,
        Policy::Stochastic(_) => unreachable!(),
    };
    let num_actions = spec.num_actions();
    let mut entries = Vec::with_capacity(n);
    let mut s = rng.index(spec.num_states());
    for step in 0..burn_in + n {
        let a = if rng.next_f64() < epsilon {
            rng.index(num_actions)
        } else {
            greedy[s]
        };
        let r = spec.reward(s, a);
        let s_next = draw_successor(spec.transition_row(s, a), rng);
        if step >= burn_in {
            entries.push(Transition { s, a, r, s_next });
        }
        s = s_next;
    }
    Ok(ReplayBuffer { capacity: n, entries, epsilon })
}

fn draw_successor(row: &[f64], rng: &mut RngState) -> usize {
    let u = rng.next_f64();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.len() - 1
}

/// Mini-batch draw. `Iid` samples uniformly with replacement; `Sequential`
/// returns a contiguous window at a uniform offset (wrapping), preserving
/// temporal correlation.
pub fn sample_minibatch(
    buf: &ReplayBuffer,
    size: usize,
    mode: SamplingMode,
    rng: &mut RngState,
) -> Result<Vec<Transition>> {
    if size > buf.len() {
        return Err(Error::Capacity(format!(
            "minibatch of {size} from buffer of {}",
            buf.len()
        )));
    }
    if size == 0 {
        return Err(Error::EmptyBatch);
    }
    match mode {
        SamplingMode::Iid => Ok((0..size).map(|_| buf.entries[rng.index(buf.len())]).collect()),
        SamplingMode::Sequential => {
            let offset = rng.index(buf.len());
            Ok(buf.window_at(offset, size))
        }
    }
}
