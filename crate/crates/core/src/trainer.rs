//! Outer/inner training loop with a frozen target network, fresh
//! epsilon-greedy replay buffers, and heavy-ball gradient steps.
//!
//! Every outer loop snapshots the current weights as the target, collects a
//! fresh buffer under the schedule's exploration probability, then runs the
//! configured number of inner mini-batch steps. A full run is strictly
//! sequential and bitwise deterministic for a fixed seed; fan-out across
//! seeds or configurations belongs to the sweep layer.

use crate::analysis::{self, MetricsRecord};
use crate::env::{self, MdpSpec, Policy};
use crate::error::{Error, Result};
use crate::numerics::RngState;
use crate::qnet::{q_forward, q_grad, q_value, NetworkWeights};
use crate::replay::{self, SamplingMode, Transition};
use crate::schedule::{EpsilonSchedule, ScheduleConfig, ScheduleKind};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetRule {
    Dqn,
    Ddqn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitMode {
    /// Start at Frobenius distance `delta` from the planted weights, along
    /// a random unit direction. `delta = 0` starts bitwise at the plant.
    Planted { delta: f64 },
    /// Like `Planted`, but the random direction is projected onto the
    /// well-conditioned subspace of the planted gradient Gram matrix
    /// (eigenvalues above `cutoff` times the largest) before rescaling to
    /// `delta`. Keeps the perturbation inside the region the data can
    /// actually recover from.
    PlantedConditioned { delta: f64, cutoff: f64 },
    /// Gaussian initialization scaled by `scale`; carries no guarantee.
    Random { scale: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Outer loops (target refreshes).
    pub outer: usize,
    /// Inner gradient steps per outer loop.
    pub inner: usize,
    pub eta: f64,
    pub beta: f64,
    pub buffer_size: usize,
    pub batch: usize,
    pub target_rule: TargetRule,
    pub sampling_mode: SamplingModeConfig,
    pub burn_in: usize,
    pub schedule: ScheduleConfig,
    pub init: InitMode,
    pub seed: u64,
    /// Enables the gradient-gap column and wall-clock timing in metrics;
    /// timing makes outputs non-reproducible byte-for-byte, so it is off by
    /// default.
    pub diagnostics: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingModeConfig {
    Iid,
    Sequential,
}

impl From<SamplingModeConfig> for SamplingMode {
    fn from(m: SamplingModeConfig) -> Self {
        match m {
            SamplingModeConfig::Iid => SamplingMode::Iid,
            SamplingModeConfig::Sequential => SamplingMode::Sequential,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            outer: 30,
            inner: 300,
            eta: 0.1,
            beta: 0.9,
            buffer_size: 4096,
            batch: 64,
            target_rule: TargetRule::Dqn,
            sampling_mode: SamplingModeConfig::Iid,
            burn_in: replay::DEFAULT_BURN_IN,
            schedule: ScheduleConfig::default(),
            init: InitMode::Planted { delta: 0.4 },
            seed: 1,
            diagnostics: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buffer_size == 0 || self.batch == 0 {
            return Err(Error::Parameter("buffer size and batch must be at least 1".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Parameter(format!("step size {} must be positive", self.eta)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Parameter(format!("momentum {} outside [0,1)", self.beta)));
        }
        Ok(())
    }
}

/// Abort threshold: training counts as diverged once the weight norm
/// exceeds 1e6 times the planted norm.
const DIVERGENCE_FACTOR: f64 = 1e6;

/// Mini-batch descent direction at `w` with labels from `w_target`:
/// g = (1/B) sum_n (Q(w;x_n) - y_n) grad Q(w;x_n).
///
/// Labels are treated as constants: under `Dqn` y = r + gamma * max_a'
/// Q(w_target; s', a'); under `Ddqn` the action is the target argmax but the
/// value is read from `w` itself.
pub fn minibatch_gradient(
    spec: &MdpSpec,
    batch: &[Transition],
    w: &NetworkWeights,
    w_target: &NetworkWeights,
    rule: TargetRule,
    gamma: f64,
) -> Result<NetworkWeights> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut grad = w.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    for t in batch {
        let y = label(spec, t, w, w_target, rule, gamma)?;
        let x = spec.feature_map(t.s, t.a)?;
        let (q, trace) = q_forward(w, &x)?;
        let residual = q - y;
        if residual == 0.0 {
            continue;
        }
        let g = q_grad(w, &trace)?;
        grad.add_scaled(&g, scale * residual)?;
    }
    Ok(grad)
}

fn label(
    spec: &MdpSpec,
    t: &Transition,
    w: &NetworkWeights,
    w_target: &NetworkWeights,
    rule: TargetRule,
    gamma: f64,
) -> Result<f64> {
    match rule {
        TargetRule::Dqn => {
            let (_, tmax) = env::q_max_action(spec, w_target, t.s_next)?;
            Ok(t.r + gamma * tmax)
        }
        TargetRule::Ddqn => {
            let (astar, _) = env::q_max_action(spec, w_target, t.s_next)?;
            let q = q_value(w, &spec.feature_map(t.s_next, astar)?)?;
            Ok(t.r + gamma * q)
        }
    }
}

/// Heavy-ball update: w_next = w - eta * g + beta * (w - w_prev).
///
/// The momentum term is computed as an explicit difference, so a run
/// sitting exactly at a zero-gradient point never drifts by rounding.
pub fn agd_step(
    w: &NetworkWeights,
    w_prev: &NetworkWeights,
    g: &NetworkWeights,
    eta: f64,
    beta: f64,
) -> Result<NetworkWeights> {
    if !w.same_shape(w_prev) || !w.same_shape(g) {
        return Err(Error::Shape("agd_step on mismatched networks".into()));
    }
    let mut next = w.clone();
    next.add_scaled(g, -eta)?;
    for l in 0..next.depth() {
        let wl = w.layer(l).data();
        let wpl = w_prev.layer(l).data();
        let out = next.layer_mut(l).data_mut();
        for (o, (a, b)) in out.iter_mut().zip(wl.iter().zip(wpl)) {
            *o += beta * (a - b);
        }
    }
    Ok(next)
}

/// Cached per-outer-loop label data so the inner loop avoids recomputing
/// target values per sample.
enum LabelTable {
    /// y = r + gamma * tmax[s_next]
    Dqn(Vec<f64>),
    /// y = r + gamma * Q(w; s_next, astar[s_next])
    Ddqn(Vec<usize>),
}

fn build_label_table(
    spec: &MdpSpec,
    w_target: &NetworkWeights,
    rule: TargetRule,
) -> Result<LabelTable> {
    match rule {
        TargetRule::Dqn => {
            let tmax = (0..spec.num_states())
                .map(|s| env::q_max_action(spec, w_target, s).map(|(_, q)| q))
                .collect::<Result<Vec<f64>>>()?;
            Ok(LabelTable::Dqn(tmax))
        }
        TargetRule::Ddqn => {
            let astar = (0..spec.num_states())
                .map(|s| env::q_max_action(spec, w_target, s).map(|(a, _)| a))
                .collect::<Result<Vec<usize>>>()?;
            Ok(LabelTable::Ddqn(astar))
        }
    }
}

fn cached_minibatch_gradient(
    spec: &MdpSpec,
    batch: &[Transition],
    w: &NetworkWeights,
    table: &LabelTable,
    gamma: f64,
) -> Result<NetworkWeights> {
    let mut grad = w.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    for t in batch {
        let y = match table {
            LabelTable::Dqn(tmax) => t.r + gamma * tmax[t.s_next],
            LabelTable::Ddqn(astar) => {
                let q = q_value(w, &spec.feature_map(t.s_next, astar[t.s_next])?)?;
                t.r + gamma * q
            }
        };
        let x = spec.feature_map(t.s, t.a)?;
        let (q, trace) = q_forward(w, &x)?;
        let residual = q - y;
        if residual == 0.0 {
            continue;
        }
        let g = q_grad(w, &trace)?;
        grad.add_scaled(&g, scale * residual)?;
    }
    Ok(grad)
}

/// Stationary distributions keyed by the greedy action vector, so repeated
/// metric evaluations under an unchanged policy cost nothing.
struct StationaryCache {
    map: HashMap<Vec<usize>, Vec<f64>>,
}

impl StationaryCache {
    fn new() -> Self {
        StationaryCache { map: HashMap::new() }
    }

    fn get(&mut self, spec: &MdpSpec, w: &NetworkWeights) -> Result<(Vec<usize>, Vec<f64>)> {
        let actions = match env::greedy_policy(spec, w)? {
            Policy::Deterministic(v) => v,
            Policy::Stochastic(_) => unreachable!(),
        };
        if let Some(probs) = self.map.get(&actions) {
            return Ok((actions, probs.clone()));
        }
        let dist = env::stationary_distribution(spec, &Policy::Deterministic(actions.clone()))?;
        self.map.insert(actions.clone(), dist.probs.clone());
        Ok((actions, dist.probs))
    }
}

/// Runs the full training loop and collects one metrics record per outer
/// loop plus the baseline at t = 0. With `inner == 0` or `outer == 0` the
/// run is a no-op and only the baseline is returned.
pub fn run(spec: &MdpSpec, wstar: &NetworkWeights, cfg: &TrainConfig) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = RngState::seed_from_u64(cfg.seed);
    let gamma = spec.gamma();

    let mut w = initial_weights(spec, wstar, &cfg.init, &mut rng)?;

    let (star_policy, star_dist) = env::mu_star(spec, wstar)?;
    let qstar_table = spec.q_table(wstar)?;
    let mut cache = StationaryCache::new();

    let e0 = crate::qnet::weight_distance(&w, wstar, false)?;
    let c0 = ct_from_cache(spec, &w, &star_policy, &mut cache)?;
    let sched = EpsilonSchedule::materialize(
        &cfg.schedule,
        gamma,
        spec.num_actions(),
        spec.r_max(),
        cfg.buffer_size,
        spec.feature_dim(),
        e0,
        c0,
    )?;

    let mut records = Vec::with_capacity(cfg.outer + 1);
    let baseline = measure(
        spec, wstar, &w, 0, &sched, &star_policy, &star_dist.probs, &qstar_table, &mut cache, cfg,
        &start, None,
    )?;
    records.push(baseline);
    if cfg.outer == 0 || cfg.inner == 0 {
        return Ok(records);
    }

    let wstar_norm = wstar.frobenius_norm().max(f64::MIN_POSITIVE);
    let batch_size = cfg.batch.min(cfg.buffer_size);
    let mode: SamplingMode = cfg.sampling_mode.into();

    for t in 0..cfg.outer {
        let w_target = w.clone();
        let eps_t = records[t].epsilon;
        let buffer = replay::collect(spec, &w_target, eps_t, cfg.buffer_size, cfg.burn_in, &mut rng)?;
        if cfg.diagnostics {
            let gap = analysis::gradient_gap(spec, &buffer, &w, &w_target, wstar, cfg.target_rule)?;
            records[t].grad_gap = Some(gap.total);
        }

        let table = build_label_table(spec, &w_target, cfg.target_rule)?;
        // Momentum restarts with each target refresh.
        let mut w_prev = w.clone();
        for m in 0..cfg.inner {
            let batch = replay::sample_minibatch(&buffer, batch_size, mode, &mut rng)?;
            let g = cached_minibatch_gradient(spec, &batch, &w, &table, gamma)?;
            let next = agd_step(&w, &w_prev, &g, cfg.eta, cfg.beta)?;
            w_prev = w;
            w = next;
            if !w.all_finite() || w.frobenius_norm() > DIVERGENCE_FACTOR * wstar_norm {
                return Err(Error::Divergence { t, m, records });
            }
        }

        let record = measure(
            spec, wstar, &w, t + 1, &sched, &star_policy, &star_dist.probs, &qstar_table,
            &mut cache, cfg, &start, None,
        )?;
        records.push(record);
    }
    Ok(records)
}

fn initial_weights(
    spec: &MdpSpec,
    wstar: &NetworkWeights,
    init: &InitMode,
    rng: &mut RngState,
) -> Result<NetworkWeights> {
    match init {
        InitMode::Planted { delta } => {
            if !(*delta >= 0.0) {
                return Err(Error::Parameter(format!("perturbation radius {delta} negative")));
            }
            if *delta == 0.0 {
                return Ok(wstar.clone());
            }
            let direction =
                NetworkWeights::random(wstar.input_dim(), wstar.width(), wstar.depth(), rng);
            perturb(wstar, direction.flatten(), *delta)
        }
        InitMode::PlantedConditioned { delta, cutoff } => {
            if !(*delta >= 0.0) {
                return Err(Error::Parameter(format!("perturbation radius {delta} negative")));
            }
            if *delta == 0.0 {
                return Ok(wstar.clone());
            }
            let basis = analysis::mu_star_gram_basis(spec, wstar, *cutoff)?;
            if basis.is_empty() {
                return Err(Error::DegenerateDesign(
                    "conditioned init: no Gram directions above the cutoff".into(),
                ));
            }
            let direction =
                NetworkWeights::random(wstar.input_dim(), wstar.width(), wstar.depth(), rng);
            let flat = direction.flatten();
            let mut projected = vec![0.0; flat.len()];
            for v in &basis {
                let coeff: f64 = v.iter().zip(&flat).map(|(a, b)| a * b).sum();
                for (p, vi) in projected.iter_mut().zip(v) {
                    *p += coeff * vi;
                }
            }
            perturb(wstar, projected, *delta)
        }
        InitMode::Random { scale } => {
            let mut w =
                NetworkWeights::random(wstar.input_dim(), wstar.width(), wstar.depth(), rng);
            w.scale(*scale);
            Ok(w)
        }
    }
}

fn perturb(wstar: &NetworkWeights, direction: Vec<f64>, delta: f64) -> Result<NetworkWeights> {
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::DegenerateDesign("zero perturbation direction".into()));
    }
    let scaled: Vec<f64> = wstar
        .flatten()
        .iter()
        .zip(&direction)
        .map(|(w, d)| w + d * (delta / norm))
        .collect();
    wstar.from_flat(&scaled)
}

fn ct_from_cache(
    spec: &MdpSpec,
    w: &NetworkWeights,
    star_policy: &Policy,
    cache: &mut StationaryCache,
) -> Result<f64> {
    let star_actions = match star_policy {
        Policy::Deterministic(v) => v,
        Policy::Stochastic(_) => unreachable!(),
    };
    let (actions, probs) = cache.get(spec, w)?;
    let mut mass = 0.0;
    for (s, (&a, &p)) in actions.iter().zip(&probs).enumerate() {
        if a != star_actions[s] {
            mass += p;
        }
    }
    Ok(mass)
}

#[allow(clippy::too_many_arguments)]
fn measure(
    spec: &MdpSpec,
    wstar: &NetworkWeights,
    w: &NetworkWeights,
    t: usize,
    sched: &EpsilonSchedule,
    star_policy: &Policy,
    star_probs: &[f64],
    qstar_table: &[Vec<f64>],
    cache: &mut StationaryCache,
    cfg: &TrainConfig,
    start: &Instant,
    grad_gap: Option<f64>,
) -> Result<MetricsRecord> {
    let e_t = crate::qnet::weight_distance(w, wstar, false)?;
    let e_t_aligned = crate::qnet::weight_distance(w, wstar, true)?;
    let c_t = ct_from_cache(spec, w, star_policy, cache)?;

    let mut sup_q = 0.0f64;
    for s in 0..spec.num_states() {
        for a in 0..spec.num_actions() {
            let q = q_value(w, &spec.feature_map(s, a)?)?;
            sup_q = sup_q.max((q - qstar_table[s][a]).abs());
        }
    }

    let f_pop = env::population_risk_with(spec, w, wstar, star_policy, star_probs)?;

    let per_t_c = if sched_uses_per_t_c(cfg) { Some(c_t) } else { None };
    let epsilon = sched.epsilon_at(t, Some(e_t), per_t_c)?;

    let wall_ms = if cfg.diagnostics {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    };
    Ok(MetricsRecord {
        t,
        epsilon,
        e_t,
        e_t_aligned,
        sup_q_err: sup_q,
        c_t,
        f_pop,
        grad_gap,
        wall_ms,
    })
}

fn sched_uses_per_t_c(cfg: &TrainConfig) -> bool {
    cfg.schedule.use_per_t_c
        && matches!(
            cfg.schedule.kind,
            ScheduleKind::TheoreticalOracle | ScheduleKind::TheoreticalEstimated
        )
}
