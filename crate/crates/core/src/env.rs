//! Planted finite MDP. The reward table is constructed from a known network
//! so the Bellman optimality equation holds with (numerically) zero residual,
//! which makes the ground-truth weights an exact global minimizer of the
//! training objective.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState};
use crate::qnet::{q_value, NetworkWeights};
use std::fmt::Write as _;

/// Finite MDP with per-state feature vectors in [-1,1]^d_s.
#[derive(Debug, Clone)]
pub struct MdpSpec {
    state_features: Vec<Vec<f64>>,
    num_actions: usize,
    /// transition[s][a][s'] = P(s' | s, a)
    transition: Vec<Vec<Vec<f64>>>,
    /// reward[s][a]
    reward: Vec<Vec<f64>>,
    gamma: f64,
    r_max: f64,
    deterministic: bool,
}

/// Parameters for [`plant`].
#[derive(Debug, Clone)]
pub struct PlantConfig {
    pub state_feature_dim: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub width: usize,
    pub depth: usize,
    pub gamma: f64,
    pub deterministic: bool,
}

/// Action choice per state: deterministic index or a full distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Deterministic(Vec<usize>),
    Stochastic(Vec<Vec<f64>>),
}

impl Policy {
    pub fn validate(&self, spec: &MdpSpec) -> Result<()> {
        match self {
            Policy::Deterministic(actions) => {
                if actions.len() != spec.num_states() {
                    return Err(Error::Shape("policy length != state count".into()));
                }
                if actions.iter().any(|&a| a >= spec.num_actions) {
                    return Err(Error::Index("policy action out of range".into()));
                }
            }
            Policy::Stochastic(rows) => {
                if rows.len() != spec.num_states() {
                    return Err(Error::Shape("policy length != state count".into()));
                }
                for row in rows {
                    if row.len() != spec.num_actions {
                        return Err(Error::Shape("policy row length != action count".into()));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > 1e-12 || row.iter().any(|&p| p < 0.0) {
                        return Err(Error::Parameter(format!(
                            "policy row sums to {sum}, expected 1"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn action_probability(&self, s: usize, a: usize) -> f64 {
        match self {
            Policy::Deterministic(actions) => {
                if actions[s] == a {
                    1.0
                } else {
                    0.0
                }
            }
            Policy::Stochastic(rows) => rows[s][a],
        }
    }
}

impl MdpSpec {
    pub fn num_states(&self) -> usize {
        self.state_features.len()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn deterministic(&self) -> bool {
        self.deterministic
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s][a]
    }

    pub fn reward_table(&self) -> &[Vec<f64>] {
        &self.reward
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[s][a]
    }

    pub fn state_feature(&self, s: usize) -> &[f64] {
        &self.state_features[s]
    }

    pub fn state_feature_dim(&self) -> usize {
        self.state_features.first().map_or(0, Vec::len)
    }

    /// Feature dimension seen by the network: state features plus a one-hot
    /// action block.
    pub fn feature_dim(&self) -> usize {
        self.state_feature_dim() + self.num_actions
    }

    /// Concatenation of the state feature vector and a one-hot action
    /// encoding; every entry has magnitude at most 1.
    pub fn feature_map(&self, s: usize, a: usize) -> Result<Vec<f64>> {
        if s >= self.num_states() {
            return Err(Error::Index(format!("state {s} out of {}", self.num_states())));
        }
        if a >= self.num_actions {
            return Err(Error::Index(format!("action {a} out of {}", self.num_actions)));
        }
        let mut x = Vec::with_capacity(self.feature_dim());
        x.extend_from_slice(&self.state_features[s]);
        for i in 0..self.num_actions {
            x.push(if i == a { 1.0 } else { 0.0 });
        }
        Ok(x)
    }

    /// Q(w; s, a) for every state-action pair.
    pub fn q_table(&self, w: &NetworkWeights) -> Result<Vec<Vec<f64>>> {
        let mut table = Vec::with_capacity(self.num_states());
        for s in 0..self.num_states() {
            let mut row = Vec::with_capacity(self.num_actions);
            for a in 0..self.num_actions {
                row.push(q_value(w, &self.feature_map(s, a)?)?);
            }
            table.push(row);
        }
        Ok(table)
    }

    /// Structural checks: transition rows are distributions, features are
    /// bounded, reward table matches the recorded maximum.
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Parameter(format!("gamma {} outside (0,1)", self.gamma)));
        }
        for feats in &self.state_features {
            if feats.iter().any(|v| v.abs() > 1.0 || !v.is_finite()) {
                return Err(Error::Parameter("state feature outside [-1,1]".into()));
            }
        }
        for s in 0..self.num_states() {
            for a in 0..self.num_actions {
                let row = &self.transition[s][a];
                if row.len() != self.num_states() {
                    return Err(Error::Shape("transition row length".into()));
                }
                if row.iter().any(|&p| p < 0.0) {
                    return Err(Error::Parameter("negative transition probability".into()));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::Parameter(format!(
                        "transition row ({s},{a}) sums to {sum}"
                    )));
                }
            }
        }
        let max_abs = self
            .reward
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if (max_abs - self.r_max).abs() > 1e-12 {
            return Err(Error::Parameter(format!(
                "recorded r_max {} != table max {max_abs}",
                self.r_max
            )));
        }
        Ok(())
    }

    /// JSON serialization with 17-significant-digit doubles. `meta` pairs
    /// (already rendered JSON values) are embedded first.
    pub fn to_json(&self, meta: &[(&str, String)]) -> String {
        let mut s = String::from("{");
        for (k, v) in meta {
            write!(s, "\"{k}\":{v},").unwrap();
        }
        write!(
            s,
            "\"num_states\":{},\"num_actions\":{},\"gamma\":{},\"r_max\":{},\"deterministic\":{},",
            self.num_states(),
            self.num_actions,
            crate::format_f64(self.gamma),
            crate::format_f64(self.r_max),
            self.deterministic
        )
        .unwrap();
        s.push_str("\"state_features\":");
        push_rows(&mut s, &self.state_features);
        s.push_str(",\"reward\":");
        push_rows(&mut s, &self.reward);
        s.push_str(",\"transition\":[");
        for (si, per_state) in self.transition.iter().enumerate() {
            if si > 0 {
                s.push(',');
            }
            push_rows(&mut s, per_state);
        }
        s.push_str("]}");
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct Raw {
            num_states: usize,
            num_actions: usize,
            gamma: f64,
            r_max: f64,
            deterministic: bool,
            state_features: Vec<Vec<f64>>,
            reward: Vec<Vec<f64>>,
            transition: Vec<Vec<Vec<f64>>>,
        }
        let raw: Raw = serde_json::from_str(text)
            .map_err(|e| Error::Serialization(format!("mdp spec: {e}")))?;
        if raw.state_features.len() != raw.num_states
            || raw.reward.len() != raw.num_states
            || raw.transition.len() != raw.num_states
        {
            return Err(Error::Serialization("mdp spec: inconsistent state count".into()));
        }
        let spec = MdpSpec {
            state_features: raw.state_features,
            num_actions: raw.num_actions,
            transition: raw.transition,
            reward: raw.reward,
            gamma: raw.gamma,
            r_max: raw.r_max,
            deterministic: raw.deterministic,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn push_rows(s: &mut String, rows: &[Vec<f64>]) {
    s.push('[');
    for (i, row) in rows.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push('[');
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            s.push_str(&crate::format_f64(*v));
        }
        s.push(']');
    }
    s.push(']');
}

/// Greedy max of a Q-table row with lowest-index tie-break.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// max_a Q(w; s, a) together with the greedy action. Single code path for
/// planting, data collection and target labels, so repeated evaluations are
/// bitwise identical.
pub fn q_max_action(spec: &MdpSpec, w: &NetworkWeights, s: usize) -> Result<(usize, f64)> {
    let mut best_a = 0;
    let mut best_q = f64::NEG_INFINITY;
    for a in 0..spec.num_actions() {
        let q = q_value(w, &spec.feature_map(s, a)?)?;
        if q > best_q {
            best_q = q;
            best_a = a;
        }
    }
    Ok((best_a, best_q))
}

/// Plants a realizable instance: features uniform in [-1,1]^d_s, ground
/// truth weights Gaussian with every layer rescaled to unit spectral norm,
/// Dirichlet(1,..,1) transition rows (or one successor per pair in
/// deterministic mode), and the reward reverse-engineered from the Bellman
/// equation. `r_max` is recorded from the constructed table.
pub fn plant(cfg: &PlantConfig, rng: &mut RngState) -> Result<(MdpSpec, NetworkWeights)> {
    if !(cfg.gamma > 0.0 && cfg.gamma < 1.0) {
        return Err(Error::Parameter(format!("gamma {} outside (0,1)", cfg.gamma)));
    }
    if cfg.num_states == 0 || cfg.num_actions == 0 || cfg.width == 0 || cfg.depth == 0 {
        return Err(Error::Parameter("all instance sizes must be at least 1".into()));
    }
    if cfg.state_feature_dim == 0 {
        return Err(Error::Parameter("state feature dimension must be at least 1".into()));
    }

    let state_features: Vec<Vec<f64>> = (0..cfg.num_states)
        .map(|_| (0..cfg.state_feature_dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect();

    let d = cfg.state_feature_dim + cfg.num_actions;
    let mut wstar = NetworkWeights::random(d, cfg.width, cfg.depth, rng);
    for l in 0..wstar.depth() {
        let norm = wstar.layer(l).spectral_norm();
        if norm > 0.0 {
            wstar.layer_mut(l).scale(1.0 / norm);
        }
    }

    let transition: Vec<Vec<Vec<f64>>> = (0..cfg.num_states)
        .map(|_| {
            (0..cfg.num_actions)
                .map(|_| {
                    if cfg.deterministic {
                        let mut row = vec![0.0; cfg.num_states];
                        row[rng.index(cfg.num_states)] = 1.0;
                        row
                    } else {
                        let mut row = rng.simplex(cfg.num_states);
                        let sum: f64 = row.iter().sum();
                        for p in &mut row {
                            *p /= sum;
                        }
                        row
                    }
                })
                .collect()
        })
        .collect();

    let mut spec = MdpSpec {
        state_features,
        num_actions: cfg.num_actions,
        transition,
        reward: vec![vec![0.0; cfg.num_actions]; cfg.num_states],
        gamma: cfg.gamma,
        r_max: 0.0,
        deterministic: cfg.deterministic,
    };

    let qstar = spec.q_table(&wstar)?;
    let tmax: Vec<f64> = (0..cfg.num_states)
        .map(|s| q_max_action(&spec, &wstar, s).map(|(_, q)| q))
        .collect::<Result<_>>()?;

    let mut r_max = 0.0f64;
    for s in 0..cfg.num_states {
        for a in 0..cfg.num_actions {
            let r = if cfg.deterministic {
                // The planted weights must be a bitwise fixed point of the
                // training update, so fl(r + gamma * tmax[succ]) has to hit
                // Q*(s,a) exactly. When gamma * tmax[succ] dwarfs Q*(s,a)
                // the sum lattice is too coarse to reach it; in that case
                // try other successors, preferring ones whose backup stays
                // below the target value (always exactly plantable).
                let drawn = spec.transition[s][a]
                    .iter()
                    .position(|&p| p == 1.0)
                    .expect("deterministic row has a unit entry");
                let q = qstar[s][a];
                let mut accepted = (drawn, exact_reward(q, cfg.gamma * tmax[drawn]));
                if accepted.1 + cfg.gamma * tmax[drawn] != q {
                    let mut order: Vec<usize> = (0..cfg.num_states).collect();
                    for i in (1..order.len()).rev() {
                        order.swap(i, rng.index(i + 1));
                    }
                    order.sort_by(|&x, &y| {
                        let below_x = cfg.gamma * tmax[x] <= q;
                        let below_y = cfg.gamma * tmax[y] <= q;
                        below_y.cmp(&below_x)
                    });
                    for succ in order {
                        let g = cfg.gamma * tmax[succ];
                        let r = exact_reward(q, g);
                        if r + g == q {
                            accepted = (succ, r);
                            break;
                        }
                    }
                }
                let (succ, r) = accepted;
                if succ != drawn {
                    spec.transition[s][a][drawn] = 0.0;
                    spec.transition[s][a][succ] = 1.0;
                }
                r
            } else {
                let mut expect = 0.0;
                for (s2, &p) in spec.transition[s][a].iter().enumerate() {
                    expect += p * tmax[s2];
                }
                qstar[s][a] - cfg.gamma * expect
            };
            spec.reward[s][a] = r;
            r_max = r_max.max(r.abs());
        }
    }
    spec.r_max = r_max;

    let residual = bellman_residual(&spec, &wstar)?;
    if residual > 1e-10 {
        return Err(Error::Parameter(format!("planting left Bellman residual {residual}")));
    }
    Ok((spec, wstar))
}

/// Picks r so that fl(r + g) == q exactly, making the planted weights a
/// bitwise fixed point of the training update on deterministic instances.
fn exact_reward(q: f64, g: f64) -> f64 {
    let mut r = q - g;
    for _ in 0..64 {
        let cur = r + g;
        if cur == q {
            return r;
        }
        r += q - cur;
    }
    // Compensation can stall alternating between neighbors; walk ulps.
    for _ in 0..32 {
        let cur = r + g;
        if cur == q {
            return r;
        }
        r = if cur < q { r.next_up() } else { r.next_down() };
    }
    r
}

/// max over (s,a) of |Q(w*;s,a) - r(s,a) - gamma * E_s' max_a' Q(w*;s',a')|.
pub fn bellman_residual(spec: &MdpSpec, wstar: &NetworkWeights) -> Result<f64> {
    let qstar = spec.q_table(wstar)?;
    let tmax: Vec<f64> = (0..spec.num_states())
        .map(|s| q_max_action(spec, wstar, s).map(|(_, q)| q))
        .collect::<Result<_>>()?;
    let mut worst = 0.0f64;
    for s in 0..spec.num_states() {
        for a in 0..spec.num_actions() {
            let backup = if spec.deterministic {
                let succ = spec.transition[s][a]
                    .iter()
                    .position(|&p| p == 1.0)
                    .ok_or_else(|| Error::Parameter("deterministic flag but dense row".into()))?;
                spec.reward[s][a] + spec.gamma * tmax[succ]
            } else {
                let mut expect = 0.0;
                for (s2, &p) in spec.transition[s][a].iter().enumerate() {
                    expect += p * tmax[s2];
                }
                spec.reward[s][a] + spec.gamma * expect
            };
            worst = worst.max((qstar[s][a] - backup).abs());
        }
    }
    Ok(worst)
}

/// Greedy policy of the given network: lowest-index maximizing action.
pub fn greedy_policy(spec: &MdpSpec, w: &NetworkWeights) -> Result<Policy> {
    let table = spec.q_table(w)?;
    Ok(Policy::Deterministic(table.iter().map(|row| argmax_lowest(row)).collect()))
}

/// Behavior policy that explores uniformly with probability `epsilon` and
/// otherwise follows the greedy action of `w`.
pub fn epsilon_greedy_policy(spec: &MdpSpec, w: &NetworkWeights, epsilon: f64) -> Result<Policy> {
    let greedy = match greedy_policy(spec, w)? {
        Policy::Deterministic(v) => v,
        Policy::Stochastic(_) => unreachable!(),
    };
    let na = spec.num_actions();
    let rows = greedy
        .iter()
        .map(|&ga| {
            (0..na)
                .map(|a| {
                    let explore = epsilon / na as f64;
                    if a == ga {
                        explore + (1.0 - epsilon)
                    } else {
                        explore
                    }
                })
                .collect()
        })
        .collect();
    Ok(Policy::Stochastic(rows))
}

/// Stationary distribution of the chain induced by a policy.
#[derive(Debug, Clone)]
pub struct StationaryDistribution {
    pub probs: Vec<f64>,
    /// True when plain power iteration stalled (periodic or reducible chain)
    /// and a 1e-3 uniform-restart mixing floor was applied.
    pub mixing_floor_applied: bool,
    pub iterations: usize,
}

pub const STATIONARY_TV_TOLERANCE: f64 = 1e-12;
pub const STATIONARY_MAX_ITERATIONS: usize = 1_000_000;
const MIXING_FLOOR: f64 = 1e-3;

/// State-to-state matrix of the policy-induced chain.
pub fn policy_chain(spec: &MdpSpec, policy: &Policy) -> Result<Matrix> {
    policy.validate(spec)?;
    let n = spec.num_states();
    let mut p = Matrix::zeros(n, n);
    for s in 0..n {
        for a in 0..spec.num_actions() {
            let pa = policy.action_probability(s, a);
            if pa == 0.0 {
                continue;
            }
            for (s2, &t) in spec.transition[s][a].iter().enumerate() {
                p.set(s, s2, p.at(s, s2) + pa * t);
            }
        }
    }
    Ok(p)
}

/// Power iteration to total-variation tolerance 1e-12, at most 1e6
/// iterations in total. If the plain iteration stalls (periodic or
/// reducible chain), it restarts with a 1e-3 uniform mixing floor and flags
/// that in the output.
pub fn stationary_distribution(spec: &MdpSpec, policy: &Policy) -> Result<StationaryDistribution> {
    let chain = policy_chain(spec, policy)?;
    let n = spec.num_states();
    if n == 1 {
        return Ok(StationaryDistribution {
            probs: vec![1.0],
            mixing_floor_applied: false,
            iterations: 0,
        });
    }

    let mut pi = vec![1.0 / n as f64; n];
    let mut used = 0usize;
    // Plain phase with stall detection: compare TV gaps across checkpoints.
    let checkpoint = 4096usize;
    let mut last_tv = f64::INFINITY;
    loop {
        let mut tv = 0.0;
        for _ in 0..checkpoint {
            let next = chain.tr_matvec(&pi);
            tv = 0.5 * pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum::<f64>();
            pi = next;
            used += 1;
            if tv <= STATIONARY_TV_TOLERANCE {
                normalize(&mut pi);
                return Ok(StationaryDistribution {
                    probs: pi,
                    mixing_floor_applied: false,
                    iterations: used,
                });
            }
            if used >= STATIONARY_MAX_ITERATIONS {
                return Err(Error::Convergence { tv_gap: tv, iterations: used });
            }
        }
        if tv > 0.98 * last_tv {
            // Periodic or reducible chain; fall through to the damped phase.
            break;
        }
        last_tv = tv;
    }

    // Damped chain: pi <- (1-l) * pi P + l * uniform. Aperiodic and
    // irreducible, so this always converges.
    let uniform = MIXING_FLOOR / n as f64;
    loop {
        let mut next = chain.tr_matvec(&pi);
        for v in &mut next {
            *v = (1.0 - MIXING_FLOOR) * *v + uniform;
        }
        let tv = 0.5 * pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum::<f64>();
        pi = next;
        used += 1;
        if tv <= STATIONARY_TV_TOLERANCE {
            normalize(&mut pi);
            return Ok(StationaryDistribution {
                probs: pi,
                mixing_floor_applied: true,
                iterations: used,
            });
        }
        if used >= STATIONARY_MAX_ITERATIONS {
            return Err(Error::Convergence { tv_gap: tv, iterations: used });
        }
    }
}

fn normalize(pi: &mut [f64]) {
    let sum: f64 = pi.iter().sum();
    if sum > 0.0 {
        for v in pi.iter_mut() {
            *v /= sum;
        }
    }
}

/// The optimal-policy state distribution: stationary distribution of the
/// chain induced by the greedy policy of `wstar`, with the action pinned to
/// that policy.
pub fn mu_star(spec: &MdpSpec, wstar: &NetworkWeights) -> Result<(Policy, StationaryDistribution)> {
    let pol = greedy_policy(spec, wstar)?;
    let dist = stationary_distribution(spec, &pol)?;
    Ok((pol, dist))
}

/// Population risk f(w) = E_{(s,a) ~ mu*} (Q(w;s,a) - Q(w*;s,a))^2 as an
/// exact finite weighted sum.
pub fn population_risk(spec: &MdpSpec, w: &NetworkWeights, wstar: &NetworkWeights) -> Result<f64> {
    let (pol, dist) = mu_star(spec, wstar)?;
    population_risk_with(spec, w, wstar, &pol, &dist.probs)
}

pub fn population_risk_with(
    spec: &MdpSpec,
    w: &NetworkWeights,
    wstar: &NetworkWeights,
    pol: &Policy,
    weights: &[f64],
) -> Result<f64> {
    let actions = match pol {
        Policy::Deterministic(v) => v,
        Policy::Stochastic(_) => {
            return Err(Error::Parameter("population risk needs a deterministic policy".into()))
        }
    };
    let mut acc = 0.0;
    for (s, (&a, &mass)) in actions.iter().zip(weights).enumerate() {
        if mass == 0.0 {
            continue;
        }
        let x = spec.feature_map(s, a)?;
        let diff = q_value(w, &x)? - q_value(wstar, &x)?;
        acc += mass * diff * diff;
    }
    Ok(acc)
}

/// Exact gradient of [`population_risk`]:
/// grad f(w) = 2 E_{mu*} (Q(w) - Q(w*)) grad Q(w).
pub fn population_grad(
    spec: &MdpSpec,
    w: &NetworkWeights,
    wstar: &NetworkWeights,
) -> Result<NetworkWeights> {
    let (pol, dist) = mu_star(spec, wstar)?;
    population_grad_with(spec, w, wstar, &pol, &dist.probs)
}

pub fn population_grad_with(
    spec: &MdpSpec,
    w: &NetworkWeights,
    wstar: &NetworkWeights,
    pol: &Policy,
    weights: &[f64],
) -> Result<NetworkWeights> {
    let actions = match pol {
        Policy::Deterministic(v) => v,
        Policy::Stochastic(_) => {
            return Err(Error::Parameter("population gradient needs a deterministic policy".into()))
        }
    };
    let mut grad = w.zeros_like();
    for (s, (&a, &mass)) in actions.iter().zip(weights).enumerate() {
        if mass == 0.0 {
            continue;
        }
        let x = spec.feature_map(s, a)?;
        let (q, trace) = crate::qnet::q_forward(w, &x)?;
        let diff = q - q_value(wstar, &x)?;
        if diff == 0.0 {
            continue;
        }
        let g = crate::qnet::q_grad(w, &trace)?;
        grad.add_scaled(&g, 2.0 * mass * diff)?;
    }
    Ok(grad)
}
