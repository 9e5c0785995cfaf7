//! Measurements over trained networks: policy disagreement mass, sup-Q
//! error, curvature spectra, gradient concentration, and the regression
//! fits used to summarize runs and sweeps.

use crate::env::{self, MdpSpec, Policy};
use crate::error::{Error, Result};
use crate::numerics::{fit_line, sym_eig, Matrix, RngState};
use crate::qnet::{q_forward, q_grad, q_value, NetworkWeights};
use crate::replay::ReplayBuffer;
use crate::trainer::{minibatch_gradient, TargetRule};
use serde::{Deserialize, Serialize};

/// One row of per-outer-loop measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub t: usize,
    pub epsilon: f64,
    /// Frobenius distance to the planted weights.
    pub e_t: f64,
    /// Same distance after greedy neuron alignment.
    pub e_t_aligned: f64,
    /// max over (s,a) of |Q(w) - Q(w*)|.
    pub sup_q_err: f64,
    /// Disagreement mass between the greedy and the optimal policy.
    pub c_t: f64,
    /// Population risk under the optimal-policy distribution.
    pub f_pop: f64,
    /// Buffer-vs-population gradient distance; only filled when
    /// diagnostics are enabled.
    pub grad_gap: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtWeighting {
    /// Weight states by the stationary distribution of the chain induced by
    /// the greedy policy of `w` (the behavior at exploitation time).
    Stationary,
    /// Average uniformly over states.
    Uniform,
}

/// Fraction of state mass where the greedy policy of `w` picks a different
/// action than the greedy policy of `wstar`.
pub fn compute_ct(
    spec: &MdpSpec,
    w: &NetworkWeights,
    wstar: &NetworkWeights,
    weighting: CtWeighting,
) -> Result<f64> {
    let actions = deterministic_actions(env::greedy_policy(spec, w)?);
    let star = deterministic_actions(env::greedy_policy(spec, wstar)?);
    let weights = match weighting {
        CtWeighting::Uniform => vec![1.0 / spec.num_states() as f64; spec.num_states()],
        CtWeighting::Stationary => {
            env::stationary_distribution(spec, &Policy::Deterministic(actions.clone()))?.probs
        }
    };
    Ok(disagreement_mass(&actions, &star, &weights))
}

/// Variant weighting states by their empirical frequency in a replay buffer.
pub fn compute_ct_empirical(
    spec: &MdpSpec,
    w: &NetworkWeights,
    wstar: &NetworkWeights,
    buffer: &ReplayBuffer,
) -> Result<f64> {
    let actions = deterministic_actions(env::greedy_policy(spec, w)?);
    let star = deterministic_actions(env::greedy_policy(spec, wstar)?);
    let mut weights = vec![0.0; spec.num_states()];
    let total = buffer.len() as f64;
    for t in buffer.entries() {
        weights[t.s] += 1.0 / total;
    }
    Ok(disagreement_mass(&actions, &star, &weights))
}

fn deterministic_actions(pol: Policy) -> Vec<usize> {
    match pol {
        Policy::Deterministic(v) => v,
        Policy::Stochastic(_) => unreachable!("greedy policies are deterministic"),
    }
}

fn disagreement_mass(actions: &[usize], star: &[usize], weights: &[f64]) -> f64 {
    actions
        .iter()
        .zip(star)
        .zip(weights)
        .filter(|((a, b), _)| a != b)
        .map(|(_, &w)| w)
        .sum()
}

/// Exact max over the finite state-action grid of |Q(w) - Q(w*)|.
pub fn sup_q_error(spec: &MdpSpec, w: &NetworkWeights, wstar: &NetworkWeights) -> Result<f64> {
    let mut worst = 0.0f64;
    for s in 0..spec.num_states() {
        for a in 0..spec.num_actions() {
            let x = spec.feature_map(s, a)?;
            worst = worst.max((q_value(w, &x)? - q_value(wstar, &x)?).abs());
        }
    }
    Ok(worst)
}

/// Spectrum report of the Q-gradient Gram matrix at the planted weights.
#[derive(Debug, Clone, Serialize)]
pub struct RhoReport {
    /// Smallest eigenvalue of the full stacked Gram matrix.
    pub rho: f64,
    /// Full spectrum, descending.
    pub spectrum: Vec<f64>,
    /// Smallest eigenvalue of each per-layer diagonal block.
    pub per_layer_min: Vec<f64>,
    /// Set when the Gram matrix is numerically singular (duplicate or
    /// inactive neurons, or fewer support points than parameters).
    pub degenerate: bool,
}

pub const RHO_DEGENERATE_THRESHOLD: f64 = 1e-8;

/// Weighted Gram matrix sum_i w_i g_i g_i^T.
pub fn weighted_gram(samples: &[(f64, Vec<f64>)], dim: usize) -> Matrix {
    let mut gram = Matrix::zeros(dim, dim);
    for (mass, g) in samples {
        for i in 0..dim {
            let gi = g[i];
            if gi == 0.0 {
                continue;
            }
            for j in i..dim {
                let v = gram.at(i, j) + mass * gi * g[j];
                gram.set(i, j, v);
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            gram.set(i, j, gram.at(j, i));
        }
    }
    gram
}

/// Builds the exact weighted Gram matrix E_{mu*}[grad Q (grad Q)^T] at the
/// planted weights over the finite support and returns its spectrum.
///
/// For depth >= 2 the full Gram is always singular: rescaling one layer by
/// c > 0 and a later one by 1/c leaves the network unchanged, which yields
/// an exact null direction. Strict positivity is therefore only meaningful
/// for the one-hidden-layer Gram or for the per-layer blocks, both of which
/// this report carries.
pub fn estimate_rho(spec: &MdpSpec, wstar: &NetworkWeights) -> Result<RhoReport> {
    let (pol, dist) = env::mu_star(spec, wstar)?;
    let actions = deterministic_actions(pol);
    let grads: Vec<(f64, Vec<f64>)> = actions
        .iter()
        .zip(&dist.probs)
        .enumerate()
        .filter(|(_, (_, &mass))| mass > 0.0)
        .map(|(s, (&a, &mass))| {
            let x = spec.feature_map(s, a)?;
            let (_, trace) = q_forward(wstar, &x)?;
            Ok((mass, q_grad(wstar, &trace)?.flatten()))
        })
        .collect::<Result<_>>()?;

    let n = wstar.num_params();
    let gram = weighted_gram(&grads, n);
    let eig = sym_eig(&gram)?;
    let rho = *eig.values.last().expect("nonempty spectrum");

    // Per-layer diagonal blocks.
    let mut per_layer_min = Vec::with_capacity(wstar.depth());
    let mut offset = 0;
    for l in 0..wstar.depth() {
        let len = wstar.layer(l).rows() * wstar.layer(l).cols();
        let mut block = Matrix::zeros(len, len);
        for i in 0..len {
            for j in 0..len {
                block.set(i, j, gram.at(offset + i, offset + j));
            }
        }
        let block_eig = sym_eig(&block)?;
        per_layer_min.push(*block_eig.values.last().expect("nonempty block spectrum"));
        offset += len;
    }

    Ok(RhoReport {
        rho,
        degenerate: rho <= RHO_DEGENERATE_THRESHOLD,
        spectrum: eig.values,
        per_layer_min,
    })
}

/// Relative pivot threshold for [`support_rank`].
pub const SUPPORT_RANK_PIVOT_TOLERANCE: f64 = 1e-7;

/// Rank of the weighted gradient matrix over the optimal-policy support,
/// computed by Gaussian elimination with partial pivoting; an independent
/// route to the question "can this support identify every weight
/// coordinate?". Returns (rank, parameter count); the Gram matrix of
/// [`estimate_rho`] is nonsingular exactly when they are equal.
///
/// Finite supports fail this easily: actions the greedy policy never takes
/// zero out their one-hot rows, neurons sharing an activation pattern are
/// locally indistinguishable, and depth >= 2 always fails because layer
/// rescaling is an exact symmetry. Instance generators screen on this.
pub fn support_rank(spec: &MdpSpec, wstar: &NetworkWeights) -> Result<(usize, usize)> {
    let (pol, dist) = env::mu_star(spec, wstar)?;
    let actions = deterministic_actions(pol);
    let n = wstar.num_params();
    let mut rows: Vec<Vec<f64>> = actions
        .iter()
        .zip(&dist.probs)
        .enumerate()
        .map(|(s, (&a, &mass))| {
            let x = spec.feature_map(s, a)?;
            let (_, trace) = q_forward(wstar, &x)?;
            let g = q_grad(wstar, &trace)?.flatten();
            Ok(g.into_iter().map(|v| v * mass.sqrt()).collect())
        })
        .collect::<Result<_>>()?;

    let nr = rows.len();
    let mut rank = 0;
    let mut first_pivot = 0.0f64;
    for col in 0..n {
        let mut best = rank;
        let mut best_abs = 0.0f64;
        for (r, row) in rows.iter().enumerate().skip(rank).take(nr - rank) {
            if row[col].abs() > best_abs {
                best_abs = row[col].abs();
                best = r;
            }
        }
        if best_abs == 0.0 {
            continue;
        }
        if first_pivot == 0.0 {
            first_pivot = best_abs;
        }
        if best_abs < SUPPORT_RANK_PIVOT_TOLERANCE * first_pivot {
            continue;
        }
        rows.swap(rank, best);
        let pivot_row = rows[rank].clone();
        for row in rows.iter_mut().skip(rank + 1) {
            let f = row[col] / pivot_row[col];
            if f != 0.0 {
                for c in col..n {
                    row[c] -= f * pivot_row[c];
                }
            }
        }
        rank += 1;
        if rank == nr.min(n) {
            break;
        }
    }
    Ok((rank, n))
}

/// Orthonormal basis of the well-conditioned subspace of the Q-gradient
/// Gram matrix at the planted weights: eigenvectors whose eigenvalue
/// exceeds `cutoff` times the largest. Perturbations inside this span are
/// the ones the optimal-policy data can actually pull back, which makes it
/// the practical version of "initialized inside the local convergence
/// region" on a finite support.
pub fn mu_star_gram_basis(
    spec: &MdpSpec,
    wstar: &NetworkWeights,
    cutoff: f64,
) -> Result<Vec<Vec<f64>>> {
    let report = estimate_rho(spec, wstar)?;
    let n = wstar.num_params();
    let lmax = report.spectrum[0].max(f64::MIN_POSITIVE);
    // Recompute eigenvectors: estimate_rho only keeps values, so rebuild.
    let (pol, dist) = env::mu_star(spec, wstar)?;
    let actions = deterministic_actions(pol);
    let grads: Vec<(f64, Vec<f64>)> = actions
        .iter()
        .zip(&dist.probs)
        .enumerate()
        .filter(|(_, (_, &mass))| mass > 0.0)
        .map(|(s, (&a, &mass))| {
            let x = spec.feature_map(s, a)?;
            let (_, trace) = q_forward(wstar, &x)?;
            Ok((mass, q_grad(wstar, &trace)?.flatten()))
        })
        .collect::<Result<_>>()?;
    let gram = weighted_gram(&grads, n);
    let eig = sym_eig(&gram)?;
    Ok((0..n)
        .filter(|&k| eig.values[k] > cutoff * lmax)
        .map(|k| (0..n).map(|i| eig.vectors.at(i, k)).collect())
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientGap {
    /// Euclidean norm of the stacked difference.
    pub total: f64,
    /// Per-layer norms of the difference.
    pub per_layer: Vec<f64>,
}

/// Distance between the buffer descent direction and the population
/// gradient at `w`: the buffer side averages (Q - y) grad Q over the whole
/// buffer with labels from `w_target`; the population side is
/// E_{mu*}[(Q(w) - Q(w*)) grad Q(w)], the realizable half of
/// [`env::population_grad`].
pub fn gradient_gap(
    spec: &MdpSpec,
    buffer: &ReplayBuffer,
    w: &NetworkWeights,
    w_target: &NetworkWeights,
    wstar: &NetworkWeights,
    rule: TargetRule,
) -> Result<GradientGap> {
    let empirical = minibatch_gradient(spec, buffer.entries(), w, w_target, rule, spec.gamma())?;
    let mut population = env::population_grad(spec, w, wstar)?;
    population.scale(0.5);
    let mut per_layer = Vec::with_capacity(w.depth());
    let mut total_sq = 0.0;
    for l in 0..w.depth() {
        let diff = empirical.layer(l).sub(population.layer(l))?;
        let sq: f64 = diff.data().iter().map(|v| v * v).sum();
        per_layer.push(sq.sqrt());
        total_sq += sq;
    }
    Ok(GradientGap { total: total_sq.sqrt(), per_layer })
}

/// Finite-difference step for Hessian blocks. The population gradient is
/// piecewise linear or quadratic along any single coordinate, so central
/// differences carry no truncation error and the step only needs to stay
/// above roundoff.
const HESSIAN_FD_STEP: f64 = 1e-8;

pub const DEFAULT_HESSIAN_PROBE_CAP: usize = 256;

/// Symmetrized central-difference Hessian block of the population risk with
/// respect to the weights of one layer.
pub fn hessian_block(
    spec: &MdpSpec,
    wstar: &NetworkWeights,
    w: &NetworkWeights,
    layer: usize,
    probe_cap: usize,
) -> Result<Matrix> {
    if layer >= w.depth() {
        return Err(Error::Index(format!("layer {layer} out of {}", w.depth())));
    }
    let n_l = w.layer(layer).rows() * w.layer(layer).cols();
    if n_l > probe_cap {
        return Err(Error::Capacity(format!(
            "layer dimension {n_l} exceeds probe cap {probe_cap}"
        )));
    }
    let (pol, dist) = env::mu_star(spec, wstar)?;

    let grad_slice = |probe: &NetworkWeights| -> Result<Vec<f64>> {
        let g = env::population_grad_with(spec, probe, wstar, &pol, &dist.probs)?;
        Ok(g.layer(layer).data().to_vec())
    };

    let columns = crate::par::map_indices(n_l, |j| -> Result<Vec<f64>> {
        let mut probe = w.clone();
        let (r, c) = (j / w.layer(layer).cols(), j % w.layer(layer).cols());
        let base = w.layer(layer).at(r, c);
        probe.layer_mut(layer).set(r, c, base + HESSIAN_FD_STEP);
        let plus = grad_slice(&probe)?;
        probe.layer_mut(layer).set(r, c, base - HESSIAN_FD_STEP);
        let minus = grad_slice(&probe)?;
        Ok(plus
            .iter()
            .zip(&minus)
            .map(|(p, m)| (p - m) / (2.0 * HESSIAN_FD_STEP))
            .collect())
    });

    let mut h = Matrix::zeros(n_l, n_l);
    for (j, col) in columns.into_iter().enumerate() {
        let col = col?;
        for (i, v) in col.into_iter().enumerate() {
            h.set(i, j, v);
        }
    }
    // Symmetrize.
    let mut sym = Matrix::zeros(n_l, n_l);
    for i in 0..n_l {
        for j in 0..n_l {
            sym.set(i, j, 0.5 * (h.at(i, j) + h.at(j, i)));
        }
    }
    Ok(sym)
}

/// Exact curvature block at the planted weights: since the residual
/// vanishes there, the Hessian reduces to the Gauss-Newton form
/// 2 E_{mu*}[grad_l Q (grad_l Q)^T]. Used as the oracle for
/// [`hessian_block`].
pub fn gauss_newton_block(spec: &MdpSpec, wstar: &NetworkWeights, layer: usize) -> Result<Matrix> {
    if layer >= wstar.depth() {
        return Err(Error::Index(format!("layer {layer} out of {}", wstar.depth())));
    }
    let (pol, dist) = env::mu_star(spec, wstar)?;
    let actions = deterministic_actions(pol);
    let n_l = wstar.layer(layer).rows() * wstar.layer(layer).cols();
    let mut block = Matrix::zeros(n_l, n_l);
    for (s, (&a, &mass)) in actions.iter().zip(&dist.probs).enumerate() {
        if mass == 0.0 {
            continue;
        }
        let x = spec.feature_map(s, a)?;
        let (_, trace) = q_forward(wstar, &x)?;
        let g = q_grad(wstar, &trace)?;
        let gl = g.layer(layer).data();
        for i in 0..n_l {
            let gi = gl[i];
            if gi == 0.0 {
                continue;
            }
            for j in i..n_l {
                let v = block.at(i, j) + 2.0 * mass * gi * gl[j];
                block.set(i, j, v);
            }
        }
    }
    for i in 0..n_l {
        for j in 0..i {
            block.set(i, j, block.at(j, i));
        }
    }
    Ok(block)
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzReport {
    /// max over samples of ||H_l(w) - H_l(w*)||_2 / ||w - w*||_F.
    pub max_ratio: f64,
    pub ratios: Vec<f64>,
    pub layer: usize,
}

/// Samples weights on annuli of the given radii around the planted weights
/// and reports the worst curvature-change-to-distance ratio.
pub fn hessian_lipschitz_ratio(
    spec: &MdpSpec,
    wstar: &NetworkWeights,
    layer: usize,
    radii: &[f64],
    directions_per_radius: usize,
    probe_cap: usize,
    rng: &mut RngState,
) -> Result<LipschitzReport> {
    if radii.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::Parameter("annulus radii must be positive".into()));
    }
    let h_star = hessian_block(spec, wstar, wstar, layer, probe_cap)?;
    let mut ratios = Vec::with_capacity(radii.len() * directions_per_radius);
    for &r in radii {
        for _ in 0..directions_per_radius {
            let mut dir =
                NetworkWeights::random(wstar.input_dim(), wstar.width(), wstar.depth(), rng);
            let norm = dir.frobenius_norm();
            dir.scale(r / norm);
            let mut w = wstar.clone();
            w.add_scaled(&dir, 1.0)?;
            let h_w = hessian_block(spec, wstar, &w, layer, probe_cap)?;
            let diff = h_w.sub(&h_star)?;
            let spectral = sym_eig(&diff)?
                .values
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            ratios.push(spectral / r);
        }
    }
    let max_ratio = ratios.iter().cloned().fold(0.0f64, f64::max);
    Ok(LipschitzReport { max_ratio, ratios, layer })
}

/// Verifies the layer-output perturbation bound for one input: the
/// activation gap at every depth is at most the spectral-norm product bound
/// times ||x||. Returns the worst (gap - bound) slack; nonpositive means
/// the bound holds.
pub fn h_bound_violation(
    w: &NetworkWeights,
    wstar: &NetworkWeights,
    x: &[f64],
) -> Result<f64> {
    if !w.same_shape(wstar) {
        return Err(Error::Shape("h_bound on mismatched networks".into()));
    }
    let (_, trace_w) = q_forward(w, x)?;
    let (_, trace_star) = q_forward(wstar, x)?;
    let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();

    let depth = w.depth();
    let norms_w: Vec<f64> = (0..depth).map(|l| w.layer(l).spectral_norm()).collect();
    let norms_star: Vec<f64> = (0..depth).map(|l| wstar.layer(l).spectral_norm()).collect();
    let layer_dists: Vec<f64> = (0..depth)
        .map(|l| w.layer(l).sub(wstar.layer(l)).map(|d| d.spectral_norm()))
        .collect::<Result<_>>()?;

    let mut worst = f64::NEG_INFINITY;
    for level in 1..=depth {
        let gap = trace_w.activations[level]
            .iter()
            .zip(&trace_star.activations[level])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        // sum_i (prod_{j>i, j<level} ||W*_j||) (prod_{j<i} ||W_j||) ||W_i - W*_i||
        let mut bound = 0.0;
        for i in 0..level {
            let mut factor = layer_dists[i];
            for &ns in &norms_star[i + 1..level] {
                factor *= ns;
            }
            for &nw in &norms_w[..i] {
                factor *= nw;
            }
            bound += factor;
        }
        worst = worst.max(gap - bound * x_norm);
    }
    Ok(worst)
}

/// Summary of one regression fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    /// The fitted quantity: a decay rate for [`fit_rate`], an exponent for
    /// the log-log fits.
    pub value: f64,
    pub intercept: f64,
    pub residual: f64,
    pub count: usize,
    pub quantity: String,
    pub window: String,
}

/// Fits log e_t against t and reports exp(slope) as the per-loop decay
/// rate. Records at the converged plateau (median of the last quarter)
/// are excluded: the floor starts at ten times the plateau and relaxes
/// stepwise (10x, 5x, 3x, 2x) until at least three points survive. If even
/// the 2x floor leaves fewer than three, the floor is dropped entirely and
/// all positive records are used, so flat series report a rate of one
/// instead of failing.
pub fn fit_rate(records: &[MetricsRecord], window: Option<(usize, usize)>) -> Result<FitReport> {
    let in_window: Vec<&MetricsRecord> = records
        .iter()
        .filter(|r| window.is_none_or(|(lo, hi)| r.t >= lo && r.t < hi))
        .collect();
    if in_window.len() < 3 {
        return Err(Error::Fit(format!("window holds {} records, need 3", in_window.len())));
    }
    let plateau = {
        let tail_len = (in_window.len() / 4).max(3).min(in_window.len());
        let mut tail: Vec<f64> =
            in_window[in_window.len() - tail_len..].iter().map(|r| r.e_t).collect();
        tail.sort_by(|a, b| a.partial_cmp(b).unwrap());
        tail[tail.len() / 2]
    };
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for multiplier in [10.0, 5.0, 3.0, 2.0] {
        let floor = multiplier * plateau;
        pts = in_window
            .iter()
            .filter(|r| r.e_t > floor)
            .map(|r| (r.t as f64, r.e_t.ln()))
            .collect();
        if pts.len() >= 3 {
            break;
        }
    }
    if pts.len() < 3 {
        pts = in_window
            .iter()
            .filter(|r| r.e_t > 0.0)
            .map(|r| (r.t as f64, r.e_t.ln()))
            .collect();
    }
    if pts.len() < 3 {
        return Err(Error::Fit(format!("{} usable records above the noise floor", pts.len())));
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let fit = fit_line(&xs, &ys)?;
    Ok(FitReport {
        value: fit.slope.exp(),
        intercept: fit.intercept,
        residual: fit.residual,
        count: pts.len(),
        quantity: "e_t decay rate per outer loop".into(),
        window: format!("t in [{}, {}]", xs[0] as usize, *xs.last().unwrap() as usize),
    })
}

/// Fits log c_t against log e_t; the slope estimates the exponent relating
/// policy disagreement to weight error.
pub fn fit_holder(records: &[MetricsRecord]) -> Result<FitReport> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.c_t > 0.0 && r.e_t > 0.0)
        .map(|r| (r.e_t.ln(), r.c_t.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::Fit(format!(
            "{} records with positive c_t and e_t, need 3",
            pts.len()
        )));
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let fit = fit_line(&xs, &ys)?;
    Ok(FitReport {
        value: fit.slope,
        intercept: fit.intercept,
        residual: fit.residual,
        count: pts.len(),
        quantity: "holder exponent of c_t vs e_t".into(),
        window: format!("{} points", pts.len()),
    })
}

/// Fits log(final error) against log N. Needs at least two distinct buffer
/// sizes; a two-point fit is the degenerate minimum and exact.
pub fn fit_sample_scaling(points: &[(f64, f64)]) -> Result<FitReport> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(n, e)| *n > 0.0 && *e > 0.0)
        .map(|&(n, e)| (n.ln(), e.ln()))
        .collect();
    let mut distinct: Vec<f64> = usable.iter().map(|p| p.0).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Fit(format!(
            "{} distinct buffer sizes, need at least 2",
            distinct.len()
        )));
    }
    let xs: Vec<f64> = usable.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = usable.iter().map(|p| p.1).collect();
    let fit = fit_line(&xs, &ys)?;
    Ok(FitReport {
        value: fit.slope,
        intercept: fit.intercept,
        residual: fit.residual,
        count: usable.len(),
        quantity: "log-log slope of error vs N".into(),
        window: format!("{} buffer sizes", distinct.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{plant, PlantConfig};
    use crate::replay;

    fn instance(num_states: usize, seed: u64) -> (MdpSpec, NetworkWeights) {
        let cfg = PlantConfig {
            state_feature_dim: 3,
            num_states,
            num_actions: 3,
            width: 3,
            depth: 2,
            gamma: 0.5,
            deterministic: false,
        };
        let mut rng = RngState::seed_from_u64(seed);
        plant(&cfg, &mut rng).unwrap()
    }

    fn record(t: usize, e_t: f64, c_t: f64) -> MetricsRecord {
        MetricsRecord {
            t,
            epsilon: 0.0,
            e_t,
            e_t_aligned: e_t,
            sup_q_err: 0.0,
            c_t,
            f_pop: 0.0,
            grad_gap: None,
            wall_ms: 0.0,
        }
    }

    #[test]
    fn ct_zero_at_ground_truth() {
        let (spec, wstar) = instance(8, 1);
        assert_eq!(compute_ct(&spec, &wstar, &wstar, CtWeighting::Stationary).unwrap(), 0.0);
        assert_eq!(compute_ct(&spec, &wstar, &wstar, CtWeighting::Uniform).unwrap(), 0.0);
    }

    #[test]
    fn ct_weighted_disagreement_by_hand() {
        let actions = vec![0, 1];
        let star = vec![0, 0];
        let weights = vec![0.75, 0.25];
        assert!((disagreement_mass(&actions, &star, &weights) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn ct_single_action_always_zero() {
        let cfg = PlantConfig {
            state_feature_dim: 2,
            num_states: 6,
            num_actions: 1,
            width: 2,
            depth: 1,
            gamma: 0.5,
            deterministic: false,
        };
        let mut rng = RngState::seed_from_u64(2);
        let (spec, wstar) = plant(&cfg, &mut rng).unwrap();
        let mut w = wstar.clone();
        w.layer_mut(0).scale(-0.3);
        assert_eq!(compute_ct(&spec, &w, &wstar, CtWeighting::Uniform).unwrap(), 0.0);
    }

    #[test]
    fn sup_q_error_cases() {
        let (spec, wstar) = instance(8, 3);
        assert_eq!(sup_q_error(&spec, &wstar, &wstar).unwrap(), 0.0);
        let mut w = wstar.clone();
        w.layer_mut(0).scale(1.1);
        assert!(sup_q_error(&spec, &w, &wstar).unwrap() > 0.0);
    }

    #[test]
    fn rho_positive_on_full_rank_single_layer_instance() {
        let cfg = PlantConfig {
            state_feature_dim: 4,
            num_states: 96,
            num_actions: 1,
            width: 3,
            depth: 1,
            gamma: 0.5,
            deterministic: false,
        };
        let mut found = false;
        for seed in 0..20u64 {
            let mut rng = RngState::seed_from_u64(seed);
            let (spec, wstar) = plant(&cfg, &mut rng).unwrap();
            let (rank, n) = support_rank(&spec, &wstar).unwrap();
            if rank < n {
                continue;
            }
            let report = estimate_rho(&spec, &wstar).unwrap();
            assert!(report.rho > RHO_DEGENERATE_THRESHOLD, "rho = {}", report.rho);
            assert!(!report.degenerate);
            assert!(report.spectrum.iter().all(|&v| v >= -1e-10));
            found = true;
            break;
        }
        assert!(found, "no full-rank instance among the probed seeds");
    }

    #[test]
    fn rho_full_gram_singular_for_deep_networks() {
        // Rescaling one layer up and a later one down is an exact symmetry
        // for depth >= 2, so the full Gram is singular no matter how rich
        // the support is.
        let (spec, wstar) = instance(40, 4);
        let report = estimate_rho(&spec, &wstar).unwrap();
        assert!(report.rho.abs() <= RHO_DEGENERATE_THRESHOLD, "rho = {}", report.rho);
        assert!(report.degenerate);
        assert_eq!(report.per_layer_min.len(), 2);
        let (rank, n) = support_rank(&spec, &wstar).unwrap();
        assert!(rank < n);
    }

    #[test]
    fn support_rank_agrees_with_rho_verdict() {
        // One-hidden-layer single-action instances: the elimination-based
        // rank and the eigenvalue-based verdict must agree on both sides.
        let cfg = PlantConfig {
            state_feature_dim: 4,
            num_states: 96,
            num_actions: 1,
            width: 3,
            depth: 1,
            gamma: 0.5,
            deterministic: false,
        };
        let mut full = 0;
        let mut deficient = 0;
        for seed in 0..30u64 {
            let mut rng = RngState::seed_from_u64(seed);
            let (spec, wstar) = plant(&cfg, &mut rng).unwrap();
            let (rank, n) = support_rank(&spec, &wstar).unwrap();
            let report = estimate_rho(&spec, &wstar).unwrap();
            if rank == n {
                full += 1;
                assert!(report.rho > RHO_DEGENERATE_THRESHOLD, "seed {seed}: rho {}", report.rho);
            } else {
                deficient += 1;
                assert!(report.rho <= RHO_DEGENERATE_THRESHOLD, "seed {seed}: rho {}", report.rho);
            }
        }
        assert!(full >= 15, "expected mostly full-rank draws, got {full}/{}", full + deficient);
    }

    #[test]
    fn weighted_gram_hand_example() {
        // Width-1 single layer, w = [1, 0]: both inputs are active, so the
        // gradients are the inputs themselves and the Gram is I/2.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let samples = vec![(0.5, vec![s, s]), (0.5, vec![s, -s])];
        let gram = weighted_gram(&samples, 2);
        let eig = sym_eig(&gram).unwrap();
        assert!((eig.values[0] - 0.5).abs() < 1e-12);
        assert!((eig.values[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rho_zero_for_duplicate_neurons() {
        let cfg = PlantConfig {
            state_feature_dim: 3,
            num_states: 30,
            num_actions: 3,
            width: 3,
            depth: 1,
            gamma: 0.5,
            deterministic: false,
        };
        let mut rng = RngState::seed_from_u64(5);
        let (mut spec, mut wstar) = plant(&cfg, &mut rng).unwrap();
        // Duplicate column 1 into column 2.
        for i in 0..wstar.layer(0).rows() {
            let v = wstar.layer(0).at(i, 1);
            wstar.layer_mut(0).set(i, 2, v);
        }
        // Re-plant the reward so the instance stays realizable.
        let tmax: Vec<f64> = (0..spec.num_states())
            .map(|s| env::q_max_action(&spec, &wstar, s).unwrap().1)
            .collect();
        let qstar = spec.q_table(&wstar).unwrap();
        for s in 0..spec.num_states() {
            for a in 0..spec.num_actions() {
                let mut expect = 0.0;
                for (s2, &p) in spec.transition_row(s, a).iter().enumerate() {
                    expect += p * tmax[s2];
                }
                let r = qstar[s][a] - 0.5 * expect;
                set_reward(&mut spec, s, a, r);
            }
        }
        let report = estimate_rho(&spec, &wstar).unwrap();
        assert!(report.rho <= RHO_DEGENERATE_THRESHOLD, "rho = {}", report.rho);
        assert!(report.degenerate);
    }

    fn set_reward(spec: &mut MdpSpec, s: usize, a: usize, r: f64) {
        // Round-trip through JSON to rebuild with the edited reward table;
        // keeps MdpSpec fields private outside env.
        let mut text = spec.to_json(&[]);
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mut raw = parsed;
        raw["reward"][s][a] = serde_json::json!(r);
        let mut max_abs = 0.0f64;
        for row in raw["reward"].as_array().unwrap() {
            for v in row.as_array().unwrap() {
                max_abs = max_abs.max(v.as_f64().unwrap().abs());
            }
        }
        raw["r_max"] = serde_json::json!(max_abs);
        text = raw.to_string();
        *spec = MdpSpec::from_json(&text).unwrap();
    }

    #[test]
    fn gradient_gap_zero_at_fixed_point() {
        let cfg = PlantConfig {
            state_feature_dim: 3,
            num_states: 10,
            num_actions: 3,
            width: 3,
            depth: 2,
            gamma: 0.5,
            deterministic: true,
        };
        let mut rng = RngState::seed_from_u64(6);
        let (spec, wstar) = plant(&cfg, &mut rng).unwrap();
        let mut collect_rng = RngState::seed_from_u64(7);
        let buf = replay::collect(&spec, &wstar, 0.0, 128, 10, &mut collect_rng).unwrap();
        let gap = gradient_gap(&spec, &buf, &wstar, &wstar, &wstar, TargetRule::Dqn).unwrap();
        assert_eq!(gap.total, 0.0);
    }

    #[test]
    fn hessian_block_matches_gauss_newton_at_wstar() {
        let (spec, wstar) = instance(20, 8);
        for layer in 0..wstar.depth() {
            let fd = hessian_block(&spec, &wstar, &wstar, layer, 256).unwrap();
            let gn = gauss_newton_block(&spec, &wstar, layer).unwrap();
            let diff = fd.sub(&gn).unwrap().frobenius_norm();
            let scale = gn.frobenius_norm().max(1e-12);
            assert!(diff <= 1e-3 * scale, "layer {layer}: rel err {}", diff / scale);
        }
    }

    #[test]
    fn hessian_zero_for_zero_network() {
        let (spec, wstar) = instance(8, 9);
        // All-zero weights leave every neuron inactive in a neighborhood,
        // so the population gradient vanishes there and the block is zero.
        let zero = wstar.zeros_like();
        let block = hessian_block(&spec, &wstar, &zero, 0, 256).unwrap();
        assert_eq!(block.frobenius_norm(), 0.0);
    }

    #[test]
    fn hessian_probe_cap_enforced() {
        let (spec, wstar) = instance(8, 10);
        assert!(matches!(
            hessian_block(&spec, &wstar, &wstar, 0, 4),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn h_bound_holds_near_wstar() {
        let (spec, wstar) = instance(8, 11);
        let mut rng = RngState::seed_from_u64(12);
        for _ in 0..20 {
            let mut dir = NetworkWeights::random(
                wstar.input_dim(),
                wstar.width(),
                wstar.depth(),
                &mut rng,
            );
            let norm = dir.frobenius_norm();
            dir.scale(0.2 / norm);
            let mut w = wstar.clone();
            w.add_scaled(&dir, 1.0).unwrap();
            for s in 0..spec.num_states() {
                for a in 0..spec.num_actions() {
                    let x = spec.feature_map(s, a).unwrap();
                    let slack = h_bound_violation(&w, &wstar, &x).unwrap();
                    assert!(slack <= 0.0, "bound violated by {slack}");
                }
            }
        }
    }

    #[test]
    fn fit_rate_exact_geometric() {
        let records: Vec<MetricsRecord> =
            (0..12).map(|t| record(t, 0.8f64.powi(t as i32), 0.0)).collect();
        let fit = fit_rate(&records, None).unwrap();
        assert!((fit.value - 0.8).abs() < 1e-9, "rate {}", fit.value);
    }

    #[test]
    fn fit_rate_flat_is_one() {
        let records: Vec<MetricsRecord> = (0..8).map(|t| record(t, 0.3, 0.0)).collect();
        let fit = fit_rate(&records, None).unwrap();
        assert!((fit.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_rate_noisy_geometric() {
        let mut rng = RngState::seed_from_u64(13);
        let records: Vec<MetricsRecord> = (0..40)
            .map(|t| record(t, 0.5 * 0.9f64.powi(t as i32) + 1e-6 * rng.next_f64(), 0.0))
            .collect();
        let fit = fit_rate(&records, None).unwrap();
        assert!(fit.value > 0.89 && fit.value < 0.91, "rate {}", fit.value);
    }

    #[test]
    fn fit_rate_scale_equivariant() {
        let records: Vec<MetricsRecord> =
            (0..10).map(|t| record(t, 0.7f64.powi(t as i32), 0.0)).collect();
        let scaled: Vec<MetricsRecord> =
            records.iter().map(|r| record(r.t, 1234.5 * r.e_t, 0.0)).collect();
        let a = fit_rate(&records, None).unwrap();
        let b = fit_rate(&scaled, None).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn fit_holder_power_laws() {
        let records: Vec<MetricsRecord> = (1..10)
            .map(|t| {
                let e = 0.8f64.powi(t);
                record(t as usize, e, e)
            })
            .collect();
        assert!((fit_holder(&records).unwrap().value - 1.0).abs() < 1e-9);

        let sqrt_records: Vec<MetricsRecord> = (1..10)
            .map(|t| {
                let e = 0.8f64.powi(t);
                record(t as usize, e, e.sqrt())
            })
            .collect();
        assert!((fit_holder(&sqrt_records).unwrap().value - 0.5).abs() < 1e-9);
    }

    #[test]
    fn fit_holder_noisy_exponent() {
        let mut rng = RngState::seed_from_u64(14);
        let records: Vec<MetricsRecord> = (1..40)
            .map(|t| {
                let e = 0.85f64.powi(t);
                let c = (2.0 * e.powf(0.7) * (1.0 + 0.02 * (rng.next_f64() - 0.5))).min(1.0);
                record(t as usize, e, c)
            })
            .collect();
        let fit = fit_holder(&records).unwrap();
        assert!(fit.value > 0.6 && fit.value < 0.8, "alpha {}", fit.value);
    }

    #[test]
    fn fit_holder_needs_positive_pairs() {
        let records: Vec<MetricsRecord> = (0..6).map(|t| record(t, 0.5, 0.0)).collect();
        assert!(matches!(fit_holder(&records), Err(Error::Fit(_))));
    }

    #[test]
    fn fit_sample_scaling_cases() {
        // exact inverse square root
        let pts: Vec<(f64, f64)> =
            [512.0, 2048.0, 8192.0].iter().map(|&n: &f64| (n, 3.0 / n.sqrt())).collect();
        let fit = fit_sample_scaling(&pts).unwrap();
        assert!((fit.value + 0.5).abs() < 1e-9);
        // flat
        let flat: Vec<(f64, f64)> = [512.0, 2048.0, 8192.0].iter().map(|&n| (n, 0.25)).collect();
        assert!(fit_sample_scaling(&flat).unwrap().value.abs() < 1e-12);
        // two-point hand value
        let two = [(100.0, 0.1), (400.0, 0.05)];
        assert!((fit_sample_scaling(&two).unwrap().value + 0.5).abs() < 1e-12);
        // single N rejected
        assert!(matches!(
            fit_sample_scaling(&[(100.0, 0.1), (100.0, 0.2)]),
            Err(Error::Fit(_))
        ));
    }
}
