//! The L-hidden-layer ReLU Q-network: forward evaluation with per-layer
//! activations, analytic backpropagation, and distances between weight
//! configurations.
//!
//! The network has no bias terms. The scalar output is the average of the
//! last hidden layer after ReLU: q = (1/K) * sum_k relu(w_{L,k}^T h^(L)).
//! The ReLU subgradient at zero is taken to be 0, so an inactive neuron
//! contributes nothing to the gradient and evaluation is deterministic.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState};
use serde::Deserialize;
use std::fmt::Write as _;

/// Per-layer weight matrices. `layers[0]` is d x K, all later layers K x K.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    input_dim: usize,
    width: usize,
    layers: Vec<Matrix>,
}

impl NetworkWeights {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        let input_dim = layers[0].rows();
        let width = layers[0].cols();
        if input_dim == 0 || width == 0 {
            return Err(Error::Shape("layer dimensions must be positive".into()));
        }
        for (l, m) in layers.iter().enumerate().skip(1) {
            if m.rows() != width || m.cols() != width {
                return Err(Error::Shape(format!(
                    "layer {l} is {}x{}, expected {width}x{width}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        Ok(NetworkWeights { input_dim, width, layers })
    }

    /// Gaussian-initialized network, mainly for tests.
    pub fn random(input_dim: usize, width: usize, depth: usize, rng: &mut RngState) -> Self {
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let rows = if l == 0 { input_dim } else { width };
            let mut m = Matrix::zeros(rows, width);
            for i in 0..rows {
                for j in 0..width {
                    m.set(i, j, rng.normal());
                }
            }
            layers.push(m);
        }
        NetworkWeights::new(layers).expect("constructed shapes are consistent")
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &Matrix {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut Matrix {
        &mut self.layers[l]
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|m| m.rows() * m.cols()).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.input_dim == other.input_dim
            && self.width == other.width
            && self.layers.len() == other.layers.len()
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self.layers.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        NetworkWeights { input_dim: self.input_dim, width: self.width, layers }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|m| m.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(Matrix::all_finite)
    }

    /// self += c * other, layer by layer.
    pub fn add_scaled(&mut self, other: &Self, c: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape("add_scaled on mismatched networks".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_scaled(b, c)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for m in &mut self.layers {
            m.scale(c);
        }
    }

    /// Stacked flat view of all parameters, layer by layer, row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for m in &self.layers {
            out.extend_from_slice(m.data());
        }
        out
    }

    pub fn from_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for m in &self.layers {
            let len = m.rows() * m.cols();
            layers.push(Matrix::new(m.rows(), m.cols(), flat[offset..offset + len].to_vec())?);
            offset += len;
        }
        NetworkWeights::new(layers)
    }

    /// JSON object {"d":..,"K":..,"L":..,"layers":[row-major arrays]} with
    /// every double printed to 17 significant digits, so decimal round-trips
    /// are bit-exact.
    pub fn to_json(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{{\"d\":{},\"K\":{},\"L\":{},\"layers\":[",
            self.input_dim,
            self.width,
            self.layers.len()
        )
        .unwrap();
        for (l, m) in self.layers.iter().enumerate() {
            if l > 0 {
                s.push(',');
            }
            s.push('[');
            for (i, v) in m.data().iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                write!(s, "{}", crate::format_f64(*v)).unwrap();
            }
            s.push(']');
        }
        s.push_str("]}");
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            d: usize,
            #[serde(rename = "K")]
            width: usize,
            #[serde(rename = "L")]
            depth: usize,
            layers: Vec<Vec<f64>>,
        }
        let raw: Raw = serde_json::from_str(text)
            .map_err(|e| Error::Serialization(format!("network weights: {e}")))?;
        if raw.layers.len() != raw.depth {
            return Err(Error::Serialization(format!(
                "expected {} layers, got {}",
                raw.depth,
                raw.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(raw.depth);
        for (l, data) in raw.layers.into_iter().enumerate() {
            let rows = if l == 0 { raw.d } else { raw.width };
            layers.push(Matrix::new(rows, raw.width, data)?);
        }
        NetworkWeights::new(layers)
    }
}

/// Post-activation vectors of one forward pass: `activations[0]` is the
/// input x, `activations[l]` for l >= 1 is the ReLU output of layer l.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }
}

/// Forward pass returning the scalar Q-value and the full trace.
pub fn q_forward(w: &NetworkWeights, x: &[f64]) -> Result<(f64, ForwardTrace)> {
    if x.len() != w.input_dim {
        return Err(Error::Shape(format!(
            "input has length {}, network expects {}",
            x.len(),
            w.input_dim
        )));
    }
    let mut activations = Vec::with_capacity(w.depth() + 1);
    activations.push(x.to_vec());
    let mut h = x.to_vec();
    for m in &w.layers {
        let mut z = m.tr_matvec(&h);
        for v in &mut z {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        activations.push(z.clone());
        h = z;
    }
    let q = h.iter().sum::<f64>() / w.width as f64;
    Ok((q, ForwardTrace { activations }))
}

/// Forward pass without keeping the trace.
pub fn q_value(w: &NetworkWeights, x: &[f64]) -> Result<f64> {
    if x.len() != w.input_dim {
        return Err(Error::Shape(format!(
            "input has length {}, network expects {}",
            x.len(),
            w.input_dim
        )));
    }
    let mut h = x.to_vec();
    for m in &w.layers {
        let mut z = m.tr_matvec(&h);
        for v in &mut z {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        h = z;
    }
    Ok(h.iter().sum::<f64>() / w.width as f64)
}

/// Analytic gradient dq/dW via backpropagation over a trace produced by
/// [`q_forward`] with the same weights. Inactive neurons (post-activation 0)
/// contribute nothing.
pub fn q_grad(w: &NetworkWeights, trace: &ForwardTrace) -> Result<NetworkWeights> {
    let depth = w.depth();
    if trace.activations.len() != depth + 1 {
        return Err(Error::Shape(format!(
            "trace has {} activation levels, network depth is {depth}",
            trace.activations.len()
        )));
    }
    for (l, m) in w.layers.iter().enumerate() {
        if trace.activations[l].len() != m.rows() || trace.activations[l + 1].len() != m.cols() {
            return Err(Error::Shape(format!("trace level {l} does not match layer shape")));
        }
    }

    let k = w.width as f64;
    // delta[l] = dq/dz_l where z_l is the pre-activation of layer l.
    // Post-activation h > 0 iff z > 0, so the trace determines relu'.
    let mut grads = vec![Matrix::zeros(0, 0); depth];
    let mut delta: Vec<f64> = trace.activations[depth]
        .iter()
        .map(|&h| if h > 0.0 { 1.0 / k } else { 0.0 })
        .collect();
    for l in (0..depth).rev() {
        let h_in = &trace.activations[l];
        let mut g = Matrix::zeros(w.layers[l].rows(), w.layers[l].cols());
        for (i, &hi) in h_in.iter().enumerate() {
            if hi == 0.0 {
                continue;
            }
            for (j, &dj) in delta.iter().enumerate() {
                g.set(i, j, hi * dj);
            }
        }
        grads[l] = g;
        if l > 0 {
            let back = w.layers[l].matvec(&delta);
            delta = trace.activations[l]
                .iter()
                .zip(back)
                .map(|(&h, b)| if h > 0.0 { b } else { 0.0 })
                .collect();
        }
    }
    NetworkWeights::new(grads)
}

/// Frobenius distance between two weight configurations.
///
/// With `aligned = false` this is the plain stacked Frobenius norm of the
/// difference. With `aligned = true` a greedy layer-by-layer neuron
/// permutation (columns of layer l, correspondingly rows of layer l+1) is
/// searched first; the result never exceeds the unaligned distance. The
/// aligned variant is diagnostic only; the output head averages uniformly,
/// so permuted networks compute the same function.
pub fn weight_distance(a: &NetworkWeights, b: &NetworkWeights, aligned: bool) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape("weight_distance on mismatched networks".into()));
    }
    let mut unaligned_sq = 0.0;
    for (ma, mb) in a.layers.iter().zip(&b.layers) {
        unaligned_sq += ma.sub(mb)?.data().iter().map(|v| v * v).sum::<f64>();
    }
    let unaligned = unaligned_sq.sqrt();
    if !aligned {
        return Ok(unaligned);
    }

    let width = a.width;
    // row_perm[r] = which a-row corresponds to b-row r in the current layer.
    let mut row_perm: Vec<usize> = (0..a.input_dim).collect();
    let mut total_sq = 0.0;
    for (l, (ma, mb)) in a.layers.iter().zip(&b.layers).enumerate() {
        // cost[i][j]: squared distance between a-column i (rows reindexed)
        // and b-column j.
        let mut cost = vec![vec![0.0f64; width]; width];
        for i in 0..width {
            for (j, c) in cost[i].iter_mut().enumerate() {
                let mut acc = 0.0;
                for r in 0..mb.rows() {
                    let d = ma.at(row_perm[r], i) - mb.at(r, j);
                    acc += d * d;
                }
                *c = acc;
            }
        }
        // Greedy matching: repeatedly take the cheapest unmatched pair.
        let mut a_used = vec![false; width];
        let mut b_used = vec![false; width];
        let mut sigma = vec![0usize; width]; // b-column j -> a-column
        for _ in 0..width {
            let mut best = (usize::MAX, usize::MAX, f64::INFINITY);
            for i in 0..width {
                if a_used[i] {
                    continue;
                }
                for j in 0..width {
                    if b_used[j] {
                        continue;
                    }
                    if cost[i][j] < best.2 {
                        best = (i, j, cost[i][j]);
                    }
                }
            }
            let (i, j, c) = best;
            a_used[i] = true;
            b_used[j] = true;
            sigma[j] = i;
            total_sq += c;
        }
        let _ = l;
        row_perm = sigma;
    }
    Ok(total_sq.sqrt().min(unaligned))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn simple_net() -> NetworkWeights {
        // L=1, K=2, columns w1=[1,0], w2=[-1,0]
        NetworkWeights::new(vec![
            Matrix::from_rows(&[vec![1.0, -1.0], vec![0.0, 0.0]]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn forward_single_layer() {
        let w = simple_net();
        let (q, trace) = q_forward(&w, &[1.0, 0.0]).unwrap();
        assert_eq!(q, 0.5);
        assert_eq!(trace.activations[1], vec![1.0, 0.0]);
    }

    #[test]
    fn forward_zero_input_is_zero() {
        let mut rng = RngState::seed_from_u64(5);
        let w = NetworkWeights::random(4, 3, 2, &mut rng);
        let (q, _) = q_forward(&w, &[0.0; 4]).unwrap();
        assert_eq!(q, 0.0);
    }

    #[test]
    fn forward_two_layer_hand_value() {
        // L=2, d=1, K=2, W1 = [1, -1], W2 = I
        let w = NetworkWeights::new(vec![
            Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap(),
            Matrix::identity(2),
        ])
        .unwrap();
        let (q, trace) = q_forward(&w, &[1.0]).unwrap();
        assert_eq!(trace.activations[1], vec![1.0, 0.0]);
        assert_eq!(q, 0.5);
    }

    #[test]
    fn forward_dimension_mismatch() {
        let w = simple_net();
        assert!(matches!(q_forward(&w, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn grad_active_inactive_split() {
        let w = simple_net();
        let (_, trace) = q_forward(&w, &[1.0, 0.0]).unwrap();
        let g = q_grad(&w, &trace).unwrap();
        assert_eq!(g.layer(0).col(0), vec![0.5, 0.0]);
        assert_eq!(g.layer(0).col(1), vec![0.0, 0.0]);
    }

    #[test]
    fn grad_zero_input_zero() {
        let mut rng = RngState::seed_from_u64(6);
        let w = NetworkWeights::random(3, 4, 2, &mut rng);
        let (_, trace) = q_forward(&w, &[0.0; 3]).unwrap();
        let g = q_grad(&w, &trace).unwrap();
        assert_eq!(g.frobenius_norm(), 0.0);
    }

    /// True when any pre-activation of the forward pass sits within `tol`
    /// of the ReLU kink, where finite differences are unreliable.
    fn near_kink(w: &NetworkWeights, x: &[f64], tol: f64) -> bool {
        let mut h = x.to_vec();
        for m in w.layers() {
            let z = m.tr_matvec(&h);
            if z.iter().any(|v| v.abs() < tol) {
                return true;
            }
            h = z.into_iter().map(|v| v.max(0.0)).collect();
        }
        false
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = RngState::seed_from_u64(99);
        let mut checked = 0;
        while checked < 120 {
            let d = 2 + rng.index(7);
            let k = 2 + rng.index(7);
            let l = 1 + rng.index(3);
            let w = NetworkWeights::random(d, k, l, &mut rng);
            let x: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
            if near_kink(&w, &x, 1e-6) {
                continue;
            }
            let (_, trace) = q_forward(&w, &x).unwrap();
            let analytic = q_grad(&w, &trace).unwrap().flatten();
            let flat = w.flatten();
            let shape = w.clone();
            let numeric = finite_diff_grad(
                |p| {
                    let net = shape.from_flat(p).unwrap();
                    q_value(&net, &x).unwrap()
                },
                &flat,
                Some(1e-6),
            )
            .unwrap();
            let scale = analytic
                .iter()
                .chain(&numeric)
                .fold(1e-12f64, |m, v| m.max(v.abs()));
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!(
                    (a - n).abs() <= 1e-5 * scale,
                    "gradient mismatch {a} vs {n} at d={d} k={k} l={l}"
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn positive_homogeneity_power_of_two_exact() {
        let mut rng = RngState::seed_from_u64(17);
        let w = NetworkWeights::random(5, 3, 2, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let q1 = q_value(&w, &x).unwrap();
        for c in [0.5f64, 2.0, 4.0, 0.25] {
            let xs: Vec<f64> = x.iter().map(|v| c * v).collect();
            let qc = q_value(&w, &xs).unwrap();
            assert_eq!(qc, c * q1, "scaling by power of two must be exact");
        }
    }

    #[test]
    fn distance_identity_and_single_entry() {
        let mut rng = RngState::seed_from_u64(8);
        let a = NetworkWeights::random(3, 3, 2, &mut rng);
        assert_eq!(weight_distance(&a, &a, false).unwrap(), 0.0);
        let mut b = a.clone();
        let old = b.layer(1).at(1, 2);
        b.layer_mut(1).set(1, 2, old + 0.3);
        let d = weight_distance(&a, &b, false).unwrap();
        assert!((d - 0.3).abs() < 1e-12);
    }

    #[test]
    fn aligned_distance_recovers_column_swap() {
        let mut rng = RngState::seed_from_u64(21);
        let a = NetworkWeights::random(4, 3, 1, &mut rng);
        // b = a with columns 0 and 2 swapped
        let ma = a.layer(0);
        let mut mb = Matrix::zeros(4, 3);
        for i in 0..4 {
            mb.set(i, 0, ma.at(i, 2));
            mb.set(i, 1, ma.at(i, 1));
            mb.set(i, 2, ma.at(i, 0));
        }
        let b = NetworkWeights::new(vec![mb]).unwrap();
        let unaligned = weight_distance(&a, &b, false).unwrap();
        let aligned = weight_distance(&a, &b, true).unwrap();
        assert!(unaligned > 0.0);
        assert!(aligned <= 1e-12);
    }

    #[test]
    fn aligned_never_exceeds_unaligned() {
        let mut rng = RngState::seed_from_u64(31);
        for _ in 0..50 {
            let d = 2 + rng.index(4);
            let k = 2 + rng.index(4);
            let l = 1 + rng.index(3);
            let a = NetworkWeights::random(d, k, l, &mut rng);
            let b = NetworkWeights::random(d, k, l, &mut rng);
            let u = weight_distance(&a, &b, false).unwrap();
            let al = weight_distance(&a, &b, true).unwrap();
            assert!(al <= u + 1e-12);
        }
    }

    #[test]
    fn json_round_trip_bit_exact() {
        let mut rng = RngState::seed_from_u64(77);
        let w = NetworkWeights::random(4, 3, 2, &mut rng);
        let text = w.to_json();
        let back = NetworkWeights::from_json(&text).unwrap();
        assert_eq!(w, back);
        assert_eq!(text, back.to_json());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// No bias terms anywhere, so the network is positively
            /// homogeneous in its input.
            #[test]
            fn positive_homogeneity(seed in 0u64..500, c in 1e-3f64..1e3) {
                let mut rng = RngState::seed_from_u64(seed);
                let d = 2 + rng.index(5);
                let k = 2 + rng.index(5);
                let l = 1 + rng.index(2);
                let w = NetworkWeights::random(d, k, l, &mut rng);
                let x: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
                let q = q_value(&w, &x).unwrap();
                let xs: Vec<f64> = x.iter().map(|v| c * v).collect();
                let qc = q_value(&w, &xs).unwrap();
                let scale = (c * q).abs().max(1e-12);
                prop_assert!((qc - c * q).abs() <= 1e-12 * scale);
            }

            #[test]
            fn aligned_distance_never_exceeds_unaligned(seed in 0u64..500) {
                let mut rng = RngState::seed_from_u64(seed);
                let d = 2 + rng.index(4);
                let k = 2 + rng.index(4);
                let l = 1 + rng.index(3);
                let a = NetworkWeights::random(d, k, l, &mut rng);
                let b = NetworkWeights::random(d, k, l, &mut rng);
                let unaligned = weight_distance(&a, &b, false).unwrap();
                let aligned = weight_distance(&a, &b, true).unwrap();
                prop_assert!(aligned <= unaligned + 1e-12);
            }

            /// Serialized weights decode to the identical bit pattern.
            #[test]
            fn json_round_trip(seed in 0u64..500) {
                let mut rng = RngState::seed_from_u64(seed);
                let d = 1 + rng.index(5);
                let k = 1 + rng.index(5);
                let l = 1 + rng.index(3);
                let w = NetworkWeights::random(d, k, l, &mut rng);
                let back = NetworkWeights::from_json(&w.to_json()).unwrap();
                prop_assert_eq!(w, back);
            }
        }
    }
}
