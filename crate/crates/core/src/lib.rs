//! Deterministic laboratory for deep Q-learning dynamics on planted finite
//! MDPs.
//!
//! A known ReLU network is planted as the optimal Q-function of a synthetic
//! MDP by reverse-engineering the reward table from the Bellman equation.
//! The trainer then runs the classic outer/inner loop (frozen target
//! network, epsilon-greedy replay collection, heavy-ball mini-batch
//! descent) against that ground truth, and the analysis layer measures
//! recovery error, policy disagreement, curvature spectra and gradient
//! concentration against their predicted behavior.
//!
//! Everything is reproducible: all randomness flows through the pinned
//! [`numerics::RngState`] generator and identical seeds give identical
//! outputs.

pub mod analysis;
pub mod env;
pub mod error;
pub mod numerics;
pub mod par;
pub mod qnet;
pub mod replay;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};

/// Formats a double with 17 significant digits, enough for an exact decimal
/// round-trip of any f64. Used for every float that lands in an output file.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    #[test]
    fn format_round_trips_bit_exactly() {
        let values = [
            0.0,
            1.0,
            -1.0,
            0.1,
            std::f64::consts::PI,
            1e-300,
            -3.647368e17,
            f64::MIN_POSITIVE,
        ];
        for &v in &values {
            let parsed: f64 = super::format_f64(v).parse().unwrap();
            assert_eq!(parsed.to_bits(), v.to_bits());
        }
    }
}
