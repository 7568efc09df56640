//! Logits self-correction: a layer-weighted cosine classifier over stored
//! anchor stacks, added to the zero-shot probabilities.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TcaError};
use crate::kernels::{cosine_or_zero, Matrix};
use crate::num::Scalar;
use crate::reservoir::Reservoir;

/// Which end of the network the layer weights favour as `beta` shrinks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `w_l ∝ exp(l / beta)`.
    Deep,
    /// `w_l ∝ exp(-l / beta)`.
    #[default]
    Shallow,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Deep => "deep",
            Direction::Shallow => "shallow",
        })
    }
}

impl FromStr for Direction {
    type Err = TcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "deep" => Ok(Direction::Deep),
            "shallow" => Ok(Direction::Shallow),
            other => Err(TcaError::Config(format!("unknown layer direction {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionConfig {
    pub lambda: f64,
    pub beta: f64,
    pub direction: Direction,
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(TcaError::Config(format!("lambda {} must be nonnegative", self.lambda)));
        }
        if !(self.beta > 0.0) {
            return Err(TcaError::Config(format!("beta {} must be positive", self.beta)));
        }
        Ok(())
    }
}

/// Normalized layer weights, one per block, summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights(pub Vec<f64>);

/// `w_l ∝ exp(±l / beta)` for `l = 1..=layers`, normalized. The largest
/// exponent is subtracted first so tiny `beta` cannot overflow.
pub fn layer_weights(beta: f64, layers: usize, direction: Direction) -> LayerWeights {
    let sign = match direction {
        Direction::Deep => 1.0,
        Direction::Shallow => -1.0,
    };
    let expo: Vec<f64> = (1..=layers).map(|l| sign * l as f64 / beta).collect();
    let max = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = expo.iter().map(|e| (e - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    LayerWeights(w.into_iter().map(|v| v / sum).collect())
}

/// Per-class layer-weighted cosine between the sample's anchor stack and the
/// stored stacks, averaged over each buffer; zero for empty buffers.
pub fn token_level_probs<T: Scalar>(
    anchor_stack: &Matrix<T>,
    reservoir: &Reservoir<T>,
    weights: &LayerWeights,
) -> Vec<f64> {
    (0..reservoir.classes())
        .map(|c| {
            let buf = reservoir.buffer(c);
            if buf.is_empty() {
                return 0.0;
            }
            let total: f64 = buf
                .iter()
                .map(|r| {
                    weights
                        .0
                        .iter()
                        .enumerate()
                        .map(|(l, w)| w * cosine_or_zero(anchor_stack.row(l), r.anchor_stack.row(l)))
                        .sum::<f64>()
                })
                .sum();
            total / buf.len() as f64
        })
        .collect()
}

/// `p + lambda · p_token`, not renormalized.
pub fn correct(p: &[f64], p_token: &[f64], lambda: f64) -> Vec<f64> {
    p.iter().zip(p_token).map(|(a, b)| a + lambda * b).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::argmax;
    use crate::reservoir::{AnchorRecord, Strategy};

    #[test]
    fn weights_limits_and_symmetry() {
        let w = layer_weights(1e6, 12, Direction::Deep);
        for v in &w.0 {
            assert!((v - 1.0 / 12.0).abs() < 1e-6);
        }
        let w = layer_weights(0.05, 12, Direction::Deep);
        assert!(w.0[11] > 1.0 - 1e-8);
        assert!(w.0.windows(2).all(|p| p[0] <= p[1]));
        let mut s = layer_weights(0.7, 12, Direction::Shallow).0;
        s.reverse();
        let d = layer_weights(0.7, 12, Direction::Deep).0;
        for (a, b) in s.iter().zip(&d) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn reservoir_with(stack: Matrix<f64>, classes: usize, class: usize) -> Reservoir<f64> {
        let mut r = Reservoir::new(classes, 1, Strategy::Uncertainty).unwrap();
        let mut p = vec![0.0; classes];
        p[class] = 1.0;
        r.try_admit(
            class,
            &p,
            AnchorRecord {
                entropy_key: 0.0,
                anchor_stack: stack,
                sample_seq: 0,
            },
        );
        r
    }

    #[test]
    fn token_probs_cases() {
        let stack = Matrix::from_rows(&[[1.0, 2.0], [-0.5, 3.0], [4.0, 0.1]]).unwrap();
        let w = layer_weights(0.3, 3, Direction::Shallow);
        let r = reservoir_with(stack.clone(), 2, 1);
        let p = token_level_probs(&stack, &r, &w);
        assert_eq!(p[0], 0.0);
        assert!((p[1] - 1.0).abs() < 1e-12);

        let neg = stack.map(|v| -v);
        let r = reservoir_with(neg, 2, 0);
        let p = token_level_probs(&stack, &r, &w);
        assert!((p[0] + 1.0).abs() < 1e-12);

        let empty = Reservoir::<f64>::new(3, 2, Strategy::Fifo).unwrap();
        assert_eq!(token_level_probs(&stack, &empty, &w), vec![0.0; 3]);
    }

    #[test]
    fn correction_cases() {
        let p = [0.2, 0.5, 0.3];
        assert_eq!(correct(&p, &[0.9, -0.4, 0.1], 0.0), p.to_vec());
        let u = [1.0 / 3.0; 3];
        let c = correct(&u, &[1.0, 0.0, 0.0], 2.0);
        assert_eq!(argmax(&c), Some(0));
        assert!(CorrectionConfig {
            lambda: -1.0,
            beta: 1.0,
            direction: Direction::Deep
        }
        .validate()
        .is_err());
        assert!(CorrectionConfig {
            lambda: 1.0,
            beta: 0.0,
            direction: Direction::Deep
        }
        .validate()
        .is_err());
    }
}
