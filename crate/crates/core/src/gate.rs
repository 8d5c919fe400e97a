//! Hard concrete gates: a stretched, clamped binary relaxation.
//!
//! Each gated unit carries one learnable log-alpha. During training a uniform
//! noise sample is pushed through a steepened sigmoid, stretched from
//! `(l, r) = (-0.1, 1.1)` and clamped to `[0, 1]`, which leaves finite
//! probability mass exactly at 0 and 1 while staying differentiable in
//! log-alpha. Evaluation uses the noise-free plug-in value; excision
//! thresholds the plug-in value at 0.5.

use crate::error::Result;
use crate::tensor::{sigmoid, Graph, NodeId};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stretch lower bound `l`.
pub const STRETCH_LO: f32 = -0.1;
/// Stretch upper bound `r`.
pub const STRETCH_HI: f32 = 1.1;
/// Sigmoid steepness `beta`.
pub const BETA: f32 = 2.0 / 3.0;
/// Uniform noise is clipped into `(EPS_U, 1 - EPS_U)` to keep logits finite.
pub const EPS_U: f32 = 1e-6;
/// Initial log-alpha: deterministic gate value ~0.98, so training starts from
/// an effectively unpruned model while gradients still flow.
pub const INIT_LOG_ALPHA: f32 = 2.2;
/// Deterministic-value threshold used to binarize gates for excision.
pub const BINARIZE_THRESHOLD: f32 = 0.5;

/// Learnable hard-concrete parameters for one mask family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateParams {
    /// One log-alpha per gated unit.
    pub log_alpha: Vec<f32>,
    pub stretch_lo: f32,
    pub stretch_hi: f32,
    pub beta: f32,
    /// Distinguishes this family's noise stream from others under one seed.
    pub stream: u64,
}

/// Which realization a sample holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    Stochastic,
    Deterministic,
    Binary,
}

/// One realization of a gate family.
#[derive(Debug, Clone)]
pub struct GateSample {
    pub mode: GateMode,
    pub values: Vec<f32>,
    /// Number of strictly positive values (meaningful for binary samples).
    pub retained: usize,
}

impl GateParams {
    pub fn new(n: usize, stream: u64) -> Self {
        GateParams {
            log_alpha: vec![INIT_LOG_ALPHA; n],
            stretch_lo: STRETCH_LO,
            stretch_hi: STRETCH_HI,
            beta: BETA,
            stream,
        }
    }

    pub fn len(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_alpha.is_empty()
    }

    /// Draws clipped uniform noise and returns the logit term `log(u/(1-u))`.
    pub fn sample_noise(&self, rng: &mut impl Rng) -> Vec<f32> {
        (0..self.len())
            .map(|_| {
                let u: f32 = rng.random_range(EPS_U..(1.0 - EPS_U));
                (u / (1.0 - u)).ln()
            })
            .collect()
    }

    /// RNG for this family at a given step, independent of other families.
    pub fn stream_rng(&self, seed: u64, step: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ self.stream.rotate_left(17));
        r.set_stream(step.wrapping_add(1));
        r
    }

    fn stretch_clamp(&self, s: f32) -> f32 {
        (s * (self.stretch_hi - self.stretch_lo) + self.stretch_lo).clamp(0.0, 1.0)
    }

    /// Stochastic gate values for given noise logits (pure, non-graph form).
    pub fn stochastic_values(&self, noise: &[f32]) -> Vec<f32> {
        self.log_alpha
            .iter()
            .zip(noise)
            .map(|(&la, &nl)| self.stretch_clamp(sigmoid((nl + la) / self.beta)))
            .collect()
    }

    /// Samples a stochastic gate realization.
    pub fn sample_stochastic(&self, rng: &mut impl Rng) -> GateSample {
        let noise = self.sample_noise(rng);
        let values = self.stochastic_values(&noise);
        let retained = values.iter().filter(|&&v| v > 0.0).count();
        GateSample { mode: GateMode::Stochastic, values, retained }
    }

    /// Noise-free plug-in gate values (the `u = 0.5` point estimate).
    pub fn sample_deterministic(&self) -> GateSample {
        let values: Vec<f32> =
            self.log_alpha.iter().map(|&la| self.stretch_clamp(sigmoid(la))).collect();
        let retained = values.iter().filter(|&&v| v > 0.0).count();
        GateSample { mode: GateMode::Deterministic, values, retained }
    }

    /// Thresholds the deterministic values into a 0/1 mask.
    ///
    /// Non-differentiable by contract; excision consumes the result.
    pub fn binarize(&self, threshold: f32) -> GateSample {
        let det = self.sample_deterministic();
        let values: Vec<f32> = det.values.iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect();
        let retained = values.iter().filter(|&&v| v > 0.0).count();
        GateSample { mode: GateMode::Binary, values, retained }
    }

    /// Builds the differentiable stochastic gate chain on a graph.
    ///
    /// Returns `(log_alpha leaf, gate values node)`. The noise logits enter
    /// as constants, so gradients flow only into log-alpha.
    pub fn stochastic_node(&self, g: &mut Graph, noise: &[f32]) -> Result<(NodeId, NodeId)> {
        let la = g.leaf(vec![self.len()], self.log_alpha.clone(), true)?;
        let nz = g.leaf(vec![self.len()], noise.to_vec(), false)?;
        let pre = g.add(la, nz)?;
        let scaled = g.affine(pre, 1.0 / self.beta, 0.0)?;
        let s = g.sigmoid(scaled)?;
        let stretched = g.affine(s, self.stretch_hi - self.stretch_lo, self.stretch_lo)?;
        let z = g.clamp(stretched, 0.0, 1.0)?;
        Ok((la, z))
    }
}

/// Mean gate value under the stochastic distribution, by quadrature over u.
///
/// Used as an independent oracle for the empirical sampling mean.
pub fn expected_gate_value_quadrature(log_alpha: f32, n_points: usize) -> f64 {
    // Midpoint rule over u in (0,1); the integrand is bounded and piecewise
    // smooth, so midpoint converges fast enough for test tolerances.
    let mut acc = 0.0f64;
    for i in 0..n_points {
        let u = (i as f64 + 0.5) / n_points as f64;
        let logit = (u / (1.0 - u)).ln();
        let s = 1.0 / (1.0 + (-(logit + log_alpha as f64) / BETA as f64).exp());
        let stretched = s * (STRETCH_HI as f64 - STRETCH_LO as f64) + STRETCH_LO as f64;
        acc += stretched.clamp(0.0, 1.0);
    }
    acc / n_points as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn gate_with(log_alphas: &[f32]) -> GateParams {
        let mut g = GateParams::new(log_alphas.len(), 0);
        g.log_alpha.copy_from_slice(log_alphas);
        g
    }

    #[test]
    fn midpoint_noise_gives_half() {
        // u = 0.5 -> logit 0; with log_alpha = 0: s = 0.5, stretched = 0.5
        let g = gate_with(&[0.0]);
        let v = g.stochastic_values(&[0.0]);
        assert!((v[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn saturated_gates() {
        let g = gate_with(&[40.0, -40.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = g.sample_stochastic(&mut rng);
            assert_eq!(s.values[0], 1.0);
            assert_eq!(s.values[1], 0.0);
        }
        let det = g.sample_deterministic();
        assert_eq!(det.values, vec![1.0, 0.0]);
    }

    #[test]
    fn deterministic_boundary_hits_zero() {
        // sigmoid(la) = 1/12 makes the stretched value exactly 0:
        // (1/12) * 1.2 - 0.1 = 0. la = ln((1/12)/(11/12)) = -ln 11.
        let la = -(11.0f32).ln();
        let g = gate_with(&[la]);
        let det = g.sample_deterministic();
        assert!(det.values[0].abs() < 1e-6, "got {}", det.values[0]);
    }

    #[test]
    fn binarize_thresholds_deterministic_values() {
        // log-alphas whose deterministic values are ~0.0, 0.49, 0.51, 1.0
        let inv = |z: f32| -> f32 {
            // invert z = sigmoid(la)*1.2 - 0.1 on the unclamped branch
            let s = (z + 0.1) / 1.2;
            (s / (1.0 - s)).ln()
        };
        let g = gate_with(&[-40.0, inv(0.49), inv(0.51), 40.0]);
        let b = g.binarize(BINARIZE_THRESHOLD);
        assert_eq!(b.values, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(b.retained, 2);
        assert_eq!(b.mode, GateMode::Binary);
    }

    #[test]
    fn all_zero_binary_mask_is_representable() {
        let g = gate_with(&[-40.0; 8]);
        let b = g.binarize(BINARIZE_THRESHOLD);
        assert_eq!(b.retained, 0);
        assert!(b.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn monotone_in_log_alpha_for_fixed_noise() {
        let noise = [-1.7f32, -0.3, 0.0, 0.9, 2.4];
        for &nl in &noise {
            let mut prev = -1.0f32;
            let mut la = -12.0f32;
            while la <= 12.0 {
                let g = gate_with(&[la]);
                let v = g.stochastic_values(&[nl])[0];
                assert!(v >= prev - 1e-6, "not monotone at la={la}, noise={nl}");
                assert!((0.0..=1.0).contains(&v));
                prev = v;
                la += 0.25;
            }
        }
    }

    #[test]
    fn stochastic_values_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = gate_with(&[-3.0, -0.5, 0.0, 0.5, 3.0]);
        for _ in 0..200 {
            let s = g.sample_stochastic(&mut rng);
            assert!(s.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn empirical_mean_matches_quadrature() {
        let g = gate_with(&[0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let n = 100_000;
        let mut acc = 0.0f64;
        for _ in 0..n {
            acc += g.sample_stochastic(&mut rng).values[0] as f64;
        }
        let empirical = acc / n as f64;
        let oracle = expected_gate_value_quadrature(0.0, 20_000);
        assert!(
            (empirical - oracle).abs() < 0.01,
            "empirical {empirical} vs quadrature {oracle}"
        );
    }

    #[test]
    fn graph_chain_matches_pure_values() {
        let g = gate_with(&[-1.0, 0.3, 2.0]);
        let noise = [0.4f32, -0.2, 1.0];
        let mut graph = Graph::new();
        let (_, z) = g.stochastic_node(&mut graph, &noise).unwrap();
        let pure = g.stochastic_values(&noise);
        for (a, b) in graph.value(z).iter().zip(&pure) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_matches_finite_difference_fixed_noise() {
        use crate::tensor::gradcheck::{central_diff, rel_err};
        let noise = [0.23f32, -0.8, 0.55];
        let f = |inputs: &[Vec<f32>]| -> f32 {
            let g = gate_with(&inputs[0]);
            let vals = g.stochastic_values(&noise);
            vals.iter().sum::<f32>() / vals.len() as f32
        };
        // points chosen so the stretched value stays inside the linear region
        let las = vec![vec![-0.6f32, 0.2, 0.8]];
        let mut graph = Graph::new();
        let gp = gate_with(&las[0]);
        let (la_node, z) = gp.stochastic_node(&mut graph, &noise).unwrap();
        let mean = {
            let s = graph.sum(z).unwrap();
            graph.affine(s, 1.0 / 3.0, 0.0).unwrap()
        };
        graph.backward(mean).unwrap();
        let analytic = graph.grad(la_node).unwrap().to_vec();
        for i in 0..3 {
            let fd = central_diff(&f, &las, 0, i, 1e-3);
            assert!(
                rel_err(analytic[i], fd) <= 1e-3,
                "gate grad {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }
}
