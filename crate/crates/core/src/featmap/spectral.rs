//! Spectral-norm estimation by persistent power iteration.
//!
//! Each weight keeps its own left singular vector `u` across calls; one call
//! performs exactly one power-iteration update and returns
//! `W · min(1, 1/σ̂)`. The right vector `v` is cached alongside `u` so that
//! `σ̂ = uᵀ W v` can be re-evaluated (and differentiated) while the state is
//! frozen.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{serde_vector, standard_normal_vector, Matrix, Vector};

const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerIteration {
    #[serde(with = "serde_vector")]
    pub u: Vector,
    #[serde(with = "serde_vector")]
    pub v: Vector,
    /// Seed for deterministic re-randomization of a degenerate `u`.
    pub seed: u64,
    /// Number of re-randomizations so far; advances the reseed stream.
    pub reseeds: u64,
}

impl PowerIteration {
    pub fn new(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = unit_or_first_axis(standard_normal_vector(&mut rng, rows));
        let v = unit_or_first_axis(standard_normal_vector(&mut rng, cols));
        Self {
            u,
            v,
            seed,
            reseeds: 0,
        }
    }

    /// One power-iteration update: `v ← Wᵀu/‖Wᵀu‖`, `u ← Wv/‖Wv‖`.
    ///
    /// A zero matrix leaves the state untouched.
    pub fn step(&mut self, w: &Matrix) {
        if w.iter().all(|&x| x == 0.0) {
            return;
        }
        for _ in 0..8 {
            let wt_u = w.tr_mul(&self.u);
            let n = wt_u.norm();
            if n > DEGENERATE_NORM {
                self.v = wt_u / n;
                let wv = w * &self.v;
                let m = wv.norm();
                if m > DEGENERATE_NORM {
                    self.u = wv / m;
                    return;
                }
            }
            self.reseed();
        }
    }

    fn reseed(&mut self) {
        self.reseeds += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.reseeds);
        self.u = unit_or_first_axis(standard_normal_vector(&mut rng, self.u.len()));
    }

    /// `σ̂ = uᵀ W v` under the current (frozen) state.
    pub fn sigma(&self, w: &Matrix) -> f64 {
        self.u.dot(&(w * &self.v))
    }
}

fn unit_or_first_axis(v: Vector) -> Vector {
    let n = v.norm();
    if n > DEGENERATE_NORM {
        v / n
    } else {
        let mut e = Vector::zeros(v.len());
        e[0] = 1.0;
        e
    }
}

/// Scale factor `min(1, 1/σ̂)`; a non-positive estimate means "no rescaling".
pub fn scale_for(sigma: f64) -> f64 {
    if sigma > 1.0 {
        1.0 / sigma
    } else {
        1.0
    }
}

/// Runs one power-iteration update on `state` and returns `(W̃, σ̂)`.
pub fn spectral_normalize(w: &Matrix, state: &mut PowerIteration) -> (Matrix, f64) {
    if w.iter().all(|&x| x == 0.0) {
        return (w.clone(), 0.0);
    }
    state.step(w);
    let sigma = state.sigma(w);
    (w * scale_for(sigma), sigma)
}

/// Backpropagates `∂L/∂W̃` to `∂L/∂W` for `W̃ = W·min(1, 1/σ̂)` with the
/// power-iteration vectors held constant (`∂σ̂/∂W = u vᵀ`).
pub fn normalize_backward(w: &Matrix, state: &PowerIteration, grad_scaled: &Matrix) -> Matrix {
    let sigma = state.sigma(w);
    if sigma <= 1.0 {
        return grad_scaled.clone();
    }
    let inner = grad_scaled.dot(w);
    grad_scaled / sigma - (&state.u * state.v.transpose()) * (inner / (sigma * sigma))
}
