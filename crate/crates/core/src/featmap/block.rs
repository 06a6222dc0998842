//! Lipschitz-constrained residual branch `g(z) = κ (W̃₂ σ(W̃₁ z + b₁) + b₂)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spectral::{normalize_backward, scale_for, PowerIteration};
use crate::error::{Error, Result};
use crate::linalg::{serde_matrix, serde_vector, Matrix, Vector};

/// Power-iteration updates run once at initialization so that early `σ̂`
/// estimates are not far below the true spectral norm.
pub const WARMUP_ITERATIONS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    #[serde(with = "serde_matrix")]
    pub w1: Matrix,
    #[serde(with = "serde_vector")]
    pub b1: Vector,
    #[serde(with = "serde_matrix")]
    pub w2: Matrix,
    #[serde(with = "serde_vector")]
    pub b2: Vector,
    pub sn1: PowerIteration,
    pub sn2: PowerIteration,
    /// LeakyReLU negative slope; `1.0` makes the branch linear.
    pub slope: f64,
    /// Lipschitz coefficient applied to the branch output.
    pub kappa: f64,
}

impl ResidualBlock {
    /// Uniform `[-1/√fan_in, 1/√fan_in]` weights, zero biases, warmed-up power iteration.
    pub fn init(dim: usize, width: usize, slope: f64, kappa: f64, seed: u64) -> Result<Self> {
        if dim == 0 || width == 0 {
            return Err(Error::invalid("block dimensions must be positive"));
        }
        if !(kappa > 0.0 && kappa < 1.0) {
            return Err(Error::invalid(format!("kappa must lie in (0, 1), got {kappa}")));
        }
        if !(slope > 0.0 && slope <= 1.0) {
            return Err(Error::invalid(format!("slope must lie in (0, 1], got {slope}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a1 = 1.0 / (dim as f64).sqrt();
        let a2 = 1.0 / (width as f64).sqrt();
        let w1 = Matrix::from_fn(width, dim, |_, _| rng.random_range(-a1..=a1));
        let w2 = Matrix::from_fn(dim, width, |_, _| rng.random_range(-a2..=a2));
        let mut block = Self {
            w1,
            b1: Vector::zeros(width),
            w2,
            b2: Vector::zeros(dim),
            sn1: PowerIteration::new(width, dim, seed ^ 0x5eed_0001),
            sn2: PowerIteration::new(dim, width, seed ^ 0x5eed_0002),
            slope,
            kappa,
        };
        for _ in 0..WARMUP_ITERATIONS {
            block.power_step();
        }
        Ok(block)
    }

    /// A block from explicit weights; the power iteration is warmed up.
    pub fn from_weights(
        w1: Matrix,
        b1: Vector,
        w2: Matrix,
        b2: Vector,
        slope: f64,
        kappa: f64,
    ) -> Result<Self> {
        let (width, dim) = w1.shape();
        if w2.shape() != (dim, width) || b1.len() != width || b2.len() != dim {
            return Err(Error::invalid("inconsistent residual block shapes"));
        }
        let mut block = Self {
            sn1: PowerIteration::new(width, dim, 1),
            sn2: PowerIteration::new(dim, width, 2),
            w1,
            b1,
            w2,
            b2,
            slope,
            kappa,
        };
        for _ in 0..WARMUP_ITERATIONS {
            block.power_step();
        }
        Ok(block)
    }

    pub fn dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn width(&self) -> usize {
        self.w1.nrows()
    }

    pub fn param_count(&self) -> usize {
        2 * self.w1.len() + self.b1.len() + self.b2.len()
    }

    /// One power-iteration update for both weights.
    pub fn power_step(&mut self) {
        self.sn1.step(&self.w1);
        self.sn2.step(&self.w2);
    }

    pub fn sigmas(&self) -> (f64, f64) {
        (self.sn1.sigma(&self.w1), self.sn2.sigma(&self.w2))
    }

    /// Effective (normalized) weights under the frozen power-iteration state.
    pub fn compile(&self) -> CompiledBlock {
        let (s1, s2) = self.sigmas();
        CompiledBlock {
            w1: &self.w1 * scale_for(s1),
            b1: self.b1.clone(),
            w2: &self.w2 * scale_for(s2),
            b2: self.b2.clone(),
            slope: self.slope,
            kappa: self.kappa,
        }
    }

    /// Chains effective-weight gradients back to the raw parameters.
    pub fn raw_gradients(&self, g: &BlockGrads) -> BlockGrads {
        BlockGrads {
            w1: normalize_backward(&self.w1, &self.sn1, &g.w1),
            b1: g.b1.clone(),
            w2: normalize_backward(&self.w2, &self.sn2, &g.w2),
            b2: g.b2.clone(),
        }
    }

    pub(crate) fn write_params(&self, out: &mut Vec<f64>) {
        out.extend(row_major(&self.w1));
        out.extend(self.b1.iter());
        out.extend(row_major(&self.w2));
        out.extend(self.b2.iter());
    }

    pub(crate) fn read_params(&mut self, src: &[f64]) -> usize {
        let mut at = 0;
        at += fill_row_major(&mut self.w1, &src[at..]);
        self.b1.copy_from_slice(&src[at..at + self.b1.len()]);
        at += self.b1.len();
        at += fill_row_major(&mut self.w2, &src[at..]);
        self.b2.copy_from_slice(&src[at..at + self.b2.len()]);
        at + self.b2.len()
    }
}

fn row_major(m: &Matrix) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

fn fill_row_major(m: &mut Matrix, src: &[f64]) -> usize {
    let cols = m.ncols();
    for i in 0..m.nrows() {
        for j in 0..cols {
            m[(i, j)] = src[i * cols + j];
        }
    }
    m.len()
}

/// Gradients with the same layout as a [`ResidualBlock`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
}

impl BlockGrads {
    pub fn zeros(dim: usize, width: usize) -> Self {
        Self {
            w1: Matrix::zeros(width, dim),
            b1: Vector::zeros(width),
            w2: Matrix::zeros(dim, width),
            b2: Vector::zeros(dim),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.w1 *= s;
        self.b1 *= s;
        self.w2 *= s;
        self.b2 *= s;
    }

    pub fn add_assign(&mut self, other: &BlockGrads) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
    }

    pub(crate) fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend(row_major(&self.w1));
        out.extend(self.b1.iter());
        out.extend(row_major(&self.w2));
        out.extend(self.b2.iter());
    }
}

/// Immutable residual branch with normalized weights.
#[derive(Debug, Clone)]
pub struct CompiledBlock {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
    pub slope: f64,
    pub kappa: f64,
}

impl CompiledBlock {
    fn activate(&self, pre: &Vector) -> Vector {
        pre.map(|a| if a >= 0.0 { a } else { self.slope * a })
    }

    fn activation_slope(&self, pre: &Vector) -> Vector {
        pre.map(|a| if a >= 0.0 { 1.0 } else { self.slope })
    }

    fn pre(&self, x: &Vector) -> Vector {
        &self.w1 * x + &self.b1
    }

    /// `g(x)`.
    pub fn branch(&self, x: &Vector) -> Vector {
        let hidden = self.activate(&self.pre(x));
        (&self.w2 * hidden + &self.b2) * self.kappa
    }

    /// `x + g(x)`.
    pub fn apply(&self, x: &Vector) -> Vector {
        x + self.branch(x)
    }

    /// `J_g(x)ᵀ · gy`.
    pub fn branch_vjp(&self, x: &Vector, gy: &Vector) -> Vector {
        let pre = self.pre(x);
        let delta = self.activation_slope(&pre).component_mul(&self.w2.tr_mul(gy)) * self.kappa;
        self.w1.tr_mul(&delta)
    }

    /// Accumulates `(∂g(x)/∂θ)ᵀ · gy` into `grads` (effective weights).
    pub fn accumulate_param_grads(&self, x: &Vector, gy: &Vector, grads: &mut BlockGrads) {
        let pre = self.pre(x);
        let hidden = self.activate(&pre);
        let gk = gy * self.kappa;
        grads.w2.ger(1.0, &gk, &hidden, 1.0);
        grads.b2 += &gk;
        let delta = self.activation_slope(&pre).component_mul(&self.w2.tr_mul(&gk));
        grads.w1.ger(1.0, &delta, x, 1.0);
        grads.b1 += &delta;
    }

    /// Solves `(I + J_g(x))ᵀ λ = g` by the Neumann series `Σ (−J_gᵀ)ᵏ g`.
    ///
    /// Converges because `‖J_g‖ ≤ κ < 1`; stops once a term falls below
    /// `rel_tol · ‖λ‖`.
    pub fn solve_transpose(&self, x: &Vector, g: &Vector, rel_tol: f64, max_terms: usize) -> Vector {
        let mut sum = g.clone();
        let mut term = g.clone();
        for _ in 0..max_terms {
            term = -self.branch_vjp(x, &term);
            sum += &term;
            if term.norm() <= rel_tol * sum.norm().max(f64::MIN_POSITIVE) {
                break;
            }
        }
        sum
    }
}
