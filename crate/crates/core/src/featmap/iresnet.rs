//! Invertible residual network `f = φ_M ∘ … ∘ φ_1`, `φ_m(z) = z + g_m(z)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::block::{BlockGrads, CompiledBlock, ResidualBlock};
use crate::error::{Error, Result};
use crate::linalg::{check_dim, Vector};

/// Cap on Neumann-series terms in the implicit backward solve.
const MAX_NEUMANN_TERMS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            max_iters: 30,
            rel_tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionReport {
    /// Largest iteration count used by any block.
    pub iterations_used: usize,
    /// Largest final relative residual over blocks.
    pub relative_residual: f64,
    pub converged: bool,
}

impl InversionReport {
    pub(crate) fn exact() -> Self {
        Self {
            iterations_used: 0,
            relative_residual: 0.0,
            converged: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub blocks: usize,
    pub width: usize,
    pub kappa: f64,
    pub slope: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            width: 128,
            kappa: 0.6,
            slope: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IResNetFeatureMap {
    pub blocks: Vec<ResidualBlock>,
    pub inversion: InversionConfig,
}

impl IResNetFeatureMap {
    pub fn init(dim: usize, arch: &ArchConfig, inversion: InversionConfig, seed: u64) -> Result<Self> {
        if arch.blocks == 0 {
            return Err(Error::invalid("an i-ResNet needs at least one block"));
        }
        let blocks = (0..arch.blocks)
            .map(|m| {
                let block_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(m as u64);
                ResidualBlock::init(dim, arch.width, arch.slope, arch.kappa, block_seed)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(blocks, inversion)
    }

    pub fn new(blocks: Vec<ResidualBlock>, inversion: InversionConfig) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::invalid("an i-ResNet needs at least one block"))?;
        let dim = first.dim();
        if blocks.iter().any(|b| b.dim() != dim) {
            return Err(Error::invalid("all residual blocks must share one dimension"));
        }
        if inversion.max_iters == 0 || !(inversion.rel_tol > 0.0) {
            return Err(Error::invalid("inversion needs max_iters ≥ 1 and rel_tol > 0"));
        }
        Ok(Self { blocks, inversion })
    }

    pub fn dim(&self) -> usize {
        self.blocks[0].dim()
    }

    pub fn compile(&self) -> CompiledIResNet {
        CompiledIResNet {
            blocks: self.blocks.iter().map(ResidualBlock::compile).collect(),
            inversion: self.inversion,
        }
    }

    pub fn power_step(&mut self) {
        for b in &mut self.blocks {
            b.power_step();
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(ResidualBlock::param_count).sum()
    }

    /// Parameters flattened block by block as `w1, b1, w2, b2` (row-major).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for b in &self.blocks {
            b.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut at = 0;
        for b in &mut self.blocks {
            at += b.read_params(&params[at..]);
        }
        Ok(())
    }

    /// Chains effective-weight gradients to raw parameters and flattens them
    /// in [`Self::params`] order.
    pub fn raw_gradients(&self, grads: &[BlockGrads]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (b, g) in self.blocks.iter().zip(grads) {
            b.raw_gradients(g).write_flat(&mut out);
        }
        out
    }

    pub fn zero_grads(&self) -> Vec<BlockGrads> {
        self.blocks
            .iter()
            .map(|b| BlockGrads::zeros(b.dim(), b.width()))
            .collect()
    }

    pub fn forward(&self, h: &Vector) -> Result<Vector> {
        self.compile().forward(h)
    }

    pub fn inverse(&self, z: &Vector) -> Result<(Vector, InversionReport)> {
        self.compile().inverse(z)
    }
}

/// Block inputs recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    inputs: Vec<Vector>,
}

/// Fixed points recorded by a converged inverse pass; `points[m]` is the
/// input of block `m`.
#[derive(Debug, Clone)]
pub struct InverseTape {
    points: Vec<Vector>,
}

/// An i-ResNet with frozen, normalized weights.
#[derive(Debug, Clone)]
pub struct CompiledIResNet {
    pub blocks: Vec<CompiledBlock>,
    pub inversion: InversionConfig,
}

impl CompiledIResNet {
    pub fn dim(&self) -> usize {
        self.blocks[0].w1.ncols()
    }

    pub fn with_inversion(mut self, inversion: InversionConfig) -> Self {
        self.inversion = inversion;
        self
    }

    pub fn forward(&self, h: &Vector) -> Result<Vector> {
        check_dim(h, self.dim())?;
        Ok(self.blocks.iter().fold(h.clone(), |x, b| b.apply(&x)))
    }

    pub fn forward_taped(&self, h: &Vector) -> Result<(Vector, ForwardTape)> {
        check_dim(h, self.dim())?;
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut x = h.clone();
        for b in &self.blocks {
            let next = b.apply(&x);
            inputs.push(x);
            x = next;
        }
        Ok((x, ForwardTape { inputs }))
    }

    fn invert_block(&self, block: &CompiledBlock, y: &Vector, start: Option<&Vector>) -> (Vector, usize, f64) {
        let scale = y.norm().max(1.0);
        let mut x = start.unwrap_or(y).clone();
        let mut residual = f64::INFINITY;
        for it in 1..=self.inversion.max_iters {
            let next = y - block.branch(&x);
            residual = (&next - &x).norm() / scale;
            x = next;
            if residual <= self.inversion.rel_tol {
                return (x, it, residual);
            }
        }
        (x, self.inversion.max_iters, residual)
    }

    pub fn inverse(&self, z: &Vector) -> Result<(Vector, InversionReport)> {
        self.inverse_taped(z).map(|(x, report, _)| (x, report))
    }

    /// Inverts block by block in reverse order by `x ← y − g(x)`.
    pub fn inverse_taped(&self, z: &Vector) -> Result<(Vector, InversionReport, InverseTape)> {
        self.inverse_from(z, None)
    }

    /// Inverse whose per-block iterations start from the block inputs of a
    /// forward pass, so that `z = f(h)` returns `h` after one step.
    pub fn inverse_near(&self, z: &Vector, anchor: &ForwardTape) -> Result<(Vector, InversionReport)> {
        self.inverse_from(z, Some(anchor)).map(|(x, report, _)| (x, report))
    }

    fn inverse_from(&self, z: &Vector, anchor: Option<&ForwardTape>) -> Result<(Vector, InversionReport, InverseTape)> {
        check_dim(z, self.dim())?;
        let mut points = vec![Vector::zeros(0); self.blocks.len()];
        let mut report = InversionReport::exact();
        let mut y = z.clone();
        for (m, block) in self.blocks.iter().enumerate().rev() {
            let (x, iters, residual) = self.invert_block(block, &y, anchor.map(|a| &a.inputs[m]));
            report.iterations_used = report.iterations_used.max(iters);
            report.relative_residual = report.relative_residual.max(residual);
            if !(residual <= self.inversion.rel_tol) {
                report.converged = false;
                return Err(Error::NotConverged(report));
            }
            points[m] = x.clone();
            y = x;
        }
        Ok((y, report, InverseTape { points }))
    }

    /// Backpropagates `gy = ∂L/∂f(h)` through a taped forward pass,
    /// accumulating parameter gradients; returns `∂L/∂h`.
    pub fn backward_forward(&self, tape: &ForwardTape, gy: &Vector, grads: &mut [BlockGrads]) -> Vector {
        let mut g = gy.clone();
        for (m, block) in self.blocks.iter().enumerate().rev() {
            let x = &tape.inputs[m];
            block.accumulate_param_grads(x, &g, &mut grads[m]);
            g += block.branch_vjp(x, &g);
        }
        g
    }

    /// Backpropagates `gx = ∂L/∂f⁻¹(z)` through a converged inverse by
    /// implicit differentiation of `x + g(x) = y` at each block's fixed point;
    /// returns `∂L/∂z`.
    pub fn backward_inverse(&self, tape: &InverseTape, gx: &Vector, grads: &mut [BlockGrads]) -> Vector {
        let mut g = gx.clone();
        for (m, block) in self.blocks.iter().enumerate() {
            let x = &tape.points[m];
            let lambda = block.solve_transpose(x, &g, self.inversion.rel_tol, MAX_NEUMANN_TERMS);
            let mut neg = BlockGrads::zeros(x.len(), block.b1.len());
            block.accumulate_param_grads(x, &lambda, &mut neg);
            neg.scale(-1.0);
            grads[m].add_assign(&neg);
            g = lambda;
        }
        g
    }
}

/// Maximum of `‖g(a) − g(b)‖ / ‖a − b‖` over sampled pairs.
///
/// Pairs mix wide separations with close-range perturbations around a
/// standard-normal anchor; coincident pairs are skipped.
pub fn lipschitz_estimate(block: &ResidualBlock, n_pairs: usize, seed: u64) -> f64 {
    let c = block.compile();
    let d = block.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales = [1.0, 0.1, 1e-2];
    let mut best: f64 = 0.0;
    for i in 0..n_pairs {
        let a = Vector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let delta = Vector::from_fn(d, |_, _| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x * scales[i % scales.len()]
        });
        let dn = delta.norm();
        if dn == 0.0 {
            continue;
        }
        let b = &a + &delta;
        let ratio = (c.branch(&a) - c.branch(&b)).norm() / dn;
        best = best.max(ratio);
    }
    best
}
