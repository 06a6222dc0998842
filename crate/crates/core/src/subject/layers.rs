//! Frozen building blocks of the subject: per-unit dense layers, causal
//! mixing heads and residual blocks.

use serde::{Deserialize, Serialize};

use crate::linalg::{serde_matrix, serde_vector, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Square,
    Tanh,
}

impl Activation {
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Self::Identity => a,
            Self::Square => a * a,
            Self::Tanh => a.tanh(),
        }
    }

    /// Derivative at pre-activation `a`.
    pub fn derivative(self, a: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::Square => 2.0 * a,
            Self::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
        }
    }
}

/// `y_i = act_i((W x + b)_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    #[serde(with = "serde_matrix")]
    pub w: Matrix,
    #[serde(with = "serde_vector")]
    pub b: Vector,
    pub act: Vec<Activation>,
}

impl Dense {
    pub fn new(w: Matrix, b: Vector, act: Vec<Activation>) -> Self {
        assert_eq!(w.nrows(), b.len());
        assert_eq!(w.nrows(), act.len());
        Self { w, b, act }
    }

    pub fn outputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn pre(&self, x: &Vector) -> Vector {
        &self.w * x + &self.b
    }

    pub fn activate(&self, pre: &Vector) -> Vector {
        Vector::from_iterator(pre.len(), pre.iter().zip(&self.act).map(|(&a, act)| act.apply(a)))
    }

    pub fn forward(&self, x: &Vector) -> Vector {
        self.activate(&self.pre(x))
    }

    /// Gradient w.r.t. the input given the output gradient and cached pre-activation.
    pub fn vjp(&self, pre: &Vector, gy: &Vector) -> Vector {
        let ga = Vector::from_iterator(
            pre.len(),
            pre.iter().zip(&self.act).zip(gy.iter()).map(|((&a, act), &g)| g * act.derivative(a)),
        );
        self.w.tr_mul(&ga)
    }
}

/// Runs a chain of dense layers, returning the output and every pre-activation.
pub fn chain_forward(layers: &[Dense], x: &Vector) -> (Vector, Vec<Vector>) {
    let mut pres = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for l in layers {
        let pre = l.pre(&cur);
        cur = l.activate(&pre);
        pres.push(pre);
    }
    (cur, pres)
}

pub fn chain_vjp(layers: &[Dense], pres: &[Vector], gy: &Vector) -> Vector {
    let mut g = gy.clone();
    for (l, pre) in layers.iter().zip(pres).rev() {
        g = l.vjp(pre, &g);
    }
    g
}

/// Causal mixing head: position `t` receives `Σ_{s ≤ t} pattern[t][s] · value · h_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixHead {
    #[serde(with = "serde_matrix")]
    pub pattern: Matrix,
    #[serde(with = "serde_matrix")]
    pub value: Matrix,
}

/// Residual block: `u_t = h_t + Σ heads`, then `h'_t = u_t + mlp(u_t)`.
/// An empty `mlp` contributes nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectBlock {
    pub heads: Vec<MixHead>,
    pub mlp: Vec<Dense>,
}

/// Per-position cache for backpropagating through one block.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub mlp_pres: Vec<Vector>,
}

impl SubjectBlock {
    fn mix(&self, inputs: &[Vector], t: usize) -> Vector {
        let mut u = inputs[t].clone();
        for head in &self.heads {
            for s in 0..=t {
                let a = head.pattern[(t, s)];
                if a != 0.0 {
                    u += a * (&head.value * &inputs[s]);
                }
            }
        }
        u
    }

    fn position(&self, inputs: &[Vector], t: usize) -> (Vector, BlockCache) {
        let u = self.mix(inputs, t);
        if self.mlp.is_empty() {
            return (u, BlockCache { mlp_pres: Vec::new() });
        }
        let (m, pres) = chain_forward(&self.mlp, &u);
        (u + m, BlockCache { mlp_pres: pres })
    }

    /// Outputs for every position.
    pub fn forward(&self, inputs: &[Vector]) -> Vec<Vector> {
        (0..inputs.len()).map(|t| self.position(inputs, t).0).collect()
    }

    /// Outputs and caches for positions `from..`; earlier outputs are not computed.
    pub fn forward_from(&self, inputs: &[Vector], from: usize) -> (Vec<Vector>, Vec<BlockCache>) {
        (from..inputs.len()).map(|t| self.position(inputs, t)).unzip()
    }

    /// Maps output gradients at positions `from..` to input gradients at the
    /// same positions; contributions to positions before `from` are dropped.
    pub fn backward_from(&self, caches: &[BlockCache], gout: &[Vector], from: usize) -> Vec<Vector> {
        let n = gout.len();
        let dim = gout.first().map_or(0, |g| g.len());
        let mut gin = vec![Vector::zeros(dim); n];
        for (k, (g, cache)) in gout.iter().zip(caches).enumerate() {
            let mut gu = g.clone();
            if !self.mlp.is_empty() {
                gu += chain_vjp(&self.mlp, &cache.mlp_pres, g);
            }
            let t = from + k;
            gin[k] += &gu;
            for head in &self.heads {
                let vt = head.value.tr_mul(&gu);
                for s in from..=t {
                    let a = head.pattern[(t, s)];
                    if a != 0.0 {
                        gin[s - from] += a * &vt;
                    }
                }
            }
        }
        gin
    }

    pub fn for_each_weight(&self, f: &mut impl FnMut(f64)) {
        for h in &self.heads {
            h.pattern.iter().for_each(|&x| f(x));
            h.value.iter().for_each(|&x| f(x));
        }
        for l in &self.mlp {
            l.w.iter().for_each(|&x| f(x));
            l.b.iter().for_each(|&x| f(x));
        }
    }
}
