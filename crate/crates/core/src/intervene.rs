//! Intervention primitives.
//!
//! Linear edits along orthonormal directions, the same edit written as a
//! change of basis, the non-linear generalization through an invertible
//! feature map, interchange between two inputs, inference-time clamping, and
//! the difference-in-means baselines (ablation and activation addition).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featmap::{CompiledMap, LinearFeatureMap};
use crate::linalg::{check_dim, check_finite, mean_of, serde_vector, Vector};

/// Orthonormality tolerance for direction sets.
pub const ORTHONORMAL_TOL: f64 = 1e-8;
/// Class-mean differences shorter than this have no usable direction.
pub const DEGENERATE_NORM: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Add `α_i` to feature coordinate `i`.
    Add,
    /// Set feature coordinate `i` to `α_i`.
    Clamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub coords: Vec<usize>,
    pub alphas: Vec<f64>,
    pub mode: Mode,
}

impl InterventionSpec {
    pub fn new(coords: Vec<usize>, alphas: Vec<f64>, mode: Mode) -> Result<Self> {
        let spec = Self {
            coords,
            alphas,
            mode,
        };
        spec.check_shape()?;
        Ok(spec)
    }

    pub fn add(coords: Vec<usize>, alphas: Vec<f64>) -> Result<Self> {
        Self::new(coords, alphas, Mode::Add)
    }

    pub fn clamp(coords: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(coords, values, Mode::Clamp)
    }

    fn check_shape(&self) -> Result<()> {
        if self.coords.len() != self.alphas.len() {
            return Err(Error::invalid(format!(
                "{} coordinates but {} coefficients",
                self.coords.len(),
                self.alphas.len()
            )));
        }
        for (i, c) in self.coords.iter().enumerate() {
            if self.coords[..i].contains(c) {
                return Err(Error::invalid(format!("coordinate {c} listed twice")));
            }
        }
        if self.alphas.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("intervention coefficient".into()));
        }
        Ok(())
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        self.check_shape()?;
        if let Some(c) = self.coords.iter().find(|&&c| c >= dim) {
            return Err(Error::invalid(format!("coordinate {c} out of range for d = {dim}")));
        }
        Ok(())
    }

    /// Applies the spec to feature coordinates `z` in place.
    fn apply(&self, z: &mut Vector) {
        for (&c, &a) in self.coords.iter().zip(&self.alphas) {
            match self.mode {
                Mode::Add => z[c] += a,
                Mode::Clamp => z[c] = a,
            }
        }
    }
}

fn check_orthonormal(dirs: &[Vector]) -> Result<()> {
    for (i, a) in dirs.iter().enumerate() {
        if (a.norm() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::invalid(format!("direction {i} is not unit length")));
        }
        for (j, b) in dirs[..i].iter().enumerate() {
            if a.dot(b).abs() > ORTHONORMAL_TOL {
                return Err(Error::invalid(format!("directions {j} and {i} are not orthogonal")));
            }
        }
    }
    Ok(())
}

/// `h + Σ α_i v_i` for orthonormal `v_i`.
pub fn linear_intervene(h: &Vector, dirs: &[Vector], alphas: &[f64]) -> Result<Vector> {
    if dirs.len() != alphas.len() {
        return Err(Error::invalid(format!(
            "{} directions but {} coefficients",
            dirs.len(),
            alphas.len()
        )));
    }
    for d in dirs {
        check_dim(d, h.len())?;
    }
    check_orthonormal(dirs)?;
    let mut out = h.clone();
    for (v, &a) in dirs.iter().zip(alphas) {
        out.axpy(a, v, 1.0);
    }
    Ok(out)
}

/// `W⁻¹(W h + Σ α_i e_i)`.
pub fn basis_intervene(h: &Vector, map: &LinearFeatureMap, spec: &InterventionSpec) -> Result<Vector> {
    if spec.mode != Mode::Add {
        return Err(Error::invalid("basis intervention takes additive coefficients"));
    }
    spec.validate(map.dim())?;
    let mut z = map.forward(h)?;
    spec.apply(&mut z);
    map.inverse(&z)
}

/// `f⁻¹(f(h) + Σ α_i e_i)`, or with the targeted coordinates set to `α_i`
/// in clamp mode.
pub fn nonlinear_intervene(h: &Vector, map: &CompiledMap, spec: &InterventionSpec) -> Result<Vector> {
    spec.validate(map.dim())?;
    check_finite(h, "hidden state")?;
    map.edit_features(h, |z| spec.apply(z))
}

/// Moves the targeted feature coordinates of `h_minus` to those of `h_plus`.
pub fn interchange(h_minus: &Vector, h_plus: &Vector, map: &CompiledMap, coords: &[usize]) -> Result<Vector> {
    check_finite(h_minus, "base hidden state")?;
    check_finite(h_plus, "source hidden state")?;
    let z_plus = map.forward(h_plus)?;
    InterventionSpec::add(coords.to_vec(), vec![0.0; coords.len()])?.validate(map.dim())?;
    map.edit_features(h_minus, |z| {
        for &c in coords {
            z[c] += z_plus[c] - z[c];
        }
    })
}

/// Sets feature coordinate `coord` of `h` to the cached positive-class mean.
pub fn clamp_to_mean(h: &Vector, map: &CompiledMap, coord: usize, mu_bar_plus: f64) -> Result<Vector> {
    if !mu_bar_plus.is_finite() {
        return Err(Error::NonFinite("clamp target".into()));
    }
    nonlinear_intervene(h, map, &InterventionSpec::clamp(vec![coord], vec![mu_bar_plus])?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Project the direction out at every site.
    Ablation,
    /// Add `α v` at every position of one layer.
    ActAdd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    AllLayers,
    Layer(usize),
}

/// A unit steering direction with its intervention scheme.
///
/// Sign convention: `v` points from the positive (compliant) class mean
/// toward the negative (refusing) class mean, so bypassing refusal with
/// activation addition uses a negative `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringDirection {
    #[serde(with = "serde_vector")]
    pub v: Vector,
    pub scheme: Scheme,
    pub alpha: f64,
    pub scope: Scope,
}

impl SteeringDirection {
    pub fn new(v: Vector, scheme: Scheme, alpha: f64, scope: Scope) -> Result<Self> {
        if (v.norm() - 1.0).abs() > DEGENERATE_NORM {
            return Err(Error::invalid("steering direction must be unit length"));
        }
        Ok(Self { v, scheme, alpha, scope })
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    /// Same direction, used for activation addition at `layer` with `alpha`.
    pub fn actadd_at(&self, layer: usize, alpha: f64) -> Self {
        Self {
            v: self.v.clone(),
            scheme: Scheme::ActAdd,
            alpha,
            scope: Scope::Layer(layer),
        }
    }

    pub fn edit(&self, h: &Vector) -> Vector {
        match self.scheme {
            Scheme::Ablation => ablate(h, &self.v),
            Scheme::ActAdd => actadd(h, &self.v, self.alpha),
        }
    }
}

/// Difference-in-means direction `normalize(mean⁻ − mean⁺)`.
///
/// The result is an ablation-scheme direction over all layers; its `alpha`
/// holds the bypass coefficient `−‖mean⁻ − mean⁺‖`, the class-mean
/// projection gap along `v` with the sign that moves toward the positive class.
pub fn dim_direction(acts_plus: &[Vector], acts_minus: &[Vector]) -> Result<SteeringDirection> {
    let mp = mean_of(acts_plus).ok_or_else(|| Error::invalid("positive activations are empty"))?;
    let mm = mean_of(acts_minus).ok_or_else(|| Error::invalid("negative activations are empty"))?;
    check_dim(&mm, mp.len())?;
    let diff = mm - mp;
    let norm = diff.norm();
    if !(norm >= DEGENERATE_NORM) {
        return Err(Error::DegenerateDirection { norm });
    }
    Ok(SteeringDirection {
        v: diff / norm,
        scheme: Scheme::Ablation,
        alpha: -norm,
        scope: Scope::AllLayers,
    })
}

/// `h − (vᵀh) v`.
pub fn ablate(h: &Vector, v: &Vector) -> Vector {
    h - v * v.dot(h)
}

/// `h + α v`.
pub fn actadd(h: &Vector, v: &Vector, alpha: f64) -> Vector {
    h + v * alpha
}
