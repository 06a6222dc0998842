//! Invertible feature maps: the orthogonal change of basis and the
//! Lipschitz-constrained i-ResNet, plus their on-disk container.

mod block;
mod iresnet;
mod linear;
pub mod spectral;

pub use block::{BlockGrads, CompiledBlock, ResidualBlock, WARMUP_ITERATIONS};
pub use iresnet::{
    lipschitz_estimate, ArchConfig, CompiledIResNet, ForwardTape, IResNetFeatureMap,
    InverseTape, InversionConfig, InversionReport,
};
pub use linear::{LinearFeatureMap, ORTHOGONALITY_TOL};
pub use spectral::{spectral_normalize, PowerIteration};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::Vector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    Linear(LinearFeatureMap),
    IResNet(IResNetFeatureMap),
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        match self {
            Self::Linear(m) => m.dim(),
            Self::IResNet(m) => m.dim(),
        }
    }

    pub fn compile(&self) -> CompiledMap {
        match self {
            Self::Linear(m) => CompiledMap::Linear(m.clone()),
            Self::IResNet(m) => CompiledMap::IResNet(m.compile()),
        }
    }

    pub fn forward(&self, h: &Vector) -> Result<Vector> {
        self.compile().forward(h)
    }

    pub fn inverse(&self, z: &Vector) -> Result<(Vector, InversionReport)> {
        self.compile().inverse(z)
    }
}

impl From<LinearFeatureMap> for FeatureMap {
    fn from(m: LinearFeatureMap) -> Self {
        Self::Linear(m)
    }
}

impl From<IResNetFeatureMap> for FeatureMap {
    fn from(m: IResNetFeatureMap) -> Self {
        Self::IResNet(m)
    }
}

/// A feature map ready for repeated evaluation (normalized weights precomputed).
#[derive(Debug, Clone)]
pub enum CompiledMap {
    Linear(LinearFeatureMap),
    IResNet(CompiledIResNet),
}

impl CompiledMap {
    pub fn dim(&self) -> usize {
        match self {
            Self::Linear(m) => m.dim(),
            Self::IResNet(m) => m.dim(),
        }
    }

    /// Relative tolerance that round trips are expected to meet.
    pub fn rel_tol(&self) -> f64 {
        match self {
            Self::Linear(_) => 0.0,
            Self::IResNet(m) => m.inversion.rel_tol,
        }
    }

    pub fn forward(&self, h: &Vector) -> Result<Vector> {
        match self {
            Self::Linear(m) => m.forward(h),
            Self::IResNet(m) => m.forward(h),
        }
    }

    pub fn inverse(&self, z: &Vector) -> Result<(Vector, InversionReport)> {
        match self {
            Self::Linear(m) => Ok((m.inverse(z)?, InversionReport::exact())),
            Self::IResNet(m) => m.inverse(z),
        }
    }

    /// Applies `edit` to `f(h)` and maps back, warm-starting the inversion
    /// at `h`'s own activations.
    pub fn edit_features(&self, h: &Vector, edit: impl FnOnce(&mut Vector)) -> Result<Vector> {
        match self {
            Self::Linear(m) => {
                let mut z = m.forward(h)?;
                edit(&mut z);
                m.inverse(&z)
            }
            Self::IResNet(m) => {
                let (mut z, tape) = m.forward_taped(h)?;
                edit(&mut z);
                Ok(m.inverse_near(&z, &tape)?.0)
            }
        }
    }
}
