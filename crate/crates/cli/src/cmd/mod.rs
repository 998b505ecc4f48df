pub mod compare;
pub mod eval;
pub mod gen_scene;
pub mod render;
pub mod train;
pub mod voxelize;

use serde::{Deserialize, Serialize};

/// Element type the network runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl From<pointplanes::DType> for Precision {
    fn from(d: pointplanes::DType) -> Self {
        match d {
            pointplanes::DType::F32 => Precision::F32,
            pointplanes::DType::F64 => Precision::F64,
        }
    }
}
