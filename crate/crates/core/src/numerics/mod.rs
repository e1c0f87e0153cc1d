//! Minimal deterministic tensor and autograd substrate.

mod attention;
mod conv;
mod element;
mod graph;
mod norm;
mod ops;
mod optim;
mod params;
mod rng;
mod tensor;

pub use element::Element;
pub use graph::{Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use rng::{Rng, RngState};
pub use tensor::{Shape, Tensor};

/// Working precision of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    /// 32-bit training mode.
    #[default]
    F32,
    /// 64-bit reference mode.
    F64,
}

impl std::str::FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(crate::Error::Config(format!(
                "precision must be f32 or f64, got {other}"
            ))),
        }
    }
}
