//! Fully connected sigmoid networks `(x̂, t̂) -> u` with exact input
//! derivatives and exact parameter gradients of losses built on them.
//!
//! Input derivatives are carried forward layer by layer as extra rows
//! ("streams") next to the values: `∂/∂x̂`, `∂/∂t̂` and `∂²/∂x̂²`. The parameter
//! gradient is a reverse sweep over that extended computation, so losses may
//! read any stream.

mod bundle;
mod engine;
mod params;

pub use bundle::{
    forward_with_derivatives, gradient_check, loss_param_gradient, BundleLoss, DerivBundle,
    GradCheckReport,
};
pub use engine::{Streams, Tape};
pub use params::{init_params, read_blob, write_blob, BlobKind, ParamVector};

use serde::{Deserialize, Serialize};

/// Architecture of one network. Inputs are always `(x̂, t̂)`, the output is a
/// single raw (unsquashed) value and every hidden unit is a logistic sigmoid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub hidden_layers: usize,
    pub hidden_width: usize,
}

pub const INPUT_DIM: usize = 2;
pub const OUTPUT_DIM: usize = 1;

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            hidden_layers: 6,
            hidden_width: 50,
        }
    }
}

/// Position of one affine layer inside the flat parameter vector.
///
/// Weights are stored row-major as `[out][in]`, followed by the biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: usize,
    pub biases: usize,
}

impl LayerSlot {
    pub fn end(&self) -> usize {
        self.biases + self.n_out
    }
}

impl MlpSpec {
    pub fn new(hidden_layers: usize, hidden_width: usize) -> Self {
        assert!(hidden_layers >= 1 && hidden_width >= 1, "empty network");
        Self {
            hidden_layers,
            hidden_width,
        }
    }

    /// Affine layers in evaluation order: `hidden_layers` sigmoid layers
    /// followed by the linear output layer.
    pub fn layers(&self) -> Vec<LayerSlot> {
        let mut out = Vec::with_capacity(self.hidden_layers + 1);
        let mut offset = 0;
        for l in 0..=self.hidden_layers {
            let n_in = if l == 0 { INPUT_DIM } else { self.hidden_width };
            let n_out = if l == self.hidden_layers {
                OUTPUT_DIM
            } else {
                self.hidden_width
            };
            let slot = LayerSlot {
                n_in,
                n_out,
                weights: offset,
                biases: offset + n_in * n_out,
            };
            offset = slot.end();
            out.push(slot);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().last().map_or(0, LayerSlot::end)
    }
}
