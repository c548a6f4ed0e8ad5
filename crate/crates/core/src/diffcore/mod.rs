//! Dense-matrix reverse-mode differentiation and forward jets for MLP inputs.

mod jet;
mod params;
mod tape;

pub use jet::{jet_forward, mlp_forward_tape, mlp_jet_tape, Jet, TapeJet};
pub use params::{ParamVector, Segment};
pub use tape::{
    flat_grad, inverse_softplus, jacobian_rows, reverse_grad, sigmoid, softplus, Gradients, Matrix, NodeId, Op,
    ParamBinding, Tape,
};
