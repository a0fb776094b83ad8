//! Spiking microcircuits that learn with local, gated error signals, plus a
//! backpropagation reference to compare them against.

pub mod bp_ref;
pub mod data_io;
pub mod error;
pub mod microcircuit;
pub mod neuron;
pub mod plasticity;
pub mod signal;
pub mod synapse;

pub use error::{Error, Result};
pub use microcircuit::{
    infer, run_network, MicrocircuitLayer, Network, NetworkInput, NetworkState, PredictInit, WeightInit, WeightMode,
};
pub use neuron::{lif_step, run_neuron, NeuronParams};
pub use signal::{make_grid, Signal, SpikeTrain, StdpParams, TimeGrid};
pub use synapse::{Gate, GatingParams};
