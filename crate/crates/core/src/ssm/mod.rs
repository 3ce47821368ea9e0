//! Floating-point reference model of the selective SSM and the bidirectional
//! encoder block.

pub mod block;
pub mod encoder;
pub mod scan;
pub mod synth;

pub use block::{discretize, flip_sequence, selective_ssm_block, Gate, SsmInputs};
pub use encoder::{encoder_block, EncoderConfig, EncoderWeights};
pub use scan::{combine, kogge_stone_by, kogge_stone_scan, sequential_scan, ScanPair};
pub use synth::{synthetic_inputs, SynthSpec};
