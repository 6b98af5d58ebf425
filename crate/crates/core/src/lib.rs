//! Low-bit learned quantization of intermediate features for split learning.
//!
//! A client encodes its input, scales and rounds the activations onto a
//! `K`-level lattice, and ships fixed-width indices to a server that rebuilds
//! the features from `K` alone and runs the rest of the network. Kernel
//! density estimation picks the bit width; a random top-k sparsifier is the
//! comparison baseline.

pub mod baseline;
pub mod cli;
pub mod codec;
pub mod entropy;
pub mod quantizer;
pub mod splitnet;
pub mod tensor;
pub mod training;

pub use codec::{decode_frame, encode_frame, pack, unpack, CodecError, WireFrame};
pub use entropy::{recommend_bits, EntropyReport};
pub use quantizer::{quantize, reconstruct, QuantizedBlock, QuantizerConfig, Scaling};
pub use splitnet::{benchmark, serve, Client, SessionConfig, TransferLog, Transport};
pub use tensor::FeatureTensor;
pub use training::{grad_check, train, SplitModel, TrainConfig};
