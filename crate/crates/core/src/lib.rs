//! Non-intrusive image watermarking toolkit.
//!
//! Instead of embedding a payload into pixels, the codec derives a
//! verification key from rotation-invariant moment features of the cover
//! image and a learned encoding of the owner message. The cover is never
//! modified; ownership is checked by recomputing the features and decoding
//! the message back out of the key. A screen-capture noise simulator and a
//! learned restorer make verification robust to photographed copies.
//!
//! The crate is organised bottom-up:
//!
//! - [`sgxor`]: exact binary XOR forward with a sigmoid-gated gradient proxy
//! - [`moments`]: radial-harmonic moment features of a grayscale image
//! - [`nn`]: minimal conv/dense layers, explicit backward passes, AdamW
//! - [`codec`]: message processor, feature fusion, decoder, key derivation
//! - [`keyfile`]: portable binary format for verification keys
//! - [`noise`]: differentiable screen-capture distortion pipeline
//! - [`restorer`]: residual U-Net and the pixel/structural training loss
//! - [`training`]: two-stage and joint optimisation loops
//! - [`checkpoint`]: weight serialisation with integrity digests
//! - [`dataset`]: image ingestion, deterministic splits, synthetic covers
//! - [`eval`]: bit error rates, uniqueness checks, PSNR, ablation runner

pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod keyfile;
pub mod moments;
pub mod nn;
pub mod noise;
pub mod restorer;
pub mod sgxor;
pub mod training;


pub use codec::{Codec, FusionKind, Message, ModelShape, VerificationKey};
pub use error::{Error, Result};
pub use eval::{AblationVariant, EvalConfig};
pub use noise::NoiseConfig;
pub use restorer::Restorer;
pub use sgxor::{GradEstimator, SgXorParams};
pub use training::{Pipeline, TrainConfig};

