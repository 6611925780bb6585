//! Self-attention sentence classifiers over pre-trained word embeddings,
//! built on a self-contained f64 reverse-mode autodiff engine.
//!
//! The crate covers the whole pipeline: tensors and gradients
//! ([`tensor`]), scaled dot-product and multi-head attention with
//! sinusoidal, learned, and relative position information ([`attention`]),
//! the model family ([`model`]), corpus and embedding I/O ([`data`]),
//! the training and evaluation protocol ([`train`]), parameter counting
//! and timing ([`bench`]), finite-difference gradient verification
//! ([`gradcheck`]), and a numeric self-test battery ([`selftest`]).
//!
//! The primary interface is the `examples/` directory; each example is a
//! small runnable program exercising one capability:
//!
//! ```text
//! cargo run --example autodiff              tensors, tape, gradients
//! cargo run --example attention_basics      attention weights on a toy query
//! cargo run --example positional_encodings  sinusoidal / learned / relative
//! cargo run --example count_params          closed-form vs enumerated counts
//! cargo run --example gradcheck_models      finite-difference verification
//! cargo run --example train_toy             end-to-end run on a marker task
//! cargo run --example checkpoint_roundtrip  save / load bit-exactness
//! cargo run --example benchmark             training and inference timing
//! cargo run --example train_full -- --help  full protocol on real data
//! ```
//!
//! A thin `ssan` binary wraps the same entry points as subcommands
//! (`train`, `eval`, `bench`, `count-params`, `gradcheck`, `selftest`)
//! for scripted use.
//!
//! All randomness flows through caller-supplied ChaCha8 generators and all
//! kernels are sequential, so every result is reproducible bit-for-bit
//! from a seed.

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
