//! Hierarchical multi-positive contrastive learning over feature vectors.
//!
//! Records carry a three-level label (main class, subclass, patent). An
//! encoder is trained so that images of the same patent, then the same
//! subclass, then the same main class sit progressively closer, and retrieval
//! is scored with mAP, nDCG, MRR@K and Acc@K at each of the three levels.
//!
//! ```no_run
//! use hiercl::data::{generate_synthetic, split_by_patent, SyntheticSpec, DEFAULT_RATIOS};
//! use hiercl::encoder::{eval_split_for, train, EvalTarget, TrainConfig};
//! use hiercl::retrieval::{evaluate, DEFAULT_KS};
//!
//! # fn main() -> hiercl::Result<()> {
//! let ds = generate_synthetic(&SyntheticSpec::default())?;
//! let split = split_by_patent(&ds, DEFAULT_RATIOS, 0)?;
//! let (params, _log) = train(&ds, &split, &TrainConfig::default())?;
//! let test = eval_split_for(&ds, &split, EvalTarget::Test, 2)?;
//! let report = evaluate(&params, &test, &DEFAULT_KS)?;
//! # Ok(())
//! # }
//! ```

// `!(x >= 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod numerics;
pub mod retrieval;
pub mod sampler;
pub mod taxonomy;

pub use error::{Error, Result};
