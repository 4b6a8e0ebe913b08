//! Attribution-guided sparse activation for small transformer language models.
//!
//! The crate contains a small reverse-mode autodiff engine, a toy decoder-only
//! transformer whose attention heads and MLP neurons can be masked, per-unit
//! attribution metrics, activation planners, diagnostics for the error that
//! masking one layer induces in deeper layers' scores, and a BLEU evaluation
//! harness.

pub mod attribution;
pub mod chain;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod model;
pub mod network;
pub mod sparsify;
pub mod tensor;
pub mod tokenizer;

pub use attribution::{AttributionReport, Metric};
pub use error::{Error, Result};
pub use model::{ModelConfig, ToyModel};
pub use network::{GroupRef, UnitKind, UnitLayout, UnitMap, UnitNetwork};
pub use sparsify::{ActivationPlan, PlanMode, Scope};
