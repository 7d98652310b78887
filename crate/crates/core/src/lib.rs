//! Layer-adaptive KV-cache compression.
//!
//! The crate implements DynamicKV's prefill-time budget allocation and
//! progressive cache update ([`dynamickv`]), the fixed-pattern baselines it is
//! measured against ([`policies`]), a seeded toy transformer that supplies real
//! KV states and window attention ([`toy_model`]), the `KVTRACE1` attention
//! trace format ([`trace`]), and evaluation helpers ([`harness`]).

pub mod dynamickv;
pub mod error;
pub mod harness;
pub mod policies;
pub mod tensor;
pub mod toy_model;
pub mod trace;

pub use dynamickv::{run_prefill_compression, BudgetReport, DynamicOutcome, LayerBudgets};
pub use error::{Error, Result};
pub use harness::{EvalCase, EvalReport, MemoryGeometry};
pub use policies::{PolicyConfig, PolicyKind, RetentionPlan};
pub use toy_model::{KVState, Model, ModelConfig};
pub use trace::{AttentionTrace, Profile};

/// Version string stamped into every JSON/CSV artifact.
pub const FORMAT_VERSION: &str = "dynkv/1";
