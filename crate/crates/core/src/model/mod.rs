//! The entity-guided fusion network.
//!
//! Data flow for one image pair, with `C` shallow channels:
//!
//! ```text
//! ir, vi [1×H×W] ── encoder ──> Φ_s [C×H×W] ── channel cross-attention ──> Φ_ic
//!   ── token self-attention ──> Φ_ct ── entity-guided attention ──> Φ_enm
//!   ── concat(ir, vi) ──> Φ_sr [2C×H×W] ──┬─ reconstructor ──> I_f [1×H×W]
//!                                         └─ classifier ─────> p̂ [9]
//! ```

mod checkpoint;
mod config;
mod layout;
mod network;
mod params;

pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use layout::Layout;
pub use network::{canonical_entities, ForwardOptions, ForwardTrace, Network, Outputs};
pub use params::{init_params, param_specs, Init, ParamSpec};

/// The two source modalities, in the order their features are concatenated.
pub const MODALITIES: [&str; 2] = ["ir", "vi"];
