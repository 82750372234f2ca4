//! Federated averaging with stochastically quantized uplinks and
//! range-driven bit-width selection.
//!
//! * [`numerics`]: desk-scale models with hand-written gradients.
//! * [`quantizer`]: stochastic uniform quantizer and its wire frame.
//! * [`policy`]: per-round bit-width selection rules.
//! * [`federation`]: the FedAvg round loop and its instrumentation.
//! * [`analysis`]: convergence-bound and optimal-level evaluators.
//! * [`rng`]: keyed random streams shared by all of the above.

pub mod analysis;
pub mod federation;
pub mod numerics;
pub mod policy;
pub mod quantizer;
pub mod rng;

pub use federation::{run_experiment, FederationConfig, RoundReport, RunOutput};
pub use numerics::{DatasetShard, ModelSpec, ParamVector};
pub use policy::{PolicyConfig, PolicyKind};
pub use quantizer::QuantizedPayload;
pub use rng::RandomStream;
