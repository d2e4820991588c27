//! Recurrent JEPA learning with forward-in-time sensitivity propagation.
//!
//! The crate covers the gated recurrent cell and its O(n²) sensitivity
//! recursion, reference gradients (finite differences, full RTRL, BPTT),
//! the recurrent JEPA model with a linear testbed, synthetic data, the two
//! trainers, and spectral/moment analysis.

pub mod analysis;
pub mod cells;
pub mod data;
pub mod error;
pub mod jepa;
pub mod numerics;
pub mod oracles;
pub mod rfp;
pub mod trainer;

pub use analysis::{covariance_spectrum, moment_closed_form, moment_monte_carlo, scaling_bench, tau_scaling_check};
pub use cells::{
    rgc_gate_factors, rgc_source_terms, rgc_state_jacobian, rgc_step, time_decay_step,
    GateActivation, GateFactors, RgcGates, RgcState, RgcWeights, SourceTerms, TimeDecayLayer,
    TimeDecayParams, TwoPointCell,
};
pub use data::{read_dataset, write_dataset, LatentProcessParams, SequenceDataset};
pub use error::{Error, Result};
pub use jepa::{JepaConfig, JepaModel, LinearTestbed, LossKind, Predictor, PredictorKind, TestbedConfig};
pub use numerics::{Matrix, Rng};
pub use oracles::{bptt_grad, finite_diff_grad, full_rtrl_grad, GradientReport};
pub use rfp::{assemble_gradient, generic_two_point_update, rfp_init, rfp_update, GenericSensitivity, SensitivityState};
pub use trainer::{aggregate_loss, train_bptt, train_rfp, train_testbed, Psi, TrainConfig, TrainMetrics, TrainMode};
