//! Monte Carlo welfare certificates for consumption under multiplicative
//! habit formation.
//!
//! The pipeline is: simulate deflator paths ([`market`]), evaluate a
//! calibrated approximation to ratio consumption ([`approx`]) and its habit
//! ([`habit`]), build dual controls from it ([`duality`], using the
//! conditional expectations of [`condexp`]), and report the duality gap as
//! a fraction of initial wealth. [`experiment`] drives single runs and sweeps.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::field_reassign_with_default
)]

pub mod approx;
pub mod condexp;
pub mod duality;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod habit;
pub mod market;
pub mod model;
pub mod preferences;

pub use approx::{ApproxKind, QMode};
pub use duality::{Backend, EtaRule, WelfareReport};
pub use error::{Error, Result};
pub use exec::Exec;
pub use habit::HabitParams;
pub use market::{MarketParams, PathBatch, TimeGrid};
pub use model::ModelParams;
pub use preferences::PreferenceParams;
