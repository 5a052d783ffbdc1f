//! Generator models, equilibria, linearization and frequency response functions.

pub mod equilibrium;
pub mod frf;
pub mod linear;
pub mod machine;
pub mod network;
pub mod params;

pub use equilibrium::{solve_equilibrium, EquilibriumPoint, TerminalCondition};
pub use frf::{frf, frf_jet, Frf, FrfJet};
pub use linear::{linearize, GeneratorModel, LinearModel, ModelJet};
pub use machine::{Controls, OMEGA_S};
pub use network::{Branch, Bus, BusKind, Network, PowerFlow};
pub use params::{GeneratorParams, ModelOrder, ParamKind, ParamPrior};
