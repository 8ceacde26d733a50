//! Discrete-event core: virtual clock, event queue and the array simulation.

mod sim;
mod time;

pub use sim::{SimConfig, SimError, Simulation};
pub use time::{EventQueue, SimTime};
