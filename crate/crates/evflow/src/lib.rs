//! Traffic equilibria under EV charging demand, and charger placement on top of them.
//!
//! Two interchangeable equilibrium backends drive the placement search:
//!
//! * a convex link-space congestion game ([`equilibrium`]), where charging
//!   stations are self-loop links and Nash equilibria are minimizers of an
//!   extended Beckmann potential, and
//! * an atomic mesoscopic queue simulator ([`queuesim`]) with spatial-queue
//!   links, spillback, non-signalized intersections and 3-stage charging
//!   stations, driven to an approximate equilibrium by a better-response
//!   heuristic ([`betterresponse`]).
//!
//! The two are tied together by a calibration and recovery pipeline:
//! per-link BPR delay laws are fitted from queue-simulator measurements
//! ([`delay`]), equilibrium link flows are computed in link-space, explicit
//! route flows are recovered by constrained least squares ([`routes`]), and
//! the recovered routes seed the simulator. [`placement`] runs greedy,
//! greedy-plus-swap and exhaustive charger selection over either backend.

pub mod betterresponse;
pub mod delay;
pub mod equilibrium;
mod error;
pub mod graph;
pub mod network;
pub mod placement;
pub mod queuesim;
pub mod rng;
pub mod routes;

pub use error::{Error, Result};
