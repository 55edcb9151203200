//! Minimal dense-tensor reverse-mode differentiation.
//!
//! A [`Tape`] records primitive operations on f64 tensors of up to three
//! dimensions; `backward` replays them in exact reverse order and accumulates
//! analytic gradients. The primitive set is just large enough to express the
//! forecasting models and their training objective, and every primitive is
//! validated against central finite differences (see [`check::grad_check`]).

mod checkpoint;
mod init;
mod optim;
mod tape;

pub mod check;

pub use checkpoint::{load_tensors, save_tensors};
pub use init::kaiming_normal;
pub use optim::{adam_step, AdamState};
pub use tape::{Tape, Var};
