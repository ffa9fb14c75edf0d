//! Privacy-tunable GAN synthesis of relational tables.
//!
//! Records are laid out as small square matrices, a convolutional
//! generator/discriminator pair plus a label classifier is trained on them,
//! and the generator produces a fully synthetic table. A hinge on the
//! discriminator-feature statistics trades fidelity for privacy. The
//! evaluation and attack modules measure both sides of that trade.

pub mod attack;
pub mod checkpoint;
pub mod codec;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod schema;
pub mod table;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
