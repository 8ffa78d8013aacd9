//! Agents that learn what to say, how much of it to say, and what to do.
//!
//! The pieces fit together like this: a slotted broadcast [`channel`] carries
//! variable-size messages and drops the ones that collide; [`agent`] models
//! encode observations and inbound messages into actions, message payloads and
//! a learned message-size choice; [`trainer`] runs the joint training loop over
//! the two bundled environments ([`env::pomnist`] and [`env::traffic`]); and
//! [`metrics`] quantifies what the emerged protocol is actually doing.
//! Everything differentiable runs on the reverse-mode tape in [`nn`].

pub mod agent;
pub mod channel;
pub mod env;
pub mod error;
pub mod metrics;
pub mod mnist;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
