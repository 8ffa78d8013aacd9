//! The two bundled environments.

pub mod pomnist;
pub mod traffic;
