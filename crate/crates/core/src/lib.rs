// SPDX-License-Identifier: MIT OR Apache-2.0
pub mod error;
pub mod harness;
pub mod model;
pub mod patching;
pub mod scorer;
pub mod superscopes;
pub mod trace;

pub use error::{Error, Result};
