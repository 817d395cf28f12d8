//! Run orchestration and the live intervention session.

pub mod cli;
pub mod protocol;
pub mod session;
