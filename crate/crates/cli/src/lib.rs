//! Run directories and the command implementations behind the `probssl`
//! binary.

pub mod commands;
pub mod rundir;
