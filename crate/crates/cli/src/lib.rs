//! Command-line plumbing for `skei`: run directories, raw arrays, reports,
//! figures, benchmark grids and theory checks.

pub mod bench;
pub mod figures;
pub mod ingest;
pub mod rawarray;
pub mod report;
pub mod run;
pub mod rundir;
pub mod verify;
