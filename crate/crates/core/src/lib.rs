//! Decoder transformer with progressive mixture-of-depths layers.
//!
//! Layers route a top-k subset of vision tokens through each block,
//! reweight tokens by a bounded routing weight, and follow a per-layer
//! retention schedule. Cost models and experiment harnesses sit on top.

pub mod config;
pub mod costmodel;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod overflow;
pub mod pmod;
pub mod schedule;

/// Version written into the first line of every CSV, `# pmod <name> v1`.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub(crate) fn schema_line(w: &mut impl std::io::Write, name: &str) -> std::io::Result<()> {
    writeln!(w, "# pmod {name} v{CSV_SCHEMA_VERSION}")
}
