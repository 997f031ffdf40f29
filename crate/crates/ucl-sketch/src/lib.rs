//! Learning-augmented sketch for per-key frequency estimation on unending
//! streams.
//!
//! The pipeline splits into a constant-time *data plane* and a learned
//! *control plane*:
//!
//! * [`dataplane`] — heavy filter + count-min counter array + Bloom filter.
//!   Every update touches at most `1 + depth + bloom_hashes` hash
//!   invocations and periodically emits counter [`dataplane::Snapshot`]s and
//!   [`dataplane::KeyReport`]s.
//! * [`sensing`] — the implicit 0/±1 measurement operator `A` tying reported
//!   keys to counters (`y = A·x`), a rank diagnostic for stacked transformed
//!   operators, and a closed-form MAP point estimator.
//! * [`recovery`] — classical decoders over the same operator: LSQR, OMP and
//!   count-min / count-sketch point queries.
//! * [`nn`] + [`solver`] — a small hand-rolled MLP stack (manual backprop,
//!   Adam) and the bucket-shared equivariant solver trained without ground
//!   truth from snapshots alone.
//! * [`controlplane`] — key registry, frozen query contexts, per-key queries.
//! * [`metrics`], [`streamgen`], [`harness`] — evaluation metrics, Zipf
//!   stream generation and trace IO, and the benchmark orchestration used by
//!   the `ucl` binary.
//!
//! Everything is deterministic under a single master seed; independent hash
//! and RNG namespaces are derived from it (see [`hash`]).

pub mod config;
pub mod controlplane;
pub mod dataplane;
pub mod error;
pub mod harness;
pub mod hash;
pub mod key;
pub mod metrics;
pub mod nn;
pub mod recovery;
pub mod sensing;
pub mod solver;
pub mod streamgen;

pub use config::AppConfig;
pub use error::{Error, Result};
pub use key::{Count, KeyBytes, StreamItem};
