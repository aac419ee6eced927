//! Deterministic simulation and trace checking for the min+1 breadth-first
//! spanning-tree protocol in the presence of permanent Byzantine processes.
//!
//! Modules, bottom-up:
//! - [`topology`]: graphs, hop distances, containment zones `S_B` / `S_B*`.
//! - [`protocol`]: guards, the circular successor rule, atomic steps.
//! - [`adversary`]: what Byzantine processes publish.
//! - [`scheduler`]: daemons with bounded fairness and the run loop.
//! - [`checker`]: legitimacy, containment, perturbation counting.
//! - [`harness`]: experiment configs, artifacts, campaigns.
//! - [`exhaustive`]: explicit-state check over all daemon choices on small graphs.

pub mod adversary;
pub mod checker;
pub mod exhaustive;
pub mod harness;
pub mod protocol;
pub mod scheduler;
pub mod topology;

pub use adversary::{AdversaryKind, AdversaryStrategy};
pub use harness::{ExperimentConfig, RunMetrics};
pub use checker::{PerturbationReport, StepRecord, StopReason, StrictVerdict, Trace};
pub use protocol::{Action, Configuration, ProcessState, Rule};
pub use scheduler::{RunOptions, SchedulerKind, SchedulerPolicy};
pub use topology::{GraphSpec, ProcessId, Topology, Zone, ZoneReport};
