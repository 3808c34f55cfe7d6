//! Deterministic simulator of a fair-share OS scheduler coupled to a
//! reactive throttling loop driven by hardware performance counters.
//!
//! The simulator runs entirely in virtual time on a single CPU model:
//! threads receive timeslices proportional to their relative weight, a
//! per-thread sensor accumulates counter deltas at every context switch,
//! and once per epoch a detector/actuator pair adjusts thread weights to
//! starve threads whose counter profile crosses calibrated thresholds.
//!
//! Module map:
//!
//! * [`sched`] — weight ladder, runqueue, timeslice arithmetic.
//! * [`leash`] — sensor buffer, detector, supervisor policies, actuator.
//! * [`workloads`] — synthetic thread behaviors and the covert-channel model.
//! * [`event_select`] — counter-event detectability scoring and selection.
//! * [`trace`] — counter-trace tables and epoch-mean matrices.
//! * [`scenario`] — scenario documents: parsing and validation.
//! * [`engine`] — the discrete-event loop tying everything together.
//! * [`report`] — stable CSV rendering of run outputs.

pub mod engine;
pub mod event_select;
pub mod leash;
pub mod report;
pub mod scenario;
pub mod sched;
pub mod trace;
pub mod workloads;
