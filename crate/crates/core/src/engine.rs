//! The simulation engine: a deterministic period-by-period drive of the
//! fair-share scheduler with the mitigation loop attached.
//!
//! Each scheduling period, every runnable thread receives one timeslice
//! proportional to its relative weight (plus the dummy thread when awake),
//! consumes it, and logs one sensor sample. Timeslices are snapshotted at
//! the period start, so weight and flag changes made at an epoch boundary
//! take effect from the next period on. One epoch of a thread is `buffer_n`
//! of its context switches.

use std::path::Path;

use crate::leash::{
    actuator_apply, detector_step, sensor_log, ActuatorMode, HpcBuffer, LeashError, PolicyKind,
    SupervisorPolicy, ThreatState,
};
use crate::scenario::{LeashMode, Scenario, ScenarioError, ThreadKind};
use crate::sched::{dummy_timeslice, timeslice, RunQueue, SchedError, ThreadId, Weight, WeightMap};
use crate::workloads::{
    decode_windows, BehaviorModel, ChannelOutcome, CovertChannelSpec, WorkloadError,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Leash(#[from] LeashError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{0}")]
    Invalid(String),
}

/// One thread's state at one epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub thread: String,
    /// 1-based epoch index.
    pub epoch: u64,
    /// Per-event means over the epoch, in detector event order.
    pub means: Vec<f64>,
    pub threat_index: f64,
    /// Weight after this boundary's actuation, effective next period.
    pub weight: f64,
    pub flagged: bool,
    /// Length of the thread's final timeslice in the epoch, microseconds.
    pub timeslice_us: f64,
    /// CPU time over wall time across the epoch.
    pub cpu_share: f64,
    /// Cumulative virtual time (CPU time divided by weight), rounded.
    pub vtime_us: u64,
}

/// Per-thread aggregates over a whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreadSummary {
    pub name: String,
    pub total_cpu_us: f64,
    pub epochs: u64,
    pub flagged_epochs: u64,
    pub min_weight: f64,
    pub final_weight: f64,
    pub first_flag_epoch: Option<u64>,
    pub unflag_epoch: Option<u64>,
    /// Covert-channel outcome, receiver thread only.
    pub bandwidth_bps: Option<f64>,
    pub error_rate: Option<f64>,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Monitored event names, the column order of every `means` vector.
    pub events: Vec<String>,
    pub timeline: Vec<EpochRecord>,
    pub summaries: Vec<ThreadSummary>,
    pub channel: Option<ChannelOutcome>,
    /// Wall time actually simulated, microseconds (whole periods).
    pub duration_us: f64,
    pub periods: u64,
    /// Context switches of real (sensed) threads.
    pub switches: u64,
    pub detector_invocations: u64,
    /// CPU time consumed by the dummy thread.
    pub dummy_cpu_us: f64,
}

struct SimThread {
    name: String,
    id: ThreadId,
    model: BehaviorModel,
    weight: Weight,
    state: ThreatState,
    buffer: HpcBuffer,
    policy: SupervisorPolicy,
    epoch_cpu_us: f64,
    epoch_wall_start_us: f64,
    total_cpu_us: f64,
    vtime_us: f64,
    min_weight: f64,
    flagged_epochs: u64,
    first_flag_epoch: Option<u64>,
    unflag_epoch: Option<u64>,
}

/// Add a slice's overlap with each synchronization window to the budgets.
fn add_window_overlap(budgets: &mut [f64], start_us: f64, end_us: f64, window_us: f64) {
    if budgets.is_empty() || end_us <= start_us {
        return;
    }
    let mut w = (start_us / window_us).floor().max(0.0) as usize;
    while w < budgets.len() {
        let window_start = w as f64 * window_us;
        if window_start >= end_us {
            break;
        }
        let lo = start_us.max(window_start);
        let hi = end_us.min(window_start + window_us);
        if hi > lo {
            budgets[w] += hi - lo;
        }
        w += 1;
    }
}

/// Run a scenario. Relative trace paths resolve against `base_dir`.
pub fn run_at(scenario: &Scenario, base_dir: Option<&Path>) -> Result<RunOutput, EngineError> {
    scenario.validate()?;
    let leash_on = scenario.modes.leash == LeashMode::On;
    let actuator_mode = if scenario.modes.incremental_actuator {
        ActuatorMode::Incremental
    } else {
        ActuatorMode::Literal
    };
    let width = scenario.detector.events.len();

    let mut threads: Vec<SimThread> = Vec::with_capacity(scenario.threads.len());
    for (i, name) in scenario.threads.keys().enumerate() {
        threads.push(SimThread {
            name: name.clone(),
            id: ThreadId(i),
            model: scenario.build_model(name, base_dir)?,
            weight: Weight::new(scenario.sched.w_def()),
            state: ThreatState::default(),
            buffer: HpcBuffer::new(scenario.buffer_n, width),
            policy: scenario.policy.clone(),
            epoch_cpu_us: 0.0,
            epoch_wall_start_us: 0.0,
            total_cpu_us: 0.0,
            vtime_us: 0.0,
            min_weight: scenario.sched.w_def(),
            flagged_epochs: 0,
            first_flag_epoch: None,
            unflag_epoch: None,
        });
    }

    let mut rq = RunQueue::new();
    for t in &threads {
        rq.insert(t.id);
    }

    let mut window_budgets: Vec<f64> = scenario
        .covert
        .as_ref()
        .map(|c| vec![0.0; c.wire_windows()])
        .unwrap_or_default();
    let window_us = scenario.covert.as_ref().map(|c| c.sync_window_us);

    let period = scenario.sched.targeted_latency_us;
    let duration = scenario.duration_us as f64;
    let mut clock = 0.0f64;
    let mut periods = 0u64;
    let mut switches = 0u64;
    let mut detector_invocations = 0u64;
    let mut dummy_cpu_us = 0.0f64;
    let mut timeline: Vec<EpochRecord> = Vec::new();

    while clock < duration {
        for t in &threads {
            if rq.contains(t.id) && t.model.is_exhausted() {
                rq.remove(t.id);
                log::debug!("{} left the runqueue (trace exhausted)", t.name);
            }
        }
        if rq.is_empty() {
            break;
        }
        rq.update_dummy(|tid| threads[tid.0].state.flagged);

        // Snapshot this period's timeslices; boundary updates below only
        // influence the next period.
        let mut weights = WeightMap::new();
        for t in &threads {
            weights.insert(t.id, t.weight);
        }
        let mut slices: Vec<(usize, f64)> = Vec::new();
        for (i, t) in threads.iter().enumerate() {
            if rq.contains(t.id) {
                slices.push((i, timeslice(&scenario.sched, &rq, &weights, t.id)?));
            }
        }
        let dummy_slice = dummy_timeslice(&scenario.sched, &rq, &weights)?;

        let mut offset = clock;
        for (i, slice) in slices {
            let t = &mut threads[i];
            let counts = t.model.emit_counts(slice)?;
            switches += 1;
            t.total_cpu_us += slice;
            t.epoch_cpu_us += slice;
            t.vtime_us += slice / t.weight.value();
            if t.model.is_covert_receiver() {
                if let Some(w) = window_us {
                    add_window_overlap(&mut window_budgets, offset, offset + slice, w);
                }
            }

            let boundary = sensor_log(&mut t.buffer, &mut t.state, &counts)?;
            if boundary {
                let wall_end = offset + slice;
                let epoch_wall = wall_end - t.epoch_wall_start_us;
                let (means, threat_index, flagged) = if leash_on {
                    detector_invocations += 1;
                    let out = detector_step(
                        &mut t.state,
                        &mut t.buffer,
                        &scenario.detector,
                        &mut t.policy,
                        t.weight,
                        &scenario.sched,
                        scenario.modes.strict_alg1,
                    )?;
                    // An unflagged thread is back in its default state; the
                    // actuator has nothing left to apply.
                    t.weight = if out.unflagged {
                        Weight::new(scenario.sched.w_def())
                    } else {
                        actuator_apply(
                            t.weight,
                            out.threat_index,
                            out.prev_threat_index,
                            out.recovering,
                            scenario.actuator_gamma,
                            &scenario.sched,
                            actuator_mode,
                        )?
                    };
                    if t.weight.value() < t.min_weight {
                        t.min_weight = t.weight.value();
                    }
                    if out.newly_flagged && t.first_flag_epoch.is_none() {
                        t.first_flag_epoch = Some(t.state.epoch_index);
                        log::debug!("{} flagged at epoch {}", t.name, t.state.epoch_index);
                    }
                    if out.unflagged && t.unflag_epoch.is_none() {
                        t.unflag_epoch = Some(t.state.epoch_index);
                        log::debug!("{} unflagged at epoch {}", t.name, t.state.epoch_index);
                    }
                    if out.flagged {
                        t.flagged_epochs += 1;
                    }
                    (out.means, t.state.threat_index, t.state.flagged)
                } else {
                    // Observe-only: keep the epoch cadence and the records,
                    // never flag or actuate.
                    let means = t.buffer.means();
                    t.buffer.reset();
                    t.state.cs_count = 0;
                    t.state.epoch_index += 1;
                    (means, 0.0, false)
                };
                timeline.push(EpochRecord {
                    thread: t.name.clone(),
                    epoch: t.state.epoch_index,
                    means,
                    threat_index,
                    weight: t.weight.value(),
                    flagged,
                    timeslice_us: slice,
                    cpu_share: t.epoch_cpu_us / epoch_wall,
                    vtime_us: t.vtime_us.round() as u64,
                });
                t.epoch_cpu_us = 0.0;
                t.epoch_wall_start_us = wall_end;
            }
            offset += slice;
        }
        dummy_cpu_us += dummy_slice;

        clock += period;
        periods += 1;
    }

    let channel = match &scenario.covert {
        Some(spec) => Some(decode_windows(spec, &window_budgets, spec.span_us())?),
        None => None,
    };

    let summaries = threads
        .iter()
        .map(|t| {
            let covert = t.model.is_covert_receiver();
            ThreadSummary {
                name: t.name.clone(),
                total_cpu_us: t.total_cpu_us,
                epochs: t.state.epoch_index,
                flagged_epochs: t.flagged_epochs,
                min_weight: t.min_weight,
                final_weight: t.weight.value(),
                first_flag_epoch: t.first_flag_epoch,
                unflag_epoch: t.unflag_epoch,
                bandwidth_bps: channel.as_ref().filter(|_| covert).map(|c| c.bandwidth_bps),
                error_rate: channel.as_ref().filter(|_| covert).map(|c| c.error_rate),
            }
        })
        .collect();

    Ok(RunOutput {
        events: scenario.detector.events.clone(),
        timeline,
        summaries,
        channel,
        duration_us: clock,
        periods,
        switches,
        detector_invocations,
        dummy_cpu_us,
    })
}

/// Run a scenario with trace paths resolved against the working directory.
pub fn run(scenario: &Scenario) -> Result<RunOutput, EngineError> {
    run_at(scenario, None)
}

/// One row of a receiver-share sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ShareSweepRow {
    pub share: f64,
    pub bandwidth_bps: f64,
    pub error_rate: f64,
}

/// Analytic covert-channel sweep: bandwidth and error rate as a function of
/// a fixed receiver CPU share.
pub fn sweep_share(
    spec: &CovertChannelSpec,
    shares: &[f64],
) -> Result<Vec<ShareSweepRow>, EngineError> {
    let mut rows = Vec::with_capacity(shares.len());
    for &share in shares {
        let out = crate::workloads::covert_channel_run(spec, share, spec.span_us())?;
        rows.push(ShareSweepRow {
            share,
            bandwidth_bps: out.bandwidth_bps,
            error_rate: out.error_rate,
        });
    }
    Ok(rows)
}

/// One row of an epoch-length sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct NSweepRow {
    pub n: usize,
    pub bandwidth_bps: f64,
    /// Detector runs divided by sensed context switches; 1/n by cadence.
    pub detector_invocations_per_switch: f64,
}

/// Sweep the sensor buffer capacity over a covert scenario. Each run's
/// duration is rounded up to a whole number of epochs so the invocation
/// ratio is measured over complete epochs only.
pub fn sweep_n(
    base: &Scenario,
    values: &[usize],
    base_dir: Option<&Path>,
) -> Result<Vec<NSweepRow>, EngineError> {
    if base.covert.is_none() {
        return Err(EngineError::Invalid(
            "buffer-size sweep needs a covert scenario to measure bandwidth".into(),
        ));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &n in values {
        if n == 0 {
            return Err(EngineError::Invalid("buffer size must be >= 1".into()));
        }
        let mut s = base.clone();
        s.buffer_n = n;
        let chunk = n as f64 * s.sched.targeted_latency_us;
        let chunks = (base.duration_us as f64 / chunk).ceil().max(1.0);
        s.duration_us = (chunks * chunk).ceil() as u64;
        let out = run_at(&s, base_dir)?;
        rows.push(NSweepRow {
            n,
            bandwidth_bps: out.channel.as_ref().map_or(0.0, |c| c.bandwidth_bps),
            detector_invocations_per_switch: if out.switches == 0 {
                0.0
            } else {
                out.detector_invocations as f64 / out.switches as f64
            },
        });
    }
    Ok(rows)
}

/// One row of a supervisor-policy comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRow {
    pub policy: String,
    pub thread: String,
    pub first_flag_epoch: Option<u64>,
    pub unflag_epoch: Option<u64>,
    pub epochs_to_unflag: Option<u64>,
    pub min_weight: f64,
}

/// Run the same scenario under the static and the adaptive supervisor and
/// report how each treats the bursty thread: when it was flagged, when it
/// was released, and how deep its weight was cut.
pub fn compare_policies(
    base: &Scenario,
    base_dir: Option<&Path>,
) -> Result<Vec<PolicyRow>, EngineError> {
    let bursty = base
        .threads
        .iter()
        .find(|(_, s)| s.kind == Some(ThreadKind::Bursty))
        .map(|(n, _)| n.clone())
        .ok_or_else(|| {
            EngineError::Invalid("policy comparison needs a bursty thread to track".into())
        })?;
    let mut rows = Vec::new();
    for kind in [PolicyKind::Static, PolicyKind::Adaptive] {
        let mut s = base.clone();
        s.policy.kind = kind;
        let out = run_at(&s, base_dir)?;
        let summary = out
            .summaries
            .iter()
            .find(|t| t.name == bursty)
            .expect("tracked thread is in the roster");
        rows.push(PolicyRow {
            policy: match kind {
                PolicyKind::Static => "static",
                PolicyKind::Adaptive => "adaptive",
            }
            .to_string(),
            thread: bursty.clone(),
            first_flag_epoch: summary.first_flag_epoch,
            unflag_epoch: summary.unflag_epoch,
            epochs_to_unflag: summary
                .first_flag_epoch
                .zip(summary.unflag_epoch)
                .map(|(f, u)| u - f),
            min_weight: summary.min_weight,
        });
    }
    Ok(rows)
}
