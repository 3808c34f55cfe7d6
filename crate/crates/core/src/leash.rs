//! The reactive mitigation loop: a per-thread sensor buffer of counter
//! deltas, an epoch detector that flags threshold violations, a supervisor
//! that emits penalty/reward control values, and an actuator that converts
//! the accumulated threat index into a weight adjustment.
//!
//! One epoch = `capacity` context switches of a thread. At every switch the
//! sensor logs that thread's counter deltas; when the buffer fills, the
//! detector consumes it, updates the flag and threat index, and the actuator
//! rescales the thread's weight within the ladder bounds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sched::{SchedParams, Weight};

/// Upper bound on simultaneously monitored events: one per counter register.
pub const HPC_REGISTERS: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum LeashError {
    #[error("sensor buffer already holds {capacity} samples; detector did not run")]
    BufferOverflow { capacity: usize },
    #[error("sample width {got} does not match monitored event count {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("counter delta at event index {index} is negative ({value})")]
    NegativeCount { index: usize, value: i64 },
    #[error("detector needs a full buffer, got {fill}/{capacity} samples")]
    BufferNotFull { fill: usize, capacity: usize },
    #[error("actuator gamma must lie in (0, 1), got {0}")]
    InvalidActuatorGamma(f64),
    #[error("invalid detector configuration: {0}")]
    InvalidConfig(String),
}

/// Fixed-capacity buffer of per-switch counter deltas for one thread.
#[derive(Debug, Clone)]
pub struct HpcBuffer {
    capacity: usize,
    width: usize,
    samples: Vec<Vec<i64>>,
}

impl HpcBuffer {
    pub fn new(capacity: usize, width: usize) -> HpcBuffer {
        HpcBuffer {
            capacity,
            width,
            samples: Vec::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn fill(&self) -> usize {
        self.samples.len()
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() == self.capacity
    }

    /// Append one sample. Returns true when the buffer just became full,
    /// i.e. the epoch boundary has been reached and the detector must run
    /// before anything else is logged.
    pub fn log(&mut self, counts: &[i64]) -> Result<bool, LeashError> {
        if self.is_full() {
            return Err(LeashError::BufferOverflow {
                capacity: self.capacity,
            });
        }
        if counts.len() != self.width {
            return Err(LeashError::WidthMismatch {
                expected: self.width,
                got: counts.len(),
            });
        }
        if let Some(index) = counts.iter().position(|c| *c < 0) {
            return Err(LeashError::NegativeCount {
                index,
                value: counts[index],
            });
        }
        self.samples.push(counts.to_vec());
        Ok(self.is_full())
    }

    /// Per-event means over the logged samples.
    pub fn means(&self) -> Vec<f64> {
        let n = self.samples.len().max(1) as f64;
        let mut sums = vec![0.0; self.width];
        for sample in &self.samples {
            for (s, c) in sums.iter_mut().zip(sample) {
                *s += *c as f64;
            }
        }
        sums.iter_mut().for_each(|s| *s /= n);
        sums
    }

    pub fn reset(&mut self) {
        self.samples.clear();
    }
}

/// Per-thread detector state.
#[derive(Debug, Clone, Default)]
pub struct ThreatState {
    /// Accumulated control values; positive under penalty, negative while
    /// recovering, always zero when unflagged.
    pub threat_index: f64,
    pub flagged: bool,
    /// Number of completed epochs (detector invocations), starting at 0.
    pub epoch_index: u64,
    /// Context switches logged since the last detector run; mirrors the
    /// sensor buffer fill and stays below its capacity between epochs.
    pub cs_count: usize,
}

/// Monitored events and their per-event violation thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub events: Vec<String>,
    pub thresholds: Vec<f64>,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), LeashError> {
        if self.events.is_empty() {
            return Err(LeashError::InvalidConfig(
                "detector.events must name at least one event".into(),
            ));
        }
        if self.events.len() > HPC_REGISTERS {
            return Err(LeashError::InvalidConfig(format!(
                "detector.events lists {} events but only {} counter registers exist",
                self.events.len(),
                HPC_REGISTERS
            )));
        }
        if self.events.len() != self.thresholds.len() {
            return Err(LeashError::InvalidConfig(format!(
                "detector.thresholds has {} entries for {} events",
                self.thresholds.len(),
                self.events.len()
            )));
        }
        if let Some(i) = self
            .thresholds
            .iter()
            .position(|t| !(t.is_finite() && *t > 0.0))
        {
            return Err(LeashError::InvalidConfig(format!(
                "detector.thresholds[{}] must be a positive number, got {}",
                i, self.thresholds[i]
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.events {
            if !seen.insert(e) {
                return Err(LeashError::InvalidConfig(format!(
                    "detector.events lists {e} more than once"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Static,
    Adaptive,
}

/// Control-value supervisor. The static policy emits fixed constants; the
/// adaptive policy escalates, growing the penalty by one per penalized
/// epoch and the reward magnitude by one per recovering epoch. Escalation
/// state resets when the thread unflags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisorPolicy {
    pub kind: PolicyKind,
    /// Penalty emitted per violating epoch under the static policy; > 0.
    #[serde(default = "default_static_penalty")]
    pub static_penalty: f64,
    /// Reward emitted per recovering epoch under the static policy; < 0.
    #[serde(default = "default_static_reward")]
    pub static_reward: f64,
    #[serde(skip)]
    pub penalty_state: f64,
    #[serde(skip)]
    pub reward_state: f64,
}

fn default_static_penalty() -> f64 {
    1.0
}

fn default_static_reward() -> f64 {
    -1.0
}

impl Default for SupervisorPolicy {
    fn default() -> Self {
        SupervisorPolicy {
            kind: PolicyKind::Adaptive,
            static_penalty: default_static_penalty(),
            static_reward: default_static_reward(),
            penalty_state: 0.0,
            reward_state: 0.0,
        }
    }
}

impl SupervisorPolicy {
    pub fn statik(penalty: f64, reward: f64) -> SupervisorPolicy {
        SupervisorPolicy {
            kind: PolicyKind::Static,
            static_penalty: penalty,
            static_reward: reward,
            penalty_state: 0.0,
            reward_state: 0.0,
        }
    }

    pub fn adaptive() -> SupervisorPolicy {
        SupervisorPolicy::default()
    }

    pub fn validate(&self) -> Result<(), LeashError> {
        if self.kind == PolicyKind::Static {
            if !self.static_penalty.is_finite() || self.static_penalty <= 0.0 {
                return Err(LeashError::InvalidConfig(format!(
                    "policy.static_penalty must be > 0, got {}",
                    self.static_penalty
                )));
            }
            if !self.static_reward.is_finite() || self.static_reward >= 0.0 {
                return Err(LeashError::InvalidConfig(format!(
                    "policy.static_reward must be < 0, got {}",
                    self.static_reward
                )));
            }
        }
        Ok(())
    }

    /// Control value for one epoch: a positive penalty while the thread is
    /// flagged and violating, a negative reward while it is flagged and
    /// recovering, zero when unflagged.
    pub fn step(&mut self, flagged: bool, mu_exceeds_tau: bool) -> f64 {
        if !flagged {
            return 0.0;
        }
        if mu_exceeds_tau {
            match self.kind {
                PolicyKind::Static => self.static_penalty,
                PolicyKind::Adaptive => {
                    self.penalty_state += 1.0;
                    self.penalty_state
                }
            }
        } else {
            match self.kind {
                PolicyKind::Static => self.static_reward,
                PolicyKind::Adaptive => {
                    self.reward_state -= 1.0;
                    self.reward_state
                }
            }
        }
    }

    pub fn reset(&mut self) {
        self.penalty_state = 0.0;
        self.reward_state = 0.0;
    }
}

/// What the detector concluded at an epoch boundary.
#[derive(Debug, Clone)]
pub struct EpochOutcome {
    /// Per-event means over the consumed buffer.
    pub means: Vec<f64>,
    /// Supervisor output folded into the threat index this epoch.
    pub control_value: f64,
    pub threat_index: f64,
    pub prev_threat_index: f64,
    pub flagged: bool,
    pub newly_flagged: bool,
    pub unflagged: bool,
    /// Flagged with every mean at or below its threshold this epoch.
    pub recovering: bool,
}

/// Consume a full sensor buffer and advance one epoch.
///
/// While flagged, the supervisor's control value accumulates into the
/// threat index; the thread unflags (threat index cleared, supervisor
/// reset) once it is recovering and its weight has been restored to the
/// default. An unflagged thread whose mean reaches any threshold is
/// flagged, leaving the threat index untouched so the first flagged epoch
/// carries no weight change yet.
///
/// `strict_unflag` drops the recovery requirement from the unflag test:
/// a flagged thread at default weight then unflags even while violating,
/// which keeps a fresh attacker oscillating between flagged and unflagged
/// without ever being throttled. Kept selectable for comparison runs.
///
/// Once the weight has been clamped to the ladder floor, further penalties
/// stop accumulating: the threat index saturates until the thread's means
/// fall back below threshold and recovery drains it.
pub fn detector_step(
    state: &mut ThreatState,
    buf: &mut HpcBuffer,
    cfg: &DetectorConfig,
    policy: &mut SupervisorPolicy,
    current_weight: Weight,
    sched: &SchedParams,
    strict_unflag: bool,
) -> Result<EpochOutcome, LeashError> {
    if !buf.is_full() {
        return Err(LeashError::BufferNotFull {
            fill: buf.fill(),
            capacity: buf.capacity(),
        });
    }
    if cfg.thresholds.len() != buf.width() {
        return Err(LeashError::InvalidConfig(format!(
            "buffer width {} does not match {} configured thresholds",
            buf.width(),
            cfg.thresholds.len()
        )));
    }

    let means = buf.means();
    // Penalty when any mean strictly exceeds its threshold; the complement
    // (all means at or below threshold) is the recovering condition.
    let violating = means
        .iter()
        .zip(&cfg.thresholds)
        .any(|(mu, tau)| *mu > *tau);
    // Flag trigger is inclusive: a mean sitting exactly on the threshold
    // flags an unflagged thread.
    let crossing = means
        .iter()
        .zip(&cfg.thresholds)
        .any(|(mu, tau)| *mu >= *tau);

    let prev_threat_index = state.threat_index;
    let was_flagged = state.flagged;
    let recovering = was_flagged && !violating;
    let mut control_value = 0.0;
    let mut unflagged = false;

    if state.flagged {
        let at_floor = current_weight.value() <= sched.w_min();
        if violating && at_floor {
            // Saturated: the actuator cannot push the weight any lower, so
            // the threat index holds steady instead of growing without bound.
        } else {
            control_value = policy.step(true, violating);
            state.threat_index += control_value;
        }
        let weight_restored = current_weight.value() == sched.w_def();
        let unflag = if strict_unflag {
            weight_restored
        } else {
            recovering && weight_restored
        };
        if unflag {
            state.flagged = false;
            state.threat_index = 0.0;
            policy.reset();
            unflagged = true;
        }
    }

    let mut newly_flagged = false;
    if !state.flagged && crossing {
        state.flagged = true;
        newly_flagged = true;
    }

    buf.reset();
    state.cs_count = 0;
    state.epoch_index += 1;

    Ok(EpochOutcome {
        means,
        control_value,
        threat_index: state.threat_index,
        prev_threat_index,
        flagged: state.flagged,
        newly_flagged,
        unflagged,
        recovering,
    })
}

/// Log one context switch worth of counter deltas for a thread. Returns
/// true at the epoch boundary, i.e. when the buffer just filled and the
/// detector must run next.
pub fn sensor_log(
    buf: &mut HpcBuffer,
    state: &mut ThreatState,
    counts: &[i64],
) -> Result<bool, LeashError> {
    let boundary = buf.log(counts)?;
    state.cs_count += 1;
    Ok(boundary)
}

/// How the actuator folds the threat index into the weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActuatorMode {
    /// Rescale by the full threat index each epoch:
    /// `w_i = w_{i-1} * (1 - gamma * T_i)`.
    #[default]
    Literal,
    /// Rescale by the change in threat index each epoch:
    /// `w_i = w_{i-1} * (1 - gamma)^(T_i - T_{i-1})`, so every rise in the
    /// threat index cuts the weight by `gamma` and every fall restores it
    /// by the same factor.
    Incremental,
}

/// Apply one epoch's weight adjustment and clamp to the ladder bounds.
/// A recovering thread whose raw result reaches the default weight snaps
/// to exactly the default so the unflag test can use equality.
pub fn actuator_apply(
    weight: Weight,
    threat_index: f64,
    prev_threat_index: f64,
    recovering: bool,
    actuator_gamma: f64,
    sched: &SchedParams,
    mode: ActuatorMode,
) -> Result<Weight, LeashError> {
    if !(actuator_gamma > 0.0 && actuator_gamma < 1.0) {
        return Err(LeashError::InvalidActuatorGamma(actuator_gamma));
    }
    let raw = match mode {
        ActuatorMode::Literal => weight.value() * (1.0 - actuator_gamma * threat_index),
        ActuatorMode::Incremental => {
            weight.value() * (1.0 - actuator_gamma).powf(threat_index - prev_threat_index)
        }
    };
    if recovering && raw >= sched.w_def() {
        return Ok(Weight::new(sched.w_def()));
    }
    Ok(sched.clamp_weight(raw))
}

/// Per-event violation thresholds from a benign corpus: mean plus `k`
/// standard deviations (population) of the per-epoch means observed across
/// all matrices, per event column.
pub fn calibrate_thresholds(
    benign: &[crate::trace::EventTraceMatrix],
    k: f64,
) -> Result<Vec<f64>, LeashError> {
    let first = benign.first().ok_or_else(|| {
        LeashError::InvalidConfig("calibration needs at least one benign trace".into())
    })?;
    let width = first.events.len();
    for m in benign {
        if m.events != first.events {
            return Err(LeashError::InvalidConfig(format!(
                "benign traces disagree on events: [{}] vs [{}]",
                first.events.join(","),
                m.events.join(",")
            )));
        }
    }
    let mut taus = Vec::with_capacity(width);
    for e in 0..width {
        let column: Vec<f64> = benign
            .iter()
            .flat_map(|m| m.rows.iter().map(move |r| r[e]))
            .collect();
        if column.is_empty() {
            return Err(LeashError::InvalidConfig(
                "calibration needs at least one epoch of benign data".into(),
            ));
        }
        let n = column.len() as f64;
        let mean = column.iter().sum::<f64>() / n;
        let var = column.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        taus.push(mean + k * var.sqrt());
    }
    Ok(taus)
}
