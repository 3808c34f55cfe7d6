//! Synthetic thread behaviors and the prime+probe covert-channel model.
//!
//! A behavior model answers one question per context switch: how many
//! counter events did this thread generate over the CPU time it just
//! consumed? Rate-based models scale counts with CPU time; replayed traces
//! return recorded rows verbatim. The covert-channel model converts a
//! receiver's CPU budget per synchronization window into decoded bits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("cpu share must lie in (0, 1], got {0}")]
    ShareOutOfRange(f64),
    #[error("wall time {got_us}us is shorter than the {needed_us}us transmission span")]
    WallTooShort { needed_us: f64, got_us: f64 },
    #[error("slice duration must be positive, got {0}")]
    SliceNonPositive(f64),
    #[error("invalid workload configuration: {0}")]
    InvalidConfig(String),
}

/// What a trace-replay thread does when its recording runs out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExhaustionMode {
    /// Start over from the first recorded switch.
    #[default]
    Repeat,
    /// Leave the runqueue for good.
    Terminate,
}

#[derive(Debug, Clone)]
enum ModelKind {
    /// Constant benign rates, calibrated to stay below threshold.
    Steady { rates_per_ms: Vec<f64> },
    /// Alternates burst and base rates on a period measured in context
    /// switches; bursting while `switch % period < duty`.
    Bursty {
        base_rates_per_ms: Vec<f64>,
        burst_rates_per_ms: Vec<f64>,
        period_switches: u64,
        duty_switches: u64,
    },
    /// Constant attack-like rates, calibrated to violate thresholds at any
    /// feasible timeslice length.
    AttackConstant { rates_per_ms: Vec<f64> },
    /// Recorded rows, one per switch.
    Replay {
        rows: Vec<Vec<i64>>,
        mode: ExhaustionMode,
    },
    /// Covert-channel sender; emits like a steady thread.
    CovertSender { rates_per_ms: Vec<f64> },
    /// Covert-channel receiver; probes continuously, so it emits like a
    /// constant attack.
    CovertReceiver { rates_per_ms: Vec<f64> },
}

/// A stateful per-thread behavior: counters emitted per context switch.
///
/// Emission is deterministic in (construction parameters, seed, call
/// sequence); two identically built models fed identical slices produce
/// identical counts.
#[derive(Debug, Clone)]
pub struct BehaviorModel {
    kind: ModelKind,
    switch_index: u64,
    cumulative_cpu_us: f64,
    poisson_noise: bool,
    rng: ChaCha8Rng,
}

fn validate_rates(what: &str, rates: &[f64]) -> Result<(), WorkloadError> {
    if rates.is_empty() {
        return Err(WorkloadError::InvalidConfig(format!(
            "{what} must list a rate per monitored event"
        )));
    }
    if let Some(i) = rates.iter().position(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(WorkloadError::InvalidConfig(format!(
            "{what}[{i}] must be a non-negative number, got {}",
            rates[i]
        )));
    }
    Ok(())
}

impl BehaviorModel {
    pub fn steady(rates_per_ms: Vec<f64>, seed: u64) -> Result<Self, WorkloadError> {
        validate_rates("rates_per_ms", &rates_per_ms)?;
        Ok(Self::with_kind(ModelKind::Steady { rates_per_ms }, seed))
    }

    pub fn bursty(
        base_rates_per_ms: Vec<f64>,
        burst_rates_per_ms: Vec<f64>,
        period_switches: u64,
        duty_switches: u64,
        seed: u64,
    ) -> Result<Self, WorkloadError> {
        validate_rates("base_rates_per_ms", &base_rates_per_ms)?;
        validate_rates("burst_rates_per_ms", &burst_rates_per_ms)?;
        if base_rates_per_ms.len() != burst_rates_per_ms.len() {
            return Err(WorkloadError::InvalidConfig(
                "base_rates_per_ms and burst_rates_per_ms must have the same width".into(),
            ));
        }
        if period_switches == 0 || duty_switches > period_switches {
            return Err(WorkloadError::InvalidConfig(format!(
                "burst duty {duty_switches} must fit a positive period {period_switches}"
            )));
        }
        Ok(Self::with_kind(
            ModelKind::Bursty {
                base_rates_per_ms,
                burst_rates_per_ms,
                period_switches,
                duty_switches,
            },
            seed,
        ))
    }

    pub fn attack_constant(rates_per_ms: Vec<f64>, seed: u64) -> Result<Self, WorkloadError> {
        validate_rates("rates_per_ms", &rates_per_ms)?;
        Ok(Self::with_kind(
            ModelKind::AttackConstant { rates_per_ms },
            seed,
        ))
    }

    pub fn covert_sender(rates_per_ms: Vec<f64>, seed: u64) -> Result<Self, WorkloadError> {
        validate_rates("rates_per_ms", &rates_per_ms)?;
        Ok(Self::with_kind(
            ModelKind::CovertSender { rates_per_ms },
            seed,
        ))
    }

    pub fn covert_receiver(rates_per_ms: Vec<f64>, seed: u64) -> Result<Self, WorkloadError> {
        validate_rates("rates_per_ms", &rates_per_ms)?;
        Ok(Self::with_kind(
            ModelKind::CovertReceiver { rates_per_ms },
            seed,
        ))
    }

    /// Replay recorded per-switch rows in order.
    pub fn replay(
        rows: Vec<Vec<i64>>,
        mode: ExhaustionMode,
        seed: u64,
    ) -> Result<Self, WorkloadError> {
        if rows.is_empty() {
            return Err(WorkloadError::InvalidConfig(
                "trace replay needs at least one recorded switch".into(),
            ));
        }
        let width = rows[0].len();
        if width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(WorkloadError::InvalidConfig(
                "trace replay rows must share one non-empty width".into(),
            ));
        }
        Ok(Self::with_kind(ModelKind::Replay { rows, mode }, seed))
    }

    fn with_kind(kind: ModelKind, seed: u64) -> Self {
        BehaviorModel {
            kind,
            switch_index: 0,
            cumulative_cpu_us: 0.0,
            poisson_noise: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Enable seeded Poisson jitter around the rate-derived counts.
    pub fn with_poisson_noise(mut self) -> Self {
        self.poisson_noise = true;
        self
    }

    /// Number of monitored events this model emits per switch.
    pub fn width(&self) -> usize {
        match &self.kind {
            ModelKind::Steady { rates_per_ms }
            | ModelKind::AttackConstant { rates_per_ms }
            | ModelKind::CovertSender { rates_per_ms }
            | ModelKind::CovertReceiver { rates_per_ms } => rates_per_ms.len(),
            ModelKind::Bursty {
                base_rates_per_ms, ..
            } => base_rates_per_ms.len(),
            ModelKind::Replay { rows, .. } => rows[0].len(),
        }
    }

    /// True once a terminating replay has consumed its last recorded row;
    /// the engine then drops the thread from the runqueue.
    pub fn is_exhausted(&self) -> bool {
        match &self.kind {
            ModelKind::Replay { rows, mode } => {
                *mode == ExhaustionMode::Terminate && self.switch_index as usize >= rows.len()
            }
            _ => false,
        }
    }

    pub fn is_covert_receiver(&self) -> bool {
        matches!(self.kind, ModelKind::CovertReceiver { .. })
    }

    pub fn is_covert_sender(&self) -> bool {
        matches!(self.kind, ModelKind::CovertSender { .. })
    }

    pub fn is_bursty(&self) -> bool {
        matches!(self.kind, ModelKind::Bursty { .. })
    }

    /// Counter deltas for one context switch that consumed `slice_us` of
    /// CPU time. Rate-based kinds emit `round(rate * ms)` per event.
    pub fn emit_counts(&mut self, slice_us: f64) -> Result<Vec<i64>, WorkloadError> {
        if !(slice_us.is_finite() && slice_us > 0.0) {
            return Err(WorkloadError::SliceNonPositive(slice_us));
        }
        let ms = slice_us / 1000.0;
        let counts = match &self.kind {
            ModelKind::Steady { rates_per_ms }
            | ModelKind::AttackConstant { rates_per_ms }
            | ModelKind::CovertSender { rates_per_ms }
            | ModelKind::CovertReceiver { rates_per_ms } => {
                self.rates_to_counts(rates_per_ms.clone(), ms)
            }
            ModelKind::Bursty {
                base_rates_per_ms,
                burst_rates_per_ms,
                period_switches,
                duty_switches,
            } => {
                let bursting = self.switch_index % period_switches < *duty_switches;
                let rates = if bursting {
                    burst_rates_per_ms.clone()
                } else {
                    base_rates_per_ms.clone()
                };
                self.rates_to_counts(rates, ms)
            }
            ModelKind::Replay { rows, mode } => {
                let len = rows.len();
                let idx = match mode {
                    ExhaustionMode::Repeat => (self.switch_index as usize) % len,
                    ExhaustionMode::Terminate => {
                        let i = self.switch_index as usize;
                        if i >= len {
                            return Err(WorkloadError::InvalidConfig(
                                "replay thread scheduled past the end of its recording".into(),
                            ));
                        }
                        i
                    }
                };
                rows[idx].clone()
            }
        };
        self.switch_index += 1;
        self.cumulative_cpu_us += slice_us;
        Ok(counts)
    }

    fn rates_to_counts(&mut self, rates: Vec<f64>, ms: f64) -> Vec<i64> {
        rates
            .iter()
            .map(|r| {
                let lambda = r * ms;
                if self.poisson_noise && lambda > 0.0 {
                    let poisson = Poisson::new(lambda).expect("positive finite lambda");
                    poisson.sample(&mut self.rng) as i64
                } else {
                    lambda.round() as i64
                }
            })
            .collect()
    }
}

/// Covert-channel encoding variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    /// One bit per synchronization window.
    #[default]
    Base,
    /// Each bit repeated over `k` consecutive windows, majority-decoded.
    Redundant(u32),
    /// `m` cache-set pairs carry `m` bits per window; a probe round then
    /// costs `m` times the base probe cost.
    Multiset(u32),
}

impl Variant {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        match self {
            Variant::Base => Ok(()),
            Variant::Redundant(k) if *k >= 1 => Ok(()),
            Variant::Multiset(m) if *m >= 1 => Ok(()),
            _ => Err(WorkloadError::InvalidConfig(
                "variant repetition/set count must be >= 1".into(),
            )),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Base => write!(f, "base"),
            Variant::Redundant(k) => write!(f, "redundant({k})"),
            Variant::Multiset(m) => write!(f, "multiset({m})"),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "base" {
            return Ok(Variant::Base);
        }
        for (prefix, make) in [
            ("redundant(", Variant::Redundant as fn(u32) -> Variant),
            ("multiset(", Variant::Multiset as fn(u32) -> Variant),
        ] {
            if let Some(rest) = s.strip_prefix(prefix) {
                if let Some(num) = rest.strip_suffix(')') {
                    let n: u32 = num.parse().map_err(|_| {
                        WorkloadError::InvalidConfig(format!("bad variant parameter `{num}`"))
                    })?;
                    let v = make(n);
                    v.validate()?;
                    return Ok(v);
                }
            }
        }
        Err(WorkloadError::InvalidConfig(format!(
            "unknown variant `{s}`; expected base, redundant(k), or multiset(m)"
        )))
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parameters of one covert transmission.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovertChannelSpec {
    /// The transmitted message as a string of `0`/`1` characters.
    pub message_bits: String,
    /// CPU cost of one prime+probe round over one set pair, microseconds.
    pub probe_cost_us: f64,
    /// Probe rounds the receiver must complete within a window to resolve
    /// that window's bit(s).
    pub rounds_per_bit: u32,
    #[serde(default)]
    pub variant: Variant,
    /// Wall-clock length of one synchronization window, microseconds.
    pub sync_window_us: f64,
}

impl CovertChannelSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.message_bits.is_empty() {
            return Err(WorkloadError::InvalidConfig(
                "covert.message_bits must not be empty".into(),
            ));
        }
        if let Some(c) = self.message_bits.chars().find(|c| *c != '0' && *c != '1') {
            return Err(WorkloadError::InvalidConfig(format!(
                "covert.message_bits may only contain 0 and 1, found `{c}`"
            )));
        }
        if !(self.probe_cost_us.is_finite() && self.probe_cost_us > 0.0) {
            return Err(WorkloadError::InvalidConfig(format!(
                "covert.probe_cost_us must be positive, got {}",
                self.probe_cost_us
            )));
        }
        if self.rounds_per_bit == 0 {
            return Err(WorkloadError::InvalidConfig(
                "covert.rounds_per_bit must be >= 1".into(),
            ));
        }
        if !(self.sync_window_us.is_finite() && self.sync_window_us > 0.0) {
            return Err(WorkloadError::InvalidConfig(format!(
                "covert.sync_window_us must be positive, got {}",
                self.sync_window_us
            )));
        }
        self.variant.validate()
    }

    pub fn message(&self) -> Vec<bool> {
        self.message_bits.chars().map(|c| c == '1').collect()
    }

    /// Number of on-the-wire synchronization windows the variant needs.
    pub fn wire_windows(&self) -> usize {
        let bits = self.message_bits.len();
        match self.variant {
            Variant::Base => bits,
            Variant::Redundant(k) => bits * k as usize,
            Variant::Multiset(m) => bits.div_ceil(m as usize),
        }
    }

    /// Wall time of the full transmission, microseconds.
    pub fn span_us(&self) -> f64 {
        self.wire_windows() as f64 * self.sync_window_us
    }

    /// CPU time one probe round costs under this variant.
    pub fn round_cost_us(&self) -> f64 {
        match self.variant {
            Variant::Multiset(m) => self.probe_cost_us * m as f64,
            _ => self.probe_cost_us,
        }
    }
}

/// Outcome of one covert transmission.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelOutcome {
    /// Correct logical bits per second of wall time.
    pub bandwidth_bps: f64,
    /// Wrong-or-missed logical bits over transmitted logical bits.
    pub error_rate: f64,
    pub correct_bits: usize,
    pub transmitted_bits: usize,
}

/// Decode a transmission given the receiver's CPU budget in each wire
/// window. A window resolves only if the budget covers `rounds_per_bit`
/// full probe rounds; bits of unresolved windows count as errors.
pub fn decode_windows(
    spec: &CovertChannelSpec,
    window_budget_us: &[f64],
    wall_time_us: f64,
) -> Result<ChannelOutcome, WorkloadError> {
    spec.validate()?;
    let windows = spec.wire_windows();
    let round_cost = spec.round_cost_us();
    let needed = spec.rounds_per_bit as f64 * round_cost;
    let resolved: Vec<bool> = (0..windows)
        .map(|w| window_budget_us.get(w).copied().unwrap_or(0.0) >= needed)
        .collect();

    let bits = spec.message_bits.len();
    let correct = match spec.variant {
        Variant::Base => resolved.iter().filter(|r| **r).count(),
        Variant::Redundant(k) => {
            let k = k as usize;
            (0..bits)
                .filter(|bit| {
                    let copies = resolved[bit * k..(bit + 1) * k]
                        .iter()
                        .filter(|r| **r)
                        .count();
                    copies > k / 2
                })
                .count()
        }
        Variant::Multiset(m) => {
            let m = m as usize;
            (0..bits).filter(|bit| resolved[bit / m]).count()
        }
    };

    Ok(ChannelOutcome {
        bandwidth_bps: correct as f64 / (wall_time_us / 1_000_000.0),
        error_rate: (bits - correct) as f64 / bits as f64,
        correct_bits: correct,
        transmitted_bits: bits,
    })
}

/// Analytic transmission model: the receiver holds a fixed CPU share, so
/// every window carries the same probe budget `share * sync_window`.
pub fn covert_channel_run(
    spec: &CovertChannelSpec,
    receiver_cpu_share: f64,
    wall_time_us: f64,
) -> Result<ChannelOutcome, WorkloadError> {
    spec.validate()?;
    if !(receiver_cpu_share > 0.0 && receiver_cpu_share <= 1.0) {
        return Err(WorkloadError::ShareOutOfRange(receiver_cpu_share));
    }
    let needed = spec.span_us();
    if wall_time_us < needed {
        return Err(WorkloadError::WallTooShort {
            needed_us: needed,
            got_us: wall_time_us,
        });
    }
    let budget = receiver_cpu_share * spec.sync_window_us;
    let budgets = vec![budget; spec.wire_windows()];
    decode_windows(spec, &budgets, wall_time_us)
}
