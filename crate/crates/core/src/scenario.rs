//! Scenario documents: everything one simulation run needs, parsed from a
//! TOML file with unknown keys rejected and every constraint checked up
//! front so the engine never validates mid-run.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::leash::{DetectorConfig, SupervisorPolicy};
use crate::sched::SchedParams;
use crate::trace::load_trace_csv;
use crate::workloads::{BehaviorModel, CovertChannelSpec, ExhaustionMode};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{0}")]
    Parse(String),
    #[error("invalid scenario: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("{0}")]
    Io(String),
}

/// Whether the mitigation loop is active for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeashMode {
    #[default]
    On,
    Off,
}

/// Behavioral switches, all defaulting to the corrected, literal loop.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Modes {
    pub leash: LeashMode,
    /// Unflag on default weight alone, ignoring whether the epoch was
    /// recovering.
    pub strict_alg1: bool,
    /// Actuate on threat-index deltas instead of the absolute index.
    pub incremental_actuator: bool,
}

/// Thread behavior kinds accepted in `[threads.<name>]` tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreadKind {
    Steady,
    Bursty,
    AttackConstant,
    TraceReplay,
    CovertSender,
    CovertReceiver,
}

/// One `[threads.<name>]` table. Which optional keys must be present (and
/// which must be absent) depends on `kind`; `validate_for` enforces that
/// and names every offending key.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThreadSpec {
    pub kind: Option<ThreadKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rates_per_ms: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_rates_per_ms: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burst_rates_per_ms: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub period_switches: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duty_switches: Option<u64>,
    /// Trace CSV path for `trace_replay`, resolved against the scenario
    /// file's directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub on_exhaustion: Option<ExhaustionMode>,
    pub poisson_noise: bool,
}

impl ThreadSpec {
    fn validate_for(&self, name: &str, errors: &mut Vec<String>) {
        let at = |key: &str| format!("threads.{name}.{key}");
        let Some(kind) = self.kind else {
            errors.push(format!("threads.{name} is missing `kind`"));
            return;
        };
        let rate_kind = matches!(
            kind,
            ThreadKind::Steady
                | ThreadKind::AttackConstant
                | ThreadKind::CovertSender
                | ThreadKind::CovertReceiver
        );
        if rate_kind && self.rates_per_ms.is_none() {
            errors.push(format!("{} is required", at("rates_per_ms")));
        }
        if kind == ThreadKind::Bursty {
            for (key, present) in [
                ("base_rates_per_ms", self.base_rates_per_ms.is_some()),
                ("burst_rates_per_ms", self.burst_rates_per_ms.is_some()),
                ("period_switches", self.period_switches.is_some()),
                ("duty_switches", self.duty_switches.is_some()),
            ] {
                if !present {
                    errors.push(format!("{} is required", at(key)));
                }
            }
        }
        if kind == ThreadKind::TraceReplay && self.path.is_none() {
            errors.push(format!("{} is required", at("path")));
        }
        // Keys that do not belong to the declared kind.
        let misplaced: &[(&str, bool)] = &[
            ("rates_per_ms", !rate_kind && self.rates_per_ms.is_some()),
            (
                "base_rates_per_ms",
                kind != ThreadKind::Bursty && self.base_rates_per_ms.is_some(),
            ),
            (
                "burst_rates_per_ms",
                kind != ThreadKind::Bursty && self.burst_rates_per_ms.is_some(),
            ),
            (
                "period_switches",
                kind != ThreadKind::Bursty && self.period_switches.is_some(),
            ),
            (
                "duty_switches",
                kind != ThreadKind::Bursty && self.duty_switches.is_some(),
            ),
            (
                "path",
                kind != ThreadKind::TraceReplay && self.path.is_some(),
            ),
            (
                "on_exhaustion",
                kind != ThreadKind::TraceReplay && self.on_exhaustion.is_some(),
            ),
        ];
        for (key, bad) in misplaced {
            if *bad {
                errors.push(format!("{} does not apply to this kind", at(key)));
            }
        }
    }
}

fn default_actuator_gamma() -> f64 {
    0.1
}

fn default_buffer_n() -> usize {
    32
}

/// A complete simulation input.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Virtual run length in microseconds; the engine rounds up to whole
    /// scheduling periods.
    pub duration_us: u64,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of weight removed per unit of threat index, in (0, 1).
    #[serde(default = "default_actuator_gamma")]
    pub actuator_gamma: f64,
    /// Context switches per epoch (sensor buffer capacity).
    #[serde(default = "default_buffer_n")]
    pub buffer_n: usize,
    #[serde(default)]
    pub sched: SchedParams,
    pub detector: DetectorConfig,
    #[serde(default)]
    pub policy: SupervisorPolicy,
    pub threads: BTreeMap<String, ThreadSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covert: Option<CovertChannelSpec>,
    #[serde(default)]
    pub modes: Modes,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Scenario, ScenarioError> {
        let scenario: Scenario =
            toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut errors = Vec::new();
        if self.duration_us == 0 {
            errors.push("duration_us must be positive".into());
        }
        if !(self.actuator_gamma > 0.0 && self.actuator_gamma < 1.0) {
            errors.push(format!(
                "actuator_gamma must lie in (0, 1), got {}",
                self.actuator_gamma
            ));
        }
        if self.buffer_n == 0 {
            errors.push("buffer_n must be >= 1".into());
        }
        if let Err(e) = self.sched.validate() {
            errors.push(e.to_string());
        }
        if let Err(e) = self.detector.validate() {
            errors.push(e.to_string());
        }
        if let Err(e) = self.policy.validate() {
            errors.push(e.to_string());
        }
        if self.threads.is_empty() {
            errors.push("at least one [threads.<name>] table is required".into());
        }
        let width = self.detector.events.len();
        let mut receivers = 0usize;
        for (name, spec) in &self.threads {
            // Names end up as bare CSV fields and log tokens.
            if name.is_empty() || name.contains([',', '"', '\n']) {
                errors.push(format!(
                    "thread name `{name}` must be non-empty and free of commas, quotes, and newlines"
                ));
            }
            spec.validate_for(name, &mut errors);
            if spec.kind == Some(ThreadKind::CovertReceiver) {
                receivers += 1;
            }
            for (key, rates) in [
                ("rates_per_ms", &spec.rates_per_ms),
                ("base_rates_per_ms", &spec.base_rates_per_ms),
                ("burst_rates_per_ms", &spec.burst_rates_per_ms),
            ] {
                if let Some(r) = rates {
                    if r.len() != width {
                        errors.push(format!(
                            "threads.{name}.{key} lists {} rates but the detector monitors {width} events",
                            r.len()
                        ));
                    }
                }
            }
        }
        let covert_threads = self.threads.values().any(|t| {
            matches!(
                t.kind,
                Some(ThreadKind::CovertReceiver) | Some(ThreadKind::CovertSender)
            )
        });
        if receivers > 1 {
            errors.push("at most one covert_receiver thread is supported".into());
        }
        if covert_threads && self.covert.is_none() {
            errors.push("covert threads require a [covert] section".into());
        }
        if let Some(covert) = &self.covert {
            if let Err(e) = covert.validate() {
                errors.push(e.to_string());
            }
            if receivers == 0 {
                errors.push("[covert] requires a covert_receiver thread".into());
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(errors))
        }
    }

    /// Instantiate a thread's behavior model. Per-thread seeds derive from
    /// the scenario seed and the thread's position in name order, so runs
    /// are reproducible and threads are decorrelated.
    pub fn build_model(
        &self,
        name: &str,
        base_dir: Option<&Path>,
    ) -> Result<BehaviorModel, ScenarioError> {
        let spec = self
            .threads
            .get(name)
            .ok_or_else(|| ScenarioError::Invalid(vec![format!("unknown thread {name}")]))?;
        let index = self.threads.keys().position(|k| k == name).unwrap() as u64;
        let seed = self
            .seed
            .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let invalid = |e: crate::workloads::WorkloadError| {
            ScenarioError::Invalid(vec![format!("threads.{name}: {e}")])
        };
        let model = match spec.kind.expect("validated") {
            ThreadKind::Steady => {
                BehaviorModel::steady(spec.rates_per_ms.clone().expect("validated"), seed)
                    .map_err(invalid)?
            }
            ThreadKind::AttackConstant => {
                BehaviorModel::attack_constant(spec.rates_per_ms.clone().expect("validated"), seed)
                    .map_err(invalid)?
            }
            ThreadKind::CovertSender => {
                BehaviorModel::covert_sender(spec.rates_per_ms.clone().expect("validated"), seed)
                    .map_err(invalid)?
            }
            ThreadKind::CovertReceiver => {
                BehaviorModel::covert_receiver(spec.rates_per_ms.clone().expect("validated"), seed)
                    .map_err(invalid)?
            }
            ThreadKind::Bursty => BehaviorModel::bursty(
                spec.base_rates_per_ms.clone().expect("validated"),
                spec.burst_rates_per_ms.clone().expect("validated"),
                spec.period_switches.expect("validated"),
                spec.duty_switches.expect("validated"),
                seed,
            )
            .map_err(invalid)?,
            ThreadKind::TraceReplay => {
                let raw = spec.path.clone().expect("validated");
                let path = match base_dir {
                    Some(dir) if Path::new(&raw).is_relative() => dir.join(&raw),
                    _ => Path::new(&raw).to_path_buf(),
                };
                let table = load_trace_csv(&path)
                    .map_err(|e| ScenarioError::Invalid(vec![format!("threads.{name}: {e}")]))?;
                let tt = match table.threads.len() {
                    1 => table.threads.into_values().next().unwrap(),
                    n => {
                        return Err(ScenarioError::Invalid(vec![format!(
                            "threads.{name}: replay trace must record exactly one thread, has {n}"
                        )]))
                    }
                };
                let aligned = tt
                    .select_events(&self.detector.events)
                    .map_err(|e| ScenarioError::Invalid(vec![format!("threads.{name}: {e}")]))?;
                BehaviorModel::replay(aligned.rows, spec.on_exhaustion.unwrap_or_default(), seed)
                    .map_err(invalid)?
            }
        };
        Ok(if spec.poisson_noise {
            model.with_poisson_noise()
        } else {
            model
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workloads::Variant;

    pub(crate) const MINIMAL: &str = r#"
duration_us = 1000000

[detector]
events = ["e12"]
thresholds = [300.0]

[threads.worker]
kind = "steady"
rates_per_ms = [10.0]
"#;

    #[test]
    fn minimal_scenario_parses_with_defaults() {
        let s = Scenario::from_toml_str(MINIMAL).unwrap();
        assert_eq!(s.buffer_n, 32);
        assert_eq!(s.actuator_gamma, 0.1);
        assert_eq!(s.sched.targeted_latency_us, 20_000.0);
        assert_eq!(s.modes.leash, LeashMode::On);
        assert!(!s.modes.strict_alg1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("duration_us = 1000000", "duration_us = 1000000\nwat = 3");
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("wat"), "{err}");
    }

    #[test]
    fn unknown_thread_keys_are_rejected() {
        let text = format!("{MINIMAL}\nburst_factor = 2.0\n");
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("burst_factor"), "{err}");
    }

    #[test]
    fn missing_detector_section_is_named() {
        let text = r#"
duration_us = 1000
[threads.worker]
kind = "steady"
rates_per_ms = [10.0]
"#;
        let err = Scenario::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("detector"), "{err}");
    }

    #[test]
    fn kind_specific_keys_are_enforced() {
        let text = r#"
duration_us = 1000
[detector]
events = ["e12"]
thresholds = [300.0]
[threads.b]
kind = "bursty"
base_rates_per_ms = [10.0]
"#;
        let err = Scenario::from_toml_str(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("threads.b.burst_rates_per_ms"), "{msg}");
        assert!(msg.contains("threads.b.period_switches"), "{msg}");
        assert!(msg.contains("threads.b.duty_switches"), "{msg}");
    }

    #[test]
    fn misplaced_keys_are_named() {
        let text = r#"
duration_us = 1000
[detector]
events = ["e12"]
thresholds = [300.0]
[threads.w]
kind = "steady"
rates_per_ms = [10.0]
path = "x.csv"
"#;
        let err = Scenario::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("threads.w.path"), "{err}");
    }

    #[test]
    fn rate_width_must_match_detector_events() {
        let text = r#"
duration_us = 1000
[detector]
events = ["e12", "e2"]
thresholds = [300.0, 500.0]
[threads.w]
kind = "steady"
rates_per_ms = [10.0]
"#;
        let err = Scenario::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("monitors 2 events"), "{err}");
    }

    #[test]
    fn covert_threads_require_covert_section() {
        let text = r#"
duration_us = 1000
[detector]
events = ["e12"]
thresholds = [300.0]
[threads.rx]
kind = "covert_receiver"
rates_per_ms = [2000.0]
"#;
        let err = Scenario::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("[covert]"), "{err}");
    }

    #[test]
    fn bad_ranges_collect_multiple_errors() {
        let text = r#"
duration_us = 0
actuator_gamma = 1.5
buffer_n = 0
[detector]
events = ["e12"]
thresholds = [-1.0]
[threads.w]
kind = "steady"
rates_per_ms = [10.0]
"#;
        let err = Scenario::from_toml_str(text).unwrap_err();
        let msg = err.to_string();
        for needle in ["duration_us", "actuator_gamma", "buffer_n", "thresholds[0]"] {
            assert!(msg.contains(needle), "missing `{needle}` in: {msg}");
        }
    }

    #[test]
    fn covert_scenario_round_trips() {
        let text = r#"
duration_us = 60000000
seed = 7

[detector]
events = ["e12"]
thresholds = [300.0]

[policy]
kind = "adaptive"

[modes]
leash = "on"

[threads.receiver]
kind = "covert_receiver"
rates_per_ms = [2000.0]

[threads.sender]
kind = "covert_sender"
rates_per_ms = [10.0]

[covert]
message_bits = "101100"
probe_cost_us = 5000.0
rounds_per_bit = 20
variant = "multiset(2)"
sync_window_us = 1000000.0
"#;
        let s = Scenario::from_toml_str(text).unwrap();
        assert_eq!(s.covert.as_ref().unwrap().variant, Variant::Multiset(2));
        let rendered = s.to_toml_string();
        let again = Scenario::from_toml_str(&rendered).unwrap();
        assert_eq!(again.covert.as_ref().unwrap().variant, Variant::Multiset(2));
        assert_eq!(again.threads.len(), 2);
        assert_eq!(again.seed, 7);
        assert_eq!(rendered, again.to_toml_string());
    }

    #[test]
    fn build_model_seeds_threads_apart() {
        let s = Scenario::from_toml_str(MINIMAL).unwrap();
        let m = s.build_model("worker", None).unwrap();
        assert_eq!(m.width(), 1);
        assert!(s.build_model("ghost", None).is_err());
    }
}
