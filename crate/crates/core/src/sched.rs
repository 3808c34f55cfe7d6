//! Fair-share scheduler model: the weight ladder, the runqueue with its
//! dummy-thread rule, and timeslice allocation proportional to relative
//! weight.
//!
//! Weights are continuous and normalized so that the default weight is
//! exactly 1.0. The discrete ladder only anchors the clamp bounds
//! `[w_min, w_max]` and the default level; the actuator moves weights
//! continuously between those bounds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a simulated thread, stable for the length of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ThreadId(pub usize);

#[derive(Debug, Error, PartialEq)]
pub enum SchedError {
    #[error("weight level {level} out of range 0..{num_levels}")]
    LevelOutOfRange { level: usize, num_levels: usize },
    #[error("thread {0:?} is not runnable")]
    NotInRunQueue(ThreadId),
    #[error("no weight registered for runnable thread {0:?}")]
    MissingWeight(ThreadId),
    #[error("invalid scheduler parameters: {0}")]
    InvalidParams(String),
}

/// Weight the dummy thread runs at whenever it is awake. The dummy exists
/// only to dilute a lone flagged thread's share; it behaves like a default
/// benign thread and is never sensed, flagged, or throttled.
pub const DUMMY_WEIGHT: f64 = 1.0;

/// Scheduler constants: the scheduling period and the ladder geometry.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedParams {
    /// Scheduling period divided among runnable threads, in microseconds.
    pub targeted_latency_us: f64,
    /// Ratio between the weights of adjacent ladder levels, in (0, 1).
    pub level_ratio: f64,
    /// Number of discrete ladder levels.
    pub num_levels: usize,
    /// Index of the ladder level whose weight is the default 1.0.
    pub default_level: usize,
}

impl Default for SchedParams {
    fn default() -> Self {
        SchedParams {
            targeted_latency_us: 20_000.0,
            level_ratio: 0.8,
            num_levels: 40,
            default_level: 20,
        }
    }
}

impl SchedParams {
    pub fn validate(&self) -> Result<(), SchedError> {
        if !(self.targeted_latency_us.is_finite() && self.targeted_latency_us > 0.0) {
            return Err(SchedError::InvalidParams(format!(
                "targeted_latency_us must be positive, got {}",
                self.targeted_latency_us
            )));
        }
        if !(self.level_ratio > 0.0 && self.level_ratio < 1.0) {
            return Err(SchedError::InvalidParams(format!(
                "level_ratio must lie in (0, 1), got {}",
                self.level_ratio
            )));
        }
        if self.num_levels == 0 {
            return Err(SchedError::InvalidParams("num_levels must be >= 1".into()));
        }
        if self.default_level >= self.num_levels {
            return Err(SchedError::InvalidParams(format!(
                "default_level {} must be < num_levels {}",
                self.default_level, self.num_levels
            )));
        }
        Ok(())
    }

    /// The default weight; weights are normalized so this is always 1.0.
    pub fn w_def(&self) -> f64 {
        1.0
    }

    /// Weight at the bottom of the ladder (strongest throttle).
    pub fn w_min(&self) -> f64 {
        self.level_ratio
            .powi((self.num_levels - 1 - self.default_level) as i32)
    }

    /// Weight at the top of the ladder.
    pub fn w_max(&self) -> f64 {
        self.level_ratio.powi(-(self.default_level as i32))
    }

    /// Clamp a raw weight into `[w_min, w_max]`.
    pub fn clamp_weight(&self, raw: f64) -> Weight {
        Weight(raw.clamp(self.w_min(), self.w_max()))
    }
}

/// A thread's scheduling weight relative to the default of 1.0.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Weight(f64);

impl Weight {
    pub fn new(value: f64) -> Weight {
        Weight(value)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Weight of each ladder level: `level_ratio^(level - default_level)`.
/// Level 0 is the heaviest weight, the last level the lightest; the default
/// level evaluates to exactly 1.0.
pub fn weight_at_level(params: &SchedParams, level: usize) -> Result<Weight, SchedError> {
    if level >= params.num_levels {
        return Err(SchedError::LevelOutOfRange {
            level,
            num_levels: params.num_levels,
        });
    }
    let exp = level as i32 - params.default_level as i32;
    Ok(Weight(params.level_ratio.powi(exp)))
}

/// Per-thread weights used by the runqueue arithmetic.
pub type WeightMap = BTreeMap<ThreadId, Weight>;

/// The set of runnable threads plus the wake state of the dummy thread.
///
/// Membership is an insertion-ordered set: a thread appears at most once.
#[derive(Debug, Clone, Default)]
pub struct RunQueue {
    members: Vec<ThreadId>,
    dummy_awake: bool,
}

impl RunQueue {
    pub fn new() -> RunQueue {
        RunQueue::default()
    }

    pub fn insert(&mut self, t: ThreadId) {
        if !self.members.contains(&t) {
            self.members.push(t);
        }
    }

    pub fn remove(&mut self, t: ThreadId) {
        self.members.retain(|m| *m != t);
    }

    pub fn contains(&self, t: ThreadId) -> bool {
        self.members.contains(&t)
    }

    pub fn members(&self) -> &[ThreadId] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dummy_awake(&self) -> bool {
        self.dummy_awake
    }

    /// Re-evaluate the dummy thread's wake condition: awake if and only if
    /// exactly one real thread is runnable and that thread is flagged.
    /// Without the dummy, a lone thread would receive the full period no
    /// matter how small its weight; with it, the flagged thread's share is
    /// diluted to `w / (w + DUMMY_WEIGHT)`. Idempotent.
    pub fn update_dummy<F>(&mut self, is_flagged: F)
    where
        F: Fn(ThreadId) -> bool,
    {
        self.dummy_awake = self.members.len() == 1 && is_flagged(self.members[0]);
    }
}

fn total_weight(rq: &RunQueue, weights: &WeightMap) -> Result<f64, SchedError> {
    let mut total = 0.0;
    for m in rq.members() {
        let w = weights.get(m).ok_or(SchedError::MissingWeight(*m))?;
        total += w.value();
    }
    if rq.dummy_awake() {
        total += DUMMY_WEIGHT;
    }
    Ok(total)
}

/// Fraction of the scheduling period owed to `t`: its weight over the sum
/// of all runnable weights (the dummy contributes `DUMMY_WEIGHT` when
/// awake). Shares over all runnable threads sum to 1.
pub fn relative_weight(rq: &RunQueue, weights: &WeightMap, t: ThreadId) -> Result<f64, SchedError> {
    if !rq.contains(t) {
        return Err(SchedError::NotInRunQueue(t));
    }
    let w = weights.get(&t).ok_or(SchedError::MissingWeight(t))?;
    Ok(w.value() / total_weight(rq, weights)?)
}

/// Timeslice owed to `t` within one scheduling period, in microseconds:
/// the targeted latency multiplied by the thread's relative weight.
pub fn timeslice(
    params: &SchedParams,
    rq: &RunQueue,
    weights: &WeightMap,
    t: ThreadId,
) -> Result<f64, SchedError> {
    Ok(params.targeted_latency_us * relative_weight(rq, weights, t)?)
}

/// Timeslice consumed by the dummy thread this period; zero while asleep.
pub fn dummy_timeslice(
    params: &SchedParams,
    rq: &RunQueue,
    weights: &WeightMap,
) -> Result<f64, SchedError> {
    if !rq.dummy_awake() {
        return Ok(0.0);
    }
    Ok(params.targeted_latency_us * DUMMY_WEIGHT / total_weight(rq, weights)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params() -> SchedParams {
        SchedParams::default()
    }

    #[test]
    fn default_level_weight_is_exactly_one() {
        let w = weight_at_level(&params(), 20).unwrap();
        assert_eq!(w.value(), 1.0);
    }

    #[test]
    fn bottom_level_weight_matches_ladder() {
        let w = weight_at_level(&params(), 39).unwrap();
        assert_relative_eq!(w.value(), 0.8f64.powi(19), max_relative = 1e-12);
        assert!((w.value() - 0.01441).abs() < 1e-5);
    }

    #[test]
    fn top_level_weight_matches_ladder() {
        let w = weight_at_level(&params(), 0).unwrap();
        assert_relative_eq!(w.value(), 0.8f64.powi(-20), max_relative = 1e-12);
        assert!((w.value() - 86.736).abs() < 1e-3);
    }

    #[test]
    fn ladder_bounds_agree_with_level_endpoints() {
        let p = params();
        assert_eq!(p.w_min(), weight_at_level(&p, 39).unwrap().value());
        assert_eq!(p.w_max(), weight_at_level(&p, 0).unwrap().value());
        assert_eq!(p.w_def(), 1.0);
    }

    #[test]
    fn level_out_of_range_is_rejected() {
        let err = weight_at_level(&params(), 40).unwrap_err();
        assert_eq!(
            err,
            SchedError::LevelOutOfRange {
                level: 40,
                num_levels: 40
            }
        );
    }

    fn queue_of(n: usize) -> (RunQueue, WeightMap) {
        let mut rq = RunQueue::new();
        let mut weights = WeightMap::new();
        for i in 0..n {
            rq.insert(ThreadId(i));
            weights.insert(ThreadId(i), Weight::new(1.0));
        }
        (rq, weights)
    }

    #[test]
    fn equal_weights_split_evenly() {
        let (rq, weights) = queue_of(2);
        assert_eq!(relative_weight(&rq, &weights, ThreadId(0)).unwrap(), 0.5);
        assert_eq!(relative_weight(&rq, &weights, ThreadId(1)).unwrap(), 0.5);
    }

    #[test]
    fn heavier_thread_takes_proportional_share() {
        let (rq, mut weights) = queue_of(3);
        weights.insert(ThreadId(2), Weight::new(2.0));
        assert_relative_eq!(
            relative_weight(&rq, &weights, ThreadId(0)).unwrap(),
            0.25,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            relative_weight(&rq, &weights, ThreadId(2)).unwrap(),
            0.5,
            max_relative = 1e-12
        );
    }

    #[test]
    fn flagged_loner_shares_with_dummy() {
        let (mut rq, mut weights) = queue_of(1);
        weights.insert(ThreadId(0), Weight::new(0.5));
        rq.update_dummy(|_| true);
        assert!(rq.dummy_awake());
        assert_relative_eq!(
            relative_weight(&rq, &weights, ThreadId(0)).unwrap(),
            1.0 / 3.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn timeslices_split_period_evenly_for_equal_weights() {
        let (rq, weights) = queue_of(2);
        let ts = timeslice(&params(), &rq, &weights, ThreadId(0)).unwrap();
        assert_eq!(ts, 10_000.0);
    }

    #[test]
    fn lone_unflagged_thread_owns_the_period() {
        let (mut rq, weights) = queue_of(1);
        rq.update_dummy(|_| false);
        assert!(!rq.dummy_awake());
        let ts = timeslice(&params(), &rq, &weights, ThreadId(0)).unwrap();
        assert_eq!(ts, 20_000.0);
    }

    #[test]
    fn lone_flagged_thread_is_diluted_by_the_dummy() {
        let (mut rq, mut weights) = queue_of(1);
        weights.insert(ThreadId(0), Weight::new(0.1));
        rq.update_dummy(|_| true);
        let ts = timeslice(&params(), &rq, &weights, ThreadId(0)).unwrap();
        assert_relative_eq!(ts, 20_000.0 * 0.1 / 1.1, max_relative = 1e-12);
        assert!((ts - 1818.18).abs() < 0.01);
        let dts = dummy_timeslice(&params(), &rq, &weights).unwrap();
        assert_relative_eq!(ts + dts, 20_000.0, max_relative = 1e-12);
    }

    #[test]
    fn dummy_stays_asleep_with_two_runnable_threads() {
        let (mut rq, _) = queue_of(2);
        rq.update_dummy(|_| true);
        assert!(!rq.dummy_awake());
    }

    #[test]
    fn dummy_sleeps_for_lone_unflagged_thread() {
        let (mut rq, _) = queue_of(1);
        rq.update_dummy(|_| false);
        assert!(!rq.dummy_awake());
    }

    #[test]
    fn update_dummy_is_idempotent() {
        let (mut rq, _) = queue_of(1);
        rq.update_dummy(|_| true);
        let first = rq.dummy_awake();
        rq.update_dummy(|_| true);
        assert_eq!(first, rq.dummy_awake());
    }

    #[test]
    fn non_member_lookup_fails() {
        let (rq, weights) = queue_of(2);
        let err = relative_weight(&rq, &weights, ThreadId(9)).unwrap_err();
        assert_eq!(err, SchedError::NotInRunQueue(ThreadId(9)));
    }

    #[test]
    fn bad_params_are_rejected() {
        let mut p = params();
        p.level_ratio = 1.0;
        assert!(p.validate().is_err());
        let mut p = params();
        p.default_level = 40;
        assert!(p.validate().is_err());
        let mut p = params();
        p.targeted_latency_us = 0.0;
        assert!(p.validate().is_err());
    }

    prop_compose! {
        fn arb_queue()(n in 1usize..8)(
            raw in proptest::collection::vec(0.01f64..90.0, n),
            flags in proptest::collection::vec(any::<bool>(), n),
        ) -> (RunQueue, WeightMap, Vec<bool>) {
            let mut rq = RunQueue::new();
            let mut weights = WeightMap::new();
            let p = SchedParams::default();
            for (i, w) in raw.iter().enumerate() {
                rq.insert(ThreadId(i));
                weights.insert(ThreadId(i), p.clamp_weight(*w));
            }
            (rq, weights, flags)
        }
    }

    proptest! {
        /// Shares sum to 1 and timeslices sum to the full period, with or
        /// without the dummy awake.
        #[test]
        fn conservation((mut rq, weights, flags) in arb_queue()) {
            let p = SchedParams::default();
            rq.update_dummy(|t| flags[t.0]);
            let mut share_sum = 0.0;
            let mut slice_sum = dummy_timeslice(&p, &rq, &weights).unwrap();
            if rq.dummy_awake() {
                share_sum += slice_sum / p.targeted_latency_us;
            }
            for t in rq.members() {
                share_sum += relative_weight(&rq, &weights, *t).unwrap();
                slice_sum += timeslice(&p, &rq, &weights, *t).unwrap();
            }
            prop_assert!((share_sum - 1.0).abs() < 1e-12);
            prop_assert!((slice_sum - p.targeted_latency_us).abs() < 1.0);
        }

        /// Lowering one thread's weight never increases its own timeslice
        /// and never decreases anyone else's.
        #[test]
        fn monotonicity((rq, weights, _) in arb_queue(), frac in 0.1f64..0.999) {
            let p = SchedParams::default();
            let victim = rq.members()[0];
            let before: Vec<f64> = rq
                .members()
                .iter()
                .map(|t| timeslice(&p, &rq, &weights, *t).unwrap())
                .collect();
            let mut reduced = weights.clone();
            let w = reduced[&victim].value();
            reduced.insert(victim, p.clamp_weight(w * frac));
            for (i, t) in rq.members().iter().enumerate() {
                let after = timeslice(&p, &rq, &reduced, *t).unwrap();
                if *t == victim {
                    prop_assert!(after <= before[i] + 1e-9);
                } else {
                    prop_assert!(after >= before[i] - 1e-9);
                }
            }
        }

        /// Adjacent ladder levels differ by exactly the level ratio.
        #[test]
        fn ladder_consistency(level in 1usize..40) {
            let p = SchedParams::default();
            let hi = weight_at_level(&p, level - 1).unwrap().value();
            let lo = weight_at_level(&p, level).unwrap().value();
            prop_assert!((lo / hi - p.level_ratio).abs() < 1e-9);
        }

        /// A lone flagged thread always shares the period with the dummy:
        /// its share stays strictly below 1 and shrinks with its weight.
        #[test]
        fn dummy_dilution(w in 0.0145f64..1.0, frac in 0.1f64..0.999) {
            let p = SchedParams::default();
            let mut rq = RunQueue::new();
            rq.insert(ThreadId(0));
            rq.update_dummy(|_| true);
            let mut weights = WeightMap::new();
            weights.insert(ThreadId(0), p.clamp_weight(w));
            let share = relative_weight(&rq, &weights, ThreadId(0)).unwrap();
            prop_assert!(share < 1.0);
            weights.insert(ThreadId(0), p.clamp_weight(w * frac));
            let reduced = relative_weight(&rq, &weights, ThreadId(0)).unwrap();
            prop_assert!(reduced < share);
        }
    }
}
