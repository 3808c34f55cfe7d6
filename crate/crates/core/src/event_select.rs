//! Counter-event selection: score how well each candidate event separates
//! an attack's per-epoch profile from a benign corpus, then pick a small
//! event set whose scores cover every attack within the register budget.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::trace::{EventTraceMatrix, TraceLabel};

#[derive(Debug, Error, PartialEq)]
pub enum SelectError {
    #[error("ranking needs at least two benign traces, got {0}")]
    InsufficientBenign(usize),
    #[error("trace events mismatch: [{left}] vs [{right}]")]
    EventMismatch { left: String, right: String },
    #[error("{0}")]
    Invalid(String),
}

/// Floor applied to interquartile ranges so constant columns cannot zero
/// the denominator of the separation score.
pub const IQR_FLOOR: f64 = 1e-9;

/// Separation score of one (event, attack) pair in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectabilityScore {
    pub event: String,
    pub attack: String,
    pub score: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    // Linear interpolation between closest ranks; callers pass sorted data.
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn median(sorted: &[f64]) -> f64 {
    quantile(sorted, 0.5)
}

fn iqr(sorted: &[f64]) -> f64 {
    quantile(sorted, 0.75) - quantile(sorted, 0.25)
}

/// Robust separation of two samples, in `[0, 1]`:
/// `|median_a - median_b| / (|median_a - median_b| + IQR_a + IQR_b)`,
/// with both IQRs floored. Invariant under shifting or scaling both
/// samples together, which is why the standardized projection below does
/// not alter it.
fn separation(mut benign: Vec<f64>, mut attack: Vec<f64>) -> f64 {
    benign.sort_by(|a, b| a.partial_cmp(b).unwrap());
    attack.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let delta = (median(&attack) - median(&benign)).abs();
    let denom = delta + iqr(&benign).max(IQR_FLOOR) + iqr(&attack).max(IQR_FLOOR);
    (delta / denom).clamp(0.0, 1.0)
}

/// Score every monitored event against one attack recording.
///
/// Per event, the pooled benign epochs for that column are standardized
/// (benign mean and deviation, deviation floored); the attack epochs are
/// projected through the same transform; the score is the robust
/// separation of the two projected samples. Output is ordered by
/// descending score, ties broken by event column order.
pub fn rank_events(
    benign: &[EventTraceMatrix],
    attack: &EventTraceMatrix,
) -> Result<Vec<DetectabilityScore>, SelectError> {
    if benign.len() < 2 {
        return Err(SelectError::InsufficientBenign(benign.len()));
    }
    for m in benign {
        if m.events != attack.events {
            return Err(SelectError::EventMismatch {
                left: m.events.join(","),
                right: attack.events.join(","),
            });
        }
    }
    if attack.rows.is_empty() || benign.iter().any(|m| m.rows.is_empty()) {
        return Err(SelectError::Invalid(
            "every trace needs at least one epoch of data".into(),
        ));
    }
    let attack_name = match &attack.label {
        TraceLabel::Attack(name) => name.clone(),
        TraceLabel::Benign => {
            return Err(SelectError::Invalid(
                "the attack trace must carry an attack label".into(),
            ))
        }
    };

    let width = attack.events.len();
    let mut scores = Vec::with_capacity(width);
    for e in 0..width {
        let pooled: Vec<f64> = benign
            .iter()
            .flat_map(|m| m.rows.iter().map(move |r| r[e]))
            .collect();
        let n = pooled.len() as f64;
        let mean = pooled.iter().sum::<f64>() / n;
        let std = (pooled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
            .sqrt()
            .max(IQR_FLOOR);
        let project = |x: f64| (x - mean) / std;
        let benign_proj: Vec<f64> = pooled.iter().map(|x| project(*x)).collect();
        let attack_proj: Vec<f64> = attack.rows.iter().map(|r| project(r[e])).collect();
        scores.push(DetectabilityScore {
            event: attack.events[e].clone(),
            attack: attack_name.clone(),
            score: separation(benign_proj, attack_proj),
        });
    }

    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|a, b| {
        scores[*b]
            .score
            .partial_cmp(&scores[*a].score)
            .unwrap()
            .then(a.cmp(b))
    });
    Ok(order.into_iter().map(|i| scores[i].clone()).collect())
}

/// Scores of every event against every attack; the input to selection.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub events: Vec<String>,
    pub attacks: Vec<String>,
    /// scores[event index][attack index]
    pub scores: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn validate(&self) -> Result<(), SelectError> {
        if self.events.is_empty() || self.attacks.is_empty() {
            return Err(SelectError::Invalid(
                "score matrix needs at least one event and one attack".into(),
            ));
        }
        if self.scores.len() != self.events.len()
            || self.scores.iter().any(|r| r.len() != self.attacks.len())
        {
            return Err(SelectError::Invalid(
                "score matrix shape does not match its event/attack labels".into(),
            ));
        }
        Ok(())
    }

    /// Collect per-attack ranking outputs into one matrix. Attacks are
    /// ordered by name, events keep their column order.
    pub fn from_rankings(
        events: &[String],
        rankings: &[Vec<DetectabilityScore>],
    ) -> Result<ScoreMatrix, SelectError> {
        let mut attacks: Vec<String> = rankings
            .iter()
            .flat_map(|r| r.iter().map(|s| s.attack.clone()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        attacks.sort();
        let mut scores = vec![vec![0.0; attacks.len()]; events.len()];
        for ranking in rankings {
            for s in ranking {
                let e = events
                    .iter()
                    .position(|x| *x == s.event)
                    .ok_or_else(|| SelectError::Invalid(format!("unknown event {}", s.event)))?;
                let a = attacks.iter().position(|x| *x == s.attack).unwrap();
                scores[e][a] = s.score;
            }
        }
        let m = ScoreMatrix {
            events: events.to_vec(),
            attacks,
            scores,
        };
        m.validate()?;
        Ok(m)
    }
}

/// One selected event and the attacks it newly covered.
#[derive(Debug, Clone, PartialEq)]
pub struct ChosenEvent {
    pub event: String,
    pub newly_covered: Vec<String>,
}

/// Result of greedy selection; `uncovered` lists attacks no selected event
/// reaches. Partial coverage is an outcome, not an error.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub chosen: Vec<ChosenEvent>,
    pub uncovered: Vec<String>,
}

/// Greedy weighted set cover over the score matrix: an event covers an
/// attack when its score reaches `min_score`. Each round picks the event
/// covering the most yet-uncovered attacks, breaking ties by higher total
/// score over all attacks, then by lower event column index. Stops when
/// the register budget is spent or everything coverable is covered.
pub fn select_events(
    matrix: &ScoreMatrix,
    num_registers: usize,
    min_score: f64,
) -> Result<Selection, SelectError> {
    matrix.validate()?;
    if num_registers == 0 {
        return Err(SelectError::Invalid("num_registers must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&min_score) {
        return Err(SelectError::Invalid(format!(
            "min_score must lie in [0, 1], got {min_score}"
        )));
    }

    let covers = |e: usize, a: usize| matrix.scores[e][a] >= min_score;
    let totals: Vec<f64> = matrix
        .scores
        .iter()
        .map(|row| row.iter().sum::<f64>())
        .collect();

    let mut uncovered: BTreeSet<usize> = (0..matrix.attacks.len()).collect();
    let mut chosen = Vec::new();
    let mut used: BTreeSet<usize> = BTreeSet::new();

    while chosen.len() < num_registers && !uncovered.is_empty() {
        let mut best: Option<(usize, usize)> = None; // (event, gain)
        for e in 0..matrix.events.len() {
            if used.contains(&e) {
                continue;
            }
            let gain = uncovered.iter().filter(|a| covers(e, **a)).count();
            if gain == 0 {
                continue;
            }
            best = match best {
                None => Some((e, gain)),
                Some((be, bg)) => {
                    if gain > bg
                        || (gain == bg && totals[e] > totals[be])
                        || (gain == bg && totals[e] == totals[be] && e < be)
                    {
                        Some((e, gain))
                    } else {
                        Some((be, bg))
                    }
                }
            };
        }
        let Some((e, _)) = best else {
            break; // nothing left can cover anything
        };
        let newly: Vec<usize> = uncovered
            .iter()
            .copied()
            .filter(|a| covers(e, *a))
            .collect();
        for a in &newly {
            uncovered.remove(a);
        }
        used.insert(e);
        chosen.push(ChosenEvent {
            event: matrix.events[e].clone(),
            newly_covered: newly.iter().map(|a| matrix.attacks[*a].clone()).collect(),
        });
    }

    Ok(Selection {
        chosen,
        uncovered: uncovered
            .into_iter()
            .map(|a| matrix.attacks[a].clone())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(events: Vec<&str>, rows: Vec<Vec<f64>>, label: TraceLabel) -> EventTraceMatrix {
        EventTraceMatrix {
            events: events.into_iter().map(String::from).collect(),
            rows,
            label,
        }
    }

    fn attack_label() -> TraceLabel {
        TraceLabel::Attack("probe".into())
    }

    #[test]
    fn disjoint_constant_columns_score_near_one() {
        let benign = vec![
            matrix(vec!["e1"], vec![vec![10.0]; 4], TraceLabel::Benign),
            matrix(vec!["e1"], vec![vec![10.0]; 4], TraceLabel::Benign),
        ];
        let attack = matrix(vec!["e1"], vec![vec![1000.0]; 4], attack_label());
        let scores = rank_events(&benign, &attack).unwrap();
        assert!(scores[0].score > 0.999999);
        assert!(scores[0].score <= 1.0);
    }

    #[test]
    fn identical_distributions_score_near_zero() {
        let rows = vec![vec![10.0], vec![12.0], vec![8.0], vec![11.0]];
        let benign = vec![
            matrix(vec!["e1"], rows.clone(), TraceLabel::Benign),
            matrix(vec!["e1"], rows.clone(), TraceLabel::Benign),
        ];
        let attack = matrix(vec!["e1"], rows, attack_label());
        let scores = rank_events(&benign, &attack).unwrap();
        assert!(scores[0].score < 1e-9);
    }

    #[test]
    fn needs_two_benign_traces() {
        let benign = vec![matrix(vec!["e1"], vec![vec![1.0]], TraceLabel::Benign)];
        let attack = matrix(vec!["e1"], vec![vec![2.0]], attack_label());
        assert_eq!(
            rank_events(&benign, &attack).unwrap_err(),
            SelectError::InsufficientBenign(1)
        );
    }

    #[test]
    fn mismatched_event_sets_are_rejected() {
        let benign = vec![
            matrix(vec!["e1"], vec![vec![1.0]], TraceLabel::Benign),
            matrix(vec!["e1"], vec![vec![1.0]], TraceLabel::Benign),
        ];
        let attack = matrix(vec!["e2"], vec![vec![2.0]], attack_label());
        assert!(matches!(
            rank_events(&benign, &attack).unwrap_err(),
            SelectError::EventMismatch { .. }
        ));
    }

    /// Brute-force single-threshold classifier: best balanced accuracy over
    /// every midpoint threshold and both directions.
    fn classifier_accuracy(benign: &[f64], attack: &[f64]) -> f64 {
        let mut candidates: Vec<f64> = benign.iter().chain(attack).copied().collect();
        candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut cuts = vec![candidates[0] - 1.0];
        for w in candidates.windows(2) {
            cuts.push((w[0] + w[1]) / 2.0);
        }
        cuts.push(candidates[candidates.len() - 1] + 1.0);
        let mut best: f64 = 0.0;
        for cut in cuts {
            for flip in [false, true] {
                let hit = |x: &f64| if flip { *x < cut } else { *x >= cut };
                let tpr = attack.iter().filter(|x| hit(x)).count() as f64 / attack.len() as f64;
                let tnr = benign.iter().filter(|x| !hit(x)).count() as f64 / benign.len() as f64;
                best = best.max((tpr + tnr) / 2.0);
            }
        }
        best
    }

    #[test]
    fn score_order_matches_threshold_classifier_order() {
        // e1: heavy overlap; e2: clean separation; e3: partial overlap.
        let benign_rows = vec![
            vec![10.0, 5.0, 20.0],
            vec![12.0, 6.0, 24.0],
            vec![11.0, 5.5, 22.0],
            vec![9.0, 6.5, 26.0],
        ];
        let attack_rows = vec![
            vec![10.5, 50.0, 25.0],
            vec![11.5, 52.0, 28.0],
            vec![10.0, 49.0, 30.0],
            vec![12.0, 51.0, 32.0],
        ];
        let benign = vec![
            matrix(
                vec!["e1", "e2", "e3"],
                benign_rows.clone(),
                TraceLabel::Benign,
            ),
            matrix(
                vec!["e1", "e2", "e3"],
                benign_rows.clone(),
                TraceLabel::Benign,
            ),
        ];
        let attack = matrix(vec!["e1", "e2", "e3"], attack_rows.clone(), attack_label());
        let scores = rank_events(&benign, &attack).unwrap();

        let acc: Vec<(String, f64)> = (0..3)
            .map(|e| {
                let b: Vec<f64> = benign_rows
                    .iter()
                    .chain(&benign_rows)
                    .map(|r| r[e])
                    .collect();
                let a: Vec<f64> = attack_rows.iter().map(|r| r[e]).collect();
                (format!("e{}", e + 1), classifier_accuracy(&b, &a))
            })
            .collect();
        let mut by_acc = acc.clone();
        by_acc.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());

        let ranked: Vec<&str> = scores.iter().map(|s| s.event.as_str()).collect();
        let expected: Vec<&str> = by_acc.iter().map(|(e, _)| e.as_str()).collect();
        assert_eq!(ranked, expected);
        assert_eq!(ranked[0], "e2");
    }

    fn simple_matrix() -> ScoreMatrix {
        ScoreMatrix {
            events: vec!["e1".into(), "e2".into(), "e3".into()],
            attacks: vec!["a".into(), "b".into(), "c".into()],
            scores: vec![
                vec![0.9, 0.9, 0.9],
                vec![0.9, 0.1, 0.1],
                vec![0.1, 0.9, 0.1],
            ],
        }
    }

    #[test]
    fn dominating_event_is_selected_alone() {
        let sel = select_events(&simple_matrix(), 4, 0.5).unwrap();
        assert_eq!(sel.chosen.len(), 1);
        assert_eq!(sel.chosen[0].event, "e1");
        assert_eq!(sel.chosen[0].newly_covered, vec!["a", "b", "c"]);
        assert!(sel.uncovered.is_empty());
    }

    #[test]
    fn budget_exhaustion_reports_uncovered() {
        let m = ScoreMatrix {
            events: vec!["e1".into(), "e2".into()],
            attacks: vec!["a".into(), "b".into(), "c".into()],
            scores: vec![vec![0.9, 0.1, 0.1], vec![0.1, 0.9, 0.1]],
        };
        let sel = select_events(&m, 2, 0.5).unwrap();
        assert_eq!(sel.chosen.len(), 2);
        assert_eq!(sel.uncovered, vec!["c".to_string()]);
    }

    #[test]
    fn ties_break_by_total_score_then_index() {
        let m = ScoreMatrix {
            events: vec!["e1".into(), "e2".into()],
            attacks: vec!["a".into(), "b".into()],
            scores: vec![vec![0.6, 0.1], vec![0.6, 0.4]],
        };
        // Both cover only `a`; e2 has the larger total score.
        let sel = select_events(&m, 1, 0.5).unwrap();
        assert_eq!(sel.chosen[0].event, "e2");

        let m = ScoreMatrix {
            events: vec!["e1".into(), "e2".into()],
            attacks: vec!["a".into()],
            scores: vec![vec![0.6], vec![0.6]],
        };
        let sel = select_events(&m, 1, 0.5).unwrap();
        assert_eq!(sel.chosen[0].event, "e1");
    }

    #[test]
    fn zero_budget_is_rejected() {
        let err = select_events(&simple_matrix(), 0, 0.5).unwrap_err();
        assert!(err.to_string().contains("num_registers"));
    }

    #[test]
    fn scores_sit_in_unit_interval() {
        let benign = vec![
            matrix(vec!["e1"], vec![vec![0.0], vec![1e12]], TraceLabel::Benign),
            matrix(vec!["e1"], vec![vec![5.0], vec![3.0]], TraceLabel::Benign),
        ];
        let attack = matrix(vec!["e1"], vec![vec![1e15], vec![0.0]], attack_label());
        let scores = rank_events(&benign, &attack).unwrap();
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(&s.score)));
    }

    proptest! {
        /// Relabeling events (permuting columns) permutes scores with them.
        #[test]
        fn permutation_invariance(
            benign_a in proptest::collection::vec(proptest::collection::vec(0.0f64..100.0, 3), 4..8),
            benign_b in proptest::collection::vec(proptest::collection::vec(0.0f64..100.0, 3), 4..8),
            attack_rows in proptest::collection::vec(proptest::collection::vec(0.0f64..1000.0, 3), 4..8),
        ) {
            let events = vec!["e1", "e2", "e3"];
            let benign = vec![
                matrix(events.clone(), benign_a.clone(), TraceLabel::Benign),
                matrix(events.clone(), benign_b.clone(), TraceLabel::Benign),
            ];
            let attack = matrix(events, attack_rows.clone(), attack_label());
            let straight = rank_events(&benign, &attack).unwrap();

            let perm = [2usize, 0, 1];
            let permute = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                rows.iter().map(|r| perm.iter().map(|i| r[*i]).collect()).collect()
            };
            let pevents = vec!["e3", "e1", "e2"];
            let pbenign = vec![
                matrix(pevents.clone(), permute(&benign_a), TraceLabel::Benign),
                matrix(pevents.clone(), permute(&benign_b), TraceLabel::Benign),
            ];
            let pattack = matrix(pevents, permute(&attack_rows), attack_label());
            let permuted = rank_events(&pbenign, &pattack).unwrap();

            for s in &straight {
                let twin = permuted.iter().find(|p| p.event == s.event).unwrap();
                prop_assert!((s.score - twin.score).abs() < 1e-9);
            }
        }

        /// Scaling one event's column by a positive constant in both the
        /// benign and attack data leaves its score unchanged.
        #[test]
        fn scale_robustness(
            benign_a in proptest::collection::vec(proptest::collection::vec(0.1f64..100.0, 2), 4..8),
            benign_b in proptest::collection::vec(proptest::collection::vec(0.1f64..100.0, 2), 4..8),
            attack_rows in proptest::collection::vec(proptest::collection::vec(0.1f64..1000.0, 2), 4..8),
            scale in 0.001f64..1000.0,
        ) {
            let events = vec!["e1", "e2"];
            let benign = vec![
                matrix(events.clone(), benign_a.clone(), TraceLabel::Benign),
                matrix(events.clone(), benign_b.clone(), TraceLabel::Benign),
            ];
            let attack = matrix(events.clone(), attack_rows.clone(), attack_label());
            let before = rank_events(&benign, &attack).unwrap();

            let scale_col = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                rows.iter()
                    .map(|r| vec![r[0] * scale, r[1]])
                    .collect()
            };
            let sbenign = vec![
                matrix(events.clone(), scale_col(&benign_a), TraceLabel::Benign),
                matrix(events.clone(), scale_col(&benign_b), TraceLabel::Benign),
            ];
            let sattack = matrix(events, scale_col(&attack_rows), attack_label());
            let after = rank_events(&sbenign, &sattack).unwrap();

            let find = |set: &[DetectabilityScore], e: &str| {
                set.iter().find(|s| s.event == e).unwrap().score
            };
            prop_assert!((find(&before, "e1") - find(&after, "e1")).abs() < 1e-6);
            prop_assert!((find(&before, "e2") - find(&after, "e2")).abs() < 1e-9);
        }

        /// With budget for one event per attack, greedy covers every attack
        /// that any event can cover.
        #[test]
        fn coverage_when_budget_permits(
            scores in proptest::collection::vec(
                proptest::collection::vec(0.0f64..1.0, 5),
                6,
            ),
        ) {
            let m = ScoreMatrix {
                events: (0..6).map(|i| format!("e{i}")).collect(),
                attacks: (0..5).map(|i| format!("a{i}")).collect(),
                scores,
            };
            let sel = select_events(&m, 5, 0.5).unwrap();
            for (a, attack) in m.attacks.iter().enumerate() {
                let coverable = (0..6).any(|e| m.scores[e][a] >= 0.5);
                if coverable {
                    prop_assert!(
                        !sel.uncovered.contains(attack),
                        "coverable attack {} left uncovered", attack
                    );
                }
            }
        }
    }
}
