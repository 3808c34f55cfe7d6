//! CSV renderers for run outputs, sweeps, calibration, and selection.
//!
//! Every renderer is a pure function from in-memory results to a complete
//! CSV string with a fixed header, so identical runs produce byte-identical
//! files. Floats are printed with six decimal places, booleans as 0/1, and
//! absent values as empty fields.

use crate::engine::{NSweepRow, PolicyRow, RunOutput, ShareSweepRow};
use crate::event_select::{ScoreMatrix, Selection};

pub const TIMELINE_HEADER: &str =
    "epoch,thread,event,mu,threat_index,weight,flag,timeslice_us,cpu_share,vtime_us";
pub const SUMMARY_HEADER: &str =
    "thread,total_cpu_us,epochs,flagged_epochs,min_weight,final_weight,bandwidth_bps,error_rate";
pub const SHARE_SWEEP_HEADER: &str = "share,bandwidth_bps,error_rate";
pub const N_SWEEP_HEADER: &str = "n,bandwidth_bps,detector_invocations_per_switch";
pub const POLICY_HEADER: &str =
    "policy,thread,first_flag_epoch,unflag_epoch,epochs_to_unflag,min_weight";
pub const THRESHOLDS_HEADER: &str = "event,tau";
pub const SELECTION_HEADER: &str = "rank,event,newly_covered";

fn f(x: f64) -> String {
    format!("{x:.6}")
}

fn opt_f(x: Option<f64>) -> String {
    x.map(f).unwrap_or_default()
}

fn opt_u(x: Option<u64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Long-format epoch timeline: one row per (thread, epoch, event), sorted
/// by thread name, then epoch, then detector event order.
pub fn render_timeline_csv(out: &RunOutput) -> String {
    let mut records: Vec<&crate::engine::EpochRecord> = out.timeline.iter().collect();
    records.sort_by(|a, b| a.thread.cmp(&b.thread).then(a.epoch.cmp(&b.epoch)));
    let mut s = String::from(TIMELINE_HEADER);
    s.push('\n');
    for r in records {
        for (e, mu) in out.events.iter().zip(&r.means) {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.thread,
                e,
                f(*mu),
                f(r.threat_index),
                f(r.weight),
                r.flagged as u8,
                f(r.timeslice_us),
                f(r.cpu_share),
                r.vtime_us,
            ));
        }
    }
    s
}

/// Per-thread aggregates, one row per thread in roster (name) order.
pub fn render_summary_csv(out: &RunOutput) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for t in &out.summaries {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            t.name,
            f(t.total_cpu_us),
            t.epochs,
            t.flagged_epochs,
            f(t.min_weight),
            f(t.final_weight),
            opt_f(t.bandwidth_bps),
            opt_f(t.error_rate),
        ));
    }
    s
}

pub fn render_share_sweep_csv(rows: &[ShareSweepRow]) -> String {
    let mut s = String::from(SHARE_SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{}\n",
            f(r.share),
            f(r.bandwidth_bps),
            f(r.error_rate)
        ));
    }
    s
}

pub fn render_n_sweep_csv(rows: &[NSweepRow]) -> String {
    let mut s = String::from(N_SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{}\n",
            r.n,
            f(r.bandwidth_bps),
            f(r.detector_invocations_per_switch)
        ));
    }
    s
}

pub fn render_policy_csv(rows: &[PolicyRow]) -> String {
    let mut s = String::from(POLICY_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.policy,
            r.thread,
            opt_u(r.first_flag_epoch),
            opt_u(r.unflag_epoch),
            opt_u(r.epochs_to_unflag),
            f(r.min_weight),
        ));
    }
    s
}

/// Calibrated per-event thresholds, in event order.
pub fn render_thresholds_csv(events: &[String], taus: &[f64]) -> String {
    let mut s = String::from(THRESHOLDS_HEADER);
    s.push('\n');
    for (e, tau) in events.iter().zip(taus) {
        s.push_str(&format!("{},{}\n", e, f(*tau)));
    }
    s
}

/// Score heatmap: one row per event, one column per attack (attacks are
/// already name-sorted in the matrix).
pub fn render_scores_csv(matrix: &ScoreMatrix) -> String {
    let mut s = String::from("event");
    for a in &matrix.attacks {
        s.push(',');
        s.push_str(a);
    }
    s.push('\n');
    for (e, row) in matrix.events.iter().zip(&matrix.scores) {
        s.push_str(e);
        for v in row {
            s.push(',');
            s.push_str(&f(*v));
        }
        s.push('\n');
    }
    s
}

/// Greedy selection result; each chosen event lists the attacks it newly
/// covered, joined with `|`.
pub fn render_selection_csv(selection: &Selection) -> String {
    let mut s = String::from(SELECTION_HEADER);
    s.push('\n');
    for (i, c) in selection.chosen.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{}\n",
            i + 1,
            c.event,
            c.newly_covered.join("|")
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{EpochRecord, ThreadSummary};
    use crate::event_select::ChosenEvent;

    fn record(thread: &str, epoch: u64, means: Vec<f64>) -> EpochRecord {
        EpochRecord {
            thread: thread.into(),
            epoch,
            means,
            threat_index: 2.0,
            weight: 0.72,
            flagged: true,
            timeslice_us: 9473.684211,
            cpu_share: 0.486,
            vtime_us: 123457,
        }
    }

    fn output() -> RunOutput {
        RunOutput {
            events: vec!["e12".into(), "e2".into()],
            timeline: vec![
                record("b", 2, vec![18947.0, 4.0]),
                record("a", 1, vec![200.0, 1.0]),
                record("b", 1, vec![20000.0, 5.0]),
            ],
            summaries: vec![ThreadSummary {
                name: "a".into(),
                total_cpu_us: 1_280_000.0,
                epochs: 2,
                flagged_epochs: 0,
                min_weight: 1.0,
                final_weight: 1.0,
                first_flag_epoch: None,
                unflag_epoch: None,
                bandwidth_bps: None,
                error_rate: None,
            }],
            channel: None,
            duration_us: 2_560_000.0,
            periods: 128,
            switches: 256,
            detector_invocations: 8,
            dummy_cpu_us: 0.0,
        }
    }

    #[test]
    fn timeline_is_sorted_and_long_format() {
        let csv = render_timeline_csv(&output());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TIMELINE_HEADER);
        // 3 records x 2 events, ordered a/1, b/1, b/2, events in order.
        assert_eq!(lines.len(), 7);
        assert_eq!(
            lines[1],
            "1,a,e12,200.000000,2.000000,0.720000,1,9473.684211,0.486000,123457"
        );
        assert_eq!(
            lines[2],
            "1,a,e2,1.000000,2.000000,0.720000,1,9473.684211,0.486000,123457"
        );
        assert!(lines[3].starts_with("1,b,e12,20000.000000"));
        assert!(lines[5].starts_with("2,b,e12,18947.000000"));
    }

    #[test]
    fn summary_leaves_channel_columns_empty_without_a_receiver() {
        let csv = render_summary_csv(&output());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SUMMARY_HEADER);
        assert_eq!(lines[1], "a,1280000.000000,2,0,1.000000,1.000000,,");
    }

    #[test]
    fn sweep_renderers_match_expected_shape() {
        let csv = render_share_sweep_csv(&[ShareSweepRow {
            share: 0.5,
            bandwidth_bps: 1.0,
            error_rate: 0.0,
        }]);
        assert_eq!(
            csv,
            "share,bandwidth_bps,error_rate\n0.500000,1.000000,0.000000\n"
        );

        let csv = render_n_sweep_csv(&[NSweepRow {
            n: 32,
            bandwidth_bps: 0.05,
            detector_invocations_per_switch: 0.03125,
        }]);
        assert_eq!(
            csv,
            "n,bandwidth_bps,detector_invocations_per_switch\n32,0.050000,0.031250\n"
        );
    }

    #[test]
    fn policy_rows_render_missing_epochs_as_blanks() {
        let csv = render_policy_csv(&[PolicyRow {
            policy: "static".into(),
            thread: "burst".into(),
            first_flag_epoch: Some(1),
            unflag_epoch: None,
            epochs_to_unflag: None,
            min_weight: 0.014412,
        }]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], POLICY_HEADER);
        assert_eq!(lines[1], "static,burst,1,,,0.014412");
    }

    #[test]
    fn thresholds_and_selection_render_in_order() {
        let csv = render_thresholds_csv(&["e12".into(), "e2".into()], &[300.0, 512.5]);
        assert_eq!(csv, "event,tau\ne12,300.000000\ne2,512.500000\n");

        let csv = render_selection_csv(&Selection {
            chosen: vec![
                ChosenEvent {
                    event: "e11".into(),
                    newly_covered: vec!["l1i".into(), "tlb".into()],
                },
                ChosenEvent {
                    event: "e2".into(),
                    newly_covered: vec!["meltdown".into()],
                },
            ],
            uncovered: vec![],
        });
        assert_eq!(
            csv,
            "rank,event,newly_covered\n1,e11,l1i|tlb\n2,e2,meltdown\n"
        );
    }

    #[test]
    fn scores_heatmap_has_attack_columns() {
        let m = ScoreMatrix {
            events: vec!["e1".into(), "e2".into()],
            attacks: vec!["aes".into(), "tlb".into()],
            scores: vec![vec![0.9, 0.1], vec![0.25, 0.8]],
        };
        let csv = render_scores_csv(&m);
        assert_eq!(
            csv,
            "event,aes,tlb\ne1,0.900000,0.100000\ne2,0.250000,0.800000\n"
        );
    }
}
