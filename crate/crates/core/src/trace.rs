//! Counter-trace tables: long-format per-switch recordings, their CSV
//! encoding, and the per-epoch mean matrices derived from them.
//!
//! The interchange schema is one row per (thread, switch, event):
//!
//! ```text
//! thread,switch_index,event,count
//! ```
//!
//! Every switch of a thread must carry a count for every event that thread
//! reports; missing cells are an input error, not zeros.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

/// Whether a recording came from benign activity or from a named attack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceLabel {
    Benign,
    Attack(String),
}

/// Per-switch counter deltas for one thread, events in column order.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreadTrace {
    pub events: Vec<String>,
    /// rows[switch][event index]
    pub rows: Vec<Vec<i64>>,
}

impl ThreadTrace {
    /// Collapse per-switch rows into per-epoch means, one row per chunk of
    /// `epoch_len` switches. A trailing partial epoch is dropped.
    pub fn epoch_means(&self, epoch_len: usize) -> Vec<Vec<f64>> {
        assert!(epoch_len > 0, "epoch length must be positive");
        let epochs = self.rows.len() / epoch_len;
        let width = self.events.len();
        let mut out = Vec::with_capacity(epochs);
        for e in 0..epochs {
            let mut sums = vec![0.0; width];
            for row in &self.rows[e * epoch_len..(e + 1) * epoch_len] {
                for (s, c) in sums.iter_mut().zip(row) {
                    *s += *c as f64;
                }
            }
            sums.iter_mut().for_each(|s| *s /= epoch_len as f64);
            out.push(sums);
        }
        out
    }

    /// Reorder and restrict columns to `events`. Fails naming any event
    /// the trace does not carry; extra recorded events are dropped.
    pub fn select_events(&self, events: &[String]) -> Result<ThreadTrace, TraceError> {
        let mut indices = Vec::with_capacity(events.len());
        for e in events {
            let idx = self
                .events
                .iter()
                .position(|have| have == e)
                .ok_or_else(|| {
                    TraceError::Invalid(format!(
                        "trace does not record event {e} (has: {})",
                        self.events.join(",")
                    ))
                })?;
            indices.push(idx);
        }
        Ok(ThreadTrace {
            events: events.to_vec(),
            rows: self
                .rows
                .iter()
                .map(|row| indices.iter().map(|i| row[*i]).collect())
                .collect(),
        })
    }
}

/// A parsed trace file: one [`ThreadTrace`] per recorded thread.
#[derive(Debug, Clone, Default)]
pub struct TraceTable {
    pub threads: BTreeMap<String, ThreadTrace>,
}

/// Per-epoch mean counter values for one recorded program.
#[derive(Debug, Clone, PartialEq)]
pub struct EventTraceMatrix {
    pub events: Vec<String>,
    /// rows[epoch][event index]
    pub rows: Vec<Vec<f64>>,
    pub label: TraceLabel,
}

/// Sort key for event names: `e<number>` labels order by their number,
/// anything else falls back to lexicographic order after them.
pub fn event_sort_key(name: &str) -> (u64, String) {
    if let Some(rest) = name.strip_prefix('e') {
        if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
            if let Ok(n) = rest.parse::<u64>() {
                return (n, String::new());
            }
        }
    }
    (u64::MAX, name.to_string())
}

pub const TRACE_HEADER: &str = "thread,switch_index,event,count";

/// Parse the long-format trace schema. Errors carry 1-based line numbers.
pub fn parse_trace_csv(text: &str) -> Result<TraceTable, TraceError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(TraceError::Parse {
        line: 1,
        msg: "empty file, expected header".into(),
    })?;
    if header.trim_end() != TRACE_HEADER {
        return Err(TraceError::Parse {
            line: 1,
            msg: format!("expected header `{TRACE_HEADER}`, got `{header}`"),
        });
    }

    // thread -> switch -> event -> count, collected before shaping so rows
    // may arrive in any order.
    let mut cells: BTreeMap<String, BTreeMap<u64, BTreeMap<String, i64>>> = BTreeMap::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let trimmed = raw.trim_end();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 4 {
            return Err(TraceError::Parse {
                line,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let thread = fields[0].trim();
        if thread.is_empty() {
            return Err(TraceError::Parse {
                line,
                msg: "empty thread name".into(),
            });
        }
        let switch: u64 = fields[1].trim().parse().map_err(|_| TraceError::Parse {
            line,
            msg: format!("switch_index `{}` is not a non-negative integer", fields[1]),
        })?;
        let event = fields[2].trim();
        if event.is_empty() {
            return Err(TraceError::Parse {
                line,
                msg: "empty event name".into(),
            });
        }
        let count: i64 = fields[3].trim().parse().map_err(|_| TraceError::Parse {
            line,
            msg: format!("count `{}` is not an integer", fields[3]),
        })?;
        if count < 0 {
            return Err(TraceError::Parse {
                line,
                msg: format!("count {count} is negative"),
            });
        }
        let prev = cells
            .entry(thread.to_string())
            .or_default()
            .entry(switch)
            .or_default()
            .insert(event.to_string(), count);
        if prev.is_some() {
            return Err(TraceError::Parse {
                line,
                msg: format!("duplicate cell for thread {thread}, switch {switch}, event {event}"),
            });
        }
    }

    let mut table = TraceTable::default();
    for (thread, switches) in cells {
        let mut events: Vec<String> = switches.values().flat_map(|m| m.keys().cloned()).collect();
        events.sort_by_key(|e| event_sort_key(e));
        events.dedup();

        let mut rows = Vec::with_capacity(switches.len());
        for (expected, (switch, counts)) in switches.iter().enumerate() {
            if *switch != expected as u64 {
                return Err(TraceError::Invalid(format!(
                    "thread {thread}: switch indices must be dense from 0, missing {expected}"
                )));
            }
            let mut row = Vec::with_capacity(events.len());
            for e in &events {
                let c = counts.get(e).ok_or_else(|| {
                    TraceError::Invalid(format!(
                        "thread {thread}, switch {switch}: missing count for event {e}"
                    ))
                })?;
                row.push(*c);
            }
            rows.push(row);
        }
        table.threads.insert(thread, ThreadTrace { events, rows });
    }
    Ok(table)
}

pub fn load_trace_csv(path: &Path) -> Result<TraceTable, TraceError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| TraceError::Invalid(format!("{}: {e}", path.display())))?;
    parse_trace_csv(&text)
}

/// Render a trace table back to the interchange schema, rows ordered by
/// thread name, switch index, then event column order.
pub fn render_trace_csv(table: &TraceTable) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for (thread, tt) in &table.threads {
        for (switch, row) in tt.rows.iter().enumerate() {
            for (event, count) in tt.events.iter().zip(row) {
                let _ = writeln!(out, "{thread},{switch},{event},{count}");
            }
        }
    }
    out
}

/// Build one labeled epoch-mean matrix per thread of a trace table.
pub fn epoch_matrices(
    table: &TraceTable,
    epoch_len: usize,
    label: TraceLabel,
) -> Vec<EventTraceMatrix> {
    table
        .threads
        .values()
        .map(|tt| EventTraceMatrix {
            events: tt.events.clone(),
            rows: tt.epoch_means(epoch_len),
            label: label.clone(),
        })
        .collect()
}
