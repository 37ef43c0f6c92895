//! Per-process activity log in Chrome trace-event JSON.
//!
//! Each rank records Begin/End pairs from its progress loop into memory and
//! writes one JSON array at shutdown. `pid` is the rank, `tid` is always 0, and
//! `ts` counts microseconds since the runtime started on that process. Clocks
//! are not synchronised across hosts; ranks only line up by lane.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROGRESS_TID: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "NEGOTIATE")]
    Negotiate,
    #[serde(rename = "MEMCPY_IN_FUSION_BUFFER")]
    MemcpyInFusionBuffer,
    #[serde(rename = "COMMUNICATE")]
    Communicate,
    #[serde(rename = "MEMCPY_OUT_FUSION_BUFFER")]
    MemcpyOutFusionBuffer,
    #[serde(rename = "BROADCAST")]
    Broadcast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "B")]
    Begin,
    #[serde(rename = "E")]
    End,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub name: String,
    #[serde(rename = "cat")]
    pub category: Category,
    #[serde(rename = "ph")]
    pub phase: Phase,
    #[serde(rename = "ts")]
    pub timestamp_us: u64,
    pub pid: u32,
    pub tid: u32,
}

/// Buffered event sink. A disabled sink drops everything.
#[derive(Debug)]
pub struct Timeline {
    inner: Option<Sink>,
}

#[derive(Debug)]
struct Sink {
    path: PathBuf,
    pid: u32,
    epoch: Instant,
    last_ts: u64,
    events: Vec<TraceEvent>,
}

impl Timeline {
    pub fn disabled() -> Self {
        Timeline { inner: None }
    }

    pub fn new(path: Option<PathBuf>, rank: usize) -> Self {
        Timeline {
            inner: path.map(|path| Sink {
                path,
                pid: rank as u32,
                epoch: Instant::now(),
                last_ts: 0,
                events: Vec::new(),
            }),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.inner.is_some()
    }

    pub fn events(&self) -> &[TraceEvent] {
        self.inner.as_ref().map_or(&[], |s| &s.events)
    }

    /// Current timestamp on this sink's clock; 0 when disabled.
    pub fn now_us(&self) -> u64 {
        self.inner
            .as_ref()
            .map_or(0, |s| (s.epoch.elapsed().as_micros() as u64).max(s.last_ts))
    }

    pub fn record(&mut self, name: &str, category: Category, phase: Phase) {
        let ts = self.now_us();
        self.record_at(name, category, phase, ts);
    }

    /// Records with an explicit timestamp, clamped so the log never goes backwards.
    pub fn record_at(&mut self, name: &str, category: Category, phase: Phase, ts: u64) {
        if let Some(s) = self.inner.as_mut() {
            let ts = ts.max(s.last_ts);
            s.last_ts = ts;
            s.events.push(TraceEvent {
                name: name.to_string(),
                category,
                phase,
                timestamp_us: ts,
                pid: s.pid,
                tid: PROGRESS_TID,
            });
        }
    }

    pub fn begin(&mut self, name: &str, category: Category) {
        self.record(name, category, Phase::Begin);
    }

    pub fn end(&mut self, name: &str, category: Category) {
        self.record(name, category, Phase::End);
    }

    /// Writes the log to its file. Failures are reported once and the sink is dropped.
    pub fn flush(&mut self) {
        let Some(sink) = self.inner.take() else {
            return;
        };
        let written = serialize_chrome_trace(&sink.events)
            .and_then(|json| fs::write(&sink.path, json).map_err(Error::from));
        if let Err(e) = written {
            log::warn!("timeline disabled, could not write {}: {e}", sink.path.display());
        }
    }
}

/// Checks Begin/End pairs nest properly on every (pid, tid) lane.
pub fn check_balanced(events: &[TraceEvent]) -> Result<()> {
    let mut stacks: HashMap<(u32, u32), Vec<(&str, Category)>> = HashMap::new();
    for (i, e) in events.iter().enumerate() {
        let stack = stacks.entry((e.pid, e.tid)).or_default();
        match e.phase {
            Phase::Begin => stack.push((&e.name, e.category)),
            Phase::End => match stack.pop() {
                Some((name, cat)) if name == e.name && cat == e.category => {}
                Some((name, cat)) => {
                    return Err(Error::Timeline(format!(
                        "event {i}: End {:?}/{} closes open {:?}/{} on pid {}",
                        e.category, e.name, cat, name, e.pid
                    )))
                }
                None => {
                    return Err(Error::Timeline(format!(
                        "event {i}: End {:?}/{} without Begin on pid {}",
                        e.category, e.name, e.pid
                    )))
                }
            },
        }
    }
    for ((pid, tid), stack) in stacks {
        if let Some((name, cat)) = stack.last() {
            return Err(Error::Timeline(format!(
                "unclosed Begin {cat:?}/{name} on pid {pid} tid {tid}"
            )));
        }
    }
    Ok(())
}

pub fn serialize_chrome_trace(events: &[TraceEvent]) -> Result<String> {
    check_balanced(events)?;
    serde_json::to_string(events).map_err(|e| Error::Timeline(e.to_string()))
}

pub fn parse_chrome_trace(json: &str) -> Result<Vec<TraceEvent>> {
    serde_json::from_str(json).map_err(|e| Error::Timeline(e.to_string()))
}

/// Concatenates per-rank trace files into `out`. Timestamps are not rebased.
pub fn merge_rank_traces<P: AsRef<Path>>(inputs: &[P], out: &Path) -> Result<usize> {
    let mut merged = Vec::new();
    for p in inputs {
        let p = p.as_ref();
        let text = fs::read_to_string(p)
            .map_err(|e| Error::Timeline(format!("reading {}: {e}", p.display())))?;
        let events = parse_chrome_trace(&text)
            .map_err(|e| Error::Timeline(format!("malformed trace {}: {e}", p.display())))?;
        merged.extend(events);
    }
    let json = serialize_chrome_trace(&merged)?;
    fs::write(out, json)?;
    Ok(merged.len())
}

pub fn pids(events: &[TraceEvent]) -> BTreeSet<u32> {
    events.iter().map(|e| e.pid).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(name: &str, category: Category, phase: Phase, ts: u64, pid: u32) -> TraceEvent {
        TraceEvent {
            name: name.into(),
            category,
            phase,
            timestamp_us: ts,
            pid,
            tid: 0,
        }
    }

    #[test]
    fn empty_log_is_empty_array() {
        assert_eq!(serialize_chrome_trace(&[]).unwrap(), "[]");
    }

    #[test]
    fn one_pair_has_expected_fields() {
        let events = vec![
            ev("grad", Category::Communicate, Phase::Begin, 10, 3),
            ev("grad", Category::Communicate, Phase::End, 12, 3),
        ];
        let json = serialize_chrome_trace(&events).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let arr = v.as_array().unwrap();
        assert_eq!(arr.len(), 2);
        assert_eq!(
            arr[0],
            serde_json::json!({"name": "grad", "cat": "COMMUNICATE", "ph": "B", "ts": 10, "pid": 3, "tid": 0})
        );
        assert_eq!(arr[1]["ph"], "E");
        assert!(arr[1]["ts"].as_u64() >= arr[0]["ts"].as_u64());
        assert_eq!(parse_chrome_trace(&json).unwrap(), events);
    }

    #[test]
    fn unbalanced_is_rejected() {
        let open = vec![ev("a", Category::Negotiate, Phase::Begin, 0, 0)];
        assert!(matches!(serialize_chrome_trace(&open), Err(Error::Timeline(_))));
        let stray = vec![ev("a", Category::Negotiate, Phase::End, 0, 0)];
        assert!(serialize_chrome_trace(&stray).is_err());
        let crossed = vec![
            ev("a", Category::Negotiate, Phase::Begin, 0, 0),
            ev("b", Category::Communicate, Phase::Begin, 1, 0),
            ev("a", Category::Negotiate, Phase::End, 2, 0),
            ev("b", Category::Communicate, Phase::End, 3, 0),
        ];
        assert!(serialize_chrome_trace(&crossed).is_err());
        // Separate lanes do not interfere.
        let lanes = vec![
            ev("a", Category::Negotiate, Phase::Begin, 0, 0),
            ev("a", Category::Negotiate, Phase::Begin, 0, 1),
            ev("a", Category::Negotiate, Phase::End, 1, 0),
            ev("a", Category::Negotiate, Phase::End, 1, 1),
        ];
        serialize_chrome_trace(&lanes).unwrap();
    }

    #[test]
    fn disabled_sink_records_nothing() {
        let mut t = Timeline::disabled();
        t.begin("x", Category::Communicate);
        t.end("x", Category::Communicate);
        assert!(t.events().is_empty());
        t.flush();
    }

    #[test]
    fn timestamps_never_decrease() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Timeline::new(Some(dir.path().join("t.json")), 0);
        t.record_at("a", Category::Negotiate, Phase::Begin, 100);
        t.record_at("a", Category::Negotiate, Phase::End, 50);
        t.begin("b", Category::Communicate);
        t.end("b", Category::Communicate);
        let ts: Vec<_> = t.events().iter().map(|e| e.timestamp_us).collect();
        assert!(ts.windows(2).all(|w| w[0] <= w[1]), "{ts:?}");
    }

    #[test]
    fn flush_then_merge() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for rank in 0..3 {
            let p = dir.path().join(format!("r{rank}.json"));
            let mut t = Timeline::new(Some(p.clone()), rank);
            for i in 0..=rank {
                let name = format!("t{i}");
                t.begin(&name, Category::Communicate);
                t.end(&name, Category::Communicate);
            }
            t.flush();
            paths.push(p);
        }
        let out = dir.path().join("merged.json");
        assert_eq!(merge_rank_traces(&paths[..1], &out).unwrap(), 2);
        let n = merge_rank_traces(&paths, &out).unwrap();
        assert_eq!(n, 2 + 4 + 6);
        let merged = parse_chrome_trace(&fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(pids(&merged), BTreeSet::from([0, 1, 2]));
        check_balanced(&merged).unwrap();
    }

    #[test]
    fn merge_names_malformed_file() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.json");
        fs::write(&bad, "{not json").unwrap();
        let err = merge_rank_traces(&[&bad], &dir.path().join("o.json")).unwrap_err();
        assert!(err.to_string().contains("bad.json"), "{err}");
    }

    #[test]
    fn unwritable_path_warns_and_disables() {
        let mut t = Timeline::new(Some(PathBuf::from("/nonexistent-dir/x/y.json")), 0);
        t.begin("a", Category::Negotiate);
        t.end("a", Category::Negotiate);
        t.flush();
        assert!(!t.is_enabled());
    }
}
