//! Dataset ingestion, conversion and synthesis.
//!
//! The canonical bandwidth-trace format is UTF-8 text, one
//! `timestamp_s bandwidth_mbps` pair per line; `#` starts a comment.

mod frames;
mod markov;
mod packets;
mod quality;
mod split;

pub use frames::{gen_frame_clip, read_frame_clip, write_frame_clip, FrameClip, FRAMES_PER_SLOT, FRAME_CHANNELS, FRAME_HEIGHT, FRAME_WIDTH};
pub use markov::{gen_markov_trace, gen_markov_trace_with_states, MarkovTraceConfig};
pub use packets::{packets_to_bandwidth, read_packets_csv, write_packets_csv, PacketConversion, PacketRecord};
pub use quality::{gen_quality_curves, read_quality_csv, write_quality_csv, QualityCurveSeries, QualityProfile, QualityVector};
pub use split::split_dataset;

use std::fmt::Write as _;
use std::io::Read;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub time_s: f64,
    pub mbps: f64,
}

/// Available-bandwidth time series driving the link simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthTrace {
    pub id: String,
    entries: Vec<TraceEntry>,
}

impl BandwidthTrace {
    /// Validates strictly increasing timestamps and positive bandwidth.
    pub fn new(id: impl Into<String>, entries: Vec<TraceEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            check_entry(i + 1, e, i.checked_sub(1).map(|j| entries[j].time_s))?;
        }
        Ok(BandwidthTrace {
            id: id.into(),
            entries,
        })
    }

    /// Builds a trace with one entry per `slot` seconds, starting at 0.
    pub fn from_slots(id: impl Into<String>, slot: f64, mbps: &[f64]) -> Result<Self> {
        let entries = mbps
            .iter()
            .enumerate()
            .map(|(i, &m)| TraceEntry {
                time_s: i as f64 * slot,
                mbps: m,
            })
            .collect();
        Self::new(id, entries)
    }

    pub fn constant(id: impl Into<String>, mbps: f64, slots: usize) -> Result<Self> {
        Self::from_slots(id, 1.0, &vec![mbps; slots])
    }

    pub fn parse(id: impl Into<String>, text: &str) -> Result<Self> {
        let mut entries: Vec<TraceEntry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let (Some(ts), Some(bw), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected `timestamp_s bandwidth_mbps`, got {line:?}"),
                });
            };
            let num = |s: &str, what: &str| {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("bad {what} {s:?}"),
                })
            };
            let e = TraceEntry {
                time_s: num(ts, "timestamp")?,
                mbps: num(bw, "bandwidth")?,
            };
            check_entry(line_no, &e, entries.last().map(|p| p.time_s))?;
            entries.push(e);
        }
        Ok(BandwidthTrace {
            id: id.into(),
            entries,
        })
    }

    pub fn read<R: Read>(id: impl Into<String>, mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        Self::parse(id, &text)
    }

    /// Serializes to the canonical two-column text format. Floats use the
    /// shortest representation that parses back to the same value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{} {}", e.time_s, e.mbps);
        }
        out
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mean_mbps(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.mbps).sum::<f64>() / self.entries.len() as f64
    }

    /// Step-hold bandwidth at `t` seconds after the first timestamp.
    pub fn bandwidth_at(&self, t: f64) -> f64 {
        let Some(first) = self.entries.first() else {
            return 0.0;
        };
        let abs = first.time_s + t;
        let idx = self.entries.partition_point(|e| e.time_s <= abs);
        self.entries[idx.saturating_sub(1)].mbps
    }

    /// Number of whole `slot`-second slots the trace covers (at least one per entry span).
    pub fn slot_count(&self, slot: f64) -> usize {
        match (self.entries.first(), self.entries.last()) {
            (Some(a), Some(b)) => ((b.time_s - a.time_s) / slot + 1e-9).floor() as usize + 1,
            _ => 0,
        }
    }

    /// Per-slot bandwidth, sampled at each slot start.
    pub fn slot_bandwidths(&self, slot: f64) -> Vec<f64> {
        (0..self.slot_count(slot))
            .map(|n| self.bandwidth_at(n as f64 * slot))
            .collect()
    }

    /// Ingests a Norway HSDPA-style chunk log:
    /// `unix_ts ms_since_start lat lon bytes_since_last ms_since_last` per line.
    /// Chunks with no bytes are held at `floor_mbps`.
    pub fn from_hsdpa_log(id: impl Into<String>, text: &str, floor_mbps: f64) -> Result<Self> {
        let mut entries: Vec<TraceEntry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() < 6 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected 6 columns, got {}", f.len()),
                });
            }
            let num = |s: &str| {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("bad number {s:?}"),
                })
            };
            let (since_start_ms, bytes, elapsed_ms) = (num(f[1])?, num(f[4])?, num(f[5])?);
            if elapsed_ms <= 0.0 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "non-positive chunk duration".into(),
                });
            }
            let mbps = (bytes * 8.0 / (elapsed_ms / 1000.0) / 1e6).max(floor_mbps);
            let e = TraceEntry {
                time_s: since_start_ms / 1000.0,
                mbps,
            };
            check_entry(line_no, &e, entries.last().map(|p| p.time_s))?;
            entries.push(e);
        }
        Ok(BandwidthTrace {
            id: id.into(),
            entries,
        })
    }
}

fn check_entry(line: usize, e: &TraceEntry, prev_time: Option<f64>) -> Result<()> {
    if !e.time_s.is_finite() || !e.mbps.is_finite() {
        return Err(Error::Parse {
            line,
            msg: "non-finite value".into(),
        });
    }
    if !(e.mbps > 0.0) {
        return Err(Error::Parse {
            line,
            msg: format!("bandwidth must be positive, got {}", e.mbps),
        });
    }
    if let Some(p) = prev_time {
        if e.time_s <= p {
            return Err(Error::Parse {
                line,
                msg: format!("timestamp {} does not increase (previous {p})", e.time_s),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_constant_trace() {
        let t = BandwidthTrace::parse("c", "0.0 1.0\n1.0 1.0").unwrap();
        assert_eq!(t.len(), 2);
        assert!(t.entries().iter().all(|e| e.mbps == 1.0));
    }

    #[test]
    fn reports_offending_line() {
        match BandwidthTrace::parse("x", "0.0 1.0\n0.5 -2") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match BandwidthTrace::parse("x", "# header\n1.0 1.0\n\n0.5 2") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert!(BandwidthTrace::parse("x", "1.0").is_err());
        assert!(BandwidthTrace::parse("x", "1.0 2.0 3.0").is_err());
    }

    #[test]
    fn thousand_lines_round_trip() {
        let text: String = (0..1000)
            .map(|i| format!("{} {}\n", i as f64 * 0.5, 0.3 + (i % 17) as f64 * 0.11))
            .collect();
        let t = BandwidthTrace::parse("big", &text).unwrap();
        assert_eq!(t.len(), 1000);
        assert_eq!(BandwidthTrace::parse("big", &t.to_text()).unwrap(), t);
    }

    #[test]
    fn step_hold_slot_sampling() {
        let t = BandwidthTrace::parse("s", "10 1.0\n11.5 2.0\n13 3.0").unwrap();
        assert_eq!(t.slot_bandwidths(1.0), vec![1.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn hsdpa_log_is_normalized() {
        let log = "1289406399 549692 59.85 10.78 125000 1000\n1289406400 550692 59.85 10.78 0 1000\n";
        let t = BandwidthTrace::from_hsdpa_log("n", log, 0.01).unwrap();
        assert_eq!(t.len(), 2);
        assert!((t.entries()[0].mbps - 1.0).abs() < 1e-12);
        assert_eq!(t.entries()[1].mbps, 0.01);
        assert!((t.entries()[1].time_s - 550.692).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn parse_serialize_parse_is_identity(
            steps in prop::collection::vec((1e-3f64..100.0, 1e-3f64..1e3), 1..60)
        ) {
            let mut t = 0.0;
            let entries: Vec<TraceEntry> = steps
                .into_iter()
                .map(|(dt, bw)| {
                    t += dt;
                    TraceEntry { time_s: t, mbps: bw }
                })
                .collect();
            let trace = BandwidthTrace::new("p", entries).unwrap();
            let back = BandwidthTrace::parse("p", &trace.to_text()).unwrap();
            prop_assert_eq!(back, trace);
        }
    }
}
