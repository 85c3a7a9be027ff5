use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::{BandwidthTrace, TraceEntry};

/// One received packet of a packet-train log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketRecord {
    pub send_ts_ms: u64,
    pub recv_ts_ms: u64,
    pub size_bytes: u64,
}

impl PacketRecord {
    pub fn new(send_ts_ms: u64, recv_ts_ms: u64, size_bytes: u64) -> Result<Self> {
        if recv_ts_ms < send_ts_ms {
            return Err(Error::invalid(format!(
                "packet received at {recv_ts_ms} ms before it was sent at {send_ts_ms} ms"
            )));
        }
        if size_bytes == 0 {
            return Err(Error::invalid("packet size must be positive"));
        }
        Ok(PacketRecord {
            send_ts_ms,
            recv_ts_ms,
            size_bytes,
        })
    }
}

/// Reads `send_ts_ms,recv_ts_ms,size_bytes` CSV with a header row.
///
/// One-way-delay correction of the timestamps, if any, is the caller's job.
pub fn read_packets_csv<R: Read>(r: R) -> Result<Vec<PacketRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 fields, got {}", rec.len()),
            });
        }
        let field = |j: usize| {
            rec[j].parse::<u64>().map_err(|_| Error::Parse {
                line,
                msg: format!("bad integer {:?}", &rec[j]),
            })
        };
        let p = PacketRecord::new(field(0)?, field(1)?, field(2)?).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

pub fn write_packets_csv<W: Write>(w: W, records: &[PacketRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["send_ts_ms", "recv_ts_ms", "size_bytes"])?;
    for p in records {
        wtr.write_record(&[
            p.send_ts_ms.to_string(),
            p.recv_ts_ms.to_string(),
            p.size_bytes.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Result of windowing a packet log into a bandwidth trace.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketConversion {
    /// Interpolated trace, one entry per window.
    pub trace: BandwidthTrace,
    /// Bytes received in each window, before interpolation.
    pub window_bytes: Vec<u64>,
    /// Raw per-window bandwidth in Mbps (zero for empty windows).
    pub raw_mbps: Vec<f64>,
    /// Windows that had no packets and were filled by interpolation.
    pub interpolated: Vec<bool>,
}

/// Converts a receive-ordered packet log into available-bandwidth samples:
/// window `n` covers `[t0 + n·period, t0 + (n+1)·period)` from the first
/// receive time, and its bandwidth is `bytes·8 / period` in Mbps.
///
/// Empty windows are filled by linear interpolation between the nearest
/// non-empty neighbours (nearest value at the edges).
pub fn packets_to_bandwidth(id: &str, records: &[PacketRecord], period_s: f64) -> Result<PacketConversion> {
    if !(period_s > 0.0) {
        return Err(Error::invalid("period must be positive"));
    }
    if records.windows(2).any(|w| w[1].recv_ts_ms < w[0].recv_ts_ms) {
        return Err(Error::invalid("packet records must be sorted by receive time"));
    }
    let Some(first) = records.first() else {
        return Ok(PacketConversion {
            trace: BandwidthTrace::new(id, Vec::new())?,
            window_bytes: Vec::new(),
            raw_mbps: Vec::new(),
            interpolated: Vec::new(),
        });
    };
    let t0 = first.recv_ts_ms;
    let period_ms = period_s * 1000.0;
    let window_of = |p: &PacketRecord| ((p.recv_ts_ms - t0) as f64 / period_ms).floor() as usize;
    let n = window_of(records.last().expect("non-empty")) + 1;
    let mut window_bytes = vec![0u64; n];
    for p in records {
        window_bytes[window_of(p)] += p.size_bytes;
    }
    let raw_mbps: Vec<f64> = window_bytes
        .iter()
        .map(|&b| b as f64 * 8.0 / period_s / 1e6)
        .collect();
    let interpolated: Vec<bool> = window_bytes.iter().map(|&b| b == 0).collect();

    let filled: Vec<usize> = (0..n).filter(|&i| !interpolated[i]).collect();
    let mut mbps = raw_mbps.clone();
    for i in 0..n {
        if !interpolated[i] {
            continue;
        }
        let right = filled.partition_point(|&j| j < i);
        let lo = right.checked_sub(1).map(|k| filled[k]);
        let hi = filled.get(right).copied();
        mbps[i] = match (lo, hi) {
            (Some(a), Some(b)) => {
                let w = (i - a) as f64 / (b - a) as f64;
                raw_mbps[a] + w * (raw_mbps[b] - raw_mbps[a])
            }
            (Some(a), None) => raw_mbps[a],
            (None, Some(b)) => raw_mbps[b],
            (None, None) => unreachable!("the first window holds the first packet"),
        };
    }
    let entries = mbps
        .into_iter()
        .enumerate()
        .map(|(i, m)| TraceEntry {
            time_s: i as f64 * period_s,
            mbps: m,
        })
        .collect();
    Ok(PacketConversion {
        trace: BandwidthTrace::new(id, entries)?,
        window_bytes,
        raw_mbps,
        interpolated,
    })
}
