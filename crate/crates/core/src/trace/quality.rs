use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed::{rng_from, SimRng};
use crate::BITRATES_KBPS;

/// Quality scores in `[0, 1]`, one per candidate bitrate, ascending.
pub type QualityVector = [f64; 5];

const TOL: f64 = 1e-9;

/// Per-slot quality curves over the candidate bitrate ladder.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityCurveSeries {
    slots: Vec<QualityVector>,
}

impl QualityCurveSeries {
    /// Validates range, monotonicity and concavity of every slot.
    pub fn new(slots: Vec<QualityVector>) -> Result<Self> {
        for (i, v) in slots.iter().enumerate() {
            check_curve(v).map_err(|msg| Error::invalid(format!("slot {i}: {msg}")))?;
        }
        Ok(QualityCurveSeries { slots })
    }

    /// Ingests raw VMAF scores in `[0, 100]`.
    pub fn from_vmaf(slots: &[[f64; 5]]) -> Result<Self> {
        Self::new(slots.iter().map(|v| v.map(|x| x / 100.0)).collect())
    }

    pub fn slots(&self) -> &[QualityVector] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, slot: usize) -> Option<&QualityVector> {
        self.slots.get(slot)
    }

    /// Quality at bitrate index `action` in slot `slot`; the last slot is held past the end.
    pub fn quality(&self, slot: usize, action: usize) -> f64 {
        self.slots[slot.min(self.slots.len() - 1)][action]
    }
}

fn check_curve(v: &QualityVector) -> std::result::Result<(), String> {
    if v.iter().any(|x| !x.is_finite() || *x < -TOL || *x > 1.0 + TOL) {
        return Err(format!("scores {v:?} outside [0, 1]"));
    }
    let gains: Vec<f64> = v.windows(2).map(|w| w[1] - w[0]).collect();
    if gains.iter().any(|g| *g < -TOL) {
        return Err(format!("scores {v:?} decrease with bitrate"));
    }
    if gains.windows(2).any(|g| g[1] > g[0] + TOL) {
        return Err(format!("marginal gains of {v:?} increase with bitrate"));
    }
    Ok(())
}

/// Reads `slot,v300,v500,v800,v1100,v1400` CSV with a header row.
pub fn read_quality_csv<R: Read>(r: R) -> Result<QualityCurveSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut slots = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let parse_err = |msg: String| Error::Parse { line, msg };
        if rec.len() != 6 {
            return Err(parse_err(format!("expected 6 fields, got {}", rec.len())));
        }
        let slot: usize = rec[0]
            .parse()
            .map_err(|_| parse_err(format!("bad slot index {:?}", &rec[0])))?;
        if slot != slots.len() {
            return Err(parse_err(format!("slot {slot} out of order")));
        }
        let mut v = [0.0; 5];
        for (j, x) in v.iter_mut().enumerate() {
            *x = rec[j + 1]
                .parse()
                .map_err(|_| parse_err(format!("bad score {:?}", &rec[j + 1])))?;
        }
        check_curve(&v).map_err(parse_err)?;
        slots.push(v);
    }
    Ok(QualityCurveSeries { slots })
}

pub fn write_quality_csv<W: Write>(w: W, series: &QualityCurveSeries) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["slot", "v300", "v500", "v800", "v1100", "v1400"])?;
    for (i, v) in series.slots.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(v.iter().map(|x| x.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Content class of a synthetic series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QualityProfile {
    /// Quality saturates at low bitrate.
    Static,
    /// Quality keeps climbing across the ladder.
    Dynamic,
    /// Switches between the two regimes.
    Hybrid,
}

impl QualityProfile {
    pub const ALL: [QualityProfile; 3] = [QualityProfile::Static, QualityProfile::Dynamic, QualityProfile::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            QualityProfile::Static => "static",
            QualityProfile::Dynamic => "dynamic",
            QualityProfile::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for QualityProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(QualityProfile::Static),
            "dynamic" => Ok(QualityProfile::Dynamic),
            "hybrid" => Ok(QualityProfile::Hybrid),
            _ => Err(Error::invalid(format!("unknown quality profile {s:?}"))),
        }
    }
}

// Curve shape: V(b) = a·ln(1 + c·b) / ln(1 + c·b_max), b in Mbps. `a` is the
// unclamped score at the top bitrate, `c` sets how early the curve bends.
// Raw gains over the ladder stay non-increasing only for c ≥ 10 / Mbps.
const C_RANGE: (f64, f64) = (10.0, 40.0);
const A_RANGE: (f64, f64) = (0.3, 2.0);
const STATIC_MEAN: (f64, f64) = (1.45, 28.0);
const DYNAMIC_MEAN: (f64, f64) = (0.85, 11.0);
const REVERSION: f64 = 0.95;
const A_STEP_STD: f64 = 0.015;
const C_STEP_STD: f64 = 0.5;
const A_JITTER: f64 = 0.05;
const REGIME_SWITCH_PROB: f64 = 0.05;

fn curve(a: f64, c: f64) -> QualityVector {
    let top = BITRATES_KBPS[4] / 1000.0;
    let norm = (1.0 + c * top).ln();
    BITRATES_KBPS.map(|kbps| (a * (1.0 + c * kbps / 1000.0).ln() / norm).clamp(0.0, 1.0))
}

fn normal(rng: &mut SimRng) -> f64 {
    rng.sample(StandardNormal)
}

/// Seeded synthetic quality curves. The latent `(a, c)` pair follows a
/// mean-reverting random walk toward the profile's regime, and each slot
/// adds independent multiplicative jitter on `a` (encoder noise).
pub fn gen_quality_curves(profile: QualityProfile, length: usize, seed: u64) -> Result<QualityCurveSeries> {
    if length == 0 {
        return Err(Error::invalid("length must be at least 1"));
    }
    let mut rng = rng_from(seed);
    let mut is_static = match profile {
        QualityProfile::Static => true,
        QualityProfile::Dynamic => false,
        QualityProfile::Hybrid => rng.random_bool(0.5),
    };
    let mean = |s: bool| if s { STATIC_MEAN } else { DYNAMIC_MEAN };
    let (mut a, mut c) = mean(is_static);
    a += 0.05 * normal(&mut rng);
    c += 1.5 * normal(&mut rng);
    let mut slots = Vec::with_capacity(length);
    for _ in 0..length {
        if profile == QualityProfile::Hybrid && rng.random_bool(REGIME_SWITCH_PROB) {
            is_static = !is_static;
        }
        let (ma, mc) = mean(is_static);
        a = (ma + REVERSION * (a - ma) + A_STEP_STD * normal(&mut rng)).clamp(A_RANGE.0, A_RANGE.1);
        c = (mc + REVERSION * (c - mc) + C_STEP_STD * normal(&mut rng)).clamp(C_RANGE.0, C_RANGE.1);
        let jitter = (1.0 + A_JITTER * normal(&mut rng)).clamp(0.8, 1.2);
        slots.push(curve(a * jitter, c));
    }
    QualityCurveSeries::new(slots)
}
