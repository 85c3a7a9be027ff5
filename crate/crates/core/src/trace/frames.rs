use std::f64::consts::TAU;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::rng_from;

use super::QualityCurveSeries;

pub const FRAME_HEIGHT: usize = 64;
pub const FRAME_WIDTH: usize = 36;
pub const FRAME_CHANNELS: usize = 3;
pub const FRAMES_PER_SLOT: usize = 5;
const FRAME_BYTES: usize = FRAME_HEIGHT * FRAME_WIDTH * FRAME_CHANNELS;

const MAGIC: &[u8; 4] = b"QFRM";
const VERSION: u32 = 1;

/// Sequence of 64x36 RGB frames stored at 8 bits per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameClip {
    pixels: Vec<u8>,
}

impl FrameClip {
    pub fn from_bytes(pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() % FRAME_BYTES != 0 {
            return Err(Error::invalid(format!(
                "{} bytes is not a whole number of {FRAME_HEIGHT}x{FRAME_WIDTH}x{FRAME_CHANNELS} frames",
                pixels.len()
            )));
        }
        Ok(FrameClip { pixels })
    }

    /// Quantizes frames with values in `[0, 1]` to 8 bits per channel.
    pub fn from_frames(frames: &[Vec<f64>]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(frames.len() * FRAME_BYTES);
        for f in frames {
            if f.len() != FRAME_BYTES {
                return Err(Error::shape("frame_clip", format!("frame has {} values, want {FRAME_BYTES}", f.len())));
            }
            pixels.extend(f.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        Ok(FrameClip { pixels })
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / FRAME_BYTES
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn frame_bytes(&self, i: usize) -> &[u8] {
        &self.pixels[i * FRAME_BYTES..(i + 1) * FRAME_BYTES]
    }

    /// Frame `i` as row-major `[height, width, channel]` values in `[0, 1]`.
    pub fn frame(&self, i: usize) -> Vec<f64> {
        self.frame_bytes(i).iter().map(|&b| f64::from(b) / 255.0).collect()
    }

    /// The frames sampled for `slot`.
    pub fn slot_frames(&self, slot: usize) -> impl Iterator<Item = Vec<f64>> + '_ {
        (slot * FRAMES_PER_SLOT..(slot + 1) * FRAMES_PER_SLOT).map(|i| self.frame(i))
    }

    pub fn slots(&self) -> usize {
        self.len() / FRAMES_PER_SLOT
    }
}

/// Renders `FRAMES_PER_SLOT` frames per slot of drifting sinusoidal
/// gradients. A slot's dynamism `d = 1 - V(300 kbps)` raises both the
/// spatial frequency and the per-frame drift, so busier content is harder
/// to encode, as in the quality curves.
pub fn gen_frame_clip(curves: &QualityCurveSeries, seed: u64) -> FrameClip {
    let mut rng = rng_from(seed);
    let angle: f64 = rng.random_range(0.0..TAU);
    let channel_phase: [f64; 3] = [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)];
    let (dir_y, dir_x) = (angle.sin(), angle.cos());
    let mut phase: f64 = rng.random_range(0.0..TAU);
    let mut pixels = Vec::with_capacity(curves.len() * FRAMES_PER_SLOT * FRAME_BYTES);
    for v in curves.slots() {
        let d = (1.0 - v[0]).clamp(0.0, 1.0);
        let freq = 1.0 + 6.0 * d;
        for _ in 0..FRAMES_PER_SLOT {
            for y in 0..FRAME_HEIGHT {
                for x in 0..FRAME_WIDTH {
                    let u = (y as f64 / FRAME_HEIGHT as f64) * dir_y + (x as f64 / FRAME_WIDTH as f64) * dir_x;
                    for cp in channel_phase {
                        let s = 0.5 + 0.5 * (TAU * freq * u + phase + cp).sin();
                        pixels.push((s * 255.0).round() as u8);
                    }
                }
            }
            phase = (phase + 1.2 * d) % TAU;
        }
    }
    FrameClip { pixels }
}

pub fn write_frame_clip<W: Write>(mut w: W, clip: &FrameClip) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(clip.len() as u32).to_le_bytes())?;
    w.write_all(&clip.pixels)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame_clip<R: Read>(mut r: R) -> Result<FrameClip> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("truncated frame clip header".into()))?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("missing QFRM magic".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported frame clip version {version}")));
    }
    let count = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let mut pixels = vec![0u8; count * FRAME_BYTES];
    r.read_exact(&mut pixels)
        .map_err(|_| Error::Format(format!("frame clip truncated before {count} frames")))?;
    Ok(FrameClip { pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    fn series(v300: &[f64]) -> QualityCurveSeries {
        QualityCurveSeries::new(v300.iter().map(|&q| [q, 1.0, 1.0, 1.0, 1.0].map(|x: f64| x.max(q))).collect()).unwrap()
    }

    #[test]
    fn static_slot_frames_are_identical() {
        let clip = gen_frame_clip(&series(&[1.0, 1.0]), 4);
        assert_eq!(clip.len(), 2 * FRAMES_PER_SLOT);
        for i in 1..clip.len() {
            assert_eq!(clip.frame_bytes(i), clip.frame_bytes(0));
        }
    }

    #[test]
    fn dynamic_slot_moves_more() {
        let clip = gen_frame_clip(&series(&[0.9, 0.2]), 6);
        let motion = |slot: usize| {
            let f: Vec<_> = clip.slot_frames(slot).collect();
            f.windows(2).map(|w| mean_abs_diff(&w[0], &w[1])).sum::<f64>()
        };
        assert!(motion(1) > motion(0), "{} vs {}", motion(1), motion(0));
    }

    #[test]
    fn frames_have_fixed_dims_and_unit_range() {
        let clip = gen_frame_clip(&series(&[0.5]), 1);
        let f = clip.frame(3);
        assert_eq!(f.len(), FRAME_HEIGHT * FRAME_WIDTH * FRAME_CHANNELS);
        assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(FrameClip::from_bytes(vec![0; FRAME_BYTES + 1]).is_err());
        let back = FrameClip::from_frames(&[f.clone()]).unwrap();
        assert_eq!(back.frame(0), f);
        assert!(FrameClip::from_frames(&[vec![0.0; 3]]).is_err());
    }

    #[test]
    fn same_seed_same_clip_and_file_round_trip() {
        let s = series(&[0.3, 0.6, 0.8]);
        let clip = gen_frame_clip(&s, 2);
        assert_eq!(clip, gen_frame_clip(&s, 2));
        assert_ne!(clip, gen_frame_clip(&s, 3));
        let mut buf = Vec::new();
        write_frame_clip(&mut buf, &clip).unwrap();
        assert_eq!(&buf[..4], b"QFRM");
        assert_eq!(read_frame_clip(buf.as_slice()).unwrap(), clip);
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_frame_clip(buf.as_slice()), Err(Error::Format(_))));
    }
}
