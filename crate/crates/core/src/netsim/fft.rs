use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Magnitudes of the `k`-point DFT, bins `0..=k/2`, each divided by `k`.
pub fn fft_magnitudes(seq: &[f64]) -> Result<Vec<f64>> {
    let k = seq.len();
    if k < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    if seq.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "fft_magnitudes" });
    }
    let mut buf: Vec<Complex<f64>> = seq.iter().map(|&x| Complex::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(k).process(&mut buf);
    Ok(buf[..=k / 2].iter().map(|c| c.norm() / k as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    fn naive_dft(x: &[f64]) -> Vec<f64> {
        let k = x.len();
        (0..=k / 2)
            .map(|j| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, v) in x.iter().enumerate() {
                    let a = TAU * (i * j) as f64 / k as f64;
                    re += v * a.cos();
                    im -= v * a.sin();
                }
                (re * re + im * im).sqrt() / k as f64
            })
            .collect()
    }

    #[test]
    fn constant_is_dc_only() {
        let m = fft_magnitudes(&[0.7; 10]).unwrap();
        assert_eq!(m.len(), 6);
        assert!((m[0] - 0.7).abs() < 1e-9);
        assert!(m[1..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn cosine_at_bin_two() {
        let x: Vec<f64> = (0..10).map(|i| (TAU * 2.0 * i as f64 / 10.0).cos()).collect();
        let m = fft_magnitudes(&x).unwrap();
        for (j, v) in m.iter().enumerate() {
            let want = if j == 2 { 0.5 } else { 0.0 };
            assert!((v - want).abs() < 1e-9, "bin {j}: {v}");
        }
    }

    #[test]
    fn rejects_short_or_non_finite() {
        assert!(fft_magnitudes(&[1.0]).is_err());
        assert!(fft_magnitudes(&[1.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn matches_naive_dft(x in prop::collection::vec(-10.0f64..10.0, 2..40)) {
            let fast = fft_magnitudes(&x).unwrap();
            for (a, b) in fast.iter().zip(naive_dft(&x)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn parseval(x in prop::collection::vec(-10.0f64..10.0, 2..40)) {
            // Σ|x|² = k · Σ_all-bins |X_j/k|², folding the mirrored half back in.
            let k = x.len();
            let m = fft_magnitudes(&x).unwrap();
            let spectrum: f64 = m.iter().enumerate().map(|(j, v)| {
                let mirrored = j != 0 && !(k % 2 == 0 && j == k / 2);
                v * v * if mirrored { 2.0 } else { 1.0 }
            }).sum();
            let energy: f64 = x.iter().map(|v| v * v).sum();
            prop_assert!((k as f64 * spectrum - energy).abs() <= 1e-9 * energy.max(1.0));
        }

        #[test]
        fn offset_changes_only_dc(x in prop::collection::vec(-10.0f64..10.0, 2..40), c in -5.0f64..5.0) {
            let a = fft_magnitudes(&x).unwrap();
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let b = fft_magnitudes(&shifted).unwrap();
            for j in 1..a.len() {
                prop_assert!((a[j] - b[j]).abs() < 1e-9);
            }
        }
    }
}
