use std::f64::consts::PI;

use crate::{Error, Result};

/// Highest frequency of the Fourier ladder, in cycles over `t ∈ [0, 1]`.
pub const FOURIER_MAX_CYCLES: f64 = 1e4;

/// Fourier features of a time value.
///
/// Layout is `[sin(2π f_0 t), …, sin(2π f_{h-1} t), cos(2π f_0 t), …]` with
/// `h = dim / 2` frequencies spaced geometrically from 1 to
/// [`FOURIER_MAX_CYCLES`] cycles. A single frequency (`dim == 2`) is 1 cycle.
pub fn fourier_time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; dim];
    fourier_into(t, dim, &mut out)?;
    Ok(out)
}

pub(crate) fn fourier_frequencies(dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::config(format!(
            "fourier embedding dimension must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    Ok((0..half)
        .map(|j| {
            if half == 1 {
                1.0
            } else {
                FOURIER_MAX_CYCLES.powf(j as f64 / (half - 1) as f64)
            }
        })
        .collect())
}

pub(crate) fn fourier_into(t: f64, dim: usize, out: &mut [f64]) -> Result<()> {
    let freqs = fourier_frequencies(dim)?;
    let half = freqs.len();
    for (j, f) in freqs.iter().enumerate() {
        let angle = 2.0 * PI * f * t;
        out[j] = angle.sin();
        out[half + j] = angle.cos();
    }
    Ok(())
}

/// FiLM modulation `h · (1 + scale) + shift`, elementwise.
pub fn film_apply(h: &[f64], scale: &[f64], shift: &[f64]) -> Result<Vec<f64>> {
    if h.len() != scale.len() || h.len() != shift.len() {
        return Err(Error::config(format!(
            "film lengths differ: h={}, scale={}, shift={}",
            h.len(),
            scale.len(),
            shift.len()
        )));
    }
    Ok(h.iter()
        .zip(scale)
        .zip(shift)
        .map(|((h, a), b)| h * (1.0 + a) + b)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_time_is_sin_zero_cos_one() {
        assert_eq!(fourier_time_embed(0.0, 4).unwrap(), vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn quarter_time_single_frequency() {
        let e = fourier_time_embed(0.25, 2).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-15);
        assert!(e[1].abs() < 1e-15);
    }

    #[test]
    fn deterministic() {
        let a = fourier_time_embed(0.3712, 16).unwrap();
        let b = fourier_time_embed(0.3712, 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(matches!(fourier_time_embed(0.1, 3), Err(Error::Config(_))));
    }

    #[test]
    fn ladder_spans_one_to_max() {
        let f = fourier_frequencies(8).unwrap();
        assert_eq!(f[0], 1.0);
        assert!((f[3] - FOURIER_MAX_CYCLES).abs() < 1e-6);
    }

    #[test]
    fn film_cases() {
        let h = vec![0.5, -1.0, 3.0];
        assert_eq!(film_apply(&h, &[0.0; 3], &[0.0; 3]).unwrap(), h);
        assert_eq!(film_apply(&[2.0], &[1.0], &[3.0]).unwrap(), vec![7.0]);
        let s = vec![0.1, 0.2, 0.3];
        assert_eq!(film_apply(&[0.0; 3], &[5.0, -2.0, 9.0], &s).unwrap(), s);
        assert!(film_apply(&[1.0], &[1.0, 2.0], &[0.0]).is_err());
    }
}
