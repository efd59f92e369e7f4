//! Sliding RMSE between a feature matrix and a particle or template.
//!
//! The feature matrix `F` is padded with `S x L` zero blocks on both sides,
//! giving an `S x 3L` canvas. The candidate `P` starts at the left edge of the
//! canvas and moves right one column per step, `tau = 1..=2L`. At step `tau`
//! the RMSE is the Frobenius distance between the canvas and the shifted
//! candidate, divided by `sqrt(S * 3L)`.
//!
//! Because the shifted candidate never leaves the canvas, the squared error
//! expands to `|F|^2 + |P|^2 - 2 * xcorr(F, P)`. [`Matcher`] evaluates the
//! cross-correlation for all shifts with one FFT pass, then recomputes the
//! winning shifts directly so the reported minimum carries no cancellation
//! error.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Relative slack used to collect near-minimal shifts from the FFT estimate.
const CANDIDATE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub rmse_min: f64,
    /// 1-based shift index in `1..=2L` attaining the minimum; smallest on ties.
    pub tau_star: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<Vec<f64>>,
}

fn check_shapes(f: &Matrix, p: &Matrix) -> Result<()> {
    p.ensure_shape(f.rows(), f.cols())
}

fn rmse_scale(f: &Matrix) -> f64 {
    ((f.rows() * 3 * f.cols()) as f64).sqrt()
}

/// Squared error between the padded `f` and `p` shifted right by `shift` columns.
///
/// Only the columns where either operand is non-zero contribute.
fn shifted_sse(f: &Matrix, p: &Matrix, shift: usize) -> f64 {
    let len = f.cols();
    // canvas columns: F occupies [len, 2len), shifted P occupies [shift, shift + len)
    let start = shift.min(len);
    let end = (shift + len).max(2 * len);
    let mut sse = 0.0;
    for i in 0..f.rows() {
        let fr = f.row(i);
        let pr = p.row(i);
        for c in start..end {
            let fv = if (len..2 * len).contains(&c) { fr[c - len] } else { 0.0 };
            let pv = if (shift..shift + len).contains(&c) { pr[c - shift] } else { 0.0 };
            let d = fv - pv;
            sse += d * d;
        }
    }
    sse
}

/// Full RMSE profile over all `2L` shifts, evaluated directly.
///
/// Costs `O(S * L^2)`; meant for diagnostics and small inputs.
pub fn sliding_rmse_profile(f: &Matrix, p: &Matrix) -> Result<Vec<f64>> {
    check_shapes(f, p)?;
    let scale = rmse_scale(f);
    Ok((0..2 * f.cols())
        .map(|shift| shifted_sse(f, p, shift).sqrt() / scale)
        .collect())
}

/// Minimum of the sliding RMSE and the first shift attaining it.
pub fn best_alignment(f: &Matrix, p: &Matrix) -> Result<AlignmentResult> {
    Matcher::new(f).align(p)
}

/// Same as [`best_alignment`] but also returns the full profile.
pub fn best_alignment_with_profile(f: &Matrix, p: &Matrix) -> Result<AlignmentResult> {
    let profile = sliding_rmse_profile(f, p)?;
    let mut best = 0;
    for (t, &v) in profile.iter().enumerate() {
        if v < profile[best] {
            best = t;
        }
    }
    Ok(AlignmentResult {
        rmse_min: profile[best],
        tau_star: best + 1,
        profile: Some(profile),
    })
}

/// Write a profile as `tau,rmse` CSV.
pub fn write_profile_csv<W: std::io::Write>(profile: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tau", "rmse"])?;
    for (t, v) in profile.iter().enumerate() {
        w.write_record([(t + 1).to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("writing profile", e))?;
    Ok(())
}

/// A feature matrix prepared for repeated comparisons.
///
/// Holds the row spectra of `F` so each candidate costs `S` forward FFTs and a
/// single inverse FFT.
pub struct Matcher<'a> {
    f: &'a Matrix,
    f_norm_sq: f64,
    spectra: Vec<Vec<Complex<f64>>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    fft_len: usize,
}

impl<'a> Matcher<'a> {
    pub fn new(f: &'a Matrix) -> Self {
        // linear correlation over lags -(L-1)..=(L-1) needs at least 2L - 1 points
        let fft_len = (2 * f.cols()).next_power_of_two().max(2);
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(fft_len);
        let inverse = planner.plan_fft_inverse(fft_len);
        let spectra = (0..f.rows())
            .map(|i| {
                let mut buf = padded(f.row(i), fft_len);
                forward.process(&mut buf);
                buf
            })
            .collect();
        Matcher {
            f,
            f_norm_sq: f.norm_sq(),
            spectra,
            forward,
            inverse,
            fft_len,
        }
    }

    pub fn align(&self, p: &Matrix) -> Result<AlignmentResult> {
        check_shapes(self.f, p)?;
        let len = self.f.cols();
        let scale = rmse_scale(self.f);
        let p_norm_sq = p.norm_sq();

        if self.f_norm_sq == 0.0 || p_norm_sq == 0.0 {
            // Every shift gives the same error.
            return Ok(AlignmentResult {
                rmse_min: shifted_sse(self.f, p, 0).sqrt() / scale,
                tau_star: 1,
                profile: None,
            });
        }

        let mut acc = vec![Complex::new(0.0, 0.0); self.fft_len];
        for (i, fs) in self.spectra.iter().enumerate() {
            let mut buf = padded(p.row(i), self.fft_len);
            self.forward.process(&mut buf);
            for ((a, x), y) in acc.iter_mut().zip(fs).zip(&buf) {
                *a += x * y.conj();
            }
        }
        self.inverse.process(&mut acc);
        let norm = 1.0 / self.fft_len as f64;

        // shift d pairs F column j with P column j + L - d, i.e. lag d - L
        let estimate = |shift: usize| {
            let lag = shift as isize - len as isize;
            let idx = lag.rem_euclid(self.fft_len as isize) as usize;
            self.f_norm_sq + p_norm_sq - 2.0 * acc[idx].re * norm
        };
        let estimates: Vec<f64> = (0..2 * len).map(estimate).collect();
        let floor = estimates.iter().copied().fold(f64::INFINITY, f64::min);
        let cutoff = floor + CANDIDATE_SLACK * (self.f_norm_sq + p_norm_sq);

        let mut best: Option<(usize, f64)> = None;
        for (shift, &e) in estimates.iter().enumerate() {
            if e > cutoff {
                continue;
            }
            let sse = shifted_sse(self.f, p, shift);
            if best.is_none_or(|(_, b)| sse < b) {
                best = Some((shift, sse));
            }
        }
        let (shift, sse) = best.expect("at least one shift attains the estimated floor");
        Ok(AlignmentResult {
            rmse_min: sse.sqrt() / scale,
            tau_star: shift + 1,
            profile: None,
        })
    }
}

fn padded(row: &[f64], n: usize) -> Vec<Complex<f64>> {
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for (b, &v) in buf.iter_mut().zip(row) {
        b.re = v;
    }
    buf
}
