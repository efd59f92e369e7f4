//! Raw sensor traces to fixed-size feature matrices.
//!
//! Each channel is standardised, reduced to its RMS envelope, stacked with the
//! other channels, gated by a threshold and zero-extended to a library-wide
//! column count. The result is the unit every comparison downstream works on.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Shared preprocessing settings. Serialized next to every derived artifact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// RMS window `W` in samples; must be even.
    pub window: usize,
    /// ReLU threshold `c`.
    pub threshold: f64,
    /// Feature length `L` in columns.
    pub length: usize,
    /// Number of sensors `S`.
    pub sensors: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            window: 84,
            threshold: 1.0,
            length: 1000,
            sensors: 4,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "window must be a positive even number, got {}",
                self.window
            )));
        }
        if !(self.threshold >= 0.0) || !self.threshold.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "threshold must be finite and non-negative, got {}",
                self.threshold
            )));
        }
        if self.length == 0 || self.sensors == 0 {
            return Err(Error::InvalidConfig(
                "length and sensors must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One pass of raw multi-channel voltages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSet {
    pub channels: Vec<Vec<f64>>,
    pub sample_rate_hz: f64,
    pub label: Option<u8>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl TraceSet {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate_hz: f64) -> Result<Self> {
        let t = TraceSet {
            channels,
            sample_rate_hz,
            label: None,
            meta: BTreeMap::new(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }

    pub fn sensors(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel (`K`).
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::InvalidTrace("no channels".into()));
        }
        let k = self.len();
        if k < 2 {
            return Err(Error::InvalidTrace(format!(
                "need at least 2 samples per channel, got {k}"
            )));
        }
        if let Some((i, c)) = self.channels.iter().enumerate().find(|(_, c)| c.len() != k) {
            return Err(Error::shape(
                format!("{k} samples per channel"),
                format!("{} samples in channel {}", c.len(), i + 1),
            ));
        }
        if !(self.sample_rate_hz > 0.0) || !self.sample_rate_hz.is_finite() {
            return Err(Error::InvalidTrace(format!(
                "sample rate must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        if let Some(b) = self.label {
            if b > 5 {
                return Err(Error::InvalidTrace(format!("label {b} outside 0..=5")));
            }
        }
        Ok(())
    }
}

/// Pre-processed `S x L` matrix plus the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "FeatureMatrixRepr", try_from = "FeatureMatrixRepr")]
pub struct FeatureMatrix {
    pub values: Matrix,
    /// Column count `K` before zero extension.
    pub original_length: usize,
    pub relu_threshold: f64,
    pub window: usize,
}

impl FeatureMatrix {
    pub fn sensors(&self) -> usize {
        self.values.rows()
    }

    pub fn length(&self) -> usize {
        self.values.cols()
    }
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct FeatureMatrixRepr {
    S: usize,
    L: usize,
    K: usize,
    W: usize,
    c: f64,
    rows: Vec<Vec<f64>>,
}

impl From<FeatureMatrix> for FeatureMatrixRepr {
    fn from(f: FeatureMatrix) -> Self {
        FeatureMatrixRepr {
            S: f.values.rows(),
            L: f.values.cols(),
            K: f.original_length,
            W: f.window,
            c: f.relu_threshold,
            rows: f.values.to_rows(),
        }
    }
}

impl TryFrom<FeatureMatrixRepr> for FeatureMatrix {
    type Error = Error;

    fn try_from(r: FeatureMatrixRepr) -> Result<Self> {
        let values = Matrix::from_rows(r.rows)?;
        if values.rows() != r.S || values.cols() != r.L {
            return Err(Error::shape(
                format!("{}x{}", r.S, r.L),
                format!("{}x{}", values.rows(), values.cols()),
            ));
        }
        if r.K > r.L {
            return Err(Error::TraceTooLong { len: r.K, max: r.L });
        }
        Ok(FeatureMatrix {
            values,
            original_length: r.K,
            relu_threshold: r.c,
            window: r.W,
        })
    }
}

fn mean_and_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Standardise one channel to zero mean and unit sample standard deviation.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    normalize_channel(v, 0)
}

fn normalize_channel(v: &[f64], channel: usize) -> Result<Vec<f64>> {
    if v.len() < 2 {
        return Err(Error::InvalidTrace(format!(
            "channel {} has {} samples, need at least 2",
            channel + 1,
            v.len()
        )));
    }
    let (mean, std_dev) = mean_and_std(v);
    if !(std_dev > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::DegenerateSignal {
            channel: channel + 1,
            std_dev,
        });
    }
    Ok(v.iter().map(|x| (x - mean) / std_dev).collect())
}

/// Divisor of the RMS window at 1-based position `k` of a `len`-sample signal.
///
/// Interior positions divide by `window`. Near either edge the divisor is
/// the number of samples actually inside the truncated window, which makes
/// the law mirror-symmetric: `window_divisor(k) == window_divisor(len + 1 - k)`.
pub fn window_divisor(k: usize, len: usize, window: usize) -> usize {
    let half = window / 2;
    if k < half {
        k + half
    } else if k + half <= len {
        window
    } else {
        len - k + half + 1
    }
}

/// Centred RMS envelope with an inclusive `[k - W/2, k + W/2]` window.
pub fn rms_envelope(v: &[f64], window: usize) -> Result<Vec<f64>> {
    let len = v.len();
    if window == 0 || window % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "window must be a positive even number, got {window}"
        )));
    }
    if window >= len {
        return Err(Error::WindowTooLarge { window, len });
    }
    let half = window / 2;
    let out = (1..=len)
        .map(|k| {
            let lo = k.saturating_sub(half).max(1);
            let hi = (k + half).min(len);
            let sum_sq: f64 = v[lo - 1..hi].iter().map(|x| x * x).sum();
            (sum_sq / window_divisor(k, len, window) as f64).sqrt()
        })
        .collect();
    Ok(out)
}

/// Stack per-sensor envelopes as rows and apply `max(x - c, 0)`.
pub fn assemble_and_gate(envelopes: &[Vec<f64>], threshold: f64) -> Result<Matrix> {
    let len = envelopes.first().map_or(0, Vec::len);
    let mut m = Matrix::zeros(envelopes.len(), len);
    for (i, env) in envelopes.iter().enumerate() {
        if env.len() != len {
            return Err(Error::shape(
                format!("{len} samples per envelope"),
                format!("{} samples in envelope {}", env.len(), i + 1),
            ));
        }
        for (dst, &x) in m.row_mut(i).iter_mut().zip(env) {
            *dst = (x - threshold).max(0.0);
        }
    }
    Ok(m)
}

/// Zero-extend an `S x K` matrix to `S x L`. Never truncates.
pub fn extend_matrix(m: &Matrix, length: usize) -> Result<Matrix> {
    if m.cols() > length {
        return Err(Error::TraceTooLong {
            len: m.cols(),
            max: length,
        });
    }
    let mut out = Matrix::zeros(m.rows(), length);
    for i in 0..m.rows() {
        out.row_mut(i)[..m.cols()].copy_from_slice(m.row(i));
    }
    Ok(out)
}

/// Full chain: normalise, envelope, gate, extend.
pub fn preprocess(trace: &TraceSet, cfg: &PreprocessConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    trace.validate()?;
    if trace.sensors() != cfg.sensors {
        return Err(Error::shape(
            format!("{} sensors", cfg.sensors),
            format!("{} sensors", trace.sensors()),
        ));
    }
    if trace.len() > cfg.length {
        return Err(Error::TraceTooLong {
            len: trace.len(),
            max: cfg.length,
        });
    }
    let envelopes = trace
        .channels
        .iter()
        .enumerate()
        .map(|(i, ch)| rms_envelope(&normalize_channel(ch, i)?, cfg.window))
        .collect::<Result<Vec<_>>>()?;
    let gated = assemble_and_gate(&envelopes, cfg.threshold)?;
    Ok(FeatureMatrix {
        values: extend_matrix(&gated, cfg.length)?,
        original_length: trace.len(),
        relu_threshold: cfg.threshold,
        window: cfg.window,
    })
}
