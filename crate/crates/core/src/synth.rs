//! Synthetic phantom traces.
//!
//! Each channel is a unit peristaltic sinusoid, phase-lagged by the time the
//! wave takes to travel one sensor pitch, plus a Gaussian pressure pulse when
//! a nodule is present, plus white noise. The pulse passes the sensors in
//! order 1 to 4 as the capsule advances over the nodule. Pulse height and
//! duration both grow linearly with nodule size.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::TraceSet;

/// Pulse height per mm of nodule diameter.
///
/// Chosen so that after preprocessing with the default settings the gated
/// peaks grow from about 0.1 (1 mm) to about 1.4 (5 mm), inside the particle
/// amplitude range.
pub const DEFAULT_NODULE_GAIN: f64 = 0.6;

/// Pulse standard deviation in seconds per mm of nodule diameter.
pub const DEFAULT_NODULE_WIDTH_S: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub sample_rate_hz: f64,
    pub wave_speed_mm_s: f64,
    pub wavelength_mm: f64,
    pub sensor_pitch_mm: f64,
    pub n_sensors: usize,
    pub nodule_b: u8,
    pub nodule_gain: f64,
    pub nodule_width_s: f64,
    /// Capsule speed over the nodule; sets the pulse stagger between sensors.
    pub capsule_speed_mm_s: f64,
    /// Time the first sensor reaches the nodule.
    pub onset_s: f64,
    /// Half-width of the uniform jitter added to `onset_s`.
    pub onset_jitter_s: f64,
    /// Half-width of the uniform jitter added to each sensor's pulse time.
    pub passage_jitter_s: f64,
    pub noise_std: f64,
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            sample_rate_hz: 10.0,
            wave_speed_mm_s: 25.0,
            wavelength_mm: 80.0,
            sensor_pitch_mm: 20.0,
            n_sensors: 4,
            nodule_b: 0,
            nodule_gain: DEFAULT_NODULE_GAIN,
            nodule_width_s: DEFAULT_NODULE_WIDTH_S,
            capsule_speed_mm_s: 1.2,
            onset_s: 15.0,
            onset_jitter_s: 5.0,
            passage_jitter_s: 0.8,
            noise_std: 0.05,
            duration_s: 100.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn with_size(mut self, b: u8) -> Self {
        self.nodule_b = b;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Peristaltic carrier frequency in Hz.
    pub fn carrier_hz(&self) -> f64 {
        self.wave_speed_mm_s / self.wavelength_mm
    }

    /// Carrier phase lag between neighbouring sensors, in seconds.
    pub fn carrier_lag_s(&self) -> f64 {
        self.sensor_pitch_mm / self.wave_speed_mm_s
    }

    /// Pulse stagger between neighbouring sensors, in seconds.
    pub fn passage_interval_s(&self) -> f64 {
        self.sensor_pitch_mm / self.capsule_speed_mm_s
    }

    pub fn samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sample_rate_hz", self.sample_rate_hz),
            ("wave_speed_mm_s", self.wave_speed_mm_s),
            ("wavelength_mm", self.wavelength_mm),
            ("sensor_pitch_mm", self.sensor_pitch_mm),
            ("nodule_gain", self.nodule_gain),
            ("nodule_width_s", self.nodule_width_s),
            ("capsule_speed_mm_s", self.capsule_speed_mm_s),
            ("duration_s", self.duration_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("onset_s", self.onset_s),
            ("onset_jitter_s", self.onset_jitter_s),
            ("passage_jitter_s", self.passage_jitter_s),
            ("noise_std", self.noise_std),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.n_sensors == 0 {
            return Err(Error::InvalidConfig("n_sensors must be positive".into()));
        }
        if self.nodule_b > 5 {
            return Err(Error::InvalidConfig(format!(
                "nodule_b must be in 0..=5, got {}",
                self.nodule_b
            )));
        }
        if self.samples() < 2 {
            return Err(Error::InvalidConfig("duration yields fewer than 2 samples".into()));
        }
        Ok(())
    }
}

/// Pulse centre per sensor for a given config, in seconds. Empty for `b = 0`.
///
/// Consumes randomness from `rng` exactly as [`generate_trace_set`] does.
fn pulse_centres<R: Rng>(cfg: &PhantomConfig, rng: &mut R) -> Vec<f64> {
    let onset = cfg.onset_s + jitter(rng, cfg.onset_jitter_s);
    let interval = cfg.passage_interval_s();
    let mut centres: Vec<f64> = (0..cfg.n_sensors)
        .map(|s| onset + s as f64 * interval + jitter(rng, cfg.passage_jitter_s))
        .collect();
    // keep passage order even under large jitter
    for s in 1..centres.len() {
        if centres[s] <= centres[s - 1] {
            centres[s] = centres[s - 1] + 1.0 / cfg.sample_rate_hz;
        }
    }
    if cfg.nodule_b == 0 {
        centres.clear();
    }
    centres
}

fn jitter<R: Rng>(rng: &mut R, half_width: f64) -> f64 {
    let u: f64 = rng.random();
    (2.0 * u - 1.0) * half_width
}

/// Generate one synthetic trace set. Deterministic in `cfg` (including its seed).
pub fn generate_trace_set(cfg: &PhantomConfig) -> Result<TraceSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centres = pulse_centres(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_std)
        .map_err(|e| Error::InvalidConfig(format!("noise_std: {e}")))?;

    let k = cfg.samples();
    let omega = 2.0 * std::f64::consts::PI * cfg.carrier_hz();
    let b = f64::from(cfg.nodule_b);
    let height = cfg.nodule_gain * b;
    let width = cfg.nodule_width_s * b;

    let channels = (0..cfg.n_sensors)
        .map(|s| {
            let lag = s as f64 * cfg.carrier_lag_s();
            (0..k)
                .map(|j| {
                    let t = j as f64 / cfg.sample_rate_hz;
                    let mut v = (omega * (t - lag)).sin();
                    if let Some(&c) = centres.get(s) {
                        v += height * (-(t - c).powi(2) / (2.0 * width * width)).exp();
                    }
                    if cfg.noise_std > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    v
                })
                .collect()
        })
        .collect();

    let mut trace = TraceSet::new(channels, cfg.sample_rate_hz)?.with_label(cfg.nodule_b);
    trace.meta.insert("generator".into(), "phantom".into());
    trace.meta.insert("seed".into(), cfg.seed.to_string());
    let centres_txt: Vec<String> = centres.iter().map(|c| format!("{c:.3}")).collect();
    trace.meta.insert("pulse_centres_s".into(), centres_txt.join(";"));
    Ok(trace)
}

/// Pulse centre times for `cfg`, matching what [`generate_trace_set`] draws.
pub fn pulse_times(cfg: &PhantomConfig) -> Vec<f64> {
    pulse_centres(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// Stream range reserved for corpus seeds; fitting streams stay below it.
const CORPUS_STREAM: u64 = 1 << 63;

/// Seed of the `index`-th trace of size `b` in a corpus built from `master_seed`.
pub fn trace_seed(master_seed: u64, b: u8, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(CORPUS_STREAM | u64::from(b) << 32 | index as u64);
    rng.random()
}

/// `q` traces for each requested size, keyed by size.
pub fn generate_corpus(
    base: &PhantomConfig,
    sizes: &[u8],
    q: usize,
    master_seed: u64,
) -> Result<BTreeMap<u8, Vec<TraceSet>>> {
    let mut out = BTreeMap::new();
    for &b in sizes {
        let traces = (0..q)
            .map(|i| {
                let cfg = base.clone().with_size(b).with_seed(trace_seed(master_seed, b, i));
                generate_trace_set(&cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(b, traces);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quiet(b: u8) -> PhantomConfig {
        PhantomConfig {
            noise_std: 0.0,
            ..PhantomConfig::default()
        }
        .with_size(b)
        .with_seed(3)
    }

    #[test]
    fn no_nodule_is_lagged_sinusoids() {
        let cfg = quiet(0);
        assert_abs_diff_eq!(cfg.carrier_lag_s(), 0.8, epsilon = 1e-15);
        let t = generate_trace_set(&cfg).unwrap();
        assert_eq!(t.sensors(), 4);
        assert_eq!(t.len(), 1000);
        for (s, ch) in t.channels.iter().enumerate() {
            for (j, &v) in ch.iter().enumerate() {
                let time = j as f64 / 10.0;
                let expect = (2.0 * std::f64::consts::PI * 0.3125 * (time - 0.8 * s as f64)).sin();
                assert_abs_diff_eq!(v, expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn carrier_frequency_from_zero_crossings() {
        let t = generate_trace_set(&quiet(0)).unwrap();
        let ch = &t.channels[0];
        let ups = ch.windows(2).filter(|w| w[0] < 0.0 && w[1] >= 0.0).count();
        // 100 s at 0.3125 Hz is 31.25 cycles
        assert!((31..=32).contains(&ups), "{ups}");
        assert_abs_diff_eq!(quiet(0).carrier_hz(), 0.3125, epsilon = 1e-15);
    }

    #[test]
    fn deterministic_for_seed() {
        let cfg = PhantomConfig::default().with_size(3).with_seed(17);
        assert_eq!(generate_trace_set(&cfg).unwrap(), generate_trace_set(&cfg).unwrap());
        let other = cfg.clone().with_seed(18);
        assert_ne!(generate_trace_set(&cfg).unwrap(), generate_trace_set(&other).unwrap());
    }

    #[test]
    fn pulse_gain_is_linear() {
        let peak = |b: u8| {
            let base = generate_trace_set(&quiet(0)).unwrap();
            let t = generate_trace_set(&quiet(b)).unwrap();
            t.channels[0]
                .iter()
                .zip(&base.channels[0])
                .map(|(a, c)| a - c)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        // sampled pulses peak within half a sample of the centre
        let ratio = peak(5) / peak(1);
        assert!((ratio - 5.0).abs() < 0.05, "{ratio}");
        assert_abs_diff_eq!(peak(5), 3.0, epsilon = 0.01);
    }

    #[test]
    fn pulses_pass_sensors_in_order() {
        for seed in 0..50 {
            let times = pulse_times(&PhantomConfig::default().with_size(2).with_seed(seed));
            assert_eq!(times.len(), 4);
            assert!(times.windows(2).all(|w| w[0] < w[1]));
        }
        assert!(pulse_times(&PhantomConfig::default().with_seed(1)).is_empty());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = PhantomConfig::default();
        cfg.nodule_b = 6;
        assert!(generate_trace_set(&cfg).is_err());
        let mut cfg = PhantomConfig::default();
        cfg.wave_speed_mm_s = 0.0;
        assert!(matches!(generate_trace_set(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn corpus_seeds_are_distinct() {
        let c = generate_corpus(&PhantomConfig::default(), &[1, 2], 3, 11).unwrap();
        assert_eq!(c[&1].len(), 3);
        assert_ne!(c[&1][0], c[&1][1]);
        assert_ne!(trace_seed(11, 1, 0), trace_seed(11, 2, 0));
        assert_eq!(trace_seed(11, 1, 0), trace_seed(11, 1, 0));
    }
}
