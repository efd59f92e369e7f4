//! Particles: stacks of diagonally arranged Gaussian lobes, one per sensor row.
//!
//! Row and column indices in parameters are 1-based, so a lobe for sensor `s`
//! sits on row `s` and its peak column `mu_hor` counts from 1.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Random-walk step sizes used by [`perturb_params`].
pub const STEP_AMPLITUDE: f64 = 0.1;
pub const STEP_SIGMA_VER: f64 = 0.1;
pub const STEP_DELTA_MU: f64 = 1.0;
pub const STEP_SIGMA_HOR: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub amplitude: f64,
    /// Row of the lobe; always the sensor index.
    pub mu_ver: usize,
    /// Column of the lobe's peak.
    pub mu_hor: usize,
    pub sigma_ver: f64,
    pub sigma_hor: u32,
}

/// Legal parameter ranges. Open lower ends are represented by `positive_floor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamBounds {
    pub amplitude_max: f64,
    pub sigma_ver_max: f64,
    pub delta_mu_min: i64,
    pub delta_mu_max: i64,
    pub sigma_hor_min: u32,
    pub sigma_hor_max: u32,
    /// First-sensor peak column `u`.
    pub anchor: usize,
    /// Smallest value a clamped `(0, max]` parameter may take.
    pub positive_floor: f64,
}

impl Default for ParamBounds {
    fn default() -> Self {
        ParamBounds {
            amplitude_max: 1.5,
            sigma_ver_max: 1.0,
            delta_mu_min: 100,
            delta_mu_max: 250,
            sigma_hor_min: 1,
            sigma_hor_max: 60,
            anchor: 150,
            positive_floor: 1e-6,
        }
    }
}

impl ParamBounds {
    pub fn validate(&self, sensors: usize, length: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.amplitude_max > self.positive_floor) || !(self.sigma_ver_max > self.positive_floor) {
            return bad("amplitude and sigma_ver maxima must exceed the positive floor".into());
        }
        if !(self.positive_floor > 0.0) {
            return bad("positive_floor must be > 0".into());
        }
        if self.delta_mu_min < 1 || self.delta_mu_min > self.delta_mu_max {
            return bad(format!(
                "delta_mu range [{}, {}] is invalid",
                self.delta_mu_min, self.delta_mu_max
            ));
        }
        if self.sigma_hor_min < 1 || self.sigma_hor_min > self.sigma_hor_max {
            return bad(format!(
                "sigma_hor range [{}, {}] is invalid",
                self.sigma_hor_min, self.sigma_hor_max
            ));
        }
        let last = self.anchor as i64 + (sensors as i64 - 1) * self.delta_mu_max;
        if self.anchor < 1 || last > length as i64 {
            return bad(format!(
                "peak columns reach {last}, beyond feature length {length}"
            ));
        }
        Ok(())
    }

    fn clamp_amplitude(&self, a: f64) -> f64 {
        a.clamp(self.positive_floor, self.amplitude_max)
    }

    fn clamp_sigma_ver(&self, s: f64) -> f64 {
        s.clamp(self.positive_floor, self.sigma_ver_max)
    }

    fn clamp_delta_mu(&self, d: f64) -> i64 {
        (d.round() as i64).clamp(self.delta_mu_min, self.delta_mu_max)
    }

    fn clamp_sigma_hor(&self, s: f64) -> u32 {
        (s.round().max(0.0) as u32).clamp(self.sigma_hor_min, self.sigma_hor_max)
    }
}

/// Full parameter set of one particle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleParams {
    /// Peak column of the first lobe.
    pub anchor: usize,
    /// Column gaps between consecutive lobes (`S - 1` entries).
    pub delta_mu: Vec<i64>,
    pub components: Vec<GaussianComponent>,
    /// Refinement iteration `m`.
    pub iteration: u64,
    /// Seed of the random stream that produced this particle, if any.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ParticleParams {
    /// Build from per-lobe values; peak columns follow from `anchor` and `delta_mu`.
    pub fn new(
        anchor: usize,
        delta_mu: Vec<i64>,
        amplitudes: &[f64],
        sigma_ver: &[f64],
        sigma_hor: &[u32],
    ) -> Result<Self> {
        let s = amplitudes.len();
        if delta_mu.len() + 1 != s || sigma_ver.len() != s || sigma_hor.len() != s {
            return Err(Error::shape(
                format!("{s} lobes and {} gaps", s.saturating_sub(1)),
                format!(
                    "{} gaps, {} sigma_ver, {} sigma_hor",
                    delta_mu.len(),
                    sigma_ver.len(),
                    sigma_hor.len()
                ),
            ));
        }
        let components = (0..s)
            .map(|i| GaussianComponent {
                amplitude: amplitudes[i],
                mu_ver: i + 1,
                mu_hor: 0,
                sigma_ver: sigma_ver[i],
                sigma_hor: sigma_hor[i],
            })
            .collect();
        let mut p = ParticleParams {
            anchor,
            delta_mu,
            components,
            iteration: 0,
            seed: None,
        };
        p.refresh_peaks();
        Ok(p)
    }

    pub fn sensors(&self) -> usize {
        self.components.len()
    }

    /// Recompute every `mu_hor` from the anchor and the gaps.
    pub fn refresh_peaks(&mut self) {
        let mut col = self.anchor as i64;
        for (s, c) in self.components.iter_mut().enumerate() {
            if s > 0 {
                col += self.delta_mu[s - 1];
            }
            c.mu_hor = col.max(0) as usize;
        }
    }

    /// Check every range and structural invariant against `bounds`.
    pub fn check(&self, bounds: &ParamBounds, length: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.delta_mu.len() + 1 != self.components.len() {
            return fail("delta_mu must have S - 1 entries".into());
        }
        if self.anchor != bounds.anchor {
            return fail(format!("anchor {} != {}", self.anchor, bounds.anchor));
        }
        let mut expected = self.anchor;
        for (s, c) in self.components.iter().enumerate() {
            if s > 0 {
                let d = self.delta_mu[s - 1];
                if d < bounds.delta_mu_min || d > bounds.delta_mu_max {
                    return fail(format!("delta_mu[{s}] = {d} out of range"));
                }
                expected = (expected as i64 + d) as usize;
            }
            if c.mu_ver != s + 1 {
                return fail(format!("lobe {} has mu_ver {}", s + 1, c.mu_ver));
            }
            if c.mu_hor != expected || c.mu_hor > length {
                return fail(format!("lobe {} has mu_hor {}", s + 1, c.mu_hor));
            }
            if !(c.amplitude > 0.0 && c.amplitude <= bounds.amplitude_max) {
                return fail(format!("lobe {} amplitude {}", s + 1, c.amplitude));
            }
            if !(c.sigma_ver > 0.0 && c.sigma_ver <= bounds.sigma_ver_max) {
                return fail(format!("lobe {} sigma_ver {}", s + 1, c.sigma_ver));
            }
            if c.sigma_hor < bounds.sigma_hor_min || c.sigma_hor > bounds.sigma_hor_max {
                return fail(format!("lobe {} sigma_hor {}", s + 1, c.sigma_hor));
            }
        }
        Ok(())
    }
}

/// Draw a particle uniformly over the legal ranges.
pub fn sample_initial_params<R: Rng + ?Sized>(
    rng: &mut R,
    bounds: &ParamBounds,
    sensors: usize,
) -> ParticleParams {
    let mut amplitudes = Vec::with_capacity(sensors);
    let mut sigma_ver = Vec::with_capacity(sensors);
    let mut sigma_hor = Vec::with_capacity(sensors);
    let mut delta_mu = Vec::with_capacity(sensors.saturating_sub(1));
    for s in 0..sensors {
        // 1 - U[0,1) lies in (0, 1]
        amplitudes.push(bounds.amplitude_max * (1.0 - rng.random::<f64>()));
        sigma_ver.push(bounds.sigma_ver_max * (1.0 - rng.random::<f64>()));
        sigma_hor.push(rng.random_range(bounds.sigma_hor_min..=bounds.sigma_hor_max));
        if s > 0 {
            delta_mu.push(rng.random_range(bounds.delta_mu_min..=bounds.delta_mu_max));
        }
    }
    ParticleParams::new(bounds.anchor, delta_mu, &amplitudes, &sigma_ver, &sigma_hor)
        .expect("lengths agree by construction")
}

/// Render an `S x L` particle: pointwise max over unnormalised Gaussian lobes.
pub fn render_particle(p: &ParticleParams, sensors: usize, length: usize) -> Matrix {
    let mut out = Matrix::zeros(sensors, length);
    let mut col_factor = vec![0.0; length];
    for c in &p.components {
        let two_var_h = 2.0 * f64::from(c.sigma_hor).powi(2);
        for (j, f) in col_factor.iter_mut().enumerate() {
            let d = (j + 1) as f64 - c.mu_hor as f64;
            *f = (-d * d / two_var_h).exp();
        }
        let two_var_v = 2.0 * c.sigma_ver * c.sigma_ver;
        for i in 0..sensors {
            let d = (i + 1) as f64 - c.mu_ver as f64;
            let row_scale = c.amplitude * (-d * d / two_var_v).exp();
            if row_scale == 0.0 {
                continue;
            }
            for (dst, &f) in out.row_mut(i).iter_mut().zip(&col_factor) {
                let v = row_scale * f;
                if v > *dst {
                    *dst = v;
                }
            }
        }
    }
    out
}

/// Source of Gaussian noise for the refinement random walk.
pub trait NoiseSource {
    fn gaussian(&mut self, mean: f64, std_dev: f64) -> f64;
}

impl<R: Rng> NoiseSource for R {
    fn gaussian(&mut self, mean: f64, std_dev: f64) -> f64 {
        let z: f64 = StandardNormal.sample(self);
        mean + std_dev * z
    }
}

/// One random-walk step of every free parameter, clamped back into range.
///
/// `mu_ver` and the anchor are fixed; every other parameter moves together.
pub fn perturb_params<N: NoiseSource + ?Sized>(
    p: &ParticleParams,
    bounds: &ParamBounds,
    noise: &mut N,
) -> ParticleParams {
    let mut next = p.clone();
    for s in 0..next.components.len() {
        let c = &mut next.components[s];
        c.amplitude = bounds.clamp_amplitude(noise.gaussian(c.amplitude, STEP_AMPLITUDE));
        c.sigma_ver = bounds.clamp_sigma_ver(noise.gaussian(c.sigma_ver, STEP_SIGMA_VER));
        c.sigma_hor =
            bounds.clamp_sigma_hor(noise.gaussian(f64::from(c.sigma_hor), STEP_SIGMA_HOR));
        if s > 0 {
            let d = next.delta_mu[s - 1] as f64;
            next.delta_mu[s - 1] = bounds.clamp_delta_mu(noise.gaussian(d, STEP_DELTA_MU));
        }
    }
    next.refresh_peaks();
    next.iteration += 1;
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct MeanOnly;

    impl NoiseSource for MeanOnly {
        fn gaussian(&mut self, mean: f64, _std_dev: f64) -> f64 {
            mean
        }
    }

    fn single(amplitude: f64, row: usize, col: usize, sigma_ver: f64, sigma_hor: u32) -> ParticleParams {
        ParticleParams {
            anchor: col,
            delta_mu: vec![],
            components: vec![GaussianComponent {
                amplitude,
                mu_ver: row,
                mu_hor: col,
                sigma_ver,
                sigma_hor,
            }],
            iteration: 0,
            seed: None,
        }
    }

    #[test]
    fn kernel_peak_and_one_sigma_point() {
        let p = single(1.0, 2, 150, 0.5, 20);
        let m = render_particle(&p, 4, 1000);
        assert_eq!(m.get(1, 149), 1.0);
        assert_abs_diff_eq!(m.get(1, 149 + 20), (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(m.get(1, 169), 0.6065306597, epsilon = 1e-9);
    }

    #[test]
    fn overlapping_lobes_take_max_not_sum() {
        let mut p = single(0.5, 1, 10, 0.5, 3);
        p.components.push(GaussianComponent {
            amplitude: 1.2,
            mu_ver: 1,
            mu_hor: 10,
            sigma_ver: 0.5,
            sigma_hor: 3,
        });
        let m = render_particle(&p, 1, 20);
        assert_eq!(m.get(0, 9), 1.2);
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let b = ParamBounds::default();
        let a = sample_initial_params(&mut ChaCha8Rng::seed_from_u64(42), &b, 4);
        let c = sample_initial_params(&mut ChaCha8Rng::seed_from_u64(42), &b, 4);
        assert_eq!(a, c);
        a.check(&b, 1000).unwrap();
    }

    #[test]
    fn sampled_gaps_cover_range() {
        let b = ParamBounds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut lo, mut hi) = (i64::MAX, i64::MIN);
        for _ in 0..10_000 {
            let p = sample_initial_params(&mut rng, &b, 4);
            for &d in &p.delta_mu {
                lo = lo.min(d);
                hi = hi.max(d);
            }
            for c in &p.components {
                assert!(c.amplitude > 0.0 && c.amplitude <= 1.5);
                assert!(c.sigma_ver > 0.0 && c.sigma_ver <= 1.0);
                assert!((1..=60).contains(&c.sigma_hor));
            }
        }
        assert!(lo >= 100 && hi <= 250);
        assert_eq!((lo, hi), (100, 250));
    }

    #[test]
    fn zero_noise_perturbation_only_advances_iteration() {
        let b = ParamBounds::default();
        let p = sample_initial_params(&mut ChaCha8Rng::seed_from_u64(3), &b, 4);
        let q = perturb_params(&p, &b, &mut MeanOnly);
        assert_eq!(q.iteration, p.iteration + 1);
        let mut q2 = q.clone();
        q2.iteration = p.iteration;
        assert_eq!(q2, p);
    }

    #[test]
    fn perturbation_keeps_rows_fixed_and_amplitude_in_range() {
        let b = ParamBounds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ParticleParams::new(150, vec![100, 250, 175], &[1.5; 4], &[1.0; 4], &[60; 4]).unwrap();
        for _ in 0..10_000 {
            let q = perturb_params(&p, &b, &mut rng);
            for (a, c) in p.components.iter().zip(&q.components) {
                assert_eq!(a.mu_ver, c.mu_ver);
                assert!(c.amplitude > 0.0 && c.amplitude <= 1.5);
            }
            assert_eq!(q.anchor, 150);
        }
    }

    fn params() -> impl Strategy<Value = ParticleParams> {
        any::<u64>().prop_map(|seed| {
            sample_initial_params(&mut ChaCha8Rng::seed_from_u64(seed), &ParamBounds::default(), 4)
        })
    }

    #[test]
    fn dominant_neighbour_can_capture_a_row() {
        // A tall lobe with wide vertical spread outshines a weak lobe on the
        // row above, so row maxima need not move right.
        let p = ParticleParams::new(150, vec![100, 100], &[0.1, 1.0, 1.5], &[0.1, 0.1, 1.0], &[10; 3])
            .unwrap();
        let m = render_particle(&p, 3, 1000);
        assert_eq!(m.row_argmax(0), 349);
        assert_eq!(m.row_argmax(1), 249);
    }

    /// Particles whose own lobe dominates every row (cross-row bleed < own peak).
    fn separated_params() -> impl Strategy<Value = ParticleParams> {
        (
            prop::collection::vec(0.5f64..=1.5, 4),
            prop::collection::vec(0.01f64..=0.45, 4),
            prop::collection::vec(1u32..=60, 4),
            prop::collection::vec(100i64..=250, 3),
        )
            .prop_map(|(a, sv, sh, d)| ParticleParams::new(150, d, &a, &sv, &sh).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn row_argmax_strictly_increasing(p in separated_params()) {
            let m = render_particle(&p, 4, 1000);
            let cols: Vec<usize> = (0..4).map(|i| m.row_argmax(i)).collect();
            prop_assert!(cols.windows(2).all(|w| w[0] < w[1]), "{:?}", cols);
            for (s, c) in p.components.iter().enumerate() {
                prop_assert_eq!(cols[s] + 1, c.mu_hor);
            }
        }

        #[test]
        fn render_is_deterministic_and_bounded(p in params()) {
            let a = render_particle(&p, 4, 1000);
            let b = render_particle(&p, 4, 1000);
            prop_assert_eq!(&a, &b);
            let max_a = p.components.iter().map(|c| c.amplitude).fold(0.0, f64::max);
            prop_assert_eq!(a.max(), max_a);
            prop_assert!(a.min() >= 0.0);
        }

        #[test]
        fn row_peaks_move_right(p in params()) {
            let m = render_particle(&p, 4, 1000);
            let peaks: Vec<usize> = p.components.iter().map(|c| c.mu_hor).collect();
            prop_assert!(peaks.windows(2).all(|w| w[0] < w[1]));
            // Row s attains its lobe's amplitude at mu_hor.
            for (s, c) in p.components.iter().enumerate() {
                prop_assert!(m.get(s, c.mu_hor - 1) >= c.amplitude);
            }
        }

        #[test]
        fn perturbation_is_closed(p in params(), seed in any::<u64>(), steps in 1usize..50) {
            let b = ParamBounds::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut q = p;
            for _ in 0..steps {
                q = perturb_params(&q, &b, &mut rng);
                prop_assert!(q.check(&b, 1000).is_ok());
            }
            prop_assert_eq!(q.iteration, steps as u64);
        }
    }
}
