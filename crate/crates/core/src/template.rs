//! Template library generation.
//!
//! Each training matrix is fitted by drawing `N` random particles, keeping
//! the one with the lowest sliding RMSE, then refining it for `M` iterations
//! of perturb-and-accept-if-strictly-better. Fitted parameters are averaged
//! per nodule size and rendered into the size's template. Size 0 uses the
//! all-zero template.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::Matcher;
use crate::matrix::Matrix;
use crate::particle::{
    perturb_params, render_particle, sample_initial_params, GaussianComponent, ParamBounds, ParticleParams,
};
use crate::preprocess::{FeatureMatrix, PreprocessConfig};

/// Largest nodule size class.
pub const MAX_SIZE: u8 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Initial particle count `N`.
    pub particles: usize,
    /// Refinement iterations `M`.
    pub iterations: usize,
    /// Training traces per size `Q`.
    pub traces_per_size: usize,
    pub master_seed: u64,
}

impl FitConfig {
    pub fn desk(master_seed: u64) -> Self {
        FitConfig {
            particles: 200,
            iterations: 200,
            traces_per_size: 20,
            master_seed,
        }
    }

    pub fn paper(master_seed: u64) -> Self {
        FitConfig {
            particles: 2000,
            iterations: 2000,
            traces_per_size: 20,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 || self.traces_per_size == 0 {
            return Err(Error::InvalidConfig(
                "particles and traces_per_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of fitting one training matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFit {
    pub params: ParticleParams,
    pub rmse: f64,
    pub initial_rmse: f64,
    /// Index of the winning initial particle (0-based).
    pub initial_index: usize,
    /// Current RMSE after each refinement iteration (`M + 1` entries, starting
    /// with the initial best).
    #[serde(skip)]
    pub history: Vec<f64>,
    pub accepted: usize,
}

fn score(matcher: &Matcher<'_>, p: &ParticleParams, shape: (usize, usize)) -> Result<f64> {
    let rendered = render_particle(p, shape.0, shape.1);
    Ok(matcher.align(&rendered)?.rmse_min)
}

/// Fit one matrix. Initial particles are drawn sequentially from `rng`, then
/// scored in parallel; refinement continues on the same stream.
pub fn fit_trace<R>(
    f: &Matrix,
    cfg: &FitConfig,
    bounds: &ParamBounds,
    rng: &mut R,
) -> Result<TraceFit>
where
    R: rand::Rng,
{
    cfg.validate()?;
    bounds.validate(f.rows(), f.cols())?;
    let shape = f.shape();
    let matcher = Matcher::new(f);

    let initial: Vec<ParticleParams> = (0..cfg.particles)
        .map(|_| sample_initial_params(rng, bounds, shape.0))
        .collect();
    let scores = initial
        .par_iter()
        .map(|p| score(&matcher, p, shape))
        .collect::<Result<Vec<_>>>()?;
    let mut initial_index = 0;
    for (n, &s) in scores.iter().enumerate() {
        if s < scores[initial_index] {
            initial_index = n;
        }
    }

    let mut current = initial[initial_index].clone();
    let mut current_rmse = scores[initial_index];
    let initial_rmse = current_rmse;
    let mut history = Vec::with_capacity(cfg.iterations + 1);
    history.push(current_rmse);
    let mut accepted = 0;
    for m in 1..=cfg.iterations {
        let candidate = perturb_params(&current, bounds, rng);
        let rmse = score(&matcher, &candidate, shape)?;
        if rmse < current_rmse {
            current = candidate;
            current_rmse = rmse;
            accepted += 1;
        }
        current.iteration = m as u64;
        history.push(current_rmse);
    }

    Ok(TraceFit {
        params: current,
        rmse: current_rmse,
        initial_rmse,
        initial_index,
        history,
        accepted,
    })
}

/// Parameter-wise arithmetic mean over fits of one size.
///
/// Integer parameters are rounded to the nearest integer after averaging and
/// peak columns are rebuilt from the shared anchor.
pub fn average_params(fits: &[ParticleParams]) -> Result<ParticleParams> {
    let first = fits.first().ok_or(Error::EmptyFitSet)?;
    let sensors = first.sensors();
    for p in fits {
        if p.sensors() != sensors || p.delta_mu.len() + 1 != sensors {
            return Err(Error::shape(
                format!("{sensors} lobes"),
                format!("{} lobes", p.sensors()),
            ));
        }
        if p.anchor != first.anchor {
            return Err(Error::InvalidConfig(format!(
                "fits disagree on anchor: {} vs {}",
                first.anchor, p.anchor
            )));
        }
    }
    let q = fits.len() as f64;
    let mean = |get: &dyn Fn(&ParticleParams) -> f64| fits.iter().map(get).sum::<f64>() / q;

    let components = (0..sensors)
        .map(|s| GaussianComponent {
            amplitude: mean(&|p| p.components[s].amplitude),
            mu_ver: s + 1,
            mu_hor: 0,
            sigma_ver: mean(&|p| p.components[s].sigma_ver),
            sigma_hor: mean(&|p| f64::from(p.components[s].sigma_hor)).round() as u32,
        })
        .collect();
    let delta_mu = (0..sensors - 1)
        .map(|s| mean(&|p| p.delta_mu[s] as f64).round() as i64)
        .collect();
    let mut out = ParticleParams {
        anchor: first.anchor,
        delta_mu,
        components,
        iteration: fits.iter().map(|p| p.iteration).max().unwrap_or(0),
        seed: None,
    };
    out.refresh_peaks();
    Ok(out)
}

/// Per-trace fit record kept in the library for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub size: u8,
    pub index: usize,
    pub stream: u64,
    pub rmse: f64,
    pub initial_rmse: f64,
    pub accepted: usize,
    pub params: ParticleParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateLibrary {
    pub templates: BTreeMap<u8, Matrix>,
    pub fitted_params: BTreeMap<u8, ParticleParams>,
    pub fits: Vec<FitRecord>,
    pub fit_config: FitConfig,
    pub bounds: ParamBounds,
    pub preprocess: PreprocessConfig,
}

impl TemplateLibrary {
    pub fn shape(&self) -> (usize, usize) {
        (self.preprocess.sensors, self.preprocess.length)
    }

    /// Check the library's structural invariants.
    pub fn validate(&self) -> Result<()> {
        let (s, l) = self.shape();
        for b in 0..=MAX_SIZE {
            let t = self.templates.get(&b).ok_or(Error::MissingClass(b))?;
            t.ensure_shape(s, l)?;
        }
        if self.templates.len() != usize::from(MAX_SIZE) + 1 {
            return Err(Error::InvalidConfig(format!(
                "expected {} templates, found {}",
                MAX_SIZE + 1,
                self.templates.len()
            )));
        }
        if self.templates[&0].as_slice().iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidConfig("template 0 must be all zero".into()));
        }
        Ok(())
    }
}

/// Random stream for the `index`-th training trace of size `size`.
pub fn fit_stream(size: u8, index: usize) -> u64 {
    u64::from(size) << 32 | index as u64
}

/// Fit every training matrix, average per size and render the templates.
pub fn build_library(
    dataset: &BTreeMap<u8, Vec<FeatureMatrix>>,
    cfg: &FitConfig,
    bounds: &ParamBounds,
    pre: &PreprocessConfig,
) -> Result<TemplateLibrary> {
    cfg.validate()?;
    pre.validate()?;
    bounds.validate(pre.sensors, pre.length)?;

    let mut jobs = Vec::new();
    for b in 1..=MAX_SIZE {
        let traces = dataset.get(&b).filter(|v| !v.is_empty()).ok_or(Error::MissingClass(b))?;
        for (q, f) in traces.iter().enumerate() {
            f.values.ensure_shape(pre.sensors, pre.length)?;
            jobs.push((b, q, f));
        }
    }

    let fits = jobs
        .par_iter()
        .map(|&(b, q, f)| {
            let stream = fit_stream(b, q);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
            rng.set_stream(stream);
            let mut fit = fit_trace(&f.values, cfg, bounds, &mut rng)?;
            fit.params.seed = Some(cfg.master_seed);
            Ok(FitRecord {
                size: b,
                index: q,
                stream,
                rmse: fit.rmse,
                initial_rmse: fit.initial_rmse,
                accepted: fit.accepted,
                params: fit.params,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut templates = BTreeMap::new();
    let mut fitted_params = BTreeMap::new();
    templates.insert(0, Matrix::zeros(pre.sensors, pre.length));
    for b in 1..=MAX_SIZE {
        let group: Vec<ParticleParams> = fits
            .iter()
            .filter(|r| r.size == b)
            .map(|r| r.params.clone())
            .collect();
        let avg = average_params(&group)?;
        templates.insert(b, render_particle(&avg, pre.sensors, pre.length));
        fitted_params.insert(b, avg);
    }

    Ok(TemplateLibrary {
        templates,
        fitted_params,
        fits,
        fit_config: cfg.clone(),
        bounds: bounds.clone(),
        preprocess: *pre,
    })
}
