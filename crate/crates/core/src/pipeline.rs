//! End-to-end orchestration shared by the CLI and the test suites.
//!
//! Every artifact written here is a pure function of the run configuration
//! and the input files, and names the SHA-256 of each input it consumed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{classify, DetectionResult};
use crate::error::{Error, Result};
use crate::eval::{build_report, confusion_csv, report_csv, report_plots, EvalReport};
use crate::io::{
    read_bytes, read_json, sha256_hex, to_json_bytes, trace_file_name, trace_from_csv,
    trace_to_csv, write_bytes, write_json, Manifest, ManifestEntry, MANIFEST_FILE,
};
use crate::particle::ParamBounds;
use crate::preprocess::{preprocess, FeatureMatrix, PreprocessConfig};
use crate::synth::{generate_trace_set, trace_seed, PhantomConfig};
use crate::template::{build_library, FitConfig, TemplateLibrary, MAX_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// N = 200, M = 200, Q = 20.
    Desk,
    /// N = 2000, M = 2000, Q = 20.
    Paper,
}

impl Profile {
    pub fn fit_config(self, master_seed: u64) -> FitConfig {
        match self {
            Profile::Desk => FitConfig::desk(master_seed),
            Profile::Paper => FitConfig::paper(master_seed),
        }
    }
}

/// Everything a full run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub preprocess: PreprocessConfig,
    /// Fitting settings; `master_seed` also seeds the training corpus.
    pub fit: FitConfig,
    pub bounds: ParamBounds,
    pub test_seed: u64,
    /// Held-out traces per size.
    pub test_per_size: usize,
    /// Worker threads; `None` uses all cores. Not part of any artifact.
    #[serde(default, skip_serializing)]
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn new(profile: Profile, train_seed: u64, test_seed: u64) -> Self {
        RunConfig {
            phantom: PhantomConfig::default(),
            preprocess: PreprocessConfig::default(),
            fit: profile.fit_config(train_seed),
            bounds: ParamBounds::default(),
            test_seed,
            test_per_size: 20,
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.preprocess.validate()?;
        self.fit.validate()?;
        self.bounds.validate(self.preprocess.sensors, self.preprocess.length)?;
        if self.phantom.n_sensors != self.preprocess.sensors {
            return Err(Error::InvalidConfig(format!(
                "phantom has {} sensors but preprocessing expects {}",
                self.phantom.n_sensors, self.preprocess.sensors
            )));
        }
        if self.phantom.samples() > self.preprocess.length {
            return Err(Error::InvalidConfig(format!(
                "phantom produces {} samples, more than the feature length {}",
                self.phantom.samples(),
                self.preprocess.length
            )));
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        if self.test_per_size == 0 {
            return Err(Error::InvalidConfig("test_per_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One generated trace with its identity.
pub struct CorpusTrace {
    pub file: String,
    pub label: u8,
    pub seed: u64,
    pub csv: Vec<u8>,
}

/// Generate `q` CSV-encoded traces for each size in `sizes`.
pub fn generate_corpus_files(
    phantom: &PhantomConfig,
    sizes: &[u8],
    q: usize,
    master_seed: u64,
) -> Result<Vec<CorpusTrace>> {
    let jobs: Vec<(u8, usize)> = sizes
        .iter()
        .flat_map(|&b| (0..q).map(move |i| (b, i)))
        .collect();
    jobs.par_iter()
        .map(|&(b, i)| {
            let seed = trace_seed(master_seed, b, i);
            let trace = generate_trace_set(&phantom.clone().with_size(b).with_seed(seed))?;
            Ok(CorpusTrace {
                file: trace_file_name(b, i),
                label: b,
                seed,
                csv: trace_to_csv(&trace)?,
            })
        })
        .collect()
}

/// Write traces and merge them into the directory's manifest.
pub fn write_corpus(
    dir: &Path,
    phantom: &PhantomConfig,
    master_seed: u64,
    traces: &[CorpusTrace],
) -> Result<Manifest> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest = if manifest_path.exists() {
        read_json::<Manifest>(&manifest_path)?
    } else {
        Manifest {
            phantom: phantom.clone(),
            master_seed,
            traces: vec![],
        }
    };
    if manifest.master_seed != master_seed {
        return Err(Error::InvalidConfig(format!(
            "{} was generated with seed {}, not {}",
            dir.display(),
            manifest.master_seed,
            master_seed
        )));
    }
    manifest.phantom = phantom.clone();
    let mut entries = Vec::with_capacity(traces.len());
    for t in traces {
        write_bytes(&dir.join(&t.file), &t.csv)?;
        entries.push(ManifestEntry {
            file: t.file.clone(),
            label: t.label,
            seed: t.seed,
            sha256: sha256_hex(&t.csv),
        });
    }
    manifest.merge(entries);
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

/// `gen`: write `q` traces per size plus the manifest.
pub fn cmd_gen(dir: &Path, phantom: &PhantomConfig, sizes: &[u8], q: usize, seed: u64) -> Result<Manifest> {
    phantom.validate()?;
    if let Some(&b) = sizes.iter().find(|&&b| b > MAX_SIZE) {
        return Err(Error::InvalidConfig(format!("size {b} outside 0..={MAX_SIZE}")));
    }
    let traces = generate_corpus_files(phantom, sizes, q, seed)?;
    write_corpus(dir, phantom, seed, &traces)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureFile {
    pub feature: FeatureMatrix,
    pub input_sha256: String,
}

/// `preprocess`: one trace CSV to a feature matrix JSON.
pub fn cmd_preprocess(trace: &Path, out: &Path, pre: &PreprocessConfig) -> Result<FeatureFile> {
    let bytes = read_bytes(trace)?;
    let feature = preprocess(&trace_from_csv(&bytes)?, pre)?;
    let file = FeatureFile {
        feature,
        input_sha256: sha256_hex(&bytes),
    };
    write_json(out, &file)?;
    Ok(file)
}

/// A template library plus the inputs it was fitted from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LibraryFile {
    pub library: TemplateLibrary,
    pub manifest_sha256: String,
    pub inputs: Vec<ManifestEntry>,
}

/// Corpus manifest, the entries actually used, and their features by size.
pub type TrainingSet = (Manifest, Vec<ManifestEntry>, BTreeMap<u8, Vec<FeatureMatrix>>);

/// Preprocess every trace in a corpus directory whose label is in `1..=5`,
/// at most `per_size` per label.
pub fn load_training_set(
    dir: &Path,
    pre: &PreprocessConfig,
    per_size: usize,
) -> Result<TrainingSet> {
    let manifest = Manifest::load(dir)?;
    let mut used = Vec::new();
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for e in &manifest.traces {
        if e.label == 0 || e.label > MAX_SIZE {
            continue;
        }
        let n = counts.entry(e.label).or_default();
        if *n < per_size {
            *n += 1;
            used.push(e.clone());
        }
    }
    let features = used
        .par_iter()
        .map(|e| {
            let bytes = read_bytes(&dir.join(&e.file))?;
            let actual = sha256_hex(&bytes);
            if actual != e.sha256 {
                return Err(Error::InvalidTrace(format!(
                    "{} does not match its manifest hash",
                    e.file
                )));
            }
            Ok((e.label, preprocess(&trace_from_csv(&bytes)?, pre)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut dataset: BTreeMap<u8, Vec<FeatureMatrix>> = BTreeMap::new();
    for (b, f) in features {
        dataset.entry(b).or_default().push(f);
    }
    Ok((manifest, used, dataset))
}

/// `fit`: build a template library from a corpus directory.
pub fn cmd_fit(
    data: &Path,
    out: &Path,
    fit: &FitConfig,
    bounds: &ParamBounds,
    pre: &PreprocessConfig,
) -> Result<LibraryFile> {
    let (_, inputs, dataset) = load_training_set(data, pre, fit.traces_per_size)?;
    let library = build_library(&dataset, fit, bounds, pre)?;
    let file = LibraryFile {
        library,
        manifest_sha256: sha256_hex(&read_bytes(&data.join(MANIFEST_FILE))?),
        inputs,
    };
    write_json(out, &file)?;
    Ok(file)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionFile {
    pub trace: String,
    pub trace_sha256: String,
    pub library_sha256: String,
    pub label: Option<u8>,
    pub preprocess: PreprocessConfig,
    pub result: DetectionResult,
}

pub fn load_library(path: &Path) -> Result<(LibraryFile, String)> {
    let bytes = read_bytes(path)?;
    let lib: LibraryFile = serde_json::from_slice(&bytes)?;
    lib.library.validate()?;
    Ok((lib, sha256_hex(&bytes)))
}

fn detect_bytes(
    name: &str,
    bytes: &[u8],
    library: &TemplateLibrary,
    library_sha256: &str,
    label: Option<u8>,
) -> Result<DetectionFile> {
    let f = preprocess(&trace_from_csv(bytes)?, &library.preprocess)?;
    Ok(DetectionFile {
        trace: name.to_string(),
        trace_sha256: sha256_hex(bytes),
        library_sha256: library_sha256.to_string(),
        label,
        preprocess: library.preprocess,
        result: classify(&f.values, library)?,
    })
}

/// `detect`: classify one trace. The label comes from `label` or, failing
/// that, from a manifest next to the trace.
pub fn cmd_detect(trace: &Path, library: &Path, out: &Path, label: Option<u8>) -> Result<DetectionFile> {
    let bytes = read_bytes(trace)?;
    let (lib, lib_hash) = load_library(library)?;
    let name = trace
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let label = label.or_else(|| {
        trace
            .parent()
            .and_then(|d| Manifest::load(d).ok())
            .and_then(|m| m.label_of(&name))
    });
    let det = detect_bytes(&name, &bytes, &lib.library, &lib_hash, label)?;
    write_json(out, &det)?;
    Ok(det)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub report: EvalReport,
    /// `(result file, sha256)` for every aggregated detection.
    pub inputs: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub library_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_manifest_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_manifest_sha256: Option<String>,
}

fn write_report_outputs(report: &ReportFile, out: &Path, csv: Option<&Path>, plots: Option<&Path>) -> Result<()> {
    write_json(out, report)?;
    if let Some(csv) = csv {
        write_bytes(csv, report_csv(&report.report).as_bytes())?;
        let confusion = csv.with_file_name(format!(
            "{}_confusion.csv",
            csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        ));
        write_bytes(&confusion, confusion_csv(&report.report.confusion).as_bytes())?;
    }
    if let Some(dir) = plots {
        for (name, svg) in report_plots(&report.report) {
            write_bytes(&dir.join(name), svg.as_bytes())?;
        }
    }
    Ok(())
}

/// `eval`: aggregate every labelled detection JSON in `results`.
pub fn cmd_eval(results: &Path, out: &Path, csv: Option<&Path>, plots: Option<&Path>) -> Result<ReportFile> {
    if !results.is_dir() {
        return Err(Error::MissingInput(results.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(results)
        .map_err(|e| Error::io(format!("listing {}", results.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut pairs = Vec::new();
    let mut inputs = Vec::new();
    for path in &files {
        let bytes = read_bytes(path)?;
        let det: DetectionFile = serde_json::from_slice(&bytes)?;
        let label = det.label.ok_or_else(|| {
            Error::InvalidTrace(format!("{} has no ground-truth label", path.display()))
        })?;
        pairs.push((label, det.result));
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        inputs.push((name, sha256_hex(&bytes)));
    }
    let report = ReportFile {
        report: build_report(&pairs)?,
        inputs,
        config: None,
        library_sha256: None,
        train_manifest_sha256: None,
        test_manifest_sha256: None,
    };
    write_report_outputs(&report, out, csv, plots)?;
    Ok(report)
}

/// In-memory result of a full run.
pub struct PipelineRun {
    pub library: TemplateLibrary,
    pub detections: Vec<DetectionFile>,
    pub report: ReportFile,
}

/// `pipeline`: generate, fit, detect and evaluate under `out`.
///
/// Layout: `train/`, `test/`, `library.json`, `results/`, `report.json`,
/// `report.csv`, `report_confusion.csv`, `plots/`.
pub fn cmd_pipeline(cfg: &RunConfig, out: &Path) -> Result<PipelineRun> {
    cfg.validate()?;
    let sizes: Vec<u8> = (0..=MAX_SIZE).collect();

    let train_dir = out.join("train");
    let train = generate_corpus_files(&cfg.phantom, &sizes, cfg.fit.traces_per_size, cfg.fit.master_seed)?;
    write_corpus(&train_dir, &cfg.phantom, cfg.fit.master_seed, &train)?;
    let lib_path = out.join("library.json");
    cmd_fit(&train_dir, &lib_path, &cfg.fit, &cfg.bounds, &cfg.preprocess)?;
    let (lib, lib_hash) = load_library(&lib_path)?;

    let test_dir = out.join("test");
    let test = generate_corpus_files(&cfg.phantom, &sizes, cfg.test_per_size, cfg.test_seed)?;
    write_corpus(&test_dir, &cfg.phantom, cfg.test_seed, &test)?;

    let results_dir = out.join("results");
    let detections = test
        .par_iter()
        .map(|t| detect_bytes(&t.file, &t.csv, &lib.library, &lib_hash, Some(t.label)))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    let mut inputs = Vec::new();
    for d in &detections {
        let name = d.trace.replace(".csv", ".json");
        let bytes = to_json_bytes(d)?;
        write_bytes(&results_dir.join(&name), &bytes)?;
        inputs.push((name, sha256_hex(&bytes)));
        pairs.push((d.label.unwrap_or(0), d.result.clone()));
    }

    let report = ReportFile {
        report: build_report(&pairs)?,
        inputs,
        config: Some(cfg.clone()),
        library_sha256: Some(lib_hash),
        train_manifest_sha256: Some(sha256_hex(&read_bytes(&train_dir.join(MANIFEST_FILE))?)),
        test_manifest_sha256: Some(sha256_hex(&read_bytes(&test_dir.join(MANIFEST_FILE))?)),
    };
    write_report_outputs(
        &report,
        &out.join("report.json"),
        Some(&out.join("report.csv")),
        Some(&out.join("plots")),
    )?;
    Ok(PipelineRun {
        library: lib.library,
        detections,
        report,
    })
}
