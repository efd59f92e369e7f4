use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nodule::particle::{render_particle, ParamBounds, ParticleParams};
use nodule::preprocess::{preprocess, FeatureMatrix, PreprocessConfig};
use nodule::synth::{generate_corpus, generate_trace_set, PhantomConfig};
use nodule::template::{build_library, fit_trace, FitConfig, TemplateLibrary};
use nodule::{classify, detect_presence};

fn features(b: u8, seed: u64) -> FeatureMatrix {
    let trace = generate_trace_set(&PhantomConfig::default().with_size(b).with_seed(seed)).unwrap();
    preprocess(&trace, &PreprocessConfig::default()).unwrap()
}

fn corpus_features(sizes: &[u8], seed: u64) -> BTreeMap<u8, Vec<FeatureMatrix>> {
    let pre = PreprocessConfig::default();
    generate_corpus(&PhantomConfig::default(), sizes, 20, seed)
        .unwrap()
        .into_iter()
        .map(|(b, traces)| (b, traces.iter().map(|t| preprocess(t, &pre).unwrap()).collect()))
        .collect()
}

fn desk_library() -> &'static TemplateLibrary {
    static LIB: OnceLock<TemplateLibrary> = OnceLock::new();
    LIB.get_or_init(|| {
        let data = corpus_features(&[1, 2, 3, 4, 5], 11);
        build_library(&data, &FitConfig::desk(11), &ParamBounds::default(), &PreprocessConfig::default()).unwrap()
    })
}

#[test]
fn nodule_free_trace_is_nearly_flat() {
    let f = features(0, 7);
    assert_eq!(f.values.shape(), (4, 1000));
    assert!(f.values.max() < 0.5, "max {}", f.values.max());
}

#[test]
fn large_nodule_leaves_a_diagonal() {
    let f = features(5, 7);
    let cols: Vec<usize> = (0..4).map(|i| f.values.row_argmax(i)).collect();
    assert!(cols.windows(2).all(|w| w[0] < w[1]), "{cols:?}");
    assert!((0..4).all(|i| f.values.row(i).iter().any(|&v| v > 0.0)));
    assert!(f.values.max() > 1.0 && f.values.max() <= 1.5, "max {}", f.values.max());
}

#[test]
fn fit_recovers_a_planted_surface() {
    let bounds = ParamBounds::default();
    let planted = ParticleParams::new(150, vec![170, 160, 180], &[0.9, 1.1, 1.0, 0.8], &[0.4, 0.5, 0.4, 0.5], &[30, 35, 32, 28])
        .unwrap();
    let f = render_particle(&planted, 4, 1000);
    let cfg = FitConfig {
        particles: 500,
        iterations: 500,
        traces_per_size: 1,
        master_seed: 3,
    };
    let fit = fit_trace(&f, &cfg, &bounds, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!(fit.rmse <= fit.initial_rmse);
    assert!(fit.rmse < 0.05, "rmse {}", fit.rmse);
    assert!(fit.history.windows(2).all(|w| w[1] <= w[0]));
    fit.params.check(&bounds, 1000).unwrap();
}

#[test]
fn library_templates_are_well_formed() {
    let lib = desk_library();
    lib.validate().unwrap();
    assert_eq!(lib.templates.len(), 6);
    assert_eq!(lib.templates[&0].max(), 0.0);
    for b in 1..=5u8 {
        let t = &lib.templates[&b];
        assert!(t.max() > 0.0 && t.max() <= 1.5, "b={b} max {}", t.max());
        assert_eq!(*t, render_particle(&lib.fitted_params[&b], 4, 1000));
        let cols: Vec<usize> = (0..4).map(|i| t.row_argmax(i)).collect();
        assert!(cols.windows(2).all(|w| w[0] < w[1]), "b={b} {cols:?}");
        lib.fitted_params[&b].check(&lib.bounds, 1000).unwrap();
    }
    // peaks grow with size
    let peaks: Vec<f64> = (1..=5u8).map(|b| lib.templates[&b].max()).collect();
    assert!(peaks.windows(2).all(|w| w[0] < w[1]), "{peaks:?}");
}

#[test]
fn library_is_reproducible() {
    let data = corpus_features(&[1, 2, 3, 4, 5], 11);
    let again = build_library(&data, &FitConfig::desk(11), &ParamBounds::default(), &PreprocessConfig::default()).unwrap();
    assert_eq!(
        serde_json::to_vec(&again).unwrap(),
        serde_json::to_vec(desk_library()).unwrap()
    );
}

#[test]
fn held_out_four_mm_lands_within_one_size() {
    let lib = desk_library();
    let r = classify(&features(4, 99).values, lib).unwrap();
    assert!((3..=5).contains(&r.predicted_b), "{r:?}");
}

#[test]
fn held_out_large_nodules_are_all_detected() {
    let lib = desk_library();
    let test = corpus_features(&[3, 4, 5], 99);
    for (b, fs) in &test {
        for (i, f) in fs.iter().enumerate() {
            assert!(detect_presence(&f.values, lib).unwrap(), "b={b} trace {i} missed");
        }
    }
}

#[test]
fn templates_classify_as_themselves() {
    let lib = desk_library();
    for b in 0..=5u8 {
        let r = classify(&lib.templates[&b], lib).unwrap();
        assert_eq!(r.predicted_b, b);
        assert_eq!(r.scores[&b], 0.0);
    }
    assert!(detect_presence(&lib.templates[&1], lib).unwrap());
}
