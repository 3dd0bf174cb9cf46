use memscore::datasets::{generate_synthetic, TargetFn};
use memscore::eval::{evaluate, kde, spearman, Bandwidth, EvalReport};
use memscore::image::ImageTensor;
use memscore::scoring::{ScoreError, Scorer};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Spearman by the textbook formula `1 - 6 Σd² / (n(n²-1))`, valid when there
/// are no ties.
fn brute_force_spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64], i: usize| v.iter().filter(|&&x| x < v[i]).count() as f64;
    let n = a.len() as f64;
    let d2: f64 = (0..a.len())
        .map(|i| (rank(a, i) - rank(b, i)).powi(2))
        .sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn spearman_matches_brute_force_on_random_pairs() {
    let mut rng = StdRng::seed_from_u64(5);
    for _ in 0..20 {
        let a: Vec<f64> = (0..200).map(|_| rng.random()).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 0.5 * rng.random::<f64>()).collect();
        let got = spearman(&a, &b).unwrap();
        assert!((got - brute_force_spearman(&a, &b)).abs() < 1e-9);
    }
}

/// Scores an image by its mean pixel.
struct MeanScorer;

impl Scorer for MeanScorer {
    fn score(&self, image: &ImageTensor) -> Result<f64, ScoreError> {
        Ok(image.0.mean().unwrap() as f64)
    }
}

#[test]
fn evaluate_reports_in_manifest_order() {
    let ds = generate_synthetic(70, 32, 2, TargetFn::TextureOnly).unwrap();
    let src = ds.memory_source();
    let report = evaluate(&MeanScorer, &src, &ds.manifest).unwrap();
    assert_eq!(report.n, 70);
    for (i, rec) in ds.manifest.records.iter().enumerate() {
        assert_eq!(report.image_refs[i], rec.image_ref);
        assert_eq!(report.truths[i], rec.score);
        assert_eq!(report.predictions[i], ds.images[i].0.mean().unwrap() as f64);
    }
    assert!((report.rmse - report.mse.sqrt()).abs() < 1e-12);
    let json = serde_json::to_string(&report).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
}

#[test]
fn missing_image_names_the_record() {
    let ds = generate_synthetic(3, 32, 2, TargetFn::TextureOnly).unwrap();
    let mut m = ds.manifest.clone();
    m.records[1].image_ref = "gone.png".into();
    let err = evaluate(&MeanScorer, &ds.memory_source(), &m).unwrap_err();
    assert!(err.to_string().contains("gone.png"));
}

#[test]
fn constant_predictions_leave_rho_undefined() {
    let r = EvalReport::from_predictions(
        vec!["a".into(), "b".into(), "c".into()],
        vec![0.5; 3],
        vec![0.1, 0.2, 0.3],
    )
    .unwrap();
    assert!(r.spearman.is_none());
    assert!(r.spearman_error.unwrap().contains("undefined"));
}

#[test]
fn kde_of_compressed_predictions_is_narrower() {
    let mut rng = StdRng::seed_from_u64(0);
    let truths: Vec<f64> = (0..500).map(|_| rng.random()).collect();
    let preds: Vec<f64> = truths.iter().map(|t| 0.4 + 0.2 * t).collect();
    let kt = kde(&truths, Bandwidth::Auto).unwrap();
    let kp = kde(&preds, Bandwidth::Auto).unwrap();
    assert!((kt.integral() - 1.0).abs() < 1e-2);
    assert!((kp.integral() - 1.0).abs() < 1e-2);
    let peak = |c: &memscore::eval::KdeCurve| c.density.iter().cloned().fold(0.0, f64::max);
    assert!(peak(&kp) > 2.0 * peak(&kt));
}
