use proptest::prelude::*;
use ysnd_core::container::Container;
use ysnd_core::metrics::*;
use ysnd_core::synthetic::toy_pairs;
use ysnd_core::tensor::Tensor;
use ysnd_core::{Error, ModelConfig, SeededRng};

fn gaussian_set(n: usize, d: usize, mu: &[f64], seed: u64) -> EmbeddingSet {
    let mut rng = SeededRng::new(seed);
    let t = Tensor::from_fn(&[n, d], |i| rng.normal() + mu[i % d]);
    EmbeddingSet::new(t, "test").unwrap()
}

#[test]
fn frechet_identical_is_zero() {
    let a = gaussian_set(200, 8, &[0.0; 8], 1);
    assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-8);
    // same moments from a permuted copy: no shortcut, still ~0
    let mut rows: Vec<Vec<f64>> = (0..200).map(|i| a.vectors.row(i).to_vec()).collect();
    rows.reverse();
    let b = EmbeddingSet::new(Tensor::from_rows(&rows).unwrap(), "test").unwrap();
    assert!(frechet_distance(&a, &b).unwrap().abs() <= 1e-8);
}

#[test]
fn frechet_gaussian_shift() {
    let mu = [0.5, -0.5, 1.0, 0.0, 0.25, -1.0, 0.75, 0.5];
    let m2: f64 = mu.iter().map(|x| x * x).sum();
    let a = gaussian_set(10_000, 8, &[0.0; 8], 2);
    let b = gaussian_set(10_000, 8, &mu, 3);
    let fd = frechet_distance(&a, &b).unwrap();
    assert!((fd - m2).abs() / m2 < 0.05, "{fd} vs {m2}");
}

#[test]
fn frechet_scalar_formula() {
    let xa = [1.0, 2.0, 4.0, 7.0];
    let xb = [0.0, 3.0, 3.5, 10.0, -2.0];
    let stats = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let v = x.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / (x.len() as f64 - 1.0);
        (m, v.sqrt())
    };
    let (ma, sa) = stats(&xa);
    let (mb, sb) = stats(&xb);
    let col = |x: &[f64]| EmbeddingSet::new(Tensor::from_vec(vec![x.len(), 1], x.to_vec()).unwrap(), "s").unwrap();
    let fd = frechet_distance(&col(&xa), &col(&xb)).unwrap();
    let oracle = (ma - mb).powi(2) + (sa - sb).powi(2);
    assert!((fd - oracle).abs() < 1e-10, "{fd} vs {oracle}");
}

#[test]
fn frechet_errors() {
    let a = gaussian_set(10, 3, &[0.0; 3], 1);
    let b = gaussian_set(10, 4, &[0.0; 4], 1);
    assert!(matches!(frechet_distance(&a, &b), Err(Error::Shape { .. })));
    let one = gaussian_set(1, 3, &[0.0; 3], 1);
    assert!(frechet_distance(&a, &one).is_err());
}

#[test]
fn frechet_reports_clamping() {
    // rank-deficient covariance: clamped eigenvalues stay tiny
    let a = gaussian_set(3, 6, &[0.0; 6], 4);
    let b = gaussian_set(3, 6, &[0.0; 6], 5);
    let f = frechet(&a, &b).unwrap();
    assert!(f.distance >= 0.0);
    assert!(!f.non_psd());
}

#[test]
fn inception_score_fixtures() {
    let same = ClassPosterior::from_rows(&vec![vec![0.2, 0.3, 0.5]; 5]).unwrap();
    assert!((inception_score(&same).unwrap() - 1.0).abs() < 1e-12);
    let eye: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| (i == j) as u8 as f64).collect()).collect();
    let p = ClassPosterior::from_rows(&eye).unwrap();
    assert!((inception_score(&p).unwrap() - 4.0).abs() < 1e-6);
}

#[test]
fn kl_sigmoid_fixtures() {
    let r = ClassPosterior::from_rows(&[vec![0.9, 0.1]]).unwrap();
    let g = ClassPosterior::from_rows(&[vec![0.5, 0.5]]).unwrap();
    let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
    assert!((kl_sigmoid(&g, &r).unwrap() - expected).abs() < 1e-9);
    assert!((expected - 0.368).abs() < 1e-3);
    assert_eq!(kl_sigmoid(&r, &r).unwrap(), 0.0);
    let two = ClassPosterior::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
    assert!(kl_sigmoid(&two, &r).is_err());
}

#[test]
fn calibration_is_logistic_then_normalized() {
    let s = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, -2.0]]).unwrap();
    let p = calibrate_sigmoid(&s).unwrap();
    assert_eq!(p.probs.row(0), &[0.5, 0.5]);
    let (a, b) = (1.0 / (1.0 + (-2.0f64).exp()), 1.0 / (1.0 + 2.0f64.exp()));
    assert!((p.probs.row(1)[0] - a / (a + b)).abs() < 1e-15);
    assert!(ClassPosterior::from_rows(&[vec![0.7, 0.7]]).is_err());
    assert!(ClassPosterior::from_rows(&[vec![1.1, -0.1]]).is_err());
}

#[test]
fn clip_score_fixtures() {
    assert!((clip_style_score(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 100.0).abs() < 1e-12);
    assert_eq!(clip_style_score(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
    assert_eq!(clip_style_score(&[1.0, 2.0], &[-1.0, -2.0]).unwrap(), 0.0);
    assert!(matches!(clip_style_score(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Contract(_))));
}

#[test]
fn peaks_single_bump() {
    let env = [0.0, 1.0, 2.0, 3.0, 2.0, 1.0, 0.0];
    let p = detect_peaks(&env, 10.0, 0.3, 0.2).unwrap();
    assert_eq!(p.times, vec![0.3]);
    assert!((p.duration - 0.7).abs() < 1e-12);
    assert!(detect_peaks(&[0.0; 5], 10.0, 0.3, 0.2).unwrap().times.is_empty());
    assert!(detect_peaks(&[1.0, 2.0], 10.0, 0.3, 0.2).is_err());
}

#[test]
fn peaks_close_bumps_keep_taller() {
    let env = [0.0, 2.0, 0.5, 3.0, 0.0, 0.0, 0.0, 0.0];
    let p = detect_peaks(&env, 10.0, 0.1, 0.25).unwrap();
    assert_eq!(p.times, vec![0.3]);
}

#[test]
fn peaks_planted() {
    let frames = 100;
    let centers = [8usize, 27, 45, 63, 88];
    let heights = [1.0, 0.6, 0.9, 0.45, 0.8];
    let mut env = vec![0.0; frames];
    for (&c, &h) in centers.iter().zip(&heights) {
        for (j, e) in env.iter_mut().enumerate() {
            let d = (j as f64 - c as f64) / 2.0;
            *e += h * (-d * d).exp();
        }
    }
    let p = detect_peaks(&env, 10.0, 0.3, 0.5).unwrap();
    assert_eq!(p.times.len(), 5);
    for (t, &c) in p.times.iter().zip(&centers) {
        assert!((t * 10.0 - c as f64).abs() <= 1.0);
    }
}

fn train(times: &[f64]) -> PeakTrain {
    PeakTrain::new(times.to_vec(), 4.0).unwrap()
}

#[test]
fn av_align_fixtures() {
    let a = train(&[1.0, 2.0, 3.0]);
    let v = train(&[1.05, 2.5]);
    assert_eq!(av_align(&a, &v, 0.1).unwrap(), 0.25);
    assert_eq!(av_align(&a, &a, 0.1).unwrap(), 1.0);
    assert_eq!(av_align(&train(&[0.5]), &train(&[1.5]), 0.1).unwrap(), 0.0);
    assert_eq!(av_align(&train(&[]), &train(&[]), 0.1).unwrap(), 1.0);
    assert!(matches!(av_align(&a, &v, 0.0), Err(Error::Contract(_))));
    assert!(av_align(&a, &PeakTrain::new(vec![], 3.0).unwrap(), 0.1).is_err());
}

proptest! {
    #[test]
    fn av_align_properties(
        a in proptest::collection::btree_set(0u32..300, 0..8),
        v in proptest::collection::btree_set(0u32..300, 0..8),
        shift in 0u32..50,
    ) {
        let ta: Vec<f64> = a.iter().map(|&x| x as f64 / 100.0).collect();
        let tv: Vec<f64> = v.iter().map(|&x| x as f64 / 100.0).collect();
        let s = av_align(&train(&ta), &train(&tv), 0.1).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(s, av_align(&train(&tv), &train(&ta), 0.1).unwrap());
        let sh = |t: &[f64]| t.iter().map(|x| x + shift as f64 / 100.0).collect::<Vec<_>>();
        let shifted = av_align(&train(&sh(&ta)), &train(&sh(&tv)), 0.1).unwrap();
        prop_assert_eq!(s, shifted);
    }

    #[test]
    fn inception_score_in_range(rows in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 3), 1..10)) {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| { let s: f64 = r.iter().sum(); r.iter().map(|x| x / s).collect() }).collect();
        let is = inception_score(&ClassPosterior::from_rows(&rows).unwrap()).unwrap();
        prop_assert!(is >= 1.0 - 1e-12 && is <= 3.0 + 1e-9);
    }

    #[test]
    fn frechet_symmetric_nonnegative(seed in 0u64..1000) {
        let a = gaussian_set(20, 3, &[0.0; 3], seed);
        let b = gaussian_set(25, 3, &[0.3, 0.0, -0.2], seed + 7);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-9 * (1.0 + ab));
    }
}

fn write_set(dir: &std::path::Path, n: usize, seed: u64) {
    let cfg = ModelConfig::default();
    for p in toy_pairs(&cfg, n, seed) {
        let mut c = Container::tensors();
        c.push("latent", &p.latent);
        c.push("video", &p.video);
        c.save(dir.join(format!("{}.ysnd", p.id))).unwrap();
    }
}

#[test]
fn self_evaluation_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    write_set(dir.path(), 6, 3);
    let cfg = EvalConfig::default();
    let r = evaluate_set(dir.path(), dir.path(), &cfg).unwrap();
    assert_eq!(r.fad, 0.0);
    assert_eq!(r.fd, 0.0);
    assert_eq!(r.kl_sigmoid, 0.0);
    assert!((r.clip - 100.0).abs() < 1e-9);
    assert_eq!(r.av, 1.0);
    assert!(r.is > 0.0);
    assert_eq!(r.pairs, 6);
    let csv = r.to_csv();
    assert!(csv.starts_with("FAD,FD,KL-sigmoid,IS,CLIP,AV\n0.000000,0.000000,0.000000,"));
    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(json["AV"], 1.0);
    assert_eq!(r, evaluate_set(dir.path(), dir.path(), &cfg).unwrap());
}

#[test]
fn missing_pairs_are_listed() {
    let gen = tempfile::tempdir().unwrap();
    let refd = tempfile::tempdir().unwrap();
    write_set(gen.path(), 4, 3);
    write_set(refd.path(), 4, 3);
    std::fs::remove_file(gen.path().join("toy000.ysnd")).unwrap();
    let r = evaluate_set(gen.path(), refd.path(), &EvalConfig::default()).unwrap();
    assert_eq!(r.pairs, 3);
    assert_eq!(r.missing, vec!["toy000".to_string()]);
    assert!(r.to_csv().contains("# missing: toy000"));
}

#[test]
fn different_sets_score_worse() {
    let gen = tempfile::tempdir().unwrap();
    let refd = tempfile::tempdir().unwrap();
    write_set(refd.path(), 6, 3);
    // same ids, different content
    write_set(gen.path(), 6, 99);
    let r = evaluate_set(gen.path(), refd.path(), &EvalConfig::default()).unwrap();
    assert!(r.fad > 0.0 && r.fd > 0.0 && r.kl_sigmoid > 0.0);
    assert!(r.av < 1.0);
}
