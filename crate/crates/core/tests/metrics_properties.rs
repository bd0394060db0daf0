use std::path::PathBuf;

use asymgan_core::backends::{Backend, BackendKind};
use asymgan_core::metrics::{
    evaluate_folder, frechet_distance, kid, psnr, ssim, ActivationStats, MetricReport, Pairing,
};
use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

// Independent float64 torch + scipy evaluation of the same folders.
const TOY_FID: f64 = 4.607_176_126_631_598;
const TOY_KID: f64 = 1.347_339_818_123_37;

#[test]
fn stub_fid_on_toy_folders_matches_golden() {
    let backend = Backend::load(BackendKind::StubFeature, None).unwrap();
    let r = evaluate_folder(&fixture("toy_a"), &fixture("toy_b"), &backend, &Pairing::Paired).unwrap();
    // Rank-deficient covariances (5 samples, 32 features) limit agreement.
    assert!((r.fid - TOY_FID).abs() < 1e-6 * TOY_FID, "{}", r.fid);
    assert!((r.kid - TOY_KID).abs() < 1e-9 * TOY_KID, "{}", r.kid);
    assert_eq!((r.n_generated, r.n_reference, r.n_pairs), (5, 5, 5));
    assert!(r.backend_id.starts_with("stub_feature@"));
    assert_eq!(r.to_text().parse::<MetricReport>().unwrap(), r);
}

#[test]
fn self_evaluation() {
    let backend = Backend::load(BackendKind::StubFeature, None).unwrap();
    let r = evaluate_folder(&fixture("toy_a"), &fixture("toy_a"), &backend, &Pairing::Paired).unwrap();
    assert!(r.fid.abs() < 1e-6, "{}", r.fid);
    assert_eq!(r.psnr_mean, f64::INFINITY);
    assert_eq!(r.ssim_mean, 1.0);
}

#[test]
fn paired_mode_without_matches_fails() {
    let dir = tempfile::tempdir().unwrap();
    for (i, name) in ["other_0.png", "other_1.png"].iter().enumerate() {
        RgbImage::from_pixel(16, 16, Rgb([i as u8 * 40, 10, 10])).save(dir.path().join(name)).unwrap();
    }
    let backend = Backend::load(BackendKind::StubFeature, None).unwrap();
    assert!(evaluate_folder(dir.path(), &fixture("toy_a"), &backend, &Pairing::Paired).is_err());
}

fn random_stats(d: usize, seed: u64) -> ActivationStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    let a = DMatrix::from_fn(d, d + 2, |_, _| n.sample(&mut rng));
    ActivationStats {
        mean: DVector::from_fn(d, |_, _| n.sample(&mut rng)),
        covariance: &a * a.transpose() / (d + 2) as f64,
        n_samples: d + 3,
    }
}

fn brute_mmd(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let d = a[0].len() as f64;
    let k = |u: &Vec<f64>, v: &Vec<f64>| {
        (u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>() / d + 1.0).powi(3)
    };
    let (m, n) = (a.len() as f64, b.len() as f64);
    let mut xx = 0.0;
    for (i, u) in a.iter().enumerate() {
        for (j, v) in a.iter().enumerate() {
            if i != j {
                xx += k(u, v);
            }
        }
    }
    let mut yy = 0.0;
    for (i, u) in b.iter().enumerate() {
        for (j, v) in b.iter().enumerate() {
            if i != j {
                yy += k(u, v);
            }
        }
    }
    let xy: f64 = a.iter().flat_map(|u| b.iter().map(move |v| k(u, v))).sum();
    xx / (m * (m - 1.0)) + yy / (n * (n - 1.0)) - 2.0 * xy / (m * n)
}

fn vec_set(d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), 2..=20)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frechet_symmetric_and_zero_on_self(d in 1usize..6, s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (random_stats(d, s1), random_stats(d, s2));
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        let scale = 1.0 + a.covariance.trace() + b.covariance.trace();
        prop_assert!((ab - ba).abs() < 1e-9 * scale, "{} vs {}", ab, ba);
        prop_assert!(ab > -1e-9 * scale);
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9 * scale);
    }

    #[test]
    fn kid_matches_brute_force((a, b) in (1usize..=4).prop_flat_map(|d| (vec_set(d), vec_set(d)))) {
        let got = kid(&a, &b).unwrap();
        let want = brute_mmd(&a, &b);
        prop_assert!((got - want).abs() < 1e-9 * (1.0 + want.abs()), "{} vs {}", got, want);
    }

    #[test]
    fn psnr_ssim_constant_closed_forms(p in 0u8..=255, q in 0u8..=255) {
        let a = RgbImage::from_pixel(12, 12, Rgb([p, p, p]));
        let b = RgbImage::from_pixel(12, 12, Rgb([q, q, q]));
        let (pf, qf) = (p as f64, q as f64);
        let c1 = (0.01f64 * 255.0).powi(2);
        let want_ssim = (2.0 * pf * qf + c1) / (pf * pf + qf * qf + c1);
        prop_assert!((ssim(&a, &b).unwrap() - want_ssim).abs() < 1e-9);
        let got = psnr(&a, &b).unwrap();
        if p == q {
            prop_assert_eq!(got, f64::INFINITY);
        } else {
            let want = 10.0 * (255.0f64 * 255.0 / (pf - qf).powi(2)).log10();
            prop_assert!((got - want).abs() < 1e-9);
        }
    }
}

#[test]
fn fid_shrinks_with_sample_count() {
    // Two disjoint draws from one 3-D Gaussian; the estimator's bias decays with n.
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut draw = |k: usize| -> Vec<Vec<f64>> {
        (0..k)
            .map(|_| vec![n.sample(&mut rng), 2.0 * n.sample(&mut rng), 0.5 + n.sample(&mut rng)])
            .collect()
    };
    let fid_at = |k: usize, draw: &mut dyn FnMut(usize) -> Vec<Vec<f64>>| {
        let reps = 5;
        (0..reps)
            .map(|_| {
                let a = ActivationStats::from_features(&draw(k)).unwrap();
                let b = ActivationStats::from_features(&draw(k)).unwrap();
                frechet_distance(&a, &b).unwrap()
            })
            .sum::<f64>()
            / reps as f64
    };
    let f10 = fid_at(10, &mut draw);
    let f100 = fid_at(100, &mut draw);
    let f1000 = fid_at(1000, &mut draw);
    assert!(f10 > f100 && f100 > f1000, "{f10} {f100} {f1000}");
}
