mod common;

use common::random_image;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vqlight::image::Image;
use vqlight::metrics::{
    dead_leaves, desk_model, fit_aggd, fit_desk_model, fit_ggd, mscn, psnr, ssim, NiqeFitOptions, NiqeModel,
    DESK_CORPUS, NIQE_FEATURES, PSNR_CAP,
};

fn noisy(img: &Image, sigma: f64, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).unwrap();
    let mut out = img.clone();
    if sigma > 0.0 {
        for v in out.data_mut() {
            *v = (*v as f64 + n.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

#[test]
fn psnr_goldens() {
    let a = Image::filled(8, 8, [0.3, 0.5, 0.7]);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    assert_eq!(PSNR_CAP, 99.0);
    let b = Image::filled(8, 8, [0.4, 0.6, 0.8]);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
    let (black, white) = (Image::filled(4, 4, [0.0; 3]), Image::filled(4, 4, [1.0; 3]));
    assert_eq!(psnr(&black, &white).unwrap(), 0.0);
    assert_eq!(psnr(&a, &Image::filled(8, 9, [0.0; 3])).unwrap_err().exit_code(), 3);
}

#[test]
fn psnr_is_symmetric_and_falls_with_noise() {
    let a = random_image(16, 16, 1);
    let b = random_image(16, 16, 2);
    assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    let mut last = f64::INFINITY;
    for amp in [0.01f32, 0.02, 0.05, 0.1, 0.2] {
        let p = psnr(&a, &a.map(|v| v + amp)).unwrap();
        assert!(p < last);
        last = p;
    }
}

#[test]
fn ssim_goldens() {
    let a = random_image(24, 20, 3);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    let half = Image::filled(16, 16, [0.5; 3]);
    assert_eq!(ssim(&half, &half).unwrap(), 1.0);
    // Zero variance: only the luminance term remains.
    let (x, y) = (Image::filled(16, 16, [0.2; 3]), Image::filled(16, 16, [0.6; 3]));
    let want = (2.0 * 0.2 * 0.6 + 1e-4) / (0.2f64 * 0.2 + 0.6 * 0.6 + 1e-4);
    let got = ssim(&x, &y).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    // 0.2401 / 0.4001 = 0.600100, which the hand-rounded 0.6002 approximates.
    assert!((got - 0.600_100).abs() < 1e-6);
    assert!((got - 0.6002).abs() < 1.5e-4);
    assert!(ssim(&Image::filled(10, 16, [0.0; 3]), &Image::filled(10, 16, [0.0; 3])).is_err());
}

#[test]
fn ssim_drops_below_one_for_distinct_images() {
    let a = random_image(32, 32, 4);
    let s = ssim(&a, &noisy(&a, 0.1, 5)).unwrap();
    assert!(s < 1.0 && s > -1.0);
    assert_eq!(s, ssim(&noisy(&a, 0.1, 5), &a).unwrap());
}

#[test]
fn ggd_fit_recovers_the_gaussian_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = Normal::new(0.0, 2.0).unwrap();
    let x: Vec<f64> = (0..20_000).map(|_| n.sample(&mut rng)).collect();
    let (shape, var) = fit_ggd(&x);
    assert!((shape - 2.0).abs() < 0.1, "shape {shape}");
    assert!((var - 4.0).abs() < 0.2, "variance {var}");
    let [shape, _, l, r] = fit_aggd(&x);
    assert!((shape - 2.0).abs() < 0.15 && (l - r).abs() < 0.1, "{shape} {l} {r}");
}

#[test]
fn mscn_of_a_constant_image_is_zero() {
    let (m, _) = mscn(&vec![100.0; 20 * 20], 20, 20);
    assert!(m.iter().all(|v| v.abs() < 1e-9));
}

fn small_model() -> NiqeModel {
    let opts = NiqeFitOptions {
        min_patches: 50,
        ..NiqeFitOptions::default()
    };
    NiqeModel::fit(&dead_leaves(24, 96, 11), opts).unwrap()
}

#[test]
fn niqe_is_non_negative_and_monotone_in_noise() {
    for model in [small_model(), desk_model()] {
        let img = dead_leaves(1, 128, 99).remove(0);
        let scores: Vec<f64> = [0.0, 0.05, 0.1, 0.2]
            .iter()
            .map(|&s| model.score(&noisy(&img, s, 12)).unwrap())
            .collect();
        assert!(scores.iter().all(|&s| s >= 0.0), "{scores:?}");
        assert!(scores.windows(2).all(|w| w[0] <= w[1]), "{scores:?}");
        assert!(scores[0] < scores[3]);
    }
}

#[test]
fn niqe_prefers_a_corpus_image_to_its_noisy_copy() {
    let (n, size, seed) = DESK_CORPUS;
    let pristine = dead_leaves(n.min(2), size, seed).remove(0);
    let m = desk_model();
    assert!(m.score(&pristine).unwrap() < m.score(&noisy(&pristine, 0.2, 13)).unwrap());
}

#[test]
fn niqe_fit_is_deterministic_and_matches_the_bundled_model() {
    let a = fit_desk_model().unwrap();
    let b = fit_desk_model().unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.mean), bits(&b.mean));
    assert_eq!(bits(&a.cov), bits(&b.cov));
    // The bundled file stores f32.
    let bundled = desk_model();
    let as_f32 = |v: &[f64]| v.iter().map(|&x| (x as f32).to_bits()).collect::<Vec<_>>();
    assert_eq!(as_f32(&a.mean), as_f32(&bundled.mean));
    assert_eq!(as_f32(&a.cov), as_f32(&bundled.cov));
    assert_eq!((a.patch_size, a.patches), (bundled.patch_size, bundled.patches));
    assert!(a.patches >= 500);
}

#[test]
fn niqe_covariance_is_symmetric() {
    let m = desk_model();
    let d = NIQE_FEATURES;
    assert_eq!(m.mean.len(), d);
    for i in 0..d {
        assert!(m.cov[i * d + i] >= 0.0);
        for j in 0..d {
            assert_eq!(m.cov[i * d + j], m.cov[j * d + i]);
        }
    }
}

#[test]
fn niqe_model_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.vqm");
    let m = small_model();
    m.save(&p).unwrap();
    let back = NiqeModel::load(&p).unwrap();
    assert_eq!(back.patch_size, m.patch_size);
    for (a, b) in back.mean.iter().zip(&m.mean) {
        assert_eq!(*a, *b as f32 as f64);
    }
}

#[test]
fn too_few_sharp_patches_is_a_data_error() {
    let e = NiqeModel::fit(&dead_leaves(1, 64, 1), NiqeFitOptions::default()).unwrap_err();
    assert_eq!(e.exit_code(), 3);
}
