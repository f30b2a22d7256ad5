//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqlight::grad::{ParamBuilder, ParamStore, Tensor};
use vqlight::image::{ColorSpace, Image};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

pub fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    let data = (0..h * w * 3).map(|_| r.random::<f32>()).collect();
    Image::new(h, w, ColorSpace::Rgb, data).unwrap()
}

/// Build modules into a fresh `f64` store.
pub fn build<M>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, f64>) -> M) -> (ParamStore<f64>, M) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let m = {
        let mut b = store.builder(&mut r);
        f(&mut b)
    };
    (store, m)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
