mod common;

use common::{build, randn};
use vqlight::codebook::{codebook_match_loss, nearest_code, vq_loss, Codebook};
use vqlight::grad::{Ctx, ParamStore, Tape, Tensor};

fn codebook_with(codes: &[f64], k: usize, d: usize) -> (ParamStore<f64>, Codebook) {
    let (mut store, cb) = build(0, |b| Codebook::new(b, k, d));
    store.set(cb.codes, Tensor::from_f64([k, d], codes));
    (store, cb)
}

/// One-position `1 x D x 1 x 1` map.
fn point(v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64([1, v.len(), 1, 1], v)
}

#[test]
fn nearest_by_inspection_exact_and_tie() {
    let (store, cb) = codebook_with(&[0.0, 0.0, 1.0, 1.0], 2, 2);
    let codes = store.get(cb.codes);
    let q = cb.quantize(codes, &point(&[0.2, 0.1])).unwrap();
    assert_eq!(q.indices, vec![0]);
    assert_eq!(q.z_q.to_f64_vec(), vec![0.0, 0.0]);

    let q = cb.quantize(codes, &point(&[1.0, 1.0])).unwrap();
    assert_eq!(q.indices, vec![1]);
    assert_eq!(q.z_q.to_f64_vec(), vec![1.0, 1.0]);

    let q = cb.quantize(codes, &point(&[0.5, 0.5])).unwrap();
    assert_eq!(q.indices, vec![0], "ties go to the lowest index");
}

fn brute_nearest(codes: &[f64], d: usize, v: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, c) in codes.chunks_exact(d).enumerate() {
        let dist: f64 = c.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
        if dist < best.0 {
            best = (dist, k);
        }
    }
    best.1
}

#[test]
fn quantize_matches_brute_force() {
    for (k, d, seed) in [(2, 1, 1), (7, 3, 2), (64, 8, 3), (33, 5, 4)] {
        let codes = randn(&[k, d], seed);
        let (store, cb) = codebook_with(&codes.to_f64_vec(), k, d);
        let z = randn(&[2, d, 3, 4], seed + 100);
        let q = cb.quantize(store.get(cb.codes), &z).unwrap();
        let rows = vqlight::codebook::to_rows(&z);
        for (r, v) in rows.to_f64_vec().chunks_exact(d).enumerate() {
            assert_eq!(
                q.indices[r],
                brute_nearest(&codes.to_f64_vec(), d, v),
                "K={k} D={d} row {r}"
            );
        }
    }
}

#[test]
fn usage_counts_grow_by_positions_per_call() {
    let (store, cb) = build(1, |b| Codebook::new(b, 8, 4));
    let z = randn(&[2, 4, 3, 5], 9);
    cb.quantize(store.get(cb.codes), &z).unwrap();
    assert_eq!(cb.usage_counts().iter().sum::<u64>(), 30);
    cb.quantize(store.get(cb.codes), &z).unwrap();
    assert_eq!(cb.usage_counts().iter().sum::<u64>(), 60);
    assert!(cb.usage_entropy() >= 0.0);
    cb.reset_usage();
    assert_eq!(cb.usage_entropy(), 0.0);
}

#[test]
fn quantization_error_never_grows_when_codes_are_added() {
    let all = randn(&[32, 3], 5).to_f64_vec();
    let z = randn(&[1, 3, 4, 4], 6);
    let mut last = f64::INFINITY;
    for k in [2, 4, 8, 16, 32] {
        let (store, cb) = codebook_with(&all[..k * 3], k, 3);
        let q = cb.quantize(store.get(cb.codes), &z).unwrap();
        let err: f64 = z
            .to_f64_vec()
            .iter()
            .zip(q.z_q.to_f64_vec())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        assert!(err <= last + 1e-12, "K={k}: {err} > {last}");
        last = err;
    }
}

#[test]
fn vq_loss_goldens() {
    let tape = Tape::<f64>::new();
    let t = |v: &[f64]| tape.constant(Tensor::from_f64([v.len()], v));
    let img = t(&[0.3, 0.7]);
    let zero = vq_loss(&t(&[0.5, 0.5]), &t(&[0.5, 0.5]), &img, &img, 0.25).unwrap();
    assert_eq!(zero.scalar(), 0.0);
    // recon = target, z_hat = (1,0), z_q = (0,0): 1/2 + 0.25 * 1/2.
    let l = vq_loss(&t(&[1.0, 0.0]), &t(&[0.0, 0.0]), &img, &img, 0.25).unwrap();
    assert!((l.scalar() - 0.625).abs() < 1e-12);
    // Doubling beta adds exactly one more commitment term.
    let l2 = vq_loss(&t(&[1.0, 0.0]), &t(&[0.0, 0.0]), &img, &img, 0.5).unwrap();
    assert!((l2.scalar() - l.scalar() - 0.125).abs() < 1e-12);
}

#[test]
fn codebook_match_goldens_and_stop_gradient() {
    let tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(codebook_match_loss(&a, &a, 0.25).unwrap().scalar(), 0.0);
    let b = tape.leaf(Tensor::from_f64([2, 2], &[0.0, 1.0, 2.0, 3.0]));
    let l = codebook_match_loss(&a, &b, 0.25).unwrap();
    assert!((l.scalar() - 1.25).abs() < 1e-12);
    // d/da of mean((a - sg(b))^2) = 2 (a - b) / 4 = 0.5; the beta term is blocked.
    let g = tape.backward(&l);
    assert!(g.get(&a).unwrap().to_f64_vec().iter().all(|v| (v - 0.5).abs() < 1e-12));
    assert!(g
        .get(&b)
        .unwrap()
        .to_f64_vec()
        .iter()
        .all(|v| (v + 0.125).abs() < 1e-12));
}

#[test]
fn straight_through_copies_the_gradient_at_the_code() {
    let (store, cb) = build(3, |b| Codebook::new(b, 16, 4));
    let cx = Ctx::new(&store, true);
    let z = cx.leaf(randn(&[1, 4, 2, 2], 4));
    let (z_st, z_q, _) = cb.quantize_var(&cx, &z).unwrap();
    assert_eq!(z_st.value().to_f64_vec(), z_q.value().to_f64_vec());
    let w = z.constant_like(randn(&[1, 4, 2, 2], 5));
    let loss = z_st.mul(&w).sum_all();
    let g = cx.backward(&loss);
    assert_eq!(g.get(&z).unwrap().to_f64_vec(), w.value().to_f64_vec());
}

#[test]
fn nearest_code_resolves_close_codes_at_large_magnitude() {
    // The expanded distance is accumulated in f64, so f32 codes 1 apart at 1e4 stay separable.
    let codes = [1.0e4f32, 1.0e4 + 1.0];
    assert_eq!(nearest_code(&codes, 1, &[1.0e4 + 0.75]), 1);
    assert_eq!(nearest_code(&codes, 1, &[1.0e4 + 0.25]), 0);
}
