mod common;

use common::{build, randn};
use vqlight::fci::{ate_loss, fci_loss, sensitivity_difference, threshold_mask, Fci, FciSettings, SENSITIVITY_EPS};
use vqlight::grad::gradcheck::{check, check_with_params, CheckOptions};
use vqlight::grad::{Ctx, ParamId, Tape, Tensor, Var};
use vqlight::objectives::FeatureExtractor;
use vqlight::pci::contrastive_loss;

const C: usize = 4;

fn opts() -> CheckOptions {
    CheckOptions {
        tolerance: 1e-3,
        ..CheckOptions::default()
    }
}

#[test]
fn sensitivity_difference_goldens() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(randn(&[1, 2, 2, 2], 1));
    assert!(sensitivity_difference(&a, &a, &a)
        .value()
        .to_f64_vec()
        .iter()
        .all(|&v| v == 0.0));

    let mut bumped = a.value().to_f64_vec();
    bumped[5] += 1.0;
    let cb = tape.constant(Tensor::from_f64([1, 2, 2, 2], &bumped));
    let s = sensitivity_difference(&a, &cb, &a).value().to_f64_vec();
    for (i, v) in s.iter().enumerate() {
        let want = if i == 5 { 1.0 / (1.0 + SENSITIVITY_EPS) } else { 0.0 };
        assert!((v - want).abs() < 1e-12, "{i}: {v}");
    }
}

#[test]
fn sensitivity_difference_matches_elementwise_oracle() {
    let tape = Tape::<f64>::new();
    let (a, b, c) = (
        randn(&[2, 2, 2, 2], 2),
        randn(&[2, 2, 2, 2], 3),
        randn(&[2, 2, 2, 2], 4),
    );
    let got = sensitivity_difference(
        &tape.constant(a.clone()),
        &tape.constant(b.clone()),
        &tape.constant(c.clone()),
    );
    let (a, b, c) = (a.to_f64_vec(), b.to_f64_vec(), c.to_f64_vec());
    for n in 0..2 {
        let d: Vec<f64> = (n * 8..n * 8 + 8)
            .map(|i| (a[i] - b[i]).abs() + (a[i] - c[i]).abs())
            .collect();
        let m = d.iter().cloned().fold(0.0, f64::max);
        for (k, v) in d.iter().enumerate() {
            let want = v / (m + SENSITIVITY_EPS);
            assert!((got.value().to_f64_vec()[n * 8 + k] - want).abs() < 1e-7);
        }
        assert!(got.value().to_f64_vec()[n * 8..n * 8 + 8]
            .iter()
            .all(|&v| v < 1.0 + 1e-6));
    }
}

#[test]
fn threshold_mask_goldens() {
    let tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::from_f64([1, 1, 2, 2], &[0.2, 0.6, 0.5, 0.1]));
    let mask = |k: f64| {
        let kappa = tape.constant(Tensor::from_f64([1], &[k]));
        threshold_mask(&s, &kappa, 10.0).value().to_f64_vec()
    };
    assert_eq!(mask(0.6), vec![0.0; 4]);
    assert_eq!(mask(0.05), vec![1.0; 4]);
    assert_eq!(
        mask(0.5),
        vec![0.0, 1.0, 0.0, 0.0],
        "strictly greater than the threshold"
    );
}

#[test]
fn threshold_mask_backward_uses_the_sigmoid_slope() {
    let tape = Tape::<f64>::new();
    let s = tape.leaf(Tensor::from_f64([3], &[0.2, 0.55, 0.9]));
    let kappa = tape.leaf(Tensor::from_f64([1], &[0.5]));
    let m = threshold_mask(&s, &kappa, 10.0);
    let g = tape.backward(&m.sum_all());
    let slope = |v: f64| {
        let sig = 1.0 / (1.0 + (-10.0 * (v - 0.5)).exp());
        10.0 * sig * (1.0 - sig)
    };
    let gs = g.get(&s).unwrap().to_f64_vec();
    for (got, v) in gs.iter().zip([0.2, 0.55, 0.9]) {
        assert!((got - slope(v)).abs() < 1e-12);
    }
    let gk = g.get(&kappa).unwrap().item();
    assert!((gk + gs.iter().sum::<f64>()).abs() < 1e-12);
}

struct Toy {
    store: vqlight::grad::ParamStore<f64>,
    fci: Fci,
    extractor: FeatureExtractor,
}

fn toy(settings: FciSettings) -> Toy {
    let (mut store, fci) = build(7, |b| Fci::new(&mut b.pp("fci"), C, settings));
    let extractor = FeatureExtractor::new(&mut store, C, [4, 4, 4, 4], false);
    Toy { store, fci, extractor }
}

fn maps(seed: u64) -> [Tensor<f64>; 4] {
    [0, 1, 2, 3].map(|k| randn(&[2, C, 4, 4], seed + k))
}

#[test]
fn gate_produces_a_binary_mask_and_a_masked_negative() {
    let t = toy(FciSettings::default());
    let cx = Ctx::new(&t.store, true);
    let [a, b, c, f] = maps(10).map(|m| cx.input(m));
    let g = t.fci.gate(&cx, &a, &b, &c, &f);
    let (s, m, p, neg) = (
        g.s.value().to_f64_vec(),
        g.mask.value().to_f64_vec(),
        g.perturbation.value().to_f64_vec(),
        g.negative.value().to_f64_vec(),
    );
    let av = a.value().to_f64_vec();
    assert!(
        m.contains(&1.0) && m.contains(&0.0),
        "toy should mix masked and unmasked sites"
    );
    for i in 0..m.len() {
        assert!(m[i] == 0.0 || m[i] == 1.0);
        assert_eq!(m[i] == 1.0, s[i] > 0.5, "mask follows the strict threshold at {i}");
        assert_eq!(neg[i], av[i] * m[i] * p[i]);
        assert_eq!((1.0 - m[i]) * neg[i], 0.0);
    }
    assert_eq!(g.s.shape(), a.shape());
}

#[test]
fn learned_sensitivity_is_in_the_open_unit_interval() {
    let t = toy(FciSettings::default());
    let cx = Ctx::new(&t.store, true);
    let stacked = cx.input(randn(&[1, 4 * C, 4, 4], 3).map(|v| 5.0 * v));
    let s = t.fci.sensitivity_learned(&cx, &stacked);
    assert_eq!(s.shape(), &[1, C, 4, 4]);
    assert!(s.value().to_f64_vec().iter().all(|&v| v > 0.0 && v < 1.0));
}

fn ids(t: &Toy, prefix: &str) -> Vec<ParamId> {
    t.store.ids_with_prefix(prefix).collect()
}

#[test]
fn learned_sensitivity_gradient_matches_finite_differences() {
    let mut t = toy(FciSettings::default());
    let params = ids(&t, "fci.phi_s");
    let fci = t.fci.clone();
    let w = randn(&[1, C, 4, 4], 12);
    let r = check_with_params(
        &mut t.store,
        &params,
        &[randn(&[1, 4 * C, 4, 4], 11)],
        opts(),
        6,
        |cx, v| {
            fci.sensitivity_learned(cx, &v[0])
                .mul(&v[0].constant_like(w.clone()))
                .sum_all()
        },
    );
    assert!(r.passed(1e-3), "{r:?}");
}

#[test]
fn fci_loss_goldens() {
    let tape = Tape::<f64>::new();
    let s = |v: f64| tape.constant(Tensor::from_f64([1], &[v]));
    for tau in [0.5, 1.0, 10.0] {
        let l = contrastive_loss(&s(0.3), &[&s(0.3)], tau).scalar();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }
    let l = contrastive_loss(&s(1.0), &[&s(-1.0)], 1.0).scalar();
    assert!((l - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);
    assert!((l - 0.1269).abs() < 5e-5);

    // On feature maps: anchor = positive, orthogonal negative.
    let e = |i: usize| {
        let mut v = vec![0.0; 4];
        v[i] = 1.0;
        tape.constant(Tensor::from_f64([1, 1, 2, 2], &v))
    };
    let (a, n) = (e(0), e(1));
    assert!((fci_loss(&a, &a, &a, 3.0).scalar() - 2f64.ln()).abs() < 1e-12);
    let mut last = f64::INFINITY;
    for tau in [1.0, 5.0, 20.0, 80.0] {
        let v = fci_loss(&a, &a, &n, tau).scalar();
        assert!(v < last);
        last = v;
    }
    assert!(last < 1e-30);
}

#[test]
fn fci_loss_is_monotone_in_both_similarities() {
    let tape = Tape::<f64>::new();
    let s = |v: f64| tape.constant(Tensor::from_f64([1], &[v]));
    let mut last = f64::INFINITY;
    for k in 0..=20 {
        let v = contrastive_loss(&s(-1.0 + 0.1 * k as f64), &[&s(0.2)], 10.0).scalar();
        assert!(v < last);
        last = v;
    }
    let mut last = -1.0;
    for k in 0..=20 {
        let v = contrastive_loss(&s(0.2), &[&s(-1.0 + 0.1 * k as f64)], 10.0).scalar();
        assert!(v > last);
        last = v;
    }
}

#[test]
fn ate_loss_goldens() {
    let t = toy(FciSettings::default());
    let cx = Ctx::new(&t.store, true);
    let a = cx.input(randn(&[1, C, 4, 4], 1));
    assert_eq!(ate_loss(&cx, &t.extractor, &a, &a).scalar(), 0.0);
    for s in 0..5 {
        let b = cx.input(randn(&[1, C, 4, 4], 100 + s));
        assert!(ate_loss(&cx, &t.extractor, &a, &b).scalar() >= 0.0);
    }
}

#[test]
fn ate_loss_grows_with_the_perturbation_under_a_linear_extractor() {
    let mut store = vqlight::grad::ParamStore::<f64>::new();
    let ex = FeatureExtractor::new(&mut store, C, [4, 4, 4, 4], true);
    let cx = Ctx::new(&store, false);
    let a = randn(&[1, C, 4, 4], 5);
    let d = randn(&[1, C, 4, 4], 6);
    let mut last = -1.0;
    for scale in [0.25, 0.5, 1.0, 2.0, 4.0] {
        let neg = cx.input(a.add(&d.scale(scale)));
        let v = ate_loss(&cx, &ex, &cx.input(a.clone()), &neg).scalar();
        assert!(v >= last, "scale {scale}");
        if last > 0.0 {
            // Linear map, zero biases: doubling the perturbation doubles the loss.
            assert!((v / last - 2.0).abs() < 1e-9);
        }
        last = v;
    }
}

#[test]
fn fci_total_composition() {
    let t = toy(FciSettings::default());
    let cx = Ctx::new(&t.store, true);
    let a = cx.input(randn(&[2, C, 4, 4], 1));
    let (total, fci, ate) = t.fci.total(&a, &a, &a, 10.0, &t.extractor, &cx);
    assert!((fci.scalar() - 2f64.ln()).abs() < 1e-12);
    assert_eq!(ate.scalar(), 0.0);
    assert!((total.scalar() - 2f64.ln()).abs() < 1e-12);

    let neg = cx.input(randn(&[2, C, 4, 4], 2));
    let pos = cx.input(randn(&[2, C, 4, 4], 3));
    let (total, fci, ate) = t.fci.total(&a, &pos, &neg, 10.0, &t.extractor, &cx);
    assert!((total.scalar() - (fci.scalar() + 0.5 * ate.scalar())).abs() < 1e-12);

    let t0 = toy(FciSettings {
        lambda_ate: 0.0,
        ..FciSettings::default()
    });
    let cx0 = Ctx::new(&t0.store, true);
    let (a0, p0, n0) = (
        cx0.input(a.value().clone()),
        cx0.input(pos.value().clone()),
        cx0.input(neg.value().clone()),
    );
    let (total0, fci0, _) = t0.fci.total(&a0, &p0, &n0, 10.0, &t0.extractor, &cx0);
    assert_eq!(total0.scalar(), fci0.scalar());
    assert_eq!(total0.scalar(), fci_loss(&a0, &p0, &n0, 10.0).scalar());

    // 0.6931 + 0.5 * 0.2
    assert!((2f64.ln() + FciSettings::default().lambda_ate * 0.2 - 0.7931).abs() < 5e-5);
}

#[test]
fn every_gating_parameter_gets_a_finite_gradient() {
    let t = toy(FciSettings::default());
    let cx = Ctx::new(&t.store, true);
    let [a, b, c, f] = maps(30).map(|m| cx.leaf(m));
    let pos = cx.input(randn(&[2, C, 4, 4], 40));
    let g = t.fci.gate(&cx, &a, &b, &c, &f);
    let (total, _, _) = t.fci.total(&a, &pos, &g.negative, 10.0, &t.extractor, &cx);
    let grads = cx.backward(&total);
    let pg = cx.param_grads(&grads);
    for prefix in ["fci.phi_s", "fci.phi_p", "fci.kappa"] {
        let mut seen = false;
        for (id, gr) in &pg {
            if t.store.name(*id).starts_with(prefix) {
                seen = true;
                assert!(gr.all_finite(), "{}", t.store.name(*id));
            }
        }
        assert!(seen, "{prefix} received no gradient");
    }
    let nonzero = |p: &str| {
        pg.iter()
            .any(|(id, g)| t.store.name(*id).starts_with(p) && g.data().iter().any(|v| *v != 0.0))
    };
    assert!(nonzero("fci.phi_p") && nonzero("fci.kappa") && nonzero("fci.phi_s"));
}

#[test]
fn kappa_is_clamped_after_updates() {
    let mut t = toy(FciSettings::default());
    t.store.set(t.fci.kappa, Tensor::from_f64([1], &[1.7]));
    t.fci.clamp_kappa(&mut t.store);
    assert_eq!(t.fci.kappa_value(&t.store), 0.95);
    t.store.set(t.fci.kappa, Tensor::from_f64([1], &[-3.0]));
    t.fci.clamp_kappa(&mut t.store);
    assert_eq!(t.fci.kappa_value(&t.store), 0.05);
}

#[test]
fn fci_loss_gradient_matches_finite_differences() {
    let inputs: Vec<Tensor<f64>> = (0..3).map(|s| randn(&[2, 2, 2, 2], 50 + s)).collect();
    let r = check(&inputs, opts(), |v| fci_loss(&v[0], &v[1], &v[2], 10.0));
    assert!(r.passed(1e-3), "{r:?}");
}

#[test]
fn ate_gradient_matches_finite_differences() {
    let t = toy(FciSettings::default());
    let mut store = t.store;
    let ex = t.extractor;
    let inputs = vec![randn(&[1, C, 4, 4], 60), randn(&[1, C, 4, 4], 61)];
    let r = check_with_params(&mut store, &[], &inputs, opts(), 0, |cx, v: &[Var<f64>]| {
        ate_loss(cx, &ex, &v[0], &v[1])
    });
    assert!(r.passed(1e-3), "{r:?}");
}
