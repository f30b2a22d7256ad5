//! Invariants over random inputs.

mod common;

use common::{build, random_image};
use proptest::prelude::*;
use vqlight::backbone::{BackboneConfig, Decoder, Encoder};
use vqlight::codebook::{nearest_code, to_rows, Codebook};
use vqlight::fci::{fci_loss, sensitivity_difference, Fci, FciSettings};
use vqlight::grad::{bilinear_sample, Ctx, Tape, Tensor};
use vqlight::hdrm::OFFSET_CHANNELS;
use vqlight::image::{fft_decompose, fft_reconstruct, rgb_to_ycrcb_px, to_tensor, ycrcb_to_rgb_px, Image};
use vqlight::metrics::{psnr, ssim};
use vqlight::objectives::{total_loss, LossTerms, LossWeights};
use vqlight::pci::{brightness_intervene, color_intervene, contrastive_loss, frequency_fuse_var, pci_loss};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig::with_cases(n)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    common::randn(shape, seed)
}

fn max_err(a: &Image, b: &Image) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() as f64)
        .fold(0.0, f64::max)
}

fn dft(x: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    let ang = -2.0 * std::f64::consts::PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                    re += x[y * w + xx] * ang.cos();
                    im += x[y * w + xx] * ang.sin();
                }
            }
            out.push((re, im));
        }
    }
    out
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn colorspace_round_trip(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let back = ycrcb_to_rgb_px(rgb_to_ycrcb_px([r, g, b]));
        for (x, y) in back.iter().zip([r, g, b]) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn fft_round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let img = random_image(h, w, seed);
        let back = fft_reconstruct(&fft_decompose(&img).unwrap()).unwrap();
        prop_assert!(max_err(&img, &back) <= 1e-5);
    }

    #[test]
    fn fft_amplitude_matches_the_dft_and_ignores_circular_shifts(
        h in 1usize..7, w in 1usize..7, dy in 0usize..7, dx in 0usize..7, seed in any::<u64>()
    ) {
        let img = random_image(h, w, seed);
        let shifted = Image::from_fn(h, w, |y, x| img.pixel((y + dy) % h, (x + dx) % w));
        let a = fft_decompose(&img).unwrap();
        let b = fft_decompose(&shifted).unwrap();
        let plane: Vec<f64> = (0..h * w).map(|i| img.data()[i * 3] as f64).collect();
        for (k, (re, im)) in dft(&plane, h, w).into_iter().enumerate() {
            prop_assert!((a.amplitude[k * 3] - re.hypot(im)).abs() < 1e-4);
        }
        for (x, y) in a.amplitude.iter().zip(&b.amplitude) {
            prop_assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn psnr_is_symmetric_and_ssim_of_an_image_with_itself_is_one(
        h in 11usize..24, w in 11usize..24, s1 in any::<u64>(), s2 in any::<u64>()
    ) {
        let (a, b) = (random_image(h, w, s1), random_image(h, w, s2));
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn brightness_changes_only_luma_and_color_only_chroma(
        theta_b in 0.5f64..1.8, cr in 0.5f64..1.5, cb in 0.5f64..1.5, seed in any::<u64>()
    ) {
        // Dark enough that no channel reaches a clamp.
        let img = random_image(4, 4, seed).map(|v| 0.3 + 0.05 * v);
        let yb = brightness_intervene(&img, theta_b).unwrap();
        let yc = color_intervene(&img, [cr, cb]).unwrap();
        let px = |p: &[f32]| rgb_to_ycrcb_px([p[0] as f64, p[1] as f64, p[2] as f64]);
        for ((o, b), c) in img.data().chunks_exact(3).zip(yb.data().chunks_exact(3)).zip(yc.data().chunks_exact(3)) {
            let (o, b, c) = (px(o), px(b), px(c));
            prop_assert!((b[0] - theta_b * o[0]).abs() < 1e-5);
            prop_assert!((b[1] - o[1]).abs() < 1e-5 && (b[2] - o[2]).abs() < 1e-5);
            prop_assert!((c[0] - o[0]).abs() < 1e-5);
        }
    }
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn fusion_keeps_the_brightness_phase(alpha in 0.0f64..=1.0, seed in any::<u64>()) {
        let (h, w) = (6, 6);
        let tape = Tape::<f64>::new();
        let ib = tape.constant(to_tensor(&[random_image(h, w, seed)]).unwrap());
        let ic = tape.constant(to_tensor(&[random_image(h, w, seed ^ 1)]).unwrap());
        let out = frequency_fuse_var(&ib, &ic, &tape.constant(Tensor::from_f64([1], &[alpha])));
        for c in 0..3 {
            let plane = |t: &Tensor<f64>| t.to_f64_vec()[c * h * w..(c + 1) * h * w].to_vec();
            for ((br, bi), (fr, fi)) in dft(&plane(ib.value()), h, w).into_iter().zip(dft(&plane(out.value()), h, w)) {
                let (mb, mf) = (br.hypot(bi), fr.hypot(fi));
                if mb > 1e-6 && mf > 1e-6 {
                    prop_assert!((br / mb - fr / mf).hypot(bi / mb - fi / mf) <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn pci_loss_ignores_anchor_scale(scale in 0.05f64..20.0, seed in any::<u64>()) {
        let tape = Tape::<f64>::new();
        let f = |k: u64| tape.constant(randn(&[2, 3, 2, 2], seed.wrapping_add(k)));
        let (a, p, n1, n2, n3) = (f(0), f(1), f(2), f(3), f(4));
        let l1 = pci_loss(&a, &p, [&n1, &n2, &n3], 10.0).scalar();
        let l2 = pci_loss(&a.mul_scalar(scale), &p, [&n1, &n2, &n3], 10.0).scalar();
        prop_assert!((l1 - l2).abs() < 1e-6);
    }

    #[test]
    fn contrastive_loss_falls_with_the_positive_and_rises_with_a_negative(
        lo in -1.0f64..1.0, gap in 1e-3f64..1.0, other in -1.0f64..1.0, tau in 0.5f64..20.0
    ) {
        let hi = (lo + gap).min(1.0);
        prop_assume!(hi > lo);
        let tape = Tape::<f64>::new();
        let s = |v: f64| tape.constant(Tensor::from_f64([1], &[v]));
        let pos = |v| contrastive_loss(&s(v), &[&s(other)], tau).scalar();
        let neg = |v| contrastive_loss(&s(other), &[&s(v)], tau).scalar();
        prop_assert!(pos(hi) < pos(lo));
        prop_assert!(neg(hi) > neg(lo));
    }

    #[test]
    fn gating_is_binary_and_silent_outside_the_mask(seed in any::<u64>()) {
        let (store, fci) = build(seed, |b| Fci::new(&mut b.pp("fci"), 3, FciSettings::default()));
        let cx = Ctx::new(&store, true);
        let [a, b, c, f] = [0u64, 1, 2, 3].map(|k| cx.input(randn(&[1, 3, 4, 4], seed.wrapping_add(k))));
        let g = fci.gate(&cx, &a, &b, &c, &f);
        let (m, neg) = (g.mask.value().to_f64_vec(), g.negative.value().to_f64_vec());
        for (mv, nv) in m.iter().zip(&neg) {
            prop_assert!(*mv == 0.0 || *mv == 1.0);
            prop_assert_eq!((1.0 - mv) * nv, 0.0);
        }
        let sd = sensitivity_difference(&a, &b, &c).value().to_f64_vec();
        prop_assert!(sd.iter().all(|&v| (0.0..1.0 + 1e-6).contains(&v)));
    }

    #[test]
    fn fci_loss_falls_as_the_negative_moves_away(t in 0.0f64..1.0, seed in any::<u64>()) {
        // The negative rotates from the anchor towards an orthogonal map.
        let tape = Tape::<f64>::new();
        let a = randn(&[1, 2, 2, 2], seed).to_f64_vec();
        let mut o = randn(&[1, 2, 2, 2], seed ^ 7).to_f64_vec();
        let dot: f64 = a.iter().zip(&o).map(|(x, y)| x * y).sum::<f64>() / a.iter().map(|x| x * x).sum::<f64>();
        o.iter_mut().zip(&a).for_each(|(v, x)| *v -= dot * x);
        let neg = |t: f64| {
            let v: Vec<f64> = a.iter().zip(&o).map(|(x, y)| (1.0 - t) * x + t * y).collect();
            tape.constant(Tensor::from_f64([1, 2, 2, 2], &v))
        };
        let at = tape.constant(Tensor::from_f64([1, 2, 2, 2], &a));
        let near = fci_loss(&at, &at, &neg(t * 0.5), 10.0).scalar();
        let far = fci_loss(&at, &at, &neg(0.5 + t * 0.5), 10.0).scalar();
        prop_assert!(far <= near);
    }

    #[test]
    fn quantization_picks_the_nearest_code(k in 2usize..20, d in 1usize..6, seed in any::<u64>()) {
        let (mut store, cb) = build(seed, |b| Codebook::new(b, k, d));
        let codes = randn(&[k, d], seed);
        store.set(cb.codes, codes.clone());
        let z = randn(&[2, d, 2, 3], seed ^ 3);
        let q = cb.quantize(store.get(cb.codes), &z).unwrap();
        prop_assert_eq!(cb.usage_counts().iter().sum::<u64>(), 12);
        let cv = codes.to_f64_vec();
        let dist = |c: usize, v: &[f64]| cv[c * d..(c + 1) * d].iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        for (r, v) in to_rows(&z).to_f64_vec().chunks_exact(d).enumerate() {
            let best = (0..k).map(|c| dist(c, v)).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(dist(q.indices[r], v), best);
            prop_assert_eq!(q.indices[r], nearest_code(&cv, d, v));
        }
    }

    #[test]
    fn adding_codes_never_raises_the_quantization_error(k in 2usize..16, extra in 1usize..16, seed in any::<u64>()) {
        let all = randn(&[k + extra, 3], seed).to_f64_vec();
        let z = randn(&[1, 3, 3, 3], seed ^ 5);
        let err = |n: usize| {
            let (mut store, cb) = build(0, |b| Codebook::new(b, n, 3));
            store.set(cb.codes, Tensor::from_f64([n, 3], &all[..n * 3]));
            let q = cb.quantize(store.get(cb.codes), &z).unwrap();
            z.to_f64_vec().iter().zip(q.z_q.to_f64_vec()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        prop_assert!(err(k + extra) <= err(k) + 1e-12);
    }

    #[test]
    fn zero_offsets_reduce_deformable_to_plain_convolution(
        c in 1usize..4, h in 1usize..7, w in 1usize..7, seed in any::<u64>()
    ) {
        let tape = Tape::<f64>::new();
        let x = tape.constant(randn(&[1, c, h, w], seed));
        let wt = tape.constant(randn(&[2, c, 3, 3], seed ^ 1));
        let off = tape.constant(Tensor::zeros(vec![1, OFFSET_CHANNELS, h, w]));
        let d = x.deform_conv2d(&off, &wt, None, 1, 1);
        let p = x.conv2d(&wt, None, 1, 1);
        prop_assert!(d.value().max_abs_diff(p.value()) <= 1e-9);
    }

    #[test]
    fn deformable_convolution_is_linear_in_its_input(seed in any::<u64>(), a in -3.0f64..3.0) {
        let tape = Tape::<f64>::new();
        let off = tape.constant(randn(&[1, OFFSET_CHANNELS, 5, 5], seed).scale(1.5));
        let wt = tape.constant(randn(&[2, 2, 3, 3], seed ^ 1));
        let (x, y) = (randn(&[1, 2, 5, 5], seed ^ 2), randn(&[1, 2, 5, 5], seed ^ 3));
        let f = |t: &Tensor<f64>| tape.constant(t.clone()).deform_conv2d(&off, &wt, None, 1, 1).value().clone();
        let lhs = f(&x.scale(a).add(&y));
        let rhs = f(&x).scale(a).add(&f(&y));
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-9);
    }

    #[test]
    fn bilinear_weights_sum_to_one_inside_the_plane(y in 0.0f64..4.0, x in 0.0f64..5.0) {
        let ones = vec![1.0f64; 5 * 6];
        prop_assert!((bilinear_sample(&ones, 5, 6, y, x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_a_non_negative_weighted_sum(
        v in prop::array::uniform6(0.0f64..10.0),
        w in prop::array::uniform5(0.0f64..2.0),
        k in 0usize..6,
        s in 0.0f64..5.0,
    ) {
        let weights = LossWeights { pix: w[0], cp: w[1], per: w[2], adv: w[3], causal: w[4] };
        let tape = Tape::<f64>::new();
        let at = |v: [f64; 6]| {
            let c = |x: f64| tape.constant(Tensor::from_f64([1], &[x]));
            let terms = LossTerms { pix: c(v[0]), cp: c(v[1]), per: c(v[2]), adv: c(v[3]), pci: c(v[4]), fci_t: c(v[5]) };
            total_loss(&terms, &weights).unwrap().1.total
        };
        let base = at(v);
        prop_assert!(base >= 0.0);
        let slope = [w[0], w[1], w[2], w[3], w[4], w[4]][k];
        let mut scaled = v;
        scaled[k] *= s;
        let want = base + slope * v[k] * (s - 1.0);
        prop_assert!((at(scaled) - want).abs() <= 1e-9 * want.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(cases(12))]

    #[test]
    fn backbone_round_trips_every_divisible_size(kh in 1usize..5, kw in 1usize..5, n in 1usize..3, seed in any::<u64>()) {
        let cfg = BackboneConfig {
            num_levels: 2,
            base_channels: 2,
            channel_mult: vec![1, 2],
            enc_blocks: 1,
            dec_blocks: 1,
            latent_dim: 3,
            norm_groups: 1,
        };
        let (store, (enc, dec)) = build(seed, |b| {
            (Encoder::new(&mut b.pp("encoder"), &cfg), Decoder::new(&mut b.pp("decoder"), &cfg))
        });
        let (h, w) = (4 * kh, 4 * kw);
        prop_assert!(cfg.check_input(h, w).is_ok());
        let cx = Ctx::new(&store, false);
        let z = enc.forward(&cx, &cx.input(randn(&[n, 3, h, w], seed)));
        prop_assert_eq!(z.shape(), &[n, 3, kh, kw][..]);
        let out = dec.forward(&cx, &z, None);
        prop_assert_eq!(out.shape(), &[n, 3, h, w][..]);
    }
}
