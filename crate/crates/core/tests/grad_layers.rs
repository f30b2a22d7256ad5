use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqlight::grad::nn::{group_count, BatchNorm2d, Conv2d, GroupNorm};
use vqlight::grad::{Ctx, ParamKind, ParamStore, Tensor};

#[test]
fn group_norm_output_is_standardized_per_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let gn = GroupNorm::new(&mut store.builder(&mut rng).pp("gn"), 4, 2);
    let x = Tensor::randn(vec![2, 4, 3, 3], 2.0, &mut rng).map(|v| v + 5.0);
    let cx = Ctx::new(&store, true);
    let y = gn.forward(&cx, &cx.input(x));
    let d = y.value().data();
    for chunk in d.chunks(2 * 9) {
        let mean: f64 = chunk.iter().sum::<f64>() / chunk.len() as f64;
        let var: f64 = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / chunk.len() as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn group_count_divides_channels() {
    assert_eq!(group_count(32, 32), 32);
    assert_eq!(group_count(24, 32), 24);
    assert_eq!(group_count(48, 32), 24);
    assert_eq!(group_count(3, 32), 3);
}

#[test]
fn batch_norm_training_updates_running_stats() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm2d::new(&mut store.builder(&mut rng).pp("bn"), 2);
    let x = Tensor::from_f64([2, 2, 1, 1], &[1.0, 10.0, 3.0, 20.0]);
    let updates = {
        let cx = Ctx::new(&store, true);
        let y = bn.forward(&cx, &cx.input(x.clone()));
        assert!((y.value().data()[0] + 1.0).abs() < 1e-3);
        cx.take_buffer_updates()
    };
    assert_eq!(updates.len(), 2);
    for (id, v) in updates {
        store.set(id, v);
    }
    let rm = store.get(bn.running_mean).data().to_vec();
    assert!((rm[0] - 0.2).abs() < 1e-12 && (rm[1] - 1.5).abs() < 1e-12);
    assert_eq!(store.kind(bn.running_mean), ParamKind::Buffer);
    let cx = Ctx::new(&store, false);
    let y = bn.forward(&cx, &cx.input(x));
    assert!(cx.take_buffer_updates().is_empty());
    assert!(y.value().all_finite());
}

#[test]
fn conv_layer_shapes_and_zero_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f32>::new();
    let (down, zero) = {
        let mut b = store.builder(&mut rng);
        (
            Conv2d::new(&mut b.pp("down"), 3, 8, 4, 2),
            Conv2d::zeros(&mut b.pp("zero"), 3, 5, 3),
        )
    };
    let cx = Ctx::new(&store, false);
    let x = cx.input(Tensor::ones(vec![1, 3, 8, 8]));
    assert_eq!(down.forward(&cx, &x).shape(), &[1, 8, 4, 4]);
    let z = zero.forward(&cx, &x);
    assert_eq!(z.shape(), &[1, 5, 8, 8]);
    assert!(z.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn shared_parameter_binds_once_per_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let conv = Conv2d::new(&mut store.builder(&mut rng).pp("c"), 1, 1, 1, 1);
    let cx = Ctx::new(&store, true);
    let a = conv.forward(&cx, &cx.input(Tensor::full(vec![1, 1, 1, 1], 2.0)));
    let b = conv.forward(&cx, &cx.input(Tensor::full(vec![1, 1, 1, 1], 3.0)));
    let g = cx.backward(&a.add(&b).sum_all());
    let grads = cx.param_grads(&g);
    let wg = grads.iter().find(|(id, _)| *id == conv.weight).unwrap();
    assert!((wg.1.item() - 5.0).abs() < 1e-12);
}
