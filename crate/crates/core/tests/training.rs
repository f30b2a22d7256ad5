//! Behaviour of the two training stages on small synthetic data.

mod common;

use std::sync::OnceLock;

use vqlight::grad::ParamId;
use vqlight::model::Stage;
use vqlight::objectives::LossWeights;
use vqlight::pipeline::data::synthetic_pairs;
use vqlight::pipeline::experiment::pretrain_checkpoint;
use vqlight::pipeline::train::load_params;
use vqlight::pipeline::{enhance_image, model_from_checkpoint, Checkpoint, Config, StepLog, TrainData, Trainer};
use vqlight::{Image, Model};

/// Toy network on 32x32 crops with a batch of two.
fn small() -> Config {
    Config {
        crop: 32,
        batch: 2,
        pretrain_iters: 100,
        finetune_iters: 100,
        ..Config::toy()
    }
}

fn images() -> (Vec<Image>, Vec<Image>) {
    let d = synthetic_pairs(4, 32, 32, 0);
    (d.low, d.high)
}

fn pretrained() -> &'static Checkpoint {
    static CKPT: OnceLock<Checkpoint> = OnceLock::new();
    CKPT.get_or_init(|| {
        let mut t = Trainer::pretrain(small(), images().1).unwrap();
        t.run(100, None).unwrap();
        t.checkpoint()
    })
}

fn finetuner(config: Config) -> Trainer {
    let (low, high) = images();
    Trainer::finetune(config, low, high, pretrained()).unwrap()
}

fn bits(model: &Model<f32>, ids: &[ParamId]) -> Vec<Vec<u32>> {
    ids.iter()
        .map(|&id| model.store.get(id).data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn pretraining_halves_the_smoothed_vq_loss() {
    let data = synthetic_pairs(8, 32, 32, 0);
    let cfg = Config {
        pretrain_iters: 500,
        ..small()
    };
    let mut t = Trainer::pretrain(cfg, data.high).unwrap();
    let (logs, _) = t.run(500, None).unwrap();
    let vq: Vec<f64> = logs.iter().map(|l| l.losses["vq"]).collect();
    assert!(vq.iter().all(|v| v.is_finite()));
    let head = vq[..25].iter().sum::<f64>() / 25.0;
    let tail = vq[vq.len() - 25..].iter().sum::<f64>() / 25.0;
    assert!(tail <= 0.5 * head, "smoothed vq loss {head:.4} -> {tail:.4}");
}

#[test]
fn codebook_stays_bitwise_frozen_while_fine_tuning() {
    let mut t = finetuner(small());
    let ids = t.model.ids_with_prefixes(&["codebook"]);
    assert!(!ids.is_empty());
    let before = bits(&t.model, &ids);
    t.run(100, None).unwrap();
    assert_eq!(bits(&t.model, &ids), before);
    assert!(!t.model.generator_ids(Stage::Finetune).iter().any(|id| ids.contains(id)));
}

#[test]
fn identical_seeds_give_identical_loss_traces() {
    let trace = || {
        let mut t = Trainer::pretrain(small(), images().1).unwrap();
        let (mut logs, _) = t.run(5, None).unwrap();
        let mut f = finetuner(small());
        logs.extend(f.run(5, None).unwrap().0);
        logs
    };
    assert_eq!(trace(), trace());
}

#[test]
fn every_report_satisfies_the_weighted_sum() {
    let mut t = finetuner(small());
    let w = t.model.config.weights;
    let (logs, _) = t.run(8, None).unwrap();
    for l in &logs {
        let v = |k: &str| l.losses[k];
        let want = w.combine(v("pix"), v("cp"), v("per"), v("adv"), v("pci"), v("fci_t"));
        assert!((v("total") - want).abs() <= 1e-5 * want.abs().max(1.0), "{l:?}");
        assert!(l.losses.values().all(|x| x.is_finite()));
        assert!(l.kappa.is_some_and(|k| (0.05..=0.95).contains(&k)));
    }
    assert_eq!(w, LossWeights::default());
}

#[test]
fn every_learnable_parameter_moves_within_ten_steps() {
    let mut t = finetuner(small());
    let mut ids = t.model.generator_ids(Stage::Finetune);
    ids.extend(t.model.discriminator_ids());
    let before = bits(&t.model, &ids);
    t.run(10, None).unwrap();
    let after = bits(&t.model, &ids);
    let dead: Vec<&str> = ids
        .iter()
        .zip(before.iter().zip(&after))
        .filter(|(_, (b, a))| b == a)
        .map(|(&id, _)| t.model.store.name(id))
        .collect();
    assert!(dead.is_empty(), "parameters without gradient: {dead:?}");
}

#[test]
fn fine_tuning_maps_pretrained_names_and_initializes_the_rest() {
    // Poison every non-pretraining tensor in the file; fine-tuning must not read them.
    let mut ckpt = pretrained().clone();
    for (name, t) in ckpt.params.iter_mut() {
        if !Stage::Pretrain.prefixes().iter().any(|p| name.starts_with(p)) {
            *t = t.map(|_| 123.0);
        }
    }
    let (low, high) = images();
    let t = Trainer::finetune(small(), low, high, &ckpt).unwrap();
    let fresh = Model::<f32>::new(&small().model(), small().seed).unwrap();
    for id in t.model.store.ids() {
        let name = t.model.store.name(id);
        let got = t.model.store.get(id).data();
        if Stage::Pretrain.prefixes().iter().any(|p| name.starts_with(p)) {
            assert_eq!(got, ckpt.param(name).unwrap().data(), "{name} copied from pretraining");
        } else {
            let init = fresh.store.get(fresh.store.id(name).unwrap()).data();
            assert_eq!(got, init, "{name} starts from its initializer");
        }
    }
    // A checkpoint lacking a required name is refused.
    let mut partial = ckpt.clone();
    partial.params.retain(|(n, _)| !n.starts_with("decoder"));
    let mut model = Model::<f32>::new(&small().model(), 0).unwrap();
    assert_eq!(
        load_params(&mut model, &partial, Stage::Pretrain.prefixes())
            .unwrap_err()
            .exit_code(),
        2
    );
}

fn forward(model: &Model<f32>) -> Vec<u32> {
    let img = synthetic_pairs(1, 24, 40, 77).low.remove(0);
    enhance_image(model, &img)
        .unwrap()
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = finetuner(small());
    t.run(3, None).unwrap();
    let path = t.save(dir.path()).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let orig = t.checkpoint();
    assert_eq!(
        (back.stage, back.iteration, &back.config),
        (orig.stage, orig.iteration, &orig.config)
    );
    assert_eq!(back.rng, orig.rng);
    assert_eq!(back.codebook_usage, orig.codebook_usage);
    for ((n1, a), (n2, b)) in orig.params.iter().zip(&back.params) {
        assert_eq!(n1, n2);
        assert_eq!(a.data(), b.data());
    }
    assert_eq!(back.optimizers.len(), 2);
    for ((n1, a), (n2, b)) in orig.optimizers.iter().zip(&back.optimizers) {
        assert_eq!((n1, a.step, a.moments.len()), (n2, b.step, b.moments.len()));
        for ((p, m, v), (q, m2, v2)) in a.moments.iter().zip(&b.moments) {
            assert_eq!((p, m.data(), v.data()), (q, m2.data(), v2.data()));
        }
    }
    assert_eq!(forward(&model_from_checkpoint(&back).unwrap()), forward(&t.model));
}

#[test]
fn resumed_training_continues_the_same_trajectory() {
    let (low, high) = images();
    let mut a = finetuner(small());
    a.run(3, None).unwrap();
    let ckpt = a.checkpoint();
    let next: Vec<StepLog> = a.run(3, None).unwrap().0;
    let mut b = Trainer::resume(&ckpt, TrainData::Pairs { low, high }).unwrap();
    assert_eq!(b.iteration, 3);
    assert_eq!(b.run(3, None).unwrap().0, next);
}

#[test]
fn training_log_is_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = finetuner(Config {
        checkpoint_every: 2,
        ..small()
    });
    let (logs, last) = t.run(5, Some(dir.path())).unwrap();
    let text = std::fs::read_to_string(dir.path().join("finetune_log.jsonl")).unwrap();
    let parsed: Vec<StepLog> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, logs);
    for (i, l) in parsed.iter().enumerate() {
        assert_eq!(l.iteration, i as u64 + 1);
        assert!(l.kappa.is_some() && l.usage_entropy >= 0.0);
    }
    let raw: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["iteration", "stage", "losses", "kappa", "usage_entropy"] {
        assert!(raw.get(key).is_some(), "log line lacks {key}");
    }
    assert_eq!(last.unwrap(), dir.path().join("finetune-00000005.ckpt"));
    for it in [2, 4, 5] {
        assert!(dir.path().join(format!("finetune-{it:08}.ckpt")).exists());
    }
    assert!(dir.path().join("finetune-latest.ckpt").exists());
}

#[test]
fn ground_truth_as_input_drives_the_pixel_loss_down() {
    // Toy scale with a converged pretrain; a 500-step pretrain leaves the
    // decoder too far from the data to fit within 500 fine-tuning steps.
    let high = synthetic_pairs(8, 64, 64, 0).high;
    let cfg = Config {
        finetune_iters: 500,
        ..Config::toy()
    };
    let ckpt = pretrain_checkpoint(&cfg, &high, 2000).unwrap();
    let mut t = Trainer::finetune(cfg, high.clone(), high, &ckpt).unwrap();
    let (logs, _) = t.run(500, None).unwrap();
    let tail = logs[logs.len() - 10..].iter().map(|l| l.losses["pix"]).sum::<f64>() / 10.0;
    assert!(tail < 0.02, "pixel loss {tail:.4} after 500 steps");
}
