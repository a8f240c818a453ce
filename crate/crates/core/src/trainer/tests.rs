use super::*;
use crate::data::GenConfig;
use crate::model::Variant;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        height: 32,
        width: 32,
        n0: 16,
        stage_sizes: vec![8, 4],
        blocks_per_stage: 1,
        d: 16,
        heads: 2,
        mlp_ratio: 2,
        head_channels: 8,
        ..ModelConfig::default()
    }
}

fn tiny_data() -> Dataset {
    Dataset::generate(&GenConfig {
        scenes: 2,
        frames_per_scene: 2,
        height: 32,
        width: 32,
        seed: 1,
        ..GenConfig::default()
    })
    .unwrap()
}

fn tiny_train(steps: usize) -> TrainConfig {
    TrainConfig {
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        batch_size: 2,
        steps,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_keeps_loss_flat() {
    let mut cfg = tiny_train(3);
    cfg.adam.lr = 0.0;
    cfg.batch_size = 4;
    let (state, curve) = train(&tiny_model(), &cfg, &tiny_data()).unwrap();
    let l: Vec<f64> = curve.points.iter().map(|p| p.1).collect();
    assert_eq!(l.len(), 3);
    assert!(l.iter().all(|&x| x == l[0]));
    assert_eq!(state.model.params, Model::<f32>::init(tiny_model(), 3).unwrap().params);
}

#[test]
fn training_is_deterministic_and_descends() {
    let data = tiny_data();
    let (a, ca) = train(&tiny_model(), &tiny_train(6), &data).unwrap();
    let (b, cb) = train(&tiny_model(), &tiny_train(6), &data).unwrap();
    let bits = |c: &LossCurve| c.points.iter().map(|p| p.1.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ca), bits(&cb));
    assert_eq!(a, b);
    assert_ne!(a.model.params, Model::<f32>::init(tiny_model(), 3).unwrap().params);
    assert_eq!(a.step(), 6);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = tiny_data();
    let cfg = tiny_train(4);
    let (full, curve) = train(&tiny_model(), &cfg, &data).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let half = TrainConfig {
        checkpoint_every: 2,
        ..cfg.clone()
    };
    let trainer = Trainer::new(half.clone(), &tiny_model(), &data).unwrap();
    let mut state = TrainState::new(Model::init(tiny_model(), cfg.seed).unwrap());
    let out = TrainOutput {
        dir: Some(dir.path().to_path_buf()),
    };
    let first = TrainConfig { steps: 2, ..half.clone() };
    Trainer::new(first, &tiny_model(), &data).unwrap().run(&mut state, &out, |_, _| {}).unwrap();

    let ck = Checkpoint::load(&checkpoint_path(dir.path(), 2)).unwrap();
    let (mut resumed, saved_cfg) = TrainState::from_checkpoint(&ck).unwrap();
    assert_eq!(resumed, state);
    assert_eq!(saved_cfg.unwrap().adam, cfg.adam);
    let rest = trainer.run(&mut resumed, &TrainOutput::default(), |_, _| {}).unwrap();
    assert_eq!(rest.points, curve.points[2..]);
    assert_eq!(resumed, full);
}

#[test]
fn plain_model_checkpoint_starts_fresh() {
    let m = Model::<f32>::init(tiny_model(), 0).unwrap();
    let (s, cfg) = TrainState::from_checkpoint(&m.checkpoint()).unwrap();
    assert!(cfg.is_none());
    assert_eq!(s.step(), 0);
}

#[test]
fn batches_cycle_through_epochs() {
    let data = tiny_data();
    let t = Trainer::new(tiny_train(1), &tiny_model(), &data).unwrap();
    let mut seen: Vec<usize> = t.batch(1).into_iter().chain(t.batch(2)).collect();
    seen.sort();
    assert_eq!(seen, vec![0, 1, 2, 3]);
    assert_eq!(t.batch(5), t.batch(5));
}

#[test]
fn rejects_mismatched_dataset() {
    let mut m = tiny_model();
    m.height = 40;
    m.width = 40;
    assert!(matches!(Trainer::new(tiny_train(1), &m, &tiny_data()), Err(Error::Shape(_))));
    assert!(Trainer::new(tiny_train(1), &tiny_model(), &Dataset::default()).is_err());
}

#[test]
fn train_config_kv_round_trip() {
    let c = TrainConfig {
        clip_norm: None,
        augment: true,
        ..tiny_train(7)
    };
    assert_eq!(TrainConfig::default().with_kv(&c.to_kv()).unwrap(), c);
    let mut bad = KvMap::new();
    bad.insert("train.momentum".into(), "1".into());
    assert!(TrainConfig::default().with_kv(&bad).is_err());
    bad.clear();
    bad.insert("train.beta1".into(), "1.0".into());
    assert!(TrainConfig::default().with_kv(&bad).is_err());
}

#[test]
fn augmented_training_runs() {
    let cfg = TrainConfig {
        augment: true,
        ..tiny_train(2)
    };
    let (_, curve) = train(&tiny_model(), &cfg, &tiny_data()).unwrap();
    assert!(curve.points.iter().all(|p| p.1.is_finite()));
}

#[test]
fn oracle_predictions_score_perfectly() {
    let data = tiny_data();
    let preds: Vec<Predicted> = data.samples.iter().map(Predicted::oracle).collect();
    let r = evaluate(&data, &preds, &EvalProtocols::default()).unwrap();
    assert_eq!(r.rows.len(), data.len());
    for c in ["abs_rel", "rmse", "log10", "silog", "seg_abs_rel", "eps_a", "eps_c", "chamfer_pred_gt", "chamfer_gt_pred"] {
        assert_eq!(r.mean_of(c), Some(0.0), "{c}");
    }
    for c in ["delta1", "delta2", "delta3", "seg_delta1", "miou", "fscore"] {
        assert_eq!(r.mean_of(c), Some(1.0), "{c}");
    }
    assert!(r.retrieval.is_none());
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), 1 + data.len() + 1);
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn model_evaluation_covers_both_variants() {
    let data = tiny_data();
    for variant in [Variant::Full, Variant::NoUnpool] {
        let m = Model::<f32>::init(ModelConfig { variant, ..tiny_model() }, 0).unwrap();
        let r = evaluate_model(&m, &data, &EvalProtocols::default()).unwrap();
        assert_eq!(r.rows.len(), 4);
        let ret = r.retrieval.unwrap();
        assert_eq!(ret.queries, 4);
        // an untrained head predicts the constant prior, so Canny finds nothing
        assert!(r.rows.iter().all(|row| row.get("eps_a").is_none() && !row.notes.is_empty()));
        assert!(r.mean_of("abs_rel").unwrap() > 0.0);
        assert_eq!(r.to_kv()["samples"], "4");
    }
}
