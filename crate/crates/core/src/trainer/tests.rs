use super::*;
use crate::datagen::{generate_title, GenConfig, Split, TitleDataset, TitleStyle};

fn title(name: &str, n_train: usize, n_unl: usize, seed: u64) -> TitleDataset {
    let cfg = GenConfig {
        width: 16,
        height: 16,
        max_objects: 3,
        min_object_size: 4,
        max_object_size: 8,
        ..GenConfig::default()
    };
    let mut style = TitleStyle::preset(name).unwrap();
    style.title_id = name.to_string();
    generate_title(&style, &cfg, n_train, 2, 2, n_unl, seed).unwrap()
}

fn tiny_cfg(csl: bool, ssl: bool) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::tiny(),
        epochs: 2,
        warmup_epochs: 1,
        per_step_batch: 2,
        accumulation_steps: 2,
        base_lr: 1e-3,
        csl_enabled: csl,
        ssl_enabled: ssl,
        ..TrainConfig::default()
    }
}

fn tiny_data(cfg: &TrainConfig) -> TrainData {
    let down = title("parkland", 8, 4, 1);
    let co = [title("tower", 4, 4, 2), title("canyon", 4, 4, 3)];
    TrainData::build(&down, &co, cfg).unwrap()
}

fn target(cfg: &TrainConfig) -> TargetEncoder {
    TargetEncoder::random(&cfg.model.target, 0.02, 7).unwrap()
}

/// Largest elementwise difference relative to the largest magnitude.
fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.data.iter().chain(&b.data).map(|x| x.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert_eq!(TrainConfig::default().effective_batch(), 100);
    for bad in [
        TrainConfig { alpha: -0.1, ..TrainConfig::default() },
        TrainConfig { warmup_epochs: 31, ..TrainConfig::default() },
        TrainConfig { labeled_fraction: 0.0, ..TrainConfig::default() },
        TrainConfig { masking_ratio: 0.0, ..TrainConfig::default() },
        TrainConfig { per_step_batch: 0, ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
    }
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = tiny_cfg(true, false);
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), cfg);
    let partial: TrainConfig = toml::from_str("alpha = 0.1\nssl_enabled = false").unwrap();
    assert_eq!(partial.alpha, 0.1);
    assert_eq!(partial.epochs, 30);
}

#[test]
fn accumulation_matches_one_large_batch() {
    let cfg = tiny_cfg(true, true);
    let data = tiny_data(&cfg);
    let model = CftModel::new(cfg.model.clone(), 3).unwrap();
    let t = target(&cfg);
    let unl = |i: usize| {
        let patches = data.unlabeled[i].patches(&cfg.model).unwrap();
        UnlabeledInput {
            latents: t.encode_patches(patches.clone()).unwrap(),
            patches,
        }
    };
    let big = MicroBatch {
        downstream: labeled_inputs(&data.downstream, &[0, 1, 2, 3], &cfg.model).unwrap(),
        cotitle: labeled_inputs(&data.cotitle, &[0, 1, 2, 3], &cfg.model).unwrap(),
        unlabeled: (0..4).map(unl).collect(),
    };
    let sg = build_step_graph(&model, &cfg, &big, None, &mut StepRngs::new(0)).unwrap();
    let whole = sg.graph.backward(sg.root, &model.params);

    let mut acc = Gradients::zeros_like(&model.params);
    for half in [0..2, 2..4] {
        let mb = MicroBatch {
            downstream: big.downstream[half.clone()].to_vec(),
            cotitle: big.cotitle[half.clone()].to_vec(),
            unlabeled: big.unlabeled[half.clone()].to_vec(),
        };
        let plan = StepPlan {
            downstream: sg.plan.downstream[half.clone()].to_vec(),
            cotitle: sg.plan.cotitle[half.clone()].to_vec(),
            masks: sg.plan.masks[half].to_vec(),
        };
        let part = build_step_graph(&model, &cfg, &mb, Some(&plan), &mut StepRngs::new(0)).unwrap();
        acc.accumulate(&part.graph.backward(part.root, &model.params));
    }
    acc.scale(0.5);
    for (a, b) in whole.grads.iter().zip(&acc.grads) {
        assert!(max_rel(a, b) < 1e-6);
    }

    let mut p1 = model.params.clone();
    let mut p2 = model.params.clone();
    AdamW::new(&p1, AdamWConfig::default()).step(&mut p1, &whole, 1e-3);
    AdamW::new(&p2, AdamWConfig::default()).step(&mut p2, &acc, 1e-3);
    for ((_, _, a), (_, _, b)) in p1.iter().zip(p2.iter()) {
        assert!(max_rel(a, b) < 1e-6);
    }
}

#[test]
fn replayed_plan_reproduces_the_loss() {
    let cfg = tiny_cfg(true, true);
    let data = tiny_data(&cfg);
    let model = CftModel::new(cfg.model.clone(), 1).unwrap();
    let t = target(&cfg);
    let patches = data.unlabeled[0].patches(&cfg.model).unwrap();
    let mb = MicroBatch {
        downstream: labeled_inputs(&data.downstream, &[0, 1], &cfg.model).unwrap(),
        cotitle: labeled_inputs(&data.cotitle, &[2], &cfg.model).unwrap(),
        unlabeled: vec![UnlabeledInput {
            latents: t.encode_patches(patches.clone()).unwrap(),
            patches,
        }],
    };
    let a = build_step_graph(&model, &cfg, &mb, None, &mut StepRngs::new(4)).unwrap();
    let b = build_step_graph(&model, &cfg, &mb, Some(&a.plan), &mut StepRngs::new(99)).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.plan, b.plan);
    assert_eq!(a.plan.masks[0].len(), 12);
    let l = &a.losses;
    assert_eq!(l.l_co_sup, l.l_od_downstream + cfg.alpha * l.l_od_cotitle);
    assert_eq!(l.l_cft, l.l_co_sup + cfg.beta * l.mse_ssl);
}

#[test]
fn zero_weights_collapse_exactly() {
    let cfg = TrainConfig {
        alpha: 0.0,
        beta: 0.0,
        ..tiny_cfg(true, true)
    };
    let data = tiny_data(&cfg);
    let model = CftModel::new(cfg.model.clone(), 1).unwrap();
    let t = target(&cfg);
    let patches = data.unlabeled[1].patches(&cfg.model).unwrap();
    let mb = MicroBatch {
        downstream: labeled_inputs(&data.downstream, &[0, 1], &cfg.model).unwrap(),
        cotitle: labeled_inputs(&data.cotitle, &[0, 1], &cfg.model).unwrap(),
        unlabeled: vec![UnlabeledInput {
            latents: t.encode_patches(patches.clone()).unwrap(),
            patches,
        }],
    };
    let l = build_step_graph(&model, &cfg, &mb, None, &mut StepRngs::new(0)).unwrap().losses;
    assert!(l.l_od_cotitle > 0.0 && l.mse_ssl > 0.0);
    assert_eq!(l.l_co_sup, l.l_od_downstream);
    assert_eq!(l.l_cft, l.l_co_sup);
}

#[test]
fn disabled_toggles_match_plain_supervised_training() {
    let cfg = TrainConfig {
        alpha: 0.3,
        beta: 0.5,
        ..tiny_cfg(false, false)
    };
    let data = tiny_data(&tiny_cfg(true, true));
    let cft = train(&cfg, &data, None).unwrap();
    let sup = train_supervised(&cfg, &data).unwrap();
    assert_eq!(cft.log.steps.len(), sup.log.steps.len());
    for (a, b) in cft.log.steps.iter().zip(&sup.log.steps) {
        assert_eq!(a.losses.l_od_downstream.to_bits(), b.losses.l_od_downstream.to_bits());
        assert_eq!(a.lr.to_bits(), b.lr.to_bits());
    }
    for ((_, _, a), (_, _, b)) in cft.last.params.iter().zip(sup.last.params.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn ssl_off_skips_target_and_decoder_work() {
    let full = tiny_cfg(true, true);
    let data = tiny_data(&full);
    let t = target(&full);
    let on = train(&full, &data, Some(&t)).unwrap().log.summary;
    let off = train(&tiny_cfg(true, false), &data, Some(&t)).unwrap().log.summary;
    assert!(on.op_counts["target_encoder_forward"] > 0);
    assert!(on.op_counts["mask_decoder_forward"] > 0);
    assert_eq!(off.op_counts["target_encoder_forward"], 0);
    assert_eq!(off.op_counts["mask_decoder_forward"], 0);
    assert!(!off.op_counts.contains_key("squared_error"));
    assert!(on.op_counts["squared_error"] > 0);
    assert_eq!(on.target_checksum_before, on.target_checksum_after);
}

#[test]
fn training_is_seed_deterministic_and_logged() {
    let cfg = tiny_cfg(true, true);
    let data = tiny_data(&cfg);
    let t = target(&cfg);
    let a = train(&cfg, &data, Some(&t)).unwrap();
    let b = train(&cfg, &data, Some(&t)).unwrap();
    assert_eq!(a.log.without_timing(), b.log.without_timing());
    for ((_, _, x), (_, _, y)) in a.last.params.iter().zip(b.last.params.iter()) {
        assert_eq!(x, y);
    }
    // 8 images, 2 per micro-batch, 2 micro-batches per update
    assert_eq!(a.log.summary.total_steps, 4);
    assert_eq!(a.log.summary.warmup_steps, 2);
    assert!(a.log.steps.iter().all(|s| s.micro_batches == 2));
    assert!(a.log.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
    assert_eq!(a.log.epochs.len(), 2);
    assert_eq!(a.log.steps[0].lr, 0.0);

    let dir = tempfile::tempdir().unwrap();
    save_outcome(&a, dir.path()).unwrap();
    let back = TrainLog::read_jsonl(&dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(back, a.log);
    let (best, _) = CftModel::load(&dir.path().join("best")).unwrap();
    assert_eq!(best.params, a.best.params);

    let other = train(&TrainConfig { seed: 1, ..cfg }, &data, Some(&t)).unwrap();
    assert_ne!(other.log.without_timing(), a.log.without_timing());
}

#[test]
fn required_inputs_are_checked() {
    let cfg = tiny_cfg(true, true);
    let data = tiny_data(&cfg);
    assert!(matches!(train(&cfg, &data, None), Err(TrainError::Config(_))));
    let mut empty = data.clone();
    empty.cotitle.clear();
    assert!(matches!(train(&cfg, &empty, Some(&target(&cfg))), Err(TrainError::EmptyStream("co-title"))));
    let wrong = TrainConfig {
        model: ModelConfig::default(),
        ..cfg.clone()
    };
    assert!(matches!(train(&wrong, &data, None), Err(TrainError::Config(_))));
}

#[test]
fn divergence_guard_rejects_non_finite_values() {
    let store = CftModel::new(ModelConfig::tiny(), 0).unwrap().params;
    let grads = Gradients::zeros_like(&store);
    let ok = LossBreakdown::default();
    assert!(check_finite(0, &ok, &grads).is_ok());
    let nan = LossBreakdown {
        l_cft: f64::NAN,
        ..LossBreakdown::default()
    };
    assert!(matches!(check_finite(3, &nan, &grads), Err(TrainError::Divergence { step: 3, .. })));
    let mut bad = grads.clone();
    bad.grads[0].data[0] = f64::INFINITY;
    assert!(matches!(check_finite(0, &ok, &bad), Err(TrainError::Divergence { .. })));
}

#[test]
fn half_labels_halve_the_downstream_stream() {
    let down = title("parkland", 9, 2, 1);
    let cfg = TrainConfig {
        labeled_fraction: 0.5,
        ..tiny_cfg(false, false)
    };
    let data = TrainData::build(&down, &[], &cfg).unwrap();
    assert_eq!(data.downstream.len(), 5);
    assert_eq!(data.validation.len(), down.split(Split::Validation).len());
}

#[test]
fn pretraining_reduces_reconstruction_error_and_keeps_layout() {
    let cfg = tiny_cfg(true, true);
    let data = tiny_data(&cfg);
    let pcfg = PretrainConfig {
        epochs: 6,
        batch: 4,
        base_lr: 3e-3,
        ..PretrainConfig::default()
    };
    let (enc, log) = pretrain_target(&cfg.model.target, &pcfg, &data.unlabeled).unwrap();
    let first = log.losses[..3].iter().sum::<f64>();
    let last = log.losses[log.losses.len() - 3..].iter().sum::<f64>();
    assert!(last < first, "{first} -> {last}");
    let random = TargetEncoder::random(&cfg.model.target, 0.02, 0).unwrap();
    assert_eq!(enc.params.len(), random.params.len());
    assert_ne!(enc.checksum(), random.checksum());
    let (again, _) = pretrain_target(&cfg.model.target, &pcfg, &data.unlabeled).unwrap();
    assert_eq!(again.checksum(), enc.checksum());
}
