use crossfusion::model::{Model, ModelConfig, IMAGE_BACKBONE_PREFIX, STAGE1_PREFIXES};
use crossfusion::scene_synth::{generate_range, SynthConfig};
use crossfusion::trainer::{train_stage1, train_stage2, AugmentConfig, TrainConfig};

fn fixed_batch_config(steps: usize) -> TrainConfig {
    TrainConfig {
        stage1_epochs: steps,
        stage2_epochs: steps,
        batch_size: 4,
        augment: AugmentConfig {
            enabled: false,
            ..AugmentConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn loss_on_a_fixed_batch_falls_over_fifty_steps() {
    let data = generate_range(&SynthConfig::default(), 0, 4).unwrap();
    let mut model = Model::new(&ModelConfig::default()).unwrap();
    let recs = train_stage1(&mut model, &data, &fixed_batch_config(50), &mut |_| {}).unwrap();
    assert_eq!(recs.len(), 50);
    let loss: Vec<f64> = recs.iter().map(|r| r.loss.total).collect();
    assert!(loss.iter().all(|l| l.is_finite()));
    let window = |i: usize| loss[i..i + 10].iter().sum::<f64>() / 10.0;
    for w in (0..40).step_by(10).collect::<Vec<_>>().windows(2) {
        assert!(window(w[1]) < window(w[0]), "10-step means not decreasing: {loss:?}");
    }
    assert!(loss[49] < 0.5 * loss[0], "{} -> {}", loss[0], loss[49]);
}

#[test]
fn fusion_stage_leaves_frozen_parameters_untouched() {
    let data = generate_range(&SynthConfig::default(), 0, 2).unwrap();
    let mut model = Model::new(&ModelConfig::default()).unwrap();
    let cfg = TrainConfig {
        batch_size: 2,
        max_steps: 2,
        ..TrainConfig::default()
    };
    train_stage1(&mut model, &data, &cfg, &mut |_| {}).unwrap();
    let before = model.store.clone();
    train_stage2(&mut model, &data, &cfg, &mut |_| {}).unwrap();
    let mut moved = 0;
    for id in model.store.ids() {
        let name = model.store.name(id);
        let frozen = STAGE1_PREFIXES.iter().any(|p| name.starts_with(p)) || name.starts_with(IMAGE_BACKBONE_PREFIX);
        let same = model.store.value(id) == before.value(id);
        if frozen {
            assert!(same, "{name} changed in the fusion stage");
        } else if !same {
            moved += 1;
        }
    }
    assert!(moved > 0);

    let mut thawed = Model::new(&ModelConfig::default()).unwrap();
    let cfg = TrainConfig {
        freeze_image_backbone: false,
        ..cfg
    };
    let before = thawed.store.clone();
    train_stage2(&mut thawed, &data, &cfg, &mut |_| {}).unwrap();
    assert!(thawed
        .store
        .ids()
        .filter(|&id| thawed.store.name(id).starts_with(IMAGE_BACKBONE_PREFIX))
        .any(|id| thawed.store.value(id) != before.value(id)));
}

#[test]
fn training_is_reproducible() {
    let data = generate_range(&SynthConfig::default(), 0, 3).unwrap();
    let cfg = TrainConfig {
        batch_size: 2,
        max_steps: 3,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = Model::new(&ModelConfig::default()).unwrap();
        let mut recs = train_stage1(&mut model, &data, &cfg, &mut |_| {}).unwrap();
        recs.extend(train_stage2(&mut model, &data, &cfg, &mut |_| {}).unwrap());
        (recs, model.store)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    let other = TrainConfig { seed: 1, ..cfg.clone() };
    let mut model = Model::new(&ModelConfig::default()).unwrap();
    let c = train_stage1(&mut model, &data, &other, &mut |_| {}).unwrap();
    assert_ne!(a[..c.len()], c[..]);
}
