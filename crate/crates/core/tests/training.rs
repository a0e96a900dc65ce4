use cellrefine::checkpoint::Checkpoint;
use cellrefine::datagen::{generate, GeneratorConfig};
use cellrefine::dataset::{DatasetBundle, Split};
use cellrefine::error::Error;
use cellrefine::losses::LossWeights;
use cellrefine::model::{ModelState, Stage};
use cellrefine::tokenizer::mask_tokens;
use cellrefine::training::{
    batch_objective, few_shot_subsample, fine_tune, init_model, post_pretrain, pretrain, trainable_filter, BatchItem,
    Corpus, HeadLoss, Objective, PrototypeSet, StageKind, StopReason, Task, TrainConfig, TrainMode,
};

fn bundle(cells: usize) -> DatasetBundle {
    generate(&GeneratorConfig {
        num_cells: cells,
        uniform: true,
        seed: 3,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

fn tiny(stage: StageKind) -> TrainConfig {
    let mut cfg = TrainConfig {
        stage,
        epoch_cap: 2,
        warmup_steps: 2,
        batch_size: 6,
        kl_samples: 2,
        prototype_len: 8,
        ..TrainConfig::default()
    };
    cfg.model.hidden_size = 8;
    cfg.model.num_heads = 2;
    cfg.model.max_len = 12;
    cfg.model.marker_max_len = 12;
    cfg.model.gmve_components = 2;
    cfg
}

fn pretrained(b: &DatasetBundle) -> ModelState {
    let cfg = tiny(StageKind::Pretrain);
    let s = init_model(&b.dataset, &cfg.model, 0).unwrap();
    pretrain(s, &b.dataset, &cfg).unwrap().state
}

fn changed(before: &ModelState, after: &ModelState) -> Vec<String> {
    before
        .params
        .iter()
        .filter(|(_, name, t)| after.params.by_name(name) != Some(*t))
        .map(|(_, name, _)| name.to_owned())
        .collect()
}

#[test]
fn one_epoch_record_on_eight_cells() {
    let b = bundle(40);
    let rows: Vec<usize> = b.dataset.indices(Split::Train)[..6]
        .iter()
        .chain(&b.dataset.indices(Split::Val)[..2])
        .copied()
        .collect();
    let data = b.dataset.subset(&rows);
    assert_eq!(data.num_cells(), 8);
    let mut cfg = tiny(StageKind::Pretrain);
    cfg.epoch_cap = 1;
    let s = init_model(&data, &cfg.model, 0).unwrap();
    let out = pretrain(s, &data, &cfg).unwrap();
    let r = &out.record;
    assert_eq!(r.epochs.len(), 1);
    assert_eq!(r.stopping_epoch, 1);
    assert_eq!(r.stop_reason, StopReason::EpochCap);
    assert_eq!(r.config_hash, cfg.hash());
    assert!(r.epochs[0].train.mlm.is_finite() && r.epochs[0].train.mlm > 0.0);
    assert_eq!(out.state.stage, Some(Stage::Pt));
}

#[test]
fn same_seed_gives_identical_parameters() {
    let b = bundle(40);
    assert_eq!(pretrained(&b), pretrained(&b));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let b = bundle(40);
    let pt = pretrained(&b);
    let mut cfg = tiny(StageKind::PostPretrain);
    cfg.lr_peak = 0.0;
    cfg.weight_decay = 0.0;
    let out = post_pretrain(pt.clone(), &b.dataset, &b.ontology, &b.catalog, &cfg).unwrap();
    assert!(changed(&pt, &out.state).is_empty());
}

#[test]
fn zero_weights_match_pretraining_continuation() {
    let b = bundle(40);
    let pt = pretrained(&b);
    let mut pp_cfg = tiny(StageKind::PostPretrain);
    pp_cfg.weights = LossWeights::mlm_only();
    let post = post_pretrain(pt.clone(), &b.dataset, &b.ontology, &b.catalog, &pp_cfg).unwrap();
    let mut pt_cfg = pp_cfg.clone();
    pt_cfg.stage = StageKind::Pretrain;
    let cont = pretrain(pt, &b.dataset, &pt_cfg).unwrap();
    assert_eq!(post.state.params, cont.state.params);
}

#[test]
fn modes_freeze_the_right_parameters() {
    let b = bundle(60);
    let pt = pretrained(&b);
    let last = format!("cell.layer.{}.", pt.config.cell.num_layers - 1);
    for mode in [TrainMode::Lp, TrainMode::Ll, TrainMode::Lora, TrainMode::Ff] {
        let mut cfg = tiny(StageKind::FineTune);
        cfg.mode = mode;
        cfg.task = Task::Identity;
        let before = pt.clone();
        let out = fine_tune(pt.clone(), &b.dataset, &cfg).unwrap().state;
        for name in changed(&before, &out) {
            let allowed = match mode {
                TrainMode::Lp => false,
                TrainMode::Ll => name.starts_with(&last),
                TrainMode::Lora => name.contains("lora"),
                TrainMode::Ff => name.starts_with("cell."),
            };
            assert!(allowed, "{mode:?} changed {name}");
        }
        assert_eq!(out.stage, Some(Stage::Ft));
        assert!(out.params.by_name("head.identity.weight").is_some());
    }
}

#[test]
fn stage_order_is_enforced() {
    let b = bundle(40);
    let fresh = init_model(&b.dataset, &tiny(StageKind::Pretrain).model, 0).unwrap();
    let err = post_pretrain(
        fresh.clone(),
        &b.dataset,
        &b.ontology,
        &b.catalog,
        &tiny(StageKind::PostPretrain),
    );
    assert!(matches!(err, Err(Error::StageOrderViolation { .. })));
    assert!(matches!(
        fine_tune(fresh, &b.dataset, &tiny(StageKind::FineTune)),
        Err(Error::StageOrderViolation { .. })
    ));
    let pt = pretrained(&b);
    let ft = fine_tune(pt, &b.dataset, &tiny(StageKind::FineTune)).unwrap().state;
    let err = post_pretrain(
        ft.clone(),
        &b.dataset,
        &b.ontology,
        &b.catalog,
        &tiny(StageKind::PostPretrain),
    );
    assert!(matches!(err, Err(Error::StageOrderViolation { .. })));
    assert!(matches!(
        pretrain(ft, &b.dataset, &tiny(StageKind::Pretrain)),
        Err(Error::StageOrderViolation { .. })
    ));
}

#[test]
fn post_pretraining_rejects_probe_mode() {
    let mut cfg = tiny(StageKind::PostPretrain);
    cfg.mode = TrainMode::Lp;
    assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
}

#[test]
fn few_shot_caps_training_cells() {
    let b = bundle(120);
    let pt = pretrained(&b);
    let mut cfg = tiny(StageKind::FineTune);
    cfg.few_shot_n = Some(2);
    let out = fine_tune(pt, &b.dataset, &cfg).unwrap();
    let classes = b.dataset.label_space().len();
    assert!(out.record.train_cells <= 2 * classes);
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let idx: Vec<usize> = (0..30).collect();
    let picked = few_shot_subsample(&idx, &labels, 4, 9);
    assert_eq!(picked.len(), 12);
    assert_eq!(picked, few_shot_subsample(&idx, &labels, 4, 9));
}

#[test]
fn gmve_prior_weights_stay_on_the_simplex() {
    let b = bundle(40);
    let pt = pretrained(&b);
    let out = post_pretrain(pt, &b.dataset, &b.ontology, &b.catalog, &tiny(StageKind::PostPretrain)).unwrap();
    let w = out.state.gmve_prior_weights();
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(w.iter().all(|&x| x > 0.0));
}

#[test]
fn total_gradient_is_the_weighted_sum_of_terms() {
    let b = bundle(40);
    let pt = pretrained(&b);
    let data = &b.dataset;
    let corpus = Corpus::new(data, pt.config.cell.max_len).unwrap();
    let classes = data.label_space();
    let protos = PrototypeSet::build(&classes, &b.ontology, &b.catalog, &corpus.vocab, 8).unwrap();
    let items: Vec<BatchItem> = data
        .indices(Split::Train)
        .into_iter()
        .take(8)
        .map(|i| BatchItem {
            seq: mask_tokens(
                &cellrefine::tokenizer::TokenSequence::unmasked(corpus.tokens[i].clone()),
                &corpus.vocab,
                0.3,
                i as u64,
            )
            .unwrap(),
            label: classes.iter().position(|c| *c == data.meta[i].cell_type).unwrap(),
            delta: None,
            kl_seed: i as u64,
            cached: None,
        })
        .collect();
    let trainable = vec![true; pt.params.len()];
    let weights = LossWeights {
        lambda1: 0.3,
        lambda2: 1.7,
        lambda3: 0.6,
        alpha_reg: 0.0,
    };
    let objective = |w: LossWeights, mlm: bool, proto: bool, lineage: bool, gmve: bool| Objective {
        weights: w,
        use_mlm: mlm,
        prototypes: Some(&protos),
        use_prototype_term: proto,
        use_lineage: lineage,
        use_gmve: gmve,
        head: HeadLoss::None,
        kl_samples: 2,
        temperature: 1.0,
    };
    let unit = |l1, l2, l3| LossWeights {
        lambda1: l1,
        lambda2: l2,
        lambda3: l3,
        alpha_reg: 0.0,
    };
    let (total_terms, total) = batch_objective(
        &pt,
        &trainable,
        &objective(weights.clone(), true, true, true, true),
        &items,
        None,
    )
    .unwrap();
    let parts = [
        (1.0, objective(unit(0.0, 0.0, 0.0), true, false, false, false)),
        (
            weights.lambda1,
            objective(unit(1.0, 0.0, 0.0), false, true, false, false),
        ),
        (
            weights.lambda2,
            objective(unit(0.0, 1.0, 0.0), false, false, true, false),
        ),
        (
            weights.lambda3,
            objective(unit(0.0, 0.0, 1.0), false, false, false, true),
        ),
    ];
    let mut combined = vec![0.0; 0];
    let mut value = 0.0;
    for (w, obj) in &parts {
        let (terms, g) = batch_objective(&pt, &trainable, obj, &items, None).unwrap();
        value += w * terms.total;
        let flat: Vec<f64> = pt
            .params
            .iter()
            .flat_map(|(id, _, t)| g.get(id).map(|x| x.data().to_vec()).unwrap_or(vec![0.0; t.len()]))
            .collect();
        if combined.is_empty() {
            combined = vec![0.0; flat.len()];
        }
        for (c, f) in combined.iter_mut().zip(flat) {
            *c += w * f;
        }
    }
    assert!(total_terms.lineage > 0.0, "batch should contain sibling types");
    assert!((total_terms.total - value).abs() < 1e-9);
    let flat_total: Vec<f64> = pt
        .params
        .iter()
        .flat_map(|(id, _, t)| total.get(id).map(|x| x.data().to_vec()).unwrap_or(vec![0.0; t.len()]))
        .collect();
    for (a, b) in flat_total.iter().zip(&combined) {
        assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn trainable_sets_per_stage() {
    let b = bundle(20);
    let s = init_model(&b.dataset, &tiny(StageKind::Pretrain).model, 0).unwrap();
    let names: Vec<String> = s.params.iter().map(|(_, n, _)| n.to_owned()).collect();
    let pick =
        |mask: Vec<bool>| -> Vec<&String> { names.iter().zip(mask).filter(|(_, m)| *m).map(|(n, _)| n).collect() };
    let pre = pick(trainable_filter(
        &s,
        StageKind::Pretrain,
        TrainMode::Ff,
        Task::Identity,
        false,
    ));
    assert!(pre.iter().all(|n| n.starts_with("cell.") || n.starts_with("mlm.")));
    let post = pick(trainable_filter(
        &s,
        StageKind::PostPretrain,
        TrainMode::Ff,
        Task::Identity,
        false,
    ));
    assert!(post.iter().any(|n| n.starts_with("marker.")));
    assert!(post.iter().any(|n| n.starts_with("gmve.")));
}

#[test]
fn trained_checkpoint_round_trips() {
    let b = bundle(40);
    let pt = pretrained(&b);
    let ft = fine_tune(pt, &b.dataset, &tiny(StageKind::FineTune)).unwrap().state;
    let ck = Checkpoint {
        state: ft,
        genes: b.dataset.genes.clone(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let hash = ck.save(&path).unwrap();
    let (back, hash2) = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(hash, hash2);
}
