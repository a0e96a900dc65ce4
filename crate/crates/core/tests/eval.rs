use cellrefine::datagen::{generate, GeneratorConfig, PerturbationConfig};
use cellrefine::dataset::{DatasetBundle, Split};
use cellrefine::error::Error;
use cellrefine::eval::{identity_eval, imputation_eval, out_of_domain_eval, perturbation_eval, EvalContext};
use cellrefine::model::ModelState;
use cellrefine::training::{fine_tune, init_model, pretrain, StageKind, Task, TrainConfig};

fn bundle(perturbation: bool) -> DatasetBundle {
    generate(&GeneratorConfig {
        num_cells: 120,
        ood_cells: 24,
        uniform: true,
        perturbation: perturbation.then(PerturbationConfig::default),
        seed: 5,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

fn cfg(stage: StageKind) -> TrainConfig {
    let mut cfg = TrainConfig {
        stage,
        epoch_cap: 2,
        warmup_steps: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    cfg.model.hidden_size = 8;
    cfg.model.num_heads = 2;
    cfg.model.max_len = 16;
    cfg.model.marker_max_len = 16;
    cfg.model.gmve_components = 2;
    cfg
}

fn pretrained(b: &DatasetBundle) -> ModelState {
    let c = cfg(StageKind::Pretrain);
    pretrain(init_model(&b.dataset, &c.model, 0).unwrap(), &b.dataset, &c)
        .unwrap()
        .state
}

#[test]
fn imputation_report_is_valid_and_seeded() {
    let b = bundle(false);
    let pt = pretrained(&b);
    let ctx = EvalContext {
        seed: 4,
        ..EvalContext::default()
    };
    let r = imputation_eval(&pt, &b.dataset, Split::Test, 0.3, &ctx).unwrap();
    r.validate().unwrap();
    assert!(r.metrics.contains_key("pearson"));
    assert!(r.metrics.contains_key("cosine"));
    assert_eq!(r, imputation_eval(&pt, &b.dataset, Split::Test, 0.3, &ctx).unwrap());
}

#[test]
fn identity_and_shifted_identity() {
    let b = bundle(false);
    let pt = pretrained(&b);
    let ft = fine_tune(pt.clone(), &b.dataset, &cfg(StageKind::FineTune))
        .unwrap()
        .state;
    let ctx = EvalContext::default();
    let r = identity_eval(&ft, &b.dataset, Split::Test, &[1, 3], &ctx).unwrap();
    r.validate().unwrap();
    assert!(r.metrics["recall@3"] >= r.metrics["recall@1"]);
    let ood = out_of_domain_eval(&ft, &b.dataset, Split::Ood, &[1], &ctx).unwrap();
    ood.validate().unwrap();
    assert!(ood.notes.contains_key("shift"));
    // Without an identity head there is nothing to score.
    assert!(identity_eval(&pt, &b.dataset, Split::Test, &[1], &ctx).is_err());
}

#[test]
fn perturbation_scores_held_out_types() {
    let b = bundle(true);
    let pt = pretrained(&b);
    let mut c = cfg(StageKind::FineTune);
    c.task = Task::Perturbation;
    c.held_out_types = vec!["type_1_2".into()];
    let ft = fine_tune(pt.clone(), &b.dataset, &c).unwrap().state;
    let r = perturbation_eval(&ft, &b.dataset, &EvalContext::default()).unwrap();
    r.validate().unwrap();
    assert!((-1.0..=1.0).contains(&r.metrics["dge_pearson"]));
    assert_eq!(r.notes["held_out"], "type_1_2");
    assert!(matches!(
        perturbation_eval(&pt, &b.dataset, &EvalContext::default()),
        Err(Error::IncompatibleTask(_))
    ));
}
