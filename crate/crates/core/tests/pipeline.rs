use horkd::data::{generate_synthetic, DatasetSpec, Split};
use horkd::losses::{compute_class_centers, LossWeights};
use horkd::models::{degrade, Model, ModelSpec};
use horkd::pipeline::{
    embed, epoch_batches, kd_soft_baseline, recombined_total, run_stage, run_two_stage, train_supervised, StageKind,
    StagePlan, TrainHyper,
};
use horkd::{Graph, Tensor};

fn data() -> Split<f64> {
    generate_synthetic(&DatasetSpec::synthetic(4, 12, (8, 8), 3)).unwrap()
}

fn spec(dims: (usize, usize, usize), hidden: usize, seed: u64) -> ModelSpec {
    ModelSpec {
        input_dims: dims,
        hidden_layers: vec![hidden],
        embedding_dim: 6,
        num_classes: 4,
        seed,
    }
}

fn hyper(weights: LossWeights) -> TrainHyper {
    TrainHyper {
        epochs: 3,
        batch_size: 8,
        learning_rate: 0.05,
        ce_weight: 1.0,
        weights,
        seed: 11,
    }
}

fn teacher(d: &Split<f64>) -> Model<f64> {
    train_supervised(spec((8, 8, 1), 24, 1), 1, d, &hyper(LossWeights::none()))
        .unwrap()
        .0
        .frozen()
}

fn plan<'a>(teacher: &'a Model<f64>, weights: LossWeights, factor: usize) -> StagePlan<'a, f64> {
    StagePlan {
        kind: if factor == 1 {
            StageKind::CrossStructure
        } else {
            StageKind::CrossResolution
        },
        teacher,
        student_spec: spec((8 / factor, 8 / factor, 1), 10, 2),
        student_init: None,
        degrade_factor: factor,
        hyper: hyper(weights),
    }
}

#[test]
fn zero_weights_match_an_independent_supervised_loop() {
    let d = data();
    let t = teacher(&d);
    let out = run_stage(&plan(&t, LossWeights::none(), 2), &d).unwrap();

    let h = hyper(LossWeights::none());
    let train = degrade(&d.train, 2).unwrap();
    let mut m = Model::build(spec((4, 4, 1), 10, 2)).unwrap();
    for epoch in 0..h.epochs {
        for idx in epoch_batches(train.len(), h.batch_size, h.seed, epoch) {
            let x = train.select(&idx);
            let mut g = Graph::new();
            let o = m.forward_batch(&mut g, &x).unwrap();
            let ce = g.softmax_cross_entropy(o.logits, x.labels()).unwrap();
            let ce = g.scale(ce, 1.0);
            g.backward(ce).unwrap();
            m.sgd_step(&g, &o, 0.05).unwrap();
        }
    }
    assert_eq!(out.model.params(), m.params());
}

#[test]
fn teacher_untouched_and_centers_constant() {
    let d = data();
    let t = teacher(&d);
    let before = t.clone();
    let out = run_stage(&plan(&t, LossWeights::default(), 2), &d).unwrap();
    assert_eq!(t, before);
    let recomputed = compute_class_centers(&embed(&t, &d.train).unwrap(), 4).unwrap();
    assert_eq!(out.centers.unwrap().centers(), recomputed.centers());
    assert_eq!(out.report.epochs.len(), 3);
    assert!(out.report.epochs.iter().enumerate().all(|(i, e)| e.epoch == i));
}

#[test]
fn every_step_satisfies_the_total_bookkeeping() {
    let d = data();
    let t = teacher(&d);
    let w = LossWeights {
        include_order1: true,
        ..LossWeights::default()
    };
    let p = plan(&t, w, 2);
    let out = run_stage(&p, &d).unwrap();
    assert!(!out.report.steps.is_empty());
    for s in &out.report.steps {
        assert!(s.l1.is_some() && s.l2.is_some() && s.l3.is_some() && s.lc.is_some());
        assert!((s.total - recombined_total(s, &p.hyper)).abs() <= 1e-10);
    }
}

#[test]
fn student_initialized_from_teacher_starts_at_zero_distillation() {
    let d = data();
    let t = teacher(&d);
    let w = LossWeights {
        include_order1: true,
        ..LossWeights::default()
    };
    let p = StagePlan {
        student_spec: t.spec().clone(),
        student_init: Some(t.clone()),
        ..plan(&t, w, 1)
    };
    let out = run_stage(&p, &d).unwrap();
    let s0 = &out.report.steps[0];
    for v in [s0.l1, s0.l2, s0.l3, s0.lc] {
        assert!(v.unwrap().abs() <= 1e-12, "{v:?}");
    }
}

#[test]
fn kd_term_is_zero_when_student_equals_teacher() {
    let d = data();
    let s = spec((8, 8, 1), 10, 5);
    let t = Model::build(s.clone()).unwrap().frozen();
    let (_, report) = kd_soft_baseline(&t, s, 3.0, 1, &d, &hyper(LossWeights::none())).unwrap();
    assert!(report.steps[0].kd.unwrap().abs() <= 1e-12);
    assert!(kd_soft_baseline(&t, spec((8, 8, 1), 10, 5), 0.0, 1, &d, &hyper(LossWeights::none())).is_err());
}

#[test]
fn runs_are_bit_identical() {
    let d = data();
    let t = teacher(&d);
    let a = run_stage(&plan(&t, LossWeights::default(), 2), &d).unwrap();
    let b = run_stage(&plan(&t, LossWeights::default(), 2), &d).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.model, b.model);
}

#[test]
fn zero_epoch_second_stage_returns_the_initialization() {
    let d = data();
    let t = teacher(&d);
    let sspec = spec((4, 4, 1), 10, 9);
    let h2 = TrainHyper {
        epochs: 0,
        ..hyper(LossWeights::default())
    };
    let out = run_two_stage(&t, spec((8, 8, 1), 10, 8), sspec.clone(), 2, &d, &hyper(LossWeights::default()), &h2).unwrap();
    assert_eq!(out.student, Model::build(sspec).unwrap());
    assert!(out.assistant.is_frozen());
    assert!(out.student_report.epochs.is_empty());
}

#[test]
fn stage_plan_invariants_are_enforced() {
    let d = data();
    let t = teacher(&d);
    let mut p = plan(&t, LossWeights::default(), 2);
    p.kind = StageKind::CrossStructure;
    assert!(run_stage(&p, &d).is_err());
    let mut p = plan(&t, LossWeights::default(), 1);
    p.kind = StageKind::CrossResolution;
    assert!(run_stage(&p, &d).is_err());
    let mut p = plan(&t, LossWeights::default(), 2);
    p.hyper.batch_size = 2;
    assert!(run_stage(&p, &d).is_err());
    let unfrozen = Model::build(t.spec().clone()).unwrap();
    assert!(run_stage(&plan(&unfrozen, LossWeights::default(), 2), &d).is_err());
    let mut p = plan(&t, LossWeights::default(), 2);
    p.student_spec.num_classes = 3;
    assert!(run_stage(&p, &d).is_err());
}

#[test]
fn forward_is_batch_decomposable() {
    let d = data();
    let m = teacher(&d);
    let (emb, logits) = m.infer(&d.test).unwrap();
    for i in [0, 3, d.test.len() - 1] {
        let (e1, l1) = m.infer(&d.test.select(&[i])).unwrap();
        assert_eq!(e1.data(), emb.row(i));
        assert_eq!(l1.data(), logits.row(i));
    }
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let d = data();
    let t = teacher(&d);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(vec![2, 64]));
    let out = t.forward(&mut g, x).unwrap();
    let l = g.sum(out.logits);
    g.backward(l).unwrap();
    assert!(out.params.iter().all(|&p| g.grad(p).is_none()));
}
