use std::sync::Arc;

use lethe_core::attacks::{AttackStream, Limit, LetheanStream, ReplayStream};
use lethe_core::data::{synth_blobs, ImageSet};
use lethe_core::engine::{
    corr_reg_filter, run_online, ttt_step, CorrDefense, CorrMode, GradHistory, OnlineSession, StepOutcome,
    StopCriterion, TTTPolicy, UpdateScope,
};
use lethe_core::model::{ArchConfig, Model};
use lethe_core::numerics::{ParamVector, Tensor};
use proptest::prelude::*;

fn setup() -> (Model, Arc<ImageSet>, ImageSet) {
    let train = synth_blobs(3, 4, &[1, 8, 8], 0.8, 1).unwrap();
    let test = synth_blobs(3, 3, &[1, 8, 8], 0.8, 2).unwrap();
    let model = Model::build(ArchConfig::conv_stack(1, 8, 3, (4, 8, 8)), 3).unwrap();
    (model, Arc::new(train), test)
}

fn policy(eta: f64) -> TTTPolicy {
    TTTPolicy {
        eta,
        ..TTTPolicy::default()
    }
}

fn never_stop(max_steps: usize) -> StopCriterion {
    StopCriterion {
        accuracy: -1.0,
        max_steps,
    }
}

fn bits(p: &ParamVector) -> Vec<u64> {
    p.flatten().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn zero_eta_leaves_model_bit_identical() {
    let (model, train, _) = setup();
    let x = &train.images[0].pixels;
    let before = model.predict_main(x).unwrap();
    let mut m = model.clone();
    let (probs, rec) = ttt_step(&mut m, x, &policy(0.0), &mut GradHistory::default(), 0).unwrap();
    assert_eq!(bits(&m.trunk), bits(&model.trunk));
    assert_eq!(bits(&m.aux), bits(&model.aux));
    assert_eq!(probs, before);
    assert_eq!(rec.outcome, StepOutcome::Applied);
}

#[test]
fn main_head_never_moves() {
    let (model, train, _) = setup();
    let mut m = model.clone();
    let mut h = GradHistory::default();
    for (i, img) in train.images.iter().enumerate() {
        ttt_step(&mut m, &img.pixels, &policy(0.05), &mut h, i).unwrap();
    }
    assert_eq!(bits(&m.main), bits(&model.main));
    assert_ne!(bits(&m.trunk), bits(&model.trunk));
}

#[test]
fn shared_only_scope_freezes_aux_head() {
    let (model, train, _) = setup();
    let mut m = model.clone();
    let p = TTTPolicy {
        scope: UpdateScope::SharedOnly,
        ..policy(0.05)
    };
    ttt_step(&mut m, &train.images[1].pixels, &p, &mut GradHistory::default(), 0).unwrap();
    assert_eq!(bits(&m.aux), bits(&model.aux));
    assert_ne!(bits(&m.trunk), bits(&model.trunk));
}

#[test]
fn small_step_reduces_aux_loss() {
    let (model, train, _) = setup();
    for img in &train.images {
        let mut m = model.clone();
        let before = m.aux_loss_grad(&img.pixels).unwrap().loss;
        ttt_step(&mut m, &img.pixels, &policy(1e-4), &mut GradHistory::default(), 0).unwrap();
        assert!(m.aux_loss_grad(&img.pixels).unwrap().loss < before);
    }
}

#[test]
fn empty_stream_yields_baseline_only() {
    let (model, _, test) = setup();
    let mut s = ReplayStream::from_tensors("empty", vec![]);
    let (curve, out, recs) = run_online(model.clone(), &mut s, &test, 5, &never_stop(100), &policy(0.001), 0).unwrap();
    assert_eq!(curve.points.len(), 1);
    assert_eq!(curve.points[0].step, 0);
    assert_eq!(curve.baseline(), Some(model.evaluate(&test.images).unwrap().0));
    assert!(recs.is_empty());
    assert_eq!(out, model);
}

#[test]
fn zero_eta_curve_is_flat() {
    let (model, train, test) = setup();
    let mut s = Limit::new(LetheanStream::new(train, 4).unwrap(), 15);
    let (curve, _, recs) = run_online(model, &mut s, &test, 5, &never_stop(100), &policy(0.0), 0).unwrap();
    assert_eq!(curve.points.len(), 4);
    assert_eq!(recs.len(), 15);
    let base = curve.points[0];
    for p in &curve.points {
        assert_eq!(p.accuracy.to_bits(), base.accuracy.to_bits());
        assert_eq!(p.mean_main_loss.to_bits(), base.mean_main_loss.to_bits());
    }
    assert_eq!(curve.points.iter().map(|p| p.step).collect::<Vec<_>>(), vec![0, 5, 10, 15]);
}

#[test]
fn evaluation_does_not_perturb_adaptation() {
    let (model, train, test) = setup();
    let run = |interval| {
        let mut s = Limit::new(LetheanStream::new(train.clone(), 5).unwrap(), 12);
        run_online(model.clone(), &mut s, &test, interval, &never_stop(100), &policy(0.01), 0).unwrap()
    };
    let (_, a, ra) = run(1);
    let (_, b, rb) = run(12);
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn online_updates_persist_across_sessions() {
    let (model, train, test) = setup();
    let mut whole = Limit::new(LetheanStream::new(train.clone(), 6).unwrap(), 20);
    let items: Vec<_> = (0..20).map(|_| whole.next_item(&model).unwrap().unwrap()).collect();
    let p = policy(0.01);

    let mut all = ReplayStream::new("lethean", items.clone());
    let (_, joint, joint_recs) = run_online(model.clone(), &mut all, &test, 4, &never_stop(100), &p, 0).unwrap();

    let mut session = OnlineSession::new(model);
    let mut first = ReplayStream::new("lethean", items[..8].to_vec());
    let r1 = session.run(&mut first, &test, 4, &never_stop(100), &p, 0).unwrap();
    let mut second = ReplayStream::new("lethean", items[8..].to_vec());
    let r2 = session.run(&mut second, &test, 4, &never_stop(100), &p, 0).unwrap();

    assert_eq!(session.model, joint);
    let split: Vec<_> = r1.records.into_iter().chain(r2.records).collect();
    assert_eq!(split, joint_recs);
    assert_eq!(r2.curve.points[0].step, 8);
}

#[test]
fn stop_criterion_ends_the_run() {
    let (model, train, test) = setup();
    let mut s = LetheanStream::new(train, 7).unwrap();
    let stop = StopCriterion {
        accuracy: -1.0,
        max_steps: 7,
    };
    let (curve, _, recs) = run_online(model.clone(), &mut s, &test, 3, &stop, &policy(0.001), 0).unwrap();
    assert_eq!(recs.len(), 7);
    assert_eq!(curve.points.last().unwrap().step, 6);
    let stop = StopCriterion {
        accuracy: 2.0,
        max_steps: 7,
    };
    let mut s = LetheanStream::new(Arc::new(synth_blobs(3, 1, &[1, 8, 8], 0.8, 1).unwrap()), 7).unwrap();
    let (curve, _, recs) = run_online(model, &mut s, &test, 3, &stop, &policy(0.001), 0).unwrap();
    assert_eq!(curve.points.len(), 1);
    assert!(recs.is_empty());
}

#[test]
fn gate_at_zero_threshold_skips_every_update() {
    let (model, train, test) = setup();
    let p = TTTPolicy {
        confidence_threshold: Some(0.0),
        ..policy(0.5)
    };
    let mut s = Limit::new(LetheanStream::new(train, 8).unwrap(), 10);
    let (_, out, recs) = run_online(model.clone(), &mut s, &test, 5, &never_stop(100), &p, 0).unwrap();
    assert!(recs.iter().all(|r| r.outcome == StepOutcome::Gated));
    assert_eq!(bits(&out.trunk), bits(&model.trunk));
    assert_eq!(bits(&out.aux), bits(&model.aux));
}

#[test]
fn gate_at_one_never_triggers() {
    let (model, train, _) = setup();
    let p = TTTPolicy {
        confidence_threshold: Some(1.0),
        ..policy(0.01)
    };
    let mut m = model;
    let (_, rec) = ttt_step(&mut m, &train.images[0].pixels, &p, &mut GradHistory::default(), 0).unwrap();
    assert_eq!(rec.outcome, StepOutcome::Applied);
}

#[test]
fn strict_floor_rejects_after_first_step() {
    let (model, train, test) = setup();
    let p = TTTPolicy {
        corr_defense: Some(CorrDefense {
            decay: 0.9,
            floor: 1.0 - 1e-9,
            mode: CorrMode::Reject,
        }),
        ..policy(0.01)
    };
    let mut s = Limit::new(LetheanStream::new(train, 9).unwrap(), 10);
    let (_, _, recs) = run_online(model, &mut s, &test, 5, &never_stop(100), &p, 0).unwrap();
    assert_eq!(recs[0].outcome, StepOutcome::Applied);
    assert_eq!(recs[0].cosine_history, Some(1.0));
    assert!(recs[1..].iter().all(|r| r.outcome == StepOutcome::Rejected));
}

#[test]
fn non_finite_input_is_flagged_and_skipped() {
    let (model, _, _) = setup();
    let mut x = Tensor::full(&[1, 8, 8], 0.5);
    x.data_mut()[3] = f64::NAN;
    let mut m = model.clone();
    let (_, rec) = ttt_step(&mut m, &x, &policy(0.1), &mut GradHistory::default(), 0).unwrap();
    assert_eq!(rec.outcome, StepOutcome::NonFinite);
    assert_eq!(bits(&m.trunk), bits(&model.trunk));
}

fn pv(v: &[f64]) -> ParamVector {
    let mut p = ParamVector::new();
    p.insert("w", Tensor::new(vec![v.len()], v.to_vec()).unwrap());
    p
}

fn vec3() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 3)
}

proptest! {
    #[test]
    fn floor_of_minus_one_accepts_everything(g in vec3(), h in vec3(), decay in 0.0f64..0.99) {
        let d = CorrDefense { decay, floor: -1.0, mode: CorrMode::Reject };
        let f = corr_reg_filter(&pv(&g), &pv(&h), &d).unwrap();
        prop_assert_eq!(f.gradient, Some(pv(&g)));
    }

    #[test]
    fn projection_removes_opposing_component(g in vec3(), h in vec3()) {
        let d = CorrDefense { decay: 0.5, floor: 0.0, mode: CorrMode::Project };
        let f = corr_reg_filter(&pv(&g), &pv(&h), &d).unwrap();
        let out = f.gradient.unwrap();
        let hn = pv(&h).norm();
        prop_assert!(out.dot(&pv(&h)).unwrap() >= -1e-9 * (1.0 + hn * out.norm()));
    }

    #[test]
    fn history_is_ema_of_applied(g in vec3(), h in vec3(), decay in 0.0f64..0.99, floor in -1.0f64..1.0) {
        let d = CorrDefense { decay, floor, mode: CorrMode::Reject };
        let f = corr_reg_filter(&pv(&g), &pv(&h), &d).unwrap();
        let applied = f.gradient.clone().unwrap_or_else(|| pv(&[0.0; 3]));
        for i in 0..3 {
            let want = decay * h[i] + (1.0 - decay) * applied.flatten()[i];
            prop_assert!((f.history.flatten()[i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn parallel_gradient_is_accepted_and_opposite_rejected() {
    let d = CorrDefense {
        decay: 0.9,
        floor: 0.0,
        mode: CorrMode::Reject,
    };
    let f = corr_reg_filter(&pv(&[1.0, 2.0]), &pv(&[2.0, 4.0]), &d).unwrap();
    assert!((f.cosine - 1.0).abs() < 1e-12 && f.gradient.is_some());
    let f = corr_reg_filter(&pv(&[1.0, 2.0]), &pv(&[-1.0, -2.0]), &d).unwrap();
    assert!(f.gradient.is_none());
}
