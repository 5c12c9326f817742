use std::collections::BTreeMap;

use btnet::experiments::desk::DeskPlan;
use btnet::model::{BTNetModel, TrunkModel};
use btnet::train::{train_branch, train_mm, train_trunk, Regime, ResolutionScheme};

fn plan() -> DeskPlan {
    DeskPlan::smoke(21)
}

fn trunk(plan: &DeskPlan) -> TrunkModel {
    let data = plan.train_set().unwrap();
    train_trunk(&plan.trunk_config(ResolutionScheme::EqualSet, 0), &plan.spec, &data).unwrap().trunk
}

fn bits(model: &BTNetModel) -> BTreeMap<String, Vec<u32>> {
    let mut out = BTreeMap::new();
    model.visit(&mut |name, _, data| {
        out.insert(name.to_string(), data.iter().map(|v| v.to_bits()).collect());
    });
    out
}

#[test]
fn identical_seeds_reproduce_checkpoints_bit_for_bit() {
    let p = plan();
    let data = p.train_set().unwrap();
    let a = trunk(&p).to_checkpoint().to_bytes().unwrap();
    let b = trunk(&p).to_checkpoint().to_bytes().unwrap();
    assert_eq!(a, b);
    let t = trunk(&p);
    let d1 = train_branch(&t, 8, Regime::DISTILL, &p.branch, &data).unwrap();
    let d2 = train_branch(&t, 8, Regime::DISTILL, &p.branch, &data).unwrap();
    assert_eq!(d1.delta.to_bytes().unwrap(), d2.delta.to_bytes().unwrap());
    assert_eq!(d1.log, d2.log);
    let mm1 = train_mm(&p.trunk_config(ResolutionScheme::None, 2), &p.spec, &data, 8).unwrap();
    let mm2 = train_mm(&p.trunk_config(ResolutionScheme::None, 2), &p.spec, &data, 8).unwrap();
    assert_eq!(mm1.trunk.to_checkpoint().to_bytes().unwrap(), mm2.trunk.to_checkpoint().to_bytes().unwrap());
}

#[test]
fn fixed_trunk_changes_only_branch_and_bank() {
    let p = plan();
    let data = p.train_set().unwrap();
    let t = trunk(&p);
    let start = bits(&BTNetModel::from_trunk(t.clone()).unwrap());
    for regime in [Regime::FIX_TRUNK, Regime::DISTILL] {
        let out = train_branch(&t, 8, regime, &p.branch, &data).unwrap();
        let end = bits(&out.model);
        let changed: Vec<&String> = end.keys().filter(|k| start.get(*k) != Some(&end[*k])).collect();
        assert!(changed.iter().any(|n| n.starts_with("branch8.")));
        for name in &changed {
            assert!(name.starts_with("branch8.") || name.starts_with("trunk.bn8."), "{name} changed");
        }
        let delta: Vec<&str> = out.delta.names().collect();
        assert!(delta.iter().all(|n| n.starts_with("branch8.") || n.starts_with("trunk.bn8.") || *n == "head.weight"));
    }
}

#[test]
fn backward_compatible_training_keeps_the_head() {
    let p = plan();
    let data = p.train_set().unwrap();
    let t = trunk(&p);
    let original = t.head.clone().unwrap();
    for regime in [Regime::BCT, Regime::FIX_TRUNK, Regime::DISTILL] {
        let out = train_branch(&t, 8, regime, &p.branch, &data).unwrap();
        let head = out.model.trunk.head.as_ref().unwrap();
        assert_eq!(head.weight, original.weight);
        assert_eq!(head.t.to_bits(), original.t.to_bits());
        assert_eq!(out.head.weight, original.weight);
    }
    let free = train_branch(&t, 8, Regime::PRETRAINING, &p.branch, &data).unwrap();
    assert_ne!(free.model.trunk.head.unwrap().weight, original.weight);
}

#[test]
fn logged_losses_are_finite() {
    let p = plan();
    let data = p.train_set().unwrap();
    let t = trunk(&p);
    let out = train_branch(&t, 4, Regime::DISTILL, &p.branch, &data).unwrap();
    assert!(!out.log.rows.is_empty());
    for row in &out.log.rows {
        assert!(row.loss_influence.is_finite() && row.loss_distill.is_finite() && row.loss_total.is_finite());
    }
}

#[test]
fn distillation_pulls_branch_features_toward_the_trunk() {
    let mut p = plan();
    p.train_data = btnet::experiments::desk::desk_synth(4, 32, 32, 21);
    let data = p.train_set().unwrap();
    let t = trunk(&p);
    let out = train_branch(&t, 8, Regime::DISTILL, &p.branch, &data).unwrap();
    let first: Vec<f64> = out.log.rows.iter().filter(|r| r.epoch == 0).map(|r| r.loss_distill).collect();
    assert!(first.len() >= 4, "{} steps", first.len());
    assert!(first.last().unwrap() < first.first().unwrap(), "{first:?}");
}
