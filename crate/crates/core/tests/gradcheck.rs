mod common;

use std::collections::BTreeSet;

use common::{gc_config, ops_of, ConvNet3, OpCase, RANDOM_POINTS};
use egoscale::tensor::gradcheck::{analytic_grads, compare_with_finite_differences};
use egoscale::tensor::{grad_check, OpKind};

#[test]
fn every_op_kind_is_covered() {
    let covered: BTreeSet<String> = OpCase::all()
        .iter()
        .flat_map(ops_of)
        .map(|k| format!("{k:?}"))
        .collect();
    for k in OpKind::ALL {
        assert!(
            covered.contains(&format!("{k:?}")),
            "{k:?} has no gradient case"
        );
    }
}

#[test]
fn single_ops_match_finite_differences() {
    let cfg = gc_config();
    for case in OpCase::all() {
        for point in 0..RANDOM_POINTS {
            let inst = case.instance(point);
            let rep = grad_check(&inst, &inst.params, &cfg).unwrap();
            assert!(rep.passed, "{case:?} at point {point}: {:?}", rep.per_param);
        }
    }
}

#[test]
fn three_layer_conv_net_matches_finite_differences() {
    let cfg = gc_config();
    for point in 0..RANDOM_POINTS {
        let (net, params) = ConvNet3::new(point);
        let rep = grad_check(&net, &params, &cfg).unwrap();
        assert!(rep.passed, "point {point}: {:?}", rep.per_param);
        assert_eq!(rep.per_param.len(), 8);
    }
}

#[test]
fn sign_flipped_gradient_is_caught() {
    let cfg = gc_config();
    let (net, params) = ConvNet3::new(3);
    let mut grads = analytic_grads(&net, &params).unwrap();
    grads[2].iter_mut().for_each(|g| *g = -*g);
    let rep = compare_with_finite_differences(&net, &params, &grads, &cfg).unwrap();
    assert!(!rep.passed);
    assert!(rep.per_param[2].rel_error > 1.0, "{:?}", rep.per_param[2]);
    assert!(rep.per_param[0].rel_error < cfg.tolerance);
}

#[test]
fn scaled_gradient_is_caught() {
    let cfg = gc_config();
    let inst = OpCase::L2Normalize.instance(0);
    let mut grads = analytic_grads(&inst, &inst.params).unwrap();
    grads[0].iter_mut().for_each(|g| *g *= 1.01);
    let rep = compare_with_finite_differences(&inst, &inst.params, &grads, &cfg).unwrap();
    assert!(!rep.passed, "{:?}", rep.per_param);
}
