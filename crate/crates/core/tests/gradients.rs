mod common;

use common::*;
use modelbridge::autodiff::{grad_check, Eval, Tape};
use modelbridge::bridge::{init_bridge, BridgeParams, InitStrategy, PoolKind};
use modelbridge::model::{Architecture, EncoderModel, LayerSpec};
use modelbridge::tensor::Tensor;
use modelbridge::transfer::{bridge_spec_for, Positions};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn every_primitive_matches_central_differences() {
    let mut failures = Vec::new();
    for c in primitive_cases() {
        let err = grad_check(&c.f, &c.inputs, EPS).unwrap();
        if err > TOL {
            failures.push(format!("{}: {err:e}", c.name));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn blocks_match_central_differences() {
    let specs = [
        (
            LayerSpec::Conv {
                in_channels: 3,
                out_channels: 4,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            [2, 7, 3],
        ),
        (LayerSpec::Attention { dim: 4, hidden: 6 }, [2, 3, 4]),
        (LayerSpec::Norm { dim: 5 }, [2, 3, 5]),
    ];
    for (i, (spec, shape)) in specs.into_iter().enumerate() {
        let name = spec.kind_name();
        let (pe, ie) = block_grad_errors(spec, &shape, 40 + i as u64, EPS).unwrap();
        assert!(pe < TOL, "{name} params: {pe:e}");
        assert!(ie < TOL, "{name} input: {ie:e}");
    }
}

fn fixture(pool: PoolKind, pos: Positions) -> (BridgeParams, EncoderModel, Tensor, Tensor) {
    let mut r = rng(3);
    let mut teacher = EncoderModel::build(Architecture::Conv, "a", (16, 2), &mut r).unwrap();
    let mut student = EncoderModel::build(Architecture::Attention, "b", (16, 3), &mut r).unwrap();
    teacher.freeze();
    student.freeze();
    let x_old = Tensor::randn(&[3, 16, 2], 1.0, &mut r);
    let x_new = Tensor::randn(&[3, 16, 3], 1.0, &mut r);
    let spec = bridge_spec_for(&student, &teacher, pos, 2, 3).unwrap();
    let mut bridge = init_bridge(spec, InitStrategy::Random, pool, None, 5).unwrap();
    // init std is tiny; larger values exercise the suffix nonlinearities
    let scaled: Vec<Tensor> = bridge.params().map(|p| p.value().map(|v| v * 25.0)).collect();
    bridge.set_a(scaled[0].clone()).unwrap();
    bridge.set_b(scaled[1].clone()).unwrap();
    bridge.set_prototypes(scaled[2].clone()).unwrap();
    let h_new = student.eval_prefix(&x_new, pos.m).unwrap();
    let target = teacher.eval(&x_old).unwrap();
    (bridge, teacher, h_new, target)
}

#[test]
fn bridge_through_frozen_suffix() {
    for pool in [PoolKind::Mean, PoolKind::Max] {
        for (m, l) in [(1, 1), (2, 3), (3, 5)] {
            let pos = Positions { m, l };
            let (mut bridge, teacher, h_new, target) = fixture(pool, pos);
            let err = param_grad_error(
                &mut bridge,
                |b| b.params_mut().collect(),
                |b, t: &mut Tape| bridge_suffix_loss(t, b, &teacher, &h_new, &target, l),
                |b| Ok(bridge_suffix_loss(&mut Eval, b, &teacher, &h_new, &target, l)?.item()),
                EPS,
            )
            .unwrap();
            assert!(err < TOL, "{pool:?} m={m} l={l}: {err:e}");
        }
    }
}

#[test]
fn frozen_suffix_receives_no_gradient() {
    let pos = Positions { m: 2, l: 2 };
    let (bridge, teacher, h_new, target) = fixture(PoolKind::Mean, pos);
    let mut tape = Tape::new();
    let loss = bridge_suffix_loss(&mut tape, &bridge, &teacher, &h_new, &target, pos.l).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(teacher.params().all(|p| g.param(p.id()).is_none()));
    assert!(bridge.params().all(|p| g.param(p.id()).is_some()));
}
