//! Finite-difference checks for every tape op, layer and adapter factor.

use facestyle_core::gradsuite::{cases, run_case, CaseKind, SUITE_SEEDS, SUITE_TOL};
use facestyle_core::numkit::{Graph, Tensor};

fn check_kind(kind: CaseKind) {
    let mut failures = Vec::new();
    for case in cases().iter().filter(|c| c.kind == kind) {
        let res = run_case(case, SUITE_SEEDS, SUITE_TOL).unwrap();
        if !res.passed() {
            failures.push(format!("{} seeds {:?}: {:.3e} in {}", res.name, res.failed_seeds, res.max_rel_err, res.worst_tensor));
        }
        if std::env::var_os("SUITE_VERBOSE").is_some() {
            eprintln!("{} {:.2e} refined {}", res.name, res.max_rel_err, res.refined);
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn tape_ops() {
    check_kind(CaseKind::Op);
}

#[test]
fn layers() {
    check_kind(CaseKind::Layer);
}

#[test]
fn adapter_factors() {
    check_kind(CaseKind::Factor);
}

#[test]
fn stop_grad_blocks_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let s = g.stop_grad(x);
    let y = g.mul(x, s).unwrap();
    let l = g.sum(y);
    // d/dx of x·sg(x) is sg(x), not 2x
    assert_eq!(g.backward(l).unwrap().wrt(x).unwrap().data(), &[1.0, 2.0]);
}
