mod common;

use common::{grad_check, op_cases, random_tensor, rng, FD_REL_TOL};

#[test]
fn every_op_matches_central_differences() {
    let mut r = rng(11);
    for (name, shapes, f) in op_cases() {
        for point in 0..10 {
            let inputs: Vec<_> = shapes.iter().map(|s| random_tensor(s, &mut r)).collect();
            let err = grad_check(&f, &inputs, &mut r);
            assert!(err < FD_REL_TOL, "{name} point {point}: relative error {err:e}");
        }
    }
}
