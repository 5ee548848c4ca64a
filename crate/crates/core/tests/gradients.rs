mod common;

use common::{gradient_check, loss_activation_pairs};

#[test]
fn backprop_matches_central_differences() {
    for (i, (kind, act)) in loss_activation_pairs().into_iter().enumerate() {
        let r = gradient_check(kind, act, 100, 1000 + i as u64);
        assert!(
            r.max_rel_error < 1e-4,
            "{kind:?} with {act:?}: relative error {:.3e}",
            r.max_rel_error
        );
    }
}

#[test]
fn gradient_check_is_deterministic() {
    let (kind, act) = loss_activation_pairs()[0];
    let a = gradient_check(kind, act, 10, 7);
    let b = gradient_check(kind, act, 10, 7);
    assert_eq!(a.max_rel_error, b.max_rel_error);
    assert_eq!(a.redrawn, b.redrawn);
}
