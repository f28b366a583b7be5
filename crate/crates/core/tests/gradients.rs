#[path = "support/grad_cases.rs"]
mod grad_cases;

use grad_cases::*;

fn check(case: GradCase) {
    assert!(case.params <= 10_000, "{}: {} parameters", case.name, case.params);
    assert!(case.samples.len() >= 10, "{}: only {} parameters with usable gradient", case.name, case.samples.len());
    for s in &case.samples {
        assert!(s.rel_error() <= 1e-3, "{}: {s:?}", case.name);
    }
}

#[test]
fn vq_loss_gradients() {
    check(vq_case());
}

#[test]
fn triplane_loss_gradients() {
    check(triplane_case());
}

#[test]
fn adversarial_loss_gradients() {
    check(adversarial_case());
}

#[test]
fn biflownet_loss_gradients() {
    check(biflownet_case());
}

