//! Analytic backprop against central finite differences.

mod common;

use biaslens::dataset::Label;
use common::gradient_check;

fn check(channels: usize, label: Label, seed: u64) {
    let (worst, failures) = gradient_check(channels, label, seed);
    assert!(failures.is_empty(), "worst {worst:e}\n{}", failures.join("\n"));
}

#[test]
fn gradient_matches_finite_differences_grayscale() {
    check(1, Label::Positive, 3);
    check(1, Label::Negative, 4);
}

#[test]
fn gradient_matches_finite_differences_rgb() {
    check(3, Label::Positive, 5);
}
