//! Finite-difference gradient checks, one test per loss term.

mod common;

use common::gradcheck::{self, Term, Worst, TOL};
use vsum_core::adversarial::ReconLoss;
use vsum_core::csnet::{FusionMode, ScorerFlags};

fn ok(w: Worst) {
    assert!(
        w.error < TOL,
        "tensor {}: relative error {:.2e}",
        w.tensor,
        w.error
    );
}

#[test]
fn variance_loss_gradient_worked_point() {
    ok(gradcheck::variance_worked_point());
}

#[test]
fn variance_loss_gradients() {
    ok(gradcheck::variance_points());
}

#[test]
fn sparsity_loss_gradients() {
    ok(gradcheck::sparsity_points());
}

#[test]
fn prior_gradients() {
    ok(gradcheck::prior_points());
}

#[test]
fn recon_feature_matching_gradients() {
    ok(gradcheck::adversarial_points(
        Term::Recon(ReconLoss::FeatureMatching),
        4,
    ));
}

#[test]
fn recon_raw_mse_gradients() {
    ok(gradcheck::adversarial_points(
        Term::Recon(ReconLoss::RawMse),
        5,
    ));
}

#[test]
fn gan_generator_gradients() {
    ok(gradcheck::adversarial_points(Term::GanG, 6));
}

#[test]
fn gan_discriminator_gradients() {
    ok(gradcheck::adversarial_points(Term::GanD, 7));
}

#[test]
fn vae_reconstruction_gradients() {
    ok(gradcheck::vae_points());
}

#[test]
fn scorer_gradients_full() {
    ok(gradcheck::scorer_points(
        ScorerFlags::default(),
        FusionMode::Convex,
        9,
    ));
}

#[test]
fn scorer_gradients_affine_fusion() {
    ok(gradcheck::scorer_points(
        ScorerFlags::default(),
        FusionMode::Affine,
        10,
    ));
}

#[test]
fn scorer_gradients_single_stream() {
    ok(gradcheck::scorer_points(
        ScorerFlags {
            two_stream: false,
            difference: true,
        },
        FusionMode::Convex,
        11,
    ));
}

#[test]
fn variance_loss_through_scorer() {
    ok(gradcheck::variance_through_scorer());
}
