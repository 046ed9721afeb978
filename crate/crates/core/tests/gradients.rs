//! Analytic gradients against central finite differences.

mod common;

use common::{check_client, check_decoder, TOL};
use fedmmkt::client::Objective;

#[test]
fn local_cross_entropy_gradient() {
    for seed in 0..3 {
        let e = check_client(Objective::CrossEntropy, seed);
        assert!(e < TOL, "seed {seed}: {e}");
    }
}

#[test]
fn distillation_gradient() {
    for seed in 0..3 {
        for (lambda, temperature) in [(1.0, 1.0), (0.3, 2.0), (2.0, 0.5)] {
            let e = check_client(Objective::Distill { lambda, temperature }, seed);
            assert!(e < TOL, "seed {seed} λ={lambda} τ={temperature}: {e}");
        }
    }
}

#[test]
fn consensus_label_gradient() {
    // logit-variant retraining is cross-entropy on consensus labels
    for seed in 10..13 {
        let e = check_client(Objective::CrossEntropy, seed);
        assert!(e < TOL, "seed {seed}: {e}");
    }
}

#[test]
fn decoder_gradient() {
    for seed in 0..3 {
        let e = check_decoder(seed);
        assert!(e < TOL, "seed {seed}: {e}");
    }
}
