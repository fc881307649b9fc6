mod common;

use vitgaze::objectives::LossWeights;

#[test]
fn every_parameter_tensor_matches_finite_differences() {
    let model = common::toy_model(1);
    let batch = common::toy_batch(2);
    let checks = common::gradient_check(&model, &batch, &LossWeights::default());
    for c in &checks {
        eprintln!("{:<40} {:>5} {:.3e} {:.3e}", c.name, c.size, c.norm, c.rel_err);
    }
    for c in &checks {
        assert!(c.rel_err < 1e-3, "{} rel err {}", c.name, c.rel_err);
    }
}
