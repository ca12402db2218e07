//! Central differences against the tape for every primitive and for the
//! full weighted objective on a 4-image 16×16 batch.

use geomattn::gradcheck;

#[test]
fn every_primitive_and_the_objective_agree_with_finite_differences() {
    let report = gradcheck::run(0).unwrap();
    assert_eq!(report.step, 1e-5);
    for c in &report.checks {
        assert!(c.checked > 0, "{} checked nothing", c.name);
        assert!(c.max_rel_error < 1e-4, "{}: {:e} at {:?}", c.name, c.max_rel_error, c.worst);
    }
    assert!(report.checks.iter().any(|c| c.name == "overall_loss"));
}
