use mmgraph::gradsuite::{run_suite, TOLERANCE};

#[test]
fn every_registered_operation_passes_twenty_seeds() {
    let reports = run_suite(20);
    for r in &reports {
        assert!(
            r.passed(TOLERANCE),
            "{}: max error {:.3e}, {:?}",
            r.name,
            r.max_err,
            r.failure
        );
    }
    let names: Vec<_> = reports.iter().map(|r| r.name).collect();
    for required in [
        "matmul",
        "softmax",
        "attention",
        "shared_self_attention",
        "cross_fusion",
        "pooling_head",
        "contrastive_loss",
        "projector",
        "instruction_loss",
    ] {
        assert!(names.contains(&required), "{required} is not registered");
    }
}
