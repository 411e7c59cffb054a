use kon_core::harness::{sweep_negatives, RunConfig};

#[test]
fn a_single_negative_trails_the_tuned_count() {
    let cfg = RunConfig::synthetic_small();
    let rows = sweep_negatives(&cfg, &[1, cfg.negatives]).unwrap();
    let (one, tuned) = (&rows[0].report, &rows[1].report);
    assert!(
        one.mrr < tuned.mrr,
        "MRR with 1 negative {:.4} vs {} negatives {:.4}",
        one.mrr,
        cfg.negatives,
        tuned.mrr
    );
}
