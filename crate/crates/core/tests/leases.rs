mod common;

use hybridmesh::replay::{verify, Rule};
use hybridmesh::workflow::{run_scenario, RunStatus};

#[test]
fn random_federated_runs_replay_clean() {
    let mut contended = 0;
    for seed in 0..20 {
        let cfg = common::random_federated(seed);
        let out = run_scenario(&cfg).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert_eq!(out.report.status, RunStatus::Succeeded, "seed {seed}");
        let v = verify(&out.log).unwrap();
        assert_eq!(v.count(Rule::LeaseExclusivity), 0, "seed {seed}");
        assert!(v.is_clean(), "seed {seed}: {:?}", v.violations);
        contended += out.log.entries().iter().any(|e| e.record.kind() == "claim_conflict") as u32;
    }
    assert!(contended > 10, "claims were hardly ever contended");
}
