mod common;

use std::collections::BTreeMap;

use common::{mesh, site, storage_site};
use hybridmesh::provenance::Record;
use hybridmesh::replay::verify;
use hybridmesh::scenario::FailureSpec;
use hybridmesh::workflow::{baseline_manifest, run_scenario, Mode, RunStatus};

#[test]
fn dead_site_batches_are_reclaimed() {
    let sites = vec![site("a", 2), site("b", 2), site("c", 2), storage_site("store")];
    let mut cfg = mesh(sites, Mode::Federated, 18, 11);
    cfg.workflow.input_sites = vec!["store".into()];
    cfg.failures.push(FailureSpec {
        site: "b".into(),
        down_at: Some(15.0),
        up_at: None,
        preempt_at: None,
    });
    let out = run_scenario(&cfg).unwrap();
    assert_eq!(out.report.status, RunStatus::Succeeded, "{:#?}", out.report);
    assert_eq!(out.report.final_manifest, baseline_manifest(&cfg.workflow));

    // last claim per batch, and which batches the dead site held when it died
    let mut claims: BTreeMap<String, Vec<(String, u32)>> = BTreeMap::new();
    for e in out.log.entries() {
        if let Record::Claim { batch, site, attempts, .. } = &e.record {
            claims.entry(batch.clone()).or_default().push((site.0.clone(), *attempts));
        }
    }
    let lost: Vec<_> = claims
        .iter()
        .filter(|(_, c)| c.iter().any(|(s, _)| s == "b") && c.last().unwrap().0 != "b")
        .collect();
    assert!(!lost.is_empty());
    for (batch, c) in &lost {
        assert_eq!(c.last().unwrap().1, 2, "{batch}: {c:?}");
    }
    let v = verify(&out.log).unwrap();
    assert!(v.is_clean(), "{:?}", v.violations);
}
