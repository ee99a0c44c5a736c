mod common;

use common::wire::{fixtures, sim_caller};
use hybridmesh::wire::contract::run_fixture;

#[test]
fn fixtures_pass_in_process() {
    let all = fixtures();
    assert_eq!(all.len(), 4);
    for f in &all {
        run_fixture(f, sim_caller(&f.component)).unwrap();
    }
}

#[cfg(feature = "server")]
#[test]
fn fixtures_pass_against_live_servers() {
    use common::wire::live::{caller, stack};
    use common::wire::strip_times;
    for f in &fixtures() {
        let servers = stack(&f.component);
        let live = run_fixture(f, caller(&servers)).unwrap();
        let sim = run_fixture(f, sim_caller(&f.component)).unwrap();
        // same statuses, and the same bodies apart from wall-clock times
        for (l, s) in live.iter().zip(&sim) {
            assert_eq!(l.status, s.status, "{}", f.name);
            assert_eq!(strip_times(&l.body), strip_times(&s.body), "{}", f.name);
        }
    }
}
