//! Regenerates pinned fixture files. Run with `--ignored` only when the
//! generator changes on purpose.

use tokattr_core::TabularLM;

#[test]
#[ignore]
fn regenerate_seed7_fixture() {
    let m = TabularLM::random_tabular(3, 1, 7).unwrap();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/v3_k1_seed7.toy");
    std::fs::write(path, m.to_fixture_string()).unwrap();
}

#[test]
#[ignore]
fn regenerate_order2_fixture() {
    let m = TabularLM::random_tabular(4, 2, 3).unwrap();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/v4_k2_seed3.toy");
    std::fs::write(path, m.to_fixture_string()).unwrap();
}
