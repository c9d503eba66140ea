use std::time::Instant;

#[test]
fn every_registered_loss_passes() {
    let t0 = Instant::now();
    let results = kfgen::gradsuite::run_all().unwrap();
    assert_eq!(results.len(), kfgen::gradsuite::CASES.len());
    for r in &results {
        println!("{:<16} params={:<3} max_rel_err={:.2e}", r.name, r.params, r.max_rel_err);
        assert!(r.pass, "{r:?}");
        assert!(r.params > 0);
    }
    println!("{:?}", t0.elapsed());
}
