use warpformer::harness::gradsuite::{run_suite, TOLERANCE};

#[test]
fn every_check_passes() {
    let cases = run_suite(0).unwrap();
    for c in &cases {
        println!("{:<40} {:.3e} ({} coords, {:.2}s)", c.name, c.max_rel_error, c.coords, c.seconds);
    }
    let failed: Vec<_> = cases.iter().filter(|c| !c.passed()).collect();
    assert!(failed.is_empty(), "above {TOLERANCE}: {failed:?}");
    assert!(cases.iter().any(|c| c.name.starts_with("warp_layer")));
    assert!(cases.iter().any(|c| c.name.starts_with("attention_block")));
    assert!(cases.iter().any(|c| c.name.starts_with("model")));
}

#[test]
fn suite_is_seed_stable() {
    for seed in 1..4 {
        assert!(run_suite(seed).unwrap().iter().all(|c| c.passed()), "seed {seed}");
    }
}
