mod common;

use common::{brute_force_dtw, random_dtw_pair};
use ebm_core::metrics::dtw_align;

#[test]
fn dtw_equals_exhaustive_search() {
    let mut ties = 0;
    for seed in 0..500 {
        let (a, b) = random_dtw_pair(seed);
        let got = dtw_align(&a, &b).unwrap();
        let (cost, path) = brute_force_dtw(&a, &b);
        assert_eq!(
            got.cost.to_bits(),
            cost.to_bits(),
            "seed {seed}: cost {} vs {cost}",
            got.cost
        );
        assert_eq!(got.path, path, "seed {seed}");
        if a.values().iter().all(|v| v.fract() == 0.0) {
            ties += 1;
        }
    }
    // The coarse alphabet must actually have been exercised.
    assert!(ties > 100);
}
