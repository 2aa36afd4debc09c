mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn ten_thousand_random_sentences() {
    let start = std::time::Instant::now();
    println!("{}", common::check_filters().unwrap());
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn properties_hold_for_any_rule_set(seed in any::<u64>(), n in 0usize..300) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let case = common::random_filter_case(&mut r, n);
        prop_assert_eq!(common::check_filter_case(&case), Ok(()));
    }
}
