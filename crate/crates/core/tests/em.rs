mod common;

use lmaug::interpolate::{optimize_on_events, optimize_weights_em};
use lmaug::ngram::{train_ngram, Vocab};

#[test]
fn random_mixtures_are_monotone_and_dominant() {
    common::check_em().unwrap();
}

#[test]
fn planted_component_wins() {
    let (lambda, grid) = common::planted_toy().unwrap();
    assert!(lambda >= 0.95, "{lambda}");
    assert!((lambda - grid).abs() <= 0.005, "{lambda} vs {grid}");
}

#[test]
fn single_component_gets_all_weight() {
    let lines = ["a b", "b a a"];
    let v = Vocab::from_sentences([&lines[..]]);
    let m = train_ngram(&lines, &v, 2, &[]).unwrap();
    let em = optimize_weights_em(&[m], &["a b a"], 1e-5, 100).unwrap();
    assert_eq!(em.weights, vec![1.0]);
}

#[test]
fn identical_components_keep_uniform_weights() {
    let events: Vec<Vec<f64>> = (1..20).map(|i| vec![0.01 * i as f64; 2]).collect();
    let em = optimize_on_events(&events, 1e-12, 50).unwrap();
    assert!((em.weights[0] - 0.5).abs() < 1e-12);
    let first = em.log_likelihoods[0];
    assert!(em.log_likelihoods.iter().all(|&l| (l - first).abs() < 1e-12));
}
