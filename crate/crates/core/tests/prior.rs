mod common;

#[test]
fn sixteen_layer_stack_is_exactly_causal() {
    common::causality_probe(16, 8).unwrap();
}

#[test]
fn shallow_stacks_are_exactly_causal() {
    for layers in 1..4 {
        common::causality_probe(layers, usize::MAX).unwrap();
    }
}

#[test]
fn fitted_prior_recovers_a_markov_source() {
    common::markov_recovery().unwrap();
}

#[test]
fn markov_source_itself_is_within_tolerance() {
    // the 0.05 bound leaves room for sampling noise at 10⁴ transitions
    let (tv, n) = common::transition_tv(&common::markov_sequences(500, 21, 9));
    assert_eq!(n, 10_000);
    assert!(tv < 0.02, "{tv}");
}
