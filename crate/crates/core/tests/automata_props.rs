mod common;

use common::{machine_strategy, words_of_len, FIXTURES};
use moorelens::automata::{equivalent, isomorphic, minimize, Equivalence, MooreMachine};
use moorelens::languages::{target_machine, TaskKind};
use proptest::prelude::*;

/// First word, by length then symbol order, on which the machines' outputs
/// differ, searched up to the product-size bound.
fn brute_force_counterexample(m1: &MooreMachine, m2: &MooreMachine) -> Option<Vec<usize>> {
    let bound = m1.num_states() * m2.num_states();
    (0..=bound)
        .flat_map(|len| words_of_len(2, len))
        .find(|w| m1.output_of(w).unwrap() != m2.output_of(w).unwrap())
}

/// Copy of `m` with state `q` duplicated and every other transition into `q`
/// redirected to the copy.
fn with_duplicate(m: &MooreMachine, q: usize) -> MooreMachine {
    let n = m.num_states();
    let mut transitions = m.transitions().to_vec();
    let mut outputs = m.outputs().to_vec();
    transitions.push(transitions[q].clone());
    outputs.push(outputs[q]);
    let mut flip = false;
    for row in transitions.iter_mut() {
        for t in row.iter_mut() {
            if *t == q {
                if flip {
                    *t = n;
                }
                flip = !flip;
            }
        }
    }
    MooreMachine::new(m.alphabet().clone(), m.output_alphabet().clone(), m.initial(), transitions, outputs).unwrap()
}

fn all_fixtures() -> Vec<MooreMachine> {
    let mut out = Vec::new();
    for task in [TaskKind::StatePrediction, TaskKind::Membership, TaskKind::NextChar] {
        for lang in FIXTURES {
            out.push(target_machine(lang, task).unwrap());
        }
    }
    out
}

#[test]
fn fixtures_are_equivalent_to_their_minimisation() {
    for m in all_fixtures() {
        assert_eq!(equivalent(&m, &minimize(&m)).unwrap(), Equivalence::Equal);
        let bigger = with_duplicate(&m, m.initial());
        assert_eq!(equivalent(&m, &bigger).unwrap(), Equivalence::Equal);
        assert!(isomorphic(&minimize(&bigger), &minimize(&m)));
    }
}

#[test]
fn fixture_pairs_isomorphic_iff_equivalent() {
    let fixtures = all_fixtures();
    for a in &fixtures {
        for b in &fixtures {
            if a.alphabet() != b.alphabet() || a.output_alphabet() != b.output_alphabet() {
                continue;
            }
            let eq = equivalent(a, b).unwrap() == Equivalence::Equal;
            assert_eq!(isomorphic(&minimize(a), &minimize(b)), eq);
        }
    }
}

proptest! {
    #[test]
    fn delta_hat_composes(m in machine_strategy(6), s1 in proptest::collection::vec(0usize..2, 0..12),
                          s2 in proptest::collection::vec(0usize..2, 0..12)) {
        for q in m.states() {
            let whole: Vec<usize> = s1.iter().chain(&s2).copied().collect();
            let mid = m.delta_hat(q, &s1).unwrap();
            prop_assert_eq!(m.delta_hat(q, &whole).unwrap(), m.delta_hat(mid, &s2).unwrap());
        }
    }

    #[test]
    fn counterexamples_are_shortest_then_lexicographic(m1 in machine_strategy(4), m2 in machine_strategy(4)) {
        let expected = brute_force_counterexample(&m1, &m2);
        match equivalent(&m1, &m2).unwrap() {
            Equivalence::Equal => prop_assert_eq!(expected, None),
            Equivalence::Counterexample(c) => prop_assert_eq!(Some(c), expected),
        }
    }

    #[test]
    fn minimisation_preserves_behaviour(m in machine_strategy(7)) {
        let min = minimize(&m);
        prop_assert_eq!(equivalent(&m, &min).unwrap(), Equivalence::Equal);
        prop_assert!(min.num_states() <= m.reachable().len());
        prop_assert!(isomorphic(&minimize(&min), &min));
    }

    #[test]
    fn isomorphic_minimisations_iff_equivalent(m1 in machine_strategy(4), m2 in machine_strategy(4), dup in 0usize..4) {
        let eq = equivalent(&m1, &m2).unwrap() == Equivalence::Equal;
        prop_assert_eq!(isomorphic(&minimize(&m1), &minimize(&m2)), eq);
        let copy = with_duplicate(&m1, dup % m1.num_states());
        prop_assert!(isomorphic(&minimize(&m1), &minimize(&copy)));
    }
}
