#![allow(dead_code)]

use moorelens::automata::{Alphabet, MooreMachine};
use moorelens::languages::LanguageSpec;
use proptest::prelude::*;

pub const FIXTURES: [LanguageSpec; 9] = [
    LanguageSpec::Ones,
    LanguageSpec::First,
    LanguageSpec::Dyck(1),
    LanguageSpec::Dyck(2),
    LanguageSpec::ModLength(2),
    LanguageSpec::ModLength(3),
    LanguageSpec::Parity,
    LanguageSpec::Gridworld(1),
    LanguageSpec::Gridworld(2),
];

/// Random complete machines over `{0, 1}` with up to `max_states` states and
/// up to three output labels.
pub fn machine_strategy(max_states: usize) -> impl Strategy<Value = MooreMachine> {
    (1..=max_states, 1usize..=3).prop_flat_map(|(n, k)| {
        (
            proptest::collection::vec(proptest::collection::vec(0..n, 2), n),
            proptest::collection::vec(0..k, n),
        )
            .prop_map(move |(transitions, outputs)| {
                let out = Alphabet::new((0..3).map(|i| format!("o{i}"))).unwrap();
                MooreMachine::new(Alphabet::binary(), out, 0, transitions, outputs).unwrap()
            })
    })
}

/// All words over `k` symbols of length `len`, in lexicographic order.
pub fn words_of_len(k: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|w| {
                (0..k).map(move |a| {
                    let mut v = w.clone();
                    v.push(a);
                    v
                })
            })
            .collect();
    }
    out
}
