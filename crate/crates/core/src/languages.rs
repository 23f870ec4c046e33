//! The studied language families, their task-specific target machines, and
//! structural utilities over machines (reset sequences, returning suffixes,
//! shortest access prefixes).

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::automata::{minimize, Alphabet, Dfa, MooreMachine, StateId, Symbol, Word};
use crate::error::{invalid, Error, Result};

/// A regular language from the studied families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LanguageSpec {
    /// `1*`
    Ones,
    /// `1(0|1)*`
    First,
    /// Balanced sequences of nesting depth at most `i` (0 opens, 1 closes).
    Dyck(usize),
    /// `Dyck(i)` without its garbage state; invalid moves become self-loops.
    Gridworld(usize),
    /// Unary sequences whose length is divisible by `q`.
    ModLength(usize),
    /// Binary sequences with an odd number of ones.
    Parity,
}

impl LanguageSpec {
    pub fn validate(self) -> Result<Self> {
        match self {
            Self::Dyck(0) | Self::Gridworld(0) => Err(invalid("depth must be at least 1")),
            Self::ModLength(q) if q < 2 => Err(invalid("modulus must be at least 2")),
            _ => Ok(self),
        }
    }

    pub fn alphabet(self) -> Alphabet {
        match self {
            Self::ModLength(_) => Alphabet::unary(),
            _ => Alphabet::binary(),
        }
    }

    /// The minimal DFA of the language, states numbered as in the usual
    /// presentation (garbage state last).
    pub fn target_dfa(self) -> Result<Dfa> {
        self.validate()?;
        let sigma = self.alphabet();
        match self {
            Self::Ones => Dfa::new(sigma, 0, vec![vec![1, 0], vec![1, 1]], &[0]),
            Self::First => Dfa::new(
                sigma,
                0,
                vec![vec![2, 1], vec![1, 1], vec![2, 2]],
                &[1],
            ),
            Self::Dyck(depth) => {
                let garbage = depth + 1;
                let transitions = (0..=garbage)
                    .map(|d| {
                        if d == garbage {
                            vec![garbage, garbage]
                        } else {
                            let open = if d < depth { d + 1 } else { garbage };
                            let close = if d > 0 { d - 1 } else { garbage };
                            vec![open, close]
                        }
                    })
                    .collect();
                Dfa::new(sigma, 0, transitions, &[0])
            }
            Self::Gridworld(depth) => gridworld_from_dyck(&Self::Dyck(depth).target_dfa()?)
                .and_then(Dfa::from_machine),
            Self::ModLength(q) => {
                let transitions = (0..q).map(|r| vec![(r + 1) % q]).collect();
                Dfa::new(sigma, 0, transitions, &[0])
            }
            Self::Parity => Dfa::new(sigma, 0, vec![vec![0, 1], vec![1, 0]], &[1]),
        }
    }

    /// Direct membership predicate, independent of the machine construction.
    pub fn contains(self, word: &[Symbol]) -> bool {
        match self {
            Self::Ones => word.iter().all(|&s| s == 1),
            Self::First => word.first() == Some(&1),
            Self::Dyck(max) => {
                let mut depth = 0usize;
                for &s in word {
                    if s == 0 {
                        depth += 1;
                        if depth > max {
                            return false;
                        }
                    } else if depth == 0 {
                        return false;
                    } else {
                        depth -= 1;
                    }
                }
                depth == 0
            }
            Self::Gridworld(max) => {
                let mut depth = 0usize;
                for &s in word {
                    if s == 0 {
                        depth = (depth + 1).min(max);
                    } else {
                        depth = depth.saturating_sub(1);
                    }
                }
                depth == 0
            }
            Self::ModLength(q) => word.len() % q == 0,
            Self::Parity => word.iter().filter(|&&s| s == 1).count() % 2 == 1,
        }
    }
}

impl fmt::Display for LanguageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ones => write!(f, "ones"),
            Self::First => write!(f, "first"),
            Self::Dyck(i) => write!(f, "dyck:{i}"),
            Self::Gridworld(i) => write!(f, "grid:{i}"),
            Self::ModLength(q) => write!(f, "mod:{q}"),
            Self::Parity => write!(f, "parity"),
        }
    }
}

impl FromStr for LanguageSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (family, param) = match s.split_once(':') {
            Some((f, p)) => {
                let n: usize = p
                    .parse()
                    .map_err(|_| invalid(format!("bad language parameter in {s:?}")))?;
                (f.to_string(), Some(n))
            }
            None => (s.clone(), None),
        };
        let spec = match (family.as_str(), param) {
            ("ones", None) => Self::Ones,
            ("first", None) => Self::First,
            ("parity", None) => Self::Parity,
            ("dyck", Some(i)) => Self::Dyck(i),
            ("grid", Some(i)) => Self::Gridworld(i),
            ("mod", Some(q)) => Self::ModLength(q),
            _ => return Err(invalid(format!("unknown language {s:?}"))),
        };
        spec.validate()
    }
}

impl TryFrom<String> for LanguageSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LanguageSpec> for String {
    fn from(l: LanguageSpec) -> String {
        l.to_string()
    }
}

/// The sequence task a transformer is trained on, each a Moore output function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Output = set of valid next symbols plus Accept, as a bitmask.
    NextChar,
    /// Output = the DFA state itself.
    StatePrediction,
    /// Output = Accept / Reject.
    Membership,
}

impl TaskKind {
    pub fn is_multilabel(self) -> bool {
        matches!(self, Self::NextChar)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NextChar => "char",
            Self::StatePrediction => "state",
            Self::Membership => "membership",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "char" | "next-char" | "nextchar" => Ok(Self::NextChar),
            "state" | "state-prediction" => Ok(Self::StatePrediction),
            "membership" | "member" => Ok(Self::Membership),
            other => Err(invalid(format!("unknown task {other:?}"))),
        }
    }
}

/// Output alphabet of next-character bitmasks over `Σ ∪ {Accept}`.
///
/// Bit `i` is symbol `i`, bit `|Σ|` is Accept. Names list the bits in that
/// order, e.g. `"101"` for "0 valid, 1 invalid, end-of-sequence valid".
pub fn next_char_alphabet(num_symbols: usize) -> Alphabet {
    let bits = num_symbols + 1;
    let names = (0..1usize << bits).map(|mask| {
        (0..bits)
            .map(|b| if mask >> b & 1 == 1 { '1' } else { '0' })
            .collect::<String>()
    });
    Alphabet::new(names).expect("bitmask names are distinct")
}

/// Output alphabet `q0, …, q{n-1}` used by state prediction.
pub fn state_alphabet(num_states: usize) -> Alphabet {
    Alphabet::new((0..num_states).map(|q| format!("q{q}"))).expect("state names are distinct")
}

/// Attaches the task's output function to a DFA and minimizes.
pub fn task_machine(dfa: &Dfa, task: TaskKind) -> Result<MooreMachine> {
    Ok(minimize(&raw_task_machine(dfa, task)?))
}

/// The DFA's transition structure with the task's output function, before
/// minimization (state ids match the DFA's).
pub fn raw_task_machine(dfa: &Dfa, task: TaskKind) -> Result<MooreMachine> {
    let m = dfa.machine();
    match task {
        TaskKind::Membership => Ok(m.clone()),
        TaskKind::StatePrediction => {
            m.with_outputs(state_alphabet(m.num_states()), m.states().collect())
        }
        TaskKind::NextChar => {
            let live = dfa.live_states();
            let k = m.alphabet().len();
            let outputs = m
                .states()
                .map(|q| {
                    let mut mask = 0usize;
                    for sym in 0..k {
                        if live[m.transitions()[q][sym]] {
                            mask |= 1 << sym;
                        }
                    }
                    if dfa.is_accepting(q) {
                        mask |= 1 << k;
                    }
                    mask
                })
                .collect();
            m.with_outputs(next_char_alphabet(k), outputs)
        }
    }
}

/// The minimal Moore machine of a language under a task.
pub fn target_machine(spec: LanguageSpec, task: TaskKind) -> Result<MooreMachine> {
    task_machine(&spec.target_dfa()?, task)
}

/// The task machine of a language with its garbage state removed and the
/// transitions into it turned into self-loops. Languages without a garbage
/// state return the ordinary target.
///
/// This is the machine a model trained only on positive examples tends to
/// learn for next-character prediction.
pub fn garbage_free_machine(spec: LanguageSpec, task: TaskKind) -> Result<MooreMachine> {
    let dfa = spec.target_dfa()?;
    let raw = raw_task_machine(&dfa, task)?;
    match dfa.garbage_state() {
        Some(g) => Ok(minimize(&reroute_to_self_loops(&raw, g)?)),
        None => Ok(minimize(&raw)),
    }
}

/// Deletes `removed` and reroutes every transition that entered it into a
/// self-loop on its source.
pub fn reroute_to_self_loops(m: &MooreMachine, removed: StateId) -> Result<MooreMachine> {
    if removed >= m.num_states() {
        return Err(invalid(format!("unknown state {removed}")));
    }
    if removed == m.initial() {
        return Err(invalid("cannot remove the initial state"));
    }
    let shift = |q: StateId| if q > removed { q - 1 } else { q };
    let mut transitions = Vec::with_capacity(m.num_states() - 1);
    let mut outputs = Vec::with_capacity(m.num_states() - 1);
    for q in m.states().filter(|&q| q != removed) {
        transitions.push(
            m.transitions()[q]
                .iter()
                .map(|&t| if t == removed { shift(q) } else { shift(t) })
                .collect(),
        );
        outputs.push(m.output(q));
    }
    MooreMachine::new(
        m.alphabet().clone(),
        m.output_alphabet().clone(),
        shift(m.initial()),
        transitions,
        outputs,
    )
}

/// Builds the gridworld machine `G_i` from the depth-bounded Dyck DFA `D_i`.
pub fn gridworld_from_dyck(d: &Dfa) -> Result<MooreMachine> {
    let garbage = d
        .garbage_state()
        .ok_or_else(|| invalid("machine has no garbage state"))?;
    reroute_to_self_loops(d.machine(), garbage)
}

/// Returns `q_r` if `word` sends every state to `q_r`.
pub fn is_reset_sequence(m: &MooreMachine, word: &[Symbol]) -> Option<StateId> {
    let mut states = m.states().map(|q| m.delta_hat(q, word));
    let first = states.next()?.ok()?;
    for q in states {
        if q.ok()? != first {
            return None;
        }
    }
    Some(first)
}

/// Beam-search enumeration of returning suffixes of `q`: words `s` with
/// δ̂(q, s) = q, up to `max_len` symbols.
///
/// Partial paths that can no longer return to `q` are dropped; when more than
/// `beam_width` remain at a depth, a uniformly random subset (seeded) is kept.
/// The empty word is always the first result.
pub fn returning_suffixes(
    m: &MooreMachine,
    q: StateId,
    max_len: usize,
    beam_width: usize,
    seed: u64,
) -> Result<Vec<Word>> {
    if q >= m.num_states() {
        return Err(invalid(format!("unknown state {q}")));
    }
    if beam_width == 0 {
        return Err(invalid("beam width must be at least 1"));
    }
    let can_return = states_reaching(m, q);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = vec![Word::new()];
    let mut beam: Vec<(Word, StateId)> = vec![(Word::new(), q)];
    for _ in 0..max_len {
        let mut candidates = Vec::with_capacity(beam.len() * m.alphabet().len());
        for (word, state) in &beam {
            for (sym, &next) in m.transitions()[*state].iter().enumerate() {
                if can_return[next] {
                    let mut w = word.clone();
                    w.push(sym);
                    candidates.push((w, next));
                }
            }
        }
        if candidates.len() > beam_width {
            let mut keep = index::sample(&mut rng, candidates.len(), beam_width).into_vec();
            keep.sort_unstable();
            let mut slots: Vec<Option<(Word, StateId)>> =
                candidates.into_iter().map(Some).collect();
            candidates = keep.into_iter().filter_map(|i| slots[i].take()).collect();
        }
        results.extend(
            candidates
                .iter()
                .filter(|(_, s)| *s == q)
                .map(|(w, _)| w.clone()),
        );
        if candidates.is_empty() {
            break;
        }
        beam = candidates;
    }
    Ok(results)
}

fn states_reaching(m: &MooreMachine, target: StateId) -> Vec<bool> {
    let mut reach = vec![false; m.num_states()];
    reach[target] = true;
    loop {
        let mut changed = false;
        for q in m.states() {
            if !reach[q] && m.transitions()[q].iter().any(|&t| reach[t]) {
                reach[q] = true;
                changed = true;
            }
        }
        if !changed {
            return reach;
        }
    }
}

/// Shortest word leading from q0 to `q` (lexicographic tie-break).
pub fn shortest_prefix_to(m: &MooreMachine, q: StateId) -> Result<Word> {
    if q >= m.num_states() {
        return Err(invalid(format!("unknown state {q}")));
    }
    let mut parent: Vec<Option<(StateId, Symbol)>> = vec![None; m.num_states()];
    let mut seen = vec![false; m.num_states()];
    seen[m.initial()] = true;
    let mut queue = VecDeque::from([m.initial()]);
    while let Some(cur) = queue.pop_front() {
        if cur == q {
            let mut word = Word::new();
            let mut at = cur;
            while let Some((prev, sym)) = parent[at] {
                word.push(sym);
                at = prev;
            }
            word.reverse();
            return Ok(word);
        }
        for (sym, &next) in m.transitions()[cur].iter().enumerate() {
            if !seen[next] {
                seen[next] = true;
                parent[next] = Some((cur, sym));
                queue.push_back(next);
            }
        }
    }
    Err(invalid(format!("state {q} is unreachable")))
}

/// Shortest word whose output differs from γ(q0), if any. Together with ε it
/// forms a pair of starting examples with distinct outputs.
pub fn distinct_output_example(m: &MooreMachine) -> Option<Word> {
    let q0_out = m.output(m.initial());
    m.reachable()
        .into_iter()
        .filter(|&q| m.output(q) != q0_out)
        .filter_map(|q| shortest_prefix_to(m, q).ok())
        .min_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::automata::{equivalent, isomorphic, Equivalence, ACCEPT};

    const ALL: [LanguageSpec; 9] = [
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

    fn all_words(k: usize, max_len: usize) -> Vec<Word> {
        let mut out = vec![Word::new()];
        let mut frontier = vec![Word::new()];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for w in &frontier {
                for s in 0..k {
                    let mut v = w.clone();
                    v.push(s);
                    next.push(v);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    #[test]
    fn target_sizes() {
        let expected = [2, 3, 3, 4, 2, 3, 2, 2, 3];
        for (spec, n) in ALL.iter().zip(expected) {
            for task in [TaskKind::StatePrediction, TaskKind::Membership, TaskKind::NextChar] {
                let m = target_machine(*spec, task).unwrap();
                assert_eq!(m.num_states(), n, "{spec} {task}");
            }
        }
    }

    #[test]
    fn targets_are_minimal() {
        for spec in ALL {
            for task in [TaskKind::StatePrediction, TaskKind::Membership, TaskKind::NextChar] {
                let m = target_machine(spec, task).unwrap();
                assert!(isomorphic(&minimize(&m), &m));
                assert_eq!(minimize(&m).num_states(), m.num_states());
            }
        }
    }

    #[test]
    fn membership_matches_direct_predicates() {
        for spec in ALL {
            let m = target_machine(spec, TaskKind::Membership).unwrap();
            let k = m.alphabet().len();
            let max_len = if k == 1 { 30 } else { 12 };
            for w in all_words(k, max_len) {
                assert_eq!(
                    m.output_of(&w).unwrap() == ACCEPT,
                    spec.contains(&w),
                    "{spec} on {w:?}"
                );
            }
        }
    }

    #[test]
    fn dyck1_next_char_matches_figure() {
        let m = target_machine(LanguageSpec::Dyck(1), TaskKind::NextChar).unwrap();
        let names: Vec<&str> = m.states().map(|q| m.output_alphabet().name(m.output(q))).collect();
        // depth0: 0 valid, 1 invalid, end valid; depth1: only 1 valid; garbage: nothing
        assert_eq!(names, vec!["101", "010", "000"]);
        assert_eq!(m.transitions(), &[vec![1, 2], vec![2, 0], vec![2, 2]]);
    }

    #[test]
    fn gridworld_sizes_and_liveness() {
        let g1 = gridworld_from_dyck(&LanguageSpec::Dyck(1).target_dfa().unwrap()).unwrap();
        let g2 = gridworld_from_dyck(&LanguageSpec::Dyck(2).target_dfa().unwrap()).unwrap();
        assert_eq!(g1.num_states(), 2);
        assert_eq!(g2.num_states(), 3);
        let g2 = Dfa::from_machine(g2).unwrap();
        assert!(g2.live_states().iter().all(|&l| l));
        assert!(g2.garbage_state().is_none());
        assert!(gridworld_from_dyck(&LanguageSpec::Parity.target_dfa().unwrap()).is_err());
    }

    #[test]
    fn gridworld_state_examples() {
        // the same suffix lands in different states depending on what precedes it
        let g2 = target_machine(LanguageSpec::Gridworld(2), TaskKind::StatePrediction).unwrap();
        let a = Alphabet::binary();
        assert_eq!(g2.delta_hat(0, &a.parse_word("010101").unwrap()).unwrap(), 0);
        assert_eq!(g2.delta_hat(0, &a.parse_word("0010101").unwrap()).unwrap(), 1);
        assert_eq!(g2.delta_hat(0, &a.parse_word("0101010").unwrap()).unwrap(), 1);
        assert_eq!(g2.delta_hat(0, &a.parse_word("0010").unwrap()).unwrap(), 2);
    }

    #[test]
    fn dyck_vs_gridworld_counterexample() {
        let d1 = target_machine(LanguageSpec::Dyck(1), TaskKind::Membership).unwrap();
        let g1 = target_machine(LanguageSpec::Gridworld(1), TaskKind::Membership).unwrap();
        let Equivalence::Counterexample(c) = equivalent(&d1, &g1).unwrap() else {
            panic!("D1 and G1 differ");
        };
        // brute-force oracle: first word, by length then lexicographically, where they disagree
        let oracle = all_words(2, 4)
            .into_iter()
            .find(|w| d1.output_of(w).unwrap() != g1.output_of(w).unwrap())
            .unwrap();
        assert_eq!(c, oracle);
        assert_eq!(c, vec![1]);
    }

    #[test]
    fn reset_sequences() {
        let g1 = target_machine(LanguageSpec::Gridworld(1), TaskKind::StatePrediction).unwrap();
        let g2 = target_machine(LanguageSpec::Gridworld(2), TaskKind::StatePrediction).unwrap();
        assert!(is_reset_sequence(&g2, &[0, 0]).is_some());
        assert!(is_reset_sequence(&g2, &[1, 1]).is_some());
        assert!(is_reset_sequence(&g2, &[0, 1]).is_none());
        assert!(is_reset_sequence(&g2, &[1, 0]).is_none());
        assert!(is_reset_sequence(&g1, &[0]).is_some());
        assert!(is_reset_sequence(&g1, &[1]).is_some());
        let ones = target_machine(LanguageSpec::Ones, TaskKind::StatePrediction).unwrap();
        assert_eq!(is_reset_sequence(&ones, &[0]), Some(1));
    }

    #[test]
    fn returning_suffix_examples() {
        let parity = target_machine(LanguageSpec::Parity, TaskKind::StatePrediction).unwrap();
        assert_eq!(returning_suffixes(&parity, 1, 0, 3, 0).unwrap(), vec![Word::new()]);
        let got = returning_suffixes(&parity, 0, 2, 64, 0).unwrap();
        assert_eq!(got, vec![vec![], vec![0], vec![0, 0], vec![1, 1]]);
        assert!(returning_suffixes(&parity, 0, 2, 0, 0).is_err());
    }

    #[test]
    fn returning_suffixes_return_and_respect_beam() {
        for spec in ALL {
            let m = target_machine(spec, TaskKind::StatePrediction).unwrap();
            for q in m.states() {
                let a = returning_suffixes(&m, q, 40, 5, 11).unwrap();
                let b = returning_suffixes(&m, q, 40, 5, 11).unwrap();
                assert_eq!(a, b);
                for w in &a {
                    assert_eq!(m.delta_hat(q, w).unwrap(), q);
                }
                for len in 1..=40 {
                    assert!(a.iter().filter(|w| w.len() == len).count() <= 5);
                }
            }
        }
    }

    #[test]
    fn shortest_prefixes() {
        let first = target_machine(LanguageSpec::First, TaskKind::StatePrediction).unwrap();
        assert_eq!(shortest_prefix_to(&first, 1).unwrap(), vec![1]);
        assert_eq!(shortest_prefix_to(&first, 0).unwrap(), Word::new());
        let d2 = target_machine(LanguageSpec::Dyck(2), TaskKind::StatePrediction).unwrap();
        assert_eq!(shortest_prefix_to(&d2, 2).unwrap(), vec![0, 0]);
        assert_eq!(shortest_prefix_to(&d2, 3).unwrap(), vec![1]);
        let unreachable = MooreMachine::new(
            Alphabet::unary(),
            state_alphabet(2),
            0,
            vec![vec![0], vec![1]],
            vec![0, 1],
        )
        .unwrap();
        assert!(shortest_prefix_to(&unreachable, 1).is_err());
    }

    #[test]
    fn garbage_free_d1_is_g1_shaped() {
        let m = garbage_free_machine(LanguageSpec::Dyck(1), TaskKind::NextChar).unwrap();
        assert_eq!(m.num_states(), 2);
        let g1 = target_machine(LanguageSpec::Gridworld(1), TaskKind::StatePrediction).unwrap();
        assert_eq!(m.transitions(), g1.transitions());
        let names: Vec<&str> = m.states().map(|q| m.output_alphabet().name(m.output(q))).collect();
        assert_eq!(names, vec!["101", "010"]);
    }

    #[test]
    fn language_string_parsing() {
        for s in ["ones", "first", "dyck:2", "grid:2", "mod:3", "parity"] {
            assert_eq!(s.parse::<LanguageSpec>().unwrap().to_string(), s);
        }
        assert!("dyck:0".parse::<LanguageSpec>().is_err());
        assert!("mod:1".parse::<LanguageSpec>().is_err());
        assert!("dyck".parse::<LanguageSpec>().is_err());
        assert!("nope".parse::<LanguageSpec>().is_err());
        assert_eq!("state".parse::<TaskKind>().unwrap(), TaskKind::StatePrediction);
    }

    #[test]
    fn distinct_examples() {
        let m = target_machine(LanguageSpec::First, TaskKind::Membership).unwrap();
        assert_eq!(distinct_output_example(&m), Some(vec![1]));
        let c2 = target_machine(LanguageSpec::ModLength(2), TaskKind::Membership).unwrap();
        assert_eq!(distinct_output_example(&c2), Some(vec![0]));
    }
}
