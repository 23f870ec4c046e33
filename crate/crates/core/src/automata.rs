//! Deterministic Moore machines and the algorithms the rest of the crate
//! builds on: execution, product-construction equivalence, partition
//! refinement minimization and canonical-form isomorphism.
//!
//! A DFA is represented as a Moore machine whose output alphabet is
//! `{Reject, Accept}`; see [`Dfa`].

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Index of a state inside a machine.
pub type StateId = usize;
/// Dense id of an input symbol, `0..alphabet.len()`.
pub type Symbol = usize;
/// Dense id of an output symbol, `0..output_alphabet.len()`.
pub type Output = usize;
/// A finite sequence of input symbols.
pub type Word = Vec<Symbol>;

/// Output id used for rejection in membership machines.
pub const REJECT: Output = 0;
/// Output id used for acceptance in membership machines.
pub const ACCEPT: Output = 1;

/// An ordered set of symbol display names. Ids are positions.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Alphabet(Vec<String>);

impl Alphabet {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(invalid("alphabet must contain at least one symbol"));
        }
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return Err(invalid(format!("alphabet contains duplicate symbol {name:?}")));
            }
        }
        Ok(Self(names))
    }

    /// The binary alphabet `{0, 1}`.
    pub fn binary() -> Self {
        Self(vec!["0".into(), "1".into()])
    }

    /// The unary alphabet `{0}`.
    pub fn unary() -> Self {
        Self(vec!["0".into()])
    }

    /// `{Reject, Accept}`, with ids [`REJECT`] and [`ACCEPT`].
    pub fn membership() -> Self {
        Self(vec!["Reject".into(), "Accept".into()])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.0[id]
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|n| n == name)
    }

    /// Parses a word written as concatenated single-character symbol names,
    /// e.g. `"0101"`.
    pub fn parse_word(&self, text: &str) -> Result<Word> {
        text.chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.id_of(c.encode_utf8(&mut buf))
                    .ok_or_else(|| invalid(format!("symbol {c:?} is not in the alphabet")))
            })
            .collect()
    }

    pub fn format_word(&self, word: &[Symbol]) -> String {
        if word.is_empty() {
            return "ε".to_string();
        }
        word.iter().map(|&s| self.name(s)).collect()
    }
}

/// A complete deterministic Moore machine.
///
/// The transition table has one row per state and one column per input
/// symbol. Machines are immutable once built.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MooreMachine {
    alphabet: Alphabet,
    output_alphabet: Alphabet,
    initial: StateId,
    transitions: Vec<Vec<StateId>>,
    outputs: Vec<Output>,
}

impl MooreMachine {
    pub fn new(
        alphabet: Alphabet,
        output_alphabet: Alphabet,
        initial: StateId,
        transitions: Vec<Vec<StateId>>,
        outputs: Vec<Output>,
    ) -> Result<Self> {
        let n = transitions.len();
        if n == 0 {
            return Err(invalid("machine must have at least one state"));
        }
        if initial >= n {
            return Err(invalid(format!("initial state {initial} outside 0..{n}")));
        }
        if outputs.len() != n {
            return Err(invalid(format!(
                "{} outputs given for {n} states",
                outputs.len()
            )));
        }
        for (q, row) in transitions.iter().enumerate() {
            if row.len() != alphabet.len() {
                return Err(invalid(format!(
                    "state {q} has {} transitions, alphabet has {} symbols",
                    row.len(),
                    alphabet.len()
                )));
            }
            if let Some(&t) = row.iter().find(|&&t| t >= n) {
                return Err(invalid(format!("transition from {q} targets unknown state {t}")));
            }
        }
        if let Some(&o) = outputs.iter().find(|&&o| o >= output_alphabet.len()) {
            return Err(invalid(format!("output id {o} outside output alphabet")));
        }
        Ok(Self {
            alphabet,
            output_alphabet,
            initial,
            transitions,
            outputs,
        })
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn output_alphabet(&self) -> &Alphabet {
        &self.output_alphabet
    }

    pub fn initial(&self) -> StateId {
        self.initial
    }

    pub fn num_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn states(&self) -> std::ops::Range<StateId> {
        0..self.transitions.len()
    }

    pub fn transitions(&self) -> &[Vec<StateId>] {
        &self.transitions
    }

    pub fn outputs(&self) -> &[Output] {
        &self.outputs
    }

    /// γ(q).
    pub fn output(&self, q: StateId) -> Output {
        self.outputs[q]
    }

    /// δ(q, σ), checked.
    pub fn step(&self, q: StateId, sym: Symbol) -> Result<StateId> {
        if q >= self.num_states() {
            return Err(invalid(format!("unknown state {q}")));
        }
        if sym >= self.alphabet.len() {
            return Err(invalid(format!("unknown symbol {sym}")));
        }
        Ok(self.transitions[q][sym])
    }

    /// δ̂(q, s), checked.
    pub fn delta_hat(&self, q: StateId, word: &[Symbol]) -> Result<StateId> {
        let mut cur = q;
        for &sym in word {
            cur = self.step(cur, sym)?;
        }
        Ok(cur)
    }

    /// Runs the machine from q0; the traces have `|word| + 1` entries,
    /// position 0 being the initial state and γ(q0).
    pub fn run(&self, word: &[Symbol]) -> Result<(Vec<StateId>, Vec<Output>)> {
        let mut states = Vec::with_capacity(word.len() + 1);
        let mut cur = self.initial;
        states.push(cur);
        for &sym in word {
            cur = self.step(cur, sym)?;
            states.push(cur);
        }
        let outputs = states.iter().map(|&q| self.outputs[q]).collect();
        Ok((states, outputs))
    }

    /// γ(δ̂(q0, s)).
    pub fn output_of(&self, word: &[Symbol]) -> Result<Output> {
        Ok(self.outputs[self.delta_hat(self.initial, word)?])
    }

    /// States reachable from q0, in BFS order (symbol-id tie-break).
    pub fn reachable(&self) -> Vec<StateId> {
        let mut seen = vec![false; self.num_states()];
        let mut order = vec![self.initial];
        seen[self.initial] = true;
        let mut i = 0;
        while i < order.len() {
            let q = order[i];
            for &t in &self.transitions[q] {
                if !seen[t] {
                    seen[t] = true;
                    order.push(t);
                }
            }
            i += 1;
        }
        order
    }

    /// Builds the same machine with a different output function.
    pub fn with_outputs(&self, output_alphabet: Alphabet, outputs: Vec<Output>) -> Result<Self> {
        Self::new(
            self.alphabet.clone(),
            output_alphabet,
            self.initial,
            self.transitions.clone(),
            outputs,
        )
    }

    /// Renders the machine in Graphviz DOT; node labels are output names.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph moore {\n  rankdir=LR;\n  __start [shape=point];\n");
        for q in self.states() {
            let _ = writeln!(
                out,
                "  q{q} [shape=circle, label=\"q{q}\\n{}\"];",
                self.output_alphabet.name(self.outputs[q])
            );
        }
        let _ = writeln!(out, "  __start -> q{};", self.initial);
        for q in self.states() {
            // merge parallel edges into one labelled edge
            let mut by_target: Vec<(StateId, Vec<&str>)> = Vec::new();
            for (sym, &t) in self.transitions[q].iter().enumerate() {
                match by_target.iter_mut().find(|(tt, _)| *tt == t) {
                    Some((_, labels)) => labels.push(self.alphabet.name(sym)),
                    None => by_target.push((t, vec![self.alphabet.name(sym)])),
                }
            }
            for (t, labels) in by_target {
                let _ = writeln!(out, "  q{q} -> q{t} [label=\"{}\"];", labels.join(","));
            }
        }
        out.push_str("}\n");
        out
    }

    pub fn to_json(&self) -> MachineJson {
        MachineJson {
            alphabet: self.alphabet.clone(),
            output_alphabet: self.output_alphabet.clone(),
            initial: self.initial,
            transitions: self.transitions.clone(),
            outputs: self.outputs.clone(),
        }
    }

    pub fn from_json(json: MachineJson) -> Result<Self> {
        Self::new(
            json.alphabet,
            json.output_alphabet,
            json.initial,
            json.transitions,
            json.outputs,
        )
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("machine serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let json: MachineJson = serde_json::from_str(text)?;
        Self::from_json(json)
    }
}

/// On-disk machine representation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineJson {
    pub alphabet: Alphabet,
    pub output_alphabet: Alphabet,
    pub initial: StateId,
    pub transitions: Vec<Vec<StateId>>,
    pub outputs: Vec<Output>,
}

/// A Moore machine over `{Reject, Accept}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dfa(MooreMachine);

impl Dfa {
    pub fn new(
        alphabet: Alphabet,
        initial: StateId,
        transitions: Vec<Vec<StateId>>,
        accepting: &[StateId],
    ) -> Result<Self> {
        let mut outputs = vec![REJECT; transitions.len()];
        for &q in accepting {
            if q >= outputs.len() {
                return Err(invalid(format!("accepting state {q} does not exist")));
            }
            outputs[q] = ACCEPT;
        }
        Ok(Self(MooreMachine::new(
            alphabet,
            Alphabet::membership(),
            initial,
            transitions,
            outputs,
        )?))
    }

    pub fn from_machine(machine: MooreMachine) -> Result<Self> {
        if machine.output_alphabet.len() != 2 {
            return Err(invalid("a DFA needs exactly two output symbols"));
        }
        Ok(Self(machine))
    }

    pub fn machine(&self) -> &MooreMachine {
        &self.0
    }

    pub fn into_machine(self) -> MooreMachine {
        self.0
    }

    pub fn is_accepting(&self, q: StateId) -> bool {
        self.0.outputs[q] == ACCEPT
    }

    pub fn accepts(&self, word: &[Symbol]) -> Result<bool> {
        Ok(self.0.output_of(word)? == ACCEPT)
    }

    /// States from which some accepting state is reachable.
    pub fn live_states(&self) -> Vec<bool> {
        let m = &self.0;
        let mut live: Vec<bool> = m.states().map(|q| self.is_accepting(q)).collect();
        loop {
            let mut changed = false;
            for q in m.states() {
                if !live[q] && m.transitions[q].iter().any(|&t| live[t]) {
                    live[q] = true;
                    changed = true;
                }
            }
            if !changed {
                return live;
            }
        }
    }

    /// The absorbing non-accepting state, if the DFA has one.
    pub fn garbage_state(&self) -> Option<StateId> {
        let m = &self.0;
        m.states().find(|&q| {
            !self.is_accepting(q) && m.transitions[q].iter().all(|&t| t == q)
        })
    }
}

/// Result of an equivalence check.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Equivalence {
    Equal,
    /// A shortest word on which the final outputs differ.
    Counterexample(Word),
}

/// Decides whether two machines produce identical output traces on every
/// word. Counterexamples are shortest, then lexicographically smallest by
/// symbol id.
pub fn equivalent(m1: &MooreMachine, m2: &MooreMachine) -> Result<Equivalence> {
    if m1.alphabet != m2.alphabet {
        return Err(invalid("machines have different input alphabets"));
    }
    if m1.output_alphabet != m2.output_alphabet {
        return Err(invalid("machines have different output alphabets"));
    }
    Ok(match product_search(m1, m1.initial, m2, m2.initial) {
        Some(word) => Equivalence::Counterexample(word),
        None => Equivalence::Equal,
    })
}

/// Shortest (then lexicographically smallest) word after which states `q1`
/// and `q2` of `m` produce different outputs, or `None` if they are
/// equivalent.
pub fn distinguishing_suffix(m: &MooreMachine, q1: StateId, q2: StateId) -> Option<Word> {
    product_search(m, q1, m, q2)
}

/// BFS over the product of two machines from `(s1, s2)`; parent pointers
/// reconstruct the first word reaching a pair with different outputs.
fn product_search(m1: &MooreMachine, s1: StateId, m2: &MooreMachine, s2: StateId) -> Option<Word> {
    let k = m1.alphabet.len();
    let start = (s1, s2);
    let mut parent: HashMap<(StateId, StateId), Option<((StateId, StateId), Symbol)>> =
        HashMap::new();
    parent.insert(start, None);
    let mut queue = VecDeque::from([start]);
    while let Some(pair @ (a, b)) = queue.pop_front() {
        if m1.outputs[a] != m2.outputs[b] {
            let mut word = Vec::new();
            let mut cur = pair;
            while let Some(Some((prev, sym))) = parent.get(&cur) {
                word.push(*sym);
                cur = *prev;
            }
            word.reverse();
            return Some(word);
        }
        for sym in 0..k {
            let next = (m1.transitions[a][sym], m2.transitions[b][sym]);
            if let std::collections::hash_map::Entry::Vacant(e) = parent.entry(next) {
                e.insert(Some((pair, sym)));
                queue.push_back(next);
            }
        }
    }
    None
}

/// Minimal machine with the same output traces.
///
/// Unreachable states are dropped, then states are merged by
/// output-respecting partition refinement (γ-classes as the initial blocks).
/// Blocks are numbered by their smallest original state id, so a machine that
/// is already minimal and fully reachable comes back unchanged.
pub fn minimize(m: &MooreMachine) -> MooreMachine {
    let mut reachable = m.reachable();
    reachable.sort_unstable();
    let k = m.alphabet.len();

    let mut block: Vec<usize> = vec![usize::MAX; m.num_states()];
    // initial partition: by output
    let mut by_output: HashMap<Output, usize> = HashMap::new();
    for &q in &reachable {
        let next = by_output.len();
        block[q] = *by_output.entry(m.outputs[q]).or_insert(next);
    }
    let mut num_blocks = by_output.len();
    loop {
        let mut signature_ids: HashMap<(usize, Vec<usize>), usize> = HashMap::new();
        let mut new_block = vec![usize::MAX; m.num_states()];
        for &q in &reachable {
            let sig: Vec<usize> = (0..k).map(|s| block[m.transitions[q][s]]).collect();
            let next = signature_ids.len();
            new_block[q] = *signature_ids.entry((block[q], sig)).or_insert(next);
        }
        let refined = signature_ids.len();
        block = new_block;
        if refined == num_blocks {
            break;
        }
        num_blocks = refined;
    }

    // number blocks by smallest member
    let mut renumber: HashMap<usize, StateId> = HashMap::new();
    let mut reps: Vec<StateId> = Vec::new();
    for &q in &reachable {
        if !renumber.contains_key(&block[q]) {
            renumber.insert(block[q], reps.len());
            reps.push(q);
        }
    }
    let transitions = reps
        .iter()
        .map(|&q| {
            m.transitions[q]
                .iter()
                .map(|&t| renumber[&block[t]])
                .collect()
        })
        .collect();
    let outputs = reps.iter().map(|&q| m.outputs[q]).collect();
    MooreMachine::new(
        m.alphabet.clone(),
        m.output_alphabet.clone(),
        renumber[&block[m.initial]],
        transitions,
        outputs,
    )
    .expect("minimization preserves well-formedness")
}

/// Relabels reachable states in BFS order from q0 (symbol-id tie-break).
pub fn canonical_form(m: &MooreMachine) -> MooreMachine {
    let order = m.reachable();
    let mut index = vec![usize::MAX; m.num_states()];
    for (i, &q) in order.iter().enumerate() {
        index[q] = i;
    }
    let transitions = order
        .iter()
        .map(|&q| m.transitions[q].iter().map(|&t| index[t]).collect())
        .collect();
    let outputs = order.iter().map(|&q| m.outputs[q]).collect();
    MooreMachine::new(
        m.alphabet.clone(),
        m.output_alphabet.clone(),
        0,
        transitions,
        outputs,
    )
    .expect("relabeling preserves well-formedness")
}

/// True iff the two machines are identical after canonical relabeling.
/// Both are expected to be minimal.
pub fn isomorphic(m1: &MooreMachine, m2: &MooreMachine) -> bool {
    canonical_form(m1) == canonical_form(m2)
}

impl From<Dfa> for MooreMachine {
    fn from(d: Dfa) -> Self {
        d.0
    }
}

impl TryFrom<MooreMachine> for Dfa {
    type Error = Error;

    fn try_from(m: MooreMachine) -> Result<Self> {
        Dfa::from_machine(m)
    }
}
