//! Angluin's L* for Moore machines: an observation table over access words S
//! and distinguishing suffixes E, repaired until closed and consistent, and
//! refined with counterexamples from an equivalence oracle.

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use log::debug;
use serde::Serialize;

use crate::automata::{equivalent, Alphabet, Equivalence, MooreMachine, Output, Symbol, Word};
use crate::error::{Error, Result};

/// The minimally adequate teacher L* talks to.
pub trait Teacher {
    fn input_alphabet(&self) -> &Alphabet;

    fn output_alphabet(&self) -> &Alphabet;

    /// Output after reading `word`; must be deterministic.
    fn output_query(&mut self, word: &[Symbol]) -> Result<Output>;

    fn equivalence_query(&mut self, hypothesis: &MooreMachine) -> Result<Equivalence>;
}

/// A perfect teacher that answers from a known machine.
#[derive(Clone, Debug)]
pub struct MachineTeacher {
    target: MooreMachine,
}

impl MachineTeacher {
    pub fn new(target: MooreMachine) -> Self {
        Self { target }
    }
}

impl Teacher for MachineTeacher {
    fn input_alphabet(&self) -> &Alphabet {
        self.target.alphabet()
    }

    fn output_alphabet(&self) -> &Alphabet {
        self.target.output_alphabet()
    }

    fn output_query(&mut self, word: &[Symbol]) -> Result<Output> {
        self.target.output_of(word)
    }

    fn equivalence_query(&mut self, hypothesis: &MooreMachine) -> Result<Equivalence> {
        equivalent(hypothesis, &self.target)
    }
}

/// Two equal rows whose one-symbol extensions differ on a suffix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Inconsistency {
    pub s1: Word,
    pub s2: Word,
    pub symbol: Symbol,
    pub suffix: Word,
}

fn concat(a: &[Symbol], b: &[Symbol]) -> Word {
    let mut w = Vec::with_capacity(a.len() + b.len());
    w.extend_from_slice(a);
    w.extend_from_slice(b);
    w
}

/// The (S, E, T) triple. `T` is stored as a map from full words, so cells
/// shared between rows are queried once.
#[derive(Clone, Debug)]
pub struct ObservationTable {
    alphabet: Alphabet,
    output_alphabet: Alphabet,
    s: Vec<Word>,
    s_set: HashSet<Word>,
    e: Vec<Word>,
    t: HashMap<Word, Output>,
}

impl ObservationTable {
    /// S = E = {ε} with no cells filled.
    pub fn new(alphabet: Alphabet, output_alphabet: Alphabet) -> Self {
        Self {
            alphabet,
            output_alphabet,
            s: vec![vec![]],
            s_set: HashSet::from([vec![]]),
            e: vec![vec![]],
            t: HashMap::new(),
        }
    }

    pub fn access_words(&self) -> &[Word] {
        &self.s
    }

    pub fn suffixes(&self) -> &[Word] {
        &self.e
    }

    pub fn cells(&self) -> &HashMap<Word, Output> {
        &self.t
    }

    /// Adds `word` and all its prefixes to S; returns how many were new.
    pub fn add_prefixes(&mut self, word: &[Symbol]) -> usize {
        let mut added = 0;
        for len in 0..=word.len() {
            let p = word[..len].to_vec();
            if self.s_set.insert(p.clone()) {
                self.s.push(p);
                added += 1;
            }
        }
        added
    }

    /// Adds `suffix` and all its suffixes to E; returns how many were new.
    pub fn add_suffixes(&mut self, suffix: &[Symbol]) -> usize {
        let mut added = 0;
        for start in (0..=suffix.len()).rev() {
            let e = suffix[start..].to_vec();
            if !self.e.contains(&e) {
                self.e.push(e);
                added += 1;
            }
        }
        added
    }

    /// Rows the table is defined on: S followed by the members of S·Σ
    /// that are not already in S.
    pub fn row_words(&self) -> Vec<Word> {
        let mut rows = self.s.clone();
        for s in &self.s {
            for a in 0..self.alphabet.len() {
                let w = concat(s, &[a]);
                if !self.s_set.contains(&w) {
                    rows.push(w);
                }
            }
        }
        rows
    }

    /// Words whose cells are not yet known, in a deterministic order.
    pub fn missing_cells(&self) -> Vec<Word> {
        let mut seen = HashSet::new();
        let mut missing = Vec::new();
        for r in self.row_words() {
            for e in &self.e {
                let w = concat(&r, e);
                if !self.t.contains_key(&w) && seen.insert(w.clone()) {
                    missing.push(w);
                }
            }
        }
        missing
    }

    pub fn set_cell(&mut self, word: Word, output: Output) {
        self.t.insert(word, output);
    }

    /// Queries every missing cell through `oracle`.
    pub fn fill(&mut self, mut oracle: impl FnMut(&[Symbol]) -> Result<Output>) -> Result<()> {
        for w in self.missing_cells() {
            let o = oracle(&w)?;
            self.t.insert(w, o);
        }
        Ok(())
    }

    pub fn row(&self, word: &[Symbol]) -> Result<Vec<Output>> {
        self.e
            .iter()
            .map(|e| {
                let w = concat(word, e);
                self.t.get(&w).copied().ok_or_else(|| {
                    Error::ContractViolation(format!(
                        "cell {} is not filled",
                        self.alphabet.format_word(&w)
                    ))
                })
            })
            .collect()
    }

    /// A pair (s, σ) whose row(s·σ) matches no row of S, if any.
    pub fn find_unclosed(&self) -> Result<Option<(Word, Symbol)>> {
        let rows: HashSet<Vec<Output>> = self.s.iter().map(|s| self.row(s)).collect::<Result<_>>()?;
        for s in &self.s {
            for a in 0..self.alphabet.len() {
                if !rows.contains(&self.row(&concat(s, &[a]))?) {
                    return Ok(Some((s.clone(), a)));
                }
            }
        }
        Ok(None)
    }

    pub fn is_closed(&self) -> Result<bool> {
        Ok(self.find_unclosed()?.is_none())
    }

    /// Two access words with equal rows whose extensions by some symbol
    /// differ on some suffix, if any.
    pub fn find_inconsistency(&self) -> Result<Option<Inconsistency>> {
        let rows: Vec<Vec<Output>> = self.s.iter().map(|s| self.row(s)).collect::<Result<_>>()?;
        for i in 0..self.s.len() {
            for j in i + 1..self.s.len() {
                if rows[i] != rows[j] {
                    continue;
                }
                for a in 0..self.alphabet.len() {
                    let ra = self.row(&concat(&self.s[i], &[a]))?;
                    let rb = self.row(&concat(&self.s[j], &[a]))?;
                    if let Some(k) = (0..self.e.len()).find(|&k| ra[k] != rb[k]) {
                        return Ok(Some(Inconsistency {
                            s1: self.s[i].clone(),
                            s2: self.s[j].clone(),
                            symbol: a,
                            suffix: self.e[k].clone(),
                        }));
                    }
                }
            }
        }
        Ok(None)
    }

    pub fn is_consistent(&self) -> Result<bool> {
        Ok(self.find_inconsistency()?.is_none())
    }

    /// The machine whose states are the distinct rows of S, numbered in
    /// order of first appearance (so ε's row is state 0).
    pub fn hypothesis(&self) -> Result<MooreMachine> {
        if !self.is_closed()? || !self.is_consistent()? {
            return Err(Error::ContractViolation(
                "hypothesis needs a closed and consistent table".into(),
            ));
        }
        let mut index: HashMap<Vec<Output>, usize> = HashMap::new();
        let mut reps: Vec<&Word> = Vec::new();
        for s in &self.s {
            let r = self.row(s)?;
            if !index.contains_key(&r) {
                index.insert(r, reps.len());
                reps.push(s);
            }
        }
        let mut transitions = Vec::with_capacity(reps.len());
        let mut outputs = Vec::with_capacity(reps.len());
        for s in &reps {
            outputs.push(self.t[*s]);
            let row = (0..self.alphabet.len())
                .map(|a| Ok(index[&self.row(&concat(s, &[a]))?]))
                .collect::<Result<Vec<_>>>()?;
            transitions.push(row);
        }
        MooreMachine::new(self.alphabet.clone(), self.output_alphabet.clone(), 0, transitions, outputs)
    }

    pub fn s_prefix_closed(&self) -> bool {
        self.s.iter().all(|w| (0..w.len()).all(|l| self.s_set.contains(&w[..l])))
    }

    pub fn e_suffix_closed(&self) -> bool {
        self.e.iter().all(|w| (1..=w.len()).all(|k| self.e.iter().any(|e| e[..] == w[k..])))
    }
}

#[derive(Clone, Debug, Default)]
pub struct Limits {
    /// Maximum number of distinct output queries sent to the teacher.
    pub max_queries: Option<usize>,
    pub deadline: Option<Instant>,
}

/// One auditable learner event.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum TraceEvent {
    Query { word: String, output: String },
    ClosureRepair { added: String },
    ConsistencyRepair { added_suffix: String },
    Equivalence { states: usize, equal: bool },
    Counterexample { word: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LearnStats {
    pub output_queries: usize,
    pub cache_hits: usize,
    pub equivalence_queries: usize,
    pub closure_repairs: usize,
    pub consistency_repairs: usize,
    pub table_rows: usize,
    pub table_suffixes: usize,
}

#[derive(Clone, Debug)]
pub struct LearnResult {
    pub machine: MooreMachine,
    /// Stopped by the deadline or query budget rather than an Equal answer.
    pub timed_out: bool,
    pub stats: LearnStats,
    pub events: Vec<TraceEvent>,
    pub table: ObservationTable,
}

#[derive(Clone, Debug, Default)]
pub struct LearnOptions {
    pub limits: Limits,
    /// Words whose prefixes seed S before the first round.
    pub initial_words: Vec<Word>,
    /// Record a [`TraceEvent`] log.
    pub trace: bool,
}

struct Session<'a, T: Teacher + ?Sized> {
    teacher: &'a mut T,
    cache: HashMap<Word, Output>,
    stats: LearnStats,
    events: Vec<TraceEvent>,
    trace: bool,
}

impl<T: Teacher + ?Sized> Session<'_, T> {
    fn log(&mut self, event: impl FnOnce() -> TraceEvent) {
        if self.trace {
            self.events.push(event());
        }
    }

    fn query(&mut self, word: &[Symbol]) -> Result<Output> {
        if let Some(&o) = self.cache.get(word) {
            self.stats.cache_hits += 1;
            return Ok(o);
        }
        let o = self.teacher.output_query(word)?;
        self.stats.output_queries += 1;
        self.cache.insert(word.to_vec(), o);
        if self.trace {
            let word = self.teacher.input_alphabet().format_word(word);
            let output = self.teacher.output_alphabet().name(o).to_string();
            self.events.push(TraceEvent::Query { word, output });
        }
        Ok(o)
    }

    fn fill(&mut self, table: &mut ObservationTable, stop: &impl Fn(&LearnStats) -> bool) -> Result<bool> {
        for w in table.missing_cells() {
            if stop(&self.stats) {
                return Ok(false);
            }
            let o = self.query(&w)?;
            table.set_cell(w, o);
        }
        Ok(true)
    }

    /// Repairs closedness and consistency until both hold. Returns false if
    /// `stop` fired first.
    fn stabilise(&mut self, table: &mut ObservationTable, stop: impl Fn(&LearnStats) -> bool) -> Result<bool> {
        loop {
            if !self.fill(table, &stop)? {
                return Ok(false);
            }
            if let Some((s, a)) = table.find_unclosed()? {
                let w = concat(&s, &[a]);
                table.add_prefixes(&w);
                self.stats.closure_repairs += 1;
                let alphabet = table.alphabet.clone();
                self.log(|| TraceEvent::ClosureRepair { added: alphabet.format_word(&w) });
                continue;
            }
            if let Some(inc) = table.find_inconsistency()? {
                let e = concat(&[inc.symbol], &inc.suffix);
                table.add_suffixes(&e);
                self.stats.consistency_repairs += 1;
                let alphabet = table.alphabet.clone();
                self.log(|| TraceEvent::ConsistencyRepair { added_suffix: alphabet.format_word(&e) });
                continue;
            }
            return Ok(true);
        }
    }
}

/// Runs L* against `teacher` until an equivalence query answers Equal or a
/// limit is hit, in which case the latest hypothesis is returned with
/// `timed_out` set. Counterexamples are handled by adding them and all their
/// prefixes to S.
pub fn learn<T: Teacher + ?Sized>(teacher: &mut T, options: &LearnOptions) -> Result<LearnResult> {
    let mut table = ObservationTable::new(teacher.input_alphabet().clone(), teacher.output_alphabet().clone());
    for w in &options.initial_words {
        table.add_prefixes(w);
    }
    let mut session = Session {
        teacher,
        cache: HashMap::new(),
        stats: LearnStats::default(),
        events: Vec::new(),
        trace: options.trace,
    };
    let limits = &options.limits;
    let over_limit = |stats: &LearnStats| {
        limits.deadline.is_some_and(|d| Instant::now() >= d)
            || limits.max_queries.is_some_and(|q| stats.output_queries >= q)
    };

    // hypothesis of the last stable table, returned if a limit interrupts
    // the repairs of the next one
    let mut last: Option<MooreMachine> = None;
    loop {
        let stable = session.stabilise(&mut table, |stats| last.is_some() && over_limit(stats))?;
        let hypothesis = match (stable, &last) {
            (false, Some(h)) => h.clone(),
            _ => table.hypothesis()?,
        };
        let finish = |session: Session<'_, T>, table: ObservationTable, timed_out: bool| {
            let mut stats = session.stats;
            stats.table_rows = table.s.len();
            stats.table_suffixes = table.e.len();
            LearnResult {
                machine: hypothesis.clone(),
                timed_out,
                stats,
                events: session.events,
                table,
            }
        };
        if !stable || over_limit(&session.stats) {
            return Ok(finish(session, table, true));
        }
        session.stats.equivalence_queries += 1;
        let answer = session.teacher.equivalence_query(&hypothesis)?;
        let equal = answer == Equivalence::Equal;
        let states = hypothesis.num_states();
        session.log(|| TraceEvent::Equivalence { states, equal });
        debug!("equivalence query on {states} states: equal = {equal}");
        match answer {
            Equivalence::Equal => return Ok(finish(session, table, false)),
            Equivalence::Counterexample(c) => {
                last = Some(hypothesis);
                let alphabet = table.alphabet.clone();
                session.log(|| TraceEvent::Counterexample { word: alphabet.format_word(&c) });
                if table.add_prefixes(&c) == 0 {
                    return Err(Error::ContractViolation(format!(
                        "counterexample {} is already an access word",
                        alphabet.format_word(&c)
                    )));
                }
            }
        }
    }
}
