use std::collections::{HashMap, VecDeque};
use std::time::Instant;

use log::debug;

use super::model::{Observation, SequenceModel};
use super::partition::{CellId, Partitioning};
use crate::automata::{distinguishing_suffix, Alphabet, Equivalence, MooreMachine, Output, StateId, Symbol, Word};
use crate::error::{Error, Result};
use crate::learner::Teacher;

/// Answers output queries by running the model and equivalence queries by
/// exploring the hypothesis in lockstep with a partitioning of the model's
/// activation space.
pub struct WhiteboxTeacher<'m> {
    model: &'m dyn SequenceModel,
    partitioning: Partitioning,
    split_depth: usize,
    initial_split_done: bool,
    deadline: Option<Instant>,
    cache: HashMap<Word, Observation>,
    pub(crate) timed_out: bool,
    pub(crate) refinements: usize,
    pub(crate) model_queries: usize,
}

/// What one exploration pass found.
enum Outcome {
    Equal,
    TimedOut,
    Counterexample(Word),
    /// Two words in one cell that the model tells apart.
    Refine { cell: CellId, a: Word, b: Word },
}

impl<'m> WhiteboxTeacher<'m> {
    pub fn new(model: &'m dyn SequenceModel, split_depth: usize, deadline: Option<Instant>) -> Self {
        Self {
            model,
            partitioning: Partitioning::new(model.dim()),
            split_depth,
            initial_split_done: false,
            deadline,
            cache: HashMap::new(),
            timed_out: false,
            refinements: 0,
            model_queries: 0,
        }
    }

    pub fn partitioning(&self) -> &Partitioning {
        &self.partitioning
    }

    pub fn set_deadline(&mut self, deadline: Option<Instant>) {
        self.deadline = deadline;
        self.timed_out = false;
    }

    fn observe(&mut self, word: &[Symbol]) -> Result<&Observation> {
        if !self.cache.contains_key(word) {
            let obs = self.model.observe(word)?;
            self.model_queries += 1;
            self.cache.insert(word.to_vec(), obs);
        }
        Ok(&self.cache[word])
    }

    fn expired(&self) -> bool {
        self.deadline.is_some_and(|d| Instant::now() >= d)
    }

    fn explore(&mut self, h: &MooreMachine) -> Result<Outcome> {
        let k = self.model.input_alphabet().len();
        let probes = probe_suffixes(h);
        let eps: Word = vec![];
        let root = self.observe(&eps)?.clone();
        if root.output != h.output(h.initial()) {
            return Ok(Outcome::Counterexample(eps));
        }
        let mut bound: HashMap<CellId, (StateId, Word)> = HashMap::new();
        bound.insert(self.partitioning.cell_of(&root.vector), (h.initial(), eps.clone()));
        let mut queue = VecDeque::from([(eps, h.initial())]);
        while let Some((s, q)) = queue.pop_front() {
            for a in 0..k {
                if self.expired() {
                    return Ok(Outcome::TimedOut);
                }
                let mut w = s.clone();
                w.push(a);
                let hq = h.step(q, a)?;
                let obs = self.observe(&w)?.clone();
                if obs.output != h.output(hq) {
                    return Ok(Outcome::Counterexample(w));
                }
                let cell = self.partitioning.cell_of(&obs.vector);
                match bound.get(&cell) {
                    None => {
                        bound.insert(cell, (hq, w.clone()));
                        queue.push_back((w, hq));
                    }
                    Some((bq, rep)) if *bq == hq => {
                        // Same cell and same hypothesis state: the model should
                        // also treat both words alike on short continuations.
                        let rep = rep.clone();
                        for e in &probes {
                            let we = [w.as_slice(), e].concat();
                            let re = [rep.as_slice(), e].concat();
                            if self.observe(&we)?.output != self.observe(&re)?.output {
                                let cex = if self.observe(&we)?.output != h.output_of(&we)? { we } else { re };
                                return Ok(Outcome::Counterexample(cex));
                            }
                        }
                    }
                    Some((bq, rep)) => {
                        // The partition merges two words the hypothesis keeps
                        // apart. Ask the model about a suffix the hypothesis
                        // uses to separate them.
                        let (bq, rep) = (*bq, rep.clone());
                        let Some(e) = distinguishing_suffix(h, hq, bq) else {
                            continue;
                        };
                        let we = [w.as_slice(), &e].concat();
                        let re = [rep.as_slice(), &e].concat();
                        let out_w = self.observe(&we)?.output;
                        let out_r = self.observe(&re)?.output;
                        if out_w != out_r {
                            return Ok(Outcome::Refine { cell, a: rep, b: w });
                        }
                        // the model treats both alike, so the hypothesis is
                        // wrong on one of them
                        let cex = if out_w != h.output_of(&we)? { we } else { re };
                        return Ok(Outcome::Counterexample(cex));
                    }
                }
            }
        }
        Ok(Outcome::Equal)
    }

    fn split(&mut self, cell: CellId, a: &[Symbol], b: &[Symbol]) -> Result<()> {
        let va = self.observe(a)?.vector.clone();
        let vb = self.observe(b)?.vector.clone();
        if !self.initial_split_done {
            self.partitioning.initial_split(&va, &vb, self.split_depth)?;
            self.initial_split_done = true;
        } else {
            self.partitioning.refine(cell, &va, &vb)?;
        }
        self.refinements += 1;
        debug!("partition refined to {} cells", self.partitioning.num_cells());
        Ok(())
    }
}

/// Suffixes used to compare two words that share a cell and a hypothesis
/// state: every symbol, alone and followed by each suffix separating a pair
/// of hypothesis states. Sorted by length, then lexicographically.
fn probe_suffixes(h: &MooreMachine) -> Vec<Word> {
    let k = h.alphabet().len();
    let mut separating: Vec<Word> = Vec::new();
    for a in h.states() {
        for b in a + 1..h.num_states() {
            if let Some(e) = distinguishing_suffix(h, a, b) {
                if !separating.contains(&e) {
                    separating.push(e);
                }
            }
        }
    }
    let mut probes: Vec<Word> = Vec::new();
    for s in 0..k {
        probes.push(vec![s]);
        for e in &separating {
            let mut w = vec![s];
            w.extend_from_slice(e);
            probes.push(w);
        }
    }
    probes.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    probes.dedup();
    probes
}

impl Teacher for WhiteboxTeacher<'_> {
    fn input_alphabet(&self) -> &Alphabet {
        self.model.input_alphabet()
    }

    fn output_alphabet(&self) -> &Alphabet {
        self.model.output_alphabet()
    }

    fn output_query(&mut self, word: &[Symbol]) -> Result<Output> {
        Ok(self.observe(word)?.output)
    }

    /// Breadth-first parallel traversal; restarts from scratch after every
    /// refinement. Running out of time counts as Equal and sets the
    /// teacher's `timed_out` flag.
    fn equivalence_query(&mut self, hypothesis: &MooreMachine) -> Result<Equivalence> {
        loop {
            match self.explore(hypothesis)? {
                Outcome::Equal => return Ok(Equivalence::Equal),
                Outcome::TimedOut => {
                    self.timed_out = true;
                    return Ok(Equivalence::Equal);
                }
                Outcome::Counterexample(w) => {
                    // re-check against a fresh model evaluation
                    let fresh = self.model.observe(&w)?.output;
                    if fresh == hypothesis.output_of(&w)? {
                        return Err(Error::ContractViolation(format!(
                            "counterexample {} does not separate model and hypothesis",
                            self.model.input_alphabet().format_word(&w)
                        )));
                    }
                    return Ok(Equivalence::Counterexample(w));
                }
                Outcome::Refine { cell, a, b } => self.split(cell, &a, &b)?,
            }
        }
    }
}
