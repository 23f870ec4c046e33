//! Moore-machine extraction from sequence models: L* driven by a whitebox
//! teacher that checks hypotheses against a refinable partition of the
//! model's final-layer activations.

mod model;
mod partition;
mod teacher;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::automata::{MooreMachine, Word};
use crate::error::{invalid, Result};
use crate::learner::{learn, LearnOptions, LearnStats, Limits};
use crate::metrics::task_f1;
use crate::languages::TaskKind;

pub use model::{model_output, state_vector, MachineModel, Observation, SequenceModel, TransformerModel};
pub use partition::{CellId, Partitioning};
pub use teacher::WhiteboxTeacher;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub initial_split_depth: usize,
    /// Wall-clock budget in seconds for one learning run.
    pub time_limit: f64,
    /// Output-query budget for one learning run. Unlike the time limit it
    /// cuts runs at the same point every time.
    pub max_queries: Option<usize>,
    /// Words seeded into the table if the first run ends on one state.
    pub starting_examples: Option<Vec<Word>>,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            initial_split_depth: 10,
            time_limit: 30.0,
            max_queries: None,
            starting_examples: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExtractionStats {
    pub timed_out: bool,
    pub n_states: usize,
    pub learner: LearnStats,
    pub model_queries: usize,
    pub refinements: usize,
    pub cells: usize,
    pub used_starting_examples: bool,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug)]
pub struct Extraction {
    pub machine: MooreMachine,
    pub stats: ExtractionStats,
}

/// Learns a Moore machine describing `model`. When the first run ends on a
/// single state and starting examples are configured, their prefixes seed a
/// second run with a fresh time budget.
pub fn extract(model: &dyn SequenceModel, config: &ExtractionConfig) -> Result<Extraction> {
    if config.initial_split_depth == 0 {
        return Err(invalid("initial split depth must be at least 1"));
    }
    if !(config.time_limit > 0.0) {
        return Err(invalid("time limit must be positive"));
    }
    let start = Instant::now();
    let budget = Duration::from_secs_f64(config.time_limit);
    let mut teacher = WhiteboxTeacher::new(model, config.initial_split_depth, Some(start + budget));
    let mut options = LearnOptions {
        limits: Limits {
            max_queries: config.max_queries,
            deadline: Some(start + budget),
        },
        ..Default::default()
    };
    let mut result = learn(&mut teacher, &options)?;
    let mut timed_out = result.timed_out || teacher.timed_out;
    let mut used_starting_examples = false;
    if result.machine.num_states() == 1 {
        if let Some(examples) = config.starting_examples.as_ref().filter(|e| !e.is_empty()) {
            let deadline = Instant::now() + budget;
            teacher.set_deadline(Some(deadline));
            options.limits.deadline = Some(deadline);
            options.initial_words = examples.clone();
            result = learn(&mut teacher, &options)?;
            timed_out = result.timed_out || teacher.timed_out;
            used_starting_examples = true;
        }
    }
    let stats = ExtractionStats {
        timed_out,
        n_states: result.machine.num_states(),
        learner: result.stats,
        model_queries: teacher.model_queries,
        refinements: teacher.refinements,
        cells: teacher.partitioning().num_cells(),
        used_starting_examples,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok(Extraction {
        machine: result.machine,
        stats,
    })
}

/// Uniformly random words with lengths uniform in `band`.
pub fn random_words(alphabet_size: usize, band: (usize, usize), n: usize, seed: u64) -> Vec<Word> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(band.0..=band.1);
            (0..len).map(|_| rng.gen_range(0..alphabet_size)).collect()
        })
        .collect()
}

/// Support-weighted F1 of the model's outputs against the extracted
/// machine's outputs on `n` random words from `band`, over every position.
pub fn agreement(
    extracted: &MooreMachine,
    model: &dyn SequenceModel,
    task: TaskKind,
    band: (usize, usize),
    n: usize,
    seed: u64,
) -> Result<f64> {
    if extracted.alphabet() != model.input_alphabet() {
        return Err(invalid("extracted machine and model use different input alphabets"));
    }
    let mut labels = Vec::new();
    let mut preds = Vec::new();
    for w in random_words(extracted.alphabet().len(), band, n, seed) {
        labels.extend(extracted.run(&w)?.1);
        preds.extend(model.outputs(&w)?);
    }
    task_f1(task, extracted.alphabet().len() + 1, &preds, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::automata::{isomorphic, Alphabet};
    use crate::languages::{distinct_output_example, target_machine, LanguageSpec};

    fn stub(language: LanguageSpec, task: TaskKind) -> MachineModel {
        MachineModel::new(target_machine(language, task).unwrap(), 16, 3).unwrap()
    }

    #[test]
    fn exact_copy_is_equal() {
        let m = stub(LanguageSpec::Dyck(2), TaskKind::StatePrediction);
        let mut teacher = WhiteboxTeacher::new(&m, 10, None);
        use crate::learner::Teacher;
        assert_eq!(teacher.equivalence_query(m.machine()).unwrap(), crate::automata::Equivalence::Equal);
    }

    #[test]
    fn one_state_hypothesis_against_parity() {
        use crate::learner::Teacher;
        let m = stub(LanguageSpec::Parity, TaskKind::StatePrediction);
        let h = MooreMachine::new(Alphabet::binary(), m.machine().output_alphabet().clone(), 0, vec![vec![0, 0]], vec![0]).unwrap();
        let mut teacher = WhiteboxTeacher::new(&m, 1, None);
        match teacher.equivalence_query(&h).unwrap() {
            crate::automata::Equivalence::Counterexample(c) => {
                assert!(c.len() <= 2);
                assert_ne!(m.machine().output_of(&c).unwrap(), h.output_of(&c).unwrap());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn extracts_gridworld_and_dyck_stubs() {
        for (lang, states) in [(LanguageSpec::Gridworld(1), 2), (LanguageSpec::Dyck(1), 3)] {
            let m = stub(lang, TaskKind::StatePrediction);
            let r = extract(&m, &ExtractionConfig::default()).unwrap();
            assert_eq!(r.machine.num_states(), states);
            assert!(isomorphic(&r.machine, m.machine()));
            assert!(!r.stats.timed_out);
        }
    }

    #[test]
    fn constant_stub_gives_one_state() {
        let constant = MooreMachine::new(Alphabet::binary(), Alphabet::membership(), 0, vec![vec![0, 0]], vec![1]).unwrap();
        let m = MachineModel::new(constant, 16, 0).unwrap();
        let r = extract(&m, &ExtractionConfig::default()).unwrap();
        assert_eq!(r.machine.num_states(), 1);
    }

    #[test]
    fn starting_examples_rescue_trivial_result() {
        // Ones membership: the model outputs Accept on ε, so a table with only
        // ε is closed after one query and must be pushed further.
        let target = target_machine(LanguageSpec::Ones, TaskKind::Membership).unwrap();
        let m = MachineModel::new(target.clone(), 16, 1).unwrap();
        let example = distinct_output_example(&target).unwrap();
        let config = ExtractionConfig {
            starting_examples: Some(vec![vec![], example]),
            ..Default::default()
        };
        let r = extract(&m, &config).unwrap();
        assert!(isomorphic(&r.machine, &target));
    }

    #[test]
    fn agreement_of_exact_stub_is_one() {
        for task in [TaskKind::StatePrediction, TaskKind::NextChar] {
            let target = target_machine(LanguageSpec::Dyck(2), task).unwrap();
            let m = MachineModel::new(target.clone(), 16, 0).unwrap();
            for band in [(10, 14), (100, 104)] {
                assert_eq!(agreement(&target, &m, task, band, 50, 1).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let m = stub(LanguageSpec::Ones, TaskKind::StatePrediction);
        let bad = ExtractionConfig { initial_split_depth: 0, ..Default::default() };
        assert!(extract(&m, &bad).is_err());
        let bad = ExtractionConfig { time_limit: 0.0, ..Default::default() };
        assert!(extract(&m, &bad).is_err());
    }
}
