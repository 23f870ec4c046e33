use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::automata::{Alphabet, MooreMachine, Output, Symbol};
use crate::error::{invalid, Result};
use crate::languages::{target_machine, LanguageSpec, TaskKind};
use crate::net::{decode, Model, OutputHead};

/// What a sequence model shows the extractor after reading a word.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Final-position activation on the radius-√d sphere.
    pub vector: Vec<f64>,
    pub output: Output,
}

/// Anything the whitebox teacher can query: a trained transformer or a
/// stand-in that plays a known machine.
pub trait SequenceModel {
    fn input_alphabet(&self) -> &Alphabet;

    /// Output symbols; for next-character prediction the id is the bitmask.
    fn output_alphabet(&self) -> &Alphabet;

    fn dim(&self) -> usize;

    fn observe(&self, word: &[Symbol]) -> Result<Observation>;

    /// Output after every prefix of `word` (`|word| + 1` entries).
    fn outputs(&self, word: &[Symbol]) -> Result<Vec<Output>>;

    /// Probability vector after every prefix: class probabilities for
    /// single-label tasks, per-bit probabilities for bitmask outputs.
    fn probabilities(&self, word: &[Symbol]) -> Result<Vec<Vec<f64>>>;

    /// State vector after every prefix.
    fn vectors(&self, word: &[Symbol]) -> Result<Vec<Vec<f64>>>;
}

/// Output of the model after reading `word`.
pub fn model_output(model: &dyn SequenceModel, word: &[Symbol]) -> Result<Output> {
    Ok(model.observe(word)?.output)
}

/// State vector of the model after reading `word`.
pub fn state_vector(model: &dyn SequenceModel, word: &[Symbol]) -> Result<Vec<f64>> {
    Ok(model.observe(word)?.vector)
}

/// A trained transformer viewed through the target task's alphabets.
#[derive(Clone, Debug)]
pub struct TransformerModel {
    model: Model<f32>,
    input_alphabet: Alphabet,
    output_alphabet: Alphabet,
}

impl TransformerModel {
    pub fn new(model: Model<f32>, language: LanguageSpec, task: TaskKind) -> Result<Self> {
        let target = target_machine(language, task)?;
        let c = model.config();
        let expected_outputs = match c.head {
            OutputHead::Softmax => target.output_alphabet().len(),
            OutputHead::Sigmoid => target.alphabet().len() + 1,
        };
        if c.n_symbols != target.alphabet().len() || c.n_outputs != expected_outputs || (c.head == OutputHead::Sigmoid) != task.is_multilabel() {
            return Err(invalid(format!("model shape does not fit {language} with task {task}")));
        }
        Ok(Self {
            model,
            input_alphabet: target.alphabet().clone(),
            output_alphabet: target.output_alphabet().clone(),
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

impl SequenceModel for TransformerModel {
    fn input_alphabet(&self) -> &Alphabet {
        &self.input_alphabet
    }

    fn output_alphabet(&self) -> &Alphabet {
        &self.output_alphabet
    }

    fn dim(&self) -> usize {
        self.model.config().d_model
    }

    fn observe(&self, word: &[Symbol]) -> Result<Observation> {
        let trace = self.model.forward(&self.model.with_bos(word))?;
        let last = trace.t.len() - 1;
        Ok(Observation {
            vector: to_f64(&trace.t[last]),
            output: decode(self.model.config().head, &trace.probs[last]),
        })
    }

    fn outputs(&self, word: &[Symbol]) -> Result<Vec<Output>> {
        self.model.predict(word)
    }

    fn probabilities(&self, word: &[Symbol]) -> Result<Vec<Vec<f64>>> {
        let trace = self.model.forward(&self.model.with_bos(word))?;
        Ok(trace.probs.iter().map(|p| to_f64(p)).collect())
    }

    fn vectors(&self, word: &[Symbol]) -> Result<Vec<Vec<f64>>> {
        let trace = self.model.forward(&self.model.with_bos(word))?;
        Ok(trace.t.iter().map(|t| to_f64(t)).collect())
    }
}

/// Plays a machine exactly: outputs come from the machine and each state
/// has its own fixed random direction, scaled to norm √d.
#[derive(Clone, Debug)]
pub struct MachineModel {
    machine: MooreMachine,
    state_vectors: Vec<Vec<f64>>,
    multilabel_bits: Option<usize>,
}

impl MachineModel {
    pub fn new(machine: MooreMachine, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let radius = (dim as f64).sqrt();
        let state_vectors = machine
            .states()
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm * radius).collect()
            })
            .collect();
        Ok(Self {
            machine,
            state_vectors,
            multilabel_bits: None,
        })
    }

    /// Reports per-bit probabilities for `bits`-wide bitmask outputs.
    pub fn with_bitmask_outputs(mut self, bits: usize) -> Self {
        self.multilabel_bits = Some(bits);
        self
    }

    pub fn machine(&self) -> &MooreMachine {
        &self.machine
    }

    pub fn state_vectors(&self) -> &[Vec<f64>] {
        &self.state_vectors
    }
}

impl SequenceModel for MachineModel {
    fn input_alphabet(&self) -> &Alphabet {
        self.machine.alphabet()
    }

    fn output_alphabet(&self) -> &Alphabet {
        self.machine.output_alphabet()
    }

    fn dim(&self) -> usize {
        self.state_vectors[0].len()
    }

    fn observe(&self, word: &[Symbol]) -> Result<Observation> {
        let q = self.machine.delta_hat(self.machine.initial(), word)?;
        Ok(Observation {
            vector: self.state_vectors[q].clone(),
            output: self.machine.output(q),
        })
    }

    fn outputs(&self, word: &[Symbol]) -> Result<Vec<Output>> {
        Ok(self.machine.run(word)?.1)
    }

    fn probabilities(&self, word: &[Symbol]) -> Result<Vec<Vec<f64>>> {
        let outputs = self.outputs(word)?;
        Ok(outputs
            .into_iter()
            .map(|o| match self.multilabel_bits {
                Some(bits) => (0..bits).map(|b| (o >> b & 1) as f64).collect(),
                None => (0..self.machine.output_alphabet().len())
                    .map(|i| if i == o { 1.0 } else { 0.0 })
                    .collect(),
            })
            .collect())
    }

    fn vectors(&self, word: &[Symbol]) -> Result<Vec<Vec<f64>>> {
        let (states, _) = self.machine.run(word)?;
        Ok(states.into_iter().map(|q| self.state_vectors[q].clone()).collect())
    }
}
