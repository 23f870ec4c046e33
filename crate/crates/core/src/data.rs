//! Dataset generation, labelling through target machines, and JSON Lines
//! persistence.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::automata::{MooreMachine, Output, StateId, Symbol, Word};
use crate::error::{invalid, Error, Result};
use crate::languages::{target_machine, LanguageSpec, TaskKind};

/// Examples generated per independent random stream.
pub const SHARD_SIZE: usize = 1000;

/// Token id of the beginning-of-sequence symbol for an alphabet of `k` symbols.
pub fn bos_token(num_symbols: usize) -> usize {
    num_symbols
}

/// One labelled sequence. `tokens[0]` is the beginning-of-sequence token and
/// `labels[i]` is the target output after reading `tokens[1..=i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub labels: Vec<Output>,
}

impl Example {
    /// Labels `word` with `machine`, prepending the beginning-of-sequence token.
    pub fn label(machine: &MooreMachine, word: &[Symbol]) -> Result<Self> {
        let (_, labels) = machine.run(word)?;
        let mut tokens = Vec::with_capacity(word.len() + 1);
        tokens.push(bos_token(machine.alphabet().len()));
        tokens.extend_from_slice(word);
        Ok(Self { tokens, labels })
    }

    /// The input word without the beginning-of-sequence token.
    pub fn word(&self) -> &[Symbol] {
        &self.tokens[1..]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    #[default]
    Uniform,
    PositiveOnly,
}

impl std::fmt::Display for Sampling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::PositiveOnly => "positive-only",
        })
    }
}

impl std::str::FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" | "random" => Ok(Self::Uniform),
            "positive" | "positive-only" => Ok(Self::PositiveOnly),
            other => Err(invalid(format!("unknown sampling mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub language: LanguageSpec,
    pub task: TaskKind,
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub sampling: Sampling,
    pub seed: u64,
}

impl DatasetSpec {
    fn validate(&self) -> Result<()> {
        self.language.validate()?;
        if self.count == 0 {
            return Err(invalid("dataset count must be at least 1"));
        }
        if self.min_len > self.max_len {
            return Err(invalid(format!(
                "min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// The evaluation band for a nominal length: up to four symbols longer.
pub fn length_band(base: usize) -> (usize, usize) {
    (base, base + 4)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let examples = match spec.sampling {
            Sampling::Uniform => sample_uniform(spec)?,
            Sampling::PositiveOnly => sample_positive(spec)?,
        };
        Ok(Self {
            spec: spec.clone(),
            examples,
        })
    }

    /// Writes the examples as JSON Lines and the spec to `<path>.meta.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for ex in &self.examples {
            serde_json::to_writer(&mut out, ex)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        std::fs::write(meta_path(path), serde_json::to_string_pretty(&self.spec)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta = std::fs::read_to_string(meta_path(path))?;
        let spec: DatasetSpec = serde_json::from_str(&meta).map_err(|e| Error::Parse {
            path: meta_path(path),
            message: e.to_string(),
        })?;
        let examples = read_examples(path)?;
        Ok(Self { spec, examples })
    }
}

/// Reads a JSON Lines example file; errors carry the line number.
pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        if ex.tokens.len() != ex.labels.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: tokens and labels differ in length", i + 1),
            });
        }
        examples.push(ex);
    }
    Ok(examples)
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn shard_rng(seed: u64, shard: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shard as u64);
    rng
}

/// Uniformly random sequences: length uniform in the band, symbols i.i.d.
pub fn sample_uniform(spec: &DatasetSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    let machine = target_machine(spec.language, spec.task)?;
    let k = machine.alphabet().len();
    let mut examples = Vec::with_capacity(spec.count);
    for shard in 0..spec.count.div_ceil(SHARD_SIZE) {
        let mut rng = shard_rng(spec.seed, shard);
        let n = SHARD_SIZE.min(spec.count - shard * SHARD_SIZE);
        for _ in 0..n {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let word: Word = (0..len).map(|_| rng.gen_range(0..k)).collect();
            examples.push(Example::label(&machine, &word)?);
        }
    }
    Ok(examples)
}

/// Random walks over the target DFA that only ever take transitions from
/// which an accepting state is still reachable in the remaining budget, so
/// every emitted word is in the language and never touches the garbage
/// state. The length is uniform over the achievable lengths in the band.
pub fn sample_positive(spec: &DatasetSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    let machine = target_machine(spec.language, spec.task)?;
    let dfa = spec.language.target_dfa()?;
    let m = dfa.machine();
    let k = m.alphabet().len();

    // finishes[r][q]: an accepting state is reachable from q in exactly r steps
    let mut finishes: Vec<Vec<bool>> = vec![m.states().map(|q| dfa.is_accepting(q)).collect()];
    for r in 1..=spec.max_len {
        let prev = &finishes[r - 1];
        let row = m
            .states()
            .map(|q| m.transitions()[q].iter().any(|&t| prev[t]))
            .collect();
        finishes.push(row);
    }
    let lengths: Vec<usize> = (spec.min_len..=spec.max_len)
        .filter(|&len| finishes[len][m.initial()])
        .collect();
    if lengths.is_empty() {
        return Err(Error::Generation(format!(
            "{} has no accepted sequence with length in [{}, {}]",
            spec.language, spec.min_len, spec.max_len
        )));
    }

    let mut examples = Vec::with_capacity(spec.count);
    let mut options: Vec<(Symbol, StateId)> = Vec::with_capacity(k);
    for shard in 0..spec.count.div_ceil(SHARD_SIZE) {
        let mut rng = shard_rng(spec.seed, shard);
        let n = SHARD_SIZE.min(spec.count - shard * SHARD_SIZE);
        for _ in 0..n {
            let len = lengths[rng.gen_range(0..lengths.len())];
            let mut q = m.initial();
            let mut word = Word::with_capacity(len);
            for remaining in (0..len).rev() {
                options.clear();
                options.extend(
                    m.transitions()[q]
                        .iter()
                        .enumerate()
                        .filter(|&(_, &t)| finishes[remaining][t])
                        .map(|(s, &t)| (s, t)),
                );
                let (sym, next) = options[rng.gen_range(0..options.len())];
                word.push(sym);
                q = next;
            }
            examples.push(Example::label(&machine, &word)?);
        }
    }
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::languages::TaskKind;

    fn spec(language: LanguageSpec, sampling: Sampling, count: usize, len: usize) -> DatasetSpec {
        DatasetSpec {
            language,
            task: TaskKind::StatePrediction,
            count,
            min_len: len,
            max_len: len,
            sampling,
            seed: 7,
        }
    }

    #[test]
    fn unary_uniform_is_all_zeros() {
        let ds = Dataset::generate(&spec(LanguageSpec::ModLength(3), Sampling::Uniform, 50, 9))
            .unwrap();
        assert!(ds.examples.iter().all(|e| e.word().iter().all(|&s| s == 0)));
    }

    #[test]
    fn uniform_symbol_frequency() {
        let ds = Dataset::generate(&spec(LanguageSpec::Parity, Sampling::Uniform, 10_000, 32))
            .unwrap();
        let ones: usize = ds.examples.iter().map(|e| e.word().iter().sum::<usize>()).sum();
        let freq = ones as f64 / (10_000.0 * 32.0);
        assert!((freq - 0.5).abs() < 0.02, "{freq}");
    }

    #[test]
    fn labels_match_target() {
        for sampling in [Sampling::Uniform, Sampling::PositiveOnly] {
            let mut s = spec(LanguageSpec::Dyck(2), sampling, 200, 0);
            s.min_len = 4;
            s.max_len = 20;
            for task in [TaskKind::StatePrediction, TaskKind::NextChar, TaskKind::Membership] {
                s.task = task;
                let m = target_machine(s.language, task).unwrap();
                for ex in Dataset::generate(&s).unwrap().examples {
                    assert_eq!(ex.labels, m.run(ex.word()).unwrap().1);
                    assert_eq!(ex.tokens[0], 2);
                    assert!(ex.word().len() >= 4 && ex.word().len() <= 20);
                }
            }
        }
    }

    #[test]
    fn positive_only_examples() {
        let d1 = Dataset::generate(&spec(LanguageSpec::Dyck(1), Sampling::PositiveOnly, 100, 32))
            .unwrap();
        let dfa = LanguageSpec::Dyck(1).target_dfa().unwrap();
        for ex in &d1.examples {
            assert!(dfa.accepts(ex.word()).unwrap());
            let (states, _) = dfa.machine().run(ex.word()).unwrap();
            assert!(!states.contains(&dfa.garbage_state().unwrap()));
        }
        let ones = Dataset::generate(&spec(LanguageSpec::Ones, Sampling::PositiveOnly, 20, 10))
            .unwrap();
        assert!(ones.examples.iter().all(|e| e.word() == [1; 10]));
        // odd lengths are unachievable for D1
        let err = Dataset::generate(&spec(LanguageSpec::Dyck(1), Sampling::PositiveOnly, 5, 31));
        assert!(matches!(err, Err(Error::Generation(_))));
    }

    #[test]
    fn positive_lengths_cover_achievable_band() {
        let mut s = spec(LanguageSpec::Dyck(1), Sampling::PositiveOnly, 400, 0);
        s.min_len = 10;
        s.max_len = 14;
        let ds = Dataset::generate(&s).unwrap();
        for len in [10, 12, 14] {
            assert!(ds.examples.iter().any(|e| e.word().len() == len));
        }
        assert!(ds.examples.iter().all(|e| e.word().len() % 2 == 0));
    }

    #[test]
    fn generation_is_reproducible() {
        let s = spec(LanguageSpec::Gridworld(2), Sampling::Uniform, 2500, 12);
        assert_eq!(Dataset::generate(&s).unwrap(), Dataset::generate(&s).unwrap());
        let mut other = s.clone();
        other.seed = 8;
        assert_ne!(Dataset::generate(&s).unwrap(), Dataset::generate(&other).unwrap());
    }

    #[test]
    fn bands() {
        assert_eq!(length_band(100), (100, 104));
        assert_eq!(length_band(1000), (1000, 1004));
        assert_eq!(length_band(10), (10, 14));
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(LanguageSpec::Ones, Sampling::Uniform, 0, 3);
        assert!(Dataset::generate(&s).is_err());
        s.count = 3;
        s.min_len = 5;
        assert!(Dataset::generate(&s).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let ds = Dataset::generate(&spec(LanguageSpec::First, Sampling::Uniform, 30, 6)).unwrap();
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
        std::fs::write(&path, "{\"tokens\": [2, 1], \"labels\": [0]}\n").unwrap();
        let err = read_examples(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }
}
