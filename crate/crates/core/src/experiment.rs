//! End-to-end experiments: for each seed, generate data, train, evaluate at
//! several length bands, extract a machine, measure agreement and run the
//! activation analyses. Everything numeric lands in files that depend only on
//! the config; wall-clock timings go to a separate `timings.json`.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    a_direction, attention_patterns, hahn_decay, m_directions, pairwise_angles, plane_projection, saturation_probe,
    write_attention_csv, write_decay_csv, write_probe_csv, write_similarity_csv, ADirection, DecayReport,
    MDirectionOptions, MDirections, OutputMap, PlaneProjection, ProbeFamily, SuffixParams, SuffixRecord,
};
use crate::automata::{isomorphic, MooreMachine, Word};
use crate::data::{length_band, Dataset, DatasetSpec, Example, Sampling};
use crate::error::{invalid, Error, Result};
use crate::extraction::{agreement, extract, ExtractionConfig, SequenceModel, TransformerModel};
use crate::languages::{distinct_output_example, target_machine, LanguageSpec, TaskKind};
use crate::metrics::{evaluate, EvalReport};
use crate::net::{save_checkpoint, train, EpochRecord, Hyper, Model, ModelConfig, ModelMeta};
use crate::seeds::{derive, derive_indexed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetSize {
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl SetSize {
    pub fn exact(count: usize, len: usize) -> Self {
        Self {
            count,
            min_len: len,
            max_len: len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisOptions {
    pub enabled: bool,
    pub unit_sphere: bool,
    pub suffix_max_len: usize,
    pub beam_width: usize,
    pub probe_lengths: Vec<usize>,
    pub hahn_grid: Vec<usize>,
    pub hahn_bases: usize,
    /// Input word (without the beginning-of-sequence token) whose attention
    /// patterns are written out.
    pub attention_word: String,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            enabled: true,
            unit_sphere: false,
            suffix_max_len: 100,
            beam_width: 10,
            probe_lengths: vec![50, 500, 2000],
            hahn_grid: vec![32, 64, 128, 256, 512],
            hahn_bases: 100,
            attention_word: "010101".into(),
        }
    }
}

fn default_train() -> SetSize {
    SetSize::exact(10_000, 32)
}
fn default_val() -> SetSize {
    SetSize::exact(2_000, 100)
}
fn default_test_count() -> usize {
    1_000
}
fn default_test_bands() -> Vec<usize> {
    vec![10, 100, 1000]
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_jobs() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub language: LanguageSpec,
    pub task: TaskKind,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default = "default_train")]
    pub train: SetSize,
    #[serde(default = "default_val")]
    pub val: SetSize,
    /// Sequences per test band (and per agreement band).
    #[serde(default = "default_test_count")]
    pub test_count: usize,
    /// Each entry `b` is evaluated on uniformly sampled lengths `b..=b+4`.
    #[serde(default = "default_test_bands")]
    pub test_bands: Vec<usize>,
    /// The shuffle seed inside is replaced per seed by a derived stream.
    #[serde(default)]
    pub hyper: Hyper,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// With no starting examples given, the empty word and the shortest word
    /// whose target output differs from the initial one are used.
    #[serde(default)]
    pub extraction: ExtractionConfig,
    #[serde(default)]
    pub strict_sequence_accuracy: bool,
    #[serde(default)]
    pub analysis: AnalysisOptions,
    /// Seeds processed concurrently.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

impl ExperimentConfig {
    pub fn new(language: LanguageSpec, task: TaskKind) -> Self {
        Self {
            language,
            task,
            sampling: Sampling::default(),
            train: default_train(),
            val: default_val(),
            test_count: default_test_count(),
            test_bands: default_test_bands(),
            hyper: Hyper::default(),
            seeds: default_seeds(),
            extraction: ExtractionConfig::default(),
            strict_sequence_accuracy: false,
            analysis: AnalysisOptions::default(),
            jobs: default_jobs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.language.validate()?;
        target_machine(self.language, self.task)?;
        for (name, s) in [("train", self.train), ("val", self.val)] {
            if s.count == 0 || s.min_len > s.max_len {
                return Err(invalid(format!("bad {name} set size {s:?}")));
            }
        }
        if self.test_count == 0 {
            return Err(invalid("test_count must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        if self.jobs == 0 {
            return Err(invalid("jobs must be positive"));
        }
        Ok(())
    }

    fn dataset(&self, size: SetSize, sampling: Sampling, seed: u64) -> DatasetSpec {
        DatasetSpec {
            language: self.language,
            task: self.task,
            count: size.count,
            min_len: size.min_len,
            max_len: size.max_len,
            sampling,
            seed,
        }
    }
}

/// Scores on one length band.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BandResult {
    pub band: (usize, usize),
    pub f1: f64,
    pub sequence_accuracy: Option<f64>,
    pub baseline_f1: Option<f64>,
    pub baseline_sequence_accuracy: Option<f64>,
    /// F1 of the model against the extracted machine on random words.
    pub agreement: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Stage that failed, if any; later stages were skipped.
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub diverged: bool,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub train_f1: Option<f64>,
    pub bands: Vec<BandResult>,
    pub target_states: usize,
    pub extracted_states: Option<usize>,
    pub extraction_timed_out: Option<bool>,
    pub extracted_is_target: Option<bool>,
    pub analysis: Option<AnalysisSummary>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SeedTimings {
    pub seed: u64,
    pub data_secs: f64,
    pub train_secs: f64,
    pub eval_secs: f64,
    pub extract_secs: f64,
    pub analysis_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeFailure {
    pub family: ProbeFamily,
    pub n: usize,
    pub failure_position: Option<usize>,
}

/// Headline numbers from [`analyze_model`]; full data lives in the files.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AnalysisSummary {
    /// `(i, j, degrees)` between m-directions.
    pub m_angles: Vec<(usize, usize, f64)>,
    pub m_converged: bool,
    /// `(state, mean cosine to the state's a-direction)`.
    pub a_cosines: Vec<(usize, f64)>,
    pub probe_failures: Vec<ProbeFailure>,
    pub hahn: Option<DecayReport>,
    /// Analyses that could not run, with the reason.
    pub skipped: Vec<String>,
}

#[derive(Serialize)]
struct MDirectionFile<'a> {
    #[serde(flatten)]
    directions: &'a MDirections,
    angles: Vec<(usize, usize, f64)>,
}

#[derive(Serialize)]
struct PlaneFile {
    projection: PlaneProjection,
    /// Which points were projected, in order.
    points: Vec<String>,
}

/// Runs every analysis on `model` and writes the results into `dir`.
/// `machine` supplies the states for a-directions (usually the extracted
/// machine); `target` is what saturation probes are scored against.
pub fn analyze_model(
    model: &TransformerModel,
    machine: &MooreMachine,
    target: &MooreMachine,
    options: &AnalysisOptions,
    seed: u64,
    dir: &Path,
) -> Result<AnalysisSummary> {
    fs::create_dir_all(dir)?;
    let mut summary = AnalysisSummary::default();
    let map = OutputMap::from_model(model.model());
    let m = m_directions(
        &map,
        &MDirectionOptions {
            unit_sphere: options.unit_sphere,
            ..Default::default()
        },
    )?;
    let m_vecs = m.vectors();
    summary.m_angles = pairwise_angles(&m_vecs);
    summary.m_converged = m.directions.iter().all(|d| d.converged);
    write_json(
        &dir.join("m_directions.json"),
        &MDirectionFile {
            directions: &m,
            angles: summary.m_angles.clone(),
        },
    )?;

    if machine.alphabet() == model.input_alphabet() {
        let params = SuffixParams {
            max_len: options.suffix_max_len,
            beam_width: options.beam_width,
            seed: derive(seed, "beam"),
        };
        let mut a_dirs: Vec<ADirection> = Vec::new();
        let mut records: Vec<SuffixRecord> = Vec::new();
        for q in machine.reachable() {
            let (a, recs) = a_direction(model, machine, q, &params, &m_vecs)?;
            summary.a_cosines.push((q, a.mean_cos_to_mean));
            a_dirs.push(a);
            records.extend(recs);
        }
        write_json(&dir.join("a_directions.json"), &a_dirs)?;
        write_similarity_csv(&dir.join("similarity.csv"), &records)?;
        if m_vecs.len() >= 3 {
            let points: Vec<Vec<f64>> = a_dirs.iter().map(|a| a.direction.clone()).chain(m_vecs.iter().cloned()).collect();
            let names = a_dirs
                .iter()
                .map(|a| format!("a{}", a.state))
                .chain((0..m_vecs.len()).map(|i| format!("m{i}")))
                .collect();
            match plane_projection(&m_vecs, &points) {
                Ok(projection) => write_json(&dir.join("plane.json"), &PlaneFile { projection, points: names })?,
                Err(e) => summary.skipped.push(format!("plane projection: {e}")),
            }
        }
    } else {
        summary.skipped.push("a-directions: machine alphabet differs from the model's".into());
    }

    let alphabet = model.input_alphabet();
    match alphabet.parse_word(&options.attention_word) {
        Ok(word) => {
            let name = format!("attention_B{}.csv", options.attention_word);
            write_attention_csv(&dir.join(name), &attention_patterns(model.model(), &word)?)?;
        }
        Err(e) => summary.skipped.push(format!("attention: {e}")),
    }

    let mut curves = Vec::new();
    for family in ProbeFamily::ALL {
        match saturation_probe(model, target, family, &options.probe_lengths) {
            Ok(c) => curves.extend(c),
            Err(e) => summary.skipped.push(format!("probe {family}: {e}")),
        }
    }
    summary.probe_failures = curves
        .iter()
        .map(|c| ProbeFailure {
            family: c.family,
            n: c.n,
            failure_position: c.failure_position,
        })
        .collect();
    if !curves.is_empty() {
        write_probe_csv(&dir.join("probes.csv"), &curves)?;
        write_json(&dir.join("probes.json"), &summary.probe_failures)?;
    }

    if options.hahn_bases > 0 && !options.hahn_grid.is_empty() {
        match hahn_decay(model, &options.hahn_grid, options.hahn_bases, derive(seed, "hahn")) {
            Ok(report) => {
                write_decay_csv(&dir.join("hahn.csv"), &report)?;
                write_json(&dir.join("hahn.json"), &report)?;
                summary.hahn = Some(report);
            }
            Err(e) => summary.skipped.push(format!("hahn decay: {e}")),
        }
    }
    Ok(summary)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_train_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Words with which extraction is reseeded when the first run ends on a
/// single state.
pub fn default_starting_examples(target: &MooreMachine) -> Vec<Word> {
    std::iter::once(Vec::new()).chain(distinct_output_example(target)).collect()
}

struct Stage<'a> {
    result: &'a mut SeedResult,
}

impl Stage<'_> {
    fn fail(&mut self, stage: &str, e: &Error) {
        warn!("seed {}: {stage} failed: {e}", self.result.seed);
        self.result.failed_stage = Some(stage.into());
        self.result.error = Some(e.to_string());
        self.result.diverged = matches!(e, Error::Divergence { .. });
    }
}

fn eval_report(config: &ExperimentConfig, name: &str, model: &Model<f32>, examples: &[Example], dfa: &crate::automata::Dfa) -> Result<EvalReport> {
    let preds = model.predict_examples(examples)?;
    evaluate(name, config.task, model.config().n_outputs, &preds, examples, Some(dfa), config.strict_sequence_accuracy)
}

/// Runs the full pipeline for one seed, writing into `dir`.
pub fn run_seed(config: &ExperimentConfig, seed: u64, dir: &Path) -> Result<(SeedResult, SeedTimings)> {
    fs::create_dir_all(dir)?;
    let target = target_machine(config.language, config.task)?;
    let dfa = config.language.target_dfa()?;
    let mut result = SeedResult {
        seed,
        target_states: target.num_states(),
        ..Default::default()
    };
    let mut timings = SeedTimings {
        seed,
        ..Default::default()
    };

    let clock = Instant::now();
    let data = (|| -> Result<(Dataset, Dataset)> {
        let train_set = Dataset::generate(&config.dataset(config.train, config.sampling, derive(seed, "data/train")))?;
        let val_set = Dataset::generate(&config.dataset(config.val, config.sampling, derive(seed, "data/val")))?;
        Ok((train_set, val_set))
    })();
    timings.data_secs = clock.elapsed().as_secs_f64();
    let (train_set, val_set) = match data {
        Ok(d) => d,
        Err(e) => {
            Stage { result: &mut result }.fail("data", &e);
            return Ok((result, timings));
        }
    };

    let clock = Instant::now();
    let hyper = Hyper {
        seed: derive(seed, "shuffle"),
        ..config.hyper.clone()
    };
    let trained = ModelConfig::for_task(config.language, config.task)
        .and_then(|mc| Model::<f32>::init(mc, derive(seed, "init")))
        .and_then(|model| {
            train(model, &train_set.examples, &val_set.examples, &hyper, |r| {
                if r.epoch % 50 == 0 {
                    info!("seed {seed}: epoch {} train {:.5} val {:.5}", r.epoch, r.train_loss, r.val_loss);
                }
            })
        });
    timings.train_secs = clock.elapsed().as_secs_f64();
    let trained = match trained {
        Ok(t) => t,
        Err(e) => {
            Stage { result: &mut result }.fail("train", &e);
            return Ok((result, timings));
        }
    };
    result.epochs_run = trained.log.len();
    result.best_epoch = trained.best_epoch;
    result.best_val_loss = Some(trained.best_val_loss);
    write_train_log(&dir.join("train_log.csv"), &trained.log)?;
    let meta = ModelMeta {
        language: Some(config.language),
        task: Some(config.task),
        seed: Some(seed),
    };
    save_checkpoint(&dir.join("model"), &trained.model, &meta)?;
    let model = trained.model;

    let clock = Instant::now();
    let evaluated = (|| -> Result<Vec<EvalReport>> {
        let mut reports = vec![eval_report(config, "train", &model, &train_set.examples, &dfa)?];
        for (i, &b) in config.test_bands.iter().enumerate() {
            let band = length_band(b);
            let size = SetSize {
                count: config.test_count,
                min_len: band.0,
                max_len: band.1,
            };
            let test = Dataset::generate(&config.dataset(size, Sampling::Uniform, derive_indexed(seed, "data/test", i as u64)))?;
            reports.push(eval_report(config, &format!("test_l{b}"), &model, &test.examples, &dfa)?);
        }
        Ok(reports)
    })();
    timings.eval_secs = clock.elapsed().as_secs_f64();
    let reports = match evaluated {
        Ok(r) => r,
        Err(e) => {
            Stage { result: &mut result }.fail("evaluate", &e);
            return Ok((result, timings));
        }
    };
    write_json(&dir.join("eval.json"), &reports)?;
    result.train_f1 = Some(reports[0].f1);
    result.bands = config
        .test_bands
        .iter()
        .zip(&reports[1..])
        .map(|(&b, r)| BandResult {
            band: length_band(b),
            f1: r.f1,
            sequence_accuracy: r.sequence_accuracy,
            baseline_f1: r.baseline_f1,
            baseline_sequence_accuracy: r.baseline_sequence_accuracy,
            agreement: None,
        })
        .collect();

    let tm = TransformerModel::new(model, config.language, config.task)?;
    let clock = Instant::now();
    let mut extraction_config = config.extraction.clone();
    if extraction_config.starting_examples.is_none() {
        extraction_config.starting_examples = Some(default_starting_examples(&target));
    }
    let extracted = extract(&tm, &extraction_config).and_then(|ex| {
        let mut agreements = Vec::new();
        for (i, &b) in config.test_bands.iter().enumerate() {
            let seed = derive_indexed(seed, "agreement", i as u64);
            agreements.push(agreement(&ex.machine, &tm, config.task, length_band(b), config.test_count, seed)?);
        }
        Ok((ex, agreements))
    });
    timings.extract_secs = clock.elapsed().as_secs_f64();
    let (extraction, agreements) = match extracted {
        Ok(x) => x,
        Err(e) => {
            Stage { result: &mut result }.fail("extract", &e);
            return Ok((result, timings));
        }
    };
    for (band, a) in result.bands.iter_mut().zip(agreements) {
        band.agreement = Some(a);
    }
    result.extracted_states = Some(extraction.machine.num_states());
    result.extraction_timed_out = Some(extraction.stats.timed_out);
    result.extracted_is_target = Some(isomorphic(&extraction.machine, &target));
    fs::write(dir.join("extracted.json"), extraction.machine.to_json_string())?;
    fs::write(dir.join("extracted.dot"), extraction.machine.to_dot())?;
    let mut stats = serde_json::to_value(&extraction.stats)?;
    if let Some(obj) = stats.as_object_mut() {
        obj.remove("wall_time_secs");
    }
    write_json(&dir.join("extraction.json"), &stats)?;

    if config.analysis.enabled {
        let clock = Instant::now();
        match analyze_model(&tm, &extraction.machine, &target, &config.analysis, seed, &dir.join("analysis")) {
            Ok(s) => result.analysis = Some(s),
            Err(e) => Stage { result: &mut result }.fail("analysis", &e),
        }
        timings.analysis_secs = clock.elapsed().as_secs_f64();
    }
    write_json(&dir.join("result.json"), &result)?;
    Ok((result, timings))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub seeds: Vec<SeedResult>,
}

impl RunSummary {
    pub fn any_diverged(&self) -> bool {
        self.seeds.iter().any(|s| s.diverged)
    }

    pub fn any_timed_out(&self) -> bool {
        self.seeds.iter().any(|s| s.extraction_timed_out == Some(true))
    }

    /// The seed with the highest training F1 (ties go to the earlier seed).
    pub fn best_seed(&self) -> Option<&SeedResult> {
        self.seeds
            .iter()
            .filter(|s| s.train_f1.is_some())
            .fold(None, |best: Option<&SeedResult>, s| match best {
                Some(b) if b.train_f1 >= s.train_f1 => Some(b),
                _ => Some(s),
            })
    }
}

/// Runs every seed of `config`, writing `config.json`, `table.csv`,
/// `summary.json`, `timings.json` and one `seed-<n>/` directory per seed.
pub fn run(config: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), config)?;

    let n = config.seeds.len();
    let slots: Mutex<Vec<Option<Result<(SeedResult, SeedTimings)>>>> = Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..config.jobs.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let seed = config.seeds[i];
                info!("seed {seed}: start");
                let r = run_seed(config, seed, &out.join(format!("seed-{seed}")));
                slots.lock().expect("no seed thread panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let mut seeds = Vec::with_capacity(n);
    let mut timings = Vec::with_capacity(n);
    for slot in slots.into_inner().expect("seed threads have finished") {
        let (r, t) = slot.expect("every seed index is claimed")?;
        seeds.push(r);
        timings.push(t);
    }
    let summary = RunSummary { seeds };
    write_json(&out.join("summary.json"), &summary)?;
    write_json(&out.join("timings.json"), &timings)?;
    write_table(&out.join("table.csv"), config, &summary)?;
    Ok(summary)
}

fn fmt_score(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// One row per seed followed by a `mean` row. A trailing `*` on a mean
/// marks that at least one seed scored perfectly in that column.
pub fn write_table(path: &Path, config: &ExperimentConfig, summary: &RunSummary) -> Result<()> {
    let mut header: Vec<String> = ["language", "task", "sampling", "seed", "train_f1"].map(String::from).to_vec();
    for b in &config.test_bands {
        header.push(format!("f1_l{b}"));
    }
    for b in &config.test_bands {
        header.push(format!("seq_acc_l{b}"));
    }
    for b in &config.test_bands {
        header.push(format!("baseline_f1_l{b}"));
    }
    for b in &config.test_bands {
        header.push(format!("agreement_l{b}"));
    }
    header.extend(["target_states", "extracted_states", "timed_out", "failed_stage"].map(String::from));

    let row_values = |s: &SeedResult| -> Vec<Option<f64>> {
        let band = |i: usize| s.bands.get(i);
        let k = config.test_bands.len();
        let mut v = vec![s.train_f1];
        v.extend((0..k).map(|i| band(i).map(|b| b.f1)));
        v.extend((0..k).map(|i| band(i).and_then(|b| b.sequence_accuracy)));
        v.extend((0..k).map(|i| band(i).and_then(|b| b.baseline_f1)));
        v.extend((0..k).map(|i| band(i).and_then(|b| b.agreement)));
        v
    };

    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    let prefix = [config.language.to_string(), config.task.to_string(), config.sampling.to_string()];
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for s in &summary.seeds {
        let values = row_values(s);
        if columns.is_empty() {
            columns = vec![Vec::new(); values.len()];
        }
        for (col, v) in columns.iter_mut().zip(&values) {
            col.extend(*v);
        }
        let mut rec: Vec<String> = prefix.to_vec();
        rec.push(s.seed.to_string());
        rec.extend(values.into_iter().map(fmt_score));
        rec.push(s.target_states.to_string());
        rec.push(s.extracted_states.map(|n| n.to_string()).unwrap_or_default());
        rec.push(s.extraction_timed_out.map(|t| t.to_string()).unwrap_or_default());
        rec.push(s.failed_stage.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    let mut rec: Vec<String> = prefix.to_vec();
    rec.push("mean".into());
    let baseline_cols = {
        let k = config.test_bands.len();
        1 + 2 * k..1 + 3 * k
    };
    for (i, col) in columns.iter().enumerate() {
        if col.is_empty() {
            rec.push(String::new());
            continue;
        }
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let star = if !baseline_cols.contains(&i) && col.iter().any(|&x| x == 1.0) { "*" } else { "" };
        rec.push(format!("{mean:.4}{star}"));
    }
    let states: Vec<usize> = summary.seeds.iter().filter_map(|s| s.extracted_states).collect();
    rec.push(summary.seeds.first().map(|s| s.target_states.to_string()).unwrap_or_default());
    rec.push(if states.is_empty() {
        String::new()
    } else {
        format!("{:.2}", states.iter().sum::<usize>() as f64 / states.len() as f64)
    });
    rec.push(summary.any_timed_out().to_string());
    rec.push(String::new());
    w.write_record(&rec)?;
    w.flush()?;
    Ok(())
}

/// Model shape check shared by the command-line entry points.
pub fn transformer_for(model: Model<f32>, language: LanguageSpec, task: TaskKind) -> Result<TransformerModel> {
    let expected = ModelConfig::for_task(language, task)?;
    let c = model.config();
    if c.n_symbols != expected.n_symbols || c.n_outputs != expected.n_outputs || c.head != expected.head {
        return Err(invalid(format!(
            "checkpoint has {} symbols, {} outputs and a {:?} head; {language} {task} needs {}, {} and {:?}",
            c.n_symbols, c.n_outputs, c.head, expected.n_symbols, expected.n_outputs, expected.head
        )));
    }
    TransformerModel::new(model, language, task)
}
