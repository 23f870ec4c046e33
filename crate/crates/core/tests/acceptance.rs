//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.
//!
//! Training runs use a reduced budget so the whole suite fits in a few
//! minutes on one core: the full 10,000 × 32 training set, a 500 × 100
//! validation set, patience 20 and at most 300 epochs. Seeds are tried in
//! order until a criterion is met, up to three per language.

mod common;

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use common::FIXTURES;
use moorelens::analysis::{hahn_decay, m_directions, pairwise_angles, saturation_probe, MDirectionOptions, OutputMap, ProbeFamily};
use moorelens::automata::isomorphic;
use moorelens::data::{length_band, Dataset, DatasetSpec, Example, Sampling};
use moorelens::experiment::{default_starting_examples, run, AnalysisOptions, ExperimentConfig, SetSize};
use moorelens::extraction::{agreement, extract, random_words, ExtractionConfig, MachineModel, SequenceModel, TransformerModel};
use moorelens::languages::{distinct_output_example, garbage_free_machine, target_machine, LanguageSpec, TaskKind};
use moorelens::learner::{learn, LearnOptions, MachineTeacher};
use moorelens::metrics::task_f1;
use moorelens::net::{batch_gradient, train, Hyper, Model, ModelConfig, OutputHead};
use moorelens::seeds::{derive, derive_indexed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Trained {
    seed: u64,
    model: TransformerModel,
    train_f1: f64,
    best_epoch: usize,
    epochs: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct Key(LanguageSpec, TaskKind, Sampling);

#[derive(Default)]
struct Models {
    trained: HashMap<Key, Vec<Trained>>,
}

impl Models {
    /// Models for `key`, training further seeds until `done` accepts one of
    /// them or the seeds run out.
    fn until(&mut self, key: Key, done: impl Fn(&Trained) -> bool) -> &[Trained] {
        let list = self.trained.entry(key).or_default();
        while !list.iter().any(&done) && list.len() < SEEDS.len() {
            let seed = SEEDS[list.len()];
            list.push(train_one(key, seed));
        }
        list
    }

    fn get(&self, key: Key) -> &[Trained] {
        &self.trained[&key]
    }

    /// Every model trained so far, by key.
    fn all(&self) -> impl Iterator<Item = (&Key, &Trained)> {
        self.trained.iter().flat_map(|(k, v)| v.iter().map(move |t| (k, t)))
    }
}

fn dataset(key: Key, count: usize, band: (usize, usize), sampling: Sampling, seed: u64) -> Dataset {
    Dataset::generate(&DatasetSpec {
        language: key.0,
        task: key.1,
        count,
        min_len: band.0,
        max_len: band.1,
        sampling,
        seed,
    })
    .unwrap()
}

fn position_f1(model: &TransformerModel, task: TaskKind, examples: &[Example]) -> f64 {
    let preds = model.model().predict_examples(examples).unwrap();
    let n = model.model().config().n_outputs;
    let flat_p: Vec<usize> = preds.into_iter().flatten().collect();
    let flat_l: Vec<usize> = examples.iter().flat_map(|e| e.labels.iter().copied()).collect();
    task_f1(task, n, &flat_p, &flat_l).unwrap()
}

fn train_one(key: Key, seed: u64) -> Trained {
    let Key(lang, task, sampling) = key;
    let start = Instant::now();
    let train_set = dataset(key, 10_000, (32, 32), sampling, derive(seed, "data/train"));
    let val_set = dataset(key, 500, (100, 100), sampling, derive(seed, "data/val"));
    let hyper = Hyper {
        patience: 20,
        max_epochs: 300,
        seed: derive(seed, "shuffle"),
        ..Hyper::default()
    };
    let model = Model::<f32>::init(ModelConfig::for_task(lang, task).unwrap(), derive(seed, "init")).unwrap();
    let r = train(model, &train_set.examples, &val_set.examples, &hyper, |_| {}).unwrap();
    let model = TransformerModel::new(r.model, lang, task).unwrap();
    let train_f1 = position_f1(&model, task, &train_set.examples);
    println!(
        "    trained {lang} {task} {sampling} seed {seed}: train F1 {train_f1:.4}, best epoch {} of {} ({:.0} s)",
        r.best_epoch,
        r.log.len(),
        start.elapsed().as_secs_f64()
    );
    Trained {
        seed,
        model,
        train_f1,
        best_epoch: r.best_epoch,
        epochs: r.log.len(),
    }
}

fn state_key(lang: LanguageSpec) -> Key {
    Key(lang, TaskKind::StatePrediction, Sampling::Uniform)
}

fn fits(t: &Trained) -> bool {
    t.train_f1 >= 0.99
}

/// Highest training F1, then the earliest seed.
fn best(models: &[Trained]) -> &Trained {
    models.iter().fold(&models[0], |b, t| if t.train_f1 > b.train_f1 { t } else { b })
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let expected = [2, 3, 3, 4, 2, 3, 2, 2, 3];
    let mut sizes = Vec::new();
    let mut ok = true;
    for (lang, n) in FIXTURES.into_iter().zip(expected) {
        let target = target_machine(lang, TaskKind::StatePrediction).unwrap();
        let r = learn(&mut MachineTeacher::new(target.clone()), &LearnOptions::default()).unwrap();
        ok &= isomorphic(&r.machine, &target) && r.machine.num_states() == n;
        sizes.push(format!("{lang}={}", r.machine.num_states()));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(ok && secs < 1.0, format!("{} in {secs:.3} s", sizes.join(" ")))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut runs = 0;
    let mut failures = Vec::new();
    for task in [TaskKind::StatePrediction, TaskKind::Membership, TaskKind::NextChar] {
        for lang in FIXTURES {
            let target = target_machine(lang, task).unwrap();
            let stub = MachineModel::new(target.clone(), 16, 0).unwrap();
            for depth in 1..=10 {
                let config = ExtractionConfig {
                    initial_split_depth: depth,
                    starting_examples: distinct_output_example(&target).map(|w| vec![vec![], w]),
                    ..Default::default()
                };
                let r = extract(&stub, &config).unwrap();
                runs += 1;
                if !isomorphic(&r.machine, &target) {
                    failures.push(format!("{lang} {task} depth {depth}"));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < 10.0,
        format!("{} of {runs} stub extractions exact in {secs:.2} s {failures:?}", runs - failures.len()),
    )
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (head, n_out) in [(OutputHead::Softmax, 3), (OutputHead::Sigmoid, 3)] {
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_mlp: 16,
            ..ModelConfig::new(2, n_out, head)
        };
        let model: Model<f64> = Model::<f32>::init(config, 5).unwrap().cast();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch: Vec<Example> = (0..4)
            .map(|_| {
                let len = rng.gen_range(3..8);
                let mut tokens = vec![2];
                tokens.extend((0..len).map(|_| rng.gen_range(0..2)));
                let labels = (0..=len)
                    .map(|_| if head == OutputHead::Softmax { rng.gen_range(0..n_out) } else { rng.gen_range(0..1 << n_out) })
                    .collect();
                Example { tokens, labels }
            })
            .collect();
        let refs: Vec<&Example> = batch.iter().collect();
        let (_, grad) = batch_gradient(&model, &refs).unwrap();
        let h = 1e-4;
        for _ in 0..25 {
            let idx = rng.gen_range(0..model.params().len());
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params_mut()[idx] += delta;
                batch_gradient(&m, &refs).unwrap().0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = numeric.abs().max(grad[idx].abs());
            if denom > 1e-10 {
                worst = worst.max((numeric - grad[idx]).abs() / denom);
            }
            checked += 1;
        }
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} over {checked} coordinates"))
}

fn criterion_4(models: &mut Models) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for lang in [LanguageSpec::Gridworld(1), LanguageSpec::Ones, LanguageSpec::First, LanguageSpec::Dyck(1)] {
        let list = models.until(state_key(lang), fits);
        let b = best(list);
        ok &= fits(b);
        parts.push(format!("{lang} {:.4} (seed {}, epoch {}/{})", b.train_f1, b.seed, b.best_epoch, b.epochs));
    }
    outcome(ok, parts.join(", "))
}

fn band_f1(model: &TransformerModel, key: Key, band: (usize, usize), count: usize, seed: u64) -> f64 {
    let test = dataset(key, count, band, Sampling::Uniform, seed);
    position_f1(model, key.1, &test.examples)
}

fn criterion_5(models: &mut Models) -> Outcome {
    let key = state_key(LanguageSpec::Gridworld(1));
    let band_scores = |t: &Trained| {
        (
            band_f1(&t.model, key, length_band(100), 1000, derive_indexed(t.seed, "data/test", 100)),
            band_f1(&t.model, key, length_band(1000), 200, derive_indexed(t.seed, "data/test", 1000)),
        )
    };
    let good = |t: &Trained| {
        let (a, b) = band_scores(t);
        a >= 0.95 && b >= 0.90
    };
    let list = models.until(key, good);
    let scores: Vec<String> = list
        .iter()
        .map(|t| {
            let (a, b) = band_scores(t);
            format!("seed {}: l100 {a:.4} l1000 {b:.4}", t.seed)
        })
        .collect();
    outcome(list.iter().any(good), scores.join("; "))
}

fn extraction_config(target: &moorelens::automata::MooreMachine) -> ExtractionConfig {
    ExtractionConfig {
        starting_examples: Some(default_starting_examples(target)),
        ..Default::default()
    }
}

fn criterion_6(models: &mut Models) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for lang in [LanguageSpec::Gridworld(1), LanguageSpec::Ones] {
        let target = target_machine(lang, TaskKind::StatePrediction).unwrap();
        let exact = |t: &Trained| {
            fits(t) && {
                let ex = extract(&t.model, &extraction_config(&target)).unwrap();
                isomorphic(&ex.machine, &target)
            }
        };
        let list = models.until(state_key(lang), exact);
        let mut found = None;
        for t in list.iter().filter(|t| fits(t)) {
            let ex = extract(&t.model, &extraction_config(&target)).unwrap();
            parts.push(format!("{lang} seed {}: {} states", t.seed, ex.machine.num_states()));
            if isomorphic(&ex.machine, &target) {
                found = Some(t.seed);
                break;
            }
        }
        ok &= found.is_some();
    }
    outcome(ok, parts.join(", "))
}

fn criterion_7(models: &mut Models) -> Outcome {
    let lang = LanguageSpec::Dyck(1);
    let key = Key(lang, TaskKind::NextChar, Sampling::PositiveOnly);
    let expected = garbage_free_machine(lang, TaskKind::NextChar).unwrap();
    let truth = target_machine(lang, TaskKind::NextChar).unwrap();
    let band = length_band(1000);
    let evaluate = |t: &Trained| -> (usize, bool, f64, f64) {
        let ex = extract(&t.model, &extraction_config(&truth)).unwrap();
        let words = random_words(2, band, 200, derive(t.seed, "agreement"));
        let mut preds = Vec::new();
        let mut true_labels = Vec::new();
        for w in &words {
            preds.extend(t.model.outputs(w).unwrap());
            true_labels.extend(Example::label(&truth, w).unwrap().labels);
        }
        let f1 = task_f1(TaskKind::NextChar, 3, &preds, &true_labels).unwrap();
        let agree = agreement(&ex.machine, &t.model, TaskKind::NextChar, band, 200, derive(t.seed, "agreement")).unwrap();
        (ex.machine.num_states(), isomorphic(&ex.machine, &expected), agree, f1)
    };
    let good = |t: &Trained| {
        let (_, iso, agree, f1) = evaluate(t);
        iso && agree > f1
    };
    let list = models.until(key, good);
    let mut parts = Vec::new();
    let mut ok = false;
    for t in list {
        let (n, iso, agree, f1) = evaluate(t);
        parts.push(format!("seed {}: {n} states, garbage-free shape {iso}, agreement {agree:.4} vs F1 {f1:.4}", t.seed));
        ok |= iso && agree > f1;
    }
    outcome(ok, parts.join("; "))
}

fn criterion_8(models: &mut Models) -> Outcome {
    models.until(state_key(LanguageSpec::Gridworld(2)), fits);
    let mut ok = true;
    let mut parts = Vec::new();
    let mut keys: Vec<(&Key, &Trained)> = models.all().filter(|(k, _)| k.1 != TaskKind::NextChar).collect();
    keys.sort_by_key(|(k, t)| (k.0.to_string(), t.seed));
    for (key, t) in keys {
        let map = OutputMap::from_model(t.model.model());
        let m = m_directions(&map, &MDirectionOptions::default()).unwrap();
        let dirs = m.vectors();
        let label = format!("{} seed {}", key.0, t.seed);
        match dirs.len() {
            2 => {
                let c = moorelens::analysis::cosine(&dirs[0], &dirs[1]);
                ok &= c < -0.95;
                parts.push(format!("{label}: cos {c:.4}"));
            }
            3 => {
                let sum: f64 = pairwise_angles(&dirs).iter().map(|a| a.2).sum();
                ok &= (sum - 360.0).abs() / 360.0 < 0.01;
                parts.push(format!("{label}: angle sum {sum:.2}"));
            }
            _ => {}
        }
    }
    outcome(ok, parts.join(", "))
}

fn first_failure(model: &TransformerModel, lang: LanguageSpec, family: ProbeFamily, n: usize) -> Option<usize> {
    let target = target_machine(lang, TaskKind::StatePrediction).unwrap();
    saturation_probe(model, &target, family, &[n]).unwrap()[0].failure_position
}

fn criterion_9(models: &mut Models) -> Outcome {
    models.until(state_key(LanguageSpec::Ones), fits);
    models.until(state_key(LanguageSpec::Gridworld(2)), fits);
    let ones = best(models.get(state_key(LanguageSpec::Ones)));
    // 0 1^1998 and (01)^999 are both shorter than 2000 symbols
    let a = first_failure(&ones.model, LanguageSpec::Ones, ProbeFamily::ZeroThenOnes, 1998);
    let g2 = best(models.get(state_key(LanguageSpec::Gridworld(2))));
    let b = first_failure(&g2.model, LanguageSpec::Gridworld(2), ProbeFamily::Alternating, 999);
    // not part of the check; shows which way a non-failing Ones model saturates
    let all_ones = first_failure(&ones.model, LanguageSpec::Ones, ProbeFamily::AllOnes, 1998);
    outcome(
        a.is_some() && b.is_some(),
        format!(
            "Ones seed {} on 0 1^n fails at {a:?} (on 1^n at {all_ones:?}); G2 seed {} on (01)^n fails at {b:?}",
            ones.seed, g2.seed
        ),
    )
}

fn criterion_10(models: &mut Models) -> Outcome {
    let ones = best(models.until(state_key(LanguageSpec::Ones), fits));
    let r = hahn_decay(&ones.model, &[32, 64, 128, 256, 512], 100, derive(ones.seed, "hahn")).unwrap();
    let medians: Vec<f64> = r.points.iter().map(|p| p.median).collect();
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        monotone && r.slope_median <= 0.0,
        format!(
            "Ones seed {}: medians [{}], slope {:.3}",
            ones.seed,
            medians.iter().map(|m| format!("{m:.3e}")).collect::<Vec<_>>().join(", "),
            r.slope_median
        ),
    )
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "timings.json" {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_11() -> Outcome {
    let config = ExperimentConfig {
        train: SetSize::exact(200, 16),
        val: SetSize::exact(50, 32),
        test_count: 20,
        test_bands: vec![10, 100],
        hyper: Hyper {
            max_epochs: 5,
            lr: 3e-3,
            ..Hyper::default()
        },
        seeds: vec![0, 1],
        extraction: ExtractionConfig {
            time_limit: 600.0,
            max_queries: Some(5000),
            ..Default::default()
        },
        analysis: AnalysisOptions {
            suffix_max_len: 10,
            probe_lengths: vec![50],
            hahn_grid: vec![16, 32],
            hahn_bases: 10,
            ..Default::default()
        },
        ..ExperimentConfig::new(LanguageSpec::Ones, TaskKind::StatePrediction)
    };
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&config, &a).unwrap();
    run(&config, &b).unwrap();
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    let differing: Vec<&String> = ta.iter().zip(&tb).filter(|(x, y)| x != y).map(|(x, _)| &x.0).collect();
    outcome(
        ta.len() == tb.len() && differing.is_empty() && ta.len() > 10,
        format!("{} files compared, {} differ {differing:?}", ta.len(), differing.len()),
    )
}

#[test]
fn acceptance_criteria() {
    let mut models = Models::default();
    let names = [
        "exact L* recovery",
        "whitebox extraction soundness on stubs",
        "gradient correctness",
        "trainability floor",
        "length generalisation",
        "extraction from trained models",
        "positive-only pitfall",
        "m-direction geometry",
        "saturation failure existence",
        "single-flip decay",
        "determinism",
    ];
    let mut results = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let start = Instant::now();
        let o = match i + 1 {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(&mut models),
            5 => criterion_5(&mut models),
            6 => criterion_6(&mut models),
            7 => criterion_7(&mut models),
            8 => criterion_8(&mut models),
            9 => criterion_9(&mut models),
            10 => criterion_10(&mut models),
            _ => criterion_11(),
        };
        println!(
            "criterion {:>2} {:<40} {} ({:.1} s) {}",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
        results.push(o.pass);
    }
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, p)| !**p).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
