//! Support-weighted F1, sequence accuracy and constant baselines.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::automata::{Dfa, Output, Symbol};
use crate::data::Example;
use crate::error::{invalid, Result};
use crate::languages::TaskKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub label: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub task: TaskKind,
    pub n_sequences: usize,
    pub n_positions: usize,
    pub f1: f64,
    /// Only defined for next-character prediction.
    pub sequence_accuracy: Option<f64>,
    pub per_label: Vec<LabelStats>,
    /// Weighted F1 of the task's constant baseline on the same data.
    pub baseline_f1: Option<f64>,
    pub baseline_sequence_accuracy: Option<f64>,
    pub majority_label: Option<usize>,
}

#[derive(Default, Clone, Copy)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl Counts {
    fn stats(self, label: usize) -> LabelStats {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_);
        LabelStats {
            label,
            precision,
            recall,
            f1,
            support: self.tp + self.fn_,
        }
    }
}

fn weighted(stats: &[LabelStats]) -> f64 {
    let total: usize = stats.iter().map(|s| s.support).sum();
    if total == 0 {
        return 0.0;
    }
    stats
        .iter()
        .map(|s| s.f1 * s.support as f64)
        .sum::<f64>()
        / total as f64
}

/// Per-label statistics for single-label classification, sorted by label.
pub fn label_stats(predictions: &[usize], labels: &[usize]) -> Result<Vec<LabelStats>> {
    check_aligned(predictions, labels)?;
    let mut counts: BTreeMap<usize, Counts> = BTreeMap::new();
    for (&p, &l) in predictions.iter().zip(labels) {
        if p == l {
            counts.entry(l).or_default().tp += 1;
        } else {
            counts.entry(l).or_default().fn_ += 1;
            counts.entry(p).or_default().fp += 1;
        }
    }
    Ok(counts.into_iter().map(|(l, c)| c.stats(l)).collect())
}

/// Per-bit statistics treating every bit of every bitmask as a separate
/// binary decision for that bit's symbol.
pub fn bit_stats(predictions: &[usize], labels: &[usize], n_bits: usize) -> Result<Vec<LabelStats>> {
    check_aligned(predictions, labels)?;
    let mut counts = vec![Counts::default(); n_bits];
    for (&p, &l) in predictions.iter().zip(labels) {
        for (bit, c) in counts.iter_mut().enumerate() {
            match ((p >> bit) & 1 == 1, (l >> bit) & 1 == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(counts.into_iter().enumerate().map(|(b, c)| c.stats(b)).collect())
}

fn check_aligned(predictions: &[usize], labels: &[usize]) -> Result<()> {
    if predictions.is_empty() {
        return Err(invalid("cannot score an empty prediction set"));
    }
    if predictions.len() != labels.len() {
        return Err(invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Per-label F1 averaged with weights equal to each label's true support.
pub fn f1_weighted(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    Ok(weighted(&label_stats(predictions, labels)?))
}

/// Multilabel variant over `n_bits`-wide bitmasks. If no bit is ever set in
/// the labels, the score is 1 when the predictions are also empty and 0
/// otherwise.
pub fn f1_weighted_bits(predictions: &[usize], labels: &[usize], n_bits: usize) -> Result<f64> {
    let stats = bit_stats(predictions, labels, n_bits)?;
    if stats.iter().all(|s| s.support == 0) {
        return Ok(if predictions == labels { 1.0 } else { 0.0 });
    }
    Ok(weighted(&stats))
}

/// Weighted F1 for a task, dispatching to the multilabel form for
/// next-character prediction.
pub fn task_f1(task: TaskKind, n_outputs_or_bits: usize, predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if task.is_multilabel() {
        f1_weighted_bits(predictions, labels, n_outputs_or_bits)
    } else {
        f1_weighted(predictions, labels)
    }
}

/// Whether next-character predictions for one sequence count as correct.
///
/// `predicted[i]` is the validity bitmask after reading `word[..i]`, with bit
/// `|Σ|` meaning the sequence may end there. The lenient rule credits the
/// model if it accepts a sequence the target accepts, rejects a rejected
/// sequence through its final accept bit, or flags the symbol on which the
/// target falls into its garbage state. The strict rule additionally requires
/// every earlier symbol to have been judged valid.
pub fn sequence_correct(predicted: &[usize], dfa: &Dfa, word: &[Symbol], strict: bool) -> Result<bool> {
    if predicted.len() != word.len() + 1 {
        return Err(invalid(format!(
            "{} predictions for a word of length {}",
            predicted.len(),
            word.len()
        )));
    }
    let m = dfa.machine();
    let accept_bit = 1usize << m.alphabet().len();
    let garbage = dfa.garbage_state();
    let (states, _) = m.run(word)?;
    let valid = |i: usize| predicted[i] >> word[i] & 1 == 1;
    let first_garbage = garbage.and_then(|g| states.iter().position(|&q| q == g));

    if let Some(g) = first_garbage.filter(|&g| g > 0) {
        // word[g-1] is the symbol that leads into the garbage state
        let flagged = !valid(g - 1);
        return Ok(flagged && (!strict || (0..g - 1).all(valid)));
    }
    let all_valid = (0..word.len()).all(valid);
    let model_accepts = predicted[word.len()] & accept_bit != 0;
    let target_accepts = dfa.is_accepting(*states.last().expect("nonempty run"));
    Ok(if target_accepts {
        all_valid && model_accepts
    } else {
        !model_accepts && (!strict || all_valid)
    })
}

/// Fraction of sequences scored correct by [`sequence_correct`].
pub fn sequence_accuracy(predictions: &[Vec<usize>], dfa: &Dfa, words: &[&[Symbol]], strict: bool) -> Result<f64> {
    if words.is_empty() || predictions.len() != words.len() {
        return Err(invalid("sequence accuracy needs one prediction row per word"));
    }
    let mut correct = 0usize;
    for (p, w) in predictions.iter().zip(words) {
        correct += usize::from(sequence_correct(p, dfa, w, strict)?);
    }
    Ok(correct as f64 / words.len() as f64)
}

/// Scores per-position predictions against a dataset's labels.
///
/// `n_outputs` is the output alphabet size (the bit count for next-character
/// prediction). `dfa` enables sequence accuracy for next-character prediction.
pub fn evaluate(
    dataset: &str,
    task: TaskKind,
    n_outputs: usize,
    predictions: &[Vec<Output>],
    examples: &[Example],
    dfa: Option<&Dfa>,
    strict: bool,
) -> Result<EvalReport> {
    if predictions.len() != examples.len() {
        return Err(invalid("one prediction row per example required"));
    }
    let flat_pred: Vec<usize> = predictions.iter().flatten().copied().collect();
    let flat_lab: Vec<usize> = examples.iter().flat_map(|e| e.labels.iter().copied()).collect();
    let per_label = if task.is_multilabel() {
        bit_stats(&flat_pred, &flat_lab, n_outputs)?
    } else {
        label_stats(&flat_pred, &flat_lab)?
    };
    let f1 = task_f1(task, n_outputs, &flat_pred, &flat_lab)?;

    let mut report = EvalReport {
        dataset: dataset.to_string(),
        task,
        n_sequences: examples.len(),
        n_positions: flat_lab.len(),
        f1,
        sequence_accuracy: None,
        per_label,
        baseline_f1: None,
        baseline_sequence_accuracy: None,
        majority_label: None,
    };
    match task {
        TaskKind::NextChar => {
            let all = (1usize << n_outputs) - 1;
            report.baseline_f1 = Some(f1_weighted_bits(&vec![all; flat_lab.len()], &flat_lab, n_outputs)?);
            if let Some(dfa) = dfa {
                let words: Vec<&[Symbol]> = examples.iter().map(|e| e.word()).collect();
                report.sequence_accuracy = Some(sequence_accuracy(predictions, dfa, &words, strict)?);
                let all_valid: Vec<Vec<usize>> = words.iter().map(|w| vec![all; w.len() + 1]).collect();
                report.baseline_sequence_accuracy =
                    Some(sequence_accuracy(&all_valid, dfa, &words, strict)?);
            }
        }
        TaskKind::StatePrediction | TaskKind::Membership => {
            let majority = majority_label(&flat_lab)?;
            report.majority_label = Some(majority);
            report.baseline_f1 = Some(f1_weighted(&vec![majority; flat_lab.len()], &flat_lab)?);
        }
    }
    Ok(report)
}

/// Most frequent label; ties go to the smallest label.
pub fn majority_label(labels: &[usize]) -> Result<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(l, _)| l)
        .ok_or_else(|| invalid("cannot take the majority of no labels"))
}

/// Report for the constant predictor that marks every symbol (and the end of
/// sequence) as valid everywhere.
pub fn baseline_all_valid(dataset: &str, examples: &[Example], n_bits: usize, dfa: Option<&Dfa>) -> Result<EvalReport> {
    let all = (1usize << n_bits) - 1;
    let preds: Vec<Vec<usize>> = examples.iter().map(|e| vec![all; e.labels.len()]).collect();
    evaluate(dataset, TaskKind::NextChar, n_bits, &preds, examples, dfa, false)
}

/// Report for the constant predictor of the dataset's majority label.
pub fn baseline_majority(dataset: &str, task: TaskKind, n_outputs: usize, examples: &[Example]) -> Result<EvalReport> {
    if task.is_multilabel() {
        return Err(invalid("majority baseline applies to single-label tasks"));
    }
    let flat: Vec<usize> = examples.iter().flat_map(|e| e.labels.iter().copied()).collect();
    let majority = majority_label(&flat)?;
    let preds: Vec<Vec<usize>> = examples.iter().map(|e| vec![majority; e.labels.len()]).collect();
    evaluate(dataset, task, n_outputs, &preds, examples, None, false)
}
