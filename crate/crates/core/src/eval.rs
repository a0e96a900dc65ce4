//! Downstream evaluation: classification metrics, imputation, perturbation
//! response and out-of-domain identity, reported as [`MetricsReport`]s.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{ExpressionDataset, Split};
use crate::error::{Error, Result};
use crate::graph::softmax_into;
use crate::losses::cosine_similarity;
use crate::model::{ModelState, TaskHead};
use crate::tensor::Tensor;
use crate::tokenizer::{mask_tokens, TokenSequence};
use crate::training::{derive_seed, Corpus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    /// Classes occurring in either the truth or the predictions, ascending.
    pub per_class: Vec<ClassScore>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision/recall/F1 (0/0 counts as 0). Macro-F1 averages over
/// the classes that occur in `y_true` or `y_pred`; weighted-F1 weights by
/// support.
pub fn classification_metrics(y_true: &[usize], y_pred: &[usize]) -> Result<ClassificationMetrics> {
    if y_true.len() != y_pred.len() {
        return Err(Error::LengthMismatch {
            expected: y_true.len(),
            actual: y_pred.len(),
        });
    }
    if y_true.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes: BTreeSet<usize> = y_true.iter().chain(y_pred).copied().collect();
    let mut tp = BTreeMap::new();
    let mut pred_n = BTreeMap::new();
    let mut true_n = BTreeMap::new();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        *true_n.entry(t).or_insert(0usize) += 1;
        *pred_n.entry(p).or_insert(0usize) += 1;
        if t == p {
            *tp.entry(t).or_insert(0usize) += 1;
        }
    }
    let get = |m: &BTreeMap<usize, usize>, c: usize| m.get(&c).copied().unwrap_or(0);
    let per_class: Vec<ClassScore> = classes
        .iter()
        .map(|&c| {
            let precision = ratio(get(&tp, c), get(&pred_n, c));
            let recall = ratio(get(&tp, c), get(&true_n, c));
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScore {
                class: c,
                precision,
                recall,
                f1,
                support: get(&true_n, c),
            }
        })
        .collect();
    let n = y_true.len() as f64;
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len() as f64;
    let weighted_f1 = per_class.iter().map(|c| c.f1 * c.support as f64).sum::<f64>() / n;
    let accuracy = tp.values().sum::<usize>() as f64 / n;
    Ok(ClassificationMetrics {
        macro_f1,
        weighted_f1,
        accuracy,
        per_class,
    })
}

/// Indices of the `k` largest scores; equal scores favor the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn argmax(scores: &[f64]) -> usize {
    top_k(scores, 1)[0]
}

/// Fraction of samples whose true class is among the `k` top-scoring classes.
pub fn recall_at_k(y_true: &[usize], scores: &[Vec<f64>], k: usize) -> Result<f64> {
    if y_true.len() != scores.len() {
        return Err(Error::LengthMismatch {
            expected: y_true.len(),
            actual: scores.len(),
        });
    }
    if y_true.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = scores[0].len();
    if k == 0 || k > classes {
        return Err(Error::KOutOfRange { k, classes });
    }
    let mut hits = 0;
    for (&t, s) in y_true.iter().zip(scores) {
        if s.len() != classes {
            return Err(Error::LengthMismatch {
                expected: classes,
                actual: s.len(),
            });
        }
        if t >= classes {
            return Err(Error::LabelOutOfRange { label: t, classes });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("scores"));
        }
        if top_k(s, k).contains(&t) {
            hits += 1;
        }
    }
    Ok(hits as f64 / y_true.len() as f64)
}

/// Pearson correlation; fails on fewer than two points or zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::DegenerateVector);
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine_similarity(a, b)
}

/// Pearson between predicted and observed expression changes.
pub fn dge_pearson(predicted_delta: &[f64], true_delta: &[f64]) -> Result<f64> {
    pearson(predicted_delta, true_delta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub per_class: Vec<ClassReport>,
    pub split: String,
    pub seed: u64,
    pub checkpoint_hash: String,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

const UNIT_INTERVAL: [&str; 4] = ["macro_f1", "weighted_f1", "accuracy", "recall@"];

impl MetricsReport {
    fn new(task: &str, split: &str, ctx: &EvalContext) -> Self {
        Self {
            task: task.to_owned(),
            metrics: BTreeMap::new(),
            per_class: Vec::new(),
            split: split.to_owned(),
            seed: ctx.seed,
            checkpoint_hash: ctx.checkpoint_hash.clone(),
            notes: BTreeMap::new(),
        }
    }

    /// Every value finite; rates in [0, 1]; correlations in [-1, 1].
    pub fn validate(&self) -> Result<()> {
        for (name, &v) in &self.metrics {
            if !v.is_finite() {
                return Err(Error::NonFiniteInput("metric"));
            }
            let rate = UNIT_INTERVAL.iter().any(|p| name.starts_with(p));
            let corr = name.contains("pearson") || name.contains("cosine");
            if (rate && !(0.0..=1.0).contains(&v)) || (corr && !(-1.0..=1.0).contains(&v)) {
                return Err(Error::InvalidConfig(format!("metric {name} = {v} out of range")));
            }
        }
        Ok(())
    }

    /// Aligned text table: metrics first, then the per-class breakdown.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "task: {}  split: {}  seed: {}", self.task, self.split, self.seed);
        let width = self.metrics.keys().map(String::len).max().unwrap_or(6).max(6);
        let _ = writeln!(out, "{:<width$}  {:>10}", "metric", "value");
        for (k, v) in &self.metrics {
            let _ = writeln!(out, "{k:<width$}  {v:>10.4}");
        }
        if !self.per_class.is_empty() {
            let lw = self.per_class.iter().map(|c| c.label.len()).max().unwrap_or(5).max(5);
            let _ = writeln!(
                out,
                "\n{:<lw$}  {:>9}  {:>9}  {:>9}  {:>7}",
                "class", "precision", "recall", "f1", "support"
            );
            for c in &self.per_class {
                let _ = writeln!(
                    out,
                    "{:<lw$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
                    c.label, c.precision, c.recall, c.f1, c.support
                );
            }
        }
        for (k, v) in &self.notes {
            let _ = writeln!(out, "{k}: {v}");
        }
        out
    }
}

/// Run metadata copied into every report.
#[derive(Clone, Debug, Default)]
pub struct EvalContext {
    pub seed: u64,
    pub checkpoint_hash: String,
}

/// `h_c` for each listed cell, in eval mode.
pub fn cell_embeddings(state: &ModelState, corpus: &Corpus, cells: &[usize]) -> Result<Vec<Vec<f64>>> {
    cells
        .iter()
        .map(|&i| state.embed(&TokenSequence::unmasked(corpus.tokens[i].clone())))
        .collect()
}

fn linear_rows(state: &ModelState, prefix: &str, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let w = state
        .params
        .by_name(&format!("{prefix}.weight"))
        .ok_or_else(|| Error::IncompatibleTask(format!("checkpoint has no {prefix} head")))?;
    let b = state.params.by_name(&format!("{prefix}.bias")).expect("head bias");
    let out = Tensor::from_rows(rows).matmul(w);
    Ok((0..out.rows())
        .map(|i| out.row(i).iter().zip(b.data()).map(|(x, y)| x + y).collect())
        .collect())
}

fn identity_classes(state: &ModelState) -> Result<&[String]> {
    match &state.head {
        Some(TaskHead::Identity { classes }) => Ok(classes),
        _ => Err(Error::IncompatibleTask("checkpoint has no identity head".into())),
    }
}

fn labels_for(data: &ExpressionDataset, cells: &[usize], classes: &[String]) -> Result<Vec<usize>> {
    cells
        .iter()
        .map(|&i| {
            let t = &data.meta[i].cell_type;
            classes
                .iter()
                .position(|c| c == t)
                .ok_or_else(|| Error::LabelSpaceMismatch(format!("label `{t}` unknown to the classifier")))
        })
        .collect()
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
        Split::Ood => "ood",
    }
}

/// Classifier scores (logits) for the given cells.
pub fn identity_scores(state: &ModelState, corpus: &Corpus, cells: &[usize]) -> Result<Vec<Vec<f64>>> {
    identity_classes(state)?;
    let h = cell_embeddings(state, corpus, cells)?;
    linear_rows(state, "head.identity", &h)
}

fn classification_report(
    task: &str,
    split: Split,
    state: &ModelState,
    data: &ExpressionDataset,
    ks: &[usize],
    ctx: &EvalContext,
) -> Result<MetricsReport> {
    let classes = identity_classes(state)?.to_vec();
    let cells = data.indices(split);
    if cells.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let y_true = labels_for(data, &cells, &classes)?;
    let corpus = Corpus::new(data, state.config.cell.max_len)?;
    let scores = identity_scores(state, &corpus, &cells)?;
    let y_pred: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    let m = classification_metrics(&y_true, &y_pred)?;
    let mut report = MetricsReport::new(task, split_name(split), ctx);
    report.metrics.insert("macro_f1".into(), m.macro_f1);
    report.metrics.insert("weighted_f1".into(), m.weighted_f1);
    report.metrics.insert("accuracy".into(), m.accuracy);
    for &k in ks {
        report
            .metrics
            .insert(format!("recall@{k}"), recall_at_k(&y_true, &scores, k)?);
    }
    report.per_class = m
        .per_class
        .iter()
        .map(|c| ClassReport {
            label: classes[c.class].clone(),
            precision: c.precision,
            recall: c.recall,
            f1: c.f1,
            support: c.support,
        })
        .collect();
    report.notes.insert("cells".into(), cells.len().to_string());
    Ok(report)
}

/// Cell-type identification on `split` with the checkpoint's classifier.
pub fn identity_eval(
    state: &ModelState,
    data: &ExpressionDataset,
    split: Split,
    ks: &[usize],
    ctx: &EvalContext,
) -> Result<MetricsReport> {
    classification_report("identity", split, state, data, ks, ctx)
}

/// Zero-shot identity on a covariate-shifted split. No parameters change.
pub fn out_of_domain_eval(
    state: &ModelState,
    data: &ExpressionDataset,
    target: Split,
    ks: &[usize],
    ctx: &EvalContext,
) -> Result<MetricsReport> {
    let classes = identity_classes(state)?;
    let target_cells = data.indices(target);
    labels_for(data, &target_cells, classes)?;
    let mut report = classification_report("ood", target, state, data, ks, ctx)?;
    let batches: BTreeSet<usize> = target_cells.iter().map(|&i| data.meta[i].batch).collect();
    let source: BTreeSet<usize> = data.indices(Split::Train).iter().map(|&i| data.meta[i].batch).collect();
    report.notes.insert(
        "shift".into(),
        format!("target batches {batches:?} vs source batches {source:?}"),
    );
    Ok(report)
}

/// Maps MLM-head predictions at masked positions back to expression values.
///
/// For each masked gene, the head's probability of that gene at every masked
/// position gives an expected rank; the cell's own sorted normalized values,
/// interpolated at that rank and multiplied by the gene median, give the
/// predicted expression.
pub fn decode_masked_expression(
    masked_logits: &[Vec<f64>],
    masked_positions: &[usize],
    masked_genes: &[usize],
    sorted_values: &[f64],
    medians: &[f64],
) -> Vec<f64> {
    let probs: Vec<Vec<f64>> = masked_logits
        .iter()
        .map(|l| {
            let mut p = vec![0.0; l.len()];
            softmax_into(l, &mut p);
            p
        })
        .collect();
    let mean_pos = masked_positions.iter().sum::<usize>() as f64 / masked_positions.len() as f64;
    masked_genes
        .iter()
        .map(|&g| {
            let weights: Vec<f64> = probs.iter().map(|p| p[g]).collect();
            let wsum: f64 = weights.iter().sum();
            let rank = if wsum > 0.0 {
                weights
                    .iter()
                    .zip(masked_positions)
                    .map(|(w, &p)| w * p as f64)
                    .sum::<f64>()
                    / wsum
            } else {
                mean_pos
            };
            let lo = rank.floor() as usize;
            let hi = (lo + 1).min(sorted_values.len() - 1);
            let frac = rank - lo as f64;
            let v = sorted_values[lo] * (1.0 - frac) + sorted_values[hi] * frac;
            v * medians[g]
        })
        .collect()
}

/// Masks `mask_rate` of each test cell's genes, predicts them from the MLM
/// head, and averages per-cell Pearson and cosine over masked genes.
pub fn imputation_eval(
    state: &ModelState,
    data: &ExpressionDataset,
    split: Split,
    mask_rate: f64,
    ctx: &EvalContext,
) -> Result<MetricsReport> {
    let corpus = Corpus::new(data, state.config.cell.max_len)?;
    let cells = data.indices(split);
    if cells.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut pearsons, mut cosines) = (Vec::new(), Vec::new());
    let mut excluded = 0usize;
    for &c in &cells {
        let seq = TokenSequence::unmasked(corpus.tokens[c].clone());
        let masked = mask_tokens(&seq, &corpus.vocab, mask_rate, derive_seed(ctx.seed, &[c as u64]))?;
        if masked.masked.len() < 2 {
            excluded += 1;
            continue;
        }
        let enc = state.encode_cell(&masked)?;
        let expr = data.expression(c);
        let sorted: Vec<f64> = seq.tokens.iter().map(|&g| expr[g] / corpus.medians.0[g]).collect();
        let logits: Vec<Vec<f64>> = masked
            .masked
            .iter()
            .map(|&p| enc.token_logits.row(p).to_vec())
            .collect();
        let pred = decode_masked_expression(&logits, &masked.masked, &masked.targets, &sorted, &corpus.medians.0);
        let truth: Vec<f64> = masked.targets.iter().map(|&g| expr[g]).collect();
        match (pearson(&pred, &truth), cosine(&pred, &truth)) {
            (Ok(r), Ok(cs)) => {
                pearsons.push(r);
                cosines.push(cs);
            }
            _ => excluded += 1,
        }
    }
    if pearsons.is_empty() {
        return Err(Error::DegenerateCell(excluded));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut report = MetricsReport::new("imputation", split_name(split), ctx);
    report.metrics.insert("pearson".into(), mean(&pearsons));
    report.metrics.insert("cosine".into(), mean(&cosines));
    report
        .notes
        .insert("cells_evaluated".into(), pearsons.len().to_string());
    report.notes.insert("cells_excluded".into(), excluded.to_string());
    report.notes.insert("mask_rate".into(), mask_rate.to_string());
    Ok(report)
}

/// Pearson between mean predicted and mean observed expression change for
/// each held-out cell type, averaged over types.
pub fn perturbation_eval(state: &ModelState, data: &ExpressionDataset, ctx: &EvalContext) -> Result<MetricsReport> {
    let held_out = match &state.head {
        Some(TaskHead::Perturbation { held_out, .. }) => held_out.clone(),
        _ => return Err(Error::IncompatibleTask("checkpoint has no perturbation head".into())),
    };
    let post = data
        .perturbed
        .as_ref()
        .ok_or_else(|| Error::IncompatibleTask("dataset has no post-perturbation matrix".into()))?;
    if held_out.is_empty() {
        return Err(Error::IncompatibleTask("no held-out cell types recorded".into()));
    }
    let corpus = Corpus::new(data, state.config.cell.max_len)?;
    let genes = data.num_genes();
    let mut report = MetricsReport::new("perturbation", "held_out", ctx);
    let mut scores = Vec::new();
    for t in &held_out {
        let cells: Vec<usize> = (0..data.num_cells())
            .filter(|&i| &data.meta[i].cell_type == t)
            .collect();
        if cells.is_empty() {
            return Err(Error::DegenerateGroup(format!("{t}: no cells")));
        }
        let h = cell_embeddings(state, &corpus, &cells)?;
        let preds = linear_rows(state, "head.perturbation", &h)?;
        let mut pred_mean = vec![0.0; genes];
        let mut true_mean = vec![0.0; genes];
        let inv = 1.0 / cells.len() as f64;
        for (k, &c) in cells.iter().enumerate() {
            for g in 0..genes {
                pred_mean[g] += inv * preds[k][g];
                true_mean[g] += inv * (post.get(c, g) - data.matrix.get(c, g));
            }
        }
        let r = dge_pearson(&pred_mean, &true_mean).map_err(|_| Error::DegenerateGroup(t.clone()))?;
        report.metrics.insert(format!("dge_pearson/{t}"), r);
        scores.push(r);
    }
    report
        .metrics
        .insert("dge_pearson".into(), scores.iter().sum::<f64>() / scores.len() as f64);
    report.notes.insert("held_out".into(), held_out.join(","));
    Ok(report)
}
