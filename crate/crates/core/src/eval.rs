//! Evaluation protocols: answer scoring, leave-one-out threshold accuracy,
//! average precision and precision@k over labeled pairs, 1-of-6 image
//! ranking, and gate export.
//!
//! For AP and precision@k the target class is *irrelevant*: pairs are
//! ranked by ascending score so the most confidently off-topic come first.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::FeatureSet;
use crate::model::Model;
use crate::vocab::{read_tab_pairs, Sentence, Vocabulary};

pub const RANK_CANDIDATES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Relevant,
    Irrelevant,
    Unknown,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Relevant => "rel",
            Label::Irrelevant => "irr",
            Label::Unknown => "?",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rel" => Ok(Label::Relevant),
            "irr" => Ok(Label::Irrelevant),
            "?" | "" => Ok(Label::Unknown),
            other => Err(Error::Data(format!("unknown label {other:?}, expected rel|irr"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPair {
    pub answer_id: String,
    pub image_id: String,
    pub score: f64,
    pub label: Label,
}

impl ScoredPair {
    pub fn new(answer_id: impl Into<String>, image_id: impl Into<String>, score: f64, label: Label) -> Self {
        Self {
            answer_id: answer_id.into(),
            image_id: image_id.into(),
            score,
            label,
        }
    }
}

/// `(score, is_relevant)` for every pair; both classes must be present.
fn labeled(pairs: &[ScoredPair]) -> Result<Vec<(f64, bool)>> {
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        if !p.score.is_finite() {
            return Err(Error::Numeric(format!("non-finite score for answer {}", p.answer_id)));
        }
        match p.label {
            Label::Relevant => out.push((p.score, true)),
            Label::Irrelevant => out.push((p.score, false)),
            Label::Unknown => {
                return Err(Error::Contract(format!("answer {} has no gold label", p.answer_id)))
            }
        }
    }
    let rel = out.iter().filter(|p| p.1).count();
    if rel == 0 || rel == out.len() {
        return Err(Error::Degenerate("both relevant and irrelevant pairs are required".into()));
    }
    Ok(out)
}

/// Accuracy-maximizing threshold over sorted `(score, relevant)` items,
/// with item `skip` left out. Candidates run from −∞ through the midpoints
/// of adjacent distinct scores to +∞; the first (lowest) maximum wins.
fn best_threshold(sorted: &[(f64, bool)], skip: usize) -> f64 {
    let rel_total = sorted
        .iter()
        .enumerate()
        .filter(|&(i, p)| i != skip && p.1)
        .count();
    let mut correct = rel_total;
    let mut best = (correct, f64::NEG_INFINITY);
    let mut idx = 0;
    let mut prev: Option<f64> = None;
    while idx < sorted.len() {
        let value = sorted[idx].0;
        let mut end = idx;
        while end < sorted.len() && sorted[end].0 == value {
            end += 1;
        }
        let live = (idx..end).filter(|&i| i != skip);
        let group: Vec<bool> = live.map(|i| sorted[i].1).collect();
        if group.is_empty() {
            idx = end;
            continue;
        }
        if let Some(p) = prev {
            // threshold between `p` and `value`: everything ≤ p predicted irrelevant
            let t = p + (value - p) / 2.0;
            if correct > best.0 {
                best = (correct, t);
            }
        }
        for relevant in group {
            if relevant {
                correct -= 1;
            } else {
                correct += 1;
            }
        }
        prev = Some(value);
        idx = end;
    }
    if correct > best.0 {
        best = (correct, f64::INFINITY);
    }
    best.1
}

/// Percent of pairs classified correctly when each is thresholded at the
/// accuracy-optimal cut fitted on all the others (`score ≥ t` ⇒ relevant).
pub fn loo_accuracy(pairs: &[ScoredPair]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::Degenerate("leave-one-out needs at least two pairs".into()));
    }
    let mut items = labeled(pairs)?;
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    let correct = (0..items.len())
        .filter(|&k| {
            let t = best_threshold(&items, k);
            (items[k].0 >= t) == items[k].1
        })
        .count();
    Ok(100.0 * correct as f64 / items.len() as f64)
}

/// Ascending score, ties broken by answer id, then input order.
fn ranked(pairs: &[ScoredPair]) -> Vec<&ScoredPair> {
    let mut order: Vec<&ScoredPair> = pairs.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.answer_id.cmp(&b.answer_id)));
    order
}

/// Average precision (percent) of the irrelevant class.
pub fn average_precision(pairs: &[ScoredPair]) -> Result<f64> {
    labeled(pairs)?;
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, p) in ranked(pairs).into_iter().enumerate() {
        if p.label == Label::Irrelevant {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(100.0 * total / hits as f64)
}

/// Percent irrelevant among the `k` lowest-scored pairs.
pub fn precision_at_k(pairs: &[ScoredPair], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Param("k must be positive".into()));
    }
    if pairs.len() < k {
        return Err(Error::Contract(format!(
            "precision@{k} needs at least {k} pairs, got {}",
            pairs.len()
        )));
    }
    labeled(pairs)?;
    let irr = ranked(pairs)
        .into_iter()
        .take(k)
        .filter(|p| p.label == Label::Irrelevant)
        .count();
    Ok(100.0 * irr as f64 / k as f64)
}

/// `(mean relevant score, mean irrelevant score)`.
pub fn mean_pos_neg(pairs: &[ScoredPair]) -> Result<(f64, f64)> {
    let items = labeled(pairs)?;
    let (mut pos, mut npos, mut neg, mut nneg) = (0.0, 0usize, 0.0, 0usize);
    for (s, rel) in items {
        if rel {
            pos += s;
            npos += 1;
        } else {
            neg += s;
            nneg += 1;
        }
    }
    Ok((pos / npos as f64, neg / nneg as f64))
}

/// Mean of the per-sentence scores of an answer against one image.
pub fn score_answer(model: &Model, sentences: &[Sentence], image: &[f64]) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::Contract("answer has no sentences".into()));
    }
    let refs: Vec<&Sentence> = sentences.iter().collect();
    let pairs: Vec<(usize, usize)> = (0..sentences.len()).map(|s| (s, 0)).collect();
    let scores = model.score_pairs(&refs, &[image], &pairs)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// An answer made of one or more sentences.
#[derive(Clone, Debug, PartialEq)]
pub struct Answer {
    pub answer_id: String,
    pub sentences: Vec<Sentence>,
}

/// Scores `(answer index, image id, label)` triples, averaging over each
/// answer's sentences. All sentences are encoded once.
pub fn score_answers(
    model: &Model,
    answers: &[Answer],
    features: &FeatureSet,
    requests: &[(usize, String, Label)],
) -> Result<Vec<ScoredPair>> {
    let mut sentences: Vec<&Sentence> = Vec::new();
    let mut spans = Vec::with_capacity(answers.len());
    for a in answers {
        if a.sentences.is_empty() {
            return Err(Error::Contract(format!("answer {} has no sentences", a.answer_id)));
        }
        spans.push(sentences.len()..sentences.len() + a.sentences.len());
        sentences.extend(a.sentences.iter());
    }
    let mut images: Vec<&[f64]> = Vec::new();
    let mut image_slot = HashMap::new();
    let mut pairs = Vec::new();
    for (answer, image_id, _) in requests {
        let span = spans
            .get(*answer)
            .ok_or_else(|| Error::Contract(format!("answer index {answer} out of range")))?
            .clone();
        let slot = match image_slot.get(image_id.as_str()) {
            Some(&s) => s,
            None => {
                images.push(features.require(image_id)?.values.as_slice());
                image_slot.insert(image_id.as_str(), images.len() - 1);
                images.len() - 1
            }
        };
        pairs.extend(span.map(|s| (s, slot)));
    }
    let flat = model.score_pairs(&sentences, &images, &pairs)?;
    let mut out = Vec::with_capacity(requests.len());
    let mut cursor = 0;
    for (answer, image_id, label) in requests {
        let n = answers[*answer].sentences.len();
        let mean = flat[cursor..cursor + n].iter().sum::<f64>() / n as f64;
        cursor += n;
        out.push(ScoredPair::new(answers[*answer].answer_id.clone(), image_id.clone(), mean, *label));
    }
    Ok(out)
}

/// One positive (own image) and one negative (random other image) pair per
/// answer, drawn from `pool`.
pub fn make_eval_pairs<R: Rng + ?Sized>(
    answers: &[(String, String)],
    pool: &[String],
    rng: &mut R,
) -> Result<Vec<(String, String, Label)>> {
    let mut out = Vec::with_capacity(answers.len() * 2);
    for (answer_id, image_id) in answers {
        let others: Vec<&String> = pool.iter().filter(|id| *id != image_id).collect();
        let negative = others
            .choose(rng)
            .ok_or_else(|| Error::Data("image pool has no image to pair as a negative".into()))?;
        out.push((answer_id.clone(), image_id.clone(), Label::Relevant));
        out.push((answer_id.clone(), (*negative).clone(), Label::Irrelevant));
    }
    Ok(out)
}

/// Hit iff the true candidate's score is strictly above every other one.
pub fn is_hit(scores: &[f64], truth: usize) -> bool {
    scores
        .iter()
        .enumerate()
        .all(|(i, &s)| i == truth || scores[truth] > s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankOutcome {
    pub hit: bool,
    pub true_score: f64,
    pub distractor_scores: Vec<f64>,
}

fn check_candidates<'a>(ids: impl Iterator<Item = &'a str>, truth: usize) -> Result<()> {
    let ids: Vec<&str> = ids.collect();
    if ids.len() != RANK_CANDIDATES {
        return Err(Error::Contract(format!(
            "ranking needs {RANK_CANDIDATES} candidates, got {}",
            ids.len()
        )));
    }
    if truth >= ids.len() {
        return Err(Error::Contract(format!("true candidate index {truth} out of range")));
    }
    let unique: HashSet<&str> = ids.iter().copied().collect();
    if unique.len() != ids.len() {
        return Err(Error::Contract("duplicate candidate image ids".into()));
    }
    Ok(())
}

/// Ranks one sentence against six candidate images, `truth` marking the
/// relevant one.
pub fn rank_1of6(model: &Model, sentence: &Sentence, candidates: &[(&str, &[f64])], truth: usize) -> Result<RankOutcome> {
    check_candidates(candidates.iter().map(|c| c.0), truth)?;
    let images: Vec<&[f64]> = candidates.iter().map(|c| c.1).collect();
    let pairs: Vec<(usize, usize)> = (0..images.len()).map(|i| (0, i)).collect();
    let scores = model.score_pairs(&[sentence], &images, &pairs)?;
    Ok(outcome(&scores, truth))
}

fn outcome(scores: &[f64], truth: usize) -> RankOutcome {
    RankOutcome {
        hit: is_hit(scores, truth),
        true_score: scores[truth],
        distractor_scores: scores
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != truth)
            .map(|(_, &s)| s)
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankTrial {
    pub sentence: usize,
    pub candidates: Vec<String>,
    pub truth: usize,
}

/// One trial per sentence (or `n_trials` sentences sampled with replacement):
/// the true image plus five distinct random distractors from `pool`, shuffled.
pub fn make_rank_trials<R: Rng + ?Sized>(
    true_images: &[String],
    pool: &[String],
    n_trials: Option<usize>,
    rng: &mut R,
) -> Result<Vec<RankTrial>> {
    if true_images.is_empty() {
        return Err(Error::Data("no sentences to rank".into()));
    }
    let mut distinct: Vec<&String> = Vec::new();
    let mut seen = HashSet::new();
    for id in pool {
        if seen.insert(id) {
            distinct.push(id);
        }
    }
    let order: Vec<usize> = match n_trials {
        None => (0..true_images.len()).collect(),
        Some(n) => (0..n).map(|_| rng.random_range(0..true_images.len())).collect(),
    };
    let mut trials = Vec::with_capacity(order.len());
    for sentence in order {
        let truth_id = &true_images[sentence];
        let others: Vec<&String> = distinct.iter().copied().filter(|id| *id != truth_id).collect();
        if others.len() < RANK_CANDIDATES - 1 {
            return Err(Error::Data(format!(
                "need {} distractor images besides {truth_id}, pool has {}",
                RANK_CANDIDATES - 1,
                others.len()
            )));
        }
        let mut candidates: Vec<String> = others
            .choose_multiple(rng, RANK_CANDIDATES - 1)
            .map(|s| (*s).clone())
            .collect();
        candidates.push(truth_id.clone());
        candidates.shuffle(rng);
        let truth = candidates.iter().position(|c| c == truth_id).unwrap();
        trials.push(RankTrial {
            sentence,
            candidates,
            truth,
        });
    }
    Ok(trials)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankSummary {
    pub trials: usize,
    pub hits: usize,
    pub mean_positive: f64,
    pub mean_negative: f64,
}

impl RankSummary {
    pub fn accuracy(&self) -> f64 {
        100.0 * self.hits as f64 / self.trials as f64
    }
}

/// Runs every trial, scoring all `(sentence, candidate)` pairs in one pass.
pub fn evaluate_rank(model: &Model, sentences: &[Sentence], features: &FeatureSet, trials: &[RankTrial]) -> Result<RankSummary> {
    if trials.is_empty() {
        return Err(Error::Contract("no ranking trials".into()));
    }
    let mut images: Vec<&[f64]> = Vec::new();
    let mut slot = std::collections::HashMap::new();
    let mut pairs = Vec::with_capacity(trials.len() * RANK_CANDIDATES);
    let mut used: Vec<usize> = Vec::new();
    let mut sentence_slot = std::collections::HashMap::new();
    for t in trials {
        check_candidates(t.candidates.iter().map(String::as_str), t.truth)?;
        if t.sentence >= sentences.len() {
            return Err(Error::Contract(format!("trial sentence {} out of range", t.sentence)));
        }
        let s = *sentence_slot.entry(t.sentence).or_insert_with(|| {
            used.push(t.sentence);
            used.len() - 1
        });
        for id in &t.candidates {
            let i = match slot.get(id.as_str()) {
                Some(&i) => i,
                None => {
                    images.push(features.require(id)?.values.as_slice());
                    slot.insert(id.as_str(), images.len() - 1);
                    images.len() - 1
                }
            };
            pairs.push((s, i));
        }
    }
    let refs: Vec<&Sentence> = used.iter().map(|&i| &sentences[i]).collect();
    let scores = model.score_pairs(&refs, &images, &pairs)?;
    let (mut hits, mut pos, mut neg) = (0, 0.0, 0.0);
    for (t, chunk) in trials.iter().zip(scores.chunks(RANK_CANDIDATES)) {
        let o = outcome(chunk, t.truth);
        hits += o.hit as usize;
        pos += o.true_score;
        neg += o.distractor_scores.iter().sum::<f64>();
    }
    let n = trials.len() as f64;
    Ok(RankSummary {
        trials: trials.len(),
        hits,
        mean_positive: pos / n,
        mean_negative: neg / (n * (RANK_CANDIDATES - 1) as f64),
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub pairs: usize,
    pub accuracy: Option<f64>,
    pub average_precision: Option<f64>,
    pub precision_at_k: Option<(usize, f64)>,
    pub mean_positive: Option<f64>,
    pub mean_negative: Option<f64>,
}

impl EvalReport {
    /// All labeled-pair metrics. Precision@k is skipped (left `None`) when
    /// there are fewer than `k` pairs.
    pub fn from_pairs(pairs: &[ScoredPair], k: usize) -> Result<Self> {
        let (pos, neg) = mean_pos_neg(pairs)?;
        let p_at_k = if pairs.len() >= k {
            Some((k, precision_at_k(pairs, k)?))
        } else {
            None
        };
        Ok(Self {
            pairs: pairs.len(),
            accuracy: Some(loo_accuracy(pairs)?),
            average_precision: Some(average_precision(pairs)?),
            precision_at_k: p_at_k,
            mean_positive: Some(pos),
            mean_negative: Some(neg),
        })
    }

    pub fn from_rank(summary: &RankSummary) -> Self {
        Self {
            pairs: summary.trials,
            accuracy: Some(summary.accuracy()),
            average_precision: None,
            precision_at_k: None,
            mean_positive: Some(summary.mean_positive),
            mean_negative: Some(summary.mean_negative),
        }
    }

    fn rows(&self) -> Vec<(String, String)> {
        let mut rows = vec![("pairs".to_string(), self.pairs.to_string())];
        let mut push = |k: String, v: Option<f64>| {
            if let Some(v) = v {
                rows.push((k, format!("{v:.4}")));
            }
        };
        push("accuracy".into(), self.accuracy);
        push("average_precision".into(), self.average_precision);
        if let Some((k, v)) = self.precision_at_k {
            push(format!("precision_at_{k}"), Some(v));
        }
        push("mean_positive".into(), self.mean_positive);
        push("mean_negative".into(), self.mean_negative);
        rows
    }

    pub fn to_key_values(&self) -> String {
        self.rows().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_table(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        rows.into_iter()
            .map(|(k, v)| format!("{k:<width$}  {v:>12}\n"))
            .collect()
    }
}

/// Reads `answer_id<TAB>sentence` rows; rows sharing an id form one answer,
/// in order of first appearance.
pub fn read_answers(path: &Path, vocab: &Vocabulary) -> Result<Vec<Answer>> {
    let mut answers: Vec<Answer> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for (id, text) in read_tab_pairs(path)? {
        let sentence = vocab.encode(&text)?;
        match slot.get(&id) {
            Some(&i) => answers[i].sentences.push(sentence),
            None => {
                slot.insert(id.clone(), answers.len());
                answers.push(Answer {
                    answer_id: id,
                    sentences: vec![sentence],
                });
            }
        }
    }
    Ok(answers)
}

/// Reads `answer_id<TAB>image_id<TAB>label` rows (`rel`, `irr` or `?`).
pub fn read_eval_pairs(path: &Path) -> Result<Vec<(String, String, Label)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [answer, image, label] = fields[..] else {
            return Err(Error::format(path, n + 1, format!("expected 3 tab-separated fields, found {}", fields.len())));
        };
        let label = label
            .trim()
            .parse()
            .map_err(|_| Error::format(path, n + 1, format!("unknown label {label:?}")))?;
        out.push((answer.to_string(), image.to_string(), label));
    }
    Ok(out)
}

pub fn write_eval_pairs(path: &Path, pairs: &[(String, String, Label)]) -> Result<()> {
    let text: String = pairs
        .iter()
        .map(|(a, i, l)| format!("{a}\t{i}\t{}\n", l.as_str()))
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Resolves answer ids in `pairs` to indices into `answers`.
pub fn resolve_pairs(answers: &[Answer], pairs: &[(String, String, Label)]) -> Result<Vec<(usize, String, Label)>> {
    let index: HashMap<&str, usize> = answers
        .iter()
        .enumerate()
        .map(|(i, a)| (a.answer_id.as_str(), i))
        .collect();
    pairs
        .iter()
        .map(|(a, img, l)| {
            index
                .get(a.as_str())
                .map(|&i| (i, img.clone(), *l))
                .ok_or_else(|| Error::Data(format!("pair refers to unknown answer {a}")))
        })
        .collect()
}

/// Writes `sentence_id<TAB>g1 ... gK` rows of gate activations.
pub fn export_gates(model: &Model, sentences: &[(String, Sentence)], out: &Path) -> Result<usize> {
    if !model.config.gating {
        return Err(Error::Usage("model was trained without gating".into()));
    }
    let refs: Vec<&Sentence> = sentences.iter().map(|s| &s.1).collect();
    let gates = if refs.is_empty() { None } else { Some(model.gates(&refs)?) };
    let file = fs::File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(file);
    for (i, (id, _)) in sentences.iter().enumerate() {
        let row = gates.as_ref().unwrap().row_slice(i);
        let values: Vec<String> = row.iter().map(|g| g.to_string()).collect();
        writeln!(w, "{id}\t{}", values.join(" ")).map_err(|e| Error::io(out, e))?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(sentences.len())
}
