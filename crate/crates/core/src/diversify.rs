//! Synonym scoring, training-time label diversification and synonym-group
//! scoring for inference.
//!
//! An instance's synonym scores are a softmax over the cosine similarities
//! between its visual embedding and the text embedding of every synonym of
//! its category. During training, the word used to supervise an instance is
//! drawn from its synonym set with those scores as probabilities.

use rand::distributions::{Distribution, WeightedIndex};

use crate::embeddings::{
    cosine, cosine_with_grad, CategoryEntry, CategoryTable, Embedding, TeacherSpace,
};
use crate::error::{Error, Result};
use crate::pipeline::RegionBatch;
use crate::rng::{self, Substream};

/// Probability of each synonym of one category for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct SynonymScores {
    pub category_id: usize,
    pub scores: Vec<f64>,
}

impl SynonymScores {
    /// Draws a synonym index from a stream keyed by `seed` and an instance key.
    pub fn draw(&self, seed: u64, key: &[u64]) -> usize {
        if self.scores.len() == 1 {
            return 0;
        }
        let mut r = rng::stream(seed, Substream::Diversify, key);
        WeightedIndex::new(&self.scores)
            .expect("scores are a probability vector")
            .sample(&mut r)
    }
}

/// Training-label diversification strategy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DiversifyStrategy {
    /// Keep the canonical word.
    #[default]
    None,
    /// Replace each ground-truth word by a synonym drawn with probability
    /// equal to its synonym score.
    Random,
}

impl DiversifyStrategy {
    pub fn name(self) -> &'static str {
        match self {
            DiversifyStrategy::None => "none",
            DiversifyStrategy::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [DiversifyStrategy::None, DiversifyStrategy::Random]
            .into_iter()
            .find(|v| v.name() == s)
    }
}

/// How a category is scored against a query embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GroupMode {
    /// Similarity to the canonical name only.
    #[default]
    Canonical,
    /// Mean similarity over the synonym set.
    GroupAvg,
    /// Maximum similarity over the synonym set.
    GroupMax,
}

impl GroupMode {
    pub fn name(self) -> &'static str {
        match self {
            GroupMode::Canonical => "canonical",
            GroupMode::GroupAvg => "group-avg",
            GroupMode::GroupMax => "group-max",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            GroupMode::Canonical,
            GroupMode::GroupAvg,
            GroupMode::GroupMax,
        ]
        .into_iter()
        .find(|v| v.name() == s)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn synonym_scores(
    instance: &Embedding,
    category: &CategoryEntry,
    space: &TeacherSpace,
    temperature: f64,
) -> Result<SynonymScores> {
    if category.synonyms.is_empty() {
        return Err(Error::Domain(format!(
            "category {} has no synonyms",
            category.id
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if instance.norm() == 0.0 {
        return Err(Error::Domain("zero instance embedding".into()));
    }
    let texts = space.synonyms(category.id)?;
    if texts.len() != category.synonyms.len() {
        return Err(Error::Shape(format!(
            "category {} has {} synonyms but the teacher holds {}",
            category.id,
            category.synonyms.len(),
            texts.len()
        )));
    }
    let logits: Vec<f64> = texts
        .iter()
        .map(|t| cosine(instance.as_slice(), t.as_slice()) / temperature)
        .collect();
    Ok(SynonymScores {
        category_id: category.id,
        scores: softmax(&logits),
    })
}

/// The word supervising each instance of `batch`.
///
/// With [`DiversifyStrategy::Random`] each instance's word is drawn from its
/// category's synonym set using the synonym scores of its teacher region
/// embedding; the draw for an instance depends only on `seed` and the
/// instance identity.
pub fn training_words(
    batch: &RegionBatch,
    table: &CategoryTable,
    strategy: DiversifyStrategy,
    seed: u64,
    space: &TeacherSpace,
    temperature: f64,
) -> Result<Vec<String>> {
    batch
        .gt_labels
        .iter()
        .zip(&batch.instances)
        .map(|(&label, inst)| {
            let entry = table.get(label)?;
            Ok(match strategy {
                DiversifyStrategy::None => entry.canonical.clone(),
                DiversifyStrategy::Random => {
                    let scores = synonym_scores(&space.region(inst)?, entry, space, temperature)?;
                    let pick = scores.draw(seed, &[inst.image, u64::from(inst.index)]);
                    entry.synonyms[pick].clone()
                }
            })
        })
        .collect()
}

/// Copy of `batch` whose `train_words` come from [`training_words`].
pub fn diversify_labels(
    batch: &RegionBatch,
    table: &CategoryTable,
    strategy: DiversifyStrategy,
    seed: u64,
    space: &TeacherSpace,
    temperature: f64,
) -> Result<RegionBatch> {
    let mut out = batch.clone();
    out.train_words = training_words(batch, table, strategy, seed, space, temperature)?;
    Ok(out)
}

/// Score of `category` for a query embedding under `mode`.
pub fn group_score(
    query: &Embedding,
    category: &CategoryEntry,
    space: &TeacherSpace,
    mode: GroupMode,
) -> Result<f64> {
    if query.norm() == 0.0 {
        return Err(Error::Domain("zero query embedding".into()));
    }
    let texts = space.synonyms(category.id)?;
    Ok(group_score_with_grad(query.as_slice(), texts, mode, false).0)
}

/// Group score on raw slices, optionally with its gradient in `query`.
/// `GroupMax` routes the gradient to the first maximizing synonym.
pub(crate) fn group_score_with_grad(
    query: &[f64],
    texts: &[Embedding],
    mode: GroupMode,
    want_grad: bool,
) -> (f64, Vec<f64>) {
    let one = |t: &Embedding| {
        if want_grad {
            cosine_with_grad(query, t.as_slice())
        } else {
            (cosine(query, t.as_slice()), Vec::new())
        }
    };
    match mode {
        GroupMode::Canonical => one(&texts[0]),
        GroupMode::GroupMax => {
            let mut best = one(&texts[0]);
            for t in &texts[1..] {
                let cand = one(t);
                if cand.0 > best.0 {
                    best = cand;
                }
            }
            best
        }
        GroupMode::GroupAvg => {
            let n = texts.len() as f64;
            let mut value = 0.0;
            let mut grad = vec![0.0; if want_grad { query.len() } else { 0 }];
            for t in texts {
                let (c, g) = one(t);
                value += c / n;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b / n);
            }
            (value, grad)
        }
    }
}
