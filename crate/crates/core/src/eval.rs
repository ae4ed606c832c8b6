//! Base/new split accuracy.

use crate::autograd::Graph;
use crate::encoders::{FrozenTextHead, SyntheticWorld};
use crate::error::{Error, Result};
use crate::federation::{text_features_node, ClassInput};
use crate::params::ParameterSet;
use crate::seed;
use crate::tensor::Tensor;
use crate::translator::{BoundTranslator, TranslatorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Base,
    New,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::New => "new",
        }
    }
}

/// Where class text features come from.
#[derive(Debug, Clone, Copy)]
pub enum TextSource<'a> {
    /// Context generated by the translator with these parameters.
    Translator(&'a ParameterSet),
    /// All context vectors zero; the text feature is the class embedding.
    ZeroContext,
}

/// Text features `[C×d]` for `class_ids`, computed once per class.
pub fn class_text_features(
    source: TextSource<'_>,
    world: &SyntheticWorld,
    head: &FrozenTextHead,
    translator: &TranslatorConfig,
    class_ids: &[usize],
) -> Result<Tensor> {
    let classes = class_ids
        .iter()
        .map(|&c| Ok(ClassInput::pooled(world.class_embedding(c)?)))
        .collect::<Result<Vec<_>>>()?;
    match source {
        TextSource::Translator(params) => {
            let mut g = Graph::new();
            let bound = BoundTranslator::bind(&mut g, translator, params)?;
            let txt = text_features_node(&mut g, &bound, head, &classes)?;
            Ok(g.value(txt).clone())
        }
        TextSource::ZeroContext => {
            let zero = Tensor::zeros(&[translator.n_ctx, head.dim()]);
            let mut data = Vec::with_capacity(classes.len() * head.dim());
            for c in &classes {
                data.extend_from_slice(head.text_feature(&zero, &c.embedding)?.data());
            }
            Tensor::new(vec![classes.len(), head.dim()], data)
        }
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Percentage of predictions equal to their labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Classifies features `[N×d]` against text features `[C×d]` by
/// `argmax cos/τ`.
pub fn classify(features: &Tensor, text: &Tensor, temperature: f64) -> Result<Vec<usize>> {
    if !(temperature > 0.0) {
        return Err(Error::contract("temperature must be positive"));
    }
    if features.last_dim() != text.last_dim() {
        return Err(Error::dim(format!(
            "feature dim {} differs from text dim {}",
            features.last_dim(),
            text.last_dim()
        )));
    }
    Ok((0..features.rows())
        .map(|i| {
            let x = features.row_slice(i);
            let scores: Vec<f64> = (0..text.rows())
                .map(|j| x.iter().zip(text.row_slice(j)).map(|(a, b)| a * b).sum::<f64>() / temperature)
                .collect();
            argmax(&scores)
        })
        .collect())
}

/// Test set for a split: `n_test` fresh samples per class drawn from a
/// per-class stream of `seed_value`. Labels index the split's class list.
pub fn test_set(world: &SyntheticWorld, split: Split, n_test: usize, seed_value: u64) -> Result<(Tensor, Vec<usize>)> {
    let ids = split_ids(world, split)?;
    let d = world.dim();
    let mut data = Vec::with_capacity(ids.len() * n_test * d);
    let mut labels = Vec::with_capacity(ids.len() * n_test);
    for (label, &c) in ids.iter().enumerate() {
        let mut rng = seed::rng_from(&[seed_value, seed::stream::EVAL, c as u64]);
        for _ in 0..n_test {
            data.extend_from_slice(world.sample_image(c, &mut rng)?.data());
            labels.push(label);
        }
    }
    Ok((Tensor::new(vec![labels.len(), d], data)?, labels))
}

fn split_ids(world: &SyntheticWorld, split: Split) -> Result<&[usize]> {
    let ids = match split {
        Split::Base => &world.base_ids,
        Split::New => &world.new_ids,
    };
    if ids.is_empty() {
        return Err(Error::contract(format!("{} split is empty", split.name())));
    }
    Ok(ids)
}

pub struct EvalSpec<'a> {
    pub world: &'a SyntheticWorld,
    pub head: &'a FrozenTextHead,
    pub translator: &'a TranslatorConfig,
    pub n_test: usize,
    pub temperature: f64,
    pub seed: u64,
}

/// Accuracy (percent) on one split; the label space is that split only.
pub fn evaluate(source: TextSource<'_>, split: Split, spec: &EvalSpec<'_>) -> Result<f64> {
    if spec.n_test == 0 {
        return Err(Error::contract("n_test must be at least 1"));
    }
    let ids = split_ids(spec.world, split)?;
    let text = class_text_features(source, spec.world, spec.head, spec.translator, ids)?;
    let (features, labels) = test_set(spec.world, split, spec.n_test, spec.seed)?;
    let predictions = classify(&features, &text, spec.temperature)?;
    accuracy(&predictions, &labels)
}
