//! Editing metrics: efficacy, generalization and specificity in two styles,
//! n-gram entropy fluency and TF-IDF consistency.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EditRequest, TokenizedPrompt};
use crate::model::{argmax, softmax, ModelError, ModelInput, ToyModel};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no requests to evaluate")]
    NoRequests,
    #[error("no request has paraphrase prompts")]
    NoParaphrases,
    #[error("no request has neighborhood prompts")]
    NoNeighbors,
    #[error("request {case_id} has no pre-edit snapshot")]
    MissingSnapshot { case_id: usize },
    #[error("fluency needs at least 3 tokens, got {0}")]
    TooShort(usize),
    #[error("consistency needs non-empty texts")]
    EmptyText,
    #[error("TF-IDF needs at least one document")]
    NoDocuments,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricStyle {
    /// Top-1 prediction equals the target.
    ZsreTop1,
    /// The target outscores the competing object.
    CounterfactProb,
}

impl MetricStyle {
    pub const ALL: [MetricStyle; 2] = [MetricStyle::ZsreTop1, MetricStyle::CounterfactProb];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricStyle::ZsreTop1 => "zsre_top1",
            MetricStyle::CounterfactProb => "counterfact_prob",
        }
    }
}

fn next_distribution(model: &ToyModel, prompt: &TokenizedPrompt) -> Result<Vec<f64>, ModelError> {
    let trace = model.forward(ModelInput::Tokens(&prompt.tokens), &[])?;
    Ok(softmax(trace.last_logits()))
}

/// Whether `target` wins over `competitor` under `style`.
fn hit(p: &[f64], target: usize, competitor: usize, style: MetricStyle) -> bool {
    match style {
        MetricStyle::ZsreTop1 => argmax(p) == target,
        MetricStyle::CounterfactProb => p[target] > p[competitor],
    }
}

fn mean(hits: &[bool]) -> f64 {
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

/// A rate together with how many cases it covers and how many requests were skipped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub n: usize,
    pub skipped: usize,
}

/// Fraction of requests whose edit prompt favours `target_new`.
pub fn efficacy(model: &ToyModel, requests: &[EditRequest], style: MetricStyle) -> Result<f64, MetricsError> {
    if requests.is_empty() {
        return Err(MetricsError::NoRequests);
    }
    let hits = requests
        .par_iter()
        .map(|r| Ok(hit(&next_distribution(model, &r.prompt)?, r.target_new, r.target_true, style)))
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(mean(&hits))
}

/// Efficacy over every paraphrase prompt; requests without paraphrases are skipped.
pub fn generalization(model: &ToyModel, requests: &[EditRequest], style: MetricStyle) -> Result<Rate, MetricsError> {
    if requests.is_empty() {
        return Err(MetricsError::NoRequests);
    }
    let skipped = requests.iter().filter(|r| r.paraphrase_prompts.is_empty()).count();
    let hits = requests
        .par_iter()
        .flat_map_iter(|r| r.paraphrase_prompts.iter().map(move |p| (r, p)))
        .map(|(r, p)| Ok(hit(&next_distribution(model, p)?, r.target_new, r.target_true, style)))
        .collect::<Result<Vec<_>, ModelError>>()?;
    if hits.is_empty() {
        return Err(MetricsError::NoParaphrases);
    }
    Ok(Rate {
        value: mean(&hits),
        n: hits.len(),
        skipped,
    })
}

/// Pre-edit top-1 predictions on each request's neighborhood prompts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodSnapshot {
    pub predictions: BTreeMap<usize, Vec<usize>>,
}

impl NeighborhoodSnapshot {
    pub fn take(model: &ToyModel, requests: &[EditRequest]) -> Result<Self, MetricsError> {
        let rows = requests
            .par_iter()
            .map(|r| {
                let preds = r
                    .neighborhood_prompts
                    .iter()
                    .map(|p| Ok(argmax(&next_distribution(model, p)?)))
                    .collect::<Result<Vec<_>, ModelError>>()?;
                Ok((r.case_id, preds))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(Self {
            predictions: rows.into_iter().collect(),
        })
    }
}

/// Fraction of neighborhood prompts that keep their pre-edit behaviour.
///
/// `zsre_top1` compares the argmax with the snapshot prediction `o^c`.
/// `counterfact_prob` requires `P(o^c) > P(o*)`; when `o^c` is `o*` itself
/// that comparison is empty, and the argmax check is used instead.
pub fn specificity(
    model: &ToyModel,
    requests: &[EditRequest],
    snapshot: &NeighborhoodSnapshot,
    style: MetricStyle,
) -> Result<Rate, MetricsError> {
    if requests.is_empty() {
        return Err(MetricsError::NoRequests);
    }
    let mut cases = Vec::new();
    let mut skipped = 0;
    for r in requests {
        if r.neighborhood_prompts.is_empty() {
            skipped += 1;
            continue;
        }
        let preds = snapshot
            .predictions
            .get(&r.case_id)
            .filter(|p| p.len() == r.neighborhood_prompts.len())
            .ok_or(MetricsError::MissingSnapshot { case_id: r.case_id })?;
        cases.extend(r.neighborhood_prompts.iter().zip(preds).map(|(p, &oc)| (r, p, oc)));
    }
    if cases.is_empty() {
        return Err(MetricsError::NoNeighbors);
    }
    let hits = cases
        .par_iter()
        .map(|&(r, p, oc)| {
            let dist = next_distribution(model, p)?;
            Ok(match style {
                MetricStyle::CounterfactProb if oc != r.target_new => dist[oc] > dist[r.target_new],
                _ => argmax(&dist) == oc,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(Rate {
        value: mean(&hits),
        n: hits.len(),
        skipped,
    })
}

fn entropy_bits<K: std::hash::Hash + Eq>(grams: impl Iterator<Item = K>) -> f64 {
    let mut counts: HashMap<K, usize> = HashMap::new();
    let mut total = 0usize;
    for g in grams {
        *counts.entry(g).or_default() += 1;
        total += 1;
    }
    let mut freqs: Vec<f64> = counts.values().map(|&c| c as f64 / total as f64).collect();
    // Fixed summation order keeps the value independent of hash iteration order.
    freqs.sort_by(f64::total_cmp);
    0.0 - freqs.iter().map(|g| g * g.log2()).sum::<f64>()
}

/// `(2/3)·H(bigrams) + (4/3)·H(trigrams)`, entropies in bits.
pub fn fluency(tokens: &[usize]) -> Result<f64, MetricsError> {
    if tokens.len() < 3 {
        return Err(MetricsError::TooShort(tokens.len()));
    }
    let h2 = entropy_bits(tokens.windows(2));
    let h3 = entropy_bits(tokens.windows(3));
    Ok((2.0 / 3.0) * h2 + (4.0 / 3.0) * h3)
}

/// TF-IDF weights: raw term counts times `ln((1+N)/(1+df)) + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfIdf {
    pub n_documents: usize,
    pub document_frequency: BTreeMap<usize, usize>,
}

impl TfIdf {
    pub fn fit(documents: &[Vec<usize>]) -> Result<Self, MetricsError> {
        if documents.is_empty() {
            return Err(MetricsError::NoDocuments);
        }
        let mut df = BTreeMap::new();
        for d in documents {
            let mut seen: Vec<usize> = d.clone();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        Ok(Self {
            n_documents: documents.len(),
            document_frequency: df,
        })
    }

    pub fn idf(&self, token: usize) -> f64 {
        let df = self.document_frequency.get(&token).copied().unwrap_or(0);
        ((1.0 + self.n_documents as f64) / (1.0 + df as f64)).ln() + 1.0
    }

    pub fn vector(&self, tokens: &[usize]) -> BTreeMap<usize, f64> {
        let mut tf: BTreeMap<usize, f64> = BTreeMap::new();
        for &t in tokens {
            *tf.entry(t).or_insert(0.0) += 1.0;
        }
        tf.into_iter().map(|(t, c)| (t, c * self.idf(t))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub value: f64,
    /// Set when either vector was zero and the cosine was defined as 0.
    pub degenerate: bool,
}

/// Cosine similarity of the TF-IDF vectors of two texts. Equal vectors give exactly 1.
pub fn consistency(generated: &[usize], reference: &[usize], tfidf: &TfIdf) -> Result<Consistency, MetricsError> {
    if generated.is_empty() || reference.is_empty() {
        return Err(MetricsError::EmptyText);
    }
    let a = tfidf.vector(generated);
    let b = tfidf.vector(reference);
    let dot: f64 = a.iter().filter_map(|(t, x)| b.get(t).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if a == b {
        return Ok(Consistency {
            value: 1.0,
            degenerate: false,
        });
    }
    if na == 0.0 || nb == 0.0 || dot == 0.0 {
        return Ok(Consistency {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Consistency {
        value: dot / (na * nb),
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub style: MetricStyle,
    pub n: usize,
    pub efficacy: f64,
    pub generalization: f64,
    pub specificity: f64,
    pub fluency: f64,
    pub consistency: f64,
    pub generalization_skipped: usize,
    pub specificity_skipped: usize,
    pub consistency_degenerate: usize,
}

/// Greedy generations from each edit prompt, with fluency and consistency
/// against the reference text of `target_new`. An empty reference counts as a
/// degenerate consistency of 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationScores {
    pub fluency: f64,
    pub consistency: f64,
    pub degenerate: usize,
}

pub fn generation_scores(
    model: &ToyModel,
    requests: &[EditRequest],
    decode_length: usize,
    reference: &(dyn Fn(usize) -> Vec<usize> + Sync),
    tfidf: &TfIdf,
) -> Result<GenerationScores, MetricsError> {
    if requests.is_empty() {
        return Err(MetricsError::NoRequests);
    }
    let rows = requests
        .par_iter()
        .map(|r| {
            let text = model.generate(&r.prompt.tokens, decode_length)?;
            let f = fluency(&text)?;
            let reference = reference(r.target_new);
            let c = if reference.is_empty() {
                Consistency {
                    value: 0.0,
                    degenerate: true,
                }
            } else {
                consistency(&text, &reference, tfidf)?
            };
            Ok((f, c))
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    let n = rows.len() as f64;
    Ok(GenerationScores {
        fluency: rows.iter().map(|(f, _)| f).sum::<f64>() / n,
        consistency: rows.iter().map(|(_, c)| c.value).sum::<f64>() / n,
        degenerate: rows.iter().filter(|(_, c)| c.degenerate).count(),
    })
}

/// Every rate metric in `style`, plus the style-independent generation scores.
pub fn evaluate(
    model: &ToyModel,
    requests: &[EditRequest],
    snapshot: &NeighborhoodSnapshot,
    style: MetricStyle,
    generation: &GenerationScores,
) -> Result<MetricsReport, MetricsError> {
    let eff = efficacy(model, requests, style)?;
    let generalization = generalization(model, requests, style)?;
    let spec = specificity(model, requests, snapshot, style)?;
    Ok(MetricsReport {
        style,
        n: requests.len(),
        efficacy: eff,
        generalization: generalization.value,
        specificity: spec.value,
        fluency: generation.fluency,
        consistency: generation.consistency,
        generalization_skipped: generalization.skipped,
        specificity_skipped: spec.skipped,
        consistency_degenerate: generation.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::linalg::RngStream;
    use crate::model::ModelConfig;

    #[test]
    fn fluency_of_repeated_token_is_zero() {
        assert_eq!(fluency(&[7; 20]).unwrap(), 0.0);
    }

    #[test]
    fn fluency_alternating_oracle() {
        // Bigrams: ab×3, ba×2. Trigrams: aba×2, bab×2.
        let h2 = -(0.6f64 * 0.6f64.log2() + 0.4 * 0.4f64.log2());
        let h3 = 1.0;
        let expected = 2.0 / 3.0 * h2 + 4.0 / 3.0 * h3;
        let got = fluency(&[1, 2, 1, 2, 1, 2]).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 1.980_633_729).abs() < 1e-8);
    }

    #[test]
    fn fluency_bounds_and_errors() {
        assert!(matches!(fluency(&[1, 2]), Err(MetricsError::TooShort(2))));
        let mut s = RngStream::new(3, 0).sampler();
        let random: Vec<usize> = (0..30).map(|_| s.below(20)).collect();
        let f = fluency(&random).unwrap();
        assert!(f > fluency(&[4; 30]).unwrap());
        let bound = 2.0 / 3.0 * (29f64).log2() + 4.0 / 3.0 * (28f64).log2();
        assert!(f <= bound + 1e-12);
    }

    #[test]
    fn tfidf_five_document_oracle() {
        let docs = vec![
            vec![0, 1, 2],
            vec![0, 1, 1, 3],
            vec![2, 3, 4],
            vec![0, 4, 4],
            vec![1, 2, 3, 4],
        ];
        let t = TfIdf::fit(&docs).unwrap();
        // df: 0→3, 1→3, 2→3, 3→3, 4→3; token 5 unseen.
        let idf3 = (6.0f64 / 4.0).ln() + 1.0;
        let idf_unseen = 6.0f64.ln() + 1.0;
        assert!((t.idf(0) - idf3).abs() < 1e-15);
        assert!((t.idf(5) - idf_unseen).abs() < 1e-15);
        // generated = [0,0,1,5], reference = [0,1,1,2]
        // a = {0: 2·idf3, 1: idf3, 5: idf_unseen}; b = {0: idf3, 1: 2·idf3, 2: idf3}
        let dot = 2.0 * idf3 * idf3 + 2.0 * idf3 * idf3;
        let na = (5.0 * idf3 * idf3 + idf_unseen * idf_unseen).sqrt();
        let nb = (6.0 * idf3 * idf3).sqrt();
        let c = consistency(&[0, 0, 1, 5], &[0, 1, 1, 2], &t).unwrap();
        assert!((c.value - dot / (na * nb)).abs() < 1e-10);
        assert!(!c.degenerate);
    }

    #[test]
    fn tfidf_uneven_document_frequencies() {
        let docs = vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 3], vec![4]];
        let t = TfIdf::fit(&docs).unwrap();
        let idf = |df: f64| (6.0 / (1.0 + df)).ln() + 1.0;
        let c = consistency(&[0, 1], &[0, 3], &t).unwrap();
        let (i0, i1, i3) = (idf(3.0), idf(2.0), idf(2.0));
        let expected = i0 * i0 / ((i0 * i0 + i1 * i1).sqrt() * (i0 * i0 + i3 * i3).sqrt());
        assert!((c.value - expected).abs() < 1e-10);
    }

    #[test]
    fn consistency_identities() {
        let t = TfIdf::fit(&[vec![0, 1, 2], vec![2, 3]]).unwrap();
        assert!((consistency(&[0, 1, 2, 2], &[0, 1, 2, 2], &t).unwrap().value - 1.0).abs() < 1e-12);
        let d = consistency(&[0, 1], &[2, 3], &t).unwrap();
        assert_eq!(d.value, 0.0);
        assert!(d.degenerate);
        let ab = consistency(&[0, 1, 1], &[1, 2], &t).unwrap().value;
        let ba = consistency(&[1, 2], &[0, 1, 1], &t).unwrap().value;
        assert!((ab - ba).abs() < 1e-15);
        // Repeating a text scales its vector and leaves the cosine unchanged.
        let scaled = consistency(&[0, 1, 1, 0, 1, 1], &[1, 2], &t).unwrap().value;
        assert!((ab - scaled).abs() < 1e-12);
        assert!(matches!(consistency(&[], &[1], &t), Err(MetricsError::EmptyText)));
    }

    fn setup() -> (ToyModel, Vec<EditRequest>) {
        let c = generate_corpus(
            &CorpusConfig {
                n_subjects: 12,
                n_edits: 4,
                neighbors_per_request: 3,
                ..CorpusConfig::default()
            },
            &RngStream::new(4, 0),
        )
        .unwrap();
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            d_ff: 32,
            n_heads: 2,
            vocab_size: c.vocabulary.len(),
            ..ModelConfig::default()
        };
        (ToyModel::new(cfg, &RngStream::new(4, 1)).unwrap(), c.requests)
    }

    #[test]
    fn unedited_model_matches_its_snapshot() {
        let (m, reqs) = setup();
        let snap = NeighborhoodSnapshot::take(&m, &reqs).unwrap();
        for style in MetricStyle::ALL {
            let s = specificity(&m, &reqs, &snap, style).unwrap();
            assert_eq!(s.value, 1.0, "{style:?}");
            assert_eq!(s.n, 12);
        }
        let err = specificity(&m, &reqs, &NeighborhoodSnapshot::default(), MetricStyle::ZsreTop1);
        assert!(matches!(err, Err(MetricsError::MissingSnapshot { .. })));
    }

    #[test]
    fn styles_agree_when_target_is_argmax() {
        let (m, mut reqs) = setup();
        for r in &mut reqs {
            let p = next_distribution(&m, &r.prompt).unwrap();
            r.target_new = argmax(&p);
            r.target_true = (r.target_new + 1) % p.len();
            r.paraphrase_prompts = vec![r.prompt.clone()];
        }
        assert_eq!(efficacy(&m, &reqs, MetricStyle::ZsreTop1).unwrap(), 1.0);
        assert_eq!(efficacy(&m, &reqs, MetricStyle::CounterfactProb).unwrap(), 1.0);
        let g = generalization(&m, &reqs, MetricStyle::ZsreTop1).unwrap();
        assert_eq!(g.value, 1.0);
    }

    #[test]
    fn top1_metrics_ignore_logit_scale() {
        let (m, reqs) = setup();
        let mut scaled = m.clone();
        scaled.params.unembedding = scaled.params.unembedding.scale(3.0);
        let a = efficacy(&m, &reqs, MetricStyle::ZsreTop1).unwrap();
        let b = efficacy(&scaled, &reqs, MetricStyle::ZsreTop1).unwrap();
        assert_eq!(a, b);
        let snap = NeighborhoodSnapshot::take(&m, &reqs).unwrap();
        assert_eq!(specificity(&scaled, &reqs, &snap, MetricStyle::ZsreTop1).unwrap().value, 1.0);
    }

    #[test]
    fn skips_and_errors() {
        let (m, mut reqs) = setup();
        assert!(matches!(efficacy(&m, &[], MetricStyle::ZsreTop1), Err(MetricsError::NoRequests)));
        reqs[0].paraphrase_prompts.clear();
        let g = generalization(&m, &reqs, MetricStyle::ZsreTop1).unwrap();
        assert_eq!(g.skipped, 1);
        for r in &mut reqs {
            r.paraphrase_prompts.clear();
        }
        assert!(matches!(
            generalization(&m, &reqs, MetricStyle::ZsreTop1),
            Err(MetricsError::NoParaphrases)
        ));
    }

    #[test]
    fn report_fields_are_means() {
        let (m, reqs) = setup();
        let snap = NeighborhoodSnapshot::take(&m, &reqs).unwrap();
        let docs: Vec<Vec<usize>> = reqs.iter().map(|r| r.prompt.tokens.clone()).collect();
        let t = TfIdf::fit(&docs).unwrap();
        let refs = |_: usize| docs[0].clone();
        let g = generation_scores(&m, &reqs, 5, &refs, &t).unwrap();
        let rep = evaluate(&m, &reqs, &snap, MetricStyle::CounterfactProb, &g).unwrap();
        assert_eq!(rep.n, 4);
        assert_eq!(rep.specificity, 1.0);
        assert!(rep.fluency >= 0.0);
        assert!((0.0..=1.0).contains(&rep.efficacy));
        assert!((rep.efficacy * 4.0 - (rep.efficacy * 4.0).round()).abs() < 1e-12);
    }
}
