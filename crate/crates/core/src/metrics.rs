//! Cross-entropy cost nodes, BLEU, and token accuracy.
//!
//! BLEU comes in two flavors with deliberately different smoothing. The
//! sentence score is a per-example reward during training, so orders n ≥ 2
//! get add-one smoothing; otherwise nearly every early hypothesis scores
//! exactly 0 and the reward signal dies. The corpus score pools raw counts
//! across sentences first and applies no smoothing, which is the usual
//! reporting convention.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::estimator::{CostNode, CostStep};
use crate::graph::{Graph, NodeRef};

/// −log p(target) as a differentiable per-step cost.
///
/// `log_probs` must already be log-softmax output; the cost is just the
/// negated entry at `target`.
pub fn cross_entropy(
    g: &mut Graph,
    log_probs: NodeRef,
    target: usize,
    step: usize,
) -> Result<CostNode> {
    let picked = g.pick(log_probs, target)?;
    let node = g.neg(picked)?;
    Ok(CostNode {
        node,
        value: g.item(node)?,
        differentiable: true,
        step: CostStep::AtStep(step),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothing {
    None,
    /// Add one to numerator and denominator for orders n ≥ 2.
    AddOne,
}

#[derive(Debug, Clone, Copy)]
pub struct BleuConfig {
    pub max_n: usize,
    pub smoothing: Smoothing,
}

impl Default for BleuConfig {
    fn default() -> Self {
        BleuConfig {
            max_n: 4,
            smoothing: Smoothing::AddOne,
        }
    }
}

fn ngram_counts(tokens: &[usize], n: usize) -> BTreeMap<&[usize], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and total hypothesis n-grams for one order.
fn clipped_matches(hyp: &[usize], reference: &[usize], n: usize) -> (usize, usize) {
    let hyp_counts = ngram_counts(hyp, n);
    let ref_counts = ngram_counts(reference, n);
    let total: usize = hyp_counts.values().sum();
    let matched: usize = hyp_counts
        .iter()
        .map(|(gram, c)| (*c).min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    (matched, total)
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    // Empty-hypothesis callers bail out before this point.
    (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp()
}

fn geometric_bleu(precisions: &[f64], bp: f64) -> f64 {
    if precisions.iter().any(|p| *p <= 0.0) {
        return 0.0;
    }
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / precisions.len() as f64;
    100.0 * bp * log_mean.exp()
}

/// Sentence-level score in [0, 100]; empty hypotheses score 0.
pub fn bleu_sentence(hyp: &[usize], reference: &[usize], cfg: &BleuConfig) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(cfg.max_n);
    for n in 1..=cfg.max_n {
        let (matched, total) = clipped_matches(hyp, reference, n);
        let p = match cfg.smoothing {
            Smoothing::AddOne if n >= 2 => (matched + 1) as f64 / (total + 1) as f64,
            _ => {
                if total == 0 {
                    0.0
                } else {
                    matched as f64 / total as f64
                }
            }
        };
        precisions.push(p);
    }
    geometric_bleu(&precisions, brevity_penalty(hyp.len(), reference.len()))
}

/// Corpus-level score in [0, 100]: counts and lengths pooled across all
/// pairs before precisions and the brevity penalty are computed.
pub fn bleu_corpus(pairs: &[(Vec<usize>, Vec<usize>)], cfg: &BleuConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("bleu_corpus", "empty corpus"));
    }
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    let mut matched = vec![0usize; cfg.max_n];
    let mut total = vec![0usize; cfg.max_n];
    for (hyp, reference) in pairs {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=cfg.max_n {
            let (m, t) = clipped_matches(hyp, reference, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let precisions: Vec<f64> = matched
        .iter()
        .zip(&total)
        .map(|(m, t)| if *t == 0 { 0.0 } else { *m as f64 / *t as f64 })
        .collect();
    Ok(geometric_bleu(
        &precisions,
        brevity_penalty(hyp_len, ref_len),
    ))
}

/// Fraction of reference positions the hypothesis got right; missing
/// positions (hypothesis shorter) count as wrong.
pub fn token_accuracy(hyp: &[usize], reference: &[usize]) -> f64 {
    if reference.is_empty() {
        return if hyp.is_empty() { 1.0 } else { 0.0 };
    }
    let matches = hyp
        .iter()
        .zip(reference.iter())
        .filter(|(h, r)| h == r)
        .count();
    matches as f64 / reference.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::ParamStore;
    use crate::tensor::Tensor;

    fn cfg_smoothed() -> BleuConfig {
        BleuConfig::default()
    }

    fn cfg_raw() -> BleuConfig {
        BleuConfig {
            max_n: 4,
            smoothing: Smoothing::None,
        }
    }

    #[test]
    fn uniform_cross_entropy_is_log_vocab() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let logits = g.constant(Tensor::vector(vec![0.0; 4])).unwrap();
        let lp = g.log_softmax(logits).unwrap();
        let cost = cross_entropy(&mut g, lp, 2, 0).unwrap();
        assert!((cost.value - 4.0_f64.ln()).abs() < 1e-12);
        assert!(cost.differentiable);
        assert_eq!(cost.step, CostStep::AtStep(0));
    }

    #[test]
    fn confident_correct_prediction_drives_ce_to_zero() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let logits = g
            .constant(Tensor::vector(vec![50.0, 0.0, 0.0]))
            .unwrap();
        let lp = g.log_softmax(logits).unwrap();
        let cost = cross_entropy(&mut g, lp, 0, 0).unwrap();
        assert!(cost.value < 1e-12);
    }

    #[test]
    fn ce_gradient_is_softmax_minus_onehot() {
        let mut s = ParamStore::new();
        let w = s
            .register("w", Tensor::vector(vec![0.2, -0.4, 0.9]))
            .unwrap();
        let mut g = Graph::new(&s);
        let logits = g.param(&s, w).unwrap();
        let lp = g.log_softmax(logits).unwrap();
        let cost = cross_entropy(&mut g, lp, 1, 0).unwrap();
        g.backward(cost.node, &mut s).unwrap();
        let probs = crate::graph::softmax_slice(&[0.2, -0.4, 0.9]);
        for (i, gi) in s.grad(w).data().iter().enumerate() {
            let expect = probs[i] - if i == 1 { 1.0 } else { 0.0 };
            assert!((gi - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_match_scores_100() {
        let seq = vec![4, 5, 6, 7, 8];
        assert!((bleu_sentence(&seq, &seq, &cfg_smoothed()) - 100.0).abs() < 1e-9);
        assert!((bleu_sentence(&seq, &seq, &cfg_raw()) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn zero_unigram_overlap_scores_zero() {
        assert_eq!(bleu_sentence(&[4, 5], &[6, 7], &cfg_smoothed()), 0.0);
    }

    #[test]
    fn empty_hypothesis_scores_zero() {
        assert_eq!(bleu_sentence(&[], &[4, 5], &cfg_smoothed()), 0.0);
    }

    #[test]
    fn repeated_token_hand_count() {
        // hyp = "the the the", ref = "the cat" with ids the=4, cat=5.
        // p1 = 1/3 (clip to the single ref "the"); smoothed p2 = 1/3,
        // p3 = 1/2, p4 = 1; BP = 1 since hyp is longer than ref.
        let hyp = [4, 4, 4];
        let reference = [4, 5];
        let expect = 100.0 * (1.0 / 3.0_f64 * (1.0 / 3.0) * 0.5 * 1.0).powf(0.25);
        let got = bleu_sentence(&hyp, &reference, &cfg_smoothed());
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn brevity_penalty_punishes_short_hypotheses_only() {
        // Perfect prefix, half the length: p_n = 1, BP = exp(1 - 2) = e^-1.
        let hyp = [4, 5, 6, 7];
        let reference = [4, 5, 6, 7, 8, 9, 10, 11];
        let got = bleu_sentence(&hyp, &reference, &cfg_raw());
        let expect = 100.0 * (-1.0_f64).exp();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn swapping_adjacent_tokens_strictly_lowers_the_score() {
        let reference = [4, 5, 6, 7, 8];
        let swapped = [4, 6, 5, 7, 8];
        let perfect = bleu_sentence(&reference, &reference, &cfg_smoothed());
        let worse = bleu_sentence(&swapped, &reference, &cfg_smoothed());
        assert!(worse < perfect, "{worse} vs {perfect}");
    }

    #[test]
    fn corpus_of_identical_pairs_scores_100() {
        let pairs = vec![
            (vec![4, 5, 6, 7], vec![4, 5, 6, 7]),
            (vec![8, 9, 10, 11, 12], vec![8, 9, 10, 11, 12]),
        ];
        assert!((bleu_corpus(&pairs, &cfg_raw()).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn single_pair_corpus_equals_unsmoothed_sentence() {
        let hyp = vec![4, 5, 6, 7, 9];
        let reference = vec![4, 5, 6, 8, 9];
        let corpus = bleu_corpus(&[(hyp.clone(), reference.clone())], &cfg_raw()).unwrap();
        let sentence = bleu_sentence(&hyp, &reference, &cfg_raw());
        assert!((corpus - sentence).abs() < 1e-12);
    }

    #[test]
    fn duplicated_corpus_scores_the_same() {
        let pairs = vec![
            (vec![4, 5, 6, 7, 8], vec![4, 5, 6, 7, 9]),
            (vec![10, 11, 12, 13], vec![10, 11, 13, 12]),
        ];
        let mut doubled = pairs.clone();
        doubled.extend(pairs.clone());
        let a = bleu_corpus(&pairs, &cfg_raw()).unwrap();
        let b = bleu_corpus(&doubled, &cfg_raw()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn corpus_rejects_empty_input() {
        assert!(bleu_corpus(&[], &cfg_raw()).is_err());
    }

    #[test]
    fn bleu_stays_in_range() {
        let cases: Vec<(Vec<usize>, Vec<usize>)> = vec![
            (vec![4], vec![4]),
            (vec![4, 4, 4, 4, 4, 4], vec![4, 5]),
            (vec![5, 4], vec![4, 5]),
            (vec![4, 5, 6], vec![7, 8, 9]),
        ];
        for (hyp, reference) in &cases {
            for cfg in [cfg_smoothed(), cfg_raw()] {
                let v = bleu_sentence(hyp, reference, &cfg);
                assert!((0.0..=100.0).contains(&v), "{v} out of range");
            }
        }
    }

    #[test]
    fn token_accuracy_conventions() {
        assert_eq!(token_accuracy(&[4, 5, 6], &[4, 5, 6]), 1.0);
        assert_eq!(token_accuracy(&[7, 8, 9], &[4, 5, 6]), 0.0);
        assert_eq!(token_accuracy(&[4, 5], &[4, 5, 6, 7]), 0.5);
        assert_eq!(token_accuracy(&[4, 5, 6, 7, 8], &[4, 9]), 0.5);
        assert_eq!(token_accuracy(&[], &[]), 1.0);
    }
}
