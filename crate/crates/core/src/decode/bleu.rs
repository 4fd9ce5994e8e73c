use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::DecodeError;

/// Corpus BLEU with per-order counts.
///
/// Precision rules, for order `n` with clipped matches `m` over `t` hypothesis
/// n-grams: `t = 0` gives 0 for unigrams and 1 (vacuous) above; `m = 0` with
/// `t > 0` and `n ≥ 2` gives `1/(2t)`; otherwise `m/t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// In `[0, 100]`.
    pub score: f64,
    pub precisions: Vec<f64>,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

pub fn bleu<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>], max_n: usize) -> Result<BleuReport, DecodeError> {
    if hypotheses.len() != references.len() {
        return Err(DecodeError::Contract(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() || max_n == 0 {
        return Err(DecodeError::Contract("BLEU needs at least one pair and max_n ≥ 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    for (h, r) in hypotheses.iter().zip(references) {
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(&g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| match (matches[i], totals[i]) {
            (_, 0) if i == 0 => 0.0,
            (_, 0) => 1.0,
            (0, t) if i >= 1 => 1.0 / (2.0 * t as f64),
            (m, t) => m as f64 / t as f64,
        })
        .collect();
    let hyp_len: usize = hypotheses.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    let brevity_penalty = if hyp_len >= ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        brevity_penalty * log_mean.exp() * 100.0
    };
    Ok(BleuReport {
        score,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identical_is_hundred() {
        let h = vec![toks("a b c d e"), toks("x")];
        assert_eq!(bleu(&h, &h, 4).unwrap().score, 100.0);
    }

    #[test]
    fn disjoint_is_zero() {
        let r = bleu(&[toks("a b")], &[toks("c d")], 4).unwrap();
        assert_eq!(r.score, 0.0);
        assert_eq!(r.precisions[0], 0.0);
    }

    #[test]
    fn count_mismatch_is_contract_error() {
        assert!(matches!(
            bleu(&[toks("a")], &[toks("a"), toks("b")], 4),
            Err(DecodeError::Contract(_))
        ));
    }

    #[test]
    fn all_empty_hypotheses_score_zero() {
        let r = bleu(&[Vec::<String>::new()], &[toks("a")], 4).unwrap();
        assert_eq!((r.score, r.brevity_penalty), (0.0, 0.0));
    }
}
