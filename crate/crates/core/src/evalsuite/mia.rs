//! Reference-model membership-inference audit and the rank AUC.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::dp::TrainExample;
use crate::model::{sequence_nll, LoraAdapter, ModelParams};

/// A model as seen by the attacker: black-box log-likelihoods.
#[derive(Debug, Clone, Copy)]
pub struct Scorer<'a> {
    pub params: &'a ModelParams,
    pub adapter: Option<&'a LoraAdapter>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiaCandidate {
    pub id: String,
    pub example: TrainExample,
    pub member: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiaRecord {
    pub id: String,
    pub member: bool,
    pub target_loglik: f64,
    pub reference_loglik: f64,
    pub score: f64,
}

/// Summed log-likelihood of the example's target tokens.
pub fn sequence_loglik(scorer: &Scorer, example: &TrainExample) -> Result<f64, EvalError> {
    let (nll, _) = sequence_nll(scorer.params, scorer.adapter, &example.ids, &example.loss_mask)?;
    Ok(-nll)
}

fn ratios(target: &Scorer, reference: &Scorer, examples: &[&TrainExample]) -> Result<Vec<(f64, f64)>, EvalError> {
    examples
        .par_iter()
        .map(|e| Ok((sequence_loglik(target, e)?, sequence_loglik(reference, e)?)))
        .collect()
}

/// Score each candidate by the fraction of population examples whose
/// likelihood ratio (target over reference) it reaches, then compute the AUC
/// of those scores against the membership labels.
pub fn rmia_audit(
    target: &Scorer,
    reference: &Scorer,
    candidates: &[MiaCandidate],
    population: &[TrainExample],
) -> Result<(Vec<MiaRecord>, f64), EvalError> {
    if population.is_empty() {
        return Err(EvalError::EmptyPopulation);
    }
    let pop: Vec<&TrainExample> = population.iter().collect();
    let mut pop_lr: Vec<f64> = ratios(target, reference, &pop)?
        .into_iter()
        .map(|(t, r)| t - r)
        .collect();
    pop_lr.sort_by(f64::total_cmp);
    let cand: Vec<&TrainExample> = candidates.iter().map(|c| &c.example).collect();
    let lls = ratios(target, reference, &cand)?;
    let records: Vec<MiaRecord> = candidates
        .iter()
        .zip(lls)
        .map(|(c, (t, r))| {
            let lr = t - r;
            let below = pop_lr.partition_point(|&z| z <= lr);
            MiaRecord {
                id: c.id.clone(),
                member: c.member,
                target_loglik: t,
                reference_loglik: r,
                score: below as f64 / pop_lr.len() as f64,
            }
        })
        .collect();
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = records.iter().map(|r| r.member).collect();
    let a = auc(&scores, &labels)?;
    Ok((records, a))
}

/// Mann-Whitney AUC with midranks for ties: the probability that a random
/// positive outscores a random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Invalid("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::Invalid("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tie group i..=j shares their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::transformer::{init_model, HParams};
    use rand::Rng;

    fn brute(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &a) in scores.iter().enumerate() {
            for (j, &b) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn hand_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 6], &[true, false, true, false, true, false]).unwrap(), 0.5);
        let s = [0.7, 0.6, 0.4, 0.3];
        let l = [true, false, true, false];
        assert_eq!(auc(&s, &l).unwrap(), 0.75);
        let rev: Vec<bool> = l.iter().map(|x| !x).collect();
        assert_eq!(auc(&s, &rev).unwrap(), 0.25);
        assert!(matches!(auc(&[1.0, 2.0], &[true, true]), Err(EvalError::SingleClass)));
    }

    #[test]
    fn matches_pair_counting_on_small_inputs() {
        let mut rng = crate::rng::seeded(8);
        for n in 2..=100 {
            // Coarse scores force plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let a = auc(&scores, &labels).unwrap();
            assert!((a - brute(&scores, &labels)).abs() < 1e-12);
            let rev: Vec<bool> = labels.iter().map(|x| !x).collect();
            assert!((auc(&scores, &rev).unwrap() - (1.0 - a)).abs() < 1e-12);
        }
    }

    #[test]
    fn random_scores_give_half() {
        let mut rng = crate::rng::seeded(9);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let labels: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.5)).collect();
        let a = auc(&scores, &labels).unwrap();
        assert!((0.48..=0.52).contains(&a), "{a}");
    }

    #[test]
    fn audit_scores_are_monotone_in_the_ratio() {
        let hp = HParams {
            vocab_size: 30,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            context_len: 16,
            causal: true,
            tie_embeddings: false,
        };
        let target = init_model(hp, 1).unwrap();
        let reference = init_model(hp, 2).unwrap();
        let mut rng = crate::rng::seeded(3);
        let mut example = || {
            let ids: Vec<u32> = (0..10).map(|_| rng.random_range(4..30)).collect();
            TrainExample {
                loss_mask: (0..10).map(|j| j >= 3).collect(),
                ids,
            }
        };
        let candidates: Vec<MiaCandidate> = (0..20)
            .map(|i| MiaCandidate {
                id: format!("c{i}"),
                example: example(),
                member: i % 2 == 0,
            })
            .collect();
        let population: Vec<TrainExample> = (0..30).map(|_| example()).collect();
        let t = Scorer { params: &target, adapter: None };
        let r = Scorer { params: &reference, adapter: None };
        let (records, a) = rmia_audit(&t, &r, &candidates, &population).unwrap();
        assert!((0.0..=1.0).contains(&a));
        for x in &records {
            assert!((0.0..=1.0).contains(&x.score));
            for y in &records {
                let (lx, ly) = (x.target_loglik - x.reference_loglik, y.target_loglik - y.reference_loglik);
                if lx > ly {
                    assert!(x.score >= y.score);
                }
            }
        }
        assert!(matches!(
            rmia_audit(&t, &r, &candidates, &[]),
            Err(EvalError::EmptyPopulation)
        ));
    }
}
