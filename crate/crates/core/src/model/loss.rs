//! Causal-LM and masked-LM objectives with exact gradients.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use super::lora::LoraAdapter;
use super::tensor::GradSet;
use super::transformer::{backward_hidden, forward_hidden, zero_grads, ModelParams, Trainable};
use super::vocab::{BYTE_BASE, MASK};
use super::ModelError;
use crate::rng::derived;

pub const MLM_SELECT_RATE: f64 = 0.15;

/// Row-wise log-softmax.
pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Cross entropy of selected hidden rows against targets. Returns the summed
/// NLL and, when asked, the gradient w.r.t. the full hidden matrix and the
/// output projection for a loss normalised by `norm`.
fn head_cross_entropy(
    params: &ModelParams,
    hidden: &Array2<f64>,
    rows: &[usize],
    targets: &[u32],
    norm: Option<f64>,
) -> (f64, Option<(Array2<f64>, Array2<f64>)>) {
    let w = params.lm_head();
    let h_sel = hidden.select(Axis(0), rows);
    let mut probs = h_sel.dot(&w.t());
    let mut total = 0.0;
    for (mut row, &t) in probs.rows_mut().into_iter().zip(targets) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let target_logit = row[t as usize];
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        total += max + sum.ln() - target_logit;
        row.mapv_inplace(|v| v / sum);
    }
    let grads = norm.map(|norm| {
        let mut dlogits = probs;
        for (i, &t) in targets.iter().enumerate() {
            dlogits[[i, t as usize]] -= 1.0;
        }
        dlogits /= norm;
        let dw = dlogits.t().dot(&h_sel);
        let dh_sel = dlogits.dot(w);
        let mut dh = Array2::<f64>::zeros(hidden.raw_dim());
        for (i, &r) in rows.iter().enumerate() {
            dh.row_mut(r).assign(&dh_sel.row(i));
        }
        (dh, dw)
    });
    (total, grads)
}

fn next_token_rows(example: &[u32], loss_mask: &[bool]) -> Result<(Vec<usize>, Vec<u32>), ModelError> {
    if loss_mask.len() != example.len() {
        return Err(ModelError::MaskLength {
            mask: loss_mask.len(),
            tokens: example.len(),
        });
    }
    let (rows, targets): (Vec<usize>, Vec<u32>) = (1..example.len())
        .filter(|&j| loss_mask[j])
        .map(|j| (j - 1, example[j]))
        .unzip();
    if rows.is_empty() {
        return Err(ModelError::EmptyLoss);
    }
    Ok((rows, targets))
}

/// Summed next-token NLL over masked positions and the number of positions.
/// `loss_mask[j]` marks token `j` as a prediction target; position 0 never is.
pub fn sequence_nll(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    example: &[u32],
    loss_mask: &[bool],
) -> Result<(f64, usize), ModelError> {
    let (rows, targets) = next_token_rows(example, loss_mask)?;
    let cache = forward_hidden(params, adapter, example)?;
    let (total, _) = head_cross_entropy(params, &cache.hidden, &rows, &targets, None);
    Ok((total, rows.len()))
}

/// Mean masked next-token NLL and its gradient. With an adapter only the
/// adapter is trainable; without one, every base parameter is.
pub fn nll_and_grad(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    example: &[u32],
    loss_mask: &[bool],
) -> Result<(f64, GradSet), ModelError> {
    let (rows, targets) = next_token_rows(example, loss_mask)?;
    let mode = if adapter.is_some() {
        Trainable::Adapter
    } else {
        Trainable::Base
    };
    let cache = forward_hidden(params, adapter, example)?;
    let n = rows.len() as f64;
    let (total, g) = head_cross_entropy(params, &cache.hidden, &rows, &targets, Some(n));
    let (dh, dw) = g.expect("gradients requested");
    let mut grads = zero_grads(params, adapter, mode);
    if mode == Trainable::Base {
        grads.accumulate(params.lm_head_name(), &dw);
    }
    backward_hidden(params, adapter, &cache, &dh, mode, &mut grads);
    Ok((total / n, grads))
}

/// A corrupted MLM input and the positions to predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmExample {
    pub input: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

/// Select 15% of the non-special positions (at least one); of those 80% become
/// MASK, 10% a random non-special token, 10% stay unchanged.
pub fn mlm_mask(example: &[u32], vocab_size: usize, seed: u64) -> Result<MlmExample, ModelError> {
    if example.len() < 2 {
        return Err(ModelError::TooShort(example.len()));
    }
    let mut eligible: Vec<usize> = (0..example.len())
        .filter(|&i| example[i] >= BYTE_BASE)
        .collect();
    if eligible.is_empty() {
        return Err(ModelError::TooShort(0));
    }
    let mut rng = derived(seed, "mlm_mask");
    let n_select = ((MLM_SELECT_RATE * eligible.len() as f64).round() as usize).max(1);
    eligible.shuffle(&mut rng);
    let mut positions: Vec<usize> = eligible[..n_select].to_vec();
    positions.sort_unstable();
    let mut input = example.to_vec();
    for &p in &positions {
        let u: f64 = rng.random();
        if u < 0.8 {
            input[p] = MASK;
        } else if u < 0.9 {
            input[p] = rng.random_range(BYTE_BASE..vocab_size as u32);
        }
    }
    let targets = positions.iter().map(|&p| example[p]).collect();
    Ok(MlmExample {
        input,
        positions,
        targets,
    })
}

/// Summed MLM NLL over the selected positions and their count.
pub fn mlm_nll(
    encoder: &ModelParams,
    example: &[u32],
    mask_seed: u64,
) -> Result<(f64, usize), ModelError> {
    let m = mlm_mask(example, encoder.hparams.vocab_size, mask_seed)?;
    let cache = forward_hidden(encoder, None, &m.input)?;
    let (total, _) = head_cross_entropy(encoder, &cache.hidden, &m.positions, &m.targets, None);
    Ok((total, m.positions.len()))
}

/// Mean MLM loss over the selected positions and its gradient over every
/// encoder parameter.
pub fn mlm_loss_and_grad(
    encoder: &ModelParams,
    example: &[u32],
    mask_seed: u64,
) -> Result<(f64, GradSet), ModelError> {
    if encoder.hparams.causal {
        return Err(ModelError::InvalidHParams("MLM needs a non-causal encoder".into()));
    }
    let m = mlm_mask(example, encoder.hparams.vocab_size, mask_seed)?;
    let cache = forward_hidden(encoder, None, &m.input)?;
    let n = m.positions.len() as f64;
    let (total, g) = head_cross_entropy(encoder, &cache.hidden, &m.positions, &m.targets, Some(n));
    let (dh, dw) = g.expect("gradients requested");
    let mut grads = zero_grads(encoder, None, Trainable::Base);
    grads.accumulate(encoder.lm_head_name(), &dw);
    backward_hidden(encoder, None, &cache, &dh, Trainable::Base, &mut grads);
    Ok((total / n, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::transformer::{init_model, HParams};

    fn hp(causal: bool) -> HParams {
        HParams {
            vocab_size: 40,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            context_len: 16,
            causal,
            tie_embeddings: false,
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut m = init_model(hp(true), 0).unwrap();
        m.tensors.get_mut("lm_head").unwrap().fill(0.0);
        let ex = [1, 10, 11, 12, 2];
        let (nll, _) = nll_and_grad(&m, None, &ex, &[false, true, true, true, true]).unwrap();
        assert!((nll - (40f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let m = init_model(hp(true), 0).unwrap();
        let ex = [1, 10, 11];
        assert!(matches!(
            nll_and_grad(&m, None, &ex, &[false; 3]),
            Err(ModelError::EmptyLoss)
        ));
        // Position 0 is never a target.
        assert!(matches!(
            nll_and_grad(&m, None, &ex, &[true, false, false]),
            Err(ModelError::EmptyLoss)
        ));
    }

    #[test]
    fn grad_set_covers_trainable_names() {
        let m = init_model(hp(true), 0).unwrap();
        let ex = [1, 10, 11, 12];
        let (_, g) = nll_and_grad(&m, None, &ex, &[false, true, true, true]).unwrap();
        assert!(g.congruent(&m.tensors));
    }

    #[test]
    fn masking_is_seeded_and_well_formed() {
        let ex: Vec<u32> = (0..40).map(|i| 4 + (i % 30)).collect();
        let a = mlm_mask(&ex, 40, 9).unwrap();
        assert_eq!(a, mlm_mask(&ex, 40, 9).unwrap());
        assert_eq!(a.positions.len(), 6);
        for (&p, &t) in a.positions.iter().zip(&a.targets) {
            assert_eq!(ex[p], t);
        }
        for i in 0..ex.len() {
            if !a.positions.contains(&i) {
                assert_eq!(a.input[i], ex[i]);
            }
        }
    }

    #[test]
    fn mlm_rejects_short_input_and_causal_models() {
        let enc = init_model(hp(false), 0).unwrap();
        assert!(matches!(
            mlm_loss_and_grad(&enc, &[7], 0),
            Err(ModelError::TooShort(1))
        ));
        let dec = init_model(hp(true), 0).unwrap();
        assert!(mlm_loss_and_grad(&dec, &[7, 8, 9], 0).is_err());
    }
}
