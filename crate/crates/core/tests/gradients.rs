use dataclone_core::model::loss::{mlm_loss_and_grad, nll_and_grad};
use dataclone_core::model::transformer::{init_model, HParams, ModelParams};
use dataclone_core::model::{GradSet, LoraAdapter, LoraConfig, TensorMap};
use dataclone_core::rng::seeded;
use rand::Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn hp(causal: bool, tie: bool) -> HParams {
    HParams {
        vocab_size: 48,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        context_len: 24,
        causal,
        tie_embeddings: tie,
    }
}

/// Pick `n` distinct (tensor, flat index) pairs, weighting each tensor equally
/// so small tensors like layernorm scales get probed too.
fn probe_coords(grads: &GradSet, n: usize, seed: u64) -> Vec<(String, usize)> {
    let names: Vec<String> = grads.names().cloned().collect();
    let mut rng = seeded(seed);
    let mut out: Vec<(String, usize)> = Vec::new();
    while out.len() < n {
        let name = &names[rng.random_range(0..names.len())];
        let idx = rng.random_range(0..grads.get(name).len());
        if !out.iter().any(|(m, i)| m == name && *i == idx) {
            out.push((name.clone(), idx));
        }
    }
    out
}

fn nudge(map: &mut TensorMap, name: &str, idx: usize, delta: f64) {
    let t = map.get_mut(name).unwrap();
    let cols = t.ncols();
    t[[idx / cols, idx % cols]] += delta;
}

/// Central differences of `f` against the analytic gradient. Returns the worst
/// relative error and the number of probed coordinates.
fn check(
    analytic: &GradSet,
    coords: &[(String, usize)],
    mut f: impl FnMut(&str, usize, f64) -> f64,
) -> (f64, usize) {
    let mut worst = 0.0f64;
    for (name, idx) in coords {
        let g = analytic.get(name);
        let a = g[[idx / g.ncols(), idx % g.ncols()]];
        let fd = (f(name, *idx, H) - f(name, *idx, -H)) / (2.0 * H);
        let rel = (a - fd).abs() / (a.abs() + 1e-8);
        assert!(rel < TOL, "{name}[{idx}]: analytic {a:e} vs numeric {fd:e} (rel {rel:e})");
        worst = worst.max(rel);
    }
    (worst, coords.len())
}

fn example(len: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = seeded(seed);
    (0..len).map(|_| rng.random_range(4..vocab as u32)).collect()
}

fn perturbed(base: &ModelParams, name: &str, idx: usize, d: f64) -> ModelParams {
    let mut m = base.clone();
    nudge(&mut m.tensors, name, idx, d);
    m
}

fn causal_base_check(tie: bool, seed: u64) {
    let m = init_model(hp(true, tie), seed).unwrap();
    let ex = example(18, 48, seed + 100);
    let mask: Vec<bool> = (0..ex.len()).map(|j| j >= 6).collect();
    let (_, grads) = nll_and_grad(&m, None, &ex, &mask).unwrap();
    assert!(grads.congruent(&m.tensors));
    let coords = probe_coords(&grads, 220, seed + 1);
    let (_, n) = check(&grads, &coords, |name, idx, d| {
        nll_and_grad(&perturbed(&m, name, idx, d), None, &ex, &mask).unwrap().0
    });
    assert!(n >= 200);
}

#[test]
fn causal_loss_gradient_matches_finite_differences() {
    causal_base_check(false, 11);
}

#[test]
fn causal_loss_gradient_with_tied_embeddings() {
    causal_base_check(true, 12);
}

#[test]
fn adapter_gradient_matches_finite_differences() {
    let m = init_model(hp(true, false), 3).unwrap();
    let cfg = LoraConfig {
        rank: 4,
        alpha: 8.0,
        targets: ["wq", "wk", "wv", "wo"].iter().map(|s| s.to_string()).collect(),
    };
    let mut ad = LoraAdapter::init(&m, cfg, 4).unwrap();
    let mut rng = seeded(5);
    for (_, t) in ad.tensors.iter_mut() {
        t.mapv_inplace(|v| v + rng.random_range(-0.2..0.2));
    }
    let ex = example(16, 48, 6);
    let mask: Vec<bool> = (0..ex.len()).map(|j| j >= 4).collect();
    let (_, grads) = nll_and_grad(&m, Some(&ad), &ex, &mask).unwrap();
    assert!(grads.congruent(&ad.tensors));
    let coords = probe_coords(&grads, 200, 7);
    check(&grads, &coords, |name, idx, d| {
        let mut a = ad.clone();
        nudge(&mut a.tensors, name, idx, d);
        nll_and_grad(&m, Some(&a), &ex, &mask).unwrap().0
    });
}

#[test]
fn mlm_loss_gradient_matches_finite_differences() {
    let m = init_model(hp(false, false), 21).unwrap();
    let ex = example(24, 48, 22);
    let (_, grads) = mlm_loss_and_grad(&m, &ex, 9).unwrap();
    assert!(grads.congruent(&m.tensors));
    let coords = probe_coords(&grads, 220, 23);
    check(&grads, &coords, |name, idx, d| {
        mlm_loss_and_grad(&perturbed(&m, name, idx, d), &ex, 9).unwrap().0
    });
}
