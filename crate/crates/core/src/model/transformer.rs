//! Pre-LayerNorm transformer with hand-written backpropagation.
//!
//! Layout per block: `h += Attn(LN1(h))`, `h += MLP(LN2(h))`, with a final
//! LayerNorm and a vocabulary projection. Linear maps use `y = x · Wᵀ` with
//! `W` stored as `[out, in]`, which is also the LoRA convention
//! (`A: r×in`, `B: out×r`). The same code serves the causal decoder and the
//! bidirectional encoder (`causal = false`).

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::lora::LoraAdapter;
use super::tensor::{GradSet, TensorMap};
use super::ModelError;
use crate::rng::derived;

const LN_EPS: f64 = 1e-5;
/// Weights are drawn with std `INIT_GAIN / sqrt(fan_in)`.
pub const INIT_GAIN: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HParams {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub causal: bool,
    pub tie_embeddings: bool,
}

impl HParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidHParams(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return bad("d_model, n_heads and n_layers must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad(&format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 5 || self.context_len < 2 {
            return bad("vocab_size must be at least 5 and context_len at least 2");
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hparams: HParams,
    pub tensors: TensorMap,
}

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Base,
    Adapter,
}

pub(crate) fn layer_name(l: usize, what: &str) -> String {
    format!("layers.{l}.{what}")
}

pub fn init_model(hparams: HParams, seed: u64) -> Result<ModelParams, ModelError> {
    hparams.validate()?;
    let mut rng = derived(seed, "init_model");
    let d = hparams.d_model;
    let mut gaussian = |rows: usize, cols: usize, fan_in: usize| {
        let normal = Normal::new(0.0, INIT_GAIN / (fan_in as f64).sqrt()).expect("positive std");
        Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng))
    };
    let mut t = TensorMap::new();
    t.insert("tok_emb", gaussian(hparams.vocab_size, d, d));
    t.insert("pos_emb", gaussian(hparams.context_len, d, d));
    for l in 0..hparams.n_layers {
        for m in ["wq", "wk", "wv", "wo"] {
            t.insert(layer_name(l, m), gaussian(d, d, d));
        }
        t.insert(layer_name(l, "w1"), gaussian(hparams.d_ff(), d, d));
        t.insert(layer_name(l, "w2"), gaussian(d, hparams.d_ff(), hparams.d_ff()));
        t.insert(layer_name(l, "b1"), Array2::zeros((1, hparams.d_ff())));
        t.insert(layer_name(l, "b2"), Array2::zeros((1, d)));
        for ln in ["ln1", "ln2"] {
            t.insert(layer_name(l, &format!("{ln}.g")), Array2::ones((1, d)));
            t.insert(layer_name(l, &format!("{ln}.b")), Array2::zeros((1, d)));
        }
    }
    t.insert("ln_f.g", Array2::ones((1, d)));
    t.insert("ln_f.b", Array2::zeros((1, d)));
    if !hparams.tie_embeddings {
        t.insert("lm_head", gaussian(hparams.vocab_size, d, d));
    }
    Ok(ModelParams {
        hparams,
        tensors: t,
    })
}

impl ModelParams {
    pub fn lm_head(&self) -> &Array2<f64> {
        if self.hparams.tie_embeddings {
            self.tensors.get("tok_emb")
        } else {
            self.tensors.get("lm_head")
        }
    }

    pub fn lm_head_name(&self) -> &'static str {
        if self.hparams.tie_embeddings {
            "tok_emb"
        } else {
            "lm_head"
        }
    }

    /// Checks shapes against the hyperparameters and that every value is finite.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.hparams.validate()?;
        let reference = init_model(self.hparams, 0)?;
        if !reference.tensors.congruent(&self.tensors) {
            return Err(ModelError::InvalidHParams(
                "tensor names or shapes do not match the hyperparameters".into(),
            ));
        }
        if !self.tensors.all_finite() {
            return Err(ModelError::NonFinite("model parameters".into()));
        }
        Ok(())
    }
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * &rstd.view().insert_axis(Axis(1));
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = dy.ncols() as f64;
    let dg = (dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * g;
    let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
    let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
    let dx = (dxhat - &mean_dxhat.insert_axis(Axis(1))
        - &cache.xhat * &mean_dxhat_xhat.insert_axis(Axis(1)))
        * &cache.rstd.view().insert_axis(Axis(1));
    (dx, dg, db)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `tanh` through a single `exp`, about twice as fast as the libm call.
fn fast_tanh(z: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * z).exp() + 1.0)
}

/// The tanh term of the GELU approximation; `gelu(x) = 0.5·x·(1 + t)`.
fn gelu_tanh(x: f64) -> f64 {
    fast_tanh(GELU_C * (x + 0.044715 * x * x * x))
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct LoraRef<'a> {
    a: &'a Array2<f64>,
    b: &'a Array2<f64>,
    scale: f64,
}

fn lora_ref<'a>(adapter: Option<&'a LoraAdapter>, l: usize, m: &str) -> Option<LoraRef<'a>> {
    let adapter = adapter?;
    let a = adapter.tensors.try_get(&LoraAdapter::a_name(l, m))?;
    let b = adapter.tensors.get(&LoraAdapter::b_name(l, m));
    Some(LoraRef {
        a,
        b,
        scale: adapter.scale(),
    })
}

/// `x · Wᵀ (+ s · (x · Aᵀ) · Bᵀ)`; returns the low-rank activation for backward.
fn linear(
    x: &Array2<f64>,
    w: &Array2<f64>,
    lora: Option<&LoraRef<'_>>,
) -> (Array2<f64>, Option<Array2<f64>>) {
    let mut y = x.dot(&w.t());
    let u = lora.map(|lr| {
        let u = x.dot(&lr.a.t());
        y.scaled_add(lr.scale, &u.dot(&lr.b.t()));
        u
    });
    (y, u)
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    uq: Option<Array2<f64>>,
    uk: Option<Array2<f64>>,
    uv: Option<Array2<f64>>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    uo: Option<Array2<f64>>,
    ln2: LnCache,
    m: Array2<f64>,
    pre: Array2<f64>,
    th: Array2<f64>,
    act: Array2<f64>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    /// Final hidden states after the last LayerNorm, `T × d_model`.
    pub hidden: Array2<f64>,
}

fn softmax_rows_inplace(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = if *v == f64::NEG_INFINITY {
                0.0
            } else {
                (*v - max).exp()
            };
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// Run the network up to the final LayerNorm, keeping activations.
pub fn forward_hidden(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    ids: &[u32],
) -> Result<ForwardCache, ModelError> {
    let hp = &params.hparams;
    if ids.len() > hp.context_len {
        return Err(ModelError::ContextOverflow {
            len: ids.len(),
            context_len: hp.context_len,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= hp.vocab_size) {
        return Err(ModelError::InvalidTokenId(bad, hp.vocab_size));
    }
    if let Some(ad) = adapter {
        ad.check_compatible(params)?;
    }
    let t_len = ids.len();
    let d = hp.d_model;
    let dh = hp.head_dim();
    let p = &params.tensors;
    let tok = p.get("tok_emb");
    let pos = p.get("pos_emb");
    let mut h = Array2::<f64>::zeros((t_len, d));
    for (t, &id) in ids.iter().enumerate() {
        let mut row = h.row_mut(t);
        row += &tok.row(id as usize);
        row += &pos.row(t);
    }
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(hp.n_layers);
    for l in 0..hp.n_layers {
        let name = |w: &str| layer_name(l, w);
        let (a, ln1) = layer_norm(&h, p.get(&name("ln1.g")), p.get(&name("ln1.b")));
        let lq = lora_ref(adapter, l, "wq");
        let lk = lora_ref(adapter, l, "wk");
        let lv = lora_ref(adapter, l, "wv");
        let lo = lora_ref(adapter, l, "wo");
        let (q, uq) = linear(&a, p.get(&name("wq")), lq.as_ref());
        let (k, uk) = linear(&a, p.get(&name("wk")), lk.as_ref());
        let (v, uv) = linear(&a, p.get(&name("wv")), lv.as_ref());
        let mut o = Array2::<f64>::zeros((t_len, d));
        let mut probs = Vec::with_capacity(hp.n_heads);
        for head in 0..hp.n_heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * inv_sqrt_dh;
            if hp.causal {
                for i in 0..t_len {
                    for j in i + 1..t_len {
                        scores[[i, j]] = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_rows_inplace(&mut scores);
            o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let (attn_out, uo) = linear(&o, p.get(&name("wo")), lo.as_ref());
        h += &attn_out;
        let (m, ln2) = layer_norm(&h, p.get(&name("ln2.g")), p.get(&name("ln2.b")));
        let pre = m.dot(&p.get(&name("w1")).t()) + p.get(&name("b1"));
        let th = pre.mapv(gelu_tanh);
        let mut act = pre.clone();
        act.zip_mut_with(&th, |x, &t| *x = 0.5 * *x * (1.0 + t));
        h += &(act.dot(&p.get(&name("w2")).t()) + p.get(&name("b2")));
        layers.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            uq,
            uk,
            uv,
            probs,
            o,
            uo,
            ln2,
            m,
            pre,
            th,
            act,
        });
    }
    let (hidden, lnf) = layer_norm(&h, p.get("ln_f.g"), p.get("ln_f.b"));
    Ok(ForwardCache {
        ids: ids.to_vec(),
        layers,
        lnf,
        hidden,
    })
}

/// Key/value cache for token-by-token decoding with a causal model.
pub struct DecodeState<'a> {
    params: &'a ModelParams,
    adapter: Option<&'a LoraAdapter>,
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
    len: usize,
}

impl<'a> DecodeState<'a> {
    pub fn new(params: &'a ModelParams, adapter: Option<&'a LoraAdapter>) -> Result<Self, ModelError> {
        let hp = &params.hparams;
        if !hp.causal {
            return Err(ModelError::InvalidHParams("incremental decoding needs a causal model".into()));
        }
        if let Some(ad) = adapter {
            ad.check_compatible(params)?;
        }
        let empty = || vec![Array2::zeros((hp.context_len, hp.d_model)); hp.n_layers];
        Ok(Self {
            params,
            adapter,
            keys: empty(),
            values: empty(),
            len: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Append one token and return its final hidden state.
    pub fn push(&mut self, id: u32) -> Result<Array1<f64>, ModelError> {
        let hp = &self.params.hparams;
        if self.len >= hp.context_len {
            return Err(ModelError::ContextOverflow {
                len: self.len + 1,
                context_len: hp.context_len,
            });
        }
        if id as usize >= hp.vocab_size {
            return Err(ModelError::InvalidTokenId(id, hp.vocab_size));
        }
        let p = &self.params.tensors;
        let t = self.len;
        let dh = hp.head_dim();
        let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();
        let mut h = (&p.get("tok_emb").row(id as usize) + &p.get("pos_emb").row(t)).insert_axis(Axis(0));
        for l in 0..hp.n_layers {
            let name = |w: &str| layer_name(l, w);
            let (a, _) = layer_norm(&h, p.get(&name("ln1.g")), p.get(&name("ln1.b")));
            let proj = |m: &str| {
                let lr = lora_ref(self.adapter, l, m);
                linear(&a, p.get(&name(m)), lr.as_ref()).0
            };
            let q = proj("wq");
            self.keys[l].row_mut(t).assign(&proj("wk").row(0));
            self.values[l].row_mut(t).assign(&proj("wv").row(0));
            let mut o = Array2::<f64>::zeros((1, hp.d_model));
            for head in 0..hp.n_heads {
                let cols = s![..=t, head * dh..(head + 1) * dh];
                let k = self.keys[l].slice(cols);
                let mut scores = q.slice(s![.., head * dh..(head + 1) * dh]).dot(&k.t()) * inv_sqrt_dh;
                softmax_rows_inplace(&mut scores);
                o.slice_mut(s![.., head * dh..(head + 1) * dh])
                    .assign(&scores.dot(&self.values[l].slice(cols)));
            }
            let lo = lora_ref(self.adapter, l, "wo");
            h += &linear(&o, p.get(&name("wo")), lo.as_ref()).0;
            let (m, _) = layer_norm(&h, p.get(&name("ln2.g")), p.get(&name("ln2.b")));
            let mut act = m.dot(&p.get(&name("w1")).t()) + p.get(&name("b1"));
            act.mapv_inplace(|x| 0.5 * x * (1.0 + gelu_tanh(x)));
            h += &(act.dot(&p.get(&name("w2")).t()) + p.get(&name("b2")));
        }
        let (hidden, _) = layer_norm(&h, p.get("ln_f.g"), p.get("ln_f.b"));
        self.len += 1;
        Ok(hidden.row(0).to_owned())
    }
}

/// Logits for every position, `T × vocab_size`.
pub fn forward(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    ids: &[u32],
) -> Result<Array2<f64>, ModelError> {
    let cache = forward_hidden(params, adapter, ids)?;
    Ok(cache.hidden.dot(&params.lm_head().t()))
}

/// Per-example logits; examples never interact.
pub fn forward_batch(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    batch: &[Vec<u32>],
) -> Result<Vec<Array2<f64>>, ModelError> {
    batch.iter().map(|ids| forward(params, adapter, ids)).collect()
}

struct GradSink<'a> {
    mode: Trainable,
    grads: &'a mut GradSet,
}

impl GradSink<'_> {
    fn base(&mut self, name: &str, g: impl FnOnce() -> Array2<f64>) {
        if self.mode == Trainable::Base {
            self.grads.accumulate(name, &g());
        }
    }
}

/// Backward through `x·Wᵀ (+ LoRA)`; returns dx.
fn linear_backward(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    w_name: &str,
    w: &Array2<f64>,
    lora: Option<(&LoraRef<'_>, &Array2<f64>, usize, &str)>,
    sink: &mut GradSink<'_>,
) -> Array2<f64> {
    sink.base(w_name, || dy.t().dot(x));
    let mut dx = dy.dot(w);
    if let Some((lr, u, l, m)) = lora {
        if sink.mode == Trainable::Adapter {
            sink.grads
                .accumulate(&LoraAdapter::b_name(l, m), &(dy.t().dot(u) * lr.scale));
        }
        let du = dy.dot(lr.b) * lr.scale;
        if sink.mode == Trainable::Adapter {
            sink.grads
                .accumulate(&LoraAdapter::a_name(l, m), &du.t().dot(x));
        }
        dx += &du.dot(lr.a);
    }
    dx
}

/// Backpropagate `d_hidden` (gradient w.r.t. the final hidden states) into
/// parameter gradients for the requested trainable set.
pub fn backward_hidden(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    cache: &ForwardCache,
    d_hidden: &Array2<f64>,
    mode: Trainable,
    grads: &mut GradSet,
) {
    let hp = &params.hparams;
    let p = &params.tensors;
    let dh_size = hp.head_dim();
    let inv_sqrt_dh = 1.0 / (dh_size as f64).sqrt();
    let mut sink = GradSink { mode, grads };

    let (mut dh, dg, db) = layer_norm_backward(d_hidden, &cache.lnf, p.get("ln_f.g"));
    sink.base("ln_f.g", || dg);
    sink.base("ln_f.b", || db);

    for l in (0..hp.n_layers).rev() {
        let c = &cache.layers[l];
        let name = |w: &str| layer_name(l, w);

        // MLP branch.
        let w2 = p.get(&name("w2"));
        sink.base(&name("b2"), || dh.sum_axis(Axis(0)).insert_axis(Axis(0)));
        sink.base(&name("w2"), || dh.t().dot(&c.act));
        let dact = dh.dot(w2);
        let mut dpre = dact;
        ndarray::Zip::from(&mut dpre)
            .and(&c.pre)
            .and(&c.th)
            .for_each(|g, &x, &t| *g *= gelu_grad(x, t));
        sink.base(&name("b1"), || dpre.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let w1 = p.get(&name("w1"));
        sink.base(&name("w1"), || dpre.t().dot(&c.m));
        let dm = dpre.dot(w1);
        let (dx2, dg2, db2) = layer_norm_backward(&dm, &c.ln2, p.get(&name("ln2.g")));
        sink.base(&name("ln2.g"), || dg2);
        sink.base(&name("ln2.b"), || db2);
        dh += &dx2;

        // Attention branch.
        let lo = lora_ref(adapter, l, "wo");
        let do_ = linear_backward(
            &dh,
            &c.o,
            &name("wo"),
            p.get(&name("wo")),
            lo.as_ref().map(|lr| (lr, c.uo.as_ref().expect("lora act"), l, "wo")),
            &mut sink,
        );
        let t_len = dh.nrows();
        let d = hp.d_model;
        let mut dq = Array2::<f64>::zeros((t_len, d));
        let mut dk = Array2::<f64>::zeros((t_len, d));
        let mut dv = Array2::<f64>::zeros((t_len, d));
        for head in 0..hp.n_heads {
            let cols = s![.., head * dh_size..(head + 1) * dh_size];
            let probs = &c.probs[head];
            let do_h: ArrayView2<f64> = do_.slice(cols);
            let dprobs = do_h.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&probs.t().dot(&do_h));
            let row_dot = (&dprobs * probs).sum_axis(Axis(1)).insert_axis(Axis(1));
            let dscores = (dprobs - &row_dot) * probs * inv_sqrt_dh;
            dq.slice_mut(cols).assign(&dscores.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&dscores.t().dot(&c.q.slice(cols)));
        }
        let mut da = Array2::<f64>::zeros((t_len, d));
        for (m, dy, u) in [("wq", &dq, &c.uq), ("wk", &dk, &c.uk), ("wv", &dv, &c.uv)] {
            let lr = lora_ref(adapter, l, m);
            da += &linear_backward(
                dy,
                &c.a,
                &name(m),
                p.get(&name(m)),
                lr.as_ref().map(|lr| (lr, u.as_ref().expect("lora act"), l, m)),
                &mut sink,
            );
        }
        let (dx1, dg1, db1) = layer_norm_backward(&da, &c.ln1, p.get(&name("ln1.g")));
        sink.base(&name("ln1.g"), || dg1);
        sink.base(&name("ln1.b"), || db1);
        dh += &dx1;
    }

    if mode == Trainable::Base {
        let mut dtok = Array2::<f64>::zeros(p.get("tok_emb").raw_dim());
        let mut dpos = Array2::<f64>::zeros(p.get("pos_emb").raw_dim());
        for (t, &id) in cache.ids.iter().enumerate() {
            let mut r = dtok.row_mut(id as usize);
            r += &dh.row(t);
            let mut r = dpos.row_mut(t);
            r += &dh.row(t);
        }
        sink.grads.accumulate("tok_emb", &dtok);
        sink.grads.accumulate("pos_emb", &dpos);
    }
}

/// Zero gradients for every trainable tensor, so a GradSet always covers the
/// full trainable set even when some tensors receive no signal.
pub fn zero_grads(params: &ModelParams, adapter: Option<&LoraAdapter>, mode: Trainable) -> GradSet {
    match mode {
        Trainable::Base => params.tensors.zeros_like(),
        Trainable::Adapter => adapter
            .expect("adapter mode requires an adapter")
            .tensors
            .zeros_like(),
    }
}
