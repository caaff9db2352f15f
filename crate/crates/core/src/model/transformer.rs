use crate::autodiff::{Graph, Tensor, Var};
use crate::rng::Rng;

use super::{FeatureKind, ModelError, ModelSpec, OutputView, TapBundle, TapKey, TapRequest};

pub const LN_EPS: f64 = 1e-5;

const GLOBAL_PARAMS: usize = 5;
const PER_LAYER: usize = 16;

const WORD: usize = 0;
const POSITION: usize = 1;
const BLOCK_POSITION: usize = 2;
const EMB_LN_W: usize = 3;
const EMB_LN_B: usize = 4;

const LN1_W: usize = 0;
const LN1_B: usize = 1;
const Q_W: usize = 2;
const Q_B: usize = 3;
const K_W: usize = 4;
const K_B: usize = 5;
const V_W: usize = 6;
const V_B: usize = 7;
const O_W: usize = 8;
const O_B: usize = 9;
const LN2_W: usize = 10;
const LN2_B: usize = 11;
const FFN_IN_W: usize = 12;
const FFN_IN_B: usize = 13;
const FFN_OUT_W: usize = 14;
const FFN_OUT_B: usize = 15;

const LAYER_SLOTS: [&str; PER_LAYER] = [
    "ln1.weight",
    "ln1.bias",
    "attention.query.weight",
    "attention.query.bias",
    "attention.key.weight",
    "attention.key.bias",
    "attention.value.weight",
    "attention.value.bias",
    "attention.output.weight",
    "attention.output.bias",
    "ln2.weight",
    "ln2.bias",
    "ffn.in.weight",
    "ffn.in.bias",
    "ffn.out.weight",
    "ffn.out.bias",
];

/// Row-major batch of token ids, `batch × seq`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, batch: usize, seq: usize) -> Result<Self, ModelError> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(ModelError::Input(format!("{} ids do not form a {batch}x{seq} batch", ids.len())));
        }
        Ok(Self { ids, batch, seq })
    }

    /// The same batch rotated by `shift` rows (row `i` takes row `i + shift`).
    pub fn rolled(&self, shift: usize) -> Self {
        let mut ids = Vec::with_capacity(self.ids.len());
        for r in 0..self.batch {
            let src = (r + shift) % self.batch;
            ids.extend_from_slice(&self.ids[src * self.seq..(src + 1) * self.seq]);
        }
        Self { ids, batch: self.batch, seq: self.seq }
    }

    /// Rows `start..end` as a new batch.
    pub fn rows(&self, start: usize, end: usize) -> Self {
        Self { ids: self.ids[start * self.seq..end * self.seq].to_vec(), batch: end - start, seq: self.seq }
    }
}

/// Transformer parameters in a fixed, named order.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    spec: ModelSpec,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Output of a forward pass: full `(batch, seq, V)` logits plus requested taps.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub taps: TapBundle,
}

fn shapes(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let (d, v, s) = (spec.dim, spec.vocab, spec.max_seq);
    let mut out = vec![
        ("embeddings.word".to_string(), vec![v, d]),
        ("embeddings.position".to_string(), vec![s, d]),
        ("embeddings.block_position".to_string(), vec![s, d]),
        ("embeddings.ln.weight".to_string(), vec![d]),
        ("embeddings.ln.bias".to_string(), vec![d]),
    ];
    for l in 0..spec.layers {
        for (slot, name) in LAYER_SLOTS.iter().enumerate() {
            let shape = match slot {
                Q_W | K_W | V_W | O_W => vec![d, d],
                FFN_IN_W => vec![d, 4 * d],
                FFN_IN_B => vec![4 * d],
                FFN_OUT_W => vec![4 * d, d],
                _ => vec![d],
            };
            out.push((format!("layers.{l}.{name}"), shape));
        }
    }
    out.push(("final_ln.weight".to_string(), vec![d]));
    out.push(("final_ln.bias".to_string(), vec![d]));
    out
}

fn is_weight(name: &str) -> bool {
    name.starts_with("embeddings.word")
        || name.ends_with("position")
        || (name.ends_with(".weight") && !name.contains("ln"))
}

impl TransformerModel {
    /// Seeded `N(0, 0.02)` weights, zero biases, unit layernorm weights.
    pub fn random(spec: &ModelSpec, rng: &mut Rng) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in shapes(spec) {
            let t = if is_weight(&name) {
                Tensor::randn(&shape, 0.02, rng)
            } else if name.contains("ln") && name.ends_with(".weight") {
                Tensor::full(&shape, 1.0)
            } else {
                Tensor::zeros(&shape)
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { spec: spec.clone(), names, tensors })
    }

    /// Assemble from named tensors; names and shapes must match the layout of `spec`.
    pub fn from_named(spec: &ModelSpec, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        spec.validate()?;
        let expect = shapes(spec);
        if expect.len() != named.len() {
            return Err(ModelError::Checkpoint(format!("expected {} tensors, got {}", expect.len(), named.len())));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((en, es), (n, t)) in expect.into_iter().zip(named) {
            if en != n || es != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor `{n}` {:?} does not match expected `{en}` {es:?}",
                    t.shape()
                )));
            }
            names.push(n);
            tensors.push(t);
        }
        Ok(Self { spec: spec.clone(), names, tensors })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn element_count(&self) -> u64 {
        self.tensors.iter().map(|t| t.numel() as u64).sum()
    }

    /// Index range of the tensors belonging to 1-based layer `layer`.
    pub fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        let start = GLOBAL_PARAMS + (layer - 1) * PER_LAYER;
        start..start + PER_LAYER
    }

    pub fn global_indices(&self) -> Vec<usize> {
        let n = self.tensors.len();
        let mut idx: Vec<usize> = (0..GLOBAL_PARAMS).collect();
        idx.extend([n - 2, n - 1]);
        idx
    }

    /// Place every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound<'_> {
        let vars = self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        Bound { model: self, vars, dropout: 0.0, attention_dropout: 0.0, rng: None }
    }

    /// Plain forward pass with the requested taps and no dropout.
    pub fn forward_with_taps(&self, g: &mut Graph, batch: &TokenBatch, request: &TapRequest) -> Result<Forward, ModelError> {
        self.bind(g, false).forward(g, batch, request)
    }
}

/// Parameters of one model placed on a graph, plus per-pass options.
pub struct Bound<'m> {
    model: &'m TransformerModel,
    vars: Vec<Var>,
    dropout: f64,
    attention_dropout: f64,
    rng: Option<Rng>,
}

impl<'m> Bound<'m> {
    pub fn with_dropout(mut self, p: f64, rng: Rng) -> Self {
        if p > 0.0 {
            self.dropout = p;
            self.rng = Some(rng);
        }
        self
    }

    /// Dropout on attention probabilities; the Att tap sees them before masking.
    pub fn with_attention_dropout(mut self, p: f64, rng: Rng) -> Self {
        if p > 0.0 {
            self.attention_dropout = p;
            self.rng.get_or_insert(rng);
        }
        self
    }

    pub fn model(&self) -> &'m TransformerModel {
        self.model
    }

    pub fn spec(&self) -> &'m ModelSpec {
        &self.model.spec
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn layer_var(&self, layer: usize, slot: usize) -> Var {
        self.vars[GLOBAL_PARAMS + (layer - 1) * PER_LAYER + slot]
    }

    fn linear(&self, g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }

    fn drop(&mut self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        self.drop_with(g, x, self.dropout)
    }

    fn drop_with(&mut self, g: &mut Graph, x: Var, p: f64) -> Result<Var, ModelError> {
        let Some(rng) = self.rng.as_mut().filter(|_| p > 0.0) else { return Ok(x) };
        let keep = 1.0 - p;
        let shape = g.shape(x).to_vec();
        let n = crate::autodiff::numel(&shape);
        let mask: Vec<f64> = (0..n).map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 }).collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        Ok(g.mul(x, m)?)
    }

    pub fn check_request(&self, request: &TapRequest) -> Result<(), ModelError> {
        let layers = self.spec().layers;
        for key in &request.keys {
            if key.kind.is_layered() && (key.layer == 0 || key.layer > layers) {
                return Err(ModelError::Selector { layer: key.layer, layers });
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<(), ModelError> {
        let spec = self.spec();
        if batch.seq > spec.max_seq {
            return Err(ModelError::Input(format!("sequence length {} exceeds {}", batch.seq, spec.max_seq)));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&t| t >= spec.vocab) {
            return Err(ModelError::Input(format!("token id {bad} out of range for vocabulary {}", spec.vocab)));
        }
        Ok(())
    }

    /// Token + position + block-position embeddings followed by layernorm.
    pub fn embed(&mut self, g: &mut Graph, batch: &TokenBatch, taps: &mut Taps) -> Result<Var, ModelError> {
        self.check_batch(batch)?;
        let (b, s) = (batch.batch, batch.seq);
        let words = g.embedding(self.vars[WORD], &batch.ids, &[b, s])?;
        let positions: Vec<usize> = (0..s).collect();
        let pos = g.embedding(self.vars[POSITION], &positions, &[s])?;
        let blocks = vec![0usize; s];
        let blk = g.embedding(self.vars[BLOCK_POSITION], &blocks, &[s])?;
        let h = g.add(words, pos)?;
        let h = g.add(h, blk)?;
        let h = g.layer_norm(h, self.vars[EMB_LN_W], self.vars[EMB_LN_B], super::LN_EPS)?;
        let h = self.drop(g, h)?;
        taps.offer(TapKey::global(FeatureKind::Emb), h);
        Ok(h)
    }

    /// One pre-LN block, 1-based `layer`.
    pub fn layer(&mut self, g: &mut Graph, layer: usize, h: Var, taps: &mut Taps) -> Result<Var, ModelError> {
        let spec = self.spec();
        if layer == 0 || layer > spec.layers {
            return Err(ModelError::Selector { layer, layers: spec.layers });
        }
        let (d, heads, dh) = (spec.dim, spec.heads, spec.head_dim());
        let shape = g.shape(h).to_vec();
        let (b, s) = (shape[0], shape[1]);
        let p: Vec<Var> = (0..PER_LAYER).map(|slot| self.layer_var(layer, slot)).collect();
        let v = |slot: usize| p[slot];

        let a = g.layer_norm(h, v(LN1_W), v(LN1_B), super::LN_EPS)?;
        let q = self.linear(g, a, v(Q_W), v(Q_B))?;
        let k = self.linear(g, a, v(K_W), v(K_B))?;
        let val = self.linear(g, a, v(V_W), v(V_B))?;
        taps.offer(TapKey::new(FeatureKind::Q, layer), q);
        taps.offer(TapKey::new(FeatureKind::K, layer), k);
        taps.offer(TapKey::new(FeatureKind::V, layer), val);

        let qh = split_heads(g, q, b, s, heads, dh)?;
        let kh = split_heads(g, k, b, s, heads, dh)?;
        let vh = split_heads(g, val, b, s, heads, dh)?;
        let scores = g.scaled_dot(qh, kh)?;
        let att = g.softmax(scores, 3, 1.0)?;
        taps.offer(TapKey::new(FeatureKind::Att, layer), att);
        let att = self.drop_with(g, att, self.attention_dropout)?;
        let ctx = g.matmul(att, vh)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, s, d])?;
        let o = self.linear(g, ctx, v(O_W), v(O_B))?;
        let o = self.drop(g, o)?;
        let h = g.add(h, o)?;

        let f = g.layer_norm(h, v(LN2_W), v(LN2_B), super::LN_EPS)?;
        let f = self.linear(g, f, v(FFN_IN_W), v(FFN_IN_B))?;
        let f = g.gelu(f)?;
        let f = self.linear(g, f, v(FFN_OUT_W), v(FFN_OUT_B))?;
        let f = self.drop(g, f)?;
        let h = g.add(h, f)?;
        taps.offer(TapKey::new(FeatureKind::HS, layer), h);
        Ok(h)
    }

    /// Final layernorm and tied output projection, `(batch, seq, V)`.
    pub fn head(&mut self, g: &mut Graph, h: Var) -> Result<Var, ModelError> {
        let n = self.vars.len();
        let x = g.layer_norm(h, self.vars[n - 2], self.vars[n - 1], super::LN_EPS)?;
        let wt = g.transpose(self.vars[WORD])?;
        Ok(g.matmul(x, wt)?)
    }

    /// Record Soft/Hard taps for `logits` under the request's view.
    pub fn finish(&mut self, g: &mut Graph, logits: Var, taps: &mut Taps) -> Result<(), ModelError> {
        let soft = TapKey::global(FeatureKind::Soft);
        let hard = TapKey::global(FeatureKind::Hard);
        if taps.request.wants(soft) || taps.request.wants(hard) {
            let view = apply_view(g, logits, &taps.request.view)?;
            taps.offer(soft, view);
            if taps.request.wants(hard) {
                let ids: Vec<f64> = g.value(view).argmax_last().into_iter().map(|i| i as f64).collect();
                let rows = ids.len();
                let t = g.constant(Tensor::new(vec![rows], ids)?);
                taps.offer(hard, t);
            }
        }
        Ok(())
    }

    pub fn forward(&mut self, g: &mut Graph, batch: &TokenBatch, request: &TapRequest) -> Result<Forward, ModelError> {
        self.check_request(request)?;
        let mut taps = Taps::new(request.clone());
        let mut h = self.embed(g, batch, &mut taps)?;
        for l in 1..=self.spec().layers {
            h = self.layer(g, l, h, &mut taps)?;
        }
        let logits = self.head(g, h)?;
        self.finish(g, logits, &mut taps)?;
        Ok(Forward { logits, taps: taps.into_bundle() })
    }
}

fn split_heads(g: &mut Graph, x: Var, b: usize, s: usize, heads: usize, dh: usize) -> Result<Var, ModelError> {
    let x = g.reshape(x, &[b, s, heads, dh])?;
    Ok(g.permute(x, &[0, 2, 1, 3])?)
}

/// Slice `(batch, seq, V)` logits down to the model-output view.
pub fn apply_view(g: &mut Graph, logits: Var, view: &OutputView) -> Result<Var, ModelError> {
    let shape = g.shape(logits).to_vec();
    let (b, s, v) = (shape[0], shape[1], shape[2]);
    Ok(match view {
        OutputView::Full => g.reshape(logits, &[b * s, v])?,
        OutputView::Rows(rows) => {
            let flat = g.reshape(logits, &[b * s, v])?;
            g.embedding(flat, rows, &[rows.len()])?
        }
        OutputView::Classify { position, first_class, classes } => {
            let x = g.slice(logits, 1, *position, position + 1)?;
            let x = g.slice(x, 2, *first_class, first_class + classes)?;
            g.reshape(x, &[b, *classes])?
        }
    })
}

/// Collects only the requested taps during a forward pass.
#[derive(Debug, Clone)]
pub struct Taps {
    request: TapRequest,
    bundle: TapBundle,
}

impl Taps {
    pub fn new(request: TapRequest) -> Self {
        Self { request, bundle: TapBundle::new() }
    }

    /// Nothing requested; used for auxiliary passes.
    pub fn none() -> Self {
        Self::new(TapRequest::default())
    }

    pub fn request(&self) -> &TapRequest {
        &self.request
    }

    pub fn offer(&mut self, key: TapKey, v: Var) {
        if self.request.wants(key) {
            self.bundle.insert(key, v);
        }
    }

    pub fn into_bundle(self) -> TapBundle {
        self.bundle
    }
}
