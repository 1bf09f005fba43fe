//! Tiny transformer classifier with frozen base weights and low-rank
//! adapters on attention projections.

mod lora;

pub use lora::{FrozenLinear, LoraAdapter};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, TensorError};
use crate::rng::StreamRng;
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Attention projections that can carry an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Standard deviation of the Gaussian `A` init; `1 / rank` when unset.
    pub init_std: Option<f64>,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.1,
            init_std: None,
            targets: vec![LoraTarget::Query, LoraTarget::Value],
        }
    }
}

impl LoraConfig {
    pub fn a_init_std(&self) -> f64 {
        self.init_std.unwrap_or(1.0 / self.rank as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub num_classes: usize,
    pub mlp_dim: usize,
    pub lora: LoraConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            seq_len: 32,
            embed_dim: 64,
            num_heads: 4,
            num_layers: 2,
            num_classes: 4,
            mlp_dim: 128,
            lora: LoraConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("mlp_dim", self.mlp_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.num_classes < 2 {
            return Err(ModelError::Config("need at least two classes".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(ModelError::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        let l = &self.lora;
        if l.rank == 0 || l.rank > self.embed_dim {
            return Err(ModelError::Config(format!(
                "lora rank {} must be in 1..={}",
                l.rank, self.embed_dim
            )));
        }
        if !(0.0..1.0).contains(&l.dropout) {
            return Err(ModelError::Config(format!("lora dropout {} not in [0, 1)", l.dropout)));
        }
        Ok(())
    }
}

/// Per-forward binding state: which parameter groups are differentiated,
/// train/eval mode, and the dropout stream.
pub struct ForwardCtx<'r> {
    pub mode: Mode,
    pub train_base: bool,
    pub train_lora: bool,
    pub dropout: Option<&'r mut StreamRng>,
    bindings: Vec<(String, Var)>,
}

impl<'r> ForwardCtx<'r> {
    pub fn new(mode: Mode, train_base: bool, train_lora: bool, dropout: Option<&'r mut StreamRng>) -> Self {
        Self {
            mode,
            train_base,
            train_lora,
            dropout,
            bindings: Vec::new(),
        }
    }

    fn bind<T: Element>(&mut self, tape: &mut Tape<T>, name: String, value: &Tensor<T>, trainable: bool) -> Var {
        let v = tape.leaf(value.clone(), trainable);
        if trainable {
            self.bindings.push((name, v));
        }
        v
    }

    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }
}

#[derive(Clone, Debug)]
struct Block<T> {
    ln1_gain: Tensor<T>,
    ln1_bias: Tensor<T>,
    query: FrozenLinear<T>,
    key: FrozenLinear<T>,
    value: FrozenLinear<T>,
    output: FrozenLinear<T>,
    ln2_gain: Tensor<T>,
    ln2_bias: Tensor<T>,
    ff_in: FrozenLinear<T>,
    ff_out: FrozenLinear<T>,
}

impl<T: Element> Block<T> {
    fn projections(&self) -> [(LoraTarget, &FrozenLinear<T>); 4] {
        [
            (LoraTarget::Query, &self.query),
            (LoraTarget::Key, &self.key),
            (LoraTarget::Value, &self.value),
            (LoraTarget::Output, &self.output),
        ]
    }

    fn projection_mut(&mut self, target: LoraTarget) -> &mut FrozenLinear<T> {
        match target {
            LoraTarget::Query => &mut self.query,
            LoraTarget::Key => &mut self.key,
            LoraTarget::Value => &mut self.value,
            LoraTarget::Output => &mut self.output,
        }
    }
}

fn target_name(t: LoraTarget) -> &'static str {
    match t {
        LoraTarget::Query => "query",
        LoraTarget::Key => "key",
        LoraTarget::Value => "value",
        LoraTarget::Output => "output",
    }
}

/// Token + position embeddings, pre-LN encoder blocks, final LN, mean-pool
/// over positions and a linear classification head.
#[derive(Clone, Debug)]
pub struct TinyTransformer<T> {
    config: ModelConfig,
    tok_emb: Tensor<T>,
    pos_emb: Tensor<T>,
    blocks: Vec<Block<T>>,
    lnf_gain: Tensor<T>,
    lnf_bias: Tensor<T>,
    head: FrozenLinear<T>,
    frozen: bool,
    merged: bool,
}

impl<T: Element> TinyTransformer<T> {
    /// Random base weights, nothing frozen, no adapters.
    pub fn init(config: ModelConfig, rng: &mut StreamRng) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.embed_dim;
        let ones = |n: usize| Tensor::from_fn(&[n], |_| T::one());
        let emb_std = 0.5;
        let tok_emb = Tensor::from_fn(&[config.vocab_size, d], |_| T::of(rng.normal() * emb_std));
        let pos_emb = Tensor::from_fn(&[config.seq_len, d], |_| T::of(rng.normal() * emb_std * 0.2));
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                ln1_gain: ones(d),
                ln1_bias: Tensor::zeros(&[d]),
                query: FrozenLinear::init(d, d, rng),
                key: FrozenLinear::init(d, d, rng),
                value: FrozenLinear::init(d, d, rng),
                output: FrozenLinear::init(d, d, rng),
                ln2_gain: ones(d),
                ln2_bias: Tensor::zeros(&[d]),
                ff_in: FrozenLinear::init(d, config.mlp_dim, rng),
                ff_out: FrozenLinear::init(config.mlp_dim, d, rng),
            })
            .collect();
        let head = FrozenLinear::init(d, config.num_classes, rng);
        Ok(Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: ones(d),
            lnf_bias: Tensor::zeros(&[d]),
            head,
            config,
            frozen: false,
            merged: false,
        })
    }

    /// Model with the right structure for loading named parameters into.
    pub fn skeleton(config: ModelConfig, frozen: bool, with_adapters: bool) -> Result<Self, ModelError> {
        let mut rng = StreamRng::new(0, "skeleton");
        let mut m = Self::init(config, &mut rng)?;
        if frozen {
            m.freeze();
        }
        if with_adapters {
            m.init_adapters(&mut rng)?;
        }
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn has_adapters(&self) -> bool {
        self.blocks.iter().any(|b| b.projections().iter().any(|(_, p)| p.adapter.is_some()))
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Attaches adapters to the configured projections of every block:
    /// `A ~ N(0, init_std²)` and `B = 0`.
    pub fn init_adapters(&mut self, rng: &mut StreamRng) -> Result<(), ModelError> {
        if !self.frozen {
            return Err(ModelError::NotFrozen);
        }
        if self.has_adapters() || self.merged {
            return Err(ModelError::AdaptersAlreadyInitialized);
        }
        let lc = self.config.lora.clone();
        for block in &mut self.blocks {
            for &target in &lc.targets {
                let layer = block.projection_mut(target);
                layer.adapter = Some(LoraAdapter::init(
                    layer.d_in(),
                    layer.d_out(),
                    lc.rank,
                    lc.alpha,
                    lc.dropout,
                    lc.a_init_std(),
                    rng,
                )?);
            }
        }
        Ok(())
    }

    /// `W ← W + (alpha/r)·B·A` for every adapter, then drops the adapters.
    pub fn merge_adapters(&mut self) -> Result<(), ModelError> {
        if self.merged {
            return Err(ModelError::AlreadyMerged);
        }
        if !self.has_adapters() {
            return Err(ModelError::NoAdapters);
        }
        for block in &mut self.blocks {
            for t in [LoraTarget::Query, LoraTarget::Key, LoraTarget::Value, LoraTarget::Output] {
                let layer = block.projection_mut(t);
                if layer.adapter.is_some() {
                    layer.merge()?;
                }
            }
        }
        self.merged = true;
        Ok(())
    }

    fn visit(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        let linear = |f: &mut dyn FnMut(String, &Tensor<T>), name: &str, l: &FrozenLinear<T>| {
            f(format!("base/{name}/weight"), &l.weight);
            f(format!("base/{name}/bias"), &l.bias);
            if let Some(a) = &l.adapter {
                f(format!("lora/{name}/A"), &a.a);
                f(format!("lora/{name}/B"), &a.b);
            }
        };
        f("base/embed/token".into(), &self.tok_emb);
        f("base/embed/position".into(), &self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            f(format!("base/layer{i}/ln1/gain"), &b.ln1_gain);
            f(format!("base/layer{i}/ln1/bias"), &b.ln1_bias);
            for (t, p) in b.projections() {
                linear(f, &format!("layer{i}/{}", target_name(t)), p);
            }
            f(format!("base/layer{i}/ln2/gain"), &b.ln2_gain);
            f(format!("base/layer{i}/ln2/bias"), &b.ln2_bias);
            linear(f, &format!("layer{i}/ff_in"), &b.ff_in);
            linear(f, &format!("layer{i}/ff_out"), &b.ff_out);
        }
        f("base/final_ln/gain".into(), &self.lnf_gain);
        f("base/final_ln/bias".into(), &self.lnf_bias);
        linear(f, "head", &self.head);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        let linear = |f: &mut dyn FnMut(String, &mut Tensor<T>), name: &str, l: &mut FrozenLinear<T>| {
            f(format!("base/{name}/weight"), &mut l.weight);
            f(format!("base/{name}/bias"), &mut l.bias);
            if let Some(a) = &mut l.adapter {
                f(format!("lora/{name}/A"), &mut a.a);
                f(format!("lora/{name}/B"), &mut a.b);
            }
        };
        f("base/embed/token".into(), &mut self.tok_emb);
        f("base/embed/position".into(), &mut self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(format!("base/layer{i}/ln1/gain"), &mut b.ln1_gain);
            f(format!("base/layer{i}/ln1/bias"), &mut b.ln1_bias);
            linear(f, &format!("layer{i}/query"), &mut b.query);
            linear(f, &format!("layer{i}/key"), &mut b.key);
            linear(f, &format!("layer{i}/value"), &mut b.value);
            linear(f, &format!("layer{i}/output"), &mut b.output);
            f(format!("base/layer{i}/ln2/gain"), &mut b.ln2_gain);
            f(format!("base/layer{i}/ln2/bias"), &mut b.ln2_bias);
            linear(f, &format!("layer{i}/ff_in"), &mut b.ff_in);
            linear(f, &format!("layer{i}/ff_out"), &mut b.ff_out);
        }
        f("base/final_ln/gain".into(), &mut self.lnf_gain);
        f("base/final_ln/bias".into(), &mut self.lnf_bias);
        linear(f, "head", &mut self.head);
    }

    /// All parameters in canonical order.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t.clone())));
        out
    }

    /// Replaces one parameter; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<(), ModelError> {
        let mut result = Err(ModelError::Config(format!("unknown parameter {name}")));
        let mut value = Some(value);
        self.visit_mut(&mut |n, t| {
            if n == name {
                let v = value.take().expect("parameter names are unique");
                result = if v.shape() == t.shape() {
                    *t = v;
                    Ok(())
                } else {
                    Err(ModelError::Tensor(TensorError::ShapeMismatch {
                        op: "set_param",
                        lhs: t.shape().to_vec(),
                        rhs: v.shape().to_vec(),
                    }))
                };
            }
        });
        result
    }

    fn is_trainable_name(&self, name: &str) -> bool {
        if self.frozen {
            name.starts_with("lora/")
        } else {
            name.starts_with("base/")
        }
    }

    /// Names of the currently trainable parameters: the base weights before
    /// freezing, the adapter matrices after.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| {
            if self.is_trainable_name(&n) {
                out.push(n)
            }
        });
        out
    }

    pub fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |name, t| {
            if self.is_trainable_name(&name) {
                n += t.numel();
            }
        });
        n
    }

    pub fn trainable_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_trainable());
        self.visit(&mut |name, t| {
            if self.is_trainable_name(&name) {
                out.extend(t.data().iter().map(|v| v.as_f64()));
            }
        });
        out
    }

    pub fn set_trainable_flat(&mut self, values: &[f64]) -> Result<(), ModelError> {
        let expected = self.num_trainable();
        if values.len() != expected {
            return Err(ModelError::ParamCount {
                expected,
                got: values.len(),
            });
        }
        let frozen = self.frozen;
        let mut offset = 0;
        self.visit_mut(&mut |name, t| {
            let trainable = if frozen {
                name.starts_with("lora/")
            } else {
                name.starts_with("base/")
            };
            if trainable {
                let n = t.numel();
                for (dst, &src) in t.data_mut().iter_mut().zip(&values[offset..offset + n]) {
                    *dst = T::of(src);
                }
                offset += n;
            }
        });
        Ok(())
    }

    /// Records the forward pass for `tokens` (a flat list of whole
    /// sequences) and returns the `[n_seq × num_classes]` logits.
    pub fn forward(&self, tape: &mut Tape<T>, tokens: &[usize], ctx: &mut ForwardCtx<'_>) -> Result<Var, ModelError> {
        let c = &self.config;
        let len = c.seq_len;
        if tokens.is_empty() || tokens.len() % len != 0 {
            return Err(ModelError::Config(format!(
                "{} tokens is not a whole number of length-{len} sequences",
                tokens.len()
            )));
        }
        let seqs = tokens.len() / len;
        let positions: Vec<usize> = (0..tokens.len()).map(|i| i % len).collect();

        let base = ctx.train_base;
        let tok = ctx.bind(tape, "base/embed/token".into(), &self.tok_emb, base);
        let pos = ctx.bind(tape, "base/embed/position".into(), &self.pos_emb, base);
        let te = tape.embedding(tok, tokens)?;
        let pe = tape.embedding(pos, &positions)?;
        let mut x = tape.add(te, pe)?;

        for (i, b) in self.blocks.iter().enumerate() {
            let g = ctx.bind(tape, format!("base/layer{i}/ln1/gain"), &b.ln1_gain, base);
            let bb = ctx.bind(tape, format!("base/layer{i}/ln1/bias"), &b.ln1_bias, base);
            let h = tape.layer_norm(x, g, bb)?;
            let q = b.query.forward(&format!("layer{i}/query"), tape, h, ctx)?;
            let k = b.key.forward(&format!("layer{i}/key"), tape, h, ctx)?;
            let v = b.value.forward(&format!("layer{i}/value"), tape, h, ctx)?;
            let a = tape.attention(q, k, v, seqs, c.num_heads)?;
            let o = b.output.forward(&format!("layer{i}/output"), tape, a, ctx)?;
            x = tape.add(x, o)?;

            let g = ctx.bind(tape, format!("base/layer{i}/ln2/gain"), &b.ln2_gain, base);
            let bb = ctx.bind(tape, format!("base/layer{i}/ln2/bias"), &b.ln2_bias, base);
            let h = tape.layer_norm(x, g, bb)?;
            let f = b.ff_in.forward(&format!("layer{i}/ff_in"), tape, h, ctx)?;
            let f = tape.gelu(f)?;
            let f = b.ff_out.forward(&format!("layer{i}/ff_out"), tape, f, ctx)?;
            x = tape.add(x, f)?;
        }
        let g = ctx.bind(tape, "base/final_ln/gain".into(), &self.lnf_gain, base);
        let bb = ctx.bind(tape, "base/final_ln/bias".into(), &self.lnf_bias, base);
        let x = tape.layer_norm(x, g, bb)?;
        let pooled = tape.mean_pool(x, len)?;
        self.head.forward("head", tape, pooled, ctx)
    }

    /// Logits without recording gradients. Dropout is applied only when
    /// `mode` is `Train` and a stream is supplied.
    pub fn logits(&self, tokens: &[usize], mode: Mode, dropout: Option<&mut StreamRng>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(mode, false, false, dropout);
        let out = self.forward(&mut tape, tokens, &mut ctx)?;
        Ok(tape.value(out).clone())
    }

    /// Mean cross-entropy and its gradient with respect to the trainable
    /// parameters, flattened in [`Self::trainable_flat`] order.
    pub fn loss_and_grad(
        &self,
        tokens: &[usize],
        labels: &[usize],
        mode: Mode,
        dropout: Option<&mut StreamRng>,
    ) -> Result<(f64, Vec<f64>), ModelError> {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(mode, !self.frozen, self.frozen, dropout);
        let logits = self.forward(&mut tape, tokens, &mut ctx)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let grads = tape.backward(loss)?;
        let by_name: HashMap<&str, Var> = ctx.bindings().iter().map(|(n, v)| (n.as_str(), *v)).collect();
        let mut flat = Vec::with_capacity(self.num_trainable());
        self.visit(&mut |name, t| {
            if self.is_trainable_name(&name) {
                match by_name.get(name.as_str()).and_then(|&v| grads.data(v)) {
                    Some(g) => flat.extend(g.iter().map(|x| x.as_f64())),
                    None => flat.extend(std::iter::repeat(0.0).take(t.numel())),
                }
            }
        });
        Ok((tape.value(loss).data()[0].as_f64(), flat))
    }
}
