//! Pre-norm decoder-only transformer with a multiplicative gate on every
//! attention and FFN block.
//!
//! Two execution paths share the same kernels:
//! * the tape path ([`Transformer::build_graph`]) applies a soft mask as a
//!   scale on each block's output and is differentiable;
//! * the inference path ([`Transformer::forward_infer`]) takes a binary mask
//!   and really skips work. A closed FFN block is not evaluated; a closed
//!   attention block still normalizes its input and appends rotary keys and
//!   values to the cache, but never projects queries, scores, mixes or
//!   projects the output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cache::KVCache;
use super::config::{BlockId, BlockKind, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, AttnShape};
use crate::tensor::{Tape, Tensor, Var};

pub const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f32) -> Tensor {
    let bound = std * 3f32.sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl Weights {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let ff = config.ffn_dim;
        let kv = config.kv_dim();
        let proj = 1.0 / (d as f32).sqrt();
        let resid = proj / (2.0 * config.num_layers as f32).sqrt();
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                attn_norm: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
                wq: uniform(&mut rng, vec![d, d], proj),
                wk: uniform(&mut rng, vec![d, kv], proj),
                wv: uniform(&mut rng, vec![d, kv], proj),
                wo: uniform(&mut rng, vec![d, d], resid),
                ffn_norm: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
                w_gate: uniform(&mut rng, vec![d, ff], proj),
                w_up: uniform(&mut rng, vec![d, ff], proj),
                w_down: uniform(&mut rng, vec![ff, d], resid * (d as f32 / ff as f32).sqrt()),
            })
            .collect();
        Self {
            embed: uniform(&mut rng, vec![config.vocab_size, d], 1.0),
            layers,
            final_norm: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            lm_head: uniform(&mut rng, vec![d, config.vocab_size], proj),
        }
    }

    /// Tensors in canonical checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ffn_norm", &l.ffn_norm),
                ("w_gate", &l.w_gate),
                ("w_up", &l.w_up),
                ("w_down", &l.w_down),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Mutable tensors in the same order as [`Weights::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
        for l in self.layers.iter_mut() {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }
}

/// Weights recorded on a tape, in [`Weights::named`] order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub embed: Var,
    pub layers: Vec<[Var; 9]>,
    pub final_norm: Var,
    pub lm_head: Var,
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend_from_slice(l);
        }
        out.push(self.final_norm);
        out.push(self.lm_head);
        out
    }
}

/// Output of the differentiable forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TrainOutput {
    pub loss: Var,
    pub logits: Var,
    /// Residual stream entering the final norm.
    pub hidden: Var,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    config: ModelConfig,
    weights: Weights,
}

impl Transformer {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        if weights.layers.len() != config.num_layers {
            return Err(Error::Config("layer count does not match config".into()));
        }
        let expect = Weights::init(&config, 0);
        for ((name, a), (_, b)) in weights.named().iter().zip(expect.named()) {
            if a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, config implies {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(Self { config, weights })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config, seed);
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    /// Same weights, different mask granularity.
    pub fn with_granularity(&self, granularity: super::Granularity) -> Self {
        Self {
            config: self.config.with_granularity(granularity),
            weights: self.weights.clone(),
        }
    }

    fn attn_shape(&self) -> AttnShape {
        AttnShape {
            heads: self.config.num_heads,
            kv_heads: self.config.kv_heads,
            head_dim: self.config.head_dim,
        }
    }

    /// Records the weights on `tape`; `trainable` controls whether they
    /// receive gradients.
    pub fn record_params(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let w = &self.weights;
        let embed = put(&w.embed);
        let layers = w
            .layers
            .iter()
            .map(|l| {
                [
                    put(&l.attn_norm),
                    put(&l.wq),
                    put(&l.wk),
                    put(&l.wv),
                    put(&l.wo),
                    put(&l.ffn_norm),
                    put(&l.w_gate),
                    put(&l.w_up),
                    put(&l.w_down),
                ]
            })
            .collect();
        ParamVars {
            embed,
            final_norm: put(&w.final_norm),
            lm_head: put(&w.lm_head),
            layers,
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    /// Differentiable forward pass. `gates` is an optional mask vector of
    /// gate length whose entries scale each block's output. The loss is
    /// next-token cross-entropy over `tokens[1..]`; logits cover every
    /// position.
    pub fn build_graph(
        &self,
        tape: &mut Tape,
        params: &ParamVars,
        tokens: &[u32],
        gates: Option<Var>,
    ) -> Result<TrainOutput> {
        self.check_tokens(tokens)?;
        if tokens.len() < 2 {
            return Err(Error::Input(
                "need at least two tokens for a next-token loss".into(),
            ));
        }
        if let Some(g) = gates {
            let n = tape.value(g).numel();
            if n != self.config.num_gates() {
                return Err(Error::Config(format!(
                    "soft mask has {n} entries, model has {} gates",
                    self.config.num_gates()
                )));
            }
        }
        let cfg = &self.config;
        let shape = self.attn_shape();
        let mut x = tape.embedding(params.embed, tokens)?;
        for (layer, p) in params.layers.iter().enumerate() {
            let [attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down] = *p;
            let h = tape.rmsnorm(x, attn_norm, NORM_EPS)?;
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let q = tape.rope(q, cfg.num_heads, cfg.head_dim, 0)?;
            let k = tape.rope(k, cfg.kv_heads, cfg.head_dim, 0)?;
            let a = tape.causal_attention(q, k, v, shape)?;
            let o = tape.matmul(a, wo)?;
            let o = self.gate(tape, o, gates, BlockId::attention(layer))?;
            x = tape.add(x, o)?;

            let h = tape.rmsnorm(x, ffn_norm, NORM_EPS)?;
            let g = tape.matmul(h, w_gate)?;
            let u = tape.matmul(h, w_up)?;
            let g = tape.silu(g);
            let act = tape.mul(g, u)?;
            let f = tape.matmul(act, w_down)?;
            let f = self.gate(tape, f, gates, BlockId::ffn(layer))?;
            x = tape.add(x, f)?;
        }
        let h = tape.rmsnorm(x, params.final_norm, NORM_EPS)?;
        let logits = tape.matmul(h, params.lm_head)?;
        let n = tokens.len();
        let prefix = tape.slice_rows(logits, 0, n - 1)?;
        let loss = tape.cross_entropy(prefix, &tokens[1..])?;
        Ok(TrainOutput {
            loss,
            logits,
            hidden: x,
        })
    }

    fn gate(&self, tape: &mut Tape, out: Var, gates: Option<Var>, block: BlockId) -> Result<Var> {
        match gates {
            None => Ok(out),
            Some(g) => {
                let z = tape.index(g, block.flat_index(self.config.granularity))?;
                tape.mul(out, z)
            }
        }
    }

    /// Convenience forward pass on frozen weights: returns the loss and the
    /// `[n × vocab]` logits.
    pub fn forward_train(
        &self,
        tokens: &[u32],
        soft_mask: Option<&[f32]>,
    ) -> Result<(f32, Tensor)> {
        let mut tape = Tape::new();
        let params = self.record_params(&mut tape, false);
        let gates = soft_mask.map(|m| tape.constant(Tensor::from_vec(m.to_vec())));
        let out = self.build_graph(&mut tape, &params, tokens, gates)?;
        Ok((tape.value(out.loss).item(), tape.value(out.logits).clone()))
    }

    fn binary_block_mask(&self, mask: &[f32]) -> Result<Vec<bool>> {
        if let Some(bad) = mask.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract(format!("binary mask contains {bad}")));
        }
        Ok(self
            .config
            .expand_mask(mask)?
            .into_iter()
            .map(|v| v == 1.0)
            .collect())
    }

    /// Incremental forward pass with real block skipping. Feeds `tokens` after
    /// whatever the cache already holds and returns their `[n × vocab]`
    /// logits.
    pub fn forward_infer(
        &self,
        tokens: &[u32],
        mask: &[f32],
        cache: &mut KVCache,
    ) -> Result<Tensor> {
        self.forward_infer_traced(tokens, mask, cache, None)
    }

    /// [`Transformer::forward_infer`] that reports the residual stream before
    /// and after every executed block.
    pub fn forward_infer_traced(
        &self,
        tokens: &[u32],
        mask: &[f32],
        cache: &mut KVCache,
        mut trace: Option<&mut dyn FnMut(BlockId, &[f32], &[f32])>,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let open = self.binary_block_mask(mask)?;
        if cache.num_layers() != cfg.num_layers || cache.kv_width() != cfg.kv_dim() {
            return Err(Error::Cache(format!(
                "cache shaped {}x{} for model {}x{}",
                cache.num_layers(),
                cache.kv_width(),
                cfg.num_layers,
                cfg.kv_dim()
            )));
        }
        let past = cache.cached_len()?;
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if past + tokens.len() > cfg.max_seq_len {
            return Err(Error::Length {
                len: past + tokens.len(),
                max: cfg.max_seq_len,
            });
        }
        let n = tokens.len();
        let d = cfg.hidden_dim;
        let kvw = cfg.kv_dim();
        let shape = self.attn_shape();
        let w = &self.weights;

        let mut x = Vec::with_capacity(n * d);
        for &t in tokens {
            if t as usize >= cfg.vocab_size {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: t as usize,
                    size: cfg.vocab_size,
                });
            }
            x.extend_from_slice(w.embed.row(t as usize));
        }
        let mut h = vec![0.0; n * d];
        for (layer, lw) in w.layers.iter().enumerate() {
            let before = trace.as_ref().map(|_| x.clone());
            // attention: K/V always, the rest only when open
            for r in 0..n {
                kernels::rmsnorm_row(
                    &x[r * d..(r + 1) * d],
                    lw.attn_norm.data(),
                    NORM_EPS,
                    &mut h[r * d..(r + 1) * d],
                );
            }
            let mut k = vec![0.0; n * kvw];
            let mut v = vec![0.0; n * kvw];
            kernels::matmul(&h, lw.wk.data(), n, d, kvw, &mut k);
            kernels::matmul(&h, lw.wv.data(), n, d, kvw, &mut v);
            for r in 0..n {
                kernels::rope_row(
                    &mut k[r * kvw..(r + 1) * kvw],
                    cfg.kv_heads,
                    cfg.head_dim,
                    past + r,
                    false,
                );
            }
            cache.append(layer, &k, &v);
            if open[BlockId::attention(layer).flat_index(super::Granularity::Block)] {
                let mut q = vec![0.0; n * d];
                kernels::matmul(&h, lw.wq.data(), n, d, d, &mut q);
                let mut a = vec![0.0; n * d];
                let mut probs = vec![0.0; cfg.num_heads * (past + n)];
                for r in 0..n {
                    let qr = &mut q[r * d..(r + 1) * d];
                    kernels::rope_row(qr, cfg.num_heads, cfg.head_dim, past + r, false);
                    let keys = past + r + 1;
                    kernels::attend_row(
                        qr,
                        cache.keys(layer),
                        cache.values(layer),
                        keys,
                        shape,
                        &mut a[r * d..(r + 1) * d],
                        &mut probs[..cfg.num_heads * keys],
                    );
                }
                let mut o = vec![0.0; n * d];
                kernels::matmul(&a, lw.wo.data(), n, d, d, &mut o);
                for (xi, oi) in x.iter_mut().zip(&o) {
                    *xi += *oi;
                }
                if let (Some(t), Some(b)) = (trace.as_mut(), before.as_ref()) {
                    t(BlockId::attention(layer), b, &x);
                }
            }

            if open[BlockId::ffn(layer).flat_index(super::Granularity::Block)] {
                let before = trace.as_ref().map(|_| x.clone());
                let ff = cfg.ffn_dim;
                for r in 0..n {
                    kernels::rmsnorm_row(
                        &x[r * d..(r + 1) * d],
                        lw.ffn_norm.data(),
                        NORM_EPS,
                        &mut h[r * d..(r + 1) * d],
                    );
                }
                let mut g = vec![0.0; n * ff];
                let mut u = vec![0.0; n * ff];
                kernels::matmul(&h, lw.w_gate.data(), n, d, ff, &mut g);
                kernels::matmul(&h, lw.w_up.data(), n, d, ff, &mut u);
                for (gi, ui) in g.iter_mut().zip(&u) {
                    *gi = kernels::silu(*gi) * ui;
                }
                let mut f = vec![0.0; n * d];
                kernels::matmul(&g, lw.w_down.data(), n, ff, d, &mut f);
                for (xi, fi) in x.iter_mut().zip(&f) {
                    *xi += *fi;
                }
                if let (Some(t), Some(b)) = (trace.as_mut(), before.as_ref()) {
                    t(BlockId::ffn(layer), b, &x);
                }
            }
        }
        for r in 0..n {
            kernels::rmsnorm_row(
                &x[r * d..(r + 1) * d],
                w.final_norm.data(),
                NORM_EPS,
                &mut h[r * d..(r + 1) * d],
            );
        }
        let vocab = cfg.vocab_size;
        let mut logits = vec![0.0; n * vocab];
        kernels::matmul(&h, w.lm_head.data(), n, d, vocab, &mut logits);
        Tensor::new(vec![n, vocab], logits)
    }

    pub fn new_cache(&self) -> KVCache {
        KVCache::new(self.config.num_layers, self.config.kv_dim())
    }

    /// Greedy decoding through the cached skip path. Stops early once the
    /// context reaches `max_seq_len`.
    pub fn generate(&self, prompt: &[u32], mask: &[f32], steps: usize) -> Result<Vec<u32>> {
        self.check_tokens(prompt)?;
        self.binary_block_mask(mask)?;
        let mut out = prompt.to_vec();
        if steps == 0 {
            return Ok(out);
        }
        let mut cache = self.new_cache();
        let mut logits = self.forward_infer(prompt, mask, &mut cache)?;
        for step in 0..steps {
            let (rows, _) = logits.as_matrix();
            let next = argmax(logits.row(rows - 1)) as u32;
            out.push(next);
            if step + 1 == steps || out.len() >= self.config.max_seq_len {
                break;
            }
            logits = self.forward_infer(&[next], mask, &mut cache)?;
        }
        Ok(out)
    }

    /// Mean next-token NLL and token count of `tokens` under the skip path.
    pub fn sequence_nll(&self, tokens: &[u32], mask: &[f32]) -> Result<(f64, usize)> {
        if tokens.len() < 2 {
            return Ok((0.0, 0));
        }
        let mut cache = self.new_cache();
        let logits = self.forward_infer(&tokens[..tokens.len() - 1], mask, &mut cache)?;
        let mut total = 0.0f64;
        for (r, &t) in tokens[1..].iter().enumerate() {
            let row = logits.row(r);
            total += (kernels::log_sum_exp(row) - row[t as usize]) as f64;
        }
        Ok((total, tokens.len() - 1))
    }

    pub fn block_kinds(&self) -> impl Iterator<Item = (usize, BlockKind)> + '_ {
        self.config.blocks().map(|b| (b.layer, b.kind))
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
