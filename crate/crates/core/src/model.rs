//! Plain pre-norm ViT classifier whose forward pass can prune tokens and
//! attention connections between layers.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use trilevel_tensor::{
    AttnLayout, Component, Float, KeySets, NodeId, ParamId, ParamStore, Scope, Tape, Tensor,
};

use crate::config::{SparsityConfig, ViTConfig};
use crate::error::{CoreError, Result};
use crate::selector::{ta_select, SelectionMask};

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Post-softmax attention of one image at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord<F> {
    /// 1-based layer index.
    pub layer: usize,
    /// `[H × L' × L']`.
    pub probs: Tensor<F>,
    /// Original indices of the live tokens (ascending, `[CLS]` = 0).
    pub live_tokens: Vec<usize>,
}

impl<F: Float> AttentionRecord<F> {
    pub fn heads(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.live_tokens.len()
    }

    /// Head-averaged `[L' × L']` matrix in f64.
    pub fn head_mean(&self) -> Vec<f64> {
        let l2 = self.tokens() * self.tokens();
        let h = self.heads();
        let data = self.probs.data();
        let mut out = vec![0.0; l2];
        for head in 0..h {
            for (o, v) in out.iter_mut().zip(&data[head * l2..(head + 1) * l2]) {
                *o += v.as_f64();
            }
        }
        out.iter_mut().for_each(|v| *v /= h as f64);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerWeights {
    pub norm1_g: ParamId,
    pub norm1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub norm2_g: ParamId,
    pub norm2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct ViT<F> {
    cfg: ViTConfig,
    params: ParamStore<F>,
    patch_w: ParamId,
    patch_b: ParamId,
    cls: Option<ParamId>,
    pos: ParamId,
    layers: Vec<LayerWeights>,
    norm_g: ParamId,
    norm_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// Everything a forward pass exposes besides the logits.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: NodeId,
    pub batch: usize,
    /// Attention node of each layer (index `layer - 1`).
    pub attention: Vec<NodeId>,
    /// Live original token indices per layer, per image.
    pub live: Vec<Vec<Vec<usize>>>,
    /// Masks produced by each selector, per image.
    pub masks: Vec<Vec<SelectionMask>>,
}

impl ForwardOutput {
    pub fn record<F: Float>(&self, tape: &Tape<F>, layer: usize, image: usize) -> AttentionRecord<F> {
        let (probs, layout) = tape
            .attention_probs(self.attention[layer - 1])
            .expect("attention node");
        let per = layout.heads * layout.tokens * layout.tokens;
        let data = probs[image * per..(image + 1) * per].to_vec();
        AttentionRecord {
            layer,
            probs: Tensor::new(vec![layout.heads, layout.tokens, layout.tokens], data)
                .expect("record shape"),
            live_tokens: self.live[layer - 1][image].clone(),
        }
    }

    /// Live patch-token count entering `layer` (same for every image).
    pub fn live_patches(&self, layer: usize, has_cls: bool) -> usize {
        self.live[layer - 1][0].len() - usize::from(has_cls)
    }
}

fn normal_tensor<F: Float>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<F> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    Tensor::from_fn(shape, |_| {
        let v: f64 = dist.sample(rng);
        F::from_f64(v.clamp(-2.0 * INIT_STD, 2.0 * INIT_STD))
    })
}

fn ones<F: Float>(n: usize) -> Tensor<F> {
    Tensor::from_fn(&[n], |_| F::one())
}

impl<F: Float> ViT<F> {
    /// Fresh model: truncated-normal(0.02) weights, zero biases, unit norms.
    pub fn new(cfg: &ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, hidden) = (cfg.d_model, cfg.hidden());
        let mut p = ParamStore::new();
        let patch_w = p.add("patch_embed.weight", normal_tensor(&mut rng, &[cfg.patch_dim(), d]), true);
        let patch_b = p.add("patch_embed.bias", Tensor::zeros(&[d]), false);
        let cls = cfg
            .use_cls_token
            .then(|| p.add("cls_token", normal_tensor(&mut rng, &[1, d]), false));
        let pos = p.add("pos_embed", normal_tensor(&mut rng, &[cfg.tokens(), d]), false);
        let mut layers = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let n = |s: &str| format!("blocks.{i}.{s}");
            layers.push(LayerWeights {
                norm1_g: p.add(n("norm1.weight"), ones(d), false),
                norm1_b: p.add(n("norm1.bias"), Tensor::zeros(&[d]), false),
                qkv_w: p.add(n("attn.qkv.weight"), normal_tensor(&mut rng, &[d, 3 * d]), true),
                qkv_b: p.add(n("attn.qkv.bias"), Tensor::zeros(&[3 * d]), false),
                proj_w: p.add(n("attn.proj.weight"), normal_tensor(&mut rng, &[d, d]), true),
                proj_b: p.add(n("attn.proj.bias"), Tensor::zeros(&[d]), false),
                norm2_g: p.add(n("norm2.weight"), ones(d), false),
                norm2_b: p.add(n("norm2.bias"), Tensor::zeros(&[d]), false),
                fc1_w: p.add(n("mlp.fc1.weight"), normal_tensor(&mut rng, &[d, hidden]), true),
                fc1_b: p.add(n("mlp.fc1.bias"), Tensor::zeros(&[hidden]), false),
                fc2_w: p.add(n("mlp.fc2.weight"), normal_tensor(&mut rng, &[hidden, d]), true),
                fc2_b: p.add(n("mlp.fc2.bias"), Tensor::zeros(&[d]), false),
            });
        }
        let norm_g = p.add("norm.weight", ones(d), false);
        let norm_b = p.add("norm.bias", Tensor::zeros(&[d]), false);
        let head_w = p.add("head.weight", normal_tensor(&mut rng, &[d, cfg.num_classes]), true);
        let head_b = p.add("head.bias", Tensor::zeros(&[cfg.num_classes]), false);
        Ok(Self {
            cfg: cfg.clone(),
            params: p,
            patch_w,
            patch_b,
            cls,
            pos,
            layers,
            norm_g,
            norm_b,
            head_w,
            head_b,
        })
    }

    /// Rebuilds a model from named tensors; names and shapes must match
    /// what [`ViT::new`] would create for `cfg`.
    pub fn from_named(cfg: &ViTConfig, tensors: Vec<(String, Tensor<F>)>) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        if tensors.len() != model.params.len() {
            return Err(CoreError::Incompatible(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| CoreError::Incompatible(format!("unexpected tensor `{name}`")))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(CoreError::Incompatible(format!(
                    "tensor `{name}` has shape {:?}, config expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(model)
    }

    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn layer_weights(&self, layer: usize) -> &LayerWeights {
        &self.layers[layer - 1]
    }

    fn linear(&self, tape: &mut Tape<F>, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let w = tape.param(&self.params, w);
        let b = tape.param(&self.params, b);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_bias(y, b)?)
    }

    fn layernorm(&self, tape: &mut Tape<F>, x: NodeId, g: ParamId, b: ParamId) -> Result<NodeId> {
        let g = tape.param(&self.params, g);
        let b = tape.param(&self.params, b);
        Ok(tape.layernorm(x, g, b, F::from_f64(LN_EPS))?)
    }

    /// Flattens `[B, C, H, W]` images into `[B·N × C·p²]` patch rows
    /// (patches row-major over the grid, each patch ordered c, y, x).
    pub fn patchify(&self, images: &Tensor<F>) -> Result<Tensor<F>> {
        let c = &self.cfg;
        let (s, p, ch) = (c.image_size, c.patch_size, c.channels);
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != ch || shape[2] != s || shape[3] != s {
            return Err(CoreError::Config(format!(
                "images of shape {shape:?} do not match [B, {ch}, {s}, {s}]"
            )));
        }
        let (b, g) = (shape[0], c.grid());
        let src = images.data();
        let mut out = Vec::with_capacity(images.len());
        for img in 0..b {
            let base = img * ch * s * s;
            for gy in 0..g {
                for gx in 0..g {
                    for cc in 0..ch {
                        for y in 0..p {
                            let row = base + cc * s * s + (gy * p + y) * s + gx * p;
                            out.extend_from_slice(&src[row..row + p]);
                        }
                    }
                }
            }
        }
        Ok(Tensor::new(vec![b * c.num_patches(), c.patch_dim()], out)?)
    }

    /// Projects patches, prepends `[CLS]`, adds positions: `[B·L × d]`.
    pub fn patch_embed(&self, tape: &mut Tape<F>, images: &Tensor<F>) -> Result<NodeId> {
        let batch = images.shape()[0];
        let patches = self.patchify(images)?;
        let prev = tape.scope();
        tape.set_scope(Scope::Embed);
        let x = tape.constant(patches);
        let x = self.linear(tape, x, self.patch_w, self.patch_b)?;
        tape.set_scope(prev);
        let cls = self.cls.map(|id| tape.param(&self.params, id));
        let pos = tape.param(&self.params, self.pos);
        Ok(tape.assemble_tokens(x, cls, pos, batch)?)
    }

    /// Multi-head self-attention of `layer` (1-based) over `[B·L' × d]`.
    /// Returns the projected output and the attention node.
    pub fn mhsa(
        &self,
        tape: &mut Tape<F>,
        x: NodeId,
        layer: usize,
        batch: usize,
        keys: Vec<Option<Arc<KeySets>>>,
    ) -> Result<(NodeId, NodeId)> {
        let w = self.layers[layer - 1];
        let tokens = tape.value(x).rows() / batch;
        let layout = AttnLayout {
            batch,
            tokens,
            heads: self.cfg.heads,
            d_model: self.cfg.d_model,
        };
        tape.set_scope(Scope::Layer(layer, Component::Qkv));
        let qkv = self.linear(tape, x, w.qkv_w, w.qkv_b)?;
        tape.set_scope(Scope::Layer(layer, Component::AttnLogits));
        let attn = tape.attention(qkv, layout, keys)?;
        tape.set_scope(Scope::Layer(layer, Component::Proj));
        let out = self.linear(tape, attn, w.proj_w, w.proj_b)?;
        Ok((out, attn))
    }

    /// Pre-norm block: `x + MHSA(LN(x))`, then `+ FFN(LN(·))`.
    pub fn encoder_layer(
        &self,
        tape: &mut Tape<F>,
        x: NodeId,
        layer: usize,
        batch: usize,
        keys: Vec<Option<Arc<KeySets>>>,
    ) -> Result<(NodeId, NodeId)> {
        let w = self.layers[layer - 1];
        let h = self.layernorm(tape, x, w.norm1_g, w.norm1_b)?;
        let (a, attn) = self.mhsa(tape, h, layer, batch, keys)?;
        let x = tape.add(x, a)?;
        let h = self.layernorm(tape, x, w.norm2_g, w.norm2_b)?;
        tape.set_scope(Scope::Layer(layer, Component::Ffn));
        let f = self.linear(tape, h, w.fc1_w, w.fc1_b)?;
        let f = tape.gelu(f);
        let f = self.linear(tape, f, w.fc2_w, w.fc2_b)?;
        tape.set_scope(Scope::Unscoped);
        Ok((tape.add(x, f)?, attn))
    }

    /// Full forward from images. `sparsity = None` is the plain dense ViT.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        images: &Tensor<F>,
        sparsity: Option<&SparsityConfig>,
        epoch: usize,
    ) -> Result<ForwardOutput> {
        let batch = images.shape()[0];
        let tokens = self.patch_embed(tape, images)?;
        self.encode(tape, tokens, batch, sparsity, epoch)
    }

    /// Encoder stack, selectors, final norm, readout and head over already
    /// embedded `[B·L × d]` tokens.
    pub fn encode(
        &self,
        tape: &mut Tape<F>,
        tokens: NodeId,
        batch: usize,
        sparsity: Option<&SparsityConfig>,
        epoch: usize,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        if let Some(s) = sparsity {
            s.validate(cfg.depth)?;
        }
        let use_cls = cfg.use_cls_token;
        let mut x = tokens;
        let mut live: Vec<Vec<usize>> = vec![(0..cfg.tokens()).collect(); batch];
        let mut keys: Vec<Option<Arc<KeySets>>> = vec![None; batch];
        let mut out = ForwardOutput {
            logits: tokens,
            batch,
            attention: Vec::with_capacity(cfg.depth),
            live: Vec::with_capacity(cfg.depth),
            masks: Vec::new(),
        };
        let is_selector = |l: usize| sparsity.is_some_and(|s| s.prune_layers.contains(&l));

        for layer in 1..=cfg.depth {
            if is_selector(layer) {
                let s = sparsity.expect("selector implies sparsity");
                let cur = live[0].len();
                let mut rows = Vec::new();
                let mut masks = Vec::with_capacity(batch);
                for b in 0..batch {
                    let rec = out.record(tape, layer - 1, b);
                    let mask = ta_select(&rec, s, epoch, use_cls)?;
                    mask.validate_against(&live[b])?;
                    for t in &mask.kept_tokens {
                        let p = live[b].binary_search(t).expect("validated");
                        rows.push(b * cur + p);
                    }
                    keys[b] = Some(Arc::new(mask.key_sets()?));
                    live[b] = mask.kept_tokens.clone();
                    masks.push(mask);
                }
                x = tape.gather_rows(x, &rows)?;
                out.masks.push(masks);
            }
            // a layer feeding a selector needs its full attention map
            let layer_keys = if is_selector(layer + 1) {
                vec![None; batch]
            } else {
                keys.clone()
            };
            out.live.push(live.clone());
            let (nx, attn) = self.encoder_layer(tape, x, layer, batch, layer_keys)?;
            x = nx;
            out.attention.push(attn);
        }

        let x = self.layernorm(tape, x, self.norm_g, self.norm_b)?;
        let pooled = if use_cls {
            let l = live[0].len();
            let rows: Vec<usize> = (0..batch).map(|b| b * l).collect();
            tape.gather_rows(x, &rows)?
        } else {
            tape.group_mean(x, batch)?
        };
        tape.set_scope(Scope::Head);
        out.logits = self.linear(tape, pooled, self.head_w, self.head_b)?;
        tape.set_scope(Scope::Unscoped);
        Ok(out)
    }
}

/// Index of the largest logit in each row (first wins on ties).
pub fn argmax_rows<F: Float>(logits: &Tensor<F>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
