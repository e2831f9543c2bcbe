//! Desk-scale ViT segmentation network.
//!
//! Pre-norm transformer encoder over non-overlapping patches, followed by a
//! single 1×1 convolution (a per-patch linear classifier) whose logits are
//! upsampled to the pixel grid by nearest-neighbour repetition.
//!
//! Parameters live in one [`ParamStore`] under dotted names
//! (`block3.attn.q.weight`, `decoder.classifier.bias`, ...). Linear weights
//! are stored `[d_in, d_out]` so a layer computes `x·W + b` on row vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{self, AdapterSet};
use crate::rng::{SeededRng, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const DECODER: &str = "decoder.classifier";
const INIT_POS_STD: f64 = 0.02;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: usize,
    /// Current classifier width, background included.
    pub num_classes: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            num_heads: 4,
            num_layers: 4,
            mlp_ratio: 2,
            num_classes: 6,
        }
    }
}

pub const IN_CHANNELS: usize = 3;

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("model.{field}: {why}")));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad("image_size", "must be a positive multiple of patch_size");
        }
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return bad("embed_dim", "must be a positive multiple of num_heads");
        }
        if self.num_classes == 0 {
            return bad("num_classes", "must be at least 1");
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio", "must be at least 1");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        IN_CHANNELS * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// A named affine projection. Its weight and bias live in the model's
/// parameter store under `<name>.weight` and `<name>.bias`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearLayer {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearLayer {
    fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self {
            name: name.into(),
            d_in,
            d_out,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    prefix: String,
    q: LinearLayer,
    k: LinearLayer,
    v: LinearLayer,
    o: LinearLayer,
    fc1: LinearLayer,
    fc2: LinearLayer,
}

/// Whether MACs are counted for inference or for a training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    /// Forward plus two backward passes of equal cost.
    Training,
}

/// The segmentation network, its parameters and (optionally) the low-rank
/// adapters attached to it.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel<S> {
    spec: ModelSpec,
    params: ParamStore<S>,
    patch_embed: LinearLayer,
    blocks: Vec<Block>,
    decoder: LinearLayer,
    lora: Option<AdapterSet<S>>,
}

impl<S: Scalar> SegModel<S> {
    /// Builds a randomly initialised model. Linear weights are drawn from
    /// `N(0, 1/d_in)`, the positional table from `N(0, 0.02²)`, norms start
    /// at identity and the classifier at zero. Every parameter is trainable.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let d = spec.embed_dim;
        let mut rng = SeededRng::new(seed, Stream::Init);
        let mut params = ParamStore::new();

        let patch_embed = LinearLayer::new("patch_embed", spec.patch_dim(), d);
        add_linear(&mut params, &patch_embed, &mut rng)?;
        let pos: Vec<S> = (0..spec.tokens() * d)
            .map(|_| S::of(rng.normal(0.0, INIT_POS_STD)))
            .collect();
        params.insert("pos_embed", Tensor::new(&[spec.tokens(), d], pos)?)?;

        let mut blocks = Vec::with_capacity(spec.num_layers);
        for i in 0..spec.num_layers {
            let prefix = format!("block{i}");
            add_norm(&mut params, &format!("{prefix}.ln1"), d)?;
            let lin = |n: &str, a, b| LinearLayer::new(format!("{prefix}.{n}"), a, b);
            let block = Block {
                q: lin("attn.q", d, d),
                k: lin("attn.k", d, d),
                v: lin("attn.v", d, d),
                o: lin("attn.o", d, d),
                fc1: lin("mlp.fc1", d, spec.hidden_dim()),
                fc2: lin("mlp.fc2", spec.hidden_dim(), d),
                prefix: prefix.clone(),
            };
            for l in [&block.q, &block.k, &block.v, &block.o] {
                add_linear(&mut params, l, &mut rng)?;
            }
            add_norm(&mut params, &format!("{prefix}.ln2"), d)?;
            add_linear(&mut params, &block.fc1, &mut rng)?;
            add_linear(&mut params, &block.fc2, &mut rng)?;
            blocks.push(block);
        }
        add_norm(&mut params, "norm", d)?;

        let decoder = LinearLayer::new(DECODER, d, spec.num_classes);
        params.insert(decoder.weight_name(), Tensor::zeros(&[d, spec.num_classes])?)?;
        params.insert(decoder.bias_name(), Tensor::zeros(&[spec.num_classes])?)?;

        for (_, t) in params.iter_mut() {
            t.set_requires_grad(true);
        }
        Ok(Self {
            spec,
            params,
            patch_embed,
            blocks,
            decoder,
            lora: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn adapters(&self) -> Option<&AdapterSet<S>> {
        self.lora.as_ref()
    }

    pub fn adapters_mut(&mut self) -> Option<&mut AdapterSet<S>> {
        self.lora.as_mut()
    }

    /// Base and adapter stores borrowed together, for optimiser steps.
    pub fn stores_mut(&mut self) -> Vec<&mut ParamStore<S>> {
        let mut out = vec![&mut self.params];
        if let Some(set) = self.lora.as_mut() {
            out.push(set.params_mut());
        }
        out
    }

    pub(crate) fn set_adapters(&mut self, set: Option<AdapterSet<S>>) {
        self.lora = set;
    }

    pub(crate) fn take_adapters(&mut self) -> Option<AdapterSet<S>> {
        self.lora.take()
    }

    /// Every linear layer, encoder first, decoder last.
    pub fn linear_layers(&self) -> Vec<&LinearLayer> {
        let mut out = vec![&self.patch_embed];
        for b in &self.blocks {
            out.extend([&b.q, &b.k, &b.v, &b.o, &b.fc1, &b.fc2]);
        }
        out.push(&self.decoder);
        out
    }

    pub fn layer(&self, name: &str) -> Option<&LinearLayer> {
        self.linear_layers().into_iter().find(|l| l.name == name)
    }

    pub fn decoder(&self) -> &LinearLayer {
        &self.decoder
    }

    pub fn is_decoder_param(name: &str) -> bool {
        name.starts_with("decoder.")
    }

    /// Sets trainability of every base parameter from a predicate on its name.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, t) in self.params.iter_mut() {
            t.set_requires_grad(pred(name));
        }
    }

    pub fn freeze_encoder(&mut self) {
        self.set_trainable(Self::is_decoder_param);
    }

    /// Sets every base and adapter parameter trainable or frozen.
    pub fn set_all_trainable(&mut self, on: bool) {
        self.set_trainable(|_| on);
        if let Some(set) = self.lora.as_mut() {
            for (_, t) in set.params_mut().iter_mut() {
                t.set_requires_grad(on);
            }
        }
    }

    /// Names of trainable parameters, adapters included.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .params
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, _)| n.to_string())
            .collect();
        if let Some(set) = &self.lora {
            out.extend(
                set.params()
                    .iter()
                    .filter(|(_, t)| t.requires_grad())
                    .map(|(n, _)| n.to_string()),
            );
        }
        out
    }

    fn linear(&self, g: &mut Graph<S>, layer: &LinearLayer, x: Var) -> Result<Var> {
        lora::lora_forward(g, &self.params, layer, self.lora.as_ref(), x)
    }

    fn norm(&self, g: &mut Graph<S>, prefix: &str, x: Var) -> Result<Var> {
        let gamma = g.param(&format!("{prefix}.gamma"), self.params.get(&format!("{prefix}.gamma"))?);
        let beta = g.param(&format!("{prefix}.beta"), self.params.get(&format!("{prefix}.beta"))?);
        g.layer_norm(x, gamma, beta)
    }

    /// Per-patch class logits `[batch·tokens, num_classes]`.
    pub fn forward_patches(&self, g: &mut Graph<S>, images: &Tensor<S>) -> Result<Var> {
        let batch = self.check_images(images)?;
        let rows = patchify(images, &self.spec);
        let x = g.constant(&[batch * self.spec.tokens(), self.spec.patch_dim()], rows)?;
        let mut h = self.linear(g, &self.patch_embed, x)?;
        let pos = g.param("pos_embed", self.params.get("pos_embed")?);
        h = g.add_tiled(h, pos)?;
        for b in &self.blocks {
            let n1 = self.norm(g, &format!("{}.ln1", b.prefix), h)?;
            let q = self.linear(g, &b.q, n1)?;
            let k = self.linear(g, &b.k, n1)?;
            let v = self.linear(g, &b.v, n1)?;
            let a = g.attention(q, k, v, batch, self.spec.num_heads)?;
            let a = self.linear(g, &b.o, a)?;
            h = g.add(h, a)?;
            let n2 = self.norm(g, &format!("{}.ln2", b.prefix), h)?;
            let f = self.linear(g, &b.fc1, n2)?;
            let f = g.gelu(f);
            let f = self.linear(g, &b.fc2, f)?;
            h = g.add(h, f)?;
        }
        let h = self.norm(g, "norm", h)?;
        self.linear(g, &self.decoder, h)
    }

    /// Pixel logits `[B, num_classes, H, W]` for images `[B, 3, H, W]`.
    pub fn forward_segmentation(&self, g: &mut Graph<S>, images: &Tensor<S>) -> Result<Var> {
        let batch = self.check_images(images)?;
        let patches = self.forward_patches(g, images)?;
        g.upsample_nearest(patches, batch, self.spec.grid(), self.spec.patch_size)
    }

    /// Convenience inference pass returning pixel logits as a tensor.
    pub fn logits(&self, images: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::inference();
        let out = self.forward_segmentation(&mut g, images)?;
        g.to_tensor(out)
    }

    /// Arg-max labels `[B·H·W]` (row-major per image).
    pub fn predict(&self, images: &Tensor<S>) -> Result<Vec<u8>> {
        let mut g = Graph::inference();
        let patches = self.forward_patches(&mut g, images)?;
        let c = self.spec.num_classes;
        let patch_labels: Vec<u8> = g
            .value(patches)
            .chunks(c)
            .map(|row| argmax(row) as u8)
            .collect();
        let (grid, p, side) = (self.spec.grid(), self.spec.patch_size, self.spec.image_size);
        let batch = images.shape()[0];
        let mut out = vec![0u8; batch * side * side];
        for b in 0..batch {
            for y in 0..side {
                for x in 0..side {
                    out[(b * side + y) * side + x] = patch_labels[b * grid * grid + (y / p) * grid + x / p];
                }
            }
        }
        Ok(out)
    }

    fn check_images(&self, images: &Tensor<S>) -> Result<usize> {
        let s = images.shape();
        let side = self.spec.image_size;
        if s.len() != 4 || s[1] != IN_CHANNELS || s[2] != side || s[3] != side {
            return Err(Error::dim("forward_segmentation", s, &[0, IN_CHANNELS, side, side]));
        }
        Ok(s[0])
    }

    /// Adds `new_class_count` zero-initialised output channels to the
    /// classifier. Existing channels are copied bit for bit.
    pub fn extend_classifier(&mut self, new_class_count: usize) -> Result<()> {
        if new_class_count == 0 {
            return Err(Error::Contract("extend_classifier needs at least one new class".into()));
        }
        let d = self.spec.embed_dim;
        let old = self.spec.num_classes;
        let new = old + new_class_count;
        let w = self.params.get_mut(&self.decoder.weight_name())?;
        let mut data = Vec::with_capacity(d * new);
        for row in w.data().chunks(old) {
            data.extend_from_slice(row);
            data.extend(std::iter::repeat(S::zero()).take(new_class_count));
        }
        w.replace(&[d, new], data)?;
        let b = self.params.get_mut(&self.decoder.bias_name())?;
        let mut data = b.data().to_vec();
        data.resize(new, S::zero());
        b.replace(&[new], data)?;
        self.spec.num_classes = new;
        self.decoder.d_out = new;
        Ok(())
    }

    /// Exact parameter count from the layer structure.
    ///
    /// With `trainable_only`, only groups whose tensors are trainable are
    /// counted; attached adapters count as trainable when their factors are.
    pub fn count_params(&self, trainable_only: bool) -> usize {
        let d = self.spec.embed_dim;
        let mut groups: Vec<(String, usize)> = Vec::new();
        for l in self.linear_layers() {
            groups.push((l.weight_name(), l.d_in * l.d_out));
            groups.push((l.bias_name(), l.d_out));
        }
        groups.push(("pos_embed".into(), self.spec.tokens() * d));
        let mut norms: Vec<String> = self
            .blocks
            .iter()
            .flat_map(|b| [format!("{}.ln1", b.prefix), format!("{}.ln2", b.prefix)])
            .collect();
        norms.push("norm".into());
        for n in norms {
            groups.push((format!("{n}.gamma"), d));
            groups.push((format!("{n}.beta"), d));
        }
        let base: usize = groups
            .iter()
            .filter(|(name, _)| {
                !trainable_only || self.params.get(name).map(|t| t.requires_grad()).unwrap_or(false)
            })
            .map(|(_, n)| n)
            .sum();
        let adapters = match &self.lora {
            Some(set) if !trainable_only || set.is_trainable() => lora::lora_param_count(set),
            _ => 0,
        };
        base + adapters
    }

    /// Analytic multiply–accumulate count for `batch` images.
    pub fn count_macs(&self, batch: usize, phase: Phase) -> u64 {
        let rank = self.lora.as_ref().map(|s| s.rank());
        let per_image = forward_macs_per_image(&self.spec, rank);
        let fwd = per_image * batch as u64;
        match phase {
            Phase::Forward => fwd,
            Phase::Training => 3 * fwd,
        }
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<T: Scalar>(&self) -> SegModel<T> {
        SegModel {
            spec: self.spec,
            params: self.params.cast(),
            patch_embed: self.patch_embed.clone(),
            blocks: self.blocks.clone(),
            decoder: self.decoder.clone(),
            lora: self.lora.as_ref().map(AdapterSet::cast),
        }
    }
}

/// MACs of one linear layer applied to `tokens` rows.
pub fn linear_macs(tokens: usize, d_in: usize, d_out: usize) -> u64 {
    (tokens * d_in * d_out) as u64
}

/// Forward MACs for one image. `lora_rank` adds the adapter path on the
/// query and value projections of every block.
pub fn forward_macs_per_image(spec: &ModelSpec, lora_rank: Option<usize>) -> u64 {
    let n = spec.tokens();
    let d = spec.embed_dim;
    let mut macs = linear_macs(n, spec.patch_dim(), d);
    let per_block = 4 * linear_macs(n, d, d)
        // QKᵀ and attention-weighted sum of V, over all heads.
        + 2 * (n * n * d) as u64
        + linear_macs(n, d, spec.hidden_dim())
        + linear_macs(n, spec.hidden_dim(), d)
        + lora_rank.map_or(0, |r| 2 * (linear_macs(n, d, r) + linear_macs(n, r, d)));
    macs += per_block * spec.num_layers as u64;
    macs + linear_macs(n, d, spec.num_classes)
}

fn add_linear<S: Scalar>(store: &mut ParamStore<S>, l: &LinearLayer, rng: &mut SeededRng) -> Result<()> {
    let std = (1.0 / l.d_in as f64).sqrt();
    let w: Vec<S> = (0..l.d_in * l.d_out).map(|_| S::of(rng.normal(0.0, std))).collect();
    store.insert(l.weight_name(), Tensor::new(&[l.d_in, l.d_out], w)?)?;
    store.insert(l.bias_name(), Tensor::zeros(&[l.d_out])?)
}

fn add_norm<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::new(&[d], vec![S::one(); d])?)?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[d])?)
}

/// Rearranges `[B, 3, H, W]` images into `[B·tokens, 3·p·p]` patch rows,
/// channel-major within a patch.
pub fn patchify<S: Scalar>(images: &Tensor<S>, spec: &ModelSpec) -> Vec<S> {
    let (batch, side, p, grid) = (images.shape()[0], spec.image_size, spec.patch_size, spec.grid());
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..batch {
        for gy in 0..grid {
            for gx in 0..grid {
                for c in 0..IN_CHANNELS {
                    for py in 0..p {
                        let row = ((b * IN_CHANNELS + c) * side + gy * p + py) * side + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
