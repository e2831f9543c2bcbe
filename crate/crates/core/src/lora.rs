//! Low-rank adapters on the attention query and value projections.
//!
//! An adapter for a layer with weight `W ∈ R^{d×k}` holds a Gaussian
//! down-projection `A ∈ R^{d×r}` and a zero-initialised up-projection
//! `B ∈ R^{r×k}`. The adapted layer computes `h = xW + b + s·(xA)B`, so at
//! creation the output is exactly that of the base layer. Adapters are kept
//! in their own parameter store beside the base weights: freezing, merging
//! and reinitialising are structural operations on the model.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::{LinearLayer, SegModel};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{kernels, Graph, ParamStore, Tensor, Var};

/// Standard deviation of the Gaussian draw for `A`.
pub const INIT_STD: f64 = 0.02;

/// Stream ids for adapter initialisation start here; reinitialisation
/// cycle `n` uses `LORA_STREAM_BASE + n`.
const LORA_STREAM_BASE: u64 = 1_000;

/// Layers that receive adapters.
pub fn is_target(layer_name: &str) -> bool {
    layer_name.ends_with(".attn.q") || layer_name.ends_with(".attn.v")
}

/// Shape record of one adapter. The factors live in the owning
/// [`AdapterSet`]'s store as `lora.<target>.A` and `lora.<target>.B`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoraAdapter {
    pub target: String,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl LoraAdapter {
    pub fn a_name(&self) -> String {
        format!("lora.{}.A", self.target)
    }

    pub fn b_name(&self) -> String {
        format!("lora.{}.B", self.target)
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in + self.d_out)
    }
}

/// One adapter per targeted projection of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<S> {
    adapters: IndexMap<String, LoraAdapter>,
    params: ParamStore<S>,
    rank: usize,
    scaling: f64,
    merged: bool,
}

impl<S: Scalar> AdapterSet<S> {
    /// Creates adapters for every query/value projection of `model` without
    /// attaching them.
    pub fn for_model(model: &SegModel<S>, rank: usize, seed: u64) -> Result<Self> {
        Self::build(model, rank, 1.0, seed, 0)
    }

    fn build(model: &SegModel<S>, rank: usize, scaling: f64, seed: u64, cycle: u64) -> Result<Self> {
        let targets: Vec<&LinearLayer> = model.linear_layers().into_iter().filter(|l| is_target(&l.name)).collect();
        if rank == 0 {
            return Err(Error::Contract("LoRA rank must be at least 1".into()));
        }
        let mut rng = SeededRng::with_stream_id(seed, LORA_STREAM_BASE + cycle);
        let mut adapters = IndexMap::new();
        let mut params = ParamStore::new();
        for l in targets {
            if rank > l.d_in.min(l.d_out) {
                return Err(Error::Contract(format!(
                    "LoRA rank {rank} exceeds min({}, {}) of {}",
                    l.d_in, l.d_out, l.name
                )));
            }
            let ad = LoraAdapter {
                target: l.name.clone(),
                rank,
                d_in: l.d_in,
                d_out: l.d_out,
            };
            let a: Vec<S> = (0..l.d_in * rank).map(|_| S::of(rng.normal(0.0, INIT_STD))).collect();
            params.insert(ad.a_name(), Tensor::new(&[l.d_in, rank], a)?.with_grad(true))?;
            params.insert(ad.b_name(), Tensor::zeros(&[rank, l.d_out])?.with_grad(true))?;
            adapters.insert(l.name.clone(), ad);
        }
        Ok(Self {
            adapters,
            params,
            rank,
            scaling,
            merged: false,
        })
    }

    /// Rebuilds a set from stored factors (checkpoint loading).
    pub fn from_params(model: &SegModel<S>, rank: usize, scaling: f64, params: ParamStore<S>) -> Result<Self> {
        let mut adapters = IndexMap::new();
        for l in model.linear_layers().into_iter().filter(|l| is_target(&l.name)) {
            let ad = LoraAdapter {
                target: l.name.clone(),
                rank,
                d_in: l.d_in,
                d_out: l.d_out,
            };
            let a = params.get(&ad.a_name())?;
            let b = params.get(&ad.b_name())?;
            if a.shape() != [l.d_in, rank] || b.shape() != [rank, l.d_out] {
                return Err(Error::dim("adapter factors", a.shape(), b.shape()));
            }
            adapters.insert(l.name.clone(), ad);
        }
        if params.len() != 2 * adapters.len() {
            return Err(Error::Contract("adapter store holds tensors for untargeted layers".into()));
        }
        Ok(Self {
            adapters,
            params,
            rank,
            scaling,
            merged: false,
        })
    }

    pub fn with_scaling(mut self, s: f64) -> Self {
        self.scaling = s;
        self
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn get(&self, target: &str) -> Option<&LoraAdapter> {
        self.adapters.get(target)
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.values()
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn is_trainable(&self) -> bool {
        self.params.iter().any(|(_, t)| t.requires_grad())
    }

    /// Dense `s·A·B` for one adapter, shaped like the target weight.
    pub fn delta(&self, target: &str) -> Result<Vec<S>> {
        let ad = self
            .adapters
            .get(target)
            .ok_or_else(|| Error::Contract(format!("no adapter on {target}")))?;
        let a = self.params.get(&ad.a_name())?;
        let b = self.params.get(&ad.b_name())?;
        let mut d = kernels::matmul(a.data(), b.data(), ad.d_in, ad.rank, ad.d_out);
        let s = S::of(self.scaling);
        d.iter_mut().for_each(|v| *v *= s);
        Ok(d)
    }

    pub fn cast<T: Scalar>(&self) -> AdapterSet<T> {
        AdapterSet {
            adapters: self.adapters.clone(),
            params: self.params.cast(),
            rank: self.rank,
            scaling: self.scaling,
            merged: self.merged,
        }
    }
}

/// Applies a linear layer, adding the low-rank path when `adapters` holds
/// one for it. Without an adapter this is the plain affine map.
pub fn lora_forward<S: Scalar>(
    g: &mut Graph<S>,
    base: &ParamStore<S>,
    layer: &LinearLayer,
    adapters: Option<&AdapterSet<S>>,
    x: Var,
) -> Result<Var> {
    let w_name = layer.weight_name();
    let b_name = layer.bias_name();
    let w = g.param(&w_name, base.get(&w_name)?);
    let b = g.param(&b_name, base.get(&b_name)?);
    let h = g.matmul(x, w)?;
    let h = g.add_tiled(h, b)?;
    let Some((set, ad)) = adapters.and_then(|s| s.get(&layer.name).map(|a| (s, a))) else {
        return Ok(h);
    };
    let a_name = ad.a_name();
    let b_name = ad.b_name();
    let a = g.param(&a_name, set.params.get(&a_name)?);
    let up = g.param(&b_name, set.params.get(&b_name)?);
    let down = g.matmul(x, a)?;
    let mut delta = g.matmul(down, up)?;
    if set.scaling != 1.0 {
        delta = g.scale(delta, S::of(set.scaling));
    }
    g.add(h, delta)
}

/// Creates adapters on every query/value projection, attaches them and
/// freezes the encoder. The decoder keeps its trainability.
pub fn create_adapters<S: Scalar>(model: &mut SegModel<S>, rank: usize, seed: u64) -> Result<&AdapterSet<S>> {
    let set = AdapterSet::for_model(model, rank, seed)?;
    attach(model, set)?;
    Ok(model.adapters().expect("just attached"))
}

/// Attaches an existing set and freezes the encoder.
pub fn attach<S: Scalar>(model: &mut SegModel<S>, set: AdapterSet<S>) -> Result<()> {
    if set.merged {
        return Err(Error::Contract("adapter set was already merged".into()));
    }
    if model.adapters().is_some() {
        return Err(Error::Contract("model already has adapters attached".into()));
    }
    model.freeze_encoder();
    model.set_adapters(Some(set));
    Ok(())
}

/// Folds every adapter into its base weight (`W ← W + s·A·B`) and detaches
/// the set, which is returned marked as merged.
pub fn merge<S: Scalar>(model: &mut SegModel<S>) -> Result<AdapterSet<S>> {
    let Some(mut set) = model.take_adapters() else {
        return Err(Error::Contract("no adapters attached; the set was already merged".into()));
    };
    let targets: Vec<String> = set.adapters.keys().cloned().collect();
    for target in targets {
        let delta = set.delta(&target)?;
        let w = model.params_mut().get_mut(&format!("{target}.weight"))?;
        w.data_mut().iter_mut().zip(delta).for_each(|(p, d)| *p += d);
    }
    set.merged = true;
    Ok(set)
}

/// Merges the current adapters into the base weights and attaches a fresh
/// set (Gaussian `A`, zero `B`) of the same rank and scaling.
///
/// `cycle` selects an independent random stream so successive
/// reinitialisations draw different factors.
pub fn reinit<S: Scalar>(model: &mut SegModel<S>, seed: u64, cycle: u64) -> Result<()> {
    let old = merge(model)?;
    let fresh = AdapterSet::build(model, old.rank, old.scaling, seed, cycle)?;
    let trainable = old.is_trainable();
    model.set_adapters(Some(fresh));
    if !trainable {
        if let Some(set) = model.adapters_mut() {
            set.params_mut().iter_mut().for_each(|(_, t)| t.set_requires_grad(false));
        }
    }
    Ok(())
}

/// `Σ r·(d + k)` over the set.
pub fn lora_param_count<S: Scalar>(set: &AdapterSet<S>) -> usize {
    set.adapters.values().map(LoraAdapter::param_count).sum()
}
