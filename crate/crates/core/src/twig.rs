//! Twig block: `T` extra transformer layers plus their own prediction head
//! attached after trunk layer `K`, forming a shallow model that shares the
//! first `K` layers with the deep one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvCache;
use crate::model::{
    init_head, init_layer, AttentionMap, Fnv, Latents, LayerWeights, Logits, Model, NormParams,
};
use crate::model::{head_logits as base_head_logits, layer_forward};
use crate::rng::SplitMix64;
use crate::tensor::{FlopCount, Mat};

/// How the twig layers and head start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitStrategy {
    /// Fresh seeded weights.
    Random,
    /// Copies of the last `T` trunk layers and the trunk head.
    LastLayers,
    /// Copies of trunk layers `K+1..K+T` and the trunk head.
    LayersKtoKT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwigConfig {
    /// Trunk depth shared between the shallow and deep paths.
    pub shared_depth: usize,
    /// Number of twig layers.
    pub twig_depth: usize,
    pub init: InitStrategy,
}

impl TwigConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.twig_depth == 0 {
            return Err(Error::Config("twig_depth must be >= 1".into()));
        }
        if self.shared_depth >= num_layers {
            return Err(Error::Config(format!(
                "shared_depth {} must be below num_layers {num_layers}",
                self.shared_depth
            )));
        }
        if self.shared_depth + self.twig_depth > num_layers {
            return Err(Error::Config(format!(
                "shared_depth {} + twig_depth {} exceeds num_layers {num_layers}",
                self.shared_depth, self.twig_depth
            )));
        }
        Ok(())
    }

    /// 1-based depth of the last twig layer, counting shared trunk layers.
    pub fn shallow_depth(&self) -> usize {
        self.shared_depth + self.twig_depth
    }
}

/// Base model plus twig block. The base is never modified by attachment or
/// training; the shallow path is trunk layers `0..K`, then the twig layers,
/// then the twig's own final norm and head.
#[derive(Debug, Clone)]
pub struct TwigModel {
    base: Model,
    pub twig_layers: Vec<LayerWeights>,
    pub twig_head: Mat,
    pub twig_final_norm: NormParams,
    cfg: TwigConfig,
}

/// Attach a twig block to `base`. Copy strategies clone trunk layers along
/// with the trunk head and final norm (the head is meaningless without its
/// input normalization); `Random` draws fresh layer/head weights from `seed`
/// and starts the final norm at identity.
pub fn attach_twig(base: Model, cfg: TwigConfig, seed: u64) -> Result<TwigModel> {
    let model_cfg = base.config().clone();
    cfg.validate(model_cfg.num_layers)?;
    let k = cfg.shared_depth;
    let t = cfg.twig_depth;
    let (twig_layers, twig_head, twig_final_norm) = match cfg.init {
        InitStrategy::LayersKtoKT => (
            base.layers[k..k + t].to_vec(),
            base.head.clone(),
            base.final_norm.clone(),
        ),
        InitStrategy::LastLayers => (
            base.layers[model_cfg.num_layers - t..].to_vec(),
            base.head.clone(),
            base.final_norm.clone(),
        ),
        InitStrategy::Random => {
            let mut rng = SplitMix64::new(seed);
            let layers = (0..t).map(|_| init_layer(&mut rng, &model_cfg)).collect();
            let head = init_head(&mut rng, &model_cfg);
            (layers, head, NormParams::identity(model_cfg.hidden_dim))
        }
    };
    Ok(TwigModel { base, twig_layers, twig_head, twig_final_norm, cfg })
}

impl TwigModel {
    pub fn base(&self) -> &Model {
        &self.base
    }

    /// Assemble from raw tensors (the persistence path), validating shapes.
    pub fn from_parts(
        base: Model,
        cfg: TwigConfig,
        twig_layers: Vec<LayerWeights>,
        twig_head: Mat,
        twig_final_norm: NormParams,
    ) -> Result<TwigModel> {
        let model_cfg = base.config();
        cfg.validate(model_cfg.num_layers)?;
        let d = model_cfg.hidden_dim;
        let ok = twig_layers.len() == cfg.twig_depth
            && twig_head.rows() == d
            && twig_head.cols() == model_cfg.vocab_size
            && twig_final_norm.scale.len() == d
            && twig_final_norm.bias.len() == d;
        if !ok {
            return Err(Error::Config("twig tensor shapes do not match the base model".into()));
        }
        Ok(TwigModel { base, twig_layers, twig_head, twig_final_norm, cfg })
    }

    pub fn cfg(&self) -> &TwigConfig {
        &self.cfg
    }

    pub fn shared_depth(&self) -> usize {
        self.cfg.shared_depth
    }

    pub fn twig_depth(&self) -> usize {
        self.cfg.twig_depth
    }

    /// Fresh twig-local cache, one band per twig layer. Twig layers are
    /// indexed 0.. within their own cache, independent of trunk layers.
    pub fn new_twig_cache(&self) -> KvCache {
        KvCache::new(0, self.cfg.twig_depth, self.base.config().hidden_dim)
    }

    /// Checksum over the twig parameters only.
    pub fn twig_checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for layer in &self.twig_layers {
            h.update_layer(layer);
        }
        h.update_mat(&self.twig_head);
        h.update_norm(&self.twig_final_norm);
        h.finish()
    }

    /// Twig-path logits: `normed latents * twig head`.
    pub fn twig_head_logits(&self, x: &Latents) -> Result<Logits> {
        if x.is_empty() {
            return Err(Error::Input("twig_head_logits: empty latents".into()));
        }
        let normed = self.twig_final_norm.apply(&x.values);
        let mut scratch = FlopCount::default();
        Ok(Logits { values: normed.matmul(&self.twig_head, &mut scratch) })
    }
}

/// Run the twig layers over layer-K trunk latents, appending to the
/// twig-local cache, and return last-position logits plus (optionally) the
/// attention map of the last twig layer.
pub fn shallow_forward(
    tm: &TwigModel,
    trunk_latents: &Latents,
    twig_cache: &mut KvCache,
    capture_last_attn: bool,
    flops: &mut FlopCount,
) -> Result<(Logits, Option<AttentionMap>)> {
    let num_heads = tm.base.config().num_heads;
    let mut x = trunk_latents.clone();
    let mut last_attn = None;
    let last = tm.twig_layers.len() - 1;
    for (i, layer) in tm.twig_layers.iter().enumerate() {
        let capture = capture_last_attn && i == last;
        let out = layer_forward(layer, &x, Some(twig_cache.layer(i)), num_heads, capture, flops)?;
        twig_cache.layer_mut(i).append(&out.new_keys, &out.new_values, &x.positions)?;
        x = out.latents;
        if capture {
            last_attn = out.attn;
        }
    }
    let last_row = x.select_rows(&[x.len() - 1]);
    let logits = tm.twig_head_logits(&last_row)?;
    Ok((logits, last_attn))
}

/// Deep-path logits from the base head (used by callers that already ran the
/// trunk + deep layers themselves).
pub fn base_logits(tm: &TwigModel, x: &Latents) -> Result<Logits> {
    base_head_logits(&tm.base, x)
}
