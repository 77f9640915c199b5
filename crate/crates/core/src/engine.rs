//! Inference engine: prefill, single-token decode, plain greedy generation,
//! and the pruned two-band pipeline (full context through the first `K`
//! layers, a pruned visual context above, and an optional layer past which
//! no visual tokens survive).

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::kv::KvCache;
use crate::model::{
    embed, head_logits, layer_forward, AttentionMap, Latents, Logits, Model, ModelConfig,
    SequenceLayout, TokenId,
};
use crate::pruning::{
    aggregate_attention, make_plan, prune_latents, top_r_select, PruneConfig, PrunePlan,
};
use crate::rng::SplitMix64;
use crate::tensor::FlopCount;

/// Result of pushing latents through a band of layers.
pub struct RunOutput {
    pub latents: Latents,
    pub attn: BTreeMap<usize, AttentionMap>,
}

/// Run `x` through model layers `range`, appending each layer's new keys and
/// values to `cache` (which must cover the range). `capture` lists 0-based
/// layer indices whose attention maps are wanted. When `wipe` is
/// `Some((layer, num_visual))`, rows at visual positions (`< num_visual`)
/// are dropped before that layer runs.
pub fn run_layers(
    model: &Model,
    range: Range<usize>,
    x: &Latents,
    cache: &mut KvCache,
    capture: &[usize],
    wipe: Option<(usize, usize)>,
    flops: &mut FlopCount,
) -> Result<RunOutput> {
    let num_heads = model.config().num_heads;
    let mut latents = x.clone();
    let mut attn = BTreeMap::new();
    for i in range {
        if !cache.covers(i) {
            return Err(Error::Internal(format!("cache does not cover layer {i}")));
        }
        if let Some((wipe_layer, num_visual)) = wipe {
            if i == wipe_layer {
                let rows: Vec<usize> = latents
                    .positions
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p >= num_visual)
                    .map(|(r, _)| r)
                    .collect();
                if rows.len() < latents.len() {
                    latents = latents.select_rows(&rows);
                }
            }
        }
        let out = layer_forward(
            &model.layers[i],
            &latents,
            Some(cache.layer(i)),
            num_heads,
            capture.contains(&i),
            flops,
        )?;
        cache.layer_mut(i).append(&out.new_keys, &out.new_values, &latents.positions)?;
        if let Some(map) = out.attn {
            attn.insert(i, map);
        }
        latents = out.latents;
    }
    Ok(RunOutput { latents, attn })
}

pub struct PrefillOutput {
    pub cache: KvCache,
    pub last_logits: Logits,
    pub attn: BTreeMap<usize, AttentionMap>,
    pub flops: FlopCount,
}

/// One-shot forward over the prompt, populating a cache for every layer.
pub fn prefill(model: &Model, token_ids: &[TokenId], capture: &[usize]) -> Result<PrefillOutput> {
    let cfg = model.config();
    if token_ids.len() > cfg.max_positions {
        return Err(Error::Input(format!(
            "prompt of {} tokens exceeds max_positions {}",
            token_ids.len(),
            cfg.max_positions
        )));
    }
    let positions: Vec<usize> = (0..token_ids.len()).collect();
    let x = embed(model, token_ids, &positions)?;
    let mut cache = KvCache::new(0, cfg.num_layers, cfg.hidden_dim);
    let mut flops = FlopCount::default();
    let out = run_layers(model, 0..cfg.num_layers, &x, &mut cache, capture, None, &mut flops)?;
    let last = out.latents.select_rows(&[out.latents.len() - 1]);
    let last_logits = head_logits(model, &last)?;
    Ok(PrefillOutput { cache, last_logits, attn: out.attn, flops })
}

/// Forward one token, appending its keys/values to every layer of `cache`.
pub fn decode_step(model: &Model, cache: &mut KvCache, token: TokenId) -> Result<Logits> {
    let cfg = model.config();
    let position = cache
        .max_position()
        .ok_or_else(|| Error::Input("decode_step on an empty cache".into()))?
        + 1;
    if position >= cfg.max_positions {
        return Err(Error::Input(format!(
            "position {position} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    let x = embed(model, &[token], &[position])?;
    let mut flops = FlopCount::default();
    let out = run_layers(model, 0..cfg.num_layers, &x, cache, &[], None, &mut flops)?;
    head_logits(model, &out.latents)
}

fn check_budget(cfg: &ModelConfig, prompt_len: usize, max_s: usize) -> Result<()> {
    if max_s == 0 {
        return Err(Error::Input("max_s must be >= 1".into()));
    }
    if prompt_len + max_s > cfg.max_positions {
        return Err(Error::Input(format!(
            "prompt {prompt_len} + response budget {max_s} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    Ok(())
}

fn check_prompt(layout: &SequenceLayout, token_ids: &[TokenId]) -> Result<()> {
    if token_ids.len() != layout.total() {
        return Err(Error::Input(format!(
            "prompt length {} does not match layout total {}",
            token_ids.len(),
            layout.total()
        )));
    }
    Ok(())
}

/// Greedy decoding: repeated argmax, stopping at EOS (inclusive) or after
/// `max_s` response tokens.
pub fn greedy_generate(
    model: &Model,
    token_ids: &[TokenId],
    layout: &SequenceLayout,
    max_s: usize,
) -> Result<Vec<TokenId>> {
    Ok(greedy_generate_full(model, token_ids, layout, max_s)?.0)
}

/// [`greedy_generate`] plus the logits of the step that produced the final
/// token.
pub fn greedy_generate_full(
    model: &Model,
    token_ids: &[TokenId],
    layout: &SequenceLayout,
    max_s: usize,
) -> Result<(Vec<TokenId>, Logits)> {
    check_prompt(layout, token_ids)?;
    check_budget(model.config(), token_ids.len(), max_s)?;
    let eos = model.config().eos_id();
    let out = prefill(model, token_ids, &[])?;
    let mut cache = out.cache;
    let mut logits = out.last_logits;
    let mut tokens = vec![logits.argmax_last()];
    while tokens.len() < max_s && *tokens.last().unwrap() != eos {
        logits = decode_step(model, &mut cache, *tokens.last().unwrap())?;
        tokens.push(logits.argmax_last());
    }
    Ok((tokens, logits))
}

/// Caches and bookkeeping of a pruned-context model mid-generation.
pub struct PrunedState {
    pub(crate) trunk_cache: KvCache,
    pub(crate) deep_cache: KvCache,
    pub(crate) plan: PrunePlan,
    pub(crate) prune_cfg: PruneConfig,
    pub(crate) layout: SequenceLayout,
    pub(crate) next_position: usize,
    /// Matmul work done so far, selection pass included.
    pub(crate) flops: FlopCount,
}

impl PrunedState {
    pub fn plan(&self) -> &PrunePlan {
        &self.plan
    }

    pub fn kept_visual(&self) -> &[usize] {
        &self.plan.kept_visual_indices
    }

    pub fn flops(&self) -> FlopCount {
        self.flops
    }

    pub fn deep_cache_len(&self, layer: usize) -> usize {
        self.deep_cache.layer(layer).len()
    }

    pub fn trunk_cache_len(&self, layer: usize) -> usize {
        self.trunk_cache.layer(layer).len()
    }

    pub(crate) fn wipe_spec(&self) -> Option<(usize, usize)> {
        self.prune_cfg.final_wipe.map(|kf| (kf, self.layout.num_visual))
    }

    /// Forward one response token through the full pruned pipeline.
    pub fn decode_step(&mut self, model: &Model, token: TokenId) -> Result<Logits> {
        let cfg = model.config();
        if self.next_position >= cfg.max_positions {
            return Err(Error::Input(format!(
                "position {} exceeds max_positions {}",
                self.next_position, cfg.max_positions
            )));
        }
        let k = self.prune_cfg.prune_layer;
        let wipe = self.wipe_spec();
        let x = embed(model, &[token], &[self.next_position])?;
        let mut flops = FlopCount::default();
        let trunk = run_layers(model, 0..k, &x, &mut self.trunk_cache, &[], None, &mut flops)?;
        let deep = run_layers(
            model,
            k..cfg.num_layers,
            &trunk.latents,
            &mut self.deep_cache,
            &[],
            wipe,
            &mut flops,
        )?;
        self.flops.0 += flops.0;
        self.next_position += 1;
        head_logits(model, &deep.latents)
    }
}

/// Attention-guided pruned prefill over the base model.
///
/// Selection attention comes from layer `selection_depth` (1-based). With
/// `selection_depth == prune_layer` this is the classic prune-where-you-look
/// scheme and the instrumented FLOP count equals the closed-form per-layer
/// occupancy cost; a deeper selection layer adds an auxiliary unpruned pass
/// through layers `prune_layer..selection_depth` whose latents and cache are
/// discarded (it exists only to judge attention quality).
pub fn fastv_prefill(
    model: &Model,
    token_ids: &[TokenId],
    layout: &SequenceLayout,
    prune_cfg: &PruneConfig,
) -> Result<(PrunedState, Logits)> {
    let cfg = model.config();
    check_prompt(layout, token_ids)?;
    prune_cfg.validate(layout.num_visual, cfg.num_layers)?;
    if token_ids.len() > cfg.max_positions {
        return Err(Error::Input("prompt exceeds max_positions".into()));
    }
    let k = prune_cfg.prune_layer;
    if k >= cfg.num_layers {
        return Err(Error::Config(format!(
            "prune_layer {k} must be below num_layers {}",
            cfg.num_layers
        )));
    }
    let depth = prune_cfg.selection_depth;

    let positions: Vec<usize> = (0..token_ids.len()).collect();
    let x = embed(model, token_ids, &positions)?;
    let mut flops = FlopCount::default();

    // Trunk band 0..K over the full sequence; capture here when the
    // selection layer lies inside the trunk.
    let mut trunk_cache = KvCache::new(0, k, cfg.hidden_dim);
    let trunk_capture: Vec<usize> = if depth <= k { vec![depth - 1] } else { vec![] };
    let trunk = run_layers(model, 0..k, &x, &mut trunk_cache, &trunk_capture, None, &mut flops)?;

    let map = if depth <= k {
        trunk.attn.into_iter().next().map(|(_, m)| m)
    } else {
        // Auxiliary unpruned pass up to the selection layer; keys/values and
        // latents are evaluation-only and dropped afterwards.
        let mut scratch = KvCache::new(k, depth - k, cfg.hidden_dim);
        let aux = run_layers(
            model,
            k..depth,
            &trunk.latents,
            &mut scratch,
            &[depth - 1],
            None,
            &mut flops,
        )?;
        aux.attn.into_iter().next().map(|(_, m)| m)
    };
    let map = map.ok_or_else(|| Error::Internal("selection attention was not captured".into()))?;

    let scores = aggregate_attention(&map, layout)?;
    let kept = top_r_select(&scores, prune_cfg.retained)?;
    let pruned = prune_latents(&trunk.latents, layout, &kept);

    let mut deep_cache = KvCache::new(k, cfg.num_layers - k, cfg.hidden_dim);
    let wipe = prune_cfg.final_wipe.map(|kf| (kf, layout.num_visual));
    let deep = run_layers(
        model,
        k..cfg.num_layers,
        &pruned,
        &mut deep_cache,
        &[],
        wipe,
        &mut flops,
    )?;
    let last = deep.latents.select_rows(&[deep.latents.len() - 1]);
    let logits = head_logits(model, &last)?;

    let state = PrunedState {
        trunk_cache,
        deep_cache,
        plan: make_plan(kept, layout, prune_cfg, cfg.num_layers),
        prune_cfg: *prune_cfg,
        layout: *layout,
        next_position: token_ids.len(),
        flops,
    };
    Ok((state, logits))
}

pub struct FastvOutput {
    pub tokens: Vec<TokenId>,
    pub kept_visual: Vec<usize>,
    pub prefill_flops: FlopCount,
    /// Logits of the step that produced the final token.
    pub last_logits: Logits,
}

/// Greedy generation over the pruned model.
pub fn fastv_generate(
    model: &Model,
    token_ids: &[TokenId],
    layout: &SequenceLayout,
    prune_cfg: &PruneConfig,
    max_s: usize,
) -> Result<FastvOutput> {
    check_budget(model.config(), token_ids.len(), max_s)?;
    let eos = model.config().eos_id();
    let (mut state, mut logits) = fastv_prefill(model, token_ids, layout, prune_cfg)?;
    let prefill_flops = state.flops;
    let mut tokens = vec![logits.argmax_last()];
    while tokens.len() < max_s && *tokens.last().unwrap() != eos {
        logits = state.decode_step(model, *tokens.last().unwrap())?;
        tokens.push(logits.argmax_last());
    }
    Ok(FastvOutput {
        tokens,
        kept_visual: state.plan.kept_visual_indices.clone(),
        prefill_flops,
        last_logits: logits,
    })
}

/// Deterministic prompt for a layout: ids drawn from the seeded stream over
/// `0..vocab_size-1` (EOS excluded).
pub fn random_prompt(cfg: &ModelConfig, layout: &SequenceLayout, seed: u64) -> Vec<TokenId> {
    let mut rng = SplitMix64::new(seed);
    (0..layout.total()).map(|_| rng.next_below(cfg.vocab_size - 1)).collect()
}
