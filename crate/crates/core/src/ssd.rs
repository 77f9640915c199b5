//! Self-speculative decoding.
//!
//! The shallow path (shared trunk + twig) drafts several tokens per
//! iteration; the deep path verifies them in one batched forward pass over
//! their buffered layer-K latents, accepts the longest matching prefix, and
//! contributes one correction token (the bonus token after a full
//! acceptance). Rejected drafts are rolled back from every cache by
//! positional truncation, so committed output is token-for-token the greedy
//! decode of the pruned deep model.
//!
//! Cache discipline: the trunk band (layers `0..K`) always holds the full
//! unpruned context and serves both paths; the twig cache mirrors it above
//! layer K for the shallow path; the deep band (layers `K..L`) holds the
//! pruned prefill plus committed tokens. The most recent correction token is
//! not in any cache until the next draft phase feeds it through the trunk,
//! and its latent then rides at the front of the next verification buffer.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kv::KvCache;
use crate::model::{embed, head_logits, Latents, SequenceLayout, TokenId};
use crate::pruning::{aggregate_attention, make_plan, prune_latents, top_r_select, PruneConfig};
use crate::engine::{run_layers, PrunedState};
use crate::tensor::{softmax_row, FlopCount, Mat};
use crate::twig::{shallow_forward, TwigModel};

/// Draft policy: up to `delta` draft tokens per iteration, stopping early
/// when the draft's max softmax probability falls below `theta`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Deserialize, Serialize)]
pub struct SsdConfig {
    pub delta: usize,
    pub theta: f64,
}

impl Default for SsdConfig {
    fn default() -> Self {
        // Published defaults: five drafts per iteration, 0.6 confidence floor.
        Self { delta: 5, theta: 0.6 }
    }
}

impl SsdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta < 1 {
            return Err(Error::Config("delta must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config("theta must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One draft-then-verify round.
#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub drafted: Vec<TokenId>,
    pub accepted: usize,
    /// Target token committed after the accepted prefix; `None` when an
    /// accepted EOS ended generation inside the prefix, or the response
    /// budget cut the iteration short.
    pub correction: Option<TokenId>,
    /// Drafting stopped before the `delta` budget (confidence or EOS).
    pub early_exit: bool,
}

/// Per-iteration records plus run totals.
#[derive(Debug, Clone, Default, Serialize)]
pub struct GenerationTrace {
    pub iterations: Vec<IterationRecord>,
    /// Deep-path batched forward passes (verifications), prefill excluded.
    pub target_forwards: usize,
}

impl GenerationTrace {
    pub fn total_drafted(&self) -> usize {
        self.iterations.iter().map(|r| r.drafted.len()).sum()
    }

    pub fn total_accepted(&self) -> usize {
        self.iterations.iter().map(|r| r.accepted).sum()
    }

    pub fn total_corrections(&self) -> usize {
        self.iterations.iter().filter(|r| r.correction.is_some()).count()
    }
}

/// Raw outcome of one verification pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyOutcome {
    pub accepted: usize,
    pub correction: Option<TokenId>,
    /// Generation ended (EOS accepted or committed as correction).
    pub finished: bool,
}

/// In-flight speculative generation over one prompt.
pub struct SsdSession<'a> {
    tm: &'a TwigModel,
    pruned: PrunedState,
    twig_cache: KvCache,
    prompt_len: usize,
    committed: Vec<TokenId>,
    /// Aggregated twig attention over the visual tokens, the selection input.
    selection_scores: Vec<f64>,
    /// First draft token and its max softmax probability, produced by the
    /// prefill (or consumed when the first draft phase runs).
    initial_draft: Option<(TokenId, f64)>,
    /// Target's prediction for the first response position, from the deep
    /// prefill; verifies the initial draft.
    stored_pred: Option<TokenId>,
    /// Last committed token not yet fed through the trunk.
    unfed_committed: Option<TokenId>,
    /// Layer-K latent of the unfed committed token once fed.
    frontier_latent: Option<Latents>,
    /// Layer-K latents of pending drafts, in draft order.
    pending_latents: Vec<Latents>,
    pending_drafts: Vec<TokenId>,
    /// Deep verification passes performed.
    deep_passes: usize,
}

fn max_softmax(logits: &[f64]) -> f64 {
    let mut row = logits.to_vec();
    softmax_row(&mut row);
    row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Prefill for speculative decoding: the trunk runs once over the full
/// prompt (shared, unpruned), the twig consumes the layer-K latents to
/// produce the selection attention and the first draft token, and the deep
/// band prefills over the pruned latents.
pub fn ttp_prefill<'a>(
    tm: &'a TwigModel,
    token_ids: &[TokenId],
    layout: &SequenceLayout,
    prune_cfg: &PruneConfig,
) -> Result<SsdSession<'a>> {
    let model = tm.base();
    let cfg = model.config();
    if token_ids.len() != layout.total() {
        return Err(Error::Input(format!(
            "prompt length {} does not match layout total {}",
            token_ids.len(),
            layout.total()
        )));
    }
    prune_cfg.validate(layout.num_visual, cfg.num_layers)?;
    if prune_cfg.prune_layer != tm.shared_depth() {
        return Err(Error::Input(format!(
            "prune_layer {} must equal the shared trunk depth {}",
            prune_cfg.prune_layer,
            tm.shared_depth()
        )));
    }
    if prune_cfg.selection_depth != tm.cfg().shallow_depth() {
        return Err(Error::Input(format!(
            "twig-guided pruning requires selection_depth {} (shared + twig depth), got {}",
            tm.cfg().shallow_depth(),
            prune_cfg.selection_depth
        )));
    }
    if token_ids.len() > cfg.max_positions {
        return Err(Error::Input("prompt exceeds max_positions".into()));
    }

    let k = tm.shared_depth();
    let positions: Vec<usize> = (0..token_ids.len()).collect();
    let x = embed(model, token_ids, &positions)?;
    let mut flops = FlopCount::default();

    let mut trunk_cache = KvCache::new(0, k, cfg.hidden_dim);
    let trunk = run_layers(model, 0..k, &x, &mut trunk_cache, &[], None, &mut flops)?;

    let mut twig_cache = tm.new_twig_cache();
    let (draft_logits, attn) =
        shallow_forward(tm, &trunk.latents, &mut twig_cache, true, &mut flops)?;
    let first_draft = draft_logits.argmax_last();
    let first_prob = max_softmax(draft_logits.last());
    let attn = attn.ok_or_else(|| Error::Internal("twig attention was not captured".into()))?;

    let selection_scores = aggregate_attention(&attn, layout)?;
    let kept = top_r_select(&selection_scores, prune_cfg.retained)?;
    let pruned_latents = prune_latents(&trunk.latents, layout, &kept);

    let mut deep_cache = KvCache::new(k, cfg.num_layers - k, cfg.hidden_dim);
    let wipe = prune_cfg.final_wipe.map(|kf| (kf, layout.num_visual));
    let deep = run_layers(
        model,
        k..cfg.num_layers,
        &pruned_latents,
        &mut deep_cache,
        &[],
        wipe,
        &mut flops,
    )?;
    let last = deep.latents.select_rows(&[deep.latents.len() - 1]);
    let target_first = head_logits(model, &last)?.argmax_last();

    Ok(SsdSession {
        tm,
        pruned: PrunedState {
            trunk_cache,
            deep_cache,
            plan: make_plan(kept, layout, prune_cfg, cfg.num_layers),
            prune_cfg: *prune_cfg,
            layout: *layout,
            next_position: token_ids.len(),
            flops,
        },
        twig_cache,
        prompt_len: token_ids.len(),
        committed: Vec::new(),
        selection_scores,
        initial_draft: Some((first_draft, first_prob)),
        stored_pred: Some(target_first),
        unfed_committed: None,
        frontier_latent: None,
        pending_latents: Vec::new(),
        pending_drafts: Vec::new(),
        deep_passes: 0,
    })
}

impl<'a> SsdSession<'a> {
    pub fn committed(&self) -> &[TokenId] {
        &self.committed
    }

    pub fn kept_visual(&self) -> &[usize] {
        self.pruned.kept_visual()
    }

    pub fn deep_passes(&self) -> usize {
        self.deep_passes
    }

    pub fn flops(&self) -> FlopCount {
        self.pruned.flops
    }

    pub fn deep_cache_len(&self, layer: usize) -> usize {
        self.pruned.deep_cache_len(layer)
    }

    pub fn trunk_cache_len(&self, layer: usize) -> usize {
        self.pruned.trunk_cache_len(layer)
    }

    /// Deep-band cache contents, exposed for rollback diagnostics.
    pub fn deep_cache(&self) -> &KvCache {
        &self.pruned.deep_cache
    }

    /// Per-visual-token selection scores computed during prefill.
    pub fn selection_scores(&self) -> &[f64] {
        &self.selection_scores
    }

    fn eos(&self) -> TokenId {
        self.tm.base().config().eos_id()
    }

    /// Absolute position of the next token to feed through the trunk. The
    /// unfed committed token is counted out because it is fed at its own
    /// (already committed) position.
    fn next_position(&self) -> usize {
        self.prompt_len + self.committed.len() + self.pending_latents.len()
            - usize::from(self.unfed_committed.is_some())
    }

    /// Feed one token through the shared trunk (appending to the trunk
    /// cache) and the twig (appending to the twig cache). Returns the
    /// layer-K latent and the twig logits for the next position.
    fn feed_shallow(&mut self, token: TokenId) -> Result<(Latents, Vec<f64>)> {
        let model = self.tm.base();
        let position = self.next_position();
        if position >= model.config().max_positions {
            return Err(Error::Input("position exceeds max_positions".into()));
        }
        let x = embed(model, &[token], &[position])?;
        let mut flops = FlopCount::default();
        let k = self.tm.shared_depth();
        let trunk =
            run_layers(model, 0..k, &x, &mut self.pruned.trunk_cache, &[], None, &mut flops)?;
        let (logits, _) =
            shallow_forward(self.tm, &trunk.latents, &mut self.twig_cache, false, &mut flops)?;
        self.pruned.flops.0 += flops.0;
        Ok((trunk.latents, logits.last().to_vec()))
    }

    /// Draft up to `cfg.delta` tokens through the shallow path. After each
    /// emission, drafting stops if the max softmax probability is below
    /// `cfg.theta` or the token is EOS. Every drafted token's layer-K latent
    /// ends up buffered for verification. Returns the drafted tokens.
    pub fn draft_phase(&mut self, cfg: &SsdConfig) -> Result<Vec<TokenId>> {
        cfg.validate()?;
        if !self.pending_drafts.is_empty() {
            return Err(Error::Internal("draft_phase with unverified drafts pending".into()));
        }
        let eos = self.eos();

        // First draft of this round: either produced by the prefill, or
        // emitted while feeding the not-yet-fed committed token.
        let (mut tok, mut prob) = if let Some(first) = self.initial_draft.take() {
            first
        } else {
            let frontier = self
                .unfed_committed
                .ok_or_else(|| Error::Internal("no source for a first draft".into()))?;
            // Fed at its own committed position; cleared only afterwards so
            // the position bookkeeping sees it as unfed.
            let (latent, logits) = self.feed_shallow(frontier)?;
            self.unfed_committed = None;
            self.frontier_latent = Some(latent);
            (crate::tensor::argmax(&logits), max_softmax(&logits))
        };
        let mut drafted = vec![tok];

        while drafted.len() < cfg.delta && prob >= cfg.theta && tok != eos {
            let (latent, logits) = self.feed_shallow(tok)?;
            self.pending_latents.push(latent);
            tok = crate::tensor::argmax(&logits);
            prob = max_softmax(&logits);
            drafted.push(tok);
        }

        // The last draft was never fed; run it through the shallow path so
        // its latent is buffered and the twig cache stays hole-free. The
        // emitted logits are deliberately unused.
        let (latent, _) = self.feed_shallow(tok)?;
        self.pending_latents.push(latent);

        self.pending_drafts = drafted.clone();
        Ok(drafted)
    }

    /// Verify the pending drafts with one batched deep forward pass.
    ///
    /// The buffer holds the frontier latent (when a committed token was
    /// waiting) followed by one latent per draft; deep outputs at those
    /// positions are the target's predictions for every draft position plus
    /// the bonus position. Afterwards every cache is truncated to the
    /// position before the newly committed correction, so rejected drafts
    /// leave no residue.
    pub fn verify_phase(&mut self) -> Result<VerifyOutcome> {
        if self.pending_drafts.is_empty() {
            return Err(Error::Internal("verify_phase without pending drafts".into()));
        }
        let model = self.tm.base();
        let cfg = model.config();
        let k = self.tm.shared_depth();
        let eos = self.eos();

        // Assemble the verification buffer.
        let mut rows: Vec<Latents> = Vec::new();
        if let Some(frontier) = self.frontier_latent.take() {
            rows.push(frontier);
        }
        rows.append(&mut self.pending_latents);
        let mut values = Mat::zeros(0, 0);
        let mut positions = Vec::with_capacity(rows.len());
        for row in &rows {
            values.append_rows(&row.values);
            positions.extend_from_slice(&row.positions);
        }
        let buffer = Latents::new(values, positions)?;

        let mut flops = FlopCount::default();
        let wipe = self.pruned.wipe_spec();
        let deep = run_layers(
            model,
            k..cfg.num_layers,
            &buffer,
            &mut self.pruned.deep_cache,
            &[],
            wipe,
            &mut flops,
        )?;
        self.pruned.flops.0 += flops.0;
        self.deep_passes += 1;
        let logits = head_logits(model, &deep.latents)?;

        // Predictions aligned with the drafts: the stored prefill prediction
        // (first round) or the frontier output verifies draft 0, and each
        // draft's own output verifies the next one. The final output is the
        // bonus prediction.
        let drafts = std::mem::take(&mut self.pending_drafts);
        let mut preds = Vec::with_capacity(drafts.len() + 1);
        if let Some(p) = self.stored_pred.take() {
            preds.push(p);
        }
        for i in 0..logits.num_positions() {
            preds.push(logits.argmax_at(i));
        }
        debug_assert_eq!(preds.len(), drafts.len() + 1);

        let mut accepted = 0;
        while accepted < drafts.len() && drafts[accepted] == preds[accepted] {
            accepted += 1;
            // An accepted EOS ends generation at that EOS.
            if drafts[accepted - 1] == eos {
                self.committed.extend_from_slice(&drafts[..accepted]);
                self.rollback();
                return Ok(VerifyOutcome { accepted, correction: None, finished: true });
            }
        }
        let correction = preds[accepted];
        self.committed.extend_from_slice(&drafts[..accepted]);
        self.committed.push(correction);
        let finished = correction == eos;
        self.rollback();
        if !finished {
            self.unfed_committed = Some(correction);
        }
        Ok(VerifyOutcome { accepted, correction: Some(correction), finished })
    }

    /// Truncate all caches so only positions strictly before the last
    /// committed token remain (the last committed token has no cache entries
    /// yet; it is fed at the start of the next draft phase).
    fn rollback(&mut self) {
        let frontier_pos = self.prompt_len + self.committed.len() - 1;
        let last_kept = frontier_pos.saturating_sub(1);
        self.pruned.trunk_cache.truncate_to_position(last_kept);
        self.pruned.deep_cache.truncate_to_position(last_kept);
        self.twig_cache.truncate_to_position(last_kept);
        self.pending_latents.clear();
        self.frontier_latent = None;
    }
}

pub struct SsdOutput {
    pub tokens: Vec<TokenId>,
    pub trace: GenerationTrace,
    pub kept_visual: Vec<usize>,
    pub flops: FlopCount,
}

/// Full speculative generation loop: prefill, then draft/verify rounds until
/// an EOS is committed or `max_s` response tokens exist. The output equals
/// greedy decoding of the identical pruned deep model, token for token.
pub fn ssd_generate(
    tm: &TwigModel,
    token_ids: &[TokenId],
    layout: &SequenceLayout,
    prune_cfg: &PruneConfig,
    ssd_cfg: &SsdConfig,
    max_s: usize,
) -> Result<SsdOutput> {
    ssd_cfg.validate()?;
    if max_s == 0 {
        return Err(Error::Input("max_s must be >= 1".into()));
    }
    let cfg = tm.base().config();
    // Drafting may run up to delta tokens past the response budget.
    if token_ids.len() + max_s + ssd_cfg.delta + 1 > cfg.max_positions {
        return Err(Error::Input(format!(
            "prompt {} + budget {max_s} + draft overshoot {} exceeds max_positions {}",
            token_ids.len(),
            ssd_cfg.delta + 1,
            cfg.max_positions
        )));
    }

    let mut session = ttp_prefill(tm, token_ids, layout, prune_cfg)?;
    let mut trace = GenerationTrace::default();
    let mut iter = 0;
    loop {
        let before = session.committed.len();
        let drafted = session.draft_phase(ssd_cfg)?;
        let early_exit = drafted.len() < ssd_cfg.delta;
        let outcome = session.verify_phase()?;

        // Clamp the record to the response budget.
        let room = max_s - before;
        let committed_now = session.committed.len() - before;
        let (accepted, correction, done) = if committed_now >= room {
            session.committed.truncate(max_s);
            let kept = room;
            if kept > outcome.accepted {
                (outcome.accepted, outcome.correction, true)
            } else {
                (kept, None, true)
            }
        } else {
            (outcome.accepted, outcome.correction, outcome.finished)
        };
        trace.iterations.push(IterationRecord {
            iter,
            drafted,
            accepted,
            correction,
            early_exit,
        });
        iter += 1;
        if done {
            break;
        }
    }
    trace.target_forwards = session.deep_passes();
    Ok(SsdOutput {
        tokens: session.committed().to_vec(),
        kept_visual: session.kept_visual().to_vec(),
        flops: session.flops(),
        trace,
    })
}

/// Greedy decoding of the pruned deep model with twig-guided selection: the
/// same pruned target the speculative loop verifies against, decoded
/// straight-line with no drafting, verification, or rollback.
pub fn target_greedy_generate(
    tm: &TwigModel,
    token_ids: &[TokenId],
    layout: &SequenceLayout,
    prune_cfg: &PruneConfig,
    max_s: usize,
) -> Result<Vec<TokenId>> {
    if max_s == 0 {
        return Err(Error::Input("max_s must be >= 1".into()));
    }
    let model = tm.base();
    let cfg = model.config();
    if token_ids.len() + max_s > cfg.max_positions {
        return Err(Error::Input("prompt + budget exceeds max_positions".into()));
    }
    let session = ttp_prefill(tm, token_ids, layout, prune_cfg)?;
    let eos = cfg.eos_id();
    let mut state = session.pruned;
    if state.deep_cache.layer(tm.shared_depth()).max_position() != Some(token_ids.len() - 1) {
        return Err(Error::Internal("deep cache does not end at the prompt".into()));
    }

    // Recover the target's first token from the prefill logits path.
    let mut tokens = vec![session
        .stored_pred
        .ok_or_else(|| Error::Internal("prefill produced no target prediction".into()))?];
    while tokens.len() < max_s && *tokens.last().unwrap() != eos {
        let logits = state.decode_step(model, *tokens.last().unwrap())?;
        tokens.push(logits.argmax_last());
    }
    Ok(tokens)
}
