//! Attention-score aggregation, top-R visual-token selection, sequence
//! pruning, and the retained-token arithmetic used to compare pruning ratios.
//!
//! The budget math works in exact integers: `round_half_up(a / b)` is
//! `(2a + b) / 2b` in integer arithmetic, so the published setting tables
//! reproduce without any float rounding concerns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionMap, Latents, SequenceLayout};

/// Token pruning plan: prune to `retained` visual tokens at layer
/// `prune_layer`, optionally drop all visual tokens entering `final_wipe`,
/// with selection guided by the attention map of layer `selection_depth`
/// (1-based depth; the twig-guided path uses `prune_layer + twig_depth`,
/// the attention-at-K baseline uses `prune_layer`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub prune_layer: usize,
    pub retained: usize,
    pub final_wipe: Option<usize>,
    pub selection_depth: usize,
}

impl PruneConfig {
    pub fn validate(&self, num_visual: usize, num_layers: usize) -> Result<()> {
        if self.retained > num_visual {
            return Err(Error::Config(format!(
                "retained {} exceeds visual token count {num_visual}",
                self.retained
            )));
        }
        if let Some(kf) = self.final_wipe {
            if kf <= self.prune_layer || kf > num_layers {
                return Err(Error::Config(format!(
                    "final_wipe {kf} must satisfy prune_layer < final_wipe <= num_layers"
                )));
            }
        }
        if self.selection_depth < self.prune_layer.max(1) || self.selection_depth > num_layers {
            return Err(Error::Config(format!(
                "selection_depth {} outside [max(prune_layer,1), num_layers]",
                self.selection_depth
            )));
        }
        Ok(())
    }
}

/// Result of planning one prune: which visual tokens survive and how many
/// (visual, text) tokens each layer processes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrunePlan {
    /// Ascending indices into `0..num_visual`.
    pub kept_visual_indices: Vec<usize>,
    pub per_layer_occupancy: Vec<(usize, usize)>,
}

/// Mean over heads of the summed attention from all textual query rows to
/// each visual key. Output has one score per visual token.
pub fn aggregate_attention(map: &AttentionMap, layout: &SequenceLayout) -> Result<Vec<f64>> {
    let m = layout.num_visual;
    let text_range = m..layout.total();

    let mut visual_cols = vec![None; m];
    for (col, &pos) in map.key_positions.iter().enumerate() {
        if pos < m {
            visual_cols[pos] = Some(col);
        }
    }
    let mut text_rows = Vec::with_capacity(layout.num_text);
    for (row, &pos) in map.query_positions.iter().enumerate() {
        if text_range.contains(&pos) {
            text_rows.push(row);
        }
    }
    if text_rows.len() != layout.num_text || visual_cols.iter().any(Option::is_none) {
        return Err(Error::Input("attention map does not cover the prompt layout".into()));
    }

    let num_heads = map.num_heads() as f64;
    let mut scores = vec![0.0; m];
    for head in &map.probs {
        for &row in &text_rows {
            for (v, col) in visual_cols.iter().enumerate() {
                scores[v] += head.at(row, col.unwrap());
            }
        }
    }
    for s in &mut scores {
        *s /= num_heads;
    }
    Ok(scores)
}

/// Indices of the `r` largest scores, ties broken toward the lower index,
/// returned in ascending order.
pub fn top_r_select(scores: &[f64], r: usize) -> Result<Vec<usize>> {
    if r > scores.len() {
        return Err(Error::Input(format!("r={r} exceeds {} scores", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..r].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Keep the selected visual rows (original order) and every non-visual row.
/// Positions keep their original absolute indices; returns the pruned
/// latents together with the kept visual indices.
pub fn prune_sequence(
    x: &Latents,
    map: &AttentionMap,
    layout: &SequenceLayout,
    r: usize,
) -> Result<(Latents, Vec<usize>)> {
    let scores = aggregate_attention(map, layout)?;
    let kept = top_r_select(&scores, r)?;
    Ok((prune_latents(x, layout, &kept), kept))
}

/// Row filter behind [`prune_sequence`], reusable once the kept set is known.
pub fn prune_latents(x: &Latents, layout: &SequenceLayout, kept_visual: &[usize]) -> Latents {
    let mut rows: Vec<usize> = Vec::with_capacity(x.len());
    for (row, &pos) in x.positions.iter().enumerate() {
        if layout.is_visual(pos) {
            if kept_visual.binary_search(&pos).is_ok() {
                rows.push(row);
            }
        } else {
            rows.push(row);
        }
    }
    x.select_rows(&rows)
}

fn round_half_up(numerator: usize, denominator: usize) -> usize {
    (2 * numerator + denominator) / (2 * denominator)
}

/// Layer-averaged visual token count for a single-stage prune: keep `m`
/// visual tokens through `k` layers and `r` through the remaining `l - k`,
/// rounded half-up.
pub fn avg_retained(m: usize, k: usize, r: usize, l: usize) -> usize {
    round_half_up(m * k + r * (l - k), l)
}

/// Layer-averaged visual token count when all visual tokens are dropped
/// after layer `k_f`.
pub fn avg_retained_finalwipe(m: usize, k: usize, r: usize, k_f: usize, l: usize) -> Result<usize> {
    if k_f <= k {
        return Err(Error::Input(format!("k_f={k_f} must exceed k={k}")));
    }
    Ok(round_half_up(m * k + r * (k_f - k), l))
}

/// Invert [`avg_retained_finalwipe`]: the retained count `r` whose layer
/// average rounds to `target_rbar`. Errors when no `0 <= r <= m` does.
pub fn solve_r(target_rbar: usize, m: usize, k: usize, k_f: usize, l: usize) -> Result<usize> {
    if k_f <= k {
        return Err(Error::Input(format!("k_f={k_f} must exceed k={k}")));
    }
    let scaled = target_rbar * l;
    if scaled < m * k {
        return Err(Error::Domain(format!(
            "target average {target_rbar} below the floor set by m={m}, k={k}"
        )));
    }
    let r = round_half_up(scaled - m * k, k_f - k);
    if r > m {
        return Err(Error::Domain(format!("target average {target_rbar} needs r={r} > m={m}")));
    }
    if avg_retained_finalwipe(m, k, r, k_f, l)? != target_rbar {
        return Err(Error::Domain(format!(
            "no retained count reproduces average {target_rbar} exactly"
        )));
    }
    Ok(r)
}

/// Per-layer (visual, text) token counts for a prune plan over `l` layers.
pub fn layer_occupancy(
    num_visual: usize,
    num_text: usize,
    cfg: &PruneConfig,
    l: usize,
) -> Vec<(usize, usize)> {
    let wipe = cfg.final_wipe.unwrap_or(l);
    (0..l)
        .map(|i| {
            let visual = if i < cfg.prune_layer {
                num_visual
            } else if i < wipe {
                cfg.retained
            } else {
                0
            };
            (visual, num_text)
        })
        .collect()
}

/// Assemble the full plan for a known kept set.
pub fn make_plan(
    kept_visual: Vec<usize>,
    layout: &SequenceLayout,
    cfg: &PruneConfig,
    num_layers: usize,
) -> PrunePlan {
    PrunePlan {
        per_layer_occupancy: layer_occupancy(layout.num_visual, layout.num_text, cfg, num_layers),
        kept_visual_indices: kept_visual,
    }
}
