//! Minimal decoder-only transformer with deterministic seeded initialization.
//!
//! Pre-norm residual blocks with a GELU FFN and absolute learned positional
//! embeddings, all in f64. Pruned sequences keep their original absolute
//! position indices; causality is always evaluated against those indices, so
//! removing interior tokens never lets a query see a missing key.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::LayerKv;
use crate::rng::SplitMix64;
use crate::tensor::{argmax, layer_norm_row, softmax_row, FlopCount, Mat};
use crate::tensor::{gelu, LAYER_NORM_EPS};

pub type TokenId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Includes the reserved end-of-sequence id `vocab_size - 1`.
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = self.num_layers >= 1
            && self.hidden_dim >= 1
            && self.num_heads >= 1
            && self.ffn_dim >= 1
            && self.vocab_size >= 1
            && self.max_positions >= 1;
        if !all_positive {
            return Err(Error::Config("all model dimensions must be >= 1".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn eos_id(&self) -> TokenId {
        self.vocab_size - 1
    }
}

/// Prompt layout: visual tokens occupy positions `0..num_visual`, textual
/// tokens `num_visual..num_visual + num_text`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub num_visual: usize,
    pub num_text: usize,
}

impl SequenceLayout {
    pub fn new(num_visual: usize, num_text: usize) -> Result<Self> {
        if num_text == 0 {
            return Err(Error::Input("layout requires at least one textual token".into()));
        }
        Ok(Self { num_visual, num_text })
    }

    pub fn total(&self) -> usize {
        self.num_visual + self.num_text
    }

    pub fn is_visual(&self, position: usize) -> bool {
        position < self.num_visual
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl NormParams {
    pub fn identity(dim: usize) -> Self {
        Self { scale: vec![1.0; dim], bias: vec![0.0; dim] }
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        let mut out = Mat::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            layer_norm_row(x.row(i), &self.scale, &self.bias, out.row_mut(i));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    pub ffn_in: Mat,
    pub ffn_out: Mat,
    pub norm1: NormParams,
    pub norm2: NormParams,
}

/// Token latents paired with their original absolute positions.
#[derive(Debug, Clone)]
pub struct Latents {
    pub values: Mat,
    pub positions: Vec<usize>,
}

impl Latents {
    pub fn new(values: Mat, positions: Vec<usize>) -> Result<Self> {
        if values.rows() != positions.len() || positions.is_empty() {
            return Err(Error::Internal("latents rows/positions mismatch or empty".into()));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Internal("latent positions not strictly increasing".into()));
        }
        Ok(Self { values, positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Keep the rows selected by ascending row indices.
    pub fn select_rows(&self, rows: &[usize]) -> Latents {
        Latents {
            values: self.values.gather_rows(rows),
            positions: rows.iter().map(|&r| self.positions[r]).collect(),
        }
    }
}

/// Row-stochastic attention probabilities of one layer, all heads kept.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    /// One `S_q x S_kv` matrix per head.
    pub probs: Vec<Mat>,
    pub query_positions: Vec<usize>,
    pub key_positions: Vec<usize>,
}

impl AttentionMap {
    pub fn num_heads(&self) -> usize {
        self.probs.len()
    }
}

/// Per-position vocabulary scores.
#[derive(Debug, Clone)]
pub struct Logits {
    pub values: Mat,
}

impl Logits {
    pub fn num_positions(&self) -> usize {
        self.values.rows()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    pub fn last(&self) -> &[f64] {
        self.values.row(self.values.rows() - 1)
    }

    /// Greedy token at position `i`; ties break toward the lowest id.
    pub fn argmax_at(&self, i: usize) -> TokenId {
        argmax(self.values.row(i))
    }

    pub fn argmax_last(&self) -> TokenId {
        self.argmax_at(self.values.rows() - 1)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    pub embedding: Mat,
    pub positional: Mat,
    pub layers: Vec<LayerWeights>,
    pub head: Mat,
    pub final_norm: NormParams,
}

fn init_mat(rng: &mut SplitMix64, rows: usize, cols: usize, scale: f64) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.next_symmetric(scale);
    }
    m
}

pub(crate) fn init_layer(rng: &mut SplitMix64, cfg: &ModelConfig) -> LayerWeights {
    let d = cfg.hidden_dim;
    let proj_scale = 0.02 / (d as f64).sqrt();
    LayerWeights {
        w_q: init_mat(rng, d, d, proj_scale),
        w_k: init_mat(rng, d, d, proj_scale),
        w_v: init_mat(rng, d, d, proj_scale),
        w_o: init_mat(rng, d, d, proj_scale),
        ffn_in: init_mat(rng, d, cfg.ffn_dim, proj_scale),
        ffn_out: init_mat(rng, cfg.ffn_dim, d, proj_scale),
        norm1: NormParams::identity(d),
        norm2: NormParams::identity(d),
    }
}

pub(crate) fn init_head(rng: &mut SplitMix64, cfg: &ModelConfig) -> Mat {
    let proj_scale = 0.02 / (cfg.hidden_dim as f64).sqrt();
    init_mat(rng, cfg.hidden_dim, cfg.vocab_size, proj_scale)
}

/// Build a model with weights drawn from a SplitMix64 stream seeded by
/// `seed`. Draw order is fixed (embedding, positional, layers in order, then
/// head), projections use scale `0.02 / sqrt(hidden_dim)`, embeddings 0.02,
/// and norms start at identity, so identical `(cfg, seed)` reproduce the
/// model bit-for-bit.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(seed);
    let d = cfg.hidden_dim;
    let embedding = init_mat(&mut rng, cfg.vocab_size, d, 0.02);
    let positional = init_mat(&mut rng, cfg.max_positions, d, 0.02);
    let layers = (0..cfg.num_layers).map(|_| init_layer(&mut rng, cfg)).collect();
    let head = init_head(&mut rng, cfg);
    Ok(Model {
        config: cfg.clone(),
        embedding,
        positional,
        layers,
        head,
        final_norm: NormParams::identity(d),
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Assemble a model from raw tensors, validating every shape.
    pub fn from_parts(
        config: ModelConfig,
        embedding: Mat,
        positional: Mat,
        layers: Vec<LayerWeights>,
        head: Mat,
        final_norm: NormParams,
    ) -> Result<Model> {
        config.validate()?;
        let d = config.hidden_dim;
        let shape_ok = embedding.rows() == config.vocab_size
            && embedding.cols() == d
            && positional.rows() == config.max_positions
            && positional.cols() == d
            && layers.len() == config.num_layers
            && head.rows() == d
            && head.cols() == config.vocab_size
            && final_norm.scale.len() == d
            && final_norm.bias.len() == d
            && layers.iter().all(|l| {
                l.w_q.rows() == d
                    && l.w_q.cols() == d
                    && l.w_k.rows() == d
                    && l.w_k.cols() == d
                    && l.w_v.rows() == d
                    && l.w_v.cols() == d
                    && l.w_o.rows() == d
                    && l.w_o.cols() == d
                    && l.ffn_in.rows() == d
                    && l.ffn_in.cols() == config.ffn_dim
                    && l.ffn_out.rows() == config.ffn_dim
                    && l.ffn_out.cols() == d
                    && l.norm1.scale.len() == d
                    && l.norm1.bias.len() == d
                    && l.norm2.scale.len() == d
                    && l.norm2.bias.len() == d
            });
        if !shape_ok {
            return Err(Error::Config("tensor shapes do not match the configuration".into()));
        }
        Ok(Model { config, embedding, positional, layers, head, final_norm })
    }

    /// FNV-1a over every weight tensor, in declaration order.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        h.update_mat(&self.embedding);
        h.update_mat(&self.positional);
        for layer in &self.layers {
            h.update_layer(layer);
        }
        h.update_mat(&self.head);
        h.update_norm(&self.final_norm);
        h.finish()
    }
}

/// Streaming FNV-1a64 over f64 tensors (little-endian bytes).
pub(crate) struct Fnv(u64);

impl Fnv {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Fnv(Self::OFFSET)
    }

    pub fn update_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn update_f64s(&mut self, values: &[f64]) {
        for v in values {
            self.update_bytes(&v.to_le_bytes());
        }
    }

    pub fn update_mat(&mut self, m: &Mat) {
        self.update_f64s(m.data());
    }

    pub fn update_norm(&mut self, n: &NormParams) {
        self.update_f64s(&n.scale);
        self.update_f64s(&n.bias);
    }

    pub fn update_layer(&mut self, l: &LayerWeights) {
        self.update_mat(&l.w_q);
        self.update_mat(&l.w_k);
        self.update_mat(&l.w_v);
        self.update_mat(&l.w_o);
        self.update_mat(&l.ffn_in);
        self.update_mat(&l.ffn_out);
        self.update_norm(&l.norm1);
        self.update_norm(&l.norm2);
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

/// FNV-1a64 over a slice of f64s; used for logit checksums in tool output.
pub fn f64_checksum(values: &[f64]) -> u64 {
    let mut h = Fnv::new();
    h.update_f64s(values);
    h.finish()
}

/// Sum of token and positional embeddings for each (id, position) pair.
pub fn embed(model: &Model, token_ids: &[TokenId], positions: &[usize]) -> Result<Latents> {
    let cfg = model.config();
    if token_ids.is_empty() || token_ids.len() != positions.len() {
        return Err(Error::Input("embed: empty input or id/position length mismatch".into()));
    }
    let mut values = Mat::zeros(token_ids.len(), cfg.hidden_dim);
    for (row, (&id, &pos)) in token_ids.iter().zip(positions).enumerate() {
        if id >= cfg.vocab_size {
            return Err(Error::Input(format!("token id {id} out of range (V={})", cfg.vocab_size)));
        }
        if pos >= cfg.max_positions {
            return Err(Error::Input(format!(
                "position {pos} out of range (max_positions={})",
                cfg.max_positions
            )));
        }
        let out = values.row_mut(row);
        let e = model.embedding.row(id);
        let p = model.positional.row(pos);
        for i in 0..cfg.hidden_dim {
            out[i] = e[i] + p[i];
        }
    }
    Latents::new(values, positions.to_vec())
}

/// Output of one layer forward: new latents, the freshly computed key/value
/// rows (for the caller's cache), and the captured attention map if asked.
pub struct LayerForward {
    pub latents: Latents,
    pub new_keys: Mat,
    pub new_values: Mat,
    pub attn: Option<AttentionMap>,
}

/// Pre-norm residual block: `x + SA(norm1(x))` then `+ FFN(norm2(.))`.
///
/// Keys from `cache` are always attendable (their positions precede every
/// query); within the new block, causality is enforced against absolute
/// positions. Each output row depends only on its own query and the keys at
/// or before it, with a fixed accumulation order, so splitting a sequence
/// across calls cannot change any row.
pub fn layer_forward(
    layer: &LayerWeights,
    x: &Latents,
    cache: Option<&LayerKv>,
    num_heads: usize,
    capture: bool,
    flops: &mut FlopCount,
) -> Result<LayerForward> {
    let d = layer.w_q.rows();
    if x.values.cols() != d {
        return Err(Error::Internal(format!(
            "layer input width {} != hidden dim {d}",
            x.values.cols()
        )));
    }
    if let Some(kv) = cache {
        if let (Some(&first_q), Some(last_k)) = (x.positions.first(), kv.max_position()) {
            if first_q <= last_k {
                return Err(Error::Internal(
                    "cached positions must precede all query positions".into(),
                ));
            }
        }
    }
    let head_dim = d / num_heads;
    let s_q = x.len();

    let normed1 = layer.norm1.apply(&x.values);
    let q = normed1.matmul(&layer.w_q, flops);
    let k_new = normed1.matmul(&layer.w_k, flops);
    let v_new = normed1.matmul(&layer.w_v, flops);

    // Assemble the full key/value set: cached entries then the new block.
    let (keys, values, key_positions) = match cache {
        Some(kv) if !kv.is_empty() => {
            let mut keys = kv.keys().clone();
            keys.append_rows(&k_new);
            let mut vals = kv.values().clone();
            vals.append_rows(&v_new);
            let mut pos = kv.positions().to_vec();
            pos.extend_from_slice(&x.positions);
            (keys, vals, pos)
        }
        _ => (k_new.clone(), v_new.clone(), x.positions.clone()),
    };
    let s_kv = key_positions.len();

    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut ctx = Mat::zeros(s_q, d);
    let mut captured: Vec<Mat> = Vec::new();
    for h in 0..num_heads {
        let q_h = q.col_block(h * head_dim, head_dim);
        let k_h = keys.col_block(h * head_dim, head_dim);
        let v_h = values.col_block(h * head_dim, head_dim);
        let mut scores = q_h.matmul_nt(&k_h, flops);
        for i in 0..s_q {
            let q_pos = x.positions[i];
            let row = scores.row_mut(i);
            for j in 0..s_kv {
                if key_positions[j] > q_pos {
                    row[j] = f64::NEG_INFINITY;
                } else {
                    row[j] *= scale;
                }
            }
            softmax_row(row);
        }
        let ctx_h = scores.matmul(&v_h, flops);
        for i in 0..s_q {
            ctx.row_mut(i)[h * head_dim..(h + 1) * head_dim].copy_from_slice(ctx_h.row(i));
        }
        if capture {
            captured.push(scores);
        }
    }

    let attn_out = ctx.matmul(&layer.w_o, flops);
    let mut hidden = x.values.clone();
    hidden.add_assign(&attn_out);

    let normed2 = layer.norm2.apply(&hidden);
    let mut ffn_mid = normed2.matmul(&layer.ffn_in, flops);
    for v in ffn_mid.data_mut() {
        *v = gelu(*v);
    }
    let ffn_out = ffn_mid.matmul(&layer.ffn_out, flops);
    hidden.add_assign(&ffn_out);

    let attn = capture.then(|| AttentionMap {
        probs: captured,
        query_positions: x.positions.clone(),
        key_positions,
    });
    Ok(LayerForward {
        latents: Latents { values: hidden, positions: x.positions.clone() },
        new_keys: k_new,
        new_values: v_new,
        attn,
    })
}

/// Final layer norm followed by the prediction head.
pub fn head_logits(model: &Model, x: &Latents) -> Result<Logits> {
    if x.is_empty() {
        return Err(Error::Input("head_logits: empty latents".into()));
    }
    let normed = model.final_norm.apply(&x.values);
    // Head projection is not part of the per-layer cost model.
    let mut scratch = FlopCount::default();
    Ok(Logits { values: normed.matmul(&model.head, &mut scratch) })
}

/// Normalization epsilon shared by forward and backward passes.
pub const NORM_EPS: f64 = LAYER_NORM_EPS;

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 32,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 17,
            max_positions: 64,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = small_cfg();
        let a = init_model(&cfg, 7).unwrap();
        let b = init_model(&cfg, 7).unwrap();
        let c = init_model(&cfg, 8).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn init_shapes_follow_config() {
        let cfg = small_cfg();
        let m = init_model(&cfg, 7).unwrap();
        assert_eq!((m.layers[0].w_q.rows(), m.layers[0].w_q.cols()), (32, 32));
        assert_eq!((m.layers[0].ffn_in.rows(), m.layers[0].ffn_in.cols()), (32, 128));
        assert_eq!((m.head.rows(), m.head.cols()), (32, 17));
        assert_eq!(m.embedding.rows(), 17);
        assert_eq!(m.positional.rows(), 64);
    }

    #[test]
    fn init_rejects_bad_config() {
        let mut cfg = small_cfg();
        cfg.num_heads = 5; // 32 % 5 != 0
        assert!(matches!(init_model(&cfg, 0), Err(Error::Config(_))));
        cfg.num_heads = 0;
        assert!(init_model(&cfg, 0).is_err());
    }

    #[test]
    fn embed_is_sum_of_tables() {
        let m = init_model(&small_cfg(), 3).unwrap();
        let lat = embed(&m, &[0], &[0]).unwrap();
        for i in 0..32 {
            assert_eq!(lat.values.at(0, i), m.embedding.at(0, i) + m.positional.at(0, i));
        }
    }

    #[test]
    fn embed_rejects_bad_input() {
        let m = init_model(&small_cfg(), 3).unwrap();
        assert!(embed(&m, &[], &[]).is_err());
        assert!(embed(&m, &[17], &[0]).is_err());
        assert!(embed(&m, &[0], &[64]).is_err());
    }

    #[test]
    fn embed_depends_on_position() {
        let m = init_model(&small_cfg(), 3).unwrap();
        let a = embed(&m, &[1, 2], &[0, 1]).unwrap();
        let b = embed(&m, &[1, 2], &[1, 2]).unwrap();
        assert_ne!(a.values.data(), b.values.data());
    }

    #[test]
    fn single_query_attends_itself() {
        let m = init_model(&small_cfg(), 9).unwrap();
        let x = embed(&m, &[3], &[0]).unwrap();
        let mut flops = FlopCount::default();
        let out = layer_forward(&m.layers[0], &x, None, 4, true, &mut flops).unwrap();
        let attn = out.attn.unwrap();
        for head in &attn.probs {
            assert_eq!(head.at(0, 0), 1.0);
        }
    }

    #[test]
    fn causal_mask_zeroes_future_keys() {
        let m = init_model(&small_cfg(), 9).unwrap();
        let x = embed(&m, &[3, 5], &[0, 1]).unwrap();
        let mut flops = FlopCount::default();
        let out = layer_forward(&m.layers[0], &x, None, 4, true, &mut flops).unwrap();
        let attn = out.attn.unwrap();
        for head in &attn.probs {
            assert_eq!(head.at(0, 1), 0.0);
            let s0: f64 = head.row(0).iter().sum();
            let s1: f64 = head.row(1).iter().sum();
            assert!((s0 - 1.0).abs() < 1e-9 && (s1 - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cached_forward_matches_one_shot() {
        let m = init_model(&small_cfg(), 11).unwrap();
        let ids: Vec<TokenId> = vec![1, 4, 2, 9, 0, 3];
        let positions: Vec<usize> = (0..ids.len()).collect();
        let full = embed(&m, &ids, &positions).unwrap();
        let mut flops = FlopCount::default();
        let oneshot = layer_forward(&m.layers[0], &full, None, 4, false, &mut flops).unwrap();

        // Two-step: prefix populates a cache, suffix attends through it.
        let split = 4;
        let prefix = embed(&m, &ids[..split], &positions[..split]).unwrap();
        let suffix = embed(&m, &ids[split..], &positions[split..]).unwrap();
        let first = layer_forward(&m.layers[0], &prefix, None, 4, false, &mut flops).unwrap();
        let mut kv = LayerKv::new(32);
        kv.append(&first.new_keys, &first.new_values, &positions[..split]).unwrap();
        let second = layer_forward(&m.layers[0], &suffix, Some(&kv), 4, false, &mut flops).unwrap();

        for i in 0..suffix.len() {
            for j in 0..32 {
                let diff =
                    (second.latents.values.at(i, j) - oneshot.latents.values.at(split + i, j)).abs();
                assert!(diff <= 1e-9, "row {i} col {j} differs by {diff}");
            }
        }
    }

    #[test]
    fn layer_rejects_cache_overlapping_queries() {
        let m = init_model(&small_cfg(), 11).unwrap();
        let x = embed(&m, &[1, 2], &[3, 4]).unwrap();
        let mut flops = FlopCount::default();
        let out = layer_forward(&m.layers[0], &x, None, 4, false, &mut flops).unwrap();
        let mut kv = LayerKv::new(32);
        kv.append(&out.new_keys, &out.new_values, &[3, 4]).unwrap();
        let overlapping = embed(&m, &[5], &[4]).unwrap();
        assert!(layer_forward(&m.layers[0], &overlapping, Some(&kv), 4, false, &mut flops).is_err());
    }

    #[test]
    fn zero_head_argmax_breaks_ties_low() {
        let mut m = init_model(&small_cfg(), 2).unwrap();
        m.head = Mat::zeros(32, 17);
        let x = embed(&m, &[5], &[0]).unwrap();
        let logits = head_logits(&m, &x).unwrap();
        assert!(logits.last().iter().all(|&v| v == 0.0));
        assert_eq!(logits.argmax_last(), 0);
    }

    #[test]
    fn one_hot_head_reads_out_latent_coordinate() {
        let mut m = init_model(&small_cfg(), 2).unwrap();
        // Column 6 of the head selects coordinate 3 of the normed latent.
        m.head = Mat::zeros(32, 17);
        *m.head.at_mut(3, 6) = 1.0;
        let x = embed(&m, &[5], &[0]).unwrap();
        let normed = m.final_norm.apply(&x.values);
        let logits = head_logits(&m, &x).unwrap();
        assert_eq!(logits.last()[6], normed.at(0, 3));
        assert!(logits.last().iter().enumerate().all(|(j, &v)| j == 6 || v == 0.0));
    }

    #[test]
    fn head_argmax_matches_straight_line_recompute() {
        let m = init_model(&small_cfg(), 21).unwrap();
        let x = embed(&m, &[1, 2, 3], &[0, 1, 2]).unwrap();
        let logits = head_logits(&m, &x).unwrap();
        // Independent recompute with plain loops.
        let row = x.values.row(2);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + NORM_EPS).sqrt();
        let mut best = (0usize, f64::NEG_INFINITY);
        for tok in 0..17 {
            let mut logit = 0.0;
            for i in 0..32 {
                let normed = (row[i] - mean) * rstd * m.final_norm.scale[i] + m.final_norm.bias[i];
                logit += normed * m.head.at(i, tok);
            }
            if logit > best.1 {
                best = (tok, logit);
            }
        }
        assert_eq!(logits.argmax_at(2), best.0);
    }
}
