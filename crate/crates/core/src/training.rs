//! Twig finetuning: autoregressive loss over response positions, exact
//! reverse-mode gradients for the twig parameters, and an AdamW loop with
//! linear warmup into cosine decay. The trunk is frozen throughout — it gets
//! no gradient storage at all; the backward pass simply stops at the twig's
//! first layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{embed, layer_forward, SequenceLayout, TokenId};
use crate::rng::SplitMix64;
use crate::tensor::{gelu, gelu_grad, layer_norm_row, softmax_row, FlopCount, Mat};
use crate::twig::TwigModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    /// Fraction of steps spent in linear warmup.
    pub warmup_ratio: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // Published settings, with the batch shrunk to desk scale.
        Self {
            peak_lr: 5e-5,
            warmup_ratio: 0.03,
            steps: 200,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.peak_lr < 0.0 || !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("peak_lr must be >= 0 and warmup_ratio in [0,1)".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear warmup to the peak, then cosine decay.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let warmup = (cfg.warmup_ratio * cfg.steps as f64).ceil() as usize;
    if step < warmup {
        return cfg.peak_lr * step as f64 / warmup as f64;
    }
    let span = (cfg.steps - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One training sequence: an `M + N` prompt followed by `S` response tokens.
/// Only response positions are supervised.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub tokens: Vec<TokenId>,
    pub layout: SequenceLayout,
}

impl TrainExample {
    fn response_len(&self) -> usize {
        self.tokens.len().saturating_sub(self.layout.total())
    }

    /// Logit rows `prompt_len-1 .. len-1` predict the response tokens.
    fn supervised_rows(&self) -> std::ops::Range<usize> {
        self.layout.total() - 1..self.tokens.len() - 1
    }
}

/// Gradients for every twig parameter, mirroring the twig's layout.
#[derive(Debug, Clone)]
pub struct TwigGradients {
    pub layers: Vec<LayerGradients>,
    pub head: Mat,
    pub final_norm_scale: Vec<f64>,
    pub final_norm_bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    pub ffn_in: Mat,
    pub ffn_out: Mat,
    pub norm1_scale: Vec<f64>,
    pub norm1_bias: Vec<f64>,
    pub norm2_scale: Vec<f64>,
    pub norm2_bias: Vec<f64>,
}

impl TwigGradients {
    fn zeros(tm: &TwigModel) -> Self {
        let cfg = tm.base().config();
        let (d, d_ff, v) = (cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size);
        let layer = || LayerGradients {
            w_q: Mat::zeros(d, d),
            w_k: Mat::zeros(d, d),
            w_v: Mat::zeros(d, d),
            w_o: Mat::zeros(d, d),
            ffn_in: Mat::zeros(d, d_ff),
            ffn_out: Mat::zeros(d_ff, d),
            norm1_scale: vec![0.0; d],
            norm1_bias: vec![0.0; d],
            norm2_scale: vec![0.0; d],
            norm2_bias: vec![0.0; d],
        };
        Self {
            layers: (0..tm.twig_depth()).map(|_| layer()).collect(),
            head: Mat::zeros(d, v),
            final_norm_scale: vec![0.0; d],
            final_norm_bias: vec![0.0; d],
        }
    }

    /// Canonical flat order shared with [`flatten_twig`] / [`load_twig`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.w_q.data());
            out.extend_from_slice(l.w_k.data());
            out.extend_from_slice(l.w_v.data());
            out.extend_from_slice(l.w_o.data());
            out.extend_from_slice(l.ffn_in.data());
            out.extend_from_slice(l.ffn_out.data());
            out.extend_from_slice(&l.norm1_scale);
            out.extend_from_slice(&l.norm1_bias);
            out.extend_from_slice(&l.norm2_scale);
            out.extend_from_slice(&l.norm2_bias);
        }
        out.extend_from_slice(self.head.data());
        out.extend_from_slice(&self.final_norm_scale);
        out.extend_from_slice(&self.final_norm_bias);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().iter().fold(0.0, |acc: f64, g| acc.max(g.abs()))
    }
}

/// Twig parameters as one flat vector, in the canonical order.
pub fn flatten_twig(tm: &TwigModel) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &tm.twig_layers {
        out.extend_from_slice(l.w_q.data());
        out.extend_from_slice(l.w_k.data());
        out.extend_from_slice(l.w_v.data());
        out.extend_from_slice(l.w_o.data());
        out.extend_from_slice(l.ffn_in.data());
        out.extend_from_slice(l.ffn_out.data());
        out.extend_from_slice(&l.norm1.scale);
        out.extend_from_slice(&l.norm1.bias);
        out.extend_from_slice(&l.norm2.scale);
        out.extend_from_slice(&l.norm2.bias);
    }
    out.extend_from_slice(tm.twig_head.data());
    out.extend_from_slice(&tm.twig_final_norm.scale);
    out.extend_from_slice(&tm.twig_final_norm.bias);
    out
}

/// Write a flat parameter vector back into the twig.
pub fn load_twig(tm: &mut TwigModel, flat: &[f64]) {
    let mut offset = 0;
    let mut take = |dst: &mut [f64]| {
        dst.copy_from_slice(&flat[offset..offset + dst.len()]);
        offset += dst.len();
    };
    for l in &mut tm.twig_layers {
        take(l.w_q.data_mut());
        take(l.w_k.data_mut());
        take(l.w_v.data_mut());
        take(l.w_o.data_mut());
        take(l.ffn_in.data_mut());
        take(l.ffn_out.data_mut());
        take(&mut l.norm1.scale);
        take(&mut l.norm1.bias);
        take(&mut l.norm2.scale);
        take(&mut l.norm2.bias);
    }
    take(tm.twig_head.data_mut());
    take(&mut tm.twig_final_norm.scale);
    take(&mut tm.twig_final_norm.bias);
    assert_eq!(offset, flat.len(), "flat parameter vector has wrong length");
}

/// Per-layer activations cached by the training forward.
struct LayerTrace {
    x: Mat,
    normed1: Mat,
    ln1_stats: Vec<(f64, f64)>,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    ctx: Mat,
    h: Mat,
    normed2: Mat,
    ln2_stats: Vec<(f64, f64)>,
    ffn_pre: Mat,
    ffn_act: Mat,
}

struct ExampleTrace {
    layers: Vec<LayerTrace>,
    y: Mat,
    normed_f: Mat,
    lnf_stats: Vec<(f64, f64)>,
    logits: Mat,
    supervised: std::ops::Range<usize>,
    targets: Vec<TokenId>,
}

fn ln_forward(x: &Mat, scale: &[f64], bias: &[f64]) -> (Mat, Vec<(f64, f64)>) {
    let mut out = Mat::zeros(x.rows(), x.cols());
    let mut stats = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        stats.push(layer_norm_row(x.row(i), scale, bias, out.row_mut(i)));
    }
    (out, stats)
}

/// Backward through a layer norm; accumulates scale/bias grads, returns dx.
fn ln_backward(
    dout: &Mat,
    x: &Mat,
    stats: &[(f64, f64)],
    scale: &[f64],
    dscale: &mut [f64],
    dbias: &mut [f64],
) -> Mat {
    let (rows, cols) = (x.rows(), x.cols());
    let mut dx = Mat::zeros(rows, cols);
    for i in 0..rows {
        let (mean, rstd) = stats[i];
        let xr = x.row(i);
        let dr = dout.row(i);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..cols {
            let xhat = (xr[j] - mean) * rstd;
            let dxhat = dr[j] * scale[j];
            dscale[j] += dr[j] * xhat;
            dbias[j] += dr[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
        }
        mean_dxhat /= cols as f64;
        mean_dxhat_xhat /= cols as f64;
        let out = dx.row_mut(i);
        for j in 0..cols {
            let xhat = (xr[j] - mean) * rstd;
            let dxhat = dr[j] * scale[j];
            out[j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
    dx
}

/// Full-sequence twig forward with cached activations. The arithmetic
/// mirrors the inference layer exactly (same kernels, same order), so the
/// loss agrees with a cached incremental evaluation to rounding error.
fn twig_forward_cached(tm: &TwigModel, example: &TrainExample) -> Result<ExampleTrace> {
    let model = tm.base();
    let cfg = model.config();
    if example.response_len() == 0 {
        return Err(Error::Input("example has no response tokens".into()));
    }
    let positions: Vec<usize> = (0..example.tokens.len()).collect();
    let mut latents = embed(model, &example.tokens, &positions)?;

    // Frozen trunk: plain inference forward, no caches kept.
    let mut scratch = FlopCount::default();
    for layer in &model.layers[..tm.shared_depth()] {
        latents = layer_forward(layer, &latents, None, cfg.num_heads, false, &mut scratch)?
            .latents;
    }

    let num_heads = cfg.num_heads;
    let head_dim = cfg.head_dim();
    let d = cfg.hidden_dim;
    let s = example.tokens.len();
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut x = latents.values;
    let mut layers = Vec::with_capacity(tm.twig_depth());
    for layer in &tm.twig_layers {
        let (normed1, ln1_stats) = ln_forward(&x, &layer.norm1.scale, &layer.norm1.bias);
        let q = normed1.matmul(&layer.w_q, &mut scratch);
        let k = normed1.matmul(&layer.w_k, &mut scratch);
        let v = normed1.matmul(&layer.w_v, &mut scratch);
        let mut probs = Vec::with_capacity(num_heads);
        let mut ctx = Mat::zeros(s, d);
        for hd in 0..num_heads {
            let q_h = q.col_block(hd * head_dim, head_dim);
            let k_h = k.col_block(hd * head_dim, head_dim);
            let v_h = v.col_block(hd * head_dim, head_dim);
            let mut scores = q_h.matmul_nt(&k_h, &mut scratch);
            for i in 0..s {
                let row = scores.row_mut(i);
                for (j, val) in row.iter_mut().enumerate() {
                    if j > i {
                        *val = f64::NEG_INFINITY;
                    } else {
                        *val *= scale;
                    }
                }
                softmax_row(row);
            }
            let ctx_h = scores.matmul(&v_h, &mut scratch);
            for i in 0..s {
                ctx.row_mut(i)[hd * head_dim..(hd + 1) * head_dim].copy_from_slice(ctx_h.row(i));
            }
            probs.push(scores);
        }
        let attn_out = ctx.matmul(&layer.w_o, &mut scratch);
        let mut h = x.clone();
        h.add_assign(&attn_out);
        let (normed2, ln2_stats) = ln_forward(&h, &layer.norm2.scale, &layer.norm2.bias);
        let ffn_pre = normed2.matmul(&layer.ffn_in, &mut scratch);
        let mut ffn_act = ffn_pre.clone();
        for val in ffn_act.data_mut() {
            *val = gelu(*val);
        }
        let ffn_out = ffn_act.matmul(&layer.ffn_out, &mut scratch);
        let mut y = h.clone();
        y.add_assign(&ffn_out);
        layers.push(LayerTrace {
            x,
            normed1,
            ln1_stats,
            q,
            k,
            v,
            probs,
            ctx,
            h,
            normed2,
            ln2_stats,
            ffn_pre,
            ffn_act,
        });
        x = y;
    }

    let (normed_f, lnf_stats) =
        ln_forward(&x, &tm.twig_final_norm.scale, &tm.twig_final_norm.bias);
    let logits = normed_f.matmul(&tm.twig_head, &mut scratch);
    let supervised = example.supervised_rows();
    let targets = example.tokens[example.layout.total()..].to_vec();
    Ok(ExampleTrace { layers, y: x, normed_f, lnf_stats, logits, supervised, targets })
}

fn log_softmax_loss(logits: &[f64], target: TokenId) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

fn batch_supervised_count(batch: &[TrainExample]) -> usize {
    batch.iter().map(TrainExample::response_len).sum()
}

/// Mean cross-entropy of shallow-path logits against next-token targets over
/// the supervised (response) positions of the batch.
pub fn ar_loss(tm: &TwigModel, batch: &[TrainExample]) -> Result<f64> {
    if batch_supervised_count(batch) == 0 {
        return Err(Error::Input("batch has an empty supervised span".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for example in batch {
        let trace = twig_forward_cached(tm, example)?;
        for (offset, row) in trace.supervised.clone().enumerate() {
            total += log_softmax_loss(trace.logits.row(row), trace.targets[offset]);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Loss and exact gradients of [`ar_loss`] w.r.t. every twig parameter.
/// A batch with no supervised positions yields zero gradients.
pub fn backward(tm: &TwigModel, batch: &[TrainExample]) -> Result<(f64, TwigGradients)> {
    let mut grads = TwigGradients::zeros(tm);
    let count = batch_supervised_count(batch);
    if count == 0 {
        return Ok((0.0, grads));
    }
    let cfg = tm.base().config();
    let (num_heads, head_dim, d) = (cfg.num_heads, cfg.head_dim(), cfg.hidden_dim);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut scratch = FlopCount::default();
    let mut total_loss = 0.0;

    for example in batch {
        if example.response_len() == 0 {
            continue;
        }
        let trace = twig_forward_cached(tm, example)?;
        let s = example.tokens.len();
        let v = cfg.vocab_size;

        // d(mean loss)/d(logits): softmax minus one-hot on supervised rows.
        let mut dlogits = Mat::zeros(s, v);
        for (offset, row) in trace.supervised.clone().enumerate() {
            let target = trace.targets[offset];
            total_loss += log_softmax_loss(trace.logits.row(row), target);
            let mut p = trace.logits.row(row).to_vec();
            softmax_row(&mut p);
            let out = dlogits.row_mut(row);
            for j in 0..v {
                out[j] = p[j] / count as f64;
            }
            out[target] -= 1.0 / count as f64;
        }

        // Head and final norm.
        grads.head.add_assign(&trace.normed_f.matmul_tn(&dlogits));
        let dnormed_f = dlogits.matmul_nt(&tm.twig_head, &mut scratch);
        let mut dy = ln_backward(
            &dnormed_f,
            &trace.y,
            &trace.lnf_stats,
            &tm.twig_final_norm.scale,
            &mut grads.final_norm_scale,
            &mut grads.final_norm_bias,
        );

        // Twig layers in reverse.
        for (li, layer) in tm.twig_layers.iter().enumerate().rev() {
            let tr = &trace.layers[li];
            let g = &mut grads.layers[li];

            // y = h + ffn_act * ffn_out
            let dffn_out_input = &dy;
            g.ffn_out.add_assign(&tr.ffn_act.matmul_tn(dffn_out_input));
            let mut dffn_act = dffn_out_input.matmul_nt(&layer.ffn_out, &mut scratch);
            for (val, pre) in dffn_act.data_mut().iter_mut().zip(tr.ffn_pre.data()) {
                *val *= gelu_grad(*pre);
            }
            g.ffn_in.add_assign(&tr.normed2.matmul_tn(&dffn_act));
            let dnormed2 = dffn_act.matmul_nt(&layer.ffn_in, &mut scratch);
            let mut dh = ln_backward(
                &dnormed2,
                &tr.h,
                &tr.ln2_stats,
                &layer.norm2.scale,
                &mut g.norm2_scale,
                &mut g.norm2_bias,
            );
            dh.add_assign(&dy);

            // h = x + ctx * w_o
            g.w_o.add_assign(&tr.ctx.matmul_tn(&dh));
            let dctx = dh.matmul_nt(&layer.w_o, &mut scratch);

            // Attention, per head.
            let mut dq = Mat::zeros(s, d);
            let mut dk = Mat::zeros(s, d);
            let mut dv = Mat::zeros(s, d);
            for hd in 0..num_heads {
                let cols = hd * head_dim;
                let dctx_h = dctx.col_block(cols, head_dim);
                let q_h = tr.q.col_block(cols, head_dim);
                let k_h = tr.k.col_block(cols, head_dim);
                let v_h = tr.v.col_block(cols, head_dim);
                let probs = &tr.probs[hd];

                let dprobs = dctx_h.matmul_nt(&v_h, &mut scratch);
                let dv_h = probs.matmul_tn(&dctx_h);
                // Softmax backward per row; masked entries have prob 0 and
                // drop out automatically.
                let mut dscores = Mat::zeros(s, s);
                for i in 0..s {
                    let p = probs.row(i);
                    let dp = dprobs.row(i);
                    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
                    let out = dscores.row_mut(i);
                    for j in 0..s {
                        out[j] = p[j] * (dp[j] - dot) * scale;
                    }
                }
                let dq_h = dscores.matmul(&k_h, &mut scratch);
                let dk_h = dscores.matmul_tn(&q_h);
                for i in 0..s {
                    dq.row_mut(i)[cols..cols + head_dim].copy_from_slice(dq_h.row(i));
                    dk.row_mut(i)[cols..cols + head_dim].copy_from_slice(dk_h.row(i));
                    dv.row_mut(i)[cols..cols + head_dim].copy_from_slice(dv_h.row(i));
                }
            }

            g.w_q.add_assign(&tr.normed1.matmul_tn(&dq));
            g.w_k.add_assign(&tr.normed1.matmul_tn(&dk));
            g.w_v.add_assign(&tr.normed1.matmul_tn(&dv));
            let mut dnormed1 = dq.matmul_nt(&layer.w_q, &mut scratch);
            dnormed1.add_assign(&dk.matmul_nt(&layer.w_k, &mut scratch));
            dnormed1.add_assign(&dv.matmul_nt(&layer.w_v, &mut scratch));
            let dx_from_norm = ln_backward(
                &dnormed1,
                &tr.x,
                &tr.ln1_stats,
                &layer.norm1.scale,
                &mut g.norm1_scale,
                &mut g.norm1_bias,
            );
            // dx = residual flow + layer-norm flow. At the first twig layer
            // this gradient would enter the frozen trunk and is dropped.
            dy = dh;
            dy.add_assign(&dx_from_norm);
        }
    }
    Ok((total_loss / count as f64, grads))
}

/// Per-step loss curve from training the twig on `dataset`.
///
/// AdamW with bias correction, deterministic batch order from the seed, and
/// the [`lr_at`] schedule. Surfaces divergence (non-finite loss) as an error
/// instead of continuing silently.
pub fn train_twig(
    tm: &mut TwigModel,
    dataset: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("empty training dataset".into()));
    }
    let mut params = flatten_twig(tm);
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = SplitMix64::new(cfg.seed);
    rng.shuffle(&mut order);
    let mut cursor = 0usize;
    let mut losses = Vec::with_capacity(cfg.steps);
    const EPS: f64 = 1e-8;

    for step in 0..cfg.steps {
        let mut picks = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size.min(dataset.len()) {
            if cursor == dataset.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            picks.push(order[cursor]);
            cursor += 1;
        }
        // Fixed within-batch order keeps the loss reduction bit-stable.
        picks.sort_unstable();
        let batch: Vec<TrainExample> = picks.iter().map(|&i| dataset[i].clone()).collect();
        let (loss, grads) = backward(tm, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss at step {step}")));
        }
        losses.push(loss);

        let lr = lr_at(cfg, step);
        let g = grads.flatten();
        let t = (step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + EPS) + cfg.weight_decay * params[i]);
        }
        load_twig(tm, &params);
    }
    Ok(losses)
}

/// Synthetic copy task: random visual prefix, text prompt drawn from a small
/// sub-vocabulary, response = the text tokens repeated cyclically. Prompts
/// are seeded, so the dataset is a pure function of its arguments.
pub fn copy_task_dataset(
    vocab_size: usize,
    layout: &SequenceLayout,
    response_len: usize,
    num_examples: usize,
    seed: u64,
) -> Vec<TrainExample> {
    let mut rng = SplitMix64::new(seed);
    let sub_vocab = 8.min(vocab_size.saturating_sub(1)).max(1);
    (0..num_examples)
        .map(|_| {
            let mut tokens = Vec::with_capacity(layout.total() + response_len);
            for _ in 0..layout.num_visual {
                tokens.push(rng.next_below(vocab_size - 1));
            }
            let text_start = tokens.len();
            for _ in 0..layout.num_text {
                tokens.push(rng.next_below(sub_vocab));
            }
            for j in 0..response_len {
                tokens.push(tokens[text_start + j % layout.num_text]);
            }
            TrainExample { tokens, layout: *layout }
        })
        .collect()
}
