//! Cost model, acceptance-rate and speed metrics, and the decode-scaling
//! timing harness.

use std::time::Instant;

use crate::engine::{decode_step, prefill};
use crate::error::{Error, Result};
use crate::model::{Model, SequenceLayout, TokenId};
use crate::pruning::{layer_occupancy, PruneConfig};
use crate::ssd::GenerationTrace;

/// FLOPs of one transformer layer processing `s_q` query tokens against
/// `s_kv` keys, one multiply-add counted as 2 FLOPs:
/// `8*s_q*d^2` for the QKVO projections, `4*s_q*s_kv*d` for the score and
/// weighted-sum products, `4*s_q*d*d_ff` for the FFN.
pub fn flops_layer(d: usize, d_ff: usize, s_q: usize, s_kv: usize) -> u64 {
    let (d, d_ff, s_q, s_kv) = (d as u64, d_ff as u64, s_q as u64, s_kv as u64);
    8 * s_q * d * d + 4 * s_q * s_kv * d + 4 * s_q * d * d_ff
}

/// Closed-form per-layer costs derived from a model configuration.
#[derive(Debug, Clone, Copy)]
pub struct CostModel {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
}

impl CostModel {
    pub fn new(cfg: &crate::model::ModelConfig) -> Self {
        Self { num_layers: cfg.num_layers, hidden_dim: cfg.hidden_dim, ffn_dim: cfg.ffn_dim }
    }

    pub fn layer(&self, s_q: usize, s_kv: usize) -> u64 {
        flops_layer(self.hidden_dim, self.ffn_dim, s_q, s_kv)
    }

    /// Prefill cost over all layers. With a prune plan, each layer processes
    /// its occupancy (full sequence below the prune layer, retained + text
    /// in the middle band, text only above the wipe layer); selection runs
    /// at the prune layer, so no auxiliary-pass cost appears here.
    pub fn prefill(&self, layout: &SequenceLayout, prune: Option<&PruneConfig>) -> u64 {
        match prune {
            None => self.num_layers as u64 * self.layer(layout.total(), layout.total()),
            Some(cfg) => {
                layer_occupancy(layout.num_visual, layout.num_text, cfg, self.num_layers)
                    .into_iter()
                    .map(|(visual, text)| self.layer(visual + text, visual + text))
                    .sum()
            }
        }
    }
}

/// Fraction of drafted tokens accepted by the target.
pub fn tok_ar(trace: &GenerationTrace) -> Result<f64> {
    let drafted = trace.total_drafted();
    if drafted == 0 {
        return Err(Error::Input("trace has no drafted tokens".into()));
    }
    Ok(trace.total_accepted() as f64 / drafted as f64)
}

/// One timed generation run.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct TimingSample {
    pub prefill_seconds: f64,
    pub decode_seconds: f64,
    pub tokens_generated: usize,
}

impl TimingSample {
    pub fn total_seconds(&self) -> f64 {
        self.prefill_seconds + self.decode_seconds
    }

    /// Tokens per second over the whole generation (prefill included).
    pub fn speed(&self) -> Result<f64> {
        let t = self.total_seconds();
        if t <= 0.0 {
            return Err(Error::Measurement("zero-duration sample".into()));
        }
        Ok(self.tokens_generated as f64 / t)
    }
}

/// Per-sample timing measurements of one configuration.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct TimingReport {
    pub samples: Vec<TimingSample>,
}

impl TimingReport {
    pub fn mean_speed(&self) -> Result<f64> {
        if self.samples.is_empty() {
            return Err(Error::Measurement("empty timing report".into()));
        }
        let mut total = 0.0;
        for s in &self.samples {
            total += s.speed()?;
        }
        Ok(total / self.samples.len() as f64)
    }
}

/// Relative speed: accelerated tokens/second over baseline tokens/second,
/// with speeds macro-averaged per sample before the ratio.
pub fn rel_spd(base: &TimingReport, accel: &TimingReport) -> Result<f64> {
    Ok(accel.mean_speed()? / base.mean_speed()?)
}

/// Median prefill/decode times for one forced response length.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct DecodePoint {
    pub response_len: usize,
    pub prefill_seconds: f64,
    pub decode_seconds: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Time prefill and decode separately at each forced response length
/// (EOS ignored), with one discarded warmup run and the median of three
/// timed repetitions per point.
pub fn bench_decode_scaling(
    model: &Model,
    token_ids: &[TokenId],
    layout: &SequenceLayout,
    response_lens: &[usize],
) -> Result<Vec<DecodePoint>> {
    if response_lens.is_empty() {
        return Err(Error::Input("empty response length list".into()));
    }
    if token_ids.len() != layout.total() {
        return Err(Error::Input("prompt length does not match layout".into()));
    }
    let mut points = Vec::with_capacity(response_lens.len());
    for &s in response_lens {
        if s == 0 {
            return Err(Error::Input("response length must be >= 1".into()));
        }
        let mut prefill_times = Vec::new();
        let mut decode_times = Vec::new();
        for rep in 0..4 {
            let t0 = Instant::now();
            let out = prefill(model, token_ids, &[])?;
            let prefill_elapsed = t0.elapsed().as_secs_f64();

            let mut cache = out.cache;
            let mut token = out.last_logits.argmax_last();
            let t1 = Instant::now();
            for _ in 1..s {
                let logits = decode_step(model, &mut cache, token)?;
                token = logits.argmax_last();
            }
            let decode_elapsed = t1.elapsed().as_secs_f64();
            if rep > 0 {
                prefill_times.push(prefill_elapsed);
                decode_times.push(decode_elapsed);
            }
        }
        points.push(DecodePoint {
            response_len: s,
            prefill_seconds: median(prefill_times),
            decode_seconds: median(decode_times),
        });
    }
    Ok(points)
}

/// Least-squares line fit; returns (slope, intercept, r_squared).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Input("linear fit needs >= 2 paired points".into()));
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mean_x) * (y - mean_y);
        sxx += (x - mean_x) * (x - mean_x);
        syy += (y - mean_y) * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(Error::Input("degenerate fit: constant x".into()));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok((slope, intercept, r2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::ssd::IterationRecord;

    #[test]
    fn layer_flops_hand_value() {
        // 8*4*1024 + 4*16*32 + 4*4*32*128 = 32768 + 2048 + 65536.
        assert_eq!(flops_layer(32, 128, 4, 4), 100_352);
        assert_eq!(flops_layer(32, 128, 0, 4), 0);
        assert_eq!(flops_layer(32, 128, 8, 4), 2 * flops_layer(32, 128, 4, 4));
    }

    fn cost() -> CostModel {
        CostModel::new(&ModelConfig {
            num_layers: 32,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            vocab_size: 32,
            max_positions: 2048,
        })
    }

    #[test]
    fn prefill_noop_prune_equals_unpruned() {
        let layout = SequenceLayout::new(576, 32).unwrap();
        let noop = PruneConfig {
            prune_layer: 2,
            retained: 576,
            final_wipe: None,
            selection_depth: 2,
        };
        assert_eq!(cost().prefill(&layout, Some(&noop)), cost().prefill(&layout, None));
    }

    #[test]
    fn prefill_matches_band_arithmetic() {
        // Occupancy-weighted sum recomputed from the three bands directly.
        let layout = SequenceLayout::new(576, 32).unwrap();
        let pc = PruneConfig {
            prune_layer: 2,
            retained: 41,
            final_wipe: Some(24),
            selection_depth: 5,
        };
        let c = cost();
        let expect = 2 * c.layer(608, 608) + 22 * c.layer(73, 73) + 8 * c.layer(32, 32);
        assert_eq!(c.prefill(&layout, Some(&pc)), expect);
        assert!(c.prefill(&layout, Some(&pc)) < c.prefill(&layout, None));
    }

    #[test]
    fn prefill_zero_visual_band() {
        let layout = SequenceLayout::new(100, 10).unwrap();
        let pc = PruneConfig {
            prune_layer: 0,
            retained: 0,
            final_wipe: None,
            selection_depth: 1,
        };
        let c = cost();
        assert_eq!(c.prefill(&layout, Some(&pc)), 32 * c.layer(10, 10));
    }

    fn record(drafted: usize, accepted: usize) -> IterationRecord {
        IterationRecord {
            iter: 0,
            drafted: vec![0; drafted],
            accepted,
            correction: Some(1),
            early_exit: false,
        }
    }

    #[test]
    fn tok_ar_arithmetic() {
        let trace = GenerationTrace {
            iterations: vec![record(5, 2), record(3, 3)],
            target_forwards: 2,
        };
        assert_eq!(tok_ar(&trace).unwrap(), 5.0 / 8.0);
        let empty = GenerationTrace::default();
        assert!(tok_ar(&empty).is_err());
    }

    #[test]
    fn rel_spd_arithmetic() {
        let base = TimingReport {
            samples: vec![TimingSample {
                prefill_seconds: 0.0,
                decode_seconds: 1.0,
                tokens_generated: 10,
            }],
        };
        let accel = TimingReport {
            samples: vec![TimingSample {
                prefill_seconds: 0.0,
                decode_seconds: 1.0,
                tokens_generated: 15,
            }],
        };
        assert!((rel_spd(&base, &accel).unwrap() - 1.5).abs() < 1e-12);
        assert!((rel_spd(&base, &base).unwrap() - 1.0).abs() < 1e-12);
        let zero = TimingReport {
            samples: vec![TimingSample {
                prefill_seconds: 0.0,
                decode_seconds: 0.0,
                tokens_generated: 1,
            }],
        };
        assert!(rel_spd(&base, &zero).is_err());
    }

    #[test]
    fn linear_fit_recovers_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [3.0, 5.0, 7.0, 9.0];
        let (slope, intercept, r2) = linear_fit(&xs, &ys).unwrap();
        assert!((slope - 2.0).abs() < 1e-12);
        assert!((intercept - 1.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
        assert!(linear_fit(&xs[..1], &ys[..1]).is_err());
    }
}
