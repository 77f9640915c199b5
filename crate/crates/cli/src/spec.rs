//! Run specification: a JSON config file merged with command-line overrides.
//! Flags win over file values, file values win over the built-in toy
//! defaults.

use std::path::Path;

use clap::Args;
use serde::Deserialize;

use twig_core::{
    solve_r, Error, InitStrategy, ModelConfig, PruneConfig, Result, SequenceLayout, SsdConfig,
    TwigConfig,
};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSpec {
    pub model: Option<ModelSection>,
    pub layout: Option<LayoutSection>,
    pub twig: Option<TwigSection>,
    pub prune: Option<PruneSection>,
    pub ssd: Option<SsdSection>,
    pub seed: Option<u64>,
    pub max_tokens: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub num_heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub vocab_size: Option<usize>,
    pub max_positions: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSection {
    pub num_visual: Option<usize>,
    pub num_text: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwigSection {
    pub shared_depth: Option<usize>,
    pub twig_depth: Option<usize>,
    pub init: Option<InitStrategy>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    pub k: Option<usize>,
    pub r: Option<usize>,
    pub target_rbar: Option<usize>,
    pub k_f: Option<usize>,
    pub d: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsdSection {
    pub delta: Option<usize>,
    pub theta: Option<f64>,
}

/// Flags shared by the generation-flavored subcommands.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<String>,
    /// Seed for weights and the synthesized prompt.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Response-token budget.
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Visual token count M.
    #[arg(long)]
    pub m: Option<usize>,
    /// Textual token count N.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub max_positions: Option<usize>,
    /// Pruning layer K.
    #[arg(long)]
    pub k: Option<usize>,
    /// Retained visual tokens R (conflicts with --target-rbar).
    #[arg(long)]
    pub r: Option<usize>,
    /// Desired layer-averaged retained count; R is solved from it.
    #[arg(long)]
    pub target_rbar: Option<usize>,
    /// FinalWipe layer K_f.
    #[arg(long)]
    pub kf: Option<usize>,
    /// Selection attention depth D.
    #[arg(long)]
    pub d: Option<usize>,
    /// Shared trunk depth of the twig.
    #[arg(long)]
    pub twig_k: Option<usize>,
    /// Twig layer count T.
    #[arg(long)]
    pub twig_t: Option<usize>,
    /// Max draft tokens per iteration.
    #[arg(long)]
    pub delta: Option<usize>,
    /// Draft confidence threshold.
    #[arg(long)]
    pub theta: Option<f64>,
    /// Load model weights from a TWG1 container instead of seeding.
    #[arg(long)]
    pub weights: Option<String>,
    /// Save model weights to a TWG1 container after the run.
    #[arg(long)]
    pub save_weights: Option<String>,
}

/// Everything a command needs, fully defaulted and validated.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub layout: SequenceLayout,
    pub twig: TwigConfig,
    pub prune_k: usize,
    pub prune_r: usize,
    pub prune_kf: Option<usize>,
    pub prune_d: Option<usize>,
    pub ssd: SsdConfig,
    pub seed: u64,
    pub max_tokens: usize,
    pub weights: Option<String>,
    pub save_weights: Option<String>,
}

pub fn load_file(path: &str) -> Result<FileSpec> {
    let text = std::fs::read_to_string(Path::new(path))
        .map_err(|e| Error::Config(format!("cannot read config {path}: {e}")))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de)
        .map_err(|e| Error::Config(format!("malformed config {path} at `{}`: {}", e.path(), e)))
}

impl RunSpec {
    /// Merge defaults, the optional config file, and flag overrides.
    pub fn resolve(args: &CommonArgs) -> Result<RunSpec> {
        let file = match &args.config {
            Some(path) => load_file(path)?,
            None => FileSpec::default(),
        };
        let fm = file.model.unwrap_or_default();
        let model = ModelConfig {
            num_layers: args.num_layers.or(fm.num_layers).unwrap_or(8),
            hidden_dim: args.hidden_dim.or(fm.hidden_dim).unwrap_or(32),
            num_heads: args.num_heads.or(fm.num_heads).unwrap_or(4),
            ffn_dim: args.ffn_dim.or(fm.ffn_dim).unwrap_or(128),
            vocab_size: args.vocab_size.or(fm.vocab_size).unwrap_or(64),
            max_positions: args.max_positions.or(fm.max_positions).unwrap_or(512),
        };
        model.validate()?;

        let fl = file.layout.unwrap_or_default();
        let layout = SequenceLayout::new(
            args.m.or(fl.num_visual).unwrap_or(24),
            args.n.or(fl.num_text).unwrap_or(8),
        )?;

        let ft = file.twig.unwrap_or_default();
        let twig = TwigConfig {
            shared_depth: args.twig_k.or(ft.shared_depth).unwrap_or(2),
            twig_depth: args.twig_t.or(ft.twig_depth).unwrap_or(3),
            init: ft.init.unwrap_or(InitStrategy::LayersKtoKT),
        };

        let fp = file.prune.unwrap_or_default();
        let prune_k = args.k.or(fp.k).unwrap_or(2);
        // FinalWipe is opt-in; absent means disabled.
        let prune_kf = args.kf.or(fp.k_f);
        let explicit_r = args.r.or(fp.r);
        let explicit_rbar = args.target_rbar.or(fp.target_rbar);
        let prune_r = match (explicit_r, explicit_rbar) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "prune.r and prune.target_rbar are mutually exclusive".into(),
                ));
            }
            (Some(r), None) => r,
            (None, Some(target)) => {
                let kf = prune_kf.ok_or_else(|| {
                    Error::Config("target_rbar needs a FinalWipe layer k_f".into())
                })?;
                solve_r(target, layout.num_visual, prune_k, kf, model.num_layers)?
            }
            (None, None) => layout.num_visual / 2,
        };

        let fs = file.ssd.unwrap_or_default();
        let defaults = SsdConfig::default();
        let ssd = SsdConfig {
            delta: args.delta.or(fs.delta).unwrap_or(defaults.delta),
            theta: args.theta.or(fs.theta).unwrap_or(defaults.theta),
        };
        ssd.validate()?;

        Ok(RunSpec {
            model,
            layout,
            twig,
            prune_k,
            prune_r,
            prune_kf,
            prune_d: args.d.or(fp.d),
            ssd,
            seed: args.seed.or(file.seed).unwrap_or(0),
            max_tokens: args.max_tokens.or(file.max_tokens).unwrap_or(32),
            weights: args.weights.clone(),
            save_weights: args.save_weights.clone(),
        })
    }

    /// Prune plan for the attention-at-D baseline path (D defaults to K).
    pub fn fastv_prune(&self) -> PruneConfig {
        PruneConfig {
            prune_layer: self.prune_k,
            retained: self.prune_r,
            final_wipe: self.prune_kf,
            selection_depth: self.prune_d.unwrap_or(self.prune_k.max(1)),
        }
    }
}
