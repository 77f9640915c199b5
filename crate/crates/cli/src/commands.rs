//! Subcommand implementations. Every output carries the seed, JSON field
//! order is fixed by the structs, and CSV bodies follow a `# seed=N` header
//! line, so identical invocations produce byte-identical output.

use std::fs::File;
use std::io::Write;
use std::sync::Mutex;

use clap::Args;
use serde::Serialize;

use twig_core::{
    aggregate_attention, attach_twig, avg_retained_finalwipe, bench_decode_scaling,
    copy_task_dataset, f64_checksum, fastv_generate, flops_layer, greedy_generate_full,
    init_model, io, layer_occupancy, lr_at, prefill, random_prompt, solve_r, ssd_generate,
    target_greedy_generate, tok_ar, top_r_select, train_twig, ttp_prefill,
};
use twig_core::{
    CostModel, Error, Model, PruneConfig, Result, SsdOutput, TokenId, TrainConfig, TwigModel,
};

use crate::spec::{CommonArgs, RunSpec};

fn checksum_hex(logits: &[f64]) -> String {
    format!("{:016x}", f64_checksum(logits))
}

/// Seed for twig weights, decorrelated from the base-model stream.
fn twig_seed(seed: u64) -> u64 {
    seed ^ 0x7719_c0de
}

fn base_model(spec: &RunSpec) -> Result<Model> {
    match &spec.weights {
        Some(path) => io::load_model(path),
        None => init_model(&spec.model, spec.seed),
    }
}

fn twig_model(spec: &RunSpec) -> Result<TwigModel> {
    match &spec.weights {
        Some(path) => io::load_twig_model(path),
        None => {
            let base = init_model(&spec.model, spec.seed)?;
            attach_twig(base, spec.twig, twig_seed(spec.seed))
        }
    }
}

/// Twig-guided prune plan for a concrete twig model (the selection depth is
/// pinned to its shallow depth).
fn ttp_prune_for(tm: &TwigModel, spec: &RunSpec) -> PruneConfig {
    PruneConfig {
        prune_layer: tm.shared_depth(),
        retained: spec.prune_r,
        final_wipe: spec.prune_kf,
        selection_depth: tm.cfg().shallow_depth(),
    }
}

fn write_out(path: &Option<String>, body: &str) -> Result<()> {
    match path {
        Some(p) => {
            File::create(p)?.write_all(body.as_bytes())?;
            Ok(())
        }
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------- gen ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GenMode {
    Greedy,
    Fastv,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Generation mode: plain greedy or attention-pruned.
    #[arg(long, value_enum, default_value = "greedy")]
    pub mode: GenMode,
}

#[derive(Serialize)]
struct GenOutput {
    command: &'static str,
    seed: u64,
    mode: &'static str,
    num_tokens: usize,
    tokens: Vec<TokenId>,
    logit_checksum: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    kept_visual: Option<Vec<usize>>,
}

pub fn run_gen(args: GenArgs) -> Result<()> {
    let spec = RunSpec::resolve(&args.common)?;
    let model = base_model(&spec)?;
    let prompt = random_prompt(model.config(), &spec.layout, spec.seed);
    let out = match args.mode {
        GenMode::Greedy => {
            let (tokens, logits) =
                greedy_generate_full(&model, &prompt, &spec.layout, spec.max_tokens)?;
            GenOutput {
                command: "gen",
                seed: spec.seed,
                mode: "greedy",
                num_tokens: tokens.len(),
                tokens,
                logit_checksum: checksum_hex(logits.last()),
                kept_visual: None,
            }
        }
        GenMode::Fastv => {
            let result = fastv_generate(
                &model,
                &prompt,
                &spec.layout,
                &spec.fastv_prune(),
                spec.max_tokens,
            )?;
            GenOutput {
                command: "gen",
                seed: spec.seed,
                mode: "fastv",
                num_tokens: result.tokens.len(),
                tokens: result.tokens,
                logit_checksum: checksum_hex(result.last_logits.last()),
                kept_visual: Some(result.kept_visual),
            }
        }
    };
    if let Some(path) = &spec.save_weights {
        io::save_model(path, &model)?;
    }
    println!("{}", serde_json::to_string(&out).expect("serialize"));
    Ok(())
}

// ---------------------------------------------------------------- ssd ----

#[derive(Debug, Args)]
pub struct SsdArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Re-run the pruned target greedily and compare token-for-token.
    #[arg(long)]
    pub verify_against_greedy: bool,
    /// Write a JSONL trace (one object per iteration plus a summary).
    #[arg(long)]
    pub trace_out: Option<String>,
}

#[derive(Serialize)]
struct SsdSummary {
    command: &'static str,
    seed: u64,
    delta: usize,
    theta: f64,
    num_tokens: usize,
    tokens: Vec<TokenId>,
    iterations: usize,
    tok_ar: f64,
    target_forwards: usize,
    kept_visual: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    equivalence: Option<&'static str>,
}

fn write_trace(path: &str, out: &SsdOutput, rate: f64) -> Result<()> {
    let mut file = File::create(path)?;
    for record in &out.trace.iterations {
        writeln!(file, "{}", serde_json::to_string(record).expect("serialize"))?;
    }
    let summary = serde_json::json!({
        "tokens": out.tokens.len(),
        "iterations": out.trace.iterations.len(),
        "tok_ar": rate,
        "target_forwards": out.trace.target_forwards,
    });
    writeln!(file, "{summary}")?;
    Ok(())
}

pub fn run_ssd(args: SsdArgs) -> Result<()> {
    let spec = RunSpec::resolve(&args.common)?;
    let tm = twig_model(&spec)?;
    if let Some(k) = args.common.k {
        if k != tm.shared_depth() {
            return Err(Error::Config(format!(
                "speculative decoding prunes at the twig's shared depth {}; got --k {k}",
                tm.shared_depth()
            )));
        }
    }
    let prune = ttp_prune_for(&tm, &spec);
    let prompt = random_prompt(tm.base().config(), &spec.layout, spec.seed);
    let out = ssd_generate(&tm, &prompt, &spec.layout, &prune, &spec.ssd, spec.max_tokens)?;
    let rate = tok_ar(&out.trace)?;

    let equivalence = if args.verify_against_greedy {
        let oracle = target_greedy_generate(&tm, &prompt, &spec.layout, &prune, spec.max_tokens)?;
        Some(if oracle == out.tokens { "pass" } else { "fail" })
    } else {
        None
    };
    if let Some(path) = &args.trace_out {
        write_trace(path, &out, rate)?;
    }
    if let Some(path) = &spec.save_weights {
        io::save_twig_model(path, &tm)?;
    }
    let summary = SsdSummary {
        command: "ssd",
        seed: spec.seed,
        delta: spec.ssd.delta,
        theta: spec.ssd.theta,
        num_tokens: out.tokens.len(),
        tokens: out.tokens,
        iterations: out.trace.iterations.len(),
        tok_ar: rate,
        target_forwards: out.trace.target_forwards,
        kept_visual: out.kept_visual,
        equivalence,
    };
    println!("{}", serde_json::to_string(&summary).expect("serialize"));
    if equivalence == Some("fail") {
        return Err(Error::Internal("speculative output diverged from greedy target".into()));
    }
    Ok(())
}

// -------------------------------------------------------- prune-solve ----

#[derive(Debug, Args)]
pub struct PruneSolveArgs {
    /// Target layer-averaged retained token count.
    #[arg(long)]
    pub target_rbar: usize,
    /// Visual token count M.
    #[arg(long)]
    pub m: usize,
    /// Pruning layer K.
    #[arg(long)]
    pub k: usize,
    /// FinalWipe layer K_f.
    #[arg(long)]
    pub kf: usize,
    /// Total layer count L.
    #[arg(long)]
    pub l: usize,
    /// Textual token count for the occupancy column (informational).
    #[arg(long, default_value_t = 0)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct PruneSolveOutput {
    command: &'static str,
    seed: u64,
    target_rbar: usize,
    m: usize,
    k: usize,
    kf: usize,
    l: usize,
    r: usize,
    rbar_check: usize,
    occupancy: Vec<OccupancyRow>,
}

#[derive(Serialize)]
struct OccupancyRow {
    layer: usize,
    visual: usize,
    text: usize,
}

pub fn run_prune_solve(args: PruneSolveArgs) -> Result<()> {
    let r = solve_r(args.target_rbar, args.m, args.k, args.kf, args.l)?;
    let rbar_check = avg_retained_finalwipe(args.m, args.k, r, args.kf, args.l)?;
    let cfg = PruneConfig {
        prune_layer: args.k,
        retained: r,
        final_wipe: Some(args.kf),
        selection_depth: args.k.max(1),
    };
    let occupancy = layer_occupancy(args.m, args.n, &cfg, args.l)
        .into_iter()
        .enumerate()
        .map(|(i, (visual, text))| OccupancyRow { layer: i + 1, visual, text })
        .collect();
    let out = PruneSolveOutput {
        command: "prune-solve",
        seed: args.seed.unwrap_or(0),
        target_rbar: args.target_rbar,
        m: args.m,
        k: args.k,
        kf: args.kf,
        l: args.l,
        r,
        rbar_check,
        occupancy,
    };
    println!("{}", serde_json::to_string(&out).expect("serialize"));
    Ok(())
}

// -------------------------------------------------------------- train ----

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_ratio: Option<f64>,
    /// Number of synthetic examples in the dataset.
    #[arg(long, default_value_t = 64)]
    pub examples: usize,
    /// Response length of each synthetic example.
    #[arg(long, default_value_t = 8)]
    pub response_len: usize,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<String>,
}

pub fn run_train(args: TrainArgs) -> Result<()> {
    let spec = RunSpec::resolve(&args.common)?;
    let mut tm = twig_model(&spec)?;
    let defaults = TrainConfig::default();
    let train_cfg = TrainConfig {
        peak_lr: args.lr.unwrap_or(defaults.peak_lr),
        warmup_ratio: args.warmup_ratio.unwrap_or(defaults.warmup_ratio),
        steps: args.steps,
        batch_size: args.batch_size,
        seed: spec.seed,
        ..defaults
    };
    let dataset = copy_task_dataset(
        tm.base().config().vocab_size,
        &spec.layout,
        args.response_len,
        args.examples,
        spec.seed,
    );
    let losses = train_twig(&mut tm, &dataset, &train_cfg)?;

    let mut body = format!("# seed={}\nstep,lr,loss\n", spec.seed);
    for (step, loss) in losses.iter().enumerate() {
        body.push_str(&format!("{step},{},{loss}\n", lr_at(&train_cfg, step)));
    }
    write_out(&args.out, &body)?;
    if let Some(path) = &spec.save_weights {
        io::save_twig_model(path, &tm)?;
    }
    Ok(())
}

// -------------------------------------------------------------- bench ----

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated response lengths to sweep.
    #[arg(long, default_value = "8,16,32,64")]
    pub s_list: String,
    /// Label for the config_id column.
    #[arg(long, default_value = "default")]
    pub config_id: String,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<String>,
}

struct BenchRow {
    s: usize,
    prefill_s: f64,
    decode_s: f64,
    tokens: usize,
    tok_ar: f64,
    target_forwards: usize,
    flops_pruned: u64,
    flops_full: u64,
}

fn bench_threads() -> usize {
    std::env::var("TWIG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn bench_one(spec: &RunSpec, tm: &TwigModel, s: usize) -> Result<BenchRow> {
    let cfg = tm.base().config();
    let prompt = random_prompt(cfg, &spec.layout, spec.seed);
    let point = bench_decode_scaling(tm.base(), &prompt, &spec.layout, &[s])?
        .pop()
        .expect("one point per length");
    let prune = ttp_prune_for(tm, spec);
    let out = ssd_generate(tm, &prompt, &spec.layout, &prune, &spec.ssd, s)?;
    let rate = tok_ar(&out.trace)?;
    let cost = CostModel::new(cfg);
    Ok(BenchRow {
        s,
        prefill_s: point.prefill_seconds,
        decode_s: point.decode_seconds,
        tokens: out.tokens.len(),
        tok_ar: rate,
        target_forwards: out.trace.target_forwards,
        flops_pruned: cost.prefill(&spec.layout, Some(&prune)),
        flops_full: cost.prefill(&spec.layout, None),
    })
}

pub fn run_bench(args: BenchArgs) -> Result<()> {
    let spec = RunSpec::resolve(&args.common)?;
    let tm = twig_model(&spec)?;
    let lengths: Vec<usize> = args
        .s_list
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| Error::Input(format!("bad response length '{part}'")))
        })
        .collect::<Result<_>>()?;
    if lengths.is_empty() {
        return Err(Error::Input("empty --s-list".into()));
    }

    let threads = bench_threads().min(lengths.len());
    let mut rows: Vec<Option<Result<BenchRow>>> = Vec::new();
    rows.resize_with(lengths.len(), || None);
    let pending = Mutex::new((0usize, &mut rows));
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let idx = {
                    let mut guard = pending.lock().unwrap();
                    if guard.0 == lengths.len() {
                        return;
                    }
                    guard.0 += 1;
                    guard.0 - 1
                };
                let row = bench_one(&spec, &tm, lengths[idx]);
                pending.lock().unwrap().1[idx] = Some(row);
            });
        }
    });

    let mut body = format!(
        "# seed={}\nconfig_id,s,prefill_s,decode_s,tokens,tok_ar,target_forwards,\
         flops_prefill_pruned,flops_prefill_full\n",
        spec.seed
    );
    for slot in rows {
        let row = slot.expect("worker filled every slot")?;
        body.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            args.config_id,
            row.s,
            row.prefill_s,
            row.decode_s,
            row.tokens,
            row.tok_ar,
            row.target_forwards,
            row.flops_pruned,
            row.flops_full
        ));
    }
    write_out(&args.out, &body)?;
    Ok(())
}

// -------------------------------------------------------- export-attn ----

#[derive(Debug, Args)]
pub struct ExportAttnArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Base-model layer (1-based) whose attention guides the scores.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Use the last twig layer's attention instead of a base-model layer.
    #[arg(long)]
    pub twig_attn: bool,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<String>,
}

pub fn run_export_attn(args: ExportAttnArgs) -> Result<()> {
    let spec = RunSpec::resolve(&args.common)?;
    let scores = if args.twig_attn {
        let tm = twig_model(&spec)?;
        let prompt = random_prompt(tm.base().config(), &spec.layout, spec.seed);
        let prune = ttp_prune_for(&tm, &spec);
        let session = ttp_prefill(&tm, &prompt, &spec.layout, &prune)?;
        session.selection_scores().to_vec()
    } else {
        let model = base_model(&spec)?;
        let depth = args.layer.unwrap_or_else(|| spec.fastv_prune().selection_depth);
        if depth < 1 || depth > model.config().num_layers {
            return Err(Error::Input(format!(
                "layer {depth} out of range 1..={}",
                model.config().num_layers
            )));
        }
        let prompt = random_prompt(model.config(), &spec.layout, spec.seed);
        let out = prefill(&model, &prompt, &[depth - 1])?;
        aggregate_attention(&out.attn[&(depth - 1)], &spec.layout)?
    };
    let kept = top_r_select(&scores, spec.prune_r.min(scores.len()))?;
    let mut body = format!("# seed={}\nindex,score,kept\n", spec.seed);
    for (index, score) in scores.iter().enumerate() {
        let flag = kept.binary_search(&index).is_ok();
        body.push_str(&format!("{index},{score},{flag}\n"));
    }
    write_out(&args.out, &body)?;
    Ok(())
}

// -------------------------------------------------------------- flops ----

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Serialize)]
struct FlopsOutput {
    command: &'static str,
    seed: u64,
    full: u64,
    pruned: u64,
    ratio: f64,
    per_layer: Vec<LayerFlops>,
}

#[derive(Serialize)]
struct LayerFlops {
    layer: usize,
    visual: usize,
    text: usize,
    flops: u64,
}

pub fn run_flops(args: FlopsArgs) -> Result<()> {
    let spec = RunSpec::resolve(&args.common)?;
    let cost = CostModel::new(&spec.model);
    let prune = spec.fastv_prune();
    prune.validate(spec.layout.num_visual, spec.model.num_layers)?;
    let full = cost.prefill(&spec.layout, None);
    let pruned = cost.prefill(&spec.layout, Some(&prune));
    let per_layer = layer_occupancy(
        spec.layout.num_visual,
        spec.layout.num_text,
        &prune,
        spec.model.num_layers,
    )
    .into_iter()
    .enumerate()
    .map(|(i, (visual, text))| LayerFlops {
        layer: i + 1,
        visual,
        text,
        flops: flops_layer(spec.model.hidden_dim, spec.model.ffn_dim, visual + text, visual + text),
    })
    .collect();
    let out = FlopsOutput {
        command: "flops",
        seed: spec.seed,
        full,
        pruned,
        ratio: pruned as f64 / full as f64,
        per_layer,
    };
    println!("{}", serde_json::to_string(&out).expect("serialize"));
    Ok(())
}
