//! Pipeline driver: data generation, every training stage, sampling,
//! preference-set construction, evaluation and reporting, with persisted
//! artifacts between stages.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing input artifact,
//! 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use come_core::config::{load_config, RunConfig};
use come_core::dpo;
use come_core::eval;
use come_core::model::{self, Arch, ComeConfig};
use come_core::params::{load_checkpoint, save_checkpoint, ParamStore};
use come_core::report;
use come_core::reward::{self, RewardModelSet};
use come_core::synthgui::{self, StepRecord};
use come_core::trace::{StageId, STAGES};
use come_core::training;
use come_core::vocab::Vocab;
use come_core::Error as CoreError;

#[derive(Parser)]
#[command(name = "come", about = "Channel-of-experts GUI agent pipeline", version)]
struct Cli {
    /// TOML configuration file; all keys optional, layered over defaults.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Global seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory holding all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Dotted-path config override, repeatable: --set model.hidden=32
    #[arg(long = "set", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Ss,
    Sp,
    Ad,
    Af,
}

impl StageArg {
    fn stage(self) -> StageId {
        match self {
            StageArg::Ss => StageId::Ss,
            StageArg::Sp => StageId::Sp,
            StageArg::Ad => StageId::Ad,
            StageArg::Af => StageId::Af,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic episode dataset splits.
    GenData,
    /// Pretrain the dense backbone on full traces.
    Pretrain,
    /// Fine-tune one dense specialist (FFN parameters only) from the base.
    TrainExpert {
        #[arg(long, value_enum)]
        stage: StageArg,
    },
    /// Assemble the channel model from the four specialists.
    Assemble {
        /// Assemble from four copies of the pretrained base instead of
        /// trained specialists (the no-specialist ablation arm).
        #[arg(long)]
        from_base: bool,
    },
    /// Align the channel router (router projection only).
    TrainRouter {
        /// Input checkpoint stem (default: the assembled model).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Full-trace fine-tuning with the routing regularizer.
    TrainCot {
        /// Input checkpoint stem (default: the router-aligned model).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train one stage-conditioned reward scorer.
    TrainRm {
        /// Conditioning level 0..3 (number of reasoning stages in context).
        #[arg(long, default_value_t = 0)]
        stage: usize,
        /// Skip training; reuse one dense base LM for all levels.
        #[arg(long)]
        training_free: bool,
        /// Base checkpoint stem for --training-free.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Sample and score K traces per step.
    Sample {
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Build preference pairs from the sampled sets.
    BuildDpo,
    /// Preference-train the policy against a frozen reference.
    TrainDpo {
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Greedy-decode a split and report action metrics.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Aggregate artifacts into CSV tables and SVG plots.
    Report,
}

enum CliError {
    Config(String),
    MissingArtifact { path: PathBuf, producer: String },
    Numeric(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Config(m) => format!("configuration error: {m}"),
            CliError::MissingArtifact { path, producer } => format!(
                "missing artifact {}: run `come {producer}` first",
                path.display()
            ),
            CliError::Numeric(m) => format!("numeric failure: {m}"),
            CliError::Other(m) => m.clone(),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Numeric(m) => CliError::Numeric(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    vocab: Vocab,
    out: PathBuf,
}

impl Ctx {
    fn data_path(&self, split: &str) -> PathBuf {
        self.out.join("data").join(format!("{split}.jsonl"))
    }

    fn ckpt_stem(&self, name: &str) -> PathBuf {
        self.out.join("ckpt").join(name)
    }

    fn report_path(&self, name: &str) -> PathBuf {
        self.out.join("reports").join(name)
    }

    fn load_split(&self, split: &str) -> CliResult<Vec<StepRecord>> {
        let path = self.data_path(split);
        require(&path, "gen-data")?;
        Ok(synthgui::read_jsonl(&path)?)
    }

    fn load_ckpt(&self, stem: &Path, producer: &str) -> CliResult<(ParamStore, ComeConfig)> {
        require(&stem.with_extension("json"), producer)?;
        let (store, cfg_json) = load_checkpoint(stem)?;
        let cfg = ComeConfig::from_json(&cfg_json)?;
        Ok((store, cfg))
    }

    fn save_ckpt(&self, store: &ParamStore, cfg: &ComeConfig, name: &str) -> CliResult<PathBuf> {
        let stem = self.ckpt_stem(name);
        std::fs::create_dir_all(stem.parent().unwrap()).map_err(io_err)?;
        save_checkpoint(store, &cfg.to_json(), &stem)?;
        Ok(stem)
    }

    fn write_report(&self, name: &str, content: &str) -> CliResult<()> {
        let path = self.report_path(name);
        std::fs::create_dir_all(path.parent().unwrap()).map_err(io_err)?;
        std::fs::write(&path, content).map_err(io_err)?;
        Ok(())
    }

    fn rm_set(&self) -> CliResult<RewardModelSet> {
        if self.cfg.reward.training_free {
            let stem = self.ckpt_stem("rm_base");
            let (store, cfg) = self.load_ckpt(&stem, "train-rm --training-free")?;
            Ok(RewardModelSet::training_free(store, cfg))
        } else {
            let mut stores = Vec::new();
            let mut cfg = None;
            for k in 0..4 {
                let stem = self.ckpt_stem(&format!("rm_{k}"));
                let (store, c) = self.load_ckpt(&stem, &format!("train-rm --stage {k}"))?;
                cfg = Some(c);
                stores.push(store);
            }
            Ok(RewardModelSet::training_based(stores, cfg.expect("four scorers"))?)
        }
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Other(format!("io error: {e}"))
}

fn require(path: &Path, producer: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            path: path.to_path_buf(),
            producer: producer.to_string(),
        })
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: String,
    config_hash: String,
    seed: u64,
    version: &'a str,
    wall_ms: u128,
}

fn run(cli: Cli) -> CliResult<()> {
    let vocab = Vocab::new();
    let mut cfg = load_config(cli.config.as_deref(), &cli.sets, vocab.len())
        .map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let ctx = Ctx {
        cfg,
        vocab,
        out: cli.out.clone(),
    };
    std::fs::create_dir_all(&ctx.out).map_err(io_err)?;
    // resolved configuration is part of the run's provenance
    let resolved = toml::to_string_pretty(&ctx.cfg)
        .map_err(|e| CliError::Config(format!("serialize resolved config: {e}")))?;
    std::fs::write(ctx.out.join("resolved_config.toml"), resolved).map_err(io_err)?;

    let started = Instant::now();
    let command = command_name(&cli.cmd);
    dispatch(&cli.cmd, &ctx)?;

    let manifest = RunManifest {
        command: command.clone(),
        config_hash: ctx.cfg.content_hash(),
        seed: ctx.cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
        wall_ms: started.elapsed().as_millis(),
    };
    let dir = ctx.out.join("manifests");
    std::fs::create_dir_all(&dir).map_err(io_err)?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Other(format!("manifest encode: {e}")))?;
    std::fs::write(dir.join(format!("{command}.json")), json).map_err(io_err)?;
    Ok(())
}

fn command_name(cmd: &Cmd) -> String {
    match cmd {
        Cmd::GenData => "gen-data".into(),
        Cmd::Pretrain => "pretrain".into(),
        Cmd::TrainExpert { stage } => format!("train-expert-{}", stage.stage().name()),
        Cmd::Assemble { .. } => "assemble".into(),
        Cmd::TrainRouter { .. } => "train-router".into(),
        Cmd::TrainCot { .. } => "train-cot".into(),
        Cmd::TrainRm {
            stage,
            training_free,
            ..
        } => {
            if *training_free {
                "train-rm-free".into()
            } else {
                format!("train-rm-{stage}")
            }
        }
        Cmd::Sample { .. } => "sample".into(),
        Cmd::BuildDpo => "build-dpo".into(),
        Cmd::TrainDpo { .. } => "train-dpo".into(),
        Cmd::Eval { .. } => "eval".into(),
        Cmd::Report => "report".into(),
    }
}

fn dispatch(cmd: &Cmd, ctx: &Ctx) -> CliResult<()> {
    match cmd {
        Cmd::GenData => gen_data(ctx),
        Cmd::Pretrain => pretrain(ctx),
        Cmd::TrainExpert { stage } => train_expert(ctx, stage.stage()),
        Cmd::Assemble { from_base } => assemble(ctx, *from_base),
        Cmd::TrainRouter { input } => train_router(ctx, input.as_deref()),
        Cmd::TrainCot { input } => train_cot(ctx, input.as_deref()),
        Cmd::TrainRm {
            stage,
            training_free,
            base,
        } => train_rm(ctx, *stage, *training_free, base.as_deref()),
        Cmd::Sample { policy, split } => sample(ctx, policy.as_deref(), *split),
        Cmd::BuildDpo => build_dpo(ctx),
        Cmd::TrainDpo { policy, reference } => {
            train_dpo(ctx, policy.as_deref(), reference.as_deref())
        }
        Cmd::Eval { ckpt, split } => eval_cmd(ctx, ckpt.as_deref(), *split),
        Cmd::Report => report_cmd(ctx),
    }
}

fn gen_data(ctx: &Ctx) -> CliResult<()> {
    let episodes =
        synthgui::gen_episodes(ctx.cfg.seed, ctx.cfg.data.episodes, ctx.cfg.data.difficulty);
    let (train, val, test) = synthgui::split_episodes(&episodes);
    let dir = ctx.out.join("data");
    std::fs::create_dir_all(&dir).map_err(io_err)?;
    for (name, steps) in [("train", &train), ("val", &val), ("test", &test)] {
        synthgui::write_jsonl(steps, &ctx.data_path(name))?;
    }
    println!(
        "generated {} episodes: {} train / {} val / {} test steps",
        ctx.cfg.data.episodes,
        train.len(),
        val.len(),
        test.len()
    );
    Ok(())
}

fn pretrain(ctx: &Ctx) -> CliResult<()> {
    let train = ctx.load_split("train")?;
    let val = ctx.load_split("val")?;
    let mut store = model::init_params(&ctx.cfg.model, Arch::Dense, ctx.cfg.seed)?;
    let rows = training::pretrain_dense(
        &mut store,
        &ctx.cfg.model,
        &ctx.vocab,
        &train,
        &val,
        &ctx.cfg.pretrain,
    )?;
    ctx.save_ckpt(&store, &ctx.cfg.model, "base")?;
    ctx.write_report("pretrain.csv", &report::stage_report_csv(&rows))?;
    print_last_losses(&rows);
    Ok(())
}

fn train_expert(ctx: &Ctx, stage: StageId) -> CliResult<()> {
    let train = ctx.load_split("train")?;
    let val = ctx.load_split("val")?;
    let (mut store, _) = ctx.load_ckpt(&ctx.ckpt_stem("base"), "pretrain")?;
    let rows = training::expert_ft(
        &mut store,
        &ctx.cfg.model,
        &ctx.vocab,
        stage,
        &train,
        &val,
        &ctx.cfg.expert_ft,
    )?;
    let name = format!("expert_{}", stage.name());
    ctx.save_ckpt(&store, &ctx.cfg.model, &name)?;
    ctx.write_report(&format!("{name}.csv"), &report::stage_report_csv(&rows))?;
    print_last_losses(&rows);
    Ok(())
}

fn assemble(ctx: &Ctx, from_base: bool) -> CliResult<()> {
    let specialists: Vec<ParamStore> = if from_base {
        let (base, _) = ctx.load_ckpt(&ctx.ckpt_stem("base"), "pretrain")?;
        vec![base; STAGES.len()]
    } else {
        STAGES
            .iter()
            .map(|s| {
                let stem = ctx.ckpt_stem(&format!("expert_{}", s.name()));
                Ok(ctx
                    .load_ckpt(&stem, &format!("train-expert --stage {}", s.name()))?
                    .0)
            })
            .collect::<CliResult<_>>()?
    };
    let refs: Vec<&ParamStore> = specialists.iter().collect();
    let come = model::assemble_from_experts(&refs, &ctx.cfg.model, ctx.cfg.seed)?;
    ctx.save_ckpt(&come, &ctx.cfg.model, "assembled")?;
    println!(
        "assembled {} channels, {} parameter values",
        ctx.cfg.model.experts,
        come.total_values()
    );
    Ok(())
}

fn train_router(ctx: &Ctx, input: Option<&Path>) -> CliResult<()> {
    let stem = input
        .map(Path::to_path_buf)
        .unwrap_or(ctx.ckpt_stem("assembled"));
    let (mut store, cfg) = ctx.load_ckpt(&stem, "assemble")?;
    let train = ctx.load_split("train")?;
    let val = ctx.load_split("val")?;
    let rows = training::router_ft(&mut store, &cfg, &ctx.vocab, &train, &val, &ctx.cfg.router_ft)?;
    ctx.save_ckpt(&store, &cfg, "router")?;
    ctx.write_report("router.csv", &report::stage_report_csv(&rows))?;
    if let Some(acc) = rows
        .iter()
        .rev()
        .find_map(|r| (!r.selection_acc.is_nan()).then_some(r.selection_acc))
    {
        println!("router selection accuracy (val): {acc:.4}");
    }
    Ok(())
}

fn train_cot(ctx: &Ctx, input: Option<&Path>) -> CliResult<()> {
    let stem = input
        .map(Path::to_path_buf)
        .unwrap_or(ctx.ckpt_stem("router"));
    let (mut store, cfg) = ctx.load_ckpt(&stem, "train-router")?;
    let train = ctx.load_split("train")?;
    let val = ctx.load_split("val")?;
    let rows = training::cot_ft(&mut store, &cfg, &ctx.vocab, &train, &val, &ctx.cfg.cot_ft)?;
    ctx.save_ckpt(&store, &cfg, "cot")?;
    ctx.write_report("cot.csv", &report::stage_report_csv(&rows))?;
    print_last_losses(&rows);
    Ok(())
}

fn train_rm(ctx: &Ctx, stage: usize, training_free: bool, base: Option<&Path>) -> CliResult<()> {
    if training_free {
        let base = base.ok_or_else(|| {
            CliError::Config("--training-free needs --base <dense checkpoint stem>".into())
        })?;
        let (store, cfg) = ctx.load_ckpt(base, "train-expert --stage af")?;
        ctx.save_ckpt(&store, &cfg, "rm_base")?;
        println!("reusing {} as the shared scorer", base.display());
        return Ok(());
    }
    if stage > 3 {
        return Err(CliError::Config(format!(
            "rm stage {stage} out of range 0..=3"
        )));
    }
    let train = ctx.load_split("train")?;
    // scorers start from the pretrained backbone when their trunk
    // dimensions match it; otherwise (scale-toggle configs) from fresh
    let same_trunk = {
        let (a, b) = (&ctx.cfg.rm_model, &ctx.cfg.model);
        a.hidden == b.hidden
            && a.layers == b.layers
            && a.heads == b.heads
            && a.intermediate == b.intermediate
            && a.vocab_size == b.vocab_size
            && a.max_seq == b.max_seq
    };
    let init = if same_trunk {
        ctx.load_ckpt(&ctx.ckpt_stem("base"), "pretrain")?.0
    } else {
        model::init_params(
            &ctx.cfg.rm_model,
            Arch::Dense,
            ctx.cfg.seed ^ (0x4d << stage),
        )?
    };
    let (store, losses) = reward::train_rm(
        init,
        &ctx.cfg.rm_model,
        &ctx.vocab,
        stage,
        &train,
        &ctx.cfg.rm_ft,
    )?;
    ctx.save_ckpt(&store, &ctx.cfg.rm_model, &format!("rm_{stage}"))?;
    if let Some(last) = losses.last() {
        println!("rm_{stage} final train nll: {last:.4}");
    }
    Ok(())
}

fn sample(ctx: &Ctx, policy: Option<&Path>, split: SplitArg) -> CliResult<()> {
    let stem = policy.map(Path::to_path_buf).unwrap_or(ctx.ckpt_stem("cot"));
    let (store, cfg) = ctx.load_ckpt(&stem, "train-cot")?;
    let steps = ctx.load_split(split.name())?;
    let rms = ctx.rm_set()?;
    let sets = dpo::sample_steps(
        &store,
        &cfg,
        &rms,
        &ctx.vocab,
        &steps,
        &ctx.cfg.reward,
        &ctx.cfg.sample,
        ctx.cfg.seed,
    )?;
    dpo::write_sets_jsonl(&sets, &ctx.out.join("samples.jsonl"))?;
    let correct: usize = sets.iter().map(|s| s.correct_count()).sum();
    let total: usize = sets.iter().map(|s| s.samples.len()).sum();
    println!(
        "sampled {} sets ({} traces, {:.1}% correct)",
        sets.len(),
        total,
        100.0 * correct as f64 / total.max(1) as f64
    );
    Ok(())
}

fn build_dpo(ctx: &Ctx) -> CliResult<()> {
    let path = ctx.out.join("samples.jsonl");
    require(&path, "sample")?;
    let sets = dpo::read_sets_jsonl(&path, &ctx.vocab)?;
    let pairs = dpo::build_dpo_dataset(&sets, &ctx.cfg.strategies);
    dpo::write_pairs_jsonl(&pairs, &ctx.out.join("pairs.jsonl"))?;
    let mut by_strategy = std::collections::BTreeMap::new();
    for p in &pairs {
        *by_strategy.entry(p.strategy.name()).or_insert(0usize) += 1;
    }
    println!("built {} pairs: {:?}", pairs.len(), by_strategy);
    Ok(())
}

fn train_dpo(ctx: &Ctx, policy: Option<&Path>, reference: Option<&Path>) -> CliResult<()> {
    let pol_stem = policy.map(Path::to_path_buf).unwrap_or(ctx.ckpt_stem("cot"));
    let ref_stem = reference
        .map(Path::to_path_buf)
        .unwrap_or(ctx.ckpt_stem("cot"));
    let (mut pol, cfg) = ctx.load_ckpt(&pol_stem, "train-cot")?;
    let (reference, _) = ctx.load_ckpt(&ref_stem, "train-cot")?;
    let pairs_path = ctx.out.join("pairs.jsonl");
    require(&pairs_path, "build-dpo")?;
    let pairs = dpo::read_pairs_jsonl(&pairs_path, &ctx.vocab)?;
    let steps = ctx.load_split("train")?;
    let reports = dpo::dpo_train(
        &mut pol,
        &reference,
        &cfg,
        &ctx.vocab,
        &pairs,
        &steps,
        &ctx.cfg.dpo_ft,
        &ctx.cfg.dpo,
    )?;
    ctx.save_ckpt(&pol, &cfg, "dpo")?;
    let mut csv = String::from("epoch,pref,sft,rnorm\n");
    for r in &reports {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.epoch, r.pref, r.sft, r.rnorm
        ));
    }
    ctx.write_report("dpo.csv", &csv)?;
    if let Some(last) = reports.last() {
        println!(
            "preference training done: pref {:.4}, sft {:.4}, rnorm {:.4}",
            last.pref, last.sft, last.rnorm
        );
    }
    Ok(())
}

fn eval_cmd(ctx: &Ctx, ckpt: Option<&Path>, split: SplitArg) -> CliResult<()> {
    let stem = ckpt.map(Path::to_path_buf).unwrap_or(ctx.ckpt_stem("dpo"));
    let (store, cfg) = ctx.load_ckpt(&stem, "train-dpo")?;
    let steps = ctx.load_split(split.name())?;
    let metrics = eval::evaluate_policy(&store, &cfg, &ctx.vocab, &steps, eval::MATCH_THRESHOLD)?;
    let name = stem.file_name().unwrap().to_string_lossy().to_string();
    ctx.write_report(
        &format!("eval_{name}_{}.csv", split.name()),
        &report::metrics_csv(&metrics),
    )?;
    let (acc, confusion) = eval::router_selection_accuracy(&store, &cfg, &ctx.vocab, &steps)?;
    ctx.write_report(
        &format!("confusion_{name}_{}.csv", split.name()),
        &report::confusion_csv(&confusion),
    )?;
    println!(
        "{} on {}: type {:.4}, match {:.4}, selection {:.4} over {} steps",
        name,
        split.name(),
        metrics.type_acc,
        metrics.match_acc,
        acc,
        metrics.count
    );
    Ok(())
}

fn report_cmd(ctx: &Ctx) -> CliResult<()> {
    let pairs_path = ctx.out.join("pairs.jsonl");
    require(&pairs_path, "build-dpo")?;
    let pairs = dpo::read_pairs_jsonl(&pairs_path, &ctx.vocab)?;
    if pairs.is_empty() {
        return Err(CliError::Other("no pairs to report on".into()));
    }
    let chosen: Vec<_> = pairs.iter().map(|p| p.chosen.bundle).collect();
    let rejected: Vec<_> = pairs.iter().map(|p| p.rejected.bundle).collect();
    let rows = eval::infogain_stats(&chosen, &rejected)?;
    ctx.write_report("ig_stats.csv", &report::ig_stats_csv(&rows))?;
    let stages = ["ss", "sp", "ad", "total"];
    let series: Vec<(String, Vec<f64>)> = ["chosen", "rejected"]
        .iter()
        .map(|side| {
            (
                side.to_string(),
                stages
                    .iter()
                    .map(|st| {
                        rows.iter()
                            .find(|r| r.side == *side && r.stage == *st)
                            .map(|r| r.mean)
                            .unwrap_or(0.0)
                    })
                    .collect(),
            )
        })
        .collect();
    let svg = report::svg_grouped_bars(
        "information gain by stage",
        &stages.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        &series,
        "nats",
    );
    ctx.write_report("ig_stats.svg", &svg)?;

    // expert-distribution plot from the latest confusion table, if present
    let reports_dir = ctx.out.join("reports");
    if let Ok(entries) = std::fs::read_dir(&reports_dir) {
        let mut confusions: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .map(|n| n.to_string_lossy().starts_with("confusion_"))
                    .unwrap_or(false)
                    && p.extension().map(|x| x == "csv").unwrap_or(false)
            })
            .collect();
        confusions.sort();
        if let Some(path) = confusions.last() {
            let text = std::fs::read_to_string(path).map_err(io_err)?;
            let mut groups = Vec::new();
            let mut series: Vec<(String, Vec<f64>)> = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let cells: Vec<&str> = line.split(',').collect();
                if i == 0 {
                    for name in &cells[1..] {
                        series.push((name.to_string(), Vec::new()));
                    }
                    continue;
                }
                groups.push(cells[0].to_string());
                let total: f64 = cells[1..]
                    .iter()
                    .map(|v| v.parse::<f64>().unwrap_or(0.0))
                    .sum();
                for (slot, v) in series.iter_mut().zip(&cells[1..]) {
                    slot.1.push(v.parse::<f64>().unwrap_or(0.0) / total.max(1.0));
                }
            }
            let svg = report::svg_grouped_bars(
                "expert activation share by stage",
                &groups,
                &series,
                "share",
            );
            ctx.write_report("expert_distribution.svg", &svg)?;
        }
    }
    println!("reports written to {}", reports_dir.display());
    Ok(())
}

fn print_last_losses(rows: &[training::ReportRow]) {
    if let Some(r) = rows.iter().rev().find(|r| r.split == "train") {
        println!("{} final train nll: {:.4}", r.stage, r.loss_sft);
    }
}
