//! Command-line driver. Every subcommand is a thin wrapper over library
//! calls and prints exactly one JSON line (or a readable table with
//! `--pretty`). Exit status is 0 on success, 2 on usage or validation
//! errors and 1 on any other failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use goalpipe::config::RunConfig;
use goalpipe::dataset::{
    build_diversity_dataset, embed_dataset, load_configs, load_embeddings, sample_random_policy, sample_uniform, save_configs,
    save_embeddings, EmbeddingStore,
};
use goalpipe::distill::{train, DistilledModel};
use goalpipe::env::{Configuration, Encoder, Env};
use goalpipe::goalgen::{generate_goal, retrieve_topk, GoalOptions, Stage};
use goalpipe::par;
use goalpipe::provider::{Concept, ConceptLibrary, Split};
use goalpipe::rl::{
    evaluate_lca, measure_speed, ppo_train, Policy, PpoHyper, RewardSpec, Scorer, TaskSource, TrainLog, Variant, VariantAgents,
};
use goalpipe::{Error, Result};
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(name = "goalpipe", version, about = "Text-to-goal pipeline and language-conditioned agents")]
pub struct Cli {
    /// Run configuration JSON; overrides the GOALPIPE_CONFIG variable.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Print a human-readable summary instead of a JSON line.
    #[arg(long, global = true)]
    pub pretty: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    RandomPolicy,
    Uniform,
    Diversity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RewardKind {
    /// Time difference of approximate scores.
    Diff,
    /// Raw approximate score of the current configuration.
    Raw,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Samples a configuration dataset.
    Sample {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also writes exact embeddings of the sampled configurations.
        #[arg(long)]
        embeddings_out: Option<PathBuf>,
    },
    /// Computes exact embeddings for a configuration file.
    Embed {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the distilled model.
    Distill {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Builds the concept library.
    Concepts {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-k retrieval of stored configurations for a concept.
    Retrieve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        configs: PathBuf,
        #[arg(long)]
        concept: String,
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// Generates a goal configuration for a concept.
    Goal {
        #[arg(long)]
        concept: String,
        #[arg(long, value_parser = parse_stage)]
        stop_after: Option<Stage>,
    },
    /// Trains the goal-conditioned agent on dataset goals.
    TrainGcrl {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains the multi-task agent on the training split.
    TrainMtrl {
        #[arg(long, value_enum, default_value = "diff")]
        reward: RewardKind,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains one single-task agent per concept.
    TrainStrl {
        /// Concepts to train; all concepts when omitted.
        #[arg(long, value_delimiter = ',')]
        concepts: Vec<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluates trained agents on the concept library.
    Eval {
        #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
        variants: Vec<Variant>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Outcome of one invocation: exit status and the text to print.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub status: i32,
    pub output: String,
}

/// Validation failures map to status 2; everything else to 1.
pub fn exit_status(err: &Error) -> i32 {
    match err {
        Error::ConfigInvalid(_) | Error::UnknownConcept(_) | Error::KOutOfRange { .. } => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let status = if e.use_stderr() { 2 } else { 0 };
            return Outcome {
                status,
                output: e.to_string().trim_end().to_string(),
            };
        }
    };
    let pretty = cli.pretty;
    match execute(cli) {
        Ok(v) => Outcome {
            status: 0,
            output: if pretty { render_pretty(&v) } else { v.to_string() },
        },
        Err(e) => Outcome {
            status: exit_status(&e),
            output: json!({ "ok": false, "error": e.to_string() }).to_string(),
        },
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => RunConfig::load(p),
        None => RunConfig::from_env(),
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Artifacts loaded for goal generation.
pub struct GoalInputs {
    pub library: ConceptLibrary,
    pub store: EmbeddingStore,
    pub configs: Vec<Configuration>,
    pub model: DistilledModel,
    pub encoder: Encoder,
}

impl GoalInputs {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            library: ConceptLibrary::load(&cfg.paths.concepts())?,
            store: load_embeddings(&cfg.paths.embeddings())?,
            configs: load_configs(&cfg.paths.configs())?.configs,
            model: DistilledModel::load(&cfg.paths.model())?,
            encoder: cfg.encoder()?,
        })
    }
}

/// Goal per concept for one GCRL variant: retrieval from the
/// random-policy dataset, or retrieval, finetuning or selection on the
/// diversity dataset.
pub fn variant_goals(
    variant: Variant,
    concepts: &[Concept],
    diversity: (&EmbeddingStore, &[Configuration]),
    random: Option<(&EmbeddingStore, &[Configuration])>,
    model: &DistilledModel,
    encoder: &Encoder,
    options: &GoalOptions,
) -> Result<BTreeMap<String, Configuration>> {
    let (source, stage) = match variant {
        Variant::GcrlR => (random.ok_or_else(|| Error::MissingArtifact("random-policy dataset".into()))?, Stage::Retrieve),
        Variant::GcrlD => (diversity, Stage::Retrieve),
        Variant::GcrlF => (diversity, Stage::Finetune),
        Variant::GcrlS => (diversity, Stage::Select),
        other => return Err(Error::ConfigInvalid(format!("{} is not goal-conditioned", other.label()))),
    };
    let opts = GoalOptions {
        stop_after: stage,
        ..options.clone()
    };
    concepts
        .iter()
        .map(|c| {
            let out = generate_goal(&c.query(), source.0, source.1, model, encoder, &opts)?;
            Ok((c.name.clone(), out.goal.config))
        })
        .collect()
}

fn summarize(log: &TrainLog, out: &Path) -> Value {
    let tail: Vec<f64> = log.updates.iter().rev().take(5).filter_map(|u| u.mean_episode_return).collect();
    let final_return = (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64);
    json!({
        "out": out.display().to_string(),
        "env_steps": log.env_steps,
        "episodes": log.episodes,
        "updates": log.updates.len(),
        "final_mean_return": final_return,
    })
}

fn hyper_with(base: &PpoHyper, steps: Option<usize>) -> PpoHyper {
    PpoHyper {
        total_steps: steps.unwrap_or(base.total_steps),
        ..base.clone()
    }
}

fn execute(cli: Cli) -> Result<Value> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::ConfigInvalid("--threads must be positive".into()));
        }
        par::set_threads(n);
    }
    let cfg = load_config(&cli)?;
    let env = Env::new(cfg.env);
    match cli.command {
        Command::Sample {
            method,
            n,
            seed,
            out,
            embeddings_out,
        } => {
            if n == 0 {
                return Err(Error::ConfigInvalid("--n must be positive".into()));
            }
            let encoder = cfg.encoder()?;
            let (configs, store) = match method {
                Method::RandomPolicy => (sample_random_policy(&env, n, seed).configs, None),
                Method::Uniform => (sample_uniform(n, seed).configs, None),
                Method::Diversity => {
                    let b = build_diversity_dataset(&env, &encoder, n, seed, &cfg.dataset.diversity, &cfg.distill)?;
                    (b.dataset.configs, Some(b.store))
                }
            };
            ensure_parent(&out)?;
            save_configs(&out, &configs)?;
            if let Some(path) = &embeddings_out {
                let store = match store {
                    Some(s) => s,
                    None => embed_dataset(&encoder, &configs)?,
                };
                ensure_parent(path)?;
                save_embeddings(path, &store)?;
            }
            Ok(json!({ "count": configs.len(), "out": out.display().to_string(), "seed": seed }))
        }
        Command::Embed { configs, out } => {
            let ds = load_configs(&configs)?;
            let store = embed_dataset(&cfg.encoder()?, &ds.configs)?;
            ensure_parent(&out)?;
            save_embeddings(&out, &store)?;
            Ok(json!({ "rows": store.rows(), "dim": store.dim(), "out": out.display().to_string() }))
        }
        Command::Distill {
            configs,
            embeddings,
            out,
            epochs,
        } => {
            let ds = load_configs(&configs)?;
            let store = load_embeddings(&embeddings)?;
            let mut hyper = cfg.distill.clone();
            if let Some(e) = epochs {
                hyper.epochs = e;
            }
            let (model, report) = train(&ds.configs, store.matrix().view(), &hyper)?;
            ensure_parent(&out)?;
            model.save(&out)?;
            to_value(&report)
        }
        Command::Concepts { out } => {
            let lib = ConceptLibrary::build(&cfg.encoder()?, cfg.concepts_seed)?;
            let out = out.unwrap_or_else(|| cfg.paths.concepts());
            ensure_parent(&out)?;
            lib.save(&out)?;
            Ok(json!({
                "count": lib.len(),
                "train": lib.split(Split::Train).count(),
                "test": lib.split(Split::Test).count(),
                "out": out.display().to_string(),
            }))
        }
        Command::Retrieve { store, configs, concept, k } => {
            let lib = ConceptLibrary::load(&cfg.paths.concepts())?;
            let query = lib.lookup(&concept)?;
            let store = load_embeddings(&store)?;
            let ds = load_configs(&configs)?;
            if ds.len() != store.rows() {
                return Err(Error::Misaligned(format!("{} configurations vs {} embeddings", ds.len(), store.rows())));
            }
            let hits = retrieve_topk(&store, &query, k)?;
            let configs: Vec<Configuration> = hits.indices.iter().map(|&i| ds.configs[i]).collect();
            Ok(json!({ "concept": concept, "indices": hits.indices, "scores": hits.scores, "configs": configs }))
        }
        Command::Goal { concept, stop_after } => {
            let inputs = GoalInputs::load(&cfg)?;
            let query = inputs.library.lookup(&concept)?;
            let options = GoalOptions {
                stop_after: stop_after.unwrap_or(cfg.goal.stop_after),
                ..cfg.goal.clone()
            };
            let outcome = generate_goal(&query, &inputs.store, &inputs.configs, &inputs.model, &inputs.encoder, &options)?;
            to_value(&outcome)
        }
        Command::TrainGcrl { steps, out } => {
            let goals = load_configs(&cfg.paths.configs())?.configs;
            let hyper = hyper_with(&cfg.rl.gcrl, steps);
            let (policy, log) = ppo_train(&env, RewardSpec::GoalDistance, &TaskSource::Goals(goals), &hyper, cfg.rl.seed)?;
            let out = out.unwrap_or_else(|| cfg.paths.gcrl());
            ensure_parent(&out)?;
            policy.save(&out)?;
            Ok(summarize(&log, &out))
        }
        Command::TrainMtrl { reward, steps, out } => {
            let lib = ConceptLibrary::load(&cfg.paths.concepts())?;
            let model = DistilledModel::load(&cfg.paths.model())?;
            let queries = lib.split(Split::Train).map(Concept::query).collect();
            let scorer = Scorer::Distilled(&model);
            let (spec, default_out) = match reward {
                RewardKind::Diff => (RewardSpec::ScoreDifference(scorer), cfg.paths.mtrl()),
                RewardKind::Raw => (RewardSpec::RawScore(scorer), cfg.paths.mtrl_raw()),
            };
            let hyper = hyper_with(&cfg.rl.mtrl, steps);
            let (policy, log) = ppo_train(&env, spec, &TaskSource::Queries(queries), &hyper, cfg.rl.seed)?;
            let out = out.unwrap_or(default_out);
            ensure_parent(&out)?;
            policy.save(&out)?;
            Ok(summarize(&log, &out))
        }
        Command::TrainStrl { concepts, steps } => {
            let lib = ConceptLibrary::load(&cfg.paths.concepts())?;
            let model = DistilledModel::load(&cfg.paths.model())?;
            let names: Vec<String> = if concepts.is_empty() {
                lib.entries.iter().map(|c| c.name.clone()).collect()
            } else {
                concepts
            };
            let hyper = hyper_with(&cfg.rl.strl, steps);
            let mut trained = Vec::new();
            for name in &names {
                let query = lib.lookup(name)?;
                let (policy, log) = ppo_train(
                    &env,
                    RewardSpec::ScoreDifference(Scorer::Distilled(&model)),
                    &TaskSource::Single(query),
                    &hyper,
                    cfg.rl.seed,
                )?;
                let out = cfg.paths.strl(name);
                ensure_parent(&out)?;
                policy.save(&out)?;
                let mut s = summarize(&log, &out);
                s["concept"] = json!(name);
                trained.push(s);
            }
            Ok(json!({ "trained": trained }))
        }
        Command::Eval { variants, episodes, out } => {
            let variants = if variants.is_empty() { Variant::ALL.to_vec() } else { variants };
            let episodes = episodes.unwrap_or(cfg.rl.eval_episodes);
            let inputs = GoalInputs::load(&cfg)?;
            let concepts = inputs.library.entries.clone();
            let needs_random = variants.contains(&Variant::GcrlR);
            let random = if needs_random {
                Some((load_embeddings(&cfg.paths.random_embeddings())?, load_configs(&cfg.paths.random_configs())?.configs))
            } else {
                None
            };
            let load = |p: PathBuf| Policy::load(&p);
            let gcrl = if variants.iter().any(|v| matches!(v, Variant::GcrlR | Variant::GcrlD | Variant::GcrlF | Variant::GcrlS)) {
                Some(load(cfg.paths.gcrl())?)
            } else {
                None
            };
            let mtrl = if variants.iter().any(|v| matches!(v, Variant::MtrlTrain | Variant::MtrlTest)) {
                Some(load(cfg.paths.mtrl())?)
            } else {
                None
            };
            let mut strl = BTreeMap::new();
            if variants.contains(&Variant::Strl) {
                for c in &concepts {
                    let p = cfg.paths.strl(&c.name);
                    if p.exists() {
                        strl.insert(c.name.clone(), Policy::load(&p)?);
                    }
                }
                if strl.is_empty() {
                    return Err(Error::MissingArtifact("no single-task checkpoints".into()));
                }
            }
            let mut agents = Vec::new();
            for &v in &variants {
                agents.push(match v {
                    Variant::GcrlR | Variant::GcrlD | Variant::GcrlF | Variant::GcrlS => {
                        let goals = variant_goals(
                            v,
                            &concepts,
                            (&inputs.store, &inputs.configs),
                            random.as_ref().map(|(s, c)| (s, c.as_slice())),
                            &inputs.model,
                            &inputs.encoder,
                            &cfg.goal,
                        )?;
                        VariantAgents::gcrl(v, gcrl.as_ref().expect("loaded"), &goals)
                    }
                    Variant::MtrlTrain | Variant::MtrlTest => VariantAgents::mtrl(v, mtrl.as_ref().expect("loaded"), &concepts),
                    Variant::Strl => VariantAgents::strl(&strl, &concepts),
                });
            }
            let mut report = evaluate_lca(
                &env,
                &agents,
                &concepts,
                &inputs.encoder,
                &inputs.model,
                episodes,
                cfg.rl.eval_seed,
                cfg.rl.mtrl.gamma,
            )?;
            let batch: Vec<Configuration> = inputs.configs.iter().take(256).copied().collect();
            report.speed = Some(measure_speed(&inputs.model, &inputs.encoder, &batch, 5)?);
            let out = out.unwrap_or_else(|| cfg.paths.report());
            ensure_parent(&out)?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            Ok(json!({
                "out": out.display().to_string(),
                "action_mode": report.action_mode,
                "aggregate": report.aggregate,
                "win_rates": report.win_rates,
                "speed": report.speed,
            }))
        }
    }
}

/// Readable rendering: objects become `key: value` lines and arrays of
/// objects become aligned tables.
pub fn render_pretty(v: &Value) -> String {
    let mut out = String::new();
    match v {
        Value::Object(map) => {
            for (k, val) in map {
                match val {
                    Value::Array(rows) if rows.iter().all(Value::is_object) && !rows.is_empty() => {
                        out.push_str(&format!("{k}:\n{}", table(rows)));
                    }
                    Value::Object(_) => out.push_str(&format!("{k}:\n{}", indent(&render_pretty(val)))),
                    _ => out.push_str(&format!("{k}: {}\n", scalar(val))),
                }
            }
        }
        other => out.push_str(&format!("{}\n", scalar(other))),
    }
    out.trim_end().to_string()
}

fn scalar(v: &Value) -> String {
    match v {
        Value::Number(n) => match n.as_f64() {
            Some(f) if n.is_f64() => format!("{f:.4}"),
            _ => n.to_string(),
        },
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        other => other.to_string(),
    }
}

fn indent(s: &str) -> String {
    s.lines().map(|l| format!("  {l}\n")).collect()
}

fn table(rows: &[Value]) -> String {
    let mut cols: Vec<String> = Vec::new();
    for r in rows {
        for k in r.as_object().expect("object rows").keys() {
            if !cols.contains(k) {
                cols.push(k.clone());
            }
        }
    }
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| cols.iter().map(|c| r.get(c).map_or("-".into(), scalar)).collect())
        .collect();
    let widths: Vec<usize> = cols
        .iter()
        .enumerate()
        .map(|(i, c)| cells.iter().map(|r| r[i].len()).chain([c.len()]).max().unwrap_or(0))
        .collect();
    let line = |vals: Vec<&str>| {
        let parts: Vec<String> = vals.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
        format!("  {}\n", parts.join("  ").trim_end())
    };
    let mut out = line(cols.iter().map(String::as_str).collect());
    for r in &cells {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}
