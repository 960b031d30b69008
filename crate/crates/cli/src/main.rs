//! Command-line surface: parameter counting, storage budgeting, truncated
//! SVD, adapter init/train/merge, the initialization ablation sweep, and the
//! checkpoint registry.
//!
//! Exit codes: 0 success, 1 runtime or integrity failure, 2 usage error.

mod config;
mod matio;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use loraxs_core::accounting::{
    count_params, format_bytes_binary, param_ratio, storage_budget, Method, ModelSpec,
};
use loraxs_core::adapter::{init_loraxs_random, init_loraxs_svd, Adapter, InitKind, LoraXsAdapter};
use loraxs_core::digest::to_hex;
use loraxs_core::experiments::{
    build_model, gen_task, make_adapter, records_to_csv, run_ablation, summarize, summary_table,
    summary_to_csv, AblationConfig, AlphaRule,
};
use loraxs_core::linalg::{truncated_svd, Matrix, DEFAULT_SVD_ITERS};
use loraxs_core::registry::{
    attach_checkpoint, load_checkpoint, save_checkpoint, save_tensors, Registry, SaveOptions,
    StorageDtype, VerifyStatus,
};
use loraxs_core::training::{eval_metric, train_with_options};

#[derive(Parser)]
#[command(name = "loraxs", version, about = "Latent low-rank adapter toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Format {
    Plain,
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Exact trainable-parameter count for a method and model shape.
    Count(CountArgs),
    /// Checkpoint and fleet storage from a parameter count.
    Budget(BudgetArgs),
    /// Randomized truncated SVD of a weight file.
    Svd(SvdArgs),
    /// Build adapters for weight files and write a checkpoint.
    Init(InitArgs),
    /// Train an adapter on a synthetic task described by a config file.
    Train(TrainArgs),
    /// Fold a checkpoint's adapters into base weights.
    Merge(MergeArgs),
    /// SVD-versus-random initialization sweep.
    Ablate(AblateArgs),
    /// Checkpoint registry operations.
    Registry(RegistryArgs),
}

#[derive(Args)]
struct CountArgs {
    #[arg(long)]
    method: Method,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    layers: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    modules: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    hidden: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    rank: u64,
    /// Print count(method) / count(RATIO_TO) instead of the raw count.
    #[arg(long)]
    ratio_to: Option<Method>,
    #[arg(long, value_enum, default_value = "plain")]
    format: Format,
}

#[derive(Args)]
struct BudgetArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    params: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    bytes_per_param: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    models: u64,
    /// Label the report with the method the count came from.
    #[arg(long)]
    method: Option<Method>,
    #[arg(long, value_enum, default_value = "plain")]
    format: Format,
}

#[derive(Args)]
struct SvdArgs {
    /// Weight matrix (.txt for whitespace text, .lxsw binary otherwise).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    rank: u64,
    #[arg(long, default_value_t = DEFAULT_SVD_ITERS)]
    n_iter: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Factors file holding tensors u, s, vt.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct InitArgs {
    /// Module weight as name=path; repeat for several modules.
    #[arg(long = "weights", value_parser = parse_named_path, required = true)]
    weights: Vec<(String, PathBuf)>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    rank: u64,
    /// Scaling hyperparameter; defaults to the rank.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 1e-5)]
    sigma: f64,
    #[arg(long, default_value = "svd")]
    init: InitKind,
    #[arg(long, default_value_t = 0)]
    svd_seed: u64,
    #[arg(long, default_value_t = 0)]
    r_seed: u64,
    #[arg(long, default_value = "f64")]
    dtype: StorageDtype,
    #[arg(long, default_value = "")]
    base_model_id: String,
    /// Embed the frozen projection pair (archival form).
    #[arg(long)]
    self_contained: bool,
    /// Checkpoint output path.
    #[arg(
        long,
        conflicts_with = "registry",
        required_unless_present = "registry"
    )]
    output: Option<PathBuf>,
    /// Save into this registry root instead of a bare file.
    #[arg(long)]
    registry: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config with [task], [adapter] and [train] sections.
    #[arg(long)]
    config: PathBuf,
    /// Override a config value: section.key=value. Repeatable.
    #[arg(long = "set")]
    set: Vec<String>,
    /// Write the trained adapter checkpoint here.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Save the trained checkpoint into a registry root.
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Stream epoch,step,loss,lr_multiplier rows to this file.
    #[arg(long)]
    csv_log: Option<PathBuf>,
    /// Write the task's base weights (layer0.lxsw, ...) for later merging.
    #[arg(long)]
    dump_weights: Option<PathBuf>,
}

#[derive(Args)]
struct MergeArgs {
    /// Module weight as name=path; must cover every checkpoint module.
    #[arg(long = "weights", value_parser = parse_named_path, required = true)]
    weights: Vec<(String, PathBuf)>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Write whitespace text instead of binary tensors.
    #[arg(long)]
    text: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// TOML config with [task], [ablate] and [train] sections.
    #[arg(long)]
    config: PathBuf,
    /// Override a config value: section.key=value. Repeatable.
    #[arg(long = "set")]
    set: Vec<String>,
    /// Directory for records.csv and summary.csv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Worker threads for sweep arms (default: logical cores).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_enum, default_value = "plain")]
    format: Format,
}

#[derive(Args)]
struct RegistryArgs {
    #[command(subcommand)]
    command: RegistryCommand,
    /// Registry root; falls back to the LORAXS_REGISTRY environment variable.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum RegistryCommand {
    /// List manifest entries.
    Ls {
        #[arg(long, value_enum, default_value = "plain")]
        format: Format,
    },
    /// Re-checksum every checkpoint and cross-check the manifest.
    Verify,
    /// Remove unreferenced checkpoint files (dry run unless --apply).
    Gc {
        #[arg(long)]
        apply: bool,
    },
    /// Import a checkpoint file into the registry.
    Add { file: PathBuf },
}

fn parse_named_path(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("`{s}` is not of the form name=path")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Count(args) => cmd_count(args),
        Command::Budget(args) => cmd_budget(args),
        Command::Svd(args) => cmd_svd(args),
        Command::Init(args) => cmd_init(args),
        Command::Train(args) => cmd_train(args),
        Command::Merge(args) => cmd_merge(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Registry(args) => cmd_registry(args),
    }
}

fn cmd_count(args: CountArgs) -> Result<()> {
    let spec = ModelSpec {
        layers_l: args.layers,
        modules_per_layer_q: args.modules,
        hidden_n: args.hidden,
        rank_r: args.rank,
        bytes_per_param: 2,
    };
    if let Some(denominator) = args.ratio_to {
        let ratio = param_ratio(args.method, denominator, &spec)?;
        match args.format {
            Format::Plain => println!("{ratio}"),
            Format::Json => println!(
                "{}",
                serde_json::json!({
                    "method": args.method,
                    "ratio_to": denominator,
                    "ratio": ratio,
                })
            ),
            Format::Csv => {
                println!("method,ratio_to,ratio");
                println!("{},{},{}", args.method, denominator, ratio);
            }
        }
        return Ok(());
    }
    let params = count_params(args.method, &spec)?;
    match args.format {
        Format::Plain => println!("{params}"),
        Format::Json => println!(
            "{}",
            serde_json::json!({ "method": args.method, "params": params })
        ),
        Format::Csv => {
            println!("method,params");
            println!("{},{}", args.method, params);
        }
    }
    Ok(())
}

fn cmd_budget(args: BudgetArgs) -> Result<()> {
    let mut report = storage_budget(args.params, args.bytes_per_param, args.models)?;
    report.method = args.method;
    match args.format {
        Format::Plain => println!("{report}"),
        Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        Format::Csv => {
            println!("params,bytes_per_param,bytes_per_checkpoint,n_models,fleet_bytes");
            println!(
                "{},{},{},{},{}",
                report.params,
                report.bytes_per_param,
                report.bytes_per_checkpoint,
                report.n_models,
                report.fleet_bytes
            );
        }
    }
    Ok(())
}

fn cmd_svd(args: SvdArgs) -> Result<()> {
    let w = matio::read_matrix(&args.input)?;
    let f = truncated_svd(&w, args.rank as usize, args.n_iter, args.seed)?;
    let s = Matrix::new(1, f.s.len(), f.s.clone())?;
    save_tensors(
        &args.output,
        &[("u", &f.u), ("s", &s), ("vt", &f.v.transpose())],
        StorageDtype::F64,
    )?;
    let rendered: Vec<String> = f.s.iter().map(|v| format!("{v:.6e}")).collect();
    println!("singular values: {}", rendered.join(" "));
    println!("factors written to {}", args.output.display());
    Ok(())
}

fn load_named_weights(pairs: &[(String, PathBuf)]) -> Result<BTreeMap<String, Matrix>> {
    let mut map = BTreeMap::new();
    for (name, path) in pairs {
        if map.contains_key(name) {
            bail!("duplicate module name `{name}`");
        }
        let w = matio::read_matrix(path)
            .with_context(|| format!("loading module `{name}` from {}", path.display()))?;
        map.insert(name.clone(), w);
    }
    Ok(map)
}

fn cmd_init(args: InitArgs) -> Result<()> {
    let weights = load_named_weights(&args.weights)?;
    let rank = args.rank as usize;
    let alpha = args.alpha.unwrap_or(rank as f64);
    let mut adapters = BTreeMap::new();
    for (name, w) in &weights {
        let adapter = match args.init {
            InitKind::Svd => {
                init_loraxs_svd(w, rank, alpha, args.sigma, args.svd_seed, args.r_seed)?
            }
            InitKind::Random => {
                init_loraxs_random(w.rows(), w.cols(), rank, alpha, args.sigma, args.svd_seed)?
            }
        };
        adapters.insert(name.clone(), adapter);
    }
    let opts = SaveOptions {
        base_model_id: args.base_model_id.clone(),
        storage_dtype: args.dtype,
        self_contained: args.self_contained,
    };
    let id = match (&args.output, &args.registry) {
        (Some(path), None) => save_checkpoint(&adapters, &opts, path)?,
        (None, Some(root)) => Registry::init(root)?.save_adapters(&adapters, &opts)?,
        _ => unreachable!("clap enforces exactly one destination"),
    };
    println!("{id}");
    Ok(())
}

fn trained_adapters(model: &loraxs_core::training::LinearStack) -> BTreeMap<String, LoraXsAdapter> {
    let mut map = BTreeMap::new();
    for (i, layer) in model.layers().iter().enumerate() {
        if let Some(Adapter::LoraXs(a)) = &layer.adapter {
            map.insert(format!("layer{i}"), a.clone());
        }
    }
    map
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg: config::TrainFile = config::load_with_overrides(&args.config, &args.set)?;
    let task = gen_task(&cfg.task)?;
    let init = cfg.adapter.init_kind()?;
    let adapter = make_adapter(
        &task,
        cfg.adapter.rank,
        init,
        cfg.adapter.alpha_value(),
        cfg.adapter.sigma,
        cfg.train.seed,
    )?;
    let mut model = build_model(&task, Some(Adapter::LoraXs(adapter)))?;
    let initial_eval = eval_metric(&model, &task.eval)?;

    let mut log_file = match &args.csv_log {
        Some(path) => {
            Some(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?)
        }
        None => None,
    };
    let report = train_with_options(
        &mut model,
        &task.train,
        Some(&task.eval),
        &cfg.train,
        log_file.as_mut().map(|f| f as &mut dyn std::io::Write),
    )?;

    println!("epoch,train_loss,eval_loss");
    for (i, (train_loss, eval_loss)) in report
        .run
        .loss_by_epoch
        .iter()
        .zip(&report.eval_by_epoch)
        .enumerate()
    {
        println!("{},{train_loss},{eval_loss}", i + 1);
    }
    println!("initial_eval {initial_eval}");
    if let Some(last) = report.eval_by_epoch.last() {
        println!("final_eval {last}");
    }
    println!("steps {}", report.run.steps);
    println!("params_digest {}", to_hex(&report.run.final_params_digest));

    if let Some(dir) = &args.dump_weights {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (i, w) in task.base_weights.iter().enumerate() {
            let path = dir.join(format!("layer{i}.lxsw"));
            matio::write_matrix(&path, w, &format!("layer{i}"))?;
        }
        println!("base weights dumped to {}", dir.display());
    }

    let adapters = trained_adapters(&model);
    let opts = SaveOptions {
        base_model_id: format!("synthetic-task-seed{}", cfg.task.seed),
        storage_dtype: StorageDtype::F64,
        self_contained: false,
    };
    if let Some(path) = &args.output {
        let id = save_checkpoint(&adapters, &opts, path)?;
        println!("checkpoint {id}");
    }
    if let Some(root) = &args.registry {
        let id = Registry::init(root)?.save_adapters(&adapters, &opts)?;
        println!("registry_checkpoint {id}");
    }
    Ok(())
}

fn cmd_merge(args: MergeArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let weights = load_named_weights(&args.weights)?;
    let attached = attach_checkpoint(&ckpt, &weights)?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    for (name, adapter) in attached {
        let merged = loraxs_core::adapter::merge(&weights[&name], &Adapter::LoraXs(adapter))?;
        let ext = if args.text { "txt" } else { "lxsw" };
        let path = args.out_dir.join(format!("{name}.{ext}"));
        matio::write_matrix(&path, &merged, &name)?;
        println!("{name} -> {}", path.display());
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let cfg: config::AblateFile = config::load_with_overrides(&args.config, &args.set)?;
    let task = gen_task(&cfg.task)?;
    let sweep = AblationConfig {
        alpha: match cfg.ablate.alpha {
            Some(a) => AlphaRule::Fixed(a),
            None => AlphaRule::EqualsRank,
        },
        sigma: cfg.ablate.sigma,
        train: cfg.train,
        jobs: args.jobs,
    };
    let records = run_ablation(
        &task,
        &cfg.ablate.ranks,
        &cfg.ablate.init_kinds()?,
        &cfg.ablate.seed_list(),
        &sweep,
    )?;
    let rows = summarize(&records)?;

    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let records_path = args.out_dir.join("records.csv");
    fs::write(&records_path, records_to_csv(&records))
        .with_context(|| format!("writing {}", records_path.display()))?;
    let summary_path = args.out_dir.join("summary.csv");
    fs::write(&summary_path, summary_to_csv(&rows))
        .with_context(|| format!("writing {}", summary_path.display()))?;

    match args.format {
        Format::Csv => print!("{}", summary_to_csv(&rows)),
        _ => print!("{}", summary_table(&rows)),
    }
    println!("records: {}", records_path.display());
    println!("summary: {}", summary_path.display());
    Ok(())
}

fn registry_root(arg: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(root) = arg {
        return Ok(root);
    }
    if let Ok(root) = std::env::var("LORAXS_REGISTRY") {
        if !root.is_empty() {
            return Ok(PathBuf::from(root));
        }
    }
    Err(anyhow!(
        "no registry root: pass --root or set LORAXS_REGISTRY"
    ))
}

fn cmd_registry(args: RegistryArgs) -> Result<()> {
    let root = registry_root(args.root)?;
    match args.command {
        RegistryCommand::Ls { format } => {
            let reg = Registry::open(&root)?;
            let entries = reg.list()?;
            match format {
                Format::Csv => {
                    println!("checkpoint_id,path,base_model_id,created_at,byte_size");
                    for e in entries {
                        println!(
                            "{},{},{},{},{}",
                            e.checkpoint_id, e.path, e.base_model_id, e.created_at, e.byte_size
                        );
                    }
                }
                Format::Json => println!("{}", serde_json::to_string_pretty(&entries)?),
                Format::Plain => {
                    for e in entries {
                        println!(
                            "{}  {}  {}  {}",
                            e.checkpoint_id,
                            format_bytes_binary(e.byte_size),
                            e.base_model_id,
                            e.path
                        );
                    }
                }
            }
            Ok(())
        }
        RegistryCommand::Verify => {
            let reg = Registry::open(&root)?;
            let report = reg.verify()?;
            for (entry, status) in &report.entries {
                match status {
                    VerifyStatus::Ok => println!("ok        {}", entry.checkpoint_id),
                    VerifyStatus::MissingFile => println!("missing   {}", entry.checkpoint_id),
                    VerifyStatus::SizeMismatch { manifest, file } => println!(
                        "size      {} (manifest {manifest}, file {file})",
                        entry.checkpoint_id
                    ),
                    VerifyStatus::Corrupt(reason) => {
                        println!("corrupt   {} ({reason})", entry.checkpoint_id)
                    }
                }
            }
            let failures = report.failures();
            if failures > 0 {
                bail!(
                    "{failures} of {} entries failed verification",
                    report.entries.len()
                );
            }
            println!("all {} entries verified", report.entries.len());
            Ok(())
        }
        RegistryCommand::Gc { apply } => {
            let reg = Registry::open(&root)?;
            let report = reg.gc(apply)?;
            for name in &report.candidates {
                println!(
                    "{} {}",
                    if report.applied { "removed" } else { "orphan " },
                    name
                );
            }
            if !report.applied && !report.candidates.is_empty() {
                println!("dry run: pass --apply to remove");
            }
            Ok(())
        }
        RegistryCommand::Add { file } => {
            let reg = Registry::init(&root)?;
            let id = reg.add_checkpoint_file(&file)?;
            println!("{id}");
            Ok(())
        }
    }
}
