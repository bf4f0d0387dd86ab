mod outputs;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use outputs::Outputs;
use spnas::io::arch::{ArchitectureFile, Provenance};
use spnas::io::checkpoint::{supernet_checkpoint, supernet_from_checkpoint, Checkpoint};
use spnas::io::config::RunConfig;
use spnas::io::dataset::{DataSource, Dataset, Split};
use spnas::io::lut::{decision_string, load_lut, load_samples, lut_to_csv, samples_to_csv};
use spnas::io::trace::{snapshots_to_jsonl, trace_to_csv};
use spnas::latency::{predict_discrete_runtime, sample_measurements, synth_lut, validate_lut, CostModel, LatencyTable};
use spnas::oracle::{exhaustive_evaluate, search_vs_oracle, space_to_csv, DEFAULT_SPACE_CAP};
use spnas::search::{ablation_table, evaluate, random_search_baseline, run_search, train_discrete};
use spnas::supernet::{build_discrete, build_supernet, DerivedArchitecture, Network, WeightSource};
use spnas::seeded_rng;

#[derive(Parser)]
#[command(name = "spnas", version, about = "Single-path superkernel architecture search")]
struct Cli {
    /// Seed overriding every seed in the run config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArg {
    /// Run config (`key = value` lines); the desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct DataArg {
    /// `synth[:classes=..,n=..,res=..,channels=..,sep=..,sigma=..,seed=..]` or a CIFAR-10 binary directory.
    #[arg(long, default_value = "synth")]
    data: String,
}

#[derive(Subcommand)]
enum Command {
    /// Train a supernet with the runtime-aware loss and derive an architecture.
    Search {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        lut: PathBuf,
        /// Overrides `search.lambda`.
        #[arg(long)]
        lambda: Option<f64>,
        /// Directory receiving architecture.json, trace.csv, snapshots.jsonl and supernet.ckpt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-derive the architecture stored in a supernet checkpoint.
    Derive {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a discrete architecture from scratch.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        arch: PathBuf,
        /// Directory receiving metrics.json and network.ckpt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate trained discrete weights.
    Eval {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the table-predicted runtime of an architecture.
    PredictRuntime {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        lut: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Latency table utilities.
    #[command(subcommand)]
    Lut(LutCommand),
    /// Train every architecture of a small space and rank them.
    Oracle {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        lut: PathBuf,
        /// Overrides `search.lambda` in the objective.
        #[arg(long)]
        lambda: Option<f64>,
        /// Searched architecture to place within the ranking.
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SPACE_CAP)]
        cap: u128,
        /// Directory receiving space.csv and oracle.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare subset-trained 5×5 kernels with individually trained networks.
    Ablation {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value_t = 6)]
        expansion: usize,
        /// Number of consecutive seeds starting at the configured one.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample random architectures whose predicted runtime lies in a window.
    RandomBaseline {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        lut: PathBuf,
        /// `lo:hi` in milliseconds.
        #[arg(long)]
        window: String,
        #[arg(short = 'n', long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum LutCommand {
    /// Synthesize a table from MAC counts.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 1.0)]
        ms_per_mmac: f64,
        /// Relative standard deviation of per-entry noise.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write table-predicted runtimes of random architectures with optional noise.
    Sample {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        lut: PathBuf,
        #[arg(short = 'n', long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a table against measured runtimes.
    Validate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        lut: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(arg: &ConfigArg, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match &arg.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.search.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(arg: &DataArg, split: Split) -> Result<Dataset> {
    let ds = DataSource::parse(&arg.data)?.load(split)?;
    Ok(ds)
}

fn load_pair(arg: &DataArg) -> Result<(Dataset, Dataset)> {
    Ok(DataSource::parse(&arg.data)?.load_pair()?)
}

fn load_arch(path: &Path) -> Result<(ArchitectureFile, DerivedArchitecture)> {
    let f = ArchitectureFile::load(path)?;
    let a = f.architecture()?;
    Ok((f, a))
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("result serializes");
    s.push('\n');
    s
}

fn check_lut(lut: &LatencyTable, arch_layers: usize) -> Result<()> {
    if lut.layers.len() != arch_layers {
        bail!("latency table has {} layers, the config has {arch_layers}", lut.layers.len());
    }
    Ok(())
}

fn restore_network(arch: &DerivedArchitecture, weights: &Path) -> Result<Network> {
    let mut net = build_discrete(arch, WeightSource::Fresh(&mut seeded_rng(0)))?;
    Checkpoint::load(weights)?
        .restore_into(&mut net.store)
        .with_context(|| format!("{} does not match the architecture", weights.display()))?;
    Ok(net)
}

fn parse_window(s: &str) -> Result<(f64, f64)> {
    let (lo, hi) = s.split_once(':').context("window must be lo:hi")?;
    let lo: f64 = lo.trim().parse().with_context(|| format!("bad window start '{lo}'"))?;
    let hi: f64 = hi.trim().parse().with_context(|| format!("bad window end '{hi}'"))?;
    Ok((lo, hi))
}

#[derive(Serialize)]
struct TrainResult {
    decisions: String,
    seed: u64,
    epochs: usize,
    top1: f64,
    loss: f64,
}

#[derive(Serialize)]
struct RuntimeResult {
    decisions: String,
    total_ms: f64,
    overhead_ms: f64,
    per_layer_ms: Vec<f64>,
}

#[derive(Serialize)]
struct OracleResult<'a> {
    space: &'a spnas::oracle::SpaceEvaluation,
    searched: Option<String>,
    searched_percentile: Option<f64>,
}

#[derive(Serialize)]
struct AblationRow {
    seed: u64,
    #[serde(flatten)]
    table: spnas::search::AblationTable,
}

#[derive(Serialize)]
struct BaselineResult {
    window_ms: (f64, f64),
    draws: usize,
    acceptance_rate: f64,
    architectures: Vec<String>,
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let seed = cli.seed;
    let mut out = Outputs::default();
    match cli.command {
        Command::Search { config, data, lut, lambda, out: dir } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(l) = lambda {
                cfg.search.lambda = l;
            }
            cfg.search.validate()?;
            let lut = load_lut(&lut)?;
            let train = load_data(&data, Split::Train)?;
            let mut sn = build_supernet(&cfg.macro_cfg, cfg.search.indicator, &mut seeded_rng(cfg.search.seed))?;
            let res = run_search(&mut sn, &train, &lut, &cfg.search)?;
            let prov = Provenance {
                seed: cfg.search.seed,
                lambda: cfg.search.lambda,
                search_steps: res.trace.records.len(),
            };
            let rt = predict_discrete_runtime(&res.arch, &lut)?;
            out.add(dir.join("architecture.json"), ArchitectureFile::new(&res.arch, Some(prov.clone())).to_json());
            out.add(dir.join("trace.csv"), trace_to_csv(&res.trace.records));
            out.add(dir.join("snapshots.jsonl"), snapshots_to_jsonl(&res.trace.snapshots));
            out.add(dir.join("supernet.ckpt"), supernet_checkpoint(&sn, Some(prov)).encode());
            println!("architecture: {}", decision_string(&res.arch.decisions));
            println!("predicted runtime: {:.4} ms", rt.total_ms);
            println!("search steps: {}", res.trace.records.len());
            if let Some(last) = res.trace.records.last() {
                println!("final loss: ce {:.4}, runtime {:.4} ms, total {:.4}", last.ce, last.runtime_ms, last.total);
            }
        }
        Command::Derive { checkpoint, out: path } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (sn, meta) = supernet_from_checkpoint(&ck)?;
            let arch = sn.derive()?;
            out.add(&path, ArchitectureFile::new(&arch, meta.provenance).to_json());
            println!("architecture: {}", decision_string(&arch.decisions));
        }
        Command::Train { config, data, arch, out: dir } => {
            let cfg = load_config(&config, seed)?;
            let (_, arch) = load_arch(&arch)?;
            let (train, eval) = load_pair(&data)?;
            let mut net = build_discrete(&arch, WeightSource::Fresh(&mut seeded_rng(cfg.train.seed)))?;
            let m = train_discrete(&mut net, &train, &eval, &cfg.train)?;
            let res = TrainResult {
                decisions: decision_string(&arch.decisions),
                seed: cfg.train.seed,
                epochs: cfg.train.epochs,
                top1: m.top1,
                loss: m.loss,
            };
            out.add(dir.join("metrics.json"), json(&res));
            out.add(dir.join("network.ckpt"), Checkpoint::from_store(&net.store).encode());
            println!("eval top-1 {:.2}%, loss {:.4}", 100.0 * m.top1, m.loss);
        }
        Command::Eval { data, arch, weights, batch_size, out: path } => {
            let (_, arch) = load_arch(&arch)?;
            let net = restore_network(&arch, &weights)?;
            let m = evaluate(&net, &load_data(&data, Split::Eval)?, batch_size.max(1))?;
            if let Some(p) = path {
                out.add(p, json(&m));
            }
            println!("eval top-1 {:.2}%, loss {:.4}", 100.0 * m.top1, m.loss);
        }
        Command::PredictRuntime { arch, lut, out: path } => {
            let (_, arch) = load_arch(&arch)?;
            let lut = load_lut(&lut)?;
            check_lut(&lut, arch.macro_cfg.num_layers())?;
            let rt = predict_discrete_runtime(&arch, &lut)?;
            if let Some(p) = path {
                out.add(
                    p,
                    json(&RuntimeResult {
                        decisions: decision_string(&arch.decisions),
                        total_ms: rt.total_ms,
                        overhead_ms: lut.overhead_ms,
                        per_layer_ms: rt.per_layer_ms.clone(),
                    }),
                );
            }
            println!("{}", rt.total_ms);
        }
        Command::Lut(LutCommand::Synth { config, ms_per_mmac, noise, out: path }) => {
            let cfg = load_config(&config, seed)?;
            let model = CostModel {
                ms_per_mmac,
                noise,
                seed: seed.unwrap_or(0),
            };
            let lut = synth_lut(&cfg.macro_cfg, &model)?;
            out.add(&path, lut_to_csv(&lut));
            for w in lut.monotonicity_warnings() {
                eprintln!("warning: {w}");
            }
            println!("{} layers, overhead {:.4} ms", lut.layers.len(), lut.overhead_ms);
        }
        Command::Lut(LutCommand::Sample { config, lut, count, noise, out: path }) => {
            let cfg = load_config(&config, seed)?;
            let lut = load_lut(&lut)?;
            check_lut(&lut, cfg.macro_cfg.num_layers())?;
            let samples = sample_measurements(&cfg.macro_cfg, &lut, count, noise, &mut seeded_rng(seed.unwrap_or(0)))?;
            out.add(&path, samples_to_csv(&samples));
            println!("{} samples", samples.len());
        }
        Command::Lut(LutCommand::Validate { config, lut, samples, out: path }) => {
            let cfg = load_config(&config, seed)?;
            let lut = load_lut(&lut)?;
            check_lut(&lut, cfg.macro_cfg.num_layers())?;
            let samples = load_samples(&samples, &cfg.macro_cfg)?;
            let rep = validate_lut(&lut, &samples)?;
            if let Some(p) = path {
                out.add(p, json(&rep));
            }
            println!(
                "{} samples: RMSE {:.2} ms, mean abs error {:.2}%",
                rep.samples, rep.rmse_ms, rep.mean_abs_pct_error
            );
        }
        Command::Oracle { config, data, lut, lambda, arch, cap, out: dir } => {
            let cfg = load_config(&config, seed)?;
            let lambda = lambda.unwrap_or(cfg.search.lambda);
            let lut = load_lut(&lut)?;
            check_lut(&lut, cfg.macro_cfg.num_layers())?;
            let (train, eval) = load_pair(&data)?;
            let searched = arch.as_deref().map(load_arch).transpose()?.map(|(_, a)| a);
            let space = exhaustive_evaluate(&cfg.macro_cfg, &train, &eval, &lut, &cfg.train, lambda, cap)?;
            let pct = searched.as_ref().map(|a| search_vs_oracle(&space, a, lambda)).transpose()?;
            out.add(dir.join("space.csv"), space_to_csv(&space));
            out.add(
                dir.join("oracle.json"),
                json(&OracleResult {
                    space: &space,
                    searched: searched.as_ref().map(|a| decision_string(&a.decisions)),
                    searched_percentile: pct,
                }),
            );
            let best = space
                .records
                .iter()
                .min_by(|a, b| a.objective.total_cmp(&b.objective))
                .expect("space is never empty");
            println!("{} architectures, best objective {:.4} ({})", space.records.len(), best.objective, decision_string(&best.decisions));
            println!("pareto front: {} architectures", space.pareto.len());
            if let Some(p) = pct {
                println!("searched architecture percentile: {p:.3}");
            }
        }
        Command::Ablation { config, data, expansion, seeds, out: path } => {
            let cfg = load_config(&config, seed)?;
            let (train, eval) = load_pair(&data)?;
            let mut rows = Vec::new();
            for s in cfg.train.seed..cfg.train.seed + seeds {
                let schedule = spnas::search::TrainSchedule { seed: s, ..cfg.train.clone() };
                let table = ablation_table(&cfg.macro_cfg, expansion, &train, &eval, &schedule)?;
                println!(
                    "seed {s}: subset inner {:.2}%, subset full {:.2}%, individual 3x3 {:.2}%, individual 5x5 {:.2}%",
                    100.0 * table.subset_inner_top1,
                    100.0 * table.subset_full_top1,
                    100.0 * table.individual_3x3_top1,
                    100.0 * table.individual_5x5_top1
                );
                rows.push(AblationRow { seed: s, table });
            }
            out.add(&path, json(&rows));
        }
        Command::RandomBaseline { config, lut, window, count, out: path } => {
            let cfg = load_config(&config, seed)?;
            let lut = load_lut(&lut)?;
            check_lut(&lut, cfg.macro_cfg.num_layers())?;
            let window = parse_window(&window)?;
            let res = random_search_baseline(&cfg.macro_cfg, &lut, window, count, &mut seeded_rng(seed.unwrap_or(0)))?;
            out.add(
                &path,
                json(&BaselineResult {
                    window_ms: window,
                    draws: res.draws,
                    acceptance_rate: res.acceptance_rate,
                    architectures: res.archs.iter().map(|a| decision_string(&a.decisions)).collect(),
                }),
            );
            println!("{} architectures from {} draws (acceptance {:.3e})", res.archs.len(), res.draws, res.acceptance_rate);
        }
    }
    for p in out.commit()? {
        println!("wrote {}", p.display());
    }
    println!("elapsed {:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
