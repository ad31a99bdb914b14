//! Command-line pipeline: synthesize datasets, train flow models, sample
//! loops, reconstruct 3D coordinates, evaluate, interpolate, and sweep
//! embedding parameters. Every run writes a manifest next to its output
//! with the resolved configuration and seed, sufficient to reproduce the
//! run; log verbosity is controlled by the `LOOPFLOW_LOG` environment
//! variable.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;

use loopflow_core::data::{
    load_dataset, load_loops, save_dataset, save_loops, synthesize_loop, CdrLoop, Dataset, Split,
};
use loopflow_core::embed3d::{embed, EmbedConfig};
use loopflow_core::error::Error;
use loopflow_core::flow::checkpoint::{load_model, save_model};
use loopflow_core::flow::{FlowModel, LatentPair};
use loopflow_core::geometry::{check_validity, distance_matrix, LoopClass};
use loopflow_core::metrics::{evaluate_sets, EvalReport, SequenceLM};
use loopflow_core::training::{train, TrainLog};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "loopflow", version, about = "CDR loop flow-model pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML configuration file; omitted sections use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for everything random in this run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of valid loops.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "H3")]
        class: String,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 5)]
        min_len: usize,
        #[arg(long, default_value_t = 12)]
        max_len: usize,
        /// Train/validation/test split weights.
        #[arg(long, default_value = "8,1,1")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset and write a checkpoint plus a log.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample loops from a checkpoint.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also reconstruct 3D coordinates for each sampled loop.
        #[arg(long)]
        embed: bool,
    },
    /// Reconstruct coordinates for loops that carry distance matrices.
    Embed {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a generated set against a dataset's test split.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Loopset to score; alternatively give --checkpoint and --count.
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long)]
        dataset: PathBuf,
        /// Write the report as JSON here (it always prints as text).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear latent interpolation between two dataset loops.
    Interpolate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Loop id of the first endpoint.
        #[arg(long)]
        a: String,
        /// Loop id of the second endpoint.
        #[arg(long)]
        b: String,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-sweep embedding parameters over a fixed generated set.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Grid such as "lambda1=1,50;lambda2=100".
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Everything needed to replay a run.
#[derive(serde::Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    config: RunConfig,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
    tool_version: String,
    wall_seconds: f64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    extra: BTreeMap<String, serde_json::Value>,
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<(), Error> {
    let path = manifest_path(out);
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.rotate_left(31) ^ 0x9e3779b97f4a7c15;
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x ^ (x >> 31)
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, Error> {
    match &common.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_)
        | Error::Parse { .. }
        | Error::Io(_)
        | Error::Synthesis(_)
        | Error::Capacity(_) => 3,
        Error::Numeric(_) | Error::Domain(_) | Error::Dim(_) | Error::Contract(_) => 4,
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("LOOPFLOW_LOG")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { common, class, count, min_len, max_len, split, out } => {
            cmd_synth(common, &class, count, min_len, max_len, &split, &out)
        }
        Command::Train { common, dataset, out } => cmd_train(common, &dataset, &out),
        Command::Generate { common, checkpoint, count, out, embed } => {
            cmd_generate(common, &checkpoint, count, &out, embed)
        }
        Command::Embed { common, input, out } => cmd_embed(common, &input, &out),
        Command::Evaluate { common, generated, checkpoint, count, dataset, out } => {
            cmd_evaluate(common, generated.as_deref(), checkpoint.as_deref(), count, &dataset, out.as_deref())
        }
        Command::Interpolate { common, checkpoint, dataset, a, b, steps, out } => {
            cmd_interpolate(common, &checkpoint, &dataset, &a, &b, steps, &out)
        }
        Command::Sweep { common, generated, dataset, grid, out } => {
            cmd_sweep(common, &generated, &dataset, &grid, &out)
        }
    }
}

fn base_manifest(common: &CommonArgs, command: &str, cfg: &RunConfig) -> RunManifest {
    RunManifest {
        command: command.into(),
        argv: std::env::args().collect(),
        config: cfg.clone(),
        seed: common.seed,
        inputs: Vec::new(),
        outputs: Vec::new(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        wall_seconds: 0.0,
        extra: BTreeMap::new(),
    }
}

fn cmd_synth(
    common: CommonArgs,
    class: &str,
    count: usize,
    min_len: usize,
    max_len: usize,
    split: &str,
    out: &Path,
) -> Result<(), Error> {
    let started = Instant::now();
    let cfg = load_config(&common)?;
    let class = LoopClass::parse(class)?;
    let spec = cfg.validity(class)?;
    if min_len < 2 || min_len > max_len {
        return Err(Error::Config(format!("bad length range {min_len}..={max_len}")));
    }
    let weights: Vec<usize> = split
        .split(',')
        .map(|t| t.parse::<usize>().map_err(|_| Error::Config(format!("bad split weights {split:?}"))))
        .collect::<Result<_, _>>()?;
    if weights.len() != 3 {
        return Err(Error::Config("split weights need three comma-separated integers".into()));
    }

    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(common.seed);
    let mut loops = Vec::with_capacity(count);
    for i in 0..count {
        let n = rng.gen_range(min_len..=max_len);
        loops.push(synthesize_loop(&spec, n, &format!("{}-{i}", class.as_str().to_lowercase()), class, &mut rng)?);
    }
    let ds = Dataset::with_split(class, loops, (weights[0], weights[1], weights[2]), common.seed)?;
    save_dataset(&ds, out)?;
    info!("wrote {} loops to {}", ds.len(), out.display());

    let mut manifest = base_manifest(&common, "synth", &cfg);
    manifest.outputs = vec![out.display().to_string()];
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    write_manifest(out, &manifest)?;
    println!("synthesized {} {} loops -> {}", ds.len(), class.as_str(), out.display());
    Ok(())
}

fn cmd_train(common: CommonArgs, dataset: &Path, out: &Path) -> Result<(), Error> {
    let started = Instant::now();
    let cfg = load_config(&common)?;
    if !dataset.exists() {
        return Err(Error::Data(format!("dataset not found: {}", dataset.display())));
    }
    let ds = load_dataset(dataset)?;
    let validity = cfg.validity(ds.class)?;
    let mut model = FlowModel::new(cfg.hyper(), ds.class, validity, common.seed)?;
    let train_cfg = cfg.train_config(common.seed)?;
    let log: TrainLog = train(&mut model, &ds, &train_cfg)?;
    save_model(&model, out)?;
    let log_path = out.with_extension("log.jsonl");
    log.write_jsonl(&log_path)?;

    let last = log.records.last();
    let mut manifest = base_manifest(&common, "train", &cfg);
    manifest.inputs = vec![dataset.display().to_string()];
    manifest.outputs = vec![out.display().to_string(), log_path.display().to_string()];
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    if let Some(r) = last {
        manifest.extra.insert("final_train_nll".into(), serde_json::json!(r.train_nll));
        manifest.extra.insert("final_val_nll".into(), serde_json::json!(r.val_nll));
        manifest
            .extra
            .insert("final_constraint_estimate".into(), serde_json::json!(r.constraint_estimate));
    }
    write_manifest(out, &manifest)?;
    if let Some(r) = last {
        println!(
            "trained {} epochs: train NLL {:.3}, val NLL {:?}, constraint {:?} -> {}",
            log.records.len(),
            r.train_nll,
            r.val_nll,
            r.constraint_estimate,
            out.display()
        );
    }
    Ok(())
}

/// Attach embedded coordinates to every loop that has a distance matrix but
/// no coordinates yet. Returns the fraction whose realized structure passes
/// the hard validity check.
fn embed_loops(
    loops: &mut [CdrLoop],
    model_validity: &loopflow_core::geometry::ValiditySpec,
    base_cfg: &EmbedConfig,
    seed: u64,
) -> Result<f64, Error> {
    let mut valid = 0usize;
    let mut total = 0usize;
    for (i, l) in loops.iter_mut().enumerate() {
        if l.coords.is_some() {
            continue;
        }
        let d = l.distance_matrix()?;
        let cfg = EmbedConfig { seed: mix_seed(seed, i as u64), ..base_cfg.clone() };
        let result = embed(&d, model_validity, &cfg)?;
        total += 1;
        if check_validity(&distance_matrix(&result.coords), model_validity).valid {
            valid += 1;
        }
        l.coords = Some(result.coords);
    }
    Ok(if total == 0 { 1.0 } else { valid as f64 / total as f64 })
}

fn cmd_generate(
    common: CommonArgs,
    checkpoint: &Path,
    count: usize,
    out: &Path,
    do_embed: bool,
) -> Result<(), Error> {
    let started = Instant::now();
    let cfg = load_config(&common)?;
    let model = load_model(checkpoint)?;
    let mut loops = model.generate(count, common.seed)?;
    let mut manifest = base_manifest(&common, "generate", &cfg);
    if do_embed {
        let rate = embed_loops(&mut loops, &model.validity, &cfg.embed_config(0), common.seed)?;
        manifest.extra.insert("embedded_validity_rate".into(), serde_json::json!(rate));
        info!("embedded validity rate {rate:.3}");
    }
    save_loops(&loops, out)?;
    manifest.inputs = vec![checkpoint.display().to_string()];
    manifest.outputs = vec![out.display().to_string()];
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    write_manifest(out, &manifest)?;
    println!("generated {count} loops -> {}", out.display());
    Ok(())
}

fn cmd_embed(common: CommonArgs, input: &Path, out: &Path) -> Result<(), Error> {
    let started = Instant::now();
    let cfg = load_config(&common)?;
    let mut loops = load_loops(input)?;
    if loops.is_empty() {
        return Err(Error::Data(format!("no loops in {}", input.display())));
    }
    let class = loops[0].class;
    let validity = cfg.validity(class)?;
    let rate = embed_loops(&mut loops, &validity, &cfg.embed_config(0), common.seed)?;
    save_loops(&loops, out)?;
    let mut manifest = base_manifest(&common, "embed", &cfg);
    manifest.inputs = vec![input.display().to_string()];
    manifest.outputs = vec![out.display().to_string()];
    manifest.extra.insert("embedded_validity_rate".into(), serde_json::json!(rate));
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    write_manifest(out, &manifest)?;
    println!("embedded {} loops (validity rate {rate:.3}) -> {}", loops.len(), out.display());
    Ok(())
}

fn train_lm(cfg: &RunConfig, ds: &Dataset) -> Result<(SequenceLM, String), Error> {
    let train_loops = ds.split(Split::Train);
    let seqs: Vec<&[usize]> = train_loops.iter().map(|l| l.sequence.as_slice()).collect();
    let order = cfg.lm_order();
    let smoothing = cfg.lm_smoothing();
    let lm = SequenceLM::train(&seqs, order, smoothing)?;
    Ok((lm, format!("{order}-gram add-{smoothing} LM on the train split")))
}

fn cmd_evaluate(
    common: CommonArgs,
    generated: Option<&Path>,
    checkpoint: Option<&Path>,
    count: usize,
    dataset: &Path,
    out: Option<&Path>,
) -> Result<(), Error> {
    let started = Instant::now();
    let cfg = load_config(&common)?;
    let ds = load_dataset(dataset)?;
    let mut gen_loops = match (generated, checkpoint) {
        (Some(path), _) => load_loops(path)?,
        (None, Some(ckpt)) => load_model(ckpt)?.generate(count, common.seed)?,
        (None, None) => {
            return Err(Error::Config("evaluate needs --generated or --checkpoint".into()))
        }
    };
    if gen_loops.is_empty() {
        return Err(Error::Data("no generated loops to evaluate".into()));
    }
    if let Some(l) = gen_loops.iter().find(|l| l.class != ds.class) {
        return Err(Error::Data(format!(
            "class mismatch: generated loop {} is {}, dataset is {}",
            l.id,
            l.class.as_str(),
            ds.class.as_str()
        )));
    }
    let validity = cfg.validity(ds.class)?;
    let (lm, descriptor) = train_lm(&cfg, &ds)?;
    embed_loops(&mut gen_loops, &validity, &cfg.embed_config(0), common.seed)?;
    let test: Vec<CdrLoop> = ds.split(Split::Test).into_iter().cloned().collect();
    let report: EvalReport = evaluate_sets(&lm, &descriptor, &gen_loops, &test, &validity)?;
    println!("{}", report.to_text());
    let mut manifest = base_manifest(&common, "evaluate", &cfg);
    manifest.inputs = vec![dataset.display().to_string()];
    if let Some(p) = generated {
        manifest.inputs.push(p.display().to_string());
    }
    if let Some(path) = out {
        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Data(format!("report encode: {e}")))?;
        std::fs::write(path, text)?;
        manifest.outputs.push(path.display().to_string());
        manifest.wall_seconds = started.elapsed().as_secs_f64();
        write_manifest(path, &manifest)?;
    }
    Ok(())
}

fn cmd_interpolate(
    common: CommonArgs,
    checkpoint: &Path,
    dataset: &Path,
    id_a: &str,
    id_b: &str,
    steps: usize,
    out: &Path,
) -> Result<(), Error> {
    let started = Instant::now();
    let cfg = load_config(&common)?;
    if steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    let model = load_model(checkpoint)?;
    let ds = load_dataset(dataset)?;
    let find = |id: &str| -> Result<&CdrLoop, Error> {
        ds.loops
            .iter()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::Data(format!("loop id {id:?} not in {}", dataset.display())))
    };
    let a = find(id_a)?;
    let b = find(id_b)?;
    let (za, _) = model.forward(a, mix_seed(common.seed, 0))?;
    let (zb, _) = model.forward(b, mix_seed(common.seed, 1))?;
    let mut loops = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let z = LatentPair {
            z_d: za.z_d.iter().zip(&zb.z_d).map(|(x, y)| (1.0 - t) * x + t * y).collect(),
            z_s: za.z_s.iter().zip(&zb.z_s).map(|(x, y)| (1.0 - t) * x + t * y).collect(),
        };
        let n_t = ((1.0 - t) * a.len() as f64 + t * b.len() as f64).round() as usize;
        loops.push(model.decode_loop(&z, n_t, &format!("interp-{k}"))?);
    }
    save_loops(&loops, out)?;
    let mut manifest = base_manifest(&common, "interpolate", &cfg);
    manifest.inputs =
        vec![checkpoint.display().to_string(), dataset.display().to_string()];
    manifest.outputs = vec![out.display().to_string()];
    manifest.extra.insert("a".into(), serde_json::json!(id_a));
    manifest.extra.insert("b".into(), serde_json::json!(id_b));
    manifest.extra.insert("steps".into(), serde_json::json!(steps));
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    write_manifest(out, &manifest)?;
    println!("interpolated {} points -> {}", loops.len(), out.display());
    Ok(())
}

fn parse_grid(grid: &str) -> Result<Vec<(String, Vec<f64>)>, Error> {
    let mut axes = Vec::new();
    for part in grid.split(';').filter(|p| !p.is_empty()) {
        let (name, values) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis {part:?} needs name=v1,v2")))?;
        let values: Vec<f64> = values
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| Error::Config(format!("bad grid value {v:?}"))))
            .collect::<Result<_, _>>()?;
        if values.is_empty() {
            return Err(Error::Config(format!("grid axis {name:?} has no values")));
        }
        axes.push((name.trim().to_string(), values));
    }
    if axes.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    Ok(axes)
}

fn grid_cells(axes: &[(String, Vec<f64>)]) -> Vec<BTreeMap<String, f64>> {
    let mut cells: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new()];
    for (name, values) in axes {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for v in values {
                let mut c = cell.clone();
                c.insert(name.clone(), *v);
                next.push(c);
            }
        }
        cells = next;
    }
    cells
}

fn apply_cell(base: &EmbedConfig, cell: &BTreeMap<String, f64>) -> Result<EmbedConfig, Error> {
    let mut cfg = base.clone();
    for (name, value) in cell {
        match name.as_str() {
            "lambda1" => cfg.lambda1 = *value,
            "lambda2" => cfg.lambda2 = *value,
            "max_sweeps" => cfg.max_sweeps = *value as usize,
            "inner_steps" => cfg.inner_steps = *value as usize,
            "step_init" => cfg.step_init = *value,
            "tolerance" => cfg.tolerance = *value,
            other => {
                return Err(Error::Config(format!("unknown sweep parameter {other:?}")));
            }
        }
    }
    Ok(cfg)
}

fn cmd_sweep(
    common: CommonArgs,
    generated: &Path,
    dataset: &Path,
    grid: &str,
    out: &Path,
) -> Result<(), Error> {
    let started = Instant::now();
    let cfg = load_config(&common)?;
    let axes = parse_grid(grid)?;
    let cells = grid_cells(&axes);
    let base_loops = load_loops(generated)?;
    if base_loops.is_empty() {
        return Err(Error::Data("no loops to sweep over".into()));
    }
    let ds = load_dataset(dataset)?;
    let validity = cfg.validity(ds.class)?;
    let (lm, descriptor) = train_lm(&cfg, &ds)?;
    let test: Vec<CdrLoop> = ds.split(Split::Test).into_iter().cloned().collect();

    let mut rows: Vec<serde_json::Value> = Vec::with_capacity(cells.len());
    println!("{:<40} {:>9} {:>9} {:>9} {:>9}", "cell", "ppl", "rmsd", "vr", "div");
    for cell in &cells {
        let label = cell
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        // Each cell re-embeds from the stored distance matrices.
        let mut loops: Vec<CdrLoop> = base_loops
            .iter()
            .cloned()
            .map(|mut l| {
                l.coords = None;
                l
            })
            .collect();
        let outcome = apply_cell(&cfg.embed_config(0), cell).and_then(|embed_cfg| {
            embed_loops(&mut loops, &validity, &embed_cfg, common.seed)?;
            evaluate_sets(&lm, &descriptor, &loops, &test, &validity)
        });
        match outcome {
            Ok(report) => {
                let rmsd_txt = report
                    .rmsd
                    .as_ref()
                    .map_or("n/a".to_string(), |r| format!("{:.4}", r.mean));
                println!(
                    "{label:<40} {:>9.4} {rmsd_txt:>9} {:>9.4} {:>9.4}",
                    report.ppl_mean, report.validity_rate, report.diversity
                );
                rows.push(serde_json::json!({ "cell": cell, "report": report }));
            }
            Err(e) => {
                println!("{label:<40} failed: {e}");
                rows.push(serde_json::json!({ "cell": cell, "error": e.to_string() }));
            }
        }
    }
    let mut text = String::new();
    for row in &rows {
        text.push_str(
            &serde_json::to_string(row).map_err(|e| Error::Data(format!("row encode: {e}")))?,
        );
        text.push('\n');
    }
    std::fs::write(out, text)?;
    let mut manifest = base_manifest(&common, "sweep", &cfg);
    manifest.inputs = vec![generated.display().to_string(), dataset.display().to_string()];
    manifest.outputs = vec![out.display().to_string()];
    manifest.extra.insert("grid".into(), serde_json::json!(grid));
    manifest.extra.insert("cells".into(), serde_json::json!(cells.len()));
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    write_manifest(out, &manifest)?;
    Ok(())
}
