//! `paw`: runs the training stages, evaluation and diagnostics from the
//! command line. Each invocation prints one JSON object on stdout; logs go to
//! stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{json, Value};

use paw_core::config::RunConfig;
use paw_core::diagnostics::{self, MAX_REL_ERR};
use paw_core::frl::{self, FrlNetwork};
use paw_core::imageio::Image8;
use paw_core::netspec::{self, presets};
use paw_core::paw::pipeline::Pipeline;
use paw_core::paw::{write_matrix_csv, Fusion, ARL_BIAS, ARL_WEIGHT, RSL_WEIGHT};
use paw_core::synthgen::{self, SyntheticData};
use paw_core::tensor::{ParamSet, Tensor};
use paw_core::Error;

/// Name of the resolved configuration written to the run directory.
const RESOLVED_CONF: &str = "resolved.conf";

#[derive(Parser)]
#[command(name = "paw", version, about = "Region localization, compression and parts-and-whole attribute classification")]
struct Cli {
    /// `key = value` config file applied over the defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Single override applied after the config file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset (PPM images plus CSV manifests) to `data_dir`.
    GenData,
    /// Stage 1: train the localization network.
    TrainFrl,
    /// Stage 2: hint-based compression into the whole subnet.
    Compress,
    /// Stage 3: part subnets on localized crops.
    TrainParts,
    /// Stage 4: region switch and attribute relation layers.
    TrainFusion,
    /// Stage 5: end-to-end fine-tuning.
    Finetune,
    /// Fused, part-only and whole-only test accuracy.
    Eval,
    /// Parts and fusion retrained on fixed 4x4 grid tiles.
    Baseline,
    /// Activation heatmap of one attribute as a PGM image.
    Heatmap(HeatmapArgs),
    /// Tensor listing of a checkpoint; fusion checkpoints also export CSV matrices.
    DumpWeights(DumpArgs),
    /// Finite-difference check of every layer, loss and a whole network.
    GradCheck(GradCheckArgs),
    /// Stages 1 to 5 followed by evaluation.
    All,
}

#[derive(Args)]
struct HeatmapArgs {
    /// Localization network checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// RGB PPM image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    attr: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory for `rsl.csv` and `arl.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Network preset checked end to end.
    #[arg(long, default_value = "frl-desk")]
    net: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        cfg.override_with(kv).map_err(|e| Failure::Usage(format!("--set {kv}: {e}")))?;
    }
    Ok(cfg)
}

/// The dataset in `data_dir` when one was written there, otherwise the same
/// data generated in memory.
fn dataset(cfg: &RunConfig) -> Result<SyntheticData, Failure> {
    let dir = Path::new(&cfg.data_dir);
    if synthgen::SPLITS.iter().all(|s| dir.join(format!("{s}.csv")).exists()) {
        info!("loading dataset from {}", dir.display());
        let data = synthgen::load_dataset(dir)?;
        if data.train.attribute_count() != cfg.attribute_count() || data.train.image_size != cfg.image_size {
            return Err(Failure::Run(format!(
                "dataset in {} has {} attributes at {} px; config expects {} at {} px",
                dir.display(),
                data.train.attribute_count(),
                data.train.image_size,
                cfg.attribute_count(),
                cfg.image_size
            )));
        }
        Ok(data)
    } else {
        info!("no dataset in {}; generating with seed {}", dir.display(), cfg.seed);
        Ok(synthgen::generate(&cfg.synthetic_spec(), cfg.seed)?)
    }
}

fn pipeline(cfg: &RunConfig) -> Result<Pipeline, Failure> {
    let data = dataset(cfg)?;
    let p = Pipeline::new(cfg.clone(), data, Path::new(&cfg.run_dir))?;
    let conf = p.dir.join(RESOLVED_CONF);
    std::fs::write(&conf, cfg.to_text()).map_err(|e| Failure::Run(format!("writing {}: {e}", conf.display())))?;
    Ok(p)
}

fn to_json<T: serde::Serialize>(command: &str, result: &T) -> Result<Value, Failure> {
    let result = serde_json::to_value(result).map_err(|e| Failure::Run(e.to_string()))?;
    Ok(json!({ "command": command, "result": result }))
}

fn run(cli: Cli) -> Result<Value, Failure> {
    let cfg = resolve_config(&cli)?;
    info!("resolved config:\n{}", cfg.to_text().trim_end());
    let started = Instant::now();
    let out = match &cli.command {
        Command::GenData => gen_data(&cfg)?,
        Command::TrainFrl => to_json("train-frl", &pipeline(&cfg)?.train_frl()?)?,
        Command::Compress => to_json("compress", &pipeline(&cfg)?.compress()?)?,
        Command::TrainParts => to_json("train-parts", &pipeline(&cfg)?.train_parts()?)?,
        Command::TrainFusion => to_json("train-fusion", &pipeline(&cfg)?.train_fusion()?)?,
        Command::Finetune => to_json("finetune", &pipeline(&cfg)?.finetune()?)?,
        Command::Eval => to_json("eval", &pipeline(&cfg)?.evaluate()?)?,
        Command::Baseline => to_json("baseline", &pipeline(&cfg)?.grid_baseline()?)?,
        Command::Heatmap(a) => heatmap(&cfg, a)?,
        Command::DumpWeights(a) => dump_weights(a)?,
        Command::GradCheck(a) => grad_check(&cfg, a)?,
        Command::All => to_json("all", &pipeline(&cfg)?.run_all()?)?,
    };
    info!("done in {:.1} s", started.elapsed().as_secs_f64());
    Ok(out)
}

fn gen_data(cfg: &RunConfig) -> Result<Value, Failure> {
    let data = synthgen::generate(&cfg.synthetic_spec(), cfg.seed)?;
    let dir = Path::new(&cfg.data_dir);
    synthgen::write_dataset(&data, dir)?;
    Ok(json!({
        "command": "gen-data",
        "result": {
            "dir": cfg.data_dir,
            "attributes": data.train.attributes,
            "counts": [data.train.len(), data.val.len(), data.test.len()],
            "train_positive_rates": data.train.positive_rates(),
        }
    }))
}

fn heatmap(cfg: &RunConfig, a: &HeatmapArgs) -> Result<Value, Failure> {
    let img = Image8::load(&a.image)?;
    if img.channels != 3 {
        return Err(Failure::Run(format!("{} is not an RGB image", a.image.display())));
    }
    let pixels = img.planes.iter().map(|&p| p as f32 / 255.0).collect();
    let image = Tensor::new(vec![3, img.height, img.width], pixels)?;
    let spec = cfg.teacher_spec()?.with_input((3, img.height, img.width));
    let frl = FrlNetwork::from_network(netspec::load(&spec, &a.ckpt)?)?;
    let m = frl.attribute_count();
    if a.attr >= m {
        return Err(Failure::Usage(format!("--attr {} out of range for {m} attributes", a.attr)));
    }
    let set = frl::heatmaps(&frl, &image)?;
    frl::heatmap_image(&set, a.attr).save(&a.out)?;
    let (x, y) = frl::peak(&set, a.attr);
    Ok(json!({
        "command": "heatmap",
        "result": { "out": a.out, "width": img.width, "height": img.height, "attr": a.attr, "peak": [x, y] }
    }))
}

fn dump_weights(a: &DumpArgs) -> Result<Value, Failure> {
    let params = netspec::load_params(&a.ckpt)?;
    let tensors: Vec<Value> = params
        .iter()
        .map(|(name, t)| {
            let l2 = t.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            json!({ "name": name, "dims": t.dims(), "l2": l2 })
        })
        .collect();
    let mut written = Vec::new();
    if let Some(fusion) = fusion_of(&params)? {
        let dir = match &a.out {
            Some(d) => d.clone(),
            None => a.ckpt.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        std::fs::create_dir_all(&dir).map_err(|e| Failure::Run(format!("creating {}: {e}", dir.display())))?;
        let m = fusion.attribute_count();
        let attrs: Vec<String> = (0..m).map(|j| format!("attr{j}")).collect();
        let rows: Vec<String> = std::iter::once("whole".to_string())
            .chain((0..m).map(|j| format!("part{j}")))
            .collect();
        for (file, data, rows) in [("rsl.csv", fusion.rsl(), &rows), ("arl.csv", fusion.arl_weight(), &attrs)] {
            let path = dir.join(file);
            let f = std::fs::File::create(&path).map_err(|e| Failure::Run(format!("creating {}: {e}", path.display())))?;
            write_matrix_csv(f, data.data(), rows, &attrs)?;
            written.push(path);
        }
    }
    Ok(json!({ "command": "dump-weights", "result": { "tensors": tensors, "written": written } }))
}

/// The fusion layers of a stage-4 or stage-5 checkpoint, if it has them.
fn fusion_of(params: &ParamSet<f32>) -> Result<Option<Fusion<f32>>, Failure> {
    let mut fusion = ParamSet::new();
    for name in [RSL_WEIGHT, ARL_WEIGHT, ARL_BIAS] {
        match params.get(name) {
            Some(t) => fusion.push(name, t.clone())?,
            None => return Ok(None),
        }
    }
    Ok(Some(Fusion::from_params(fusion)?))
}

fn grad_check(cfg: &RunConfig, a: &GradCheckArgs) -> Result<Value, Failure> {
    let s = cfg.image_size;
    let spec = presets::by_name(&a.net, cfg.attribute_count(), cfg.branch_maps)
        .ok_or_else(|| Failure::Usage(format!("unknown network `{}`; known: {}", a.net, presets::NAMES.join(", "))))?
        .with_input((3, s, s));
    let checks = diagnostics::grad_check_suite(&spec, a.seed)?;
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    for c in &checks {
        info!("{:<32} max rel err {:.3e} ({} coords)", c.name, c.max_rel_err, c.checked);
    }
    let out = json!({
        "command": "grad-check",
        "result": { "net": a.net, "seed": a.seed, "max_rel_err": worst, "tolerance": MAX_REL_ERR, "checks": checks }
    });
    if worst < MAX_REL_ERR {
        Ok(out)
    } else {
        println!("{out}");
        Err(Failure::Run(format!("max relative error {worst:.3e} exceeds {MAX_REL_ERR:e}")))
    }
}
