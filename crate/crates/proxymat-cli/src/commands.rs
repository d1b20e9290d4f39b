//! Command implementations. TOML config files are merged with flag
//! overrides; unknown config keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;

use proxymat::error::{Error, Result};
use proxymat::generators::GENERATOR_NAMES;
use proxymat::graph::{GeneratorMode, MaterialGraph, ProxyStore};
use proxymat::optimize::{run_pipeline, OptimizeConfig};
use proxymat::paramspace::{build_dataset, SampleConfig, SamplingMode};
use proxymat::proxynet::{load_proxy, save_proxy};
use proxymat::proxytrain::{eval_proxy, train_proxy, TrainConfig};
use proxymat::render::render_arrays;
use proxymat::util::{file_sha256, imageio, write_json_pretty};

pub struct Global {
    pub seed: Option<u64>,
    pub fixed_math: bool,
}

/// Environment variable naming a default pretrained extractor weight file.
pub const EXTRACTOR_WEIGHTS_ENV: &str = "PROXYMAT_EXTRACTOR_WEIGHTS";

/// Guard enforcing one invocation per output directory. The lock file is
/// removed when the command finishes; a stale lock after a crash must be
/// deleted manually (its content names the owning process).
struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    fn acquire(out: &Path) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
        let path = out.join(".proxymat.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "pid {}", std::process::id());
                Ok(OutDirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory {} is locked by another invocation (remove {} if stale)",
                out.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(path.display().to_string(), e)),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if path.extension().is_some_and(|e| e == "json") {
        proxymat::util::read_json(path)
    } else {
        read_toml(path)
    }
}

fn parse_json_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => load_config(p),
    }
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct SampleArgs {
    /// Config file (TOML or JSON) with a full SampleConfig.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    generator: Option<String>,
    #[arg(long)]
    count: Option<usize>,
    /// Square resolution (power of two).
    #[arg(long)]
    resolution: Option<usize>,
    /// gaussian | uniform
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    shard_size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

pub fn sample(args: SampleArgs, global: &Global) -> Result<()> {
    let mut cfg: SampleConfig = match &args.config {
        Some(p) => load_config(p)?,
        None => SampleConfig {
            generator: String::new(),
            count: 256,
            resolution: (64, 64),
            sampling: SamplingMode::IndependentGaussianClipped,
            seed: 0,
            shard_size: 256,
        },
    };
    if let Some(g) = args.generator {
        cfg.generator = g;
    }
    if let Some(c) = args.count {
        cfg.count = c;
    }
    if let Some(r) = args.resolution {
        cfg.resolution = (r, r);
    }
    if let Some(m) = &args.mode {
        cfg.sampling = match m.as_str() {
            "gaussian" => SamplingMode::IndependentGaussianClipped,
            "uniform" => SamplingMode::UniformInRange,
            other => return Err(Error::Config(format!("unknown sampling mode `{other}`"))),
        };
    }
    if let Some(s) = args.shard_size {
        cfg.shard_size = s;
    }
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if cfg.generator.is_empty() {
        return Err(Error::Config("--generator (or a config file) is required".into()));
    }
    let _lock = OutDirLock::acquire(&args.out)?;
    let manifest = build_dataset(&cfg, &args.out)?;
    write_json_pretty(&args.out.join("run_config.json"), &cfg)?;
    println!(
        "dataset: {} records of {} at {}x{} in {}",
        manifest.records.len(),
        cfg.generator,
        cfg.resolution.0,
        cfg.resolution.1,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Config file (TOML or JSON) with a TrainConfig.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cap on optimization steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Enable the adversarial critic with this weight.
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

pub fn train(args: TrainArgs, global: &Global) -> Result<()> {
    let mut cfg: TrainConfig = parse_json_config(args.config.as_deref())?;
    if let Some(s) = args.steps {
        cfg.max_steps = Some(s);
    }
    if let Some(l3) = args.lambda3 {
        cfg.lambda3 = l3;
    }
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if cfg.extractor_weights.is_none() {
        if let Ok(path) = std::env::var(EXTRACTOR_WEIGHTS_ENV) {
            cfg.extractor_weights = Some(path);
        }
    }
    let _lock = OutDirLock::acquire(&args.out)?;
    write_json_pretty(&args.out.join("run_config.json"), &cfg)?;
    let model = train_proxy(&args.dataset, &cfg, &args.out)?;
    let best = args.out.join("best.proxy");
    let provenance = serde_json::json!({
        "dataset": args.dataset.display().to_string(),
        "dataset_manifest_sha256": file_sha256(&args.dataset.join("manifest.json"))?,
        "best_checkpoint_sha256": file_sha256(&best)?,
        "seed": cfg.seed,
        "fixed_math": global.fixed_math,
    });
    write_json_pretty(&args.out.join("provenance.json"), &provenance)?;
    println!(
        "trained {} proxy -> {} (spec {})",
        model.spec.name,
        best.display(),
        &model.spec.version_hash[..12]
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    proxy: PathBuf,
    /// Held-out dataset directory (must not overlap the training set).
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn eval(args: EvalArgs, _global: &Global) -> Result<()> {
    let mut model = load_proxy(&args.proxy)?;
    let report = eval_proxy(&model, &args.dataset)?;
    let _lock = OutDirLock::acquire(&args.out)?;
    write_json_pretty(&args.out.join("fidelity.json"), &report)?;
    // persist the report into the checkpoint metadata as well
    model.metadata.fidelity = Some(report.clone());
    save_proxy(&model, &args.proxy)?;
    println!(
        "held-out mean L1 {:.5} (p90 {:.5}, feature {:.5}) over {} records; report: {}",
        report.mean_l1,
        report.p90_l1,
        report.mean_feature_distance,
        report.heldout_count,
        args.out.join("fidelity.json").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct RenderArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    /// Directory of trained `<generator>.proxy` checkpoints (needed only
    /// for graphs with proxy-mode nodes).
    #[arg(long)]
    proxies_dir: Option<PathBuf>,
    /// Force all generator nodes to original mode before rendering.
    #[arg(long)]
    original_mode: bool,
    #[arg(long)]
    out: PathBuf,
}

pub fn render(args: RenderArgs, global: &Global) -> Result<()> {
    let mut graph = MaterialGraph::load(&args.graph)?;
    if args.original_mode {
        for id in graph.generator_node_ids() {
            graph.set_mode(&id, GeneratorMode::Original)?;
        }
    }
    let store = match &args.proxies_dir {
        Some(d) => ProxyStore::load_dir(d)?,
        None => ProxyStore::default(),
    };
    let _lock = OutDirLock::acquire(&args.out)?;
    let res = (args.resolution, args.resolution);
    let maps = proxymat::graph::evaluate_graph(&graph, &store, res)?;
    let setup = proxymat::render::RenderSetup::default();
    let beauty = render_arrays(&maps.albedo, &maps.normal, &maps.roughness, &maps.metallic, &setup)?;
    imageio::save_rgb8(&args.out.join("albedo.png"), &maps.albedo)?;
    imageio::save_rgb8(&args.out.join("normal.png"), &maps.normal)?;
    imageio::save_gray8(&args.out.join("roughness.png"), &maps.roughness)?;
    imageio::save_gray8(&args.out.join("metallic.png"), &maps.metallic)?;
    imageio::save_rgb8(&args.out.join("render.png"), &beauty)?;
    let provenance = serde_json::json!({
        "graph": args.graph.display().to_string(),
        "graph_sha256": file_sha256(&args.graph)?,
        "graph_structural_hash": graph.structural_hash()?,
        "resolution": args.resolution,
        "render_setup": setup,
        "fixed_math": global.fixed_math,
    });
    write_json_pretty(&args.out.join("provenance.json"), &provenance)?;
    println!("rendered {} at {0}x{0} -> {}", args.resolution, args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// optimize
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Target image (PNG).
    #[arg(long)]
    target: PathBuf,
    /// Directory of trained `<generator>.proxy` checkpoints.
    #[arg(long)]
    proxies_dir: Option<PathBuf>,
    /// Use the oracle proxy (wrap the original generators) instead of
    /// trained checkpoints; θ_g receives no gradients in this mode.
    #[arg(long)]
    oracle_proxies: bool,
    /// Config file (TOML or JSON) with an OptimizeConfig.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

pub fn optimize(args: OptimizeArgs, global: &Global) -> Result<()> {
    let graph = MaterialGraph::load(&args.graph)?;
    let target = imageio::load_rgb(&args.target)?;
    let mut cfg: OptimizeConfig = parse_json_config(args.config.as_deref())?;
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    cfg.fixed_math = cfg.fixed_math || global.fixed_math;
    if cfg.extractor_weights.is_none() {
        if let Ok(path) = std::env::var(EXTRACTOR_WEIGHTS_ENV) {
            cfg.extractor_weights = Some(path);
        }
    }
    let store = if args.oracle_proxies {
        ProxyStore::oracle()
    } else {
        match &args.proxies_dir {
            Some(d) => ProxyStore::load_dir(d)?,
            None => ProxyStore::default(),
        }
    };
    let _lock = OutDirLock::acquire(&args.out)?;
    let result = run_pipeline(&graph, &target, &cfg, &store, &args.out)?;
    let mut proxy_hashes = serde_json::Map::new();
    if let Some(d) = &args.proxies_dir {
        for name in GENERATOR_NAMES {
            let p = d.join(format!("{name}.proxy"));
            if p.exists() {
                proxy_hashes.insert(name.to_string(), file_sha256(&p)?.into());
            }
        }
    }
    let provenance = serde_json::json!({
        "graph": args.graph.display().to_string(),
        "graph_sha256": file_sha256(&args.graph)?,
        "target_sha256": file_sha256(&args.target)?,
        "proxies": proxy_hashes,
        "oracle_proxies": args.oracle_proxies,
        "seed": cfg.seed,
        "fixed_math": cfg.fixed_math,
    });
    write_json_pretty(&args.out.join("provenance.json"), &provenance)?;
    let last = result.report.stages.last().unwrap();
    println!(
        "optimize done: eq5 {:.5} -> {:.5} (best {:.5} at stage {} step {}); bundle: {}",
        result.report.stages[0].initial_eq5,
        last.final_eq5,
        result.report.best.eq5,
        result.report.best.stage,
        result.report.best.step,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct ReportArgs {
    /// Optimization bundle directories.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

pub fn report(args: ReportArgs, _global: &Global) -> Result<()> {
    if args.runs.is_empty() {
        return Err(Error::Config("--runs requires at least one bundle".into()));
    }
    let _lock = OutDirLock::acquire(&args.out)?;
    crate::plot::write_report(&args.runs, &args.out)?;
    println!("report written to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// schema
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct SchemaArgs {
    #[arg(long)]
    out: PathBuf,
}

pub fn schema(args: SchemaArgs, _global: &Global) -> Result<()> {
    let _lock = OutDirLock::acquire(&args.out)?;
    for name in GENERATOR_NAMES {
        let spec = proxymat::generators::generator_spec(name)?;
        write_json_pretty(&args.out.join(format!("{name}.json")), spec)?;
    }
    write_json_pretty(
        &args.out.join("filters.json"),
        &proxymat::filters::registry_json(),
    )?;
    println!("schemas for {} generators + filter registry -> {}", GENERATOR_NAMES.len(), args.out.display());
    Ok(())
}
