use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use reshape_core::attention::selfcheck;
use reshape_core::body::{load_model, make_block_model, make_test_model, save_model, BodyModel, ROW_SUM_TOLERANCE};
use reshape_core::dataset::synthetic::synthetic_triplet;
use reshape_core::dataset::{
    apply_curation, enumerate_pairs, normalize_manifest, read_jsonl, read_manifest, write_jsonl, CurationFlag,
};
use reshape_core::mapping::{
    attributes_to_beta, fit_map, generate_corpus, slider_state, AttributeEdit, AttributeSample, FitOptions,
    LinearAttributeMap, MeasurementConfig,
};
use reshape_core::metrics::evaluate;
use reshape_core::render::{rasterize_depth_with, render_conditioning_with, Camera};
use reshape_core::{Exec, PoseParams, ShapeParams};
use reshape_service::protocol::{BackendClient, GenerationParams};
use reshape_service::store::Store;
use reshape_service::{server, stub, Service};

#[derive(Parser)]
#[command(
    name = "reshape",
    version,
    about = "Body-shape editing toolkit: model, sliders, depth conditioning, datasets, metrics and the editing service"
)]
struct Cli {
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Body-model container files.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Semantic attribute maps.
    #[command(subcommand)]
    Map(MapCmd),
    /// Render the 8-bit depth conditioning image for a shape and pose.
    Render {
        #[arg(long)]
        model: PathBuf,
        /// JSON array of shape coefficients. Zeros when omitted.
        #[arg(long)]
        beta: Option<PathBuf>,
        /// JSON array of axis-angle values, three per joint. Rest pose when omitted.
        #[arg(long)]
        theta: Option<PathBuf>,
        /// Camera JSON. Frontal 768x1024 pinhole when omitted.
        #[arg(long)]
        camera: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the 16-bit millimeter depth map.
        #[arg(long)]
        depth_out: Option<PathBuf>,
    },
    /// Attention reference checks.
    #[command(subcommand)]
    Attn(AttnCmd),
    /// Dataset normalization and pair enumeration.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Image and body-shape metrics.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Run the HTTP editing service.
    Serve(ServeArgs),
    /// Run the loopback generation backend.
    StubBackend {
        #[arg(long, default_value = "127.0.0.1:8090")]
        addr: std::net::SocketAddr,
    },
    /// Headless project operations against a data directory.
    Project(ProjectArgs),
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Print dimensions and invariant checks.
    Inspect { file: PathBuf },
    /// Write a synthetic model.
    MakeTest {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the block body instead, on which attributes are exactly affine in β.
        #[arg(long)]
        block: bool,
    },
}

#[derive(Subcommand)]
enum MapCmd {
    /// Measure random shapes into a sample file.
    Corpus {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 1.0)]
        range: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a linear attribute map to samples.
    Fit {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = reshape_core::mapping::DEFAULT_RIDGE)]
        lambda: f64,
        /// Comma-separated attribute subset.
        #[arg(long, value_delimiter = ',')]
        attributes: Option<Vec<String>>,
    },
    /// Apply slider edits such as `weight=+10` or `height=1.8` to a β.
    Apply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        beta: PathBuf,
        #[arg(long = "edit", required = true)]
        edits: Vec<AttributeEdit>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum AttnCmd {
    /// Run the attention and toy-denoiser invariant suite.
    Selfcheck,
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Scale and composite every triplet of a manifest.
    Normalize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Enumerate transformation pairs and apply curation flags.
    Pairs {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        flags: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic triplets and their manifest.
    Synth {
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Score predictions against ground truth.
    Run {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        fits: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lpips: Option<PathBuf>,
        /// JSON report path. The text table goes to stdout.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct EnvArgs {
    #[arg(long, env = "RESHAPE_DATA_DIR")]
    data_dir: PathBuf,
    #[arg(long, env = "RESHAPE_MODEL")]
    model: PathBuf,
    #[arg(long, env = "RESHAPE_MAP")]
    map: PathBuf,
    #[arg(long, env = "RESHAPE_BACKEND_URL")]
    backend_url: Option<String>,
}

impl EnvArgs {
    fn config(&self, addr: std::net::SocketAddr) -> server::Config {
        server::Config {
            addr,
            data_dir: self.data_dir.clone(),
            model: self.model.clone(),
            map: self.map.clone(),
            backend_url: self.backend_url.clone().filter(|s| !s.is_empty()),
        }
    }
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "RESHAPE_ADDR", default_value = "127.0.0.1:8080")]
    addr: std::net::SocketAddr,
    #[command(flatten)]
    env: EnvArgs,
}

#[derive(Args)]
struct ProjectArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[command(subcommand)]
    command: ProjectCmd,
}

#[derive(Subcommand)]
enum ProjectCmd {
    /// Create a project from a reference image; prints the id.
    Create { image: PathBuf },
    /// Import a fit document (JSON with beta, theta, camera).
    Fit { id: String, fit: PathBuf },
    /// Apply slider edits such as `weight=+10`.
    Sliders {
        id: String,
        #[arg(long = "edit")]
        edits: Vec<AttributeEdit>,
    },
    /// Write the conditioning image of a history entry (latest by default).
    Conditioning {
        id: String,
        #[arg(long)]
        entry: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the posed mesh of a history entry as JSON.
    Mesh {
        id: String,
        #[arg(long)]
        entry: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Send a history entry to the generation backend.
    Generate {
        id: String,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        entry: Option<usize>,
        #[arg(long, default_value_t = 30)]
        steps: u32,
        #[arg(long, default_value_t = 7.5)]
        guidance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to copy the generated image.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the project state as JSON.
    History { id: String },
    /// Recompute every history entry and compare with what is stored.
    Replay { id: String },
    /// List project ids.
    List,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_map(path: &Path) -> Result<LinearAttributeMap> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(LinearAttributeMap::from_json(&text)?)
}

fn load(path: &Path) -> Result<BodyModel> {
    load_model(path).with_context(|| format!("loading {}", path.display()))
}

fn inspect(file: &Path) -> Result<bool> {
    let model = load(file)?;
    let p = model.parts();
    println!("file        {}", file.display());
    println!("vertices    {}", model.num_vertices());
    println!("faces       {}", model.num_faces());
    println!("joints      {}", model.num_joints());
    println!("betas       {}", model.num_betas());
    println!("pose feats  {}", model.num_pose_features());
    println!("root joint  {}", model.root());

    let (v, j) = (model.num_vertices(), model.num_joints());
    let row_dev = |rows: &mut dyn Iterator<Item = f64>| rows.map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    let skin_dev = row_dev(&mut p.skin_weights.chunks_exact(j).map(|r| r.iter().sum()));
    let reg_dev = row_dev(&mut p.joint_regressor.chunks_exact(v).map(|r| r.iter().sum()));
    let rest = model.skin(&ShapeParams::zeros(model.num_betas()), &PoseParams::zeros(j))?;
    let rest_dev = rest
        .vertices
        .iter()
        .zip(model.template())
        .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
        .fold(0.0, f64::max);
    let mut edges = std::collections::HashMap::new();
    for f in model.faces() {
        for k in 0..3 {
            *edges.entry((f[k], f[(k + 1) % 3])).or_insert(0usize) += 1;
        }
    }
    let closed = edges.iter().all(|(&(a, b), &n)| n == 1 && edges.get(&(b, a)) == Some(&1));

    let checks = [
        ("skinning weight rows sum to 1", skin_dev <= ROW_SUM_TOLERANCE, format!("max deviation {skin_dev:.3e}")),
        ("joint regressor rows sum to 1", reg_dev <= ROW_SUM_TOLERANCE, format!("max deviation {reg_dev:.3e}")),
        ("rest pose reproduces template", rest_dev <= 1e-9, format!("max deviation {rest_dev:.3e} m")),
        ("surface is closed and consistently oriented", closed, format!("{} directed edges", edges.len())),
    ];
    let mut ok = true;
    for (name, pass, detail) in checks {
        ok &= pass;
        println!("[{}] {name} ({detail})", if pass { "pass" } else { "FAIL" });
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match cli.command {
        Command::Model(ModelCmd::Inspect { file }) => return inspect(&file),
        Command::Model(ModelCmd::MakeTest { out, seed, block }) => {
            let m = if block { make_block_model() } else { make_test_model(seed) };
            save_model(&m, &out)?;
            println!(
                "wrote {} ({} vertices, {} joints, {} betas)",
                out.display(),
                m.num_vertices(),
                m.num_joints(),
                m.num_betas()
            );
        }
        Command::Map(MapCmd::Corpus { model, count, range, seed, out }) => {
            let m = load(&model)?;
            let samples = generate_corpus(&m, count, range, seed, &MeasurementConfig::default())?;
            write_json(&out, &samples)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Map(MapCmd::Fit { samples, out, lambda, attributes }) => {
            let samples: Vec<AttributeSample> = read_json(&samples)?;
            let mut opts = FitOptions { ridge_lambda: lambda, ..FitOptions::default() };
            if let Some(a) = attributes {
                opts.attribute_names = a;
            }
            let map = fit_map(&samples, &opts)?;
            std::fs::write(&out, map.to_json())?;
            println!("fitted {} attributes, rms beta residual {:.3e}", map.num_attributes(), map.fit_residual);
        }
        Command::Map(MapCmd::Apply { model, map, beta, edits, out }) => {
            let m = load(&model)?;
            let map = load_map(&map)?;
            let beta = ShapeParams(read_json(&beta)?);
            let new_beta = attributes_to_beta(&m, &map, &beta, &edits)?;
            let before = slider_state(&m, &map, &beta)?;
            let after = slider_state(&m, &map, &new_beta)?;
            println!("{:<12} {:>12} {:>12}", "attribute", "before", "after");
            for name in &map.attribute_names {
                println!("{name:<12} {:>12.4} {:>12.4}", before.get(name).unwrap(), after.get(name).unwrap());
            }
            match out {
                Some(p) => write_json(&p, &new_beta.0)?,
                None => println!("{}", serde_json::to_string(&new_beta.0)?),
            }
        }
        Command::Render { model, beta, theta, camera, out, depth_out } => {
            let m = load(&model)?;
            let beta = match beta {
                Some(p) => ShapeParams(read_json(&p)?),
                None => ShapeParams::zeros(m.num_betas()),
            };
            let theta = match theta {
                Some(p) => PoseParams::from_flat(&read_json::<Vec<f64>>(&p)?)?,
                None => PoseParams::zeros(m.num_joints()),
            };
            let camera: Camera = match camera {
                Some(p) => read_json(&p)?,
                None => Camera::frontal(reshape_core::render::DEFAULT_WIDTH, reshape_core::render::DEFAULT_HEIGHT),
            };
            let img = render_conditioning_with(&m, &beta, &theta, &camera, exec)?;
            img.save_png(&out)?;
            if let Some(d) = depth_out {
                let depth = rasterize_depth_with(&m.skin_with(&beta, &theta, exec)?, &camera, exec)?;
                std::fs::write(&d, depth.to_png_mm()?)?;
            }
            println!("wrote {} ({} foreground pixels)", out.display(), img.foreground_count());
        }
        Command::Attn(AttnCmd::Selfcheck) => {
            let results = selfcheck::run_all();
            let mut ok = true;
            for r in &results {
                ok &= r.passed;
                println!("[{}] {}: {}", if r.passed { "pass" } else { "FAIL" }, r.name, r.detail);
            }
            return Ok(ok);
        }
        Command::Dataset(DatasetCmd::Normalize { manifest, out }) => {
            let entries = read_manifest(&manifest)?;
            std::fs::create_dir_all(&out)?;
            let records = normalize_manifest(&entries, &out, exec)?;
            write_jsonl(&out.join("normalized.jsonl"), &records)?;
            let clipped = records.iter().filter(|r| !r.clipped.is_empty()).count();
            println!("normalized {} triplets into {} ({clipped} with clipping)", records.len(), out.display());
        }
        Command::Dataset(DatasetCmd::Pairs { manifest, flags, out }) => {
            let entries = read_manifest(&manifest)?;
            let mut pairs = Vec::new();
            for e in &entries {
                pairs.extend(enumerate_pairs(e)?);
            }
            let flags: Vec<CurationFlag> = match flags {
                Some(f) => read_jsonl(&f)?,
                None => Vec::new(),
            };
            let outcome = apply_curation(pairs, &flags)?;
            write_jsonl(&out, &outcome.pairs)?;
            println!("{}", serde_json::to_string_pretty(&outcome.report)?);
        }
        Command::Dataset(DatasetCmd::Synth { count, seed, out }) => {
            std::fs::create_dir_all(&out)?;
            let mut entries = Vec::with_capacity(count);
            for i in 0..count {
                let identity = format!("synth{i:05}");
                let t = synthetic_triplet(&identity, seed.wrapping_add(i as u64), 96, 128);
                let mut e = t.save(&out.join(&identity))?;
                e.background = e.background.strip_prefix(&out).unwrap_or(&e.background).to_path_buf();
                for m in e.members.values_mut() {
                    m.image = m.image.strip_prefix(&out).unwrap_or(&m.image).to_path_buf();
                    m.mask = m.mask.strip_prefix(&out).unwrap_or(&m.mask).to_path_buf();
                }
                entries.push(e);
            }
            write_jsonl(&out.join("manifest.jsonl"), &entries)?;
            println!("wrote {count} triplets and {}", out.join("manifest.jsonl").display());
        }
        Command::Bench(BenchCmd::Run { pred, gt, fits, model, lpips, out }) => {
            let m = load(&model)?;
            let report = evaluate(&pred, &gt, &fits, &m, lpips.as_deref(), exec)?;
            std::fs::write(&out, report.to_json())?;
            print!("{}", report.to_table());
        }
        Command::Serve(args) => {
            runtime()?.block_on(server::serve(args.env.config(args.addr)))?;
        }
        Command::StubBackend { addr } => {
            runtime()?.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
                println!("listening on http://{}", listener.local_addr()?);
                axum::serve(listener, stub::router(stub::StubOptions::default()))
                    .with_graceful_shutdown(server::shutdown_signal())
                    .await?;
                anyhow::Ok(())
            })?;
        }
        Command::Project(args) => return project(args),
    }
    Ok(true)
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn project(args: ProjectArgs) -> Result<bool> {
    let env = &args.env;
    let svc = Service::new(
        load(&env.model)?,
        load_map(&env.map)?,
        Store::open(&env.data_dir)?,
        env.backend_url.as_deref().filter(|s| !s.is_empty()).map(BackendClient::new),
    )?;
    match args.command {
        ProjectCmd::Create { image } => {
            let bytes = std::fs::read(&image).with_context(|| format!("reading {}", image.display()))?;
            println!("{}", svc.create_project(&bytes)?.id);
        }
        ProjectCmd::Fit { id, fit } => {
            let entry = svc.import_fit(&id, read_json(&fit)?)?;
            println!("{}", serde_json::to_string_pretty(&entry)?);
        }
        ProjectCmd::Sliders { id, edits } => {
            let (entry, _) = svc.apply_sliders(&id, &edits)?;
            println!("{}", serde_json::to_string_pretty(&entry)?);
        }
        ProjectCmd::Conditioning { id, entry, out } => {
            std::fs::write(&out, svc.conditioning_png(&id, entry)?)?;
        }
        ProjectCmd::Mesh { id, entry, out } => write_json(&out, &svc.mesh(&id, entry)?)?,
        ProjectCmd::Generate { id, prompt, entry, steps, guidance, seed, out } => {
            let params = GenerationParams { prompt, steps, guidance, seed };
            let record = runtime()?.block_on(svc.request_generation(&id, entry, params))?;
            if let Some(out) = out {
                std::fs::write(&out, svc.output_png(&id, record.index)?)?;
            }
            println!("{}", serde_json::to_string_pretty(&record)?);
        }
        ProjectCmd::History { id } => println!("{}", serde_json::to_string_pretty(&svc.load(&id)?)?),
        ProjectCmd::Replay { id } => {
            let report = svc.replay(&id)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            return Ok(report.is_exact());
        }
        ProjectCmd::List => {
            for id in svc.store().list()? {
                println!("{id}");
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// Joins the error chain, skipping causes already spelled out by the message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}
