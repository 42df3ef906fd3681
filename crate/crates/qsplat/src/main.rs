//! Command-line surface: scene generation, rendering, benchmarking,
//! transmittance profiling, quadrature experiments, voxelization, and
//! feature distillation.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qsplat::bench::{bench_to_csv, run_bench};
use qsplat::distill::{classify_gaussians, optimize_features, MaskSample, TrainConfig};
use qsplat::integrators::{
    render_image, trace_transmittance, traces_to_csv, IntegratorConfig, Payload, Strategy,
};
use qsplat::io;
use qsplat::scene::load_ply;
use qsplat::synth::{
    camera_ring, cluster_masks, cluster_targets, generate_scene, SyntheticSceneSpec,
};
use qsplat::theory::{random_model, verify_bound};
use qsplat::voxel::voxelize;
use qsplat::{Error, Result};

#[derive(Parser)]
#[command(name = "qsplat", about = "CPU Gaussian-splatting renderer and analysis tools")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered scene as PLY plus a labels file.
    GenScene(GenSceneArgs),
    /// Render a scene to a PPM image or a raw feature map.
    Render(RenderArgs),
    /// Benchmark the integrators and write a CSV of timing/fidelity rows.
    Bench(BenchArgs),
    /// Dump per-pixel transmittance traces with selection flags as CSV.
    Profile(ProfileArgs),
    /// Run the quadrature error-bound experiment and write a CSV report.
    Theory(TheoryArgs),
    /// Voxelize a scene into the binary voxel container.
    Voxelize(VoxelizeArgs),
    /// Distill per-Gaussian features against synthetic cluster masks.
    Distill(DistillArgs),
}

#[derive(Args)]
struct GenSceneArgs {
    /// Generator spec JSON: {count, extent, scale_range, opacity_range,
    /// clusters, seed}.
    #[arg(long)]
    spec: PathBuf,
    /// Output PLY path.
    #[arg(long)]
    out: PathBuf,
    /// Output labels JSON path.
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    /// Scene PLY path.
    scene: PathBuf,
    /// Camera JSON path.
    #[arg(long)]
    camera: PathBuf,
    #[arg(long, default_value = "volume")]
    strategy: String,
    #[arg(long, default_value_t = 40)]
    k: usize,
    /// 3 renders RGB; anything else renders feature-table columns.
    #[arg(long, default_value_t = 3)]
    channels: usize,
    /// Feature table path (required when channels != 3 and the PLY
    /// carries no feature columns).
    #[arg(long)]
    features: Option<PathBuf>,
    /// Output path: PPM for RGB, raw f32 + sidecar otherwise.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    scene: PathBuf,
    #[arg(long)]
    camera: PathBuf,
    /// Comma-separated strategies.
    #[arg(long, default_value = "volume,quantile,topk,stratified", value_delimiter = ',')]
    strategies: Vec<String>,
    #[arg(long = "k-list", default_value = "40", value_delimiter = ',')]
    k_list: Vec<usize>,
    #[arg(long = "c-list", default_value = "3", value_delimiter = ',')]
    c_list: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Feature table path for channel counts other than 3.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Seed for the fallback random feature table.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    scene: PathBuf,
    #[arg(long)]
    camera: PathBuf,
    /// Comma-separated x,y pixel pairs, e.g. "4x7,10x3".
    #[arg(long, value_delimiter = ',')]
    pixels: Vec<String>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TheoryArgs {
    /// Number of random ray models in the corpus.
    #[arg(long, default_value_t = 1000)]
    models: usize,
    #[arg(long = "k-list", default_value = "2,4,8,16,32,64,128", value_delimiter = ',')]
    k_list: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VoxelizeArgs {
    scene: PathBuf,
    #[arg(long)]
    grid: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    scene: PathBuf,
    /// Per-Gaussian cluster labels JSON (from gen-scene).
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    cameras: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long = "learning-rate", default_value_t = 0.5)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 3)]
    negatives: usize,
    #[arg(long, default_value = "quantile")]
    strategy: String,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output feature table path (sidecar written alongside).
    #[arg(long)]
    out: PathBuf,
    /// Output metrics JSON path.
    #[arg(long)]
    metrics: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        if workers == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Schema(_) | Error::Contract(_) | Error::Domain(_) | Error::Parse(_) => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn load_scene(path: &PathBuf) -> Result<(qsplat::scene::GaussianScene, Option<qsplat::scene::FeatureTable>)> {
    load_ply(&mut BufReader::new(File::open(path)?))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenScene(a) => {
            let spec: SyntheticSceneSpec =
                serde_json::from_reader(BufReader::new(File::open(&a.spec)?))?;
            let (scene, labels) = generate_scene(&spec);
            qsplat::scene::write_ply(&mut BufWriter::new(File::create(&a.out)?), &scene, None)?;
            io::save_labels(&a.labels, &labels)?;
            println!("wrote {} gaussians to {}", scene.len(), a.out.display());
        }
        Command::Render(a) => {
            let (scene, embedded) = load_scene(&a.scene)?;
            let cam = io::load_camera_json(&a.camera)?;
            let strategy = Strategy::parse(&a.strategy)?;
            let config = if strategy == Strategy::Volume {
                IntegratorConfig::volume()
            } else {
                IntegratorConfig::new(strategy, a.k)?
            };
            if a.channels == 3 {
                let map = render_image(&scene, &cam, Payload::Rgb, &config)?;
                io::write_ppm(&a.out, &map)?;
            } else {
                let table = match (&a.features, embedded) {
                    (Some(path), _) => io::load_feature_table(path)?.0,
                    (None, Some(t)) => t,
                    (None, None) => {
                        return Err(Error::Contract(format!(
                            "rendering {} channels needs --features or feature columns in the PLY",
                            a.channels
                        )))
                    }
                };
                if table.channels != a.channels {
                    return Err(Error::Contract(format!(
                        "feature table has {} channels, --channels says {}",
                        table.channels, a.channels
                    )));
                }
                let map = render_image(&scene, &cam, Payload::Features(&table), &config)?;
                io::save_feature_map(&a.out, &map)?;
            }
            println!("wrote {}", a.out.display());
        }
        Command::Bench(a) => {
            let (scene, embedded) = load_scene(&a.scene)?;
            let cam = io::load_camera_json(&a.camera)?;
            let strategies: Vec<Strategy> = a
                .strategies
                .iter()
                .map(|s| Strategy::parse(s))
                .collect::<Result<_>>()?;
            let max_c = a.c_list.iter().copied().max().unwrap_or(3);
            let table = if max_c > 3 || a.c_list.iter().any(|&c| c != 3) {
                Some(match (&a.features, embedded) {
                    (Some(path), _) => io::load_feature_table(path)?.0,
                    (None, Some(t)) if t.channels >= max_c => t,
                    _ => random_feature_table(scene.len(), max_c, a.seed),
                })
            } else {
                None
            };
            let records = run_bench(
                &scene,
                &cam,
                &a.scene.display().to_string(),
                &strategies,
                &a.k_list,
                &a.c_list,
                a.repeats,
                table.as_ref(),
            )?;
            let csv = bench_to_csv(&records, rayon::current_num_threads());
            File::create(&a.out)?.write_all(csv.as_bytes())?;
            println!("wrote {} rows to {}", records.len(), a.out.display());
        }
        Command::Profile(a) => {
            let (scene, _) = load_scene(&a.scene)?;
            let cam = io::load_camera_json(&a.camera)?;
            let config = IntegratorConfig::new(Strategy::Quantile, a.k)?;
            let mut traces = Vec::new();
            for spec in &a.pixels {
                let (x, y) = parse_pixel(spec)?;
                traces.push(trace_transmittance(&scene, &cam, (x, y), &config)?);
            }
            File::create(&a.out)?.write_all(traces_to_csv(&traces).as_bytes())?;
            println!("wrote {} traces to {}", traces.len(), a.out.display());
        }
        Command::Theory(a) => {
            if a.models == 0 {
                return Err(Error::Domain("need at least one model".into()));
            }
            let mut csv = String::from("k,error,bound,reference_norm\n");
            let mut violations = 0;
            for i in 0..a.models {
                let model = random_model(a.seed.wrapping_add(i as u64), 1);
                let report = verify_bound(&model, &a.k_list)?;
                violations += report.violations();
                for line in report.to_csv().lines().skip(1) {
                    csv.push_str(line);
                    csv.push('\n');
                }
            }
            File::create(&a.out)?.write_all(csv.as_bytes())?;
            println!("{} models, {} bound violations", a.models, violations);
            if violations > 0 {
                return Err(Error::Estimation(format!("{violations} bound violations")));
            }
        }
        Command::Voxelize(a) => {
            let (scene, _) = load_scene(&a.scene)?;
            let vs = voxelize(&scene, a.grid)?;
            io::save_voxel_set(&a.out, &vs)?;
            println!(
                "{} gaussians -> {} unique voxels at grid {}",
                scene.len(),
                vs.unique_len(),
                a.grid
            );
        }
        Command::Distill(a) => {
            let (scene, _) = load_scene(&a.scene)?;
            let labels = io::load_labels(&a.labels)?;
            if labels.len() != scene.len() {
                return Err(Error::Contract(format!(
                    "{} labels for {} gaussians",
                    labels.len(),
                    scene.len()
                )));
            }
            let clusters = labels.iter().copied().max().map_or(0, |m| m + 1);
            if clusters == 0 {
                return Err(Error::Contract("empty label set".into()));
            }
            let strategy = Strategy::parse(&a.strategy)?;
            let cams = camera_ring(a.cameras, 4.0, 64, 64, 80.0);
            let mut samples: Vec<MaskSample> = Vec::new();
            for (ci, cam) in cams.iter().enumerate() {
                samples.extend(cluster_masks(&scene, &labels, cam, ci, clusters, a.channels)?);
            }
            let config = TrainConfig {
                learning_rate: a.learning_rate,
                momentum: a.momentum,
                steps: a.steps,
                negatives: a.negatives,
                integrator: if strategy == Strategy::Volume {
                    IntegratorConfig::volume()
                } else {
                    IntegratorConfig::new(strategy, a.k)?
                },
                seed: a.seed,
            };
            let (table, metrics) = optimize_features(&scene, &cams, &samples, a.channels, &config)?;
            let queries = cluster_targets(clusters, a.channels);
            let predicted = classify_gaussians(&table, &queries)?;
            let correct = predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();
            let accuracy = correct as f64 / labels.len() as f64;
            io::save_feature_table(&a.out, &table, a.seed, a.steps)?;
            let metrics_json = serde_json::json!({
                "accuracy": accuracy,
                "steps": metrics.steps,
                "initial_loss": metrics.initial_loss,
                "final_loss": metrics.final_loss,
                "losses": metrics.losses,
            });
            serde_json::to_writer_pretty(File::create(&a.metrics)?, &metrics_json)?;
            println!("label accuracy {accuracy:.4}, final loss {:.6}", metrics.final_loss);
        }
    }
    Ok(())
}

fn parse_pixel(spec: &str) -> Result<(u32, u32)> {
    let (x, y) = spec
        .split_once('x')
        .ok_or_else(|| Error::Parse(format!("pixel '{spec}' is not of the form XxY")))?;
    Ok((
        x.parse().map_err(|_| Error::Parse(format!("bad pixel x in '{spec}'")))?,
        y.parse().map_err(|_| Error::Parse(format!("bad pixel y in '{spec}'")))?,
    ))
}

/// Seeded unit-norm rows used when a bench needs wide features but none
/// were supplied.
fn random_feature_table(rows: usize, channels: usize, seed: u64) -> qsplat::scene::FeatureTable {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(rows * channels);
    for _ in 0..rows {
        let row: Vec<f64> = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        data.extend(row.into_iter().map(|v| v / norm));
    }
    qsplat::scene::FeatureTable::new(rows, channels, data).expect("consistent shape")
}
