use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cft_core::costmodel::cost_table;
use cft_core::harness::dump::{attention_mass, embedding_cells};
use cft_core::harness::experiments::datasets;
use cft_core::harness::{
    evaluate_baseline, evaluate_cft, exp_embedding, exp_noise, exp_windows, load_baseline, load_cft, save_checkpoint,
    summarize, train_baseline, train_cft, write_records, Evaluation, ModelKind, ResultRow, RunConfig,
};
use cft_core::scenegen::dataset::Dataset;
use cft_core::scenegen::perturb_extrinsics;
use cft_core::Result;

#[derive(Parser)]
#[command(name = "cft", about = "Calibration-free multi-camera BEV detection on a synthetic world")]
struct Cli {
    /// JSON or TOML run configuration; defaults to the selected preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Small,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Cft,
    Baseline,
}

#[derive(Subcommand)]
enum Command {
    /// Render the training and evaluation scenes to binary files.
    GenData,
    /// Train a detector and write a checkpoint directory.
    Train {
        #[arg(long, value_enum, default_value_t = Model::Cft)]
        model: Model,
    },
    /// Evaluate a checkpoint on the evaluation scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Rotation noise (degrees) applied to the rig the baseline lifts through.
        #[arg(long, default_value_t = 0.0)]
        noise_deg: f64,
    },
    /// Analytic and measured cross-attention cost of every window scheme.
    Cost,
    /// Height-embedding ablation over the experiment seeds.
    ExpEmbedding,
    /// Window-scheme comparison over the experiment seeds.
    ExpWindows,
    /// Extrinsics-noise robustness of both detectors.
    ExpNoise,
    /// Per-view attention mass of one BEV query.
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [0, 0])]
        cell: Vec<usize>,
    },
    /// Reference height and embedding norms of every BEV cell.
    DumpEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => match cli.preset {
            Preset::Desk => RunConfig::desk(),
            Preset::Small => RunConfig::small(),
        },
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn eval_scene(cfg: &RunConfig, index: usize) -> Result<Dataset> {
    let (_, eval) = datasets(cfg, cfg.seed)?;
    let scene = eval.scenes.get(index).cloned().ok_or_else(|| {
        cft_core::Error::Dataset(format!("scene {index} of {} evaluation scenes", eval.scenes.len()))
    })?;
    Ok(Dataset { config: eval.config, scenes: vec![scene] })
}

/// Every command records the exact configuration it ran with.
fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::write(dir.join("config.json"), cfg.to_json()?)?;
    Ok(())
}

fn write_eval(dir: &Path, variant: &str, cfg: &RunConfig, noise_deg: f64, e: &Evaluation) -> Result<()> {
    write_config(dir, cfg)?;
    let mut row = ResultRow::new("eval", variant, cfg.seed, &e.report, f64::NAN);
    row.noise_deg = noise_deg;
    write_records(dir, "metrics", &[row])?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&e.report)?)?;
    std::fs::write(dir.join("detections.json"), serde_json::to_string(&e.detections)?)?;
    println!("{}", e.report.to_table());
    Ok(())
}

fn print_summary(rows: &[ResultRow]) {
    for s in summarize(rows) {
        println!(
            "{:<18} noise {:>4.1}  runs {}  NDS {:.4} ± {:.4}  mAP {:.4} ± {:.4}",
            s.variant, s.noise_deg, s.runs, s.nds_mean, s.nds_std, s.map_mean, s.map_std
        );
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = &cli.out_dir;
    std::fs::create_dir_all(out)?;
    write_config(out, &cfg)?;
    match &cli.command {
        Command::GenData => {
            let (train, eval) = datasets(&cfg, cfg.seed)?;
            let dir = out.join("data");
            let a = train.save(&dir, "train")?;
            let b = eval.save(&dir, "eval")?;
            println!("{} train scenes -> {}\n{} eval scenes -> {}", train.len(), a.display(), eval.len(), b.display());
        }
        Command::Train { model } => {
            let (train, _) = datasets(&cfg, cfg.seed)?;
            let (dir, log) = match model {
                Model::Cft => {
                    let t = train_cft(&cfg, &train)?;
                    let dir = out.join("cft");
                    save_checkpoint(&dir, ModelKind::Cft, &cfg, &t.store, &t.log)?;
                    (dir, t.log)
                }
                Model::Baseline => {
                    let t = train_baseline(&cfg, &train, &cfg.scene.rig()?)?;
                    let dir = out.join("baseline");
                    save_checkpoint(&dir, ModelKind::Baseline, &cfg, &t.store, &t.log)?;
                    (dir, t.log)
                }
            };
            for l in &log {
                println!("epoch {:>3}  lr {:.2e}  loss {:.4}  focal {:.4}  reg {:.4}  height {:.4}", l.epoch, l.lr, l.loss, l.focal, l.regression, l.height);
            }
            println!("checkpoint -> {}", dir.display());
        }
        Command::Eval { checkpoint, noise_deg } => {
            let meta = cft_core::harness::checkpoint::read_meta(checkpoint)?;
            match meta.kind {
                ModelKind::Cft => {
                    let (c, det, store) = load_cft(checkpoint)?;
                    let (_, eval) = datasets(&c, c.seed)?;
                    write_eval(out, "cft", &c, 0.0, &evaluate_cft(&det, &store, &c, &eval)?)?;
                }
                ModelKind::Baseline => {
                    let (c, det, store) = load_baseline(checkpoint)?;
                    let (_, eval) = datasets(&c, c.seed)?;
                    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(c.seed);
                    let rig = perturb_extrinsics(&c.scene.rig()?, *noise_deg, c.noise.translation_m, &mut rng)?;
                    write_eval(out, "baseline", &c, *noise_deg, &evaluate_baseline(&det, &store, &c, &eval, &rig)?)?;
                }
            }
        }
        Command::Cost => {
            let table = cost_table(&cfg.model, cfg.seed)?;
            write_records(out, "cost", &table)?;
            for r in &table {
                println!(
                    "{:<8} analytic {:>12}  measured {:>12}  unpadded {:>12}  ratio {:.4}",
                    r.kind.name(),
                    r.analytic_muladds,
                    r.measured_muladds,
                    r.measured_unpadded,
                    r.ratio_vs_global
                );
            }
        }
        Command::ExpEmbedding => {
            let rows = exp_embedding(&cfg)?;
            write_records(out, "exp_embedding", &rows)?;
            write_records(out, "exp_embedding_summary", &summarize(&rows))?;
            print_summary(&rows);
        }
        Command::ExpWindows => {
            let (rows, costs) = exp_windows(&cfg)?;
            write_records(out, "exp_windows", &rows)?;
            write_records(out, "exp_windows_summary", &summarize(&rows))?;
            write_records(out, "exp_windows_cost", &costs)?;
            print_summary(&rows);
        }
        Command::ExpNoise => {
            let study = exp_noise(&cfg)?;
            write_records(out, "exp_noise", &study.rows)?;
            write_records(out, "exp_noise_summary", &summarize(&study.rows))?;
            print_summary(&study.rows);
            println!("cft outputs bit-identical across noise levels: {}", study.cft_bit_identical);
        }
        Command::DumpAttn { checkpoint, scene, cell } => {
            let (c, det, store) = load_cft(checkpoint)?;
            write_config(out, &c)?;
            let data = eval_scene(&c, *scene)?;
            let rows = attention_mass(&det, &store, &data.scenes[0].images, cell[0], cell[1])?;
            write_records(out, "attention", &rows)?;
            for r in &rows {
                println!("layer {} head {} {:<3} {:.4}", r.layer, r.head, r.view, r.mass);
            }
        }
        Command::DumpEmbeddings { checkpoint, scene } => {
            let (c, det, store) = load_cft(checkpoint)?;
            write_config(out, &c)?;
            let data = eval_scene(&c, *scene)?;
            let cells = embedding_cells(&det, &store, &data.scenes[0].images)?;
            let (csv, _) = write_records(out, "embeddings", &cells)?;
            println!("{} cells -> {}", cells.len(), csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
