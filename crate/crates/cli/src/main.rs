use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use magnifier::checkpoint;
use magnifier::data::{generate_dataset, DataConfig, Dataset};
use magnifier::evalkit::{embed_samples, query_embeddings, retrieve, EvalSplit};
use magnifier::numcore::io as mgt;
use magnifier::saliency::write_saliency;
use magnifier::train::Trainer;
use magnifier::{Error, Result, TrainConfig};
use serde_json::json;

#[derive(Parser)]
#[command(name = "magnifier", version, about = "Part-aligned person re-identification on synthetic pedestrians")]
struct Cli {
    /// Seed used when a subcommand does not set its own.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training config JSON used when a subcommand does not set its own.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenData),
    /// Two-stage training.
    Train(Train),
    /// Retrieval metrics of a checkpoint.
    Eval(Eval),
    /// Export backbone saliency maps as PGM images.
    Visualize(Visualize),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 32)]
    num_ids: usize,
    #[arg(long, default_value_t = 16)]
    imgs_per_id: usize,
    #[arg(long, default_value_t = 1.0)]
    occlusion_rate: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: EvalSplit,
    /// Report JSON path; printed to stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory for query.mgt and gallery.mgt embedding matrices.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct Visualize {
    /// Checkpoint directories; each gives one image per sample, labelled by its directory name.
    #[arg(long, required = true, num_args = 1..)]
    ckpt: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Sample indices; defaults to the first four queries.
    #[arg(long, value_delimiter = ',')]
    samples: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a, cli.seed.unwrap_or(0)),
        Command::Train(a) => train(a, cli.config.as_deref(), cli.seed),
        Command::Eval(a) => eval(a),
        Command::Visualize(a) => visualize(a),
    }
}

fn gen_data(a: GenData, seed: u64) -> Result<()> {
    let cfg = DataConfig {
        seed,
        num_ids: a.num_ids,
        imgs_per_id: a.imgs_per_id,
        occlusion_rate: a.occlusion_rate,
        ..Default::default()
    };
    let m = generate_dataset(&cfg, &a.out)?;
    info!(
        "wrote {} samples ({} train, {} query, {} gallery, {} occluded) to {}",
        m.samples.len(),
        m.train.len(),
        m.query.len(),
        m.gallery.len(),
        m.occluded_queries.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: Train, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ds = Dataset::load(&a.data)?;
    let mut t = match &a.resume {
        Some(ck) => Trainer::resume(ck, &cfg, &ds, Some(&a.out))?,
        None => Trainer::new(&cfg, &ds, Some(&a.out))?,
    };
    info!("config {} from epoch {} step {}", cfg.hash(), t.state().epoch, t.state().step);
    t.run_with(a.max_steps, |_, e| {
        let metrics = match (e.rank1, e.map) {
            (Some(r), Some(m)) => format!(" r1 {r:.3} map {m:.3}"),
            _ => String::new(),
        };
        info!("epoch {} stage {} loss {:.4}{metrics}", e.epoch, e.stage, e.l_total);
    })?;
    info!("checkpoints in {}", a.out.join("checkpoints").display());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let (mut model, state) = checkpoint::load(&a.ckpt)?;
    let ds = Dataset::load(&a.data)?;
    let dc = &ds.manifest.config;
    if model.image_size != (dc.height, dc.width) {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {:?} images, dataset has {}x{}",
            model.image_size, dc.height, dc.width
        )));
    }
    let q = query_embeddings(&mut model, &ds, a.split)?;
    let g = embed_samples(&mut model, &ds, &ds.manifest.gallery)?;
    let r = retrieve(&q, &g)?;
    if let Some(dir) = &a.embeddings {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, m) in [("query.mgt", &q), ("gallery.mgt", &g)] {
            let p = dir.join(name);
            mgt::save(&m.to_tensor(), &p)?;
        }
    }
    let report = json!({
        "split": match a.split { EvalSplit::Test => "test", EvalSplit::Occluded => "occluded" },
        "rank1": r.rank1(),
        "map": r.map,
        "cmc": r.cmc,
        "queries": q.rows(),
        "gallery": g.rows(),
        "skipped_queries": r.skipped_queries,
        "embedding_dim": model.embedding_dim(),
        "epoch": state.epoch,
        "step": state.step,
        "config_hash": model.config.hash(),
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match &a.report {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e))?,
        None => print!("{text}"),
    }
    info!("{:?} split: rank-1 {:.4} mAP {:.4}", a.split, r.rank1(), r.map);
    Ok(())
}

fn visualize(a: Visualize) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let samples = if a.samples.is_empty() {
        ds.manifest.query.iter().take(4).copied().collect()
    } else {
        a.samples
    };
    if let Some(&bad) = samples.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::Data(format!("sample {bad} out of range (dataset has {})", ds.len())));
    }
    let images: Vec<_> = samples.iter().map(|&i| (i, &ds.images[i])).collect();
    for ck in &a.ckpt {
        let (mut model, _) = checkpoint::load(ck)?;
        let label = ck
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "ckpt".into());
        let paths = write_saliency(&mut model, &label, &images, &a.out)?;
        info!("{label}: {} images in {}", paths.len(), a.out.display());
    }
    Ok(())
}
