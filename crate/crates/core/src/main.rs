use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use secl::augment::AugmentRanges;
use secl::checkpoint::Checkpoint;
use secl::config::{Mode, RunConfig};
use secl::data::{make_split, Dataset, DatasetSplit, PhantomConfig, SPLIT_FILE};
use secl::embed::export_embeddings;
use secl::trainer::{ablation_csv, ablation_run, evaluate, train};

#[derive(Parser)]
#[command(name = "secl", version, about = "Contrastive semi-supervised segmentation on synthetic volumes")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom corpus and a split manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        subjects: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        labeled: usize,
        #[arg(long, default_value_t = 16)]
        unlabeled: usize,
    },
    /// Train one run; flags override the config file.
    Train(TrainArgs),
    /// Score a checkpoint's student on one split section.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Section of the split manifest: labeled, unlabeled or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Manifest path; defaults to split.txt inside the data directory.
        #[arg(long)]
        split_file: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and test once per EMA momentum.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.8,0.9,0.99")]
        alphas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Export class-labeled embeddings of augmented cubes.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        count: usize,
        #[arg(long, default_value_t = 12)]
        cube: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn load_split(data: &Path, file: Option<&Path>) -> Result<DatasetSplit> {
    let path = file.map_or_else(|| data.join(SPLIT_FILE), Path::to_path_buf);
    Ok(DatasetSplit::read(&path)?)
}

fn section<'a>(split: &'a DatasetSplit, name: &str) -> Result<&'a [String]> {
    split
        .section(name)
        .ok_or_else(|| anyhow!("unknown split section {name} (expected labeled, unlabeled or test)"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(out: &Path, subjects: usize, seed: u64, labeled: usize, unlabeled: usize) -> Result<()> {
    let test = subjects
        .checked_sub(labeled + unlabeled)
        .ok_or_else(|| anyhow!("{subjects} subjects cannot hold {labeled} labeled + {unlabeled} unlabeled"))?;
    let data = Dataset::generate(subjects, seed, &PhantomConfig::default())?;
    let split = make_split(subjects, labeled, unlabeled, test, seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    data.save(out)?;
    split.write(&out.join(SPLIT_FILE))?;
    println!(
        "wrote {subjects} subjects to {} ({labeled} labeled, {unlabeled} unlabeled, {test} test)",
        out.display()
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.data_dir = a.data.clone();
    cfg.out_dir = a.out.clone();
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(v) = a.alpha {
        cfg.ema.alpha = v;
    }
    if let Some(v) = a.tau {
        cfg.tau = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let data = Dataset::load(&cfg.data_dir)?;
    let split = DatasetSplit::read(&cfg.split_path())?;
    let out = train::<f32>(&cfg, &split, &data)?;
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    out.checkpoint.save(&cfg.out_dir.join("checkpoint.bin"))?;
    write(&cfg.out_dir.join("train_log.csv"), &out.log.to_csv())?;
    write(&cfg.out_dir.join("config.txt"), &cfg.to_text())?;
    let last = out.log.records.last();
    println!(
        "{} epochs, final sup_loss {:.4}, val dice {}",
        cfg.epochs,
        last.map_or(f64::NAN, |r| r.sup_loss),
        out.log.last_val_dice().map_or("NA".into(), |d| format!("{d:.4}"))
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::GenData {
            out,
            subjects,
            seed,
            labeled,
            unlabeled,
        } => gen_data(&out, subjects, seed, labeled, unlabeled),
        Command::Train(a) => run_train(a),
        Command::Eval {
            checkpoint,
            data,
            split,
            split_file,
            out,
        } => {
            let ckpt = Checkpoint::<f32>::load(&checkpoint)?;
            let dataset = Dataset::load(&data)?;
            let manifest = load_split(&data, split_file.as_deref())?;
            let ids = section(&manifest, &split)?;
            for id in ids {
                let ext = dataset.get(id)?.image.extents;
                if ext != ckpt.student.arch.extents {
                    bail!("subject {id} has extents {ext:?}, checkpoint expects {:?}", ckpt.student.arch.extents);
                }
            }
            let table = evaluate(&ckpt.student, ids, &dataset)?;
            write(&out, &table.to_csv())?;
            println!("aggregate dice {:.4} over {} subjects", table.aggregate.dice, ids.len());
            Ok(())
        }
        Command::Ablate {
            config,
            alphas,
            out,
            data,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(d) = data {
                cfg.data_dir = d;
            }
            cfg.validate()?;
            let dataset = Dataset::load(&cfg.data_dir)?;
            let split = DatasetSplit::read(&cfg.split_path())?;
            let rows = ablation_run(&cfg, &alphas, &split, &dataset)?;
            write(&out, &ablation_csv(&rows))?;
            for r in &rows {
                println!("alpha {}: dice {:.4}", r.alpha, r.aggregate.dice);
            }
            Ok(())
        }
        Command::Embed {
            checkpoint,
            data,
            out,
            count,
            cube,
            seed,
            split,
        } => {
            let ckpt = Checkpoint::<f32>::load(&checkpoint)?;
            let dataset = Dataset::load(&data)?;
            let manifest = load_split(&data, None)?;
            let ids = section(&manifest, &split)?;
            let export = export_embeddings(&ckpt.student, &dataset, ids, count, cube, &AugmentRanges::default(), seed)?;
            write(&out, &export.to_csv())?;
            println!("{} embeddings, silhouette {:.4}", export.rows.len(), export.silhouette);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Our error types already embed their sources in the message.
            let mut reason = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !reason.contains(&cause) {
                    if !reason.is_empty() {
                        reason.push_str(": ");
                    }
                    reason.push_str(&cause);
                }
            }
            eprintln!("error: {}", reason.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
