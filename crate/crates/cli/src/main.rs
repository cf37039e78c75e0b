//! `tsgcnet`: synthesize datasets, train, evaluate, predict, run ablations
//! and the self-verification suite.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tsgcnet::checkpoint::Checkpoint;
use tsgcnet::config::RunConfig;
use tsgcnet::eval::format_report;
use tsgcnet::experiment::{ablate, evaluate, format_ablation_text, format_ablation_tsv, parse_variants};
use tsgcnet::mesh::{export_colored_mesh, load_mesh, mesh_features, read_labels, write_labels, Palette};
use tsgcnet::model::Variant;
use tsgcnet::synth::{make_dataset, ArchSpec, Manifest, Split, MANIFEST_FILE};
use tsgcnet::train::{train_to_dir, Trainer, TrainingSet};
use tsgcnet::verify::{find_check, run_all, shipped_baseline, Context, Mutation, Suite, CHECKS};
use tsgcnet::{Error, Result};

/// Name of the fully resolved configuration written next to a run.
const EFFECTIVE_CONFIG: &str = "config.toml";
const ABLATION_TSV: &str = "ablation.tsv";
const ABLATION_TEXT: &str = "ablation.txt";

#[derive(Parser)]
#[command(
    name = "tsgcnet",
    version,
    about = "Two-stream graph network for dental mesh segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset with a manifest.
    Synth(SynthArgs),
    /// Train a model on the training split of a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Label every cell of a mesh and write a colored PLY.
    Predict(PredictArgs),
    /// Train several architecture variants on identical data and seeds.
    Ablate(AblateArgs),
    /// Run the verification checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct OutDir {
    /// Output directory.
    #[arg(long, env = "TSGCNET_OUT", default_value = "tsgcnet-out")]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration with `[model]` and `[train]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn file(&self) -> Result<Option<RunConfig>> {
        self.config.as_deref().map(RunConfig::load).transpose()
    }

    fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        for o in &self.overrides {
            cfg.set(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&self) -> Result<RunConfig> {
        self.apply(self.file()?.unwrap_or_default())
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    out: OutDir,
    #[arg(long, default_value_t = 20)]
    train: usize,
    #[arg(long, default_value_t = 5)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Teeth per arch; the class count is this plus one.
    #[arg(long, default_value_t = ArchSpec::default().num_teeth)]
    teeth: usize,
    /// Approximate cells per mesh.
    #[arg(long, default_value_t = ArchSpec::default().cells_target)]
    cells: usize,
    /// Tooth crowding in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    crowding: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    out: OutDir,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `train` or `test`.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// OBJ or PLY mesh.
    #[arg(long)]
    mesh: PathBuf,
    /// Colored PLY to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-cell class file; defaults to the output path with `.labels`.
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Reference labels to report agreement against.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    out: OutDir,
    /// Comma-separated variant names; all variants when omitted.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Skip the training checks, which take several minutes.
    #[arg(long)]
    quick: bool,
    /// Run only these checks (id or name). Repeatable.
    #[arg(long = "check")]
    checks: Vec<String>,
    /// Run with a deliberate defect to show the checks catch it.
    #[arg(long, value_name = "softmax")]
    mutate: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Verify(a) => verify(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(Error::Usage(format!("unknown split {name:?}; valid: train, test"))),
    }
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let spec = ArchSpec {
        num_teeth: a.teeth,
        cells_target: a.cells,
        crowding: a.crowding,
        ..ArchSpec::default()
    };
    let manifest = make_dataset(&spec, a.train, a.test, a.seed, &a.out.out)?;
    println!(
        "wrote {} meshes and {}",
        manifest.entries.len(),
        a.out.out.join(MANIFEST_FILE).display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    // Everything is read and validated before the output directory exists.
    let file = a.config.file()?;
    let (cfg, mut trainer) = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if let Some(f) = &file {
                if f.model != ckpt.config {
                    return Err(Error::Config(format!(
                        "the [model] settings of the config differ from those stored in {}",
                        path.display()
                    )));
                }
            }
            let base = RunConfig {
                model: ckpt.config.clone(),
                train: file.map(|f| f.train).unwrap_or_default(),
            };
            let cfg = a.config.apply(base)?;
            if cfg.model != ckpt.config {
                return Err(Error::Config("model settings cannot change when resuming".into()));
            }
            let trainer = Trainer::resume(ckpt, cfg.train.clone())?;
            (cfg, trainer)
        }
        None => {
            let cfg = a.config.apply(file.unwrap_or_default())?;
            let trainer = Trainer::new(tsgcnet::model::TsgcNet::new(cfg.model.clone())?, cfg.train.clone())?;
            (cfg, trainer)
        }
    };
    let meshes = Manifest::load(&a.data)?.load_split(Split::Train)?;
    let data = TrainingSet::new(&meshes, cfg.model.num_classes)?;

    let dir = &a.out.out;
    create_dir(dir)?;
    write_file(&dir.join(EFFECTIVE_CONFIG), &cfg.to_toml())?;
    let start = trainer.epochs_done();
    let log = train_to_dir(&mut trainer, &data, dir)?;
    for r in &log {
        eprintln!(
            "epoch {:>4}  lr {:.2e}  loss {:.4}  train OA {:.4}",
            r.epoch, r.lr, r.mean_loss, r.train_oa
        );
    }
    println!(
        "trained epochs {start}..{} on {} meshes; outputs in {}",
        trainer.epochs_done(),
        data.len(),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let split = parse_split(&a.split)?;
    let (mut model, _) = Checkpoint::load(&a.checkpoint)?.into_model()?;
    let meshes = Manifest::load(&a.data)?.load_split(split)?;
    let metrics = evaluate(&mut model, &meshes)?.metrics()?;
    print!("{}", format_report(&metrics));
    Ok(ExitCode::SUCCESS)
}

fn predict(a: PredictArgs) -> Result<ExitCode> {
    let (mut model, _) = Checkpoint::load(&a.checkpoint)?.into_model()?;
    let mesh = load_mesh(&a.mesh)?;
    let reference = a.labels.as_deref().map(read_labels).transpose()?;
    let classes = model.predict(&mesh_features(&mesh, true))?;

    let class_path = a.classes.clone().unwrap_or_else(|| a.out.with_extension("labels"));
    let palette = Palette::for_classes(model.config().num_classes);
    export_colored_mesh(&mesh, &classes, &palette, &a.out)?;
    write_labels(&classes, &class_path)?;
    println!("wrote {} and {}", a.out.display(), class_path.display());
    if let Some(truth) = reference {
        if truth.len() != classes.len() {
            return Err(Error::Data(format!(
                "{} reference labels for {} cells",
                truth.len(),
                classes.len()
            )));
        }
        let agree = truth.iter().zip(&classes).filter(|(a, b)| a == b).count();
        println!(
            "agreement with reference labels: {:.4}",
            agree as f64 / classes.len() as f64
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn ablate_cmd(a: AblateArgs) -> Result<ExitCode> {
    let names: Vec<String> = if a.variants.is_empty() {
        Variant::ALL.iter().map(|v| v.name().to_string()).collect()
    } else {
        a.variants.clone()
    };
    let variants = parse_variants(&names)?;
    let base = a.config.resolve()?;
    let manifest = Manifest::load(&a.data)?;
    let train = manifest.load_split(Split::Train)?;
    let test = manifest.load_split(Split::Test)?;

    let rows = ablate(&base, &variants, &train, &test, |name, r| {
        eprintln!(
            "{name}: epoch {:>4}  loss {:.4}  train OA {:.4}",
            r.epoch, r.mean_loss, r.train_oa
        );
    })?;
    let dir = &a.out.out;
    create_dir(dir)?;
    write_file(&dir.join(EFFECTIVE_CONFIG), &base.to_toml())?;
    write_file(&dir.join(ABLATION_TSV), &format_ablation_tsv(&rows))?;
    let text = format_ablation_text(&rows);
    write_file(&dir.join(ABLATION_TEXT), &text)?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn verify(a: VerifyArgs) -> Result<ExitCode> {
    let mutation = a.mutate.as_deref().map(str::parse::<Mutation>).transpose()?;
    let selected = a
        .checks
        .iter()
        .map(|key| find_check(key).ok_or_else(|| Error::Usage(format!("unknown check {key:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut ctx = Context::new(Suite::shipped(), shipped_baseline());
    let print = |r: &tsgcnet::verify::CheckReport| println!("{}", r.line());
    let reports = if selected.is_empty() {
        let reports = run_all(&mut ctx, !a.quick, mutation, print);
        for c in CHECKS.iter().filter(|c| a.quick && c.slow) {
            println!("SKIP {:>2} {:<26} training check, skipped by --quick", c.id, c.name);
        }
        reports
    } else {
        selected
            .iter()
            .map(|c| {
                let r = c.run(&mut ctx, mutation);
                print(&r);
                r
            })
            .collect()
    };
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{}/{} checks passed", reports.len() - failed, reports.len());
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
