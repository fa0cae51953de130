//! `symdistill` command line.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use symdistill::config::RunConfig;
use symdistill::featstore::{read_features, write_features, FeatureSet};
use symdistill::interpret::{attention_maps, export_csv, export_pgm, symbol_scan, Heads};
use symdistill::netcore::ModelParams;
use symdistill::probe::{knn_probe, linear_probe_sets, subsequence_report, LinearProbeConfig, Representation};
use symdistill::selfcheck::run_all;
use symdistill::seqgen::{generate_batch, Sampling};
use symdistill::synth::{gaussian_clusters, point_clusters, ClusterSpec, PointClusterSpec};
use symdistill::trainer::{load_model, resume, train, TrainOptions};
use symdistill::{Error, Result};

#[derive(Parser)]
#[command(name = "symdistill", version, about = "Distil frozen visual features into discrete symbol sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a student from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint with kNN, linear or per-prefix probes.
    #[command(subcommand)]
    Probe(ProbeCommand),
    /// Write the symbol sequences of a feature set as TSV.
    Generate(GenerateArgs),
    /// Export per-symbol cross-attention maps of one sample.
    Attend(AttendArgs),
    /// Export attention maps for every occurrence of a symbol in one class.
    SymbolScan(ScanArgs),
    /// Run the gradient, distribution and oracle invariant suite.
    Selfcheck {
        /// Fewer sampling draws.
        #[arg(long)]
        quick: bool,
    },
    /// Inspect or create feature files.
    #[command(subcommand)]
    Features(FeaturesCommand),
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint (its stored config is used unless --config is given).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed epochs.
    #[arg(long)]
    stop_after_epochs: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ProbeData {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    eval: PathBuf,
    /// Also write the results as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ProbeCommand {
    Knn {
        #[command(flatten)]
        data: ProbeData,
        #[arg(long, default_value = "student_pooled")]
        repr: Representation,
        #[arg(long)]
        prefix: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "10,20")]
        k: Vec<usize>,
        #[arg(long, default_value_t = symdistill::probe::KNN_TEMP)]
        temp: f64,
    },
    Linear {
        #[command(flatten)]
        data: ProbeData,
        #[arg(long, default_value = "student_pooled")]
        repr: Representation,
        #[arg(long)]
        prefix: Option<usize>,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long, default_value_t = 0.0)]
        weight_decay: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// kNN accuracy of every power-of-two prefix.
    Subseq {
        #[command(flatten)]
        data: ProbeData,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = symdistill::probe::KNN_TEMP)]
        temp: f64,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 0)]
    view: usize,
    /// Sample with Gumbel noise from this seed instead of deterministic decoding.
    #[arg(long)]
    sample_seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttendArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    sample: usize,
    #[arg(long, default_value_t = 0)]
    view: usize,
    /// Export one head instead of the mean over heads.
    #[arg(long)]
    head: Option<usize>,
    #[arg(long, default_value_t = 16)]
    scale: usize,
    /// Also write raw weights as CSV.
    #[arg(long)]
    csv: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScanArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    symbol: usize,
    #[arg(long)]
    class: u32,
    #[arg(long, default_value_t = 0)]
    view: usize,
    #[arg(long, default_value_t = 16)]
    scale: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum FeaturesCommand {
    /// Print the header fields of a feature file.
    Info { path: PathBuf },
    /// Write a synthetic labelled feature set.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// `points`: isotropic clusters; `parts`: class-specific part layouts.
    #[arg(long, default_value = "points")]
    kind: String,
    #[arg(long, default_value_t = 600)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    d_t: usize,
    #[arg(long, default_value_t = 2)]
    views: usize,
    #[arg(long, default_value_t = 2)]
    grid_h: usize,
    #[arg(long, default_value_t = 2)]
    grid_w: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Class layout seed shared between train and eval sets.
    #[arg(long, default_value_t = 0)]
    layout_seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::ConfigLine { .. } => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load(data: &ProbeData) -> Result<(RunConfig, ModelParams<f32>, FeatureSet, FeatureSet)> {
    let (cfg, params) = load_model(&data.ckpt)?;
    Ok((cfg, params, read_features(&data.train)?, read_features(&data.eval)?))
}

fn finish_probe(report: symdistill::probe::ProbeReport, out: Option<&Path>) -> Result<()> {
    print!("{}", report.to_table());
    if let Some(p) = out {
        fs::write(p, report.to_csv())?;
    }
    Ok(())
}

fn run(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Train(a) => {
            let opts = TrainOptions {
                stop_after_epochs: a.stop_after_epochs,
                progress: !a.quiet,
            };
            let cfg = a.config.as_ref().map(RunConfig::from_file).transpose()?;
            let outcome = if let Some(ck) = &a.resume {
                let (saved, _) = load_model(ck)?;
                let c = cfg.as_ref().unwrap_or(&saved);
                c.require(&["train_features"])?;
                print!("{}", c.to_text());
                let tr = read_features(c.train_features.as_ref().unwrap())?;
                let ev = c.eval_features.as_ref().map(read_features).transpose()?;
                resume(ck, cfg.as_ref(), &tr, ev.as_ref(), &opts)?
            } else {
                let Some(c) = cfg else {
                    return Err(Failure::Usage("train needs --config or --resume".into()));
                };
                c.require(&["train_features"])?;
                print!("{}", c.to_text());
                let tr = read_features(c.train_features.as_ref().unwrap())?;
                let ev = c.eval_features.as_ref().map(read_features).transpose()?;
                train(&c, &tr, ev.as_ref(), &opts)?
            };
            println!("# checkpoint {}", outcome.checkpoint.display());
        }
        Command::Probe(p) => match p {
            ProbeCommand::Knn { data, repr, prefix, k, temp } => {
                let (cfg, params, tr, ev) = load(&data)?;
                let r = knn_probe(&params, &cfg.discretize, &tr, &ev, repr, prefix, &k, temp)?;
                finish_probe(r, data.out.as_deref())?;
            }
            ProbeCommand::Linear {
                data,
                repr,
                prefix,
                epochs,
                lr,
                weight_decay,
                seed,
            } => {
                let (cfg, params, tr, ev) = load(&data)?;
                let lc = LinearProbeConfig {
                    epochs,
                    lr,
                    weight_decay,
                    seed,
                    ..Default::default()
                };
                let r = linear_probe_sets(&params, &cfg.discretize, &tr, &ev, repr, prefix, &lc)?;
                finish_probe(r, data.out.as_deref())?;
            }
            ProbeCommand::Subseq { data, k, temp } => {
                let (cfg, params, tr, ev) = load(&data)?;
                let r = subsequence_report(&params, &cfg.discretize, &tr, &ev, k, temp)?;
                finish_probe(r, data.out.as_deref())?;
            }
        },
        Command::Generate(a) => {
            let (cfg, params) = load_model(&a.ckpt)?;
            let set = read_features(&a.features)?;
            if a.view >= set.n_views() {
                return Err(Failure::Usage(format!("view {} out of range (set has {})", a.view, set.n_views())));
            }
            let mut rng = a.sample_seed.map(ChaCha8Rng::seed_from_u64);
            let mut text = String::from("sample\tview\tlabel\tsymbols\n");
            let idx: Vec<usize> = (0..set.n_samples()).collect();
            for chunk in idx.chunks(128) {
                let (_, patches) = set.gather_view(chunk, a.view)?;
                let sampling = match rng.as_mut() {
                    Some(r) => Sampling::Train(r),
                    None => Sampling::Eval,
                };
                let (seqs, _) = generate_batch(&params, &cfg.discretize, cfg.discretize.tau_end, &patches, chunk.len(), sampling, false)?;
                for (&i, s) in chunk.iter().zip(&seqs) {
                    let label = set.label(i).map(|l| l.to_string()).unwrap_or_default();
                    let ids: Vec<String> = s.ids.iter().map(|x| x.to_string()).collect();
                    let _ = writeln!(text, "{i}\t{}\t{label}\t{}", a.view, ids.join(" "));
                }
            }
            write_or_print(a.out.as_deref(), &text)?;
        }
        Command::Attend(a) => {
            let (cfg, params) = load_model(&a.ckpt)?;
            let set = read_features(&a.features)?;
            let heads = a.head.map_or(Heads::Mean, Heads::Single);
            let maps = attention_maps(&params, &cfg.discretize, &set, a.sample, a.view, heads)?;
            fs::create_dir_all(&a.out).map_err(Error::from)?;
            for m in &maps {
                let stem = format!("s{:06}_v{}_p{:02}_sym{}", a.sample, a.view, m.position, m.token_id);
                export_pgm(m, a.scale, a.out.join(format!("{stem}.pgm")))?;
                if a.csv {
                    export_csv(m, a.out.join(format!("{stem}.csv")))?;
                }
                println!("{}\t{}\t{stem}.pgm", m.position, m.token_id);
            }
        }
        Command::SymbolScan(a) => {
            let (cfg, params) = load_model(&a.ckpt)?;
            let set = read_features(&a.features)?;
            let r = symbol_scan(&params, &cfg.discretize, &set, a.symbol, a.class, a.view, a.scale, &a.out)?;
            println!(
                "symbol {} in class {}: {} occurrences in {} of {} samples (frequency {:.4})",
                r.symbol,
                r.class_id,
                r.occurrences(),
                r.samples_with_symbol(),
                r.n_class_samples,
                r.frequency()
            );
            println!("manifest {}", r.manifest.display());
        }
        Command::Selfcheck { quick } => {
            let checks = run_all(quick);
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("{c}");
            }
            println!("{} checks, {failed} failed", checks.len());
            if failed > 0 {
                return Err(Failure::Runtime(Error::Config(format!("{failed} selfcheck(s) failed"))));
            }
        }
        Command::Features(FeaturesCommand::Info { path }) => {
            let s = read_features(&path)?;
            println!("samples\t{}", s.n_samples());
            println!("views\t{}", s.n_views());
            println!("grid\t{}x{}", s.grid().0, s.grid().1);
            println!("d_t\t{}", s.d_t());
            match s.labels() {
                Some(l) => println!("labels\t{} classes", l.n_classes),
                None => println!("labels\tnone"),
            }
        }
        Command::Features(FeaturesCommand::Synth(a)) => {
            let set = match a.kind.as_str() {
                "points" => point_clusters(&PointClusterSpec {
                    n_samples: a.samples,
                    n_classes: a.classes,
                    d_t: a.d_t,
                    n_views: a.views,
                    grid: (a.grid_h, a.grid_w),
                    noise: a.noise,
                    seed: a.seed,
                    layout_seed: Some(a.layout_seed),
                    ..Default::default()
                })?,
                "parts" => gaussian_clusters(&ClusterSpec {
                    n_samples: a.samples,
                    n_classes: a.classes,
                    d_t: a.d_t,
                    n_views: a.views,
                    grid: (a.grid_h, a.grid_w),
                    noise: a.noise,
                    seed: a.seed,
                    layout_seed: Some(a.layout_seed),
                    ..Default::default()
                })?,
                other => return Err(Failure::Usage(format!("unknown synthetic kind {other:?} (points or parts)"))),
            };
            write_features(&set, &a.out)?;
            println!("wrote {} samples to {}", set.n_samples(), a.out.display());
        }
    }
    Ok(())
}
