use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rotcnn::cnn::{Architecture, Family};
use rotcnn::compiler::{compile_hmax, lemma4_schedule, verify_compilation, Head};
use rotcnn::harness::{
    self, experiment_architecture, grid, run_experiment, DataSource, ExperimentConfig, GridPoint,
};
use rotcnn::hmax::HmaxSpec;
use rotcnn::synth::{generate_dataset, load_mnist_rot, Dataset};
use rotcnn::train::{fit, write_log, TrainConfig};
use rotcnn::Exec;

#[derive(Parser)]
#[command(name = "rotcnn", version, about = "Rotation-aware CNN classifiers and hierarchical max-pooling models")]
struct Cli {
    /// Run on a single thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    /// F1 with the exact max network.
    MaxNetwork,
    /// F2.
    Max,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

impl TrainArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig { epochs: self.epochs, batch_size: self.batch_size, learning_rate: self.lr, seed, ..TrainConfig::default() }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compile a hierarchical model spec into CNN weights.
    Compile {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "max-network")]
        head: HeadArg,
    },
    /// Compare compiled weights with the model on random images.
    Verify {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a rotated-squares dataset.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        lambda: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert MNIST-rot text data into a two-class dataset.
    ImportMnistRot {
        #[arg(long = "in")]
        input: PathBuf,
        /// Digits mapped to labels 0 and 1.
        #[arg(long, value_delimiter = ',', default_value = "4,9")]
        classes: Vec<u8>,
        #[arg(long)]
        out: PathBuf,
        /// Read each row of pixels as a column.
        #[arg(long)]
        transpose: bool,
    },
    /// Train one network of fixed size.
    Train {
        #[arg(long)]
        family: Family,
        /// Dataset file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2)]
        l: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        ln: usize,
        #[arg(long, default_value_t = 4)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        train: TrainArgs,
        /// Weight file.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Dataset on which to report the misclassification risk.
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Repeated model selection and testing.
    Experiment {
        #[arg(long)]
        family: Family,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        lambda: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `synthetic` or the path of a dataset file to draw from.
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long, default_value_t = 10_000)]
        test_size: usize,
        #[arg(long, value_delimiter = ',', default_value = "2,3")]
        grid_l: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "2,4")]
        grid_k: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        grid_ln: Vec<usize>,
        /// Branch counts; defaults depend on the family.
        #[arg(long, value_delimiter = ',')]
        grid_t: Option<Vec<usize>>,
        #[command(flatten)]
        train: TrainArgs,
        /// Write 0 in the wall_ms column so reruns give identical files.
        #[arg(long)]
        no_timing: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long)]
        audit: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Compile { spec, out, head } => {
            let spec = HmaxSpec::load(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let schedule = lemma4_schedule(&spec)?;
            let head = match head {
                HeadArg::MaxNetwork => Head::MaxNetwork,
                HeadArg::Max => Head::Max,
            };
            let arch = compile_hmax(&spec, &schedule, head)?;
            arch.save(&out)?;
            println!(
                "compiled: {} branches, {} layers, {} channels, {} parameters",
                arch.branches.len(),
                schedule.layers,
                schedule.channels[0],
                arch.param_count()
            );
        }
        Command::Verify { spec, weights, samples, seed, tol, out } => {
            let spec = HmaxSpec::load(&spec)?;
            let arch = Architecture::load(&weights)?;
            let report = verify_compilation(&spec, &arch, samples, seed, exec)?;
            if let Some(out) = out {
                std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            }
            println!("max deviation {:e} over {} samples", report.max_deviation, report.samples);
            println!("layers {}/{}, channels {}/{}", report.layers_used, report.layers_budget, report.max_channels_used, report.channel_budget);
            if !report.passes(tol) {
                bail!("verification failed at tolerance {tol:e}");
            }
        }
        Command::GenData { n, lambda, seed, out } => {
            let data = generate_dataset(n, lambda, seed, exec)?;
            data.write(&out)?;
            let ones = data.labels.iter().filter(|&&y| y == 1).count();
            println!("wrote {n} images of {lambda}x{lambda}, {ones} with label 1");
        }
        Command::ImportMnistRot { input, classes, out, transpose } => {
            let [a, b] = classes[..] else {
                bail!("--classes takes exactly two digits");
            };
            let (data, dropped) = load_mnist_rot(&input, (a, b), transpose)?;
            data.write(&out)?;
            println!("kept {} images, dropped {dropped}", data.len());
        }
        Command::Train { family, data, l, k, ln, t, seed, train, out, log, test } => {
            let data = Dataset::read(&data)?;
            let tpl = experiment_architecture(family, data.lambda, GridPoint { l, k, ln, t })?;
            let res = fit(&tpl, &data.images, &data.labels, &train.config(seed), exec)?;
            res.arch.save(&out)?;
            if let Some(log) = log {
                write_log(&log, &res.log)?;
            }
            let risk = harness::empirical_risk(&res.arch, &data.images, &data.labels, exec)?;
            println!("final loss {:.6}, training risk {risk:.4}", res.losses().last().copied().unwrap_or(f64::NAN));
            if let Some(test) = test {
                let test = Dataset::read(&test)?;
                println!("test risk {:.4}", harness::empirical_risk(&res.arch, &test.images, &test.labels, exec)?);
            }
        }
        Command::Experiment {
            family,
            n,
            lambda,
            reps,
            seed,
            data,
            test_size,
            grid_l,
            grid_k,
            grid_ln,
            grid_t,
            train,
            no_timing,
            out,
            summary,
            audit,
        } => {
            let source = if data == "synthetic" {
                DataSource::Synthetic
            } else {
                DataSource::Pool(Dataset::read(std::path::Path::new(&data))?)
            };
            let ts = grid_t.unwrap_or_else(|| harness::default_t_grid(family));
            let cfg = ExperimentConfig {
                test_size,
                repetitions: reps,
                grid: grid(&grid_l, &grid_k, &grid_ln, &ts),
                train: train.config(0),
                data: source,
                record_timing: !no_timing,
                ..ExperimentConfig::new(family, n, lambda, seed)
            };
            let res = run_experiment(&cfg, exec)?;
            harness::write_results(&out, &res.runs)?;
            if let Some(p) = summary {
                harness::write_summary(&p, std::slice::from_ref(&res.summary))?;
            }
            if let Some(p) = audit {
                harness::write_audit(&p, &res.audit)?;
            }
            println!("{}: median {:.4}, IQR {:.4}", family, res.summary.median, res.summary.iqr);
        }
    }
    Ok(())
}
