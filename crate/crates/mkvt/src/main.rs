use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mkvt::cli::{cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_solve_mkl, cmd_train, CliConfig};
use mkvt::error::Result;

#[derive(Parser)]
#[command(
    name = "mkvt",
    about = "Image-text matching: multiple-kernel SVM, patch-attention encoders, retrieval metrics",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config-file flag plus per-key overrides shared by the subcommands.
/// Precedence: flags > config file > built-in defaults.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d_embed: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    caption_len: Option<usize>,
    #[arg(long)]
    vocab_cap: Option<usize>,
    #[arg(long)]
    conv_channels: Option<usize>,
    #[arg(long)]
    ffn_hidden: Option<usize>,
    #[arg(long)]
    negative_ratio: Option<usize>,
    /// Regularization parameter of the kernel classifier
    #[arg(long = "C")]
    c: Option<f64>,
    #[arg(long)]
    mkl_tol: Option<f64>,
    #[arg(long)]
    mkl_max_outer: Option<usize>,
    /// Kernel bank, e.g. linear,rbf:0.5,poly:2:1,cosine
    #[arg(long)]
    kernels: Option<String>,
    /// Fit the multiple-kernel re-scoring head after training (true/false)
    #[arg(long)]
    mkl_head: Option<String>,
    /// Train/val/test fractions, e.g. 0.70,0.15,0.15
    #[arg(long)]
    split: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<CliConfig> {
        let mut overrides: Vec<(String, String)> = Vec::new();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                overrides.push((key.to_string(), v));
            }
        };
        push("learning_rate", self.learning_rate.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("d_embed", self.d_embed.map(|v| v.to_string()));
        push("d_model", self.d_model.map(|v| v.to_string()));
        push("heads", self.heads.map(|v| v.to_string()));
        push("blocks", self.blocks.map(|v| v.to_string()));
        push("patch_size", self.patch_size.map(|v| v.to_string()));
        push("image_size", self.image_size.map(|v| v.to_string()));
        push("caption_len", self.caption_len.map(|v| v.to_string()));
        push("vocab_cap", self.vocab_cap.map(|v| v.to_string()));
        push("conv_channels", self.conv_channels.map(|v| v.to_string()));
        push("ffn_hidden", self.ffn_hidden.map(|v| v.to_string()));
        push("negative_ratio", self.negative_ratio.map(|v| v.to_string()));
        push("C", self.c.map(|v| v.to_string()));
        push("mkl_tol", self.mkl_tol.map(|v| v.to_string()));
        push("mkl_max_outer", self.mkl_max_outer.map(|v| v.to_string()));
        push("kernels", self.kernels.clone());
        push("mkl_head", self.mkl_head.clone());
        push("split", self.split.clone());
        CliConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset (PPM images plus manifest.csv)
    GenData {
        /// Number of image-caption pairs
        #[arg(long)]
        pairs: usize,
        /// Number of (shape, intensity, quadrant) classes
        #[arg(long)]
        classes: usize,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Generation seed; defaults to the config seed
        #[arg(long)]
        gen_seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the matching model on a manifest
    Train {
        /// Manifest CSV produced by gen-data or external conversion
        #[arg(long)]
        manifest: PathBuf,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on the test split
    Eval {
        /// Checkpoint written by train
        #[arg(long)]
        model: PathBuf,
        /// Manifest CSV; prefer the split-annotated copy written by train
        #[arg(long)]
        manifest: PathBuf,
        /// Recall@K cutoffs
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10])]
        ks: Vec<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Solve a standalone multiple-kernel SVM from a feature CSV
    SolveMkl {
        /// CSV with columns feature_1..feature_d,label (labels -1/1)
        #[arg(long)]
        csv: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Audit every analytic backward pass against finite differences
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Random instances per check
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn run(cli: Cli) -> Result<i32> {
    let (value, code) = match cli.command {
        Command::GenData { pairs, classes, out, gen_seed, config } => {
            let config = config.resolve()?;
            let seed = gen_seed.unwrap_or(config.seed);
            (cmd_gen_data(pairs, classes, &out, seed, &config)?, 0)
        }
        Command::Train { manifest, out, config } => {
            let config = config.resolve()?;
            (cmd_train(&config, &manifest, &out)?, 0)
        }
        Command::Eval { model, manifest, ks, config } => {
            let config = config.resolve()?;
            (cmd_eval(&model, &manifest, &ks, &config)?, 0)
        }
        Command::SolveMkl { csv, config } => {
            let config = config.resolve()?;
            (cmd_solve_mkl(&csv, &config)?, 0)
        }
        Command::Gradcheck { seed, instances } => cmd_gradcheck(seed, instances)?,
    };
    println!("{}", serde_json::to_string(&value).expect("JSON output serializes"));
    Ok(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
