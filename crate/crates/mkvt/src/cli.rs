//! Command implementations behind the binary: dataset generation, training,
//! evaluation, standalone kernel-weight solving, and the gradient audit.
//! Every command emits exactly one JSON document on stdout; human-readable
//! tables go to files or stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::audit::run_audit;
use crate::data::{
    generate_synthetic, load_dataset_with_vocab, read_manifest, write_manifest, LoadOptions,
    PairDataset, Split, SynthConfig,
};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::metrics::{evaluate_retrieval, EmbeddingScorer, MklRescorer};
use crate::mkl::{train_mkl, MklProblem};
use crate::model::{
    load_checkpoint, save_checkpoint, similarity, train, Checkpoint, MatchModel, MklHead,
    ModelConfig, TrainConfig,
};
use crate::numerics::Rng;

/// Flat configuration file: `key = value` lines, `#` comments, unknown keys
/// rejected. Flags override file values; file values override defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub d_embed: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub caption_len: usize,
    pub vocab_cap: usize,
    pub conv_channels: usize,
    pub ffn_hidden: usize,
    pub negative_ratio: usize,
    pub c: f64,
    pub mkl_tol: f64,
    pub mkl_max_outer: usize,
    pub kernels: Vec<KernelSpec>,
    pub mkl_head: bool,
    pub split: (f64, f64, f64),
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            learning_rate: 0.001,
            batch_size: 64,
            epochs: 100,
            seed: 42,
            d_embed: 64,
            d_model: 64,
            heads: 4,
            blocks: 2,
            patch_size: 4,
            image_size: 32,
            caption_len: 16,
            vocab_cap: 1024,
            conv_channels: 8,
            ffn_hidden: 128,
            negative_ratio: 1,
            c: 1.0,
            mkl_tol: 1e-4,
            mkl_max_outer: 50,
            kernels: KernelSpec::default_bank(),
            mkl_head: false,
            split: (0.70, 0.15, 0.15),
        }
    }
}

/// Parses a kernel bank description like `linear,rbf:0.5,poly:2:1,cosine`.
pub fn parse_kernel_bank(text: &str) -> Result<Vec<KernelSpec>> {
    let mut bank = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let mut fields = part.split(':');
        let kind = fields.next().unwrap_or_default();
        let args: Vec<&str> = fields.collect();
        let parse_f64 = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Config(format!("bad kernel parameter {s:?} in {part:?}")))
        };
        let spec = match (kind, args.as_slice()) {
            ("linear", []) => KernelSpec::Linear,
            ("cosine", []) => KernelSpec::Cosine,
            ("rbf", [gamma]) => KernelSpec::rbf(parse_f64(gamma)?)
                .map_err(|e| Error::Config(e.to_string()))?,
            ("poly", [degree, coef0]) => {
                let d: u32 = degree
                    .parse()
                    .map_err(|_| Error::Config(format!("bad polynomial degree {degree:?}")))?;
                KernelSpec::polynomial(d, parse_f64(coef0)?)
                    .map_err(|e| Error::Config(e.to_string()))?
            }
            _ => return Err(Error::Config(format!("unrecognized kernel spec {part:?}"))),
        };
        bank.push(spec);
    }
    if bank.is_empty() {
        return Err(Error::Config("kernel bank is empty".into()));
    }
    Ok(bank)
}

fn parse_split(text: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad split fraction {p:?}")))
        })
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "split needs exactly 3 fractions, got {}",
            parts.len()
        )));
    }
    Ok((parts[0], parts[1], parts[2]))
}

impl CliConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad =
            |what: &str| Error::Config(format!("bad value {value:?} for key {what}"));
        match key {
            "learning_rate" => self.learning_rate = value.parse().map_err(|_| bad(key))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "d_embed" => self.d_embed = value.parse().map_err(|_| bad(key))?,
            "d_model" => self.d_model = value.parse().map_err(|_| bad(key))?,
            "heads" => self.heads = value.parse().map_err(|_| bad(key))?,
            "blocks" => self.blocks = value.parse().map_err(|_| bad(key))?,
            "patch_size" => self.patch_size = value.parse().map_err(|_| bad(key))?,
            "image_size" => self.image_size = value.parse().map_err(|_| bad(key))?,
            "caption_len" => self.caption_len = value.parse().map_err(|_| bad(key))?,
            "vocab_cap" => self.vocab_cap = value.parse().map_err(|_| bad(key))?,
            "conv_channels" => self.conv_channels = value.parse().map_err(|_| bad(key))?,
            "ffn_hidden" => self.ffn_hidden = value.parse().map_err(|_| bad(key))?,
            "negative_ratio" => self.negative_ratio = value.parse().map_err(|_| bad(key))?,
            "C" => self.c = value.parse().map_err(|_| bad(key))?,
            "mkl_tol" => self.mkl_tol = value.parse().map_err(|_| bad(key))?,
            "mkl_max_outer" => self.mkl_max_outer = value.parse().map_err(|_| bad(key))?,
            "kernels" => self.kernels = parse_kernel_bank(value)?,
            "mkl_head" => {
                self.mkl_head = match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(bad(key)),
                }
            }
            "split" => self.split = parse_split(value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a flat config file.
    pub fn from_file(path: &Path) -> Result<CliConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = CliConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key = value", lineno + 1))
            })?;
            config.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("config line {}: {msg}", lineno + 1)),
                other => other,
            })?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Checks every module precondition before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.negative_ratio == 0 {
            return Err(Error::Config("batch_size and negative_ratio must be positive".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch_size ({}) must divide image_size ({})",
                self.patch_size, self.image_size
            )));
        }
        if self.vocab_cap < 3 {
            return Err(Error::Config("vocab_cap must be at least 3".into()));
        }
        if self.c <= 0.0 || self.mkl_tol <= 0.0 || self.mkl_max_outer == 0 {
            return Err(Error::Config("C, mkl_tol, and mkl_max_outer must be positive".into()));
        }
        let (a, b, c) = self.split;
        if (a + b + c - 1.0).abs() > 1e-9 || a < 0.0 || b < 0.0 || c < 0.0 {
            return Err(Error::Config("split fractions must be nonnegative and sum to 1".into()));
        }
        if self.kernels.is_empty() {
            return Err(Error::Config("kernel bank is empty".into()));
        }
        Ok(())
    }

    /// Loads the file when given, then applies flag overrides in order.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<CliConfig> {
        let mut config = match path {
            Some(p) => CliConfig::from_file(p)?,
            None => CliConfig::default(),
        };
        for (key, value) in overrides {
            config.set(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            image_channels: 3,
            patch_size: self.patch_size,
            conv_channels: self.conv_channels,
            d_model: self.d_model,
            heads: self.heads,
            blocks: self.blocks,
            ffn_hidden: self.ffn_hidden,
            d_embed: self.d_embed,
            vocab_size,
            caption_len: self.caption_len,
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            negative_ratio: self.negative_ratio,
        }
    }
}

/// Generates a synthetic dataset on disk. Returns the JSON summary.
pub fn cmd_gen_data(
    pairs: usize,
    classes: usize,
    out_dir: &Path,
    seed: u64,
    config: &CliConfig,
) -> Result<serde_json::Value> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Config(format!("output directory {} is not writable: {e}", out_dir.display())))?;
    let probe = out_dir.join(".write_probe");
    std::fs::write(&probe, b"ok")
        .map_err(|e| Error::Config(format!("output directory {} is not writable: {e}", out_dir.display())))?;
    std::fs::remove_file(&probe).ok();

    let dataset = generate_synthetic(
        &SynthConfig {
            n_pairs: pairs,
            n_classes: classes,
            image_size: config.image_size,
            seed,
            caption_len: config.caption_len,
            vocab_cap: config.vocab_cap,
        },
        out_dir,
    )?;
    Ok(json!({
        "pairs": dataset.pairs.len(),
        "classes": classes,
        "image_size": config.image_size,
        "seed": seed,
        "out_dir": out_dir.display().to_string(),
        "manifest": out_dir.join("manifest.csv").display().to_string(),
    }))
}

fn load_for_config(manifest: &Path, config: &CliConfig) -> Result<PairDataset> {
    let opts = LoadOptions {
        image_size: config.image_size,
        caption_len: config.caption_len,
        vocab_cap: config.vocab_cap,
    };
    let mut dataset = crate::data::load_dataset(manifest, &opts)?;
    if !dataset.has_split_assignment() {
        dataset.assign_splits(config.seed, config.split)?;
    }
    Ok(dataset)
}

/// Builds the kernel-head training set from train-split embeddings: each
/// positive pair concatenates its image and caption embeddings with label +1,
/// and one mismatched caption per pair gives the -1 class.
fn fit_mkl_head(
    model: &MatchModel,
    dataset: &PairDataset,
    config: &CliConfig,
) -> Result<crate::mkl::MklModel> {
    let train_idx = dataset.split_indices(Split::Train);
    if train_idx.len() < 2 {
        return Err(Error::InvalidInput(
            "the kernel head needs at least 2 training pairs".into(),
        ));
    }
    let mut image_embeds = BTreeMap::new();
    let mut text_embeds = BTreeMap::new();
    for &p in &train_idx {
        let rec = &dataset.pairs[p];
        image_embeds
            .entry(rec.image)
            .or_insert(model.embed_image(&dataset.images[rec.image])?);
        text_embeds
            .entry(rec.text)
            .or_insert(model.embed_text(&dataset.texts[rec.text])?);
    }
    let mut rng = Rng::new(config.seed ^ 0x6d6b6c);
    let mut xs = Vec::with_capacity(2 * train_idx.len());
    let mut ys = Vec::with_capacity(2 * train_idx.len());
    for (i, &p) in train_idx.iter().enumerate() {
        let rec = &dataset.pairs[p];
        let mut joint = image_embeds[&rec.image].clone();
        joint.extend_from_slice(&text_embeds[&rec.text]);
        xs.push(joint);
        ys.push(1.0);

        let mut j = rng.below(train_idx.len() - 1);
        if j >= i {
            j += 1;
        }
        let other = &dataset.pairs[train_idx[j]];
        let mut joint = image_embeds[&rec.image].clone();
        joint.extend_from_slice(&text_embeds[&other.text]);
        xs.push(joint);
        ys.push(-1.0);
    }
    let problem = MklProblem::new(xs, ys, config.kernels.clone(), config.c)?;
    train_mkl(&problem, config.mkl_tol, config.mkl_max_outer)
}

/// Trains a model from a manifest and writes the checkpoint, the loss CSV,
/// and a split-annotated manifest copy. Returns the JSON summary.
pub fn cmd_train(
    config: &CliConfig,
    manifest: &Path,
    out_model: &Path,
) -> Result<serde_json::Value> {
    let dataset = load_for_config(manifest, config)?;
    let model_config = config.model_config(dataset.vocab.size());
    let initial = MatchModel::init(model_config, config.seed)?;
    let (model, history) = train(initial, &dataset, &config.train_config())?;

    let mkl_head = if config.mkl_head {
        Some(MklHead { model: fit_mkl_head(&model, &dataset, config)? })
    } else {
        None
    };

    let checkpoint = Checkpoint {
        model,
        vocab: dataset.vocab.clone(),
        mkl_head,
    };
    save_checkpoint(out_model, &checkpoint)?;

    let loss_path = sibling(out_model, "loss.csv");
    let mut csv_text = String::from("epoch,mean_loss\n");
    for (epoch, loss) in history.iter().enumerate() {
        csv_text.push_str(&format!("{},{}\n", epoch + 1, loss));
    }
    std::fs::write(&loss_path, csv_text)?;

    // Persist the split so evaluation sees exactly the same assignment.
    let split_manifest = sibling(out_model, "manifest.csv");
    let mut rows = read_manifest(manifest)?;
    for (row, split) in rows.iter_mut().zip(&dataset.splits) {
        row.split = Some(*split);
        if !Path::new(&row.image_path).is_absolute() {
            let base = manifest.parent().unwrap_or_else(|| Path::new("."));
            row.image_path = base.join(&row.image_path).display().to_string();
        }
    }
    write_manifest(&split_manifest, &rows)?;

    Ok(json!({
        "checkpoint": out_model.display().to_string(),
        "loss_csv": loss_path.display().to_string(),
        "split_manifest": split_manifest.display().to_string(),
        "epochs": history.len(),
        "final_loss": history.last().copied(),
        "train_pairs": dataset.split_indices(Split::Train).len(),
        "mkl_head": config.mkl_head,
    }))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.push('.');
    name.push_str(suffix);
    path.with_file_name(name)
}

/// Evaluates a checkpoint on the test split of a manifest. Writes the report
/// JSON and table files next to the model and returns the report JSON.
pub fn cmd_eval(
    model_path: &Path,
    manifest: &Path,
    ks: &[usize],
    config: &CliConfig,
) -> Result<serde_json::Value> {
    let checkpoint = load_checkpoint(model_path)?;
    let mc = &checkpoint.model.config;
    let mut dataset = load_dataset_with_vocab(
        manifest,
        mc.image_size,
        mc.caption_len,
        checkpoint.vocab.clone(),
    )?;
    if !dataset.has_split_assignment() {
        dataset.assign_splits(config.seed, config.split)?;
    }
    if dataset.split_indices(Split::Test).is_empty() {
        return Err(Error::InvalidInput("test split is empty".into()));
    }

    let report = match &checkpoint.mkl_head {
        Some(head) => {
            let scorer = MklRescorer { model: &checkpoint.model, head: &head.model };
            evaluate_retrieval(&scorer, &dataset, Split::Test, ks)?
        }
        None => evaluate_retrieval(&checkpoint.model, &dataset, Split::Test, ks)?,
    };

    let value = serde_json::to_value(&report).expect("report serializes");
    std::fs::write(
        sibling(model_path, "eval.json"),
        serde_json::to_string_pretty(&value).expect("report serializes"),
    )?;
    std::fs::write(sibling(model_path, "eval.txt"), report.to_table())?;
    Ok(value)
}

/// Solves a standalone multiple-kernel problem from a feature CSV.
pub fn cmd_solve_mkl(csv_path: &Path, config: &CliConfig) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(csv_path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", csv_path.display())))?;
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let row_no = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::Format(format!(
                "row {row_no}: need at least one feature column and a label"
            )));
        }
        // A header row is allowed; skip the first row when it is not numeric.
        let numeric: Option<Vec<f64>> = fields.iter().map(|f| f.parse().ok()).collect();
        let values = match numeric {
            Some(v) => v,
            None if lineno == 0 => continue,
            None => {
                return Err(Error::Format(format!("row {row_no}: non-numeric value in {line:?}")))
            }
        };
        let (features, label) = values.split_at(values.len() - 1);
        if label[0] != 1.0 && label[0] != -1.0 {
            return Err(Error::Format(format!(
                "row {row_no}: label must be -1 or 1, got {}",
                label[0]
            )));
        }
        xs.push(features.to_vec());
        ys.push(label[0]);
    }
    let problem = MklProblem::new(xs, ys, config.kernels.clone(), config.c)?;
    let model = train_mkl(&problem, config.mkl_tol, config.mkl_max_outer)?;
    Ok(json!({
        "weights": model.weights.beta(),
        "dual_objective": model.solution.dual_objective,
        "kkt_violation": model.solution.kkt_violation,
        "support_count": model.support_xs.len(),
        "outer_iterations": model.outer_iterations,
        "converged": model.converged,
        "degenerate": model.solution.degenerate,
    }))
}

/// Runs the finite-difference audit. Returns the JSON report and the exit
/// code (0 when every check passes, 1 otherwise); the table goes to stderr.
pub fn cmd_gradcheck(seed: u64, instances: usize) -> Result<(serde_json::Value, i32)> {
    let report = run_audit(seed, instances, false)?;
    eprint!("{}", report.to_table());
    let code = if report.all_pass { 0 } else { 1 };
    Ok((serde_json::to_value(&report).expect("report serializes"), code))
}

/// Convenience used by tests and the acceptance suite: cosine similarity of
/// a pair under a loaded checkpoint.
pub fn score_pair(checkpoint: &Checkpoint, dataset: &PairDataset, pair: usize) -> Result<f64> {
    let rec = &dataset.pairs[pair];
    let u = checkpoint.model.embed_image(&dataset.images[rec.image])?;
    let v = checkpoint.model.embed_text(&dataset.texts[rec.text])?;
    similarity(&u, &v)
}
