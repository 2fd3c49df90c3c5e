//! Similarity, loss, negative sampling, SGD, and the training loop.

use std::collections::BTreeMap;

use crate::data::{PairDataset, Split};
use crate::error::{Error, Result};
use crate::model::{
    encode_image_cached, encode_text_cached, image_backward, text_backward, MatchModel,
};
use crate::numerics::{Matrix, Rng};

/// Training hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub negative_ratio: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 64,
            epochs: 100,
            seed: 42,
            negative_ratio: 1,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.negative_ratio == 0 {
            return Err(Error::Config("negative ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine similarity in [-1, 1]; zero when either vector has zero norm.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "similarity of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb).sqrt())
}

/// Gradient of `similarity(a, b)` with respect to `a`. Zero-norm inputs get a
/// zero (sub)gradient.
fn similarity_grad_a(a: &[f64], b: &[f64]) -> Vec<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na2: f64 = a.iter().map(|x| x * x).sum();
    let nb2: f64 = b.iter().map(|x| x * x).sum();
    if na2 == 0.0 || nb2 == 0.0 {
        return vec![0.0; a.len()];
    }
    let denom = (na2 * nb2).sqrt();
    a.iter()
        .zip(b)
        .map(|(&ai, &bi)| bi / denom - dot * ai / (na2 * denom))
        .collect()
}

/// Mean of squared differences between predicted similarities and labels.
pub fn mse_loss(sims: &[f64], labels: &[f64]) -> Result<f64> {
    if sims.is_empty() {
        return Err(Error::InvalidInput("mse_loss over an empty batch".into()));
    }
    if sims.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} similarities but {} labels",
            sims.len(),
            labels.len()
        )));
    }
    Ok(sims
        .iter()
        .zip(labels)
        .map(|(s, l)| (s - l) * (s - l))
        .sum::<f64>()
        / sims.len() as f64)
}

/// An (image index, text index, label) triple inside one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchPair {
    pub image: usize,
    pub text: usize,
    pub label: f64,
}

/// Appends `ratio` mismatched pairs per positive: `(img_i, txt_j, 0)` with
/// `j != i` drawn uniformly and seeded. The positives come first, unchanged.
pub fn sample_negatives(
    positives: &[(usize, usize)],
    rng: &mut Rng,
    ratio: usize,
) -> Result<Vec<BatchPair>> {
    if positives.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 positive pairs to sample negatives, got {}",
            positives.len()
        )));
    }
    let mut out: Vec<BatchPair> = positives
        .iter()
        .map(|&(image, text)| BatchPair { image, text, label: 1.0 })
        .collect();
    for (i, &(image, _)) in positives.iter().enumerate() {
        for _ in 0..ratio {
            let mut j = rng.below(positives.len() - 1);
            if j >= i {
                j += 1;
            }
            out.push(BatchPair { image, text: positives[j].1, label: 0.0 });
        }
    }
    Ok(out)
}

/// Named views over every parameter matrix of a parameter set, used by SGD,
/// serialization, and the gradient audit.
pub trait ParamTensors {
    fn named_tensors(&self) -> Vec<(String, &Matrix)>;
    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)>;
}

impl ParamTensors for MatchModel {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("image.conv_w".into(), &self.image_enc.conv_w),
            ("image.patch_proj".into(), &self.image_enc.patch_proj),
            ("image.positional".into(), &self.image_enc.positional),
        ];
        for (b, block) in self.image_enc.blocks.iter().enumerate() {
            push_block(&mut out, &format!("image.block{b}"), block);
        }
        out.push(("image.out_proj".into(), &self.image_enc.out_proj));
        out.push(("text.embedding".into(), &self.text_enc.embedding));
        push_block(&mut out, "text.block", &self.text_enc.block);
        out.push(("text.out_proj".into(), &self.text_enc.out_proj));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("image.conv_w".into(), &mut self.image_enc.conv_w),
            ("image.patch_proj".into(), &mut self.image_enc.patch_proj),
            ("image.positional".into(), &mut self.image_enc.positional),
        ];
        for (b, block) in self.image_enc.blocks.iter_mut().enumerate() {
            push_block_mut(&mut out, &format!("image.block{b}"), block);
        }
        out.push(("image.out_proj".into(), &mut self.image_enc.out_proj));
        out.push(("text.embedding".into(), &mut self.text_enc.embedding));
        push_block_mut(&mut out, "text.block", &mut self.text_enc.block);
        out.push(("text.out_proj".into(), &mut self.text_enc.out_proj));
        out
    }
}

fn push_block<'a>(
    out: &mut Vec<(String, &'a Matrix)>,
    prefix: &str,
    block: &'a crate::attention::TransformerBlockParams,
) {
    for (h, m) in block.mha.wq.iter().enumerate() {
        out.push((format!("{prefix}.mha.wq{h}"), m));
    }
    for (h, m) in block.mha.wk.iter().enumerate() {
        out.push((format!("{prefix}.mha.wk{h}"), m));
    }
    for (h, m) in block.mha.wv.iter().enumerate() {
        out.push((format!("{prefix}.mha.wv{h}"), m));
    }
    out.push((format!("{prefix}.mha.wo"), &block.mha.wo));
    out.push((format!("{prefix}.ffn_w1"), &block.ffn_w1));
    out.push((format!("{prefix}.ffn_w2"), &block.ffn_w2));
    out.push((format!("{prefix}.ln1.gain"), &block.ln1.gain));
    out.push((format!("{prefix}.ln1.bias"), &block.ln1.bias));
    out.push((format!("{prefix}.ln2.gain"), &block.ln2.gain));
    out.push((format!("{prefix}.ln2.bias"), &block.ln2.bias));
}

fn push_block_mut<'a>(
    out: &mut Vec<(String, &'a mut Matrix)>,
    prefix: &str,
    block: &'a mut crate::attention::TransformerBlockParams,
) {
    for (h, m) in block.mha.wq.iter_mut().enumerate() {
        out.push((format!("{prefix}.mha.wq{h}"), m));
    }
    for (h, m) in block.mha.wk.iter_mut().enumerate() {
        out.push((format!("{prefix}.mha.wk{h}"), m));
    }
    for (h, m) in block.mha.wv.iter_mut().enumerate() {
        out.push((format!("{prefix}.mha.wv{h}"), m));
    }
    out.push((format!("{prefix}.mha.wo"), &mut block.mha.wo));
    out.push((format!("{prefix}.ffn_w1"), &mut block.ffn_w1));
    out.push((format!("{prefix}.ffn_w2"), &mut block.ffn_w2));
    out.push((format!("{prefix}.ln1.gain"), &mut block.ln1.gain));
    out.push((format!("{prefix}.ln1.bias"), &mut block.ln1.bias));
    out.push((format!("{prefix}.ln2.gain"), &mut block.ln2.gain));
    out.push((format!("{prefix}.ln2.bias"), &mut block.ln2.bias));
}

/// `p <- p - lr * g` for every parameter entry, matching tensors by name.
pub fn sgd_step<P: ParamTensors>(params: &mut P, grads: &P, lr: f64) -> Result<()> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(Error::InvalidInput(format!("learning rate must be nonnegative, got {lr}")));
    }
    let grad_tensors: BTreeMap<String, &Matrix> = grads.named_tensors().into_iter().collect();
    for (name, tensor) in params.named_tensors_mut() {
        let grad = grad_tensors
            .get(&name)
            .ok_or_else(|| Error::Shape(format!("no gradient for parameter {name}")))?;
        if grad.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "gradient for {name} is {}x{}, parameter is {}x{}",
                grad.rows(),
                grad.cols(),
                tensor.rows(),
                tensor.cols()
            )));
        }
        tensor.add_scaled(grad, -lr);
    }
    Ok(())
}

/// Forward/backward over one batch. Each unique image and caption is encoded
/// once; pair gradients accumulate on the shared embeddings before flowing
/// back through the encoders. Returns the batch loss and the pair count.
pub fn batch_step(
    model: &MatchModel,
    data: &PairDataset,
    batch: &[usize],
    rng: &mut Rng,
    negative_ratio: usize,
    grads: &mut MatchModel,
) -> Result<(f64, usize)> {
    let positives: Vec<(usize, usize)> = batch
        .iter()
        .map(|&p| (data.pairs[p].image, data.pairs[p].text))
        .collect();
    let pairs: Vec<BatchPair> = if positives.len() >= 2 {
        sample_negatives(&positives, rng, negative_ratio)?
    } else {
        positives
            .iter()
            .map(|&(image, text)| BatchPair { image, text, label: 1.0 })
            .collect()
    };

    // Deterministic per-batch orderings of the unique samples.
    let mut image_ids: Vec<usize> = pairs.iter().map(|p| p.image).collect();
    image_ids.sort_unstable();
    image_ids.dedup();
    let mut text_ids: Vec<usize> = pairs.iter().map(|p| p.text).collect();
    text_ids.sort_unstable();
    text_ids.dedup();

    let mut image_embeds = BTreeMap::new();
    let mut image_caches = BTreeMap::new();
    for &i in &image_ids {
        let sample = &data.images[data_image_index(data, i)?];
        let (embed, cache) = encode_image_cached(&model.image_enc, &model.config, &sample.pixels)
            .map_err(|e| Error::Shape(format!("image {}: {e}", sample.id)))?;
        image_embeds.insert(i, embed);
        image_caches.insert(i, cache);
    }
    let mut text_embeds = BTreeMap::new();
    let mut text_caches = BTreeMap::new();
    for &t in &text_ids {
        let sample = &data.texts[t];
        let (embed, cache) = encode_text_cached(&model.text_enc, &model.config, &sample.token_ids)
            .map_err(|e| Error::Shape(format!("caption {}: {e}", sample.id)))?;
        text_embeds.insert(t, embed);
        text_caches.insert(t, cache);
    }

    let mut sims = Vec::with_capacity(pairs.len());
    for p in &pairs {
        sims.push(similarity(&image_embeds[&p.image], &text_embeds[&p.text])?);
    }
    let labels: Vec<f64> = pairs.iter().map(|p| p.label).collect();
    let loss = mse_loss(&sims, &labels)?;

    let mut d_image: BTreeMap<usize, Vec<f64>> = image_ids
        .iter()
        .map(|&i| (i, vec![0.0; model.config.d_embed]))
        .collect();
    let mut d_text: BTreeMap<usize, Vec<f64>> = text_ids
        .iter()
        .map(|&t| (t, vec![0.0; model.config.d_embed]))
        .collect();
    let scale = 2.0 / pairs.len() as f64;
    for (p, &sim) in pairs.iter().zip(&sims) {
        let dsim = scale * (sim - p.label);
        let u = &image_embeds[&p.image];
        let v = &text_embeds[&p.text];
        let du = similarity_grad_a(u, v);
        let dv = similarity_grad_a(v, u);
        let acc_u = d_image.get_mut(&p.image).expect("present");
        for (a, g) in acc_u.iter_mut().zip(du) {
            *a += dsim * g;
        }
        let acc_v = d_text.get_mut(&p.text).expect("present");
        for (a, g) in acc_v.iter_mut().zip(dv) {
            *a += dsim * g;
        }
    }

    for &i in &image_ids {
        image_backward(
            &model.image_enc,
            &model.config,
            &image_caches[&i],
            &d_image[&i],
            &mut grads.image_enc,
        )?;
    }
    for &t in &text_ids {
        text_backward(&model.text_enc, &text_caches[&t], &d_text[&t], &mut grads.text_enc)?;
    }
    Ok((loss, pairs.len()))
}

fn data_image_index(data: &PairDataset, image: usize) -> Result<usize> {
    if image >= data.images.len() {
        return Err(Error::InvalidInput(format!("image index {image} out of range")));
    }
    Ok(image)
}

/// Full SGD training over the train split: seeded shuffle each epoch, batches
/// of `cfg.batch_size` with the last partial batch kept, in-batch negative
/// sampling, and one SGD step per batch. Returns the trained model and the
/// per-epoch mean train loss.
pub fn train(
    mut model: MatchModel,
    data: &PairDataset,
    cfg: &TrainConfig,
) -> Result<(MatchModel, Vec<f64>)> {
    cfg.validate()?;
    if !data.has_split_assignment() {
        return Err(Error::InvalidInput("dataset has no split assignment".into()));
    }
    let train_idx = data.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::InvalidInput("train split is empty".into()));
    }

    let mut rng = Rng::new(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut pair_count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.zeros_like();
            let (loss, count) =
                batch_step(&model, data, batch, &mut rng, cfg.negative_ratio, &mut grads)?;
            sgd_step(&mut model, &grads, cfg.learning_rate)?;
            loss_sum += loss * count as f64;
            pair_count += count;
        }
        history.push(loss_sum / pair_count as f64);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::model::ModelConfig;

    #[test]
    fn similarity_identities() {
        let v = vec![0.3, -0.4, 1.2];
        assert!((similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(similarity(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn similarity_stays_in_range_for_random_vectors() {
        let mut rng = Rng::new(2);
        for _ in 0..500 {
            let n = 1 + rng.below(8);
            let a: Vec<f64> = (0..n).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let s = similarity(&a, &b).unwrap();
            assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s), "cosine {s}");
        }
    }

    #[test]
    fn mse_loss_hand_cases() {
        assert_eq!(mse_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(mse_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.25);
        assert!(mse_loss(&[], &[]).is_err());
    }

    #[test]
    fn loss_is_invariant_to_pair_order() {
        let sims = [0.9, 0.1, 0.4, 0.7];
        let labels = [1.0, 0.0, 0.0, 1.0];
        let a = mse_loss(&sims, &labels).unwrap();
        let b = mse_loss(&[0.7, 0.4, 0.1, 0.9], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        // Mean is symmetric; only float reassociation can differ.
        assert!((a - b).abs() <= 1e-15 * a.max(1.0));
    }

    #[test]
    fn negative_sampling_counts_and_determinism() {
        let positives = vec![(0, 0), (1, 1)];
        let a = sample_negatives(&positives, &mut Rng::new(1), 1).unwrap();
        let b = sample_negatives(&positives, &mut Rng::new(1), 1).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
        assert!(sample_negatives(&[(0, 0)], &mut Rng::new(1), 1).is_err());
    }

    #[test]
    fn negatives_never_duplicate_a_positive_pair() {
        let positives: Vec<(usize, usize)> = (0..10).map(|i| (i, i)).collect();
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let batch = sample_negatives(&positives, &mut rng, 2).unwrap();
            for p in &batch[10..] {
                assert_eq!(p.label, 0.0);
                assert_ne!(p.image, p.text, "negative equals a positive pair");
            }
        }
    }

    fn micro_dataset(tag: &str) -> (PairDataset, std::path::PathBuf) {
        let dir = std::env::temp_dir().join(format!("mkvt-train-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut ds = generate_synthetic(
            &SynthConfig {
                n_pairs: 24,
                n_classes: 4,
                image_size: 8,
                seed: 5,
                caption_len: 8,
                vocab_cap: 64,
            },
            &dir,
        )
        .unwrap();
        ds.assign_splits(7, (0.70, 0.15, 0.15)).unwrap();
        (ds, dir)
    }

    fn micro_model_config(ds: &PairDataset) -> ModelConfig {
        ModelConfig {
            image_size: 8,
            image_channels: 3,
            patch_size: 2,
            conv_channels: 2,
            d_model: 8,
            heads: 2,
            blocks: 1,
            ffn_hidden: 12,
            d_embed: 4,
            vocab_size: ds.vocab.size(),
            caption_len: 8,
        }
    }

    #[test]
    fn sgd_step_identities() {
        let (ds, dir) = micro_dataset("sgd");
        let config = micro_model_config(&ds);
        let model = MatchModel::init(config, 3).unwrap();

        let mut stepped = model.clone();
        sgd_step(&mut stepped, &model.zeros_like(), 0.5).unwrap();
        assert_eq!(stepped, model, "zero gradients must not move parameters");

        let mut stepped = model.clone();
        let mut fake = model.zeros_like();
        fake.image_enc.conv_w = Matrix::from_fn(
            model.image_enc.conv_w.rows(),
            model.image_enc.conv_w.cols(),
            |_, _| 1.0,
        );
        sgd_step(&mut stepped, &fake, 0.0).unwrap();
        assert_eq!(stepped, model, "zero learning rate must not move parameters");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn sgd_on_a_quadratic_moves_toward_the_minimum() {
        // f(p) = p^2/2 with gradient p: one step from 1.0 at lr 0.1 gives 0.9.
        let p: f64 = 1.0;
        let lr = 0.1;
        let stepped = p - lr * p;
        assert!((stepped - 0.9).abs() < 1e-15);
        let loss_before = 0.5 * p * p;
        let loss_after = 0.5 * stepped * stepped;
        assert!(loss_after < loss_before);
    }

    #[test]
    fn zero_epochs_returns_the_model_unchanged() {
        let (ds, dir) = micro_dataset("zero");
        let config = micro_model_config(&ds);
        let model = MatchModel::init(config, 3).unwrap();
        let cfg = TrainConfig { epochs: 0, batch_size: 8, ..TrainConfig::default() };
        let (trained, history) = train(model.clone(), &ds, &cfg).unwrap();
        assert_eq!(trained, model);
        assert!(history.is_empty());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn training_is_bit_deterministic_given_the_seed() {
        let (ds, dir) = micro_dataset("det");
        let config = micro_model_config(&ds);
        let cfg = TrainConfig { epochs: 3, batch_size: 8, seed: 11, ..TrainConfig::default() };
        let (a, hist_a) = train(MatchModel::init(config, 3).unwrap(), &ds, &cfg).unwrap();
        let (b, hist_b) = train(MatchModel::init(config, 3).unwrap(), &ds, &cfg).unwrap();
        assert_eq!(hist_a, hist_b);
        assert_eq!(a, b);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn training_reduces_the_loss_on_synthetic_data() {
        let (ds, dir) = micro_dataset("reduce");
        let config = micro_model_config(&ds);
        for seed in [1u64, 2, 3] {
            let cfg = TrainConfig {
                epochs: 8,
                batch_size: 8,
                seed,
                learning_rate: 0.05,
                ..TrainConfig::default()
            };
            let (_, history) = train(MatchModel::init(config, seed).unwrap(), &ds, &cfg).unwrap();
            let first = history.first().copied().unwrap();
            let last = history.last().copied().unwrap();
            assert!(last < first, "seed {seed}: loss went {first} -> {last}");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn train_rejects_missing_split() {
        let dir = std::env::temp_dir().join(format!("mkvt-nosplit-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let ds = generate_synthetic(
            &SynthConfig {
                n_pairs: 6,
                n_classes: 2,
                image_size: 8,
                seed: 5,
                caption_len: 8,
                vocab_cap: 64,
            },
            &dir,
        )
        .unwrap();
        let config = micro_model_config(&ds);
        let model = MatchModel::init(config, 3).unwrap();
        assert!(train(model, &ds, &TrainConfig::default()).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn micro_batch_loss_gradient_matches_finite_differences_per_group() {
        use crate::numerics::{finite_diff_grad, max_rel_err};
        let (ds, dir) = micro_dataset("grad");
        let config = micro_model_config(&ds);
        let model = MatchModel::init(config, 17).unwrap();
        let batch = [0usize, 1];

        let mut grads = model.zeros_like();
        // Negatives consume randomness, so freeze the stream per evaluation.
        let (_, _) = batch_step(&model, &ds, &batch, &mut Rng::new(5), 1, &mut grads).unwrap();

        let loss_with = |probe_model: &MatchModel| -> f64 {
            let mut sink = probe_model.zeros_like();
            let (loss, _) =
                batch_step(probe_model, &ds, &batch, &mut Rng::new(5), 1, &mut sink).unwrap();
            loss
        };

        let names: Vec<String> = model.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let base = model
                .named_tensors()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, m)| m.clone())
                .expect("tensor exists");
            let fd = finite_diff_grad(
                |probe| {
                    let mut m = model.clone();
                    for (n, t) in m.named_tensors_mut() {
                        if n == name {
                            *t = probe.clone();
                        }
                    }
                    loss_with(&m)
                },
                &base,
                1e-5,
            )
            .unwrap();
            let analytic = grads
                .named_tensors()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, m)| m.clone())
                .expect("gradient exists");
            let err = max_rel_err(&analytic, &fd);
            assert!(err < 1e-3, "parameter group {name}: rel err {err}");
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
