//! The shared-embedding matching model: a convolution-stem patch-attention
//! image encoder and a transformer text encoder projecting into one space,
//! trained with SGD on a mean-squared-error objective over cosine scores.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MklHead};
pub use train::{batch_step, mse_loss, sample_negatives, sgd_step, similarity, train, ParamTensors, TrainConfig};

use crate::attention::{
    extract_patches, layer_norm, layer_norm_backward, reassemble_patches,
    transformer_block_backward_cached, transformer_block_forward, BlockCache, LayerNormParams,
    PatchGrid, TransformerBlockParams,
};
use crate::data::PAD_ID;
use crate::error::{Error, Result};
use crate::numerics::{matmul, Matrix, Rng, Tensor3};

/// Structural hyperparameters of the matching model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub patch_size: usize,
    pub conv_channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub d_embed: usize,
    pub vocab_size: usize,
    pub caption_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            image_channels: 3,
            patch_size: 4,
            conv_channels: 8,
            d_model: 64,
            heads: 4,
            blocks: 2,
            ffn_hidden: 128,
            d_embed: 64,
            vocab_size: 1024,
            caption_len: 16,
        }
    }
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size) * (self.image_size / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.conv_channels
    }

    fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {} must divide the image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide the model width {}",
                self.heads, self.d_model
            )));
        }
        let positive = [
            self.image_size,
            self.image_channels,
            self.conv_channels,
            self.d_model,
            self.blocks,
            self.ffn_hidden,
            self.d_embed,
            self.vocab_size,
            self.caption_len,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::Config("every model dimension must be positive".into()));
        }
        Ok(())
    }
}

fn xavier(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-bound, bound))
}

/// Shrink factor on the output-projection initialization. Cosine gradients
/// are inversely proportional to the embedding norm, so starting the heads
/// small keeps the pinned learning rate effective; norms barely move during
/// training because cosine gradients are orthogonal to the embedding.
const OUT_PROJ_INIT_SCALE: f64 = 0.01;

fn center_columns(m: &mut Matrix) {
    let rows = m.rows();
    for c in 0..m.cols() {
        let mean: f64 = (0..rows).map(|r| m[(r, c)]).sum::<f64>() / rows as f64;
        for r in 0..rows {
            m[(r, c)] -= mean;
        }
    }
}

fn zero_residual_exits(block: &mut TransformerBlockParams) {
    block.mha.wo = Matrix::zeros(block.mha.wo.rows(), block.mha.wo.cols());
    block.ffn_w2 = Matrix::zeros(block.ffn_w2.rows(), block.ffn_w2.cols());
}



/// Image encoder parameters: one 3x3 same-padding convolution bank with ReLU,
/// patch projection with learned positional vectors, transformer blocks, and
/// an output projection into the shared space.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoderParams {
    /// (9 * image_channels) x conv_channels.
    pub conv_w: Matrix,
    /// patch_dim x d_model.
    pub patch_proj: Matrix,
    /// num_patches x d_model, added after projection.
    pub positional: Matrix,
    pub blocks: Vec<TransformerBlockParams>,
    /// d_model x d_embed, applied to the standardized pooled representation.
    pub out_proj: Matrix,
}

/// Text encoder parameters: token embedding table, one transformer block,
/// and an output projection into the shared space.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderParams {
    /// vocab_size x d_model.
    pub embedding: Matrix,
    pub block: TransformerBlockParams,
    /// d_model x d_embed, applied to the standardized pooled representation.
    pub out_proj: Matrix,
}

/// Both encoders plus the structural configuration they satisfy.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchModel {
    pub config: ModelConfig,
    pub image_enc: ImageEncoderParams,
    pub text_enc: TextEncoderParams,
}

impl MatchModel {
    /// Seeded initialization: Xavier-uniform matrices, with two encoder-level
    /// policies on top. Residual-exit projections (attention output, second
    /// feed-forward matrix) start at zero so each block begins as an identity
    /// and the pooled features keep the raw patch-content geometry; Xavier
    /// residual branches add large input-independent vectors to every sample,
    /// which drowns the class signal cosine scoring depends on. Positional
    /// vectors are centered across patch indices so mean pooling cancels them
    /// exactly at the start.
    pub fn init(config: ModelConfig, seed: u64) -> Result<MatchModel> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut positional = xavier(config.num_patches(), config.d_model, &mut rng);
        center_columns(&mut positional);
        // Zero-mean filters ignore uniform regions entirely, so the patch
        // features describe edge geometry instead of average brightness,
        // which cosine scoring cannot see anyway.
        let mut conv_w = xavier(9 * config.image_channels, config.conv_channels, &mut rng);
        center_columns(&mut conv_w);
        let image_enc = ImageEncoderParams {
            conv_w,
            patch_proj: xavier(config.patch_dim(), config.d_model, &mut rng),
            positional,
            blocks: (0..config.blocks)
                .map(|_| {
                    let mut block = TransformerBlockParams::init(
                        config.d_model,
                        config.heads,
                        config.ffn_hidden,
                        &mut rng,
                    )?;
                    zero_residual_exits(&mut block);
                    Ok(block)
                })
                .collect::<Result<_>>()?,
            out_proj: xavier(config.d_model, config.d_embed, &mut rng).scale(OUT_PROJ_INIT_SCALE),
        };
        let mut text_block =
            TransformerBlockParams::init(config.d_model, config.heads, config.ffn_hidden, &mut rng)?;
        zero_residual_exits(&mut text_block);
        let text_enc = TextEncoderParams {
            embedding: xavier(config.vocab_size, config.d_model, &mut rng),
            block: text_block,
            out_proj: xavier(config.d_model, config.d_embed, &mut rng).scale(OUT_PROJ_INIT_SCALE),
        };
        Ok(MatchModel { config, image_enc, text_enc })
    }

    pub fn zeros_like(&self) -> MatchModel {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        MatchModel {
            config: self.config,
            image_enc: ImageEncoderParams {
                conv_w: z(&self.image_enc.conv_w),
                patch_proj: z(&self.image_enc.patch_proj),
                positional: z(&self.image_enc.positional),
                blocks: self.image_enc.blocks.iter().map(|b| b.zeros_like()).collect(),
                out_proj: z(&self.image_enc.out_proj),
            },
            text_enc: TextEncoderParams {
                embedding: z(&self.text_enc.embedding),
                block: self.text_enc.block.zeros_like(),
                out_proj: z(&self.text_enc.out_proj),
            },
        }
    }
}

/// 3x3 same-padding im2col: row (h*W + w) holds the 9 neighborhood pixels,
/// channels fastest, zeros outside the border.
fn im2col_3x3(input: &Tensor3) -> Matrix {
    let (h, w, c) = input.shape();
    let mut col = Matrix::zeros(h * w, 9 * c);
    for r in 0..h {
        for q in 0..w {
            let row = col.row_mut(r * w + q);
            let mut idx = 0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let rr = r as i64 + dr;
                    let cc = q as i64 + dc;
                    if rr >= 0 && rr < h as i64 && cc >= 0 && cc < w as i64 {
                        for ch in 0..c {
                            row[idx + ch] = input.get(rr as usize, cc as usize, ch);
                        }
                    }
                    idx += c;
                }
            }
        }
    }
    col
}

pub(crate) struct ImageCache {
    col: Matrix,
    z: Matrix,
    patches: Matrix,
    block_inputs: Vec<Matrix>,
    block_caches: Vec<BlockCache>,
    pooled: Matrix,
    normed: Matrix,
}

pub(crate) fn encode_image_cached(
    params: &ImageEncoderParams,
    config: &ModelConfig,
    image: &Tensor3,
) -> Result<(Vec<f64>, ImageCache)> {
    let (h, w, c) = image.shape();
    if (h, w, c) != (config.image_size, config.image_size, config.image_channels) {
        return Err(Error::Shape(format!(
            "image is {h}x{w}x{c}, model expects {0}x{0}x{1}",
            config.image_size, config.image_channels
        )));
    }
    let col = im2col_3x3(image);
    let z = matmul(&col, &params.conv_w)?;
    let features = Tensor3::from_vec(h, w, config.conv_channels, z.map(|v| v.max(0.0)).data().to_vec())
        .expect("conv output is finite");
    let grid = extract_patches(&features, config.patch_size)?;
    let embedded = matmul(&grid.patches, &params.patch_proj)?.add(&params.positional);

    let mut block_inputs = vec![embedded];
    let mut block_caches = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let x = block_inputs.last().expect("nonempty");
        let (out, cache) = transformer_block_forward(x, block)?;
        block_caches.push(cache);
        block_inputs.push(out);
    }

    let last = block_inputs.last().expect("nonempty");
    let inv = 1.0 / last.rows() as f64;
    let mut pooled = Matrix::zeros(1, last.cols());
    for r in 0..last.rows() {
        for (p, &v) in pooled.row_mut(0).iter_mut().zip(last.row(r)) {
            *p += v * inv;
        }
    }
    let normed = layer_norm(&pooled, &LayerNormParams::identity(pooled.cols()));
    let out = matmul(&normed, &params.out_proj)?;
    Ok((
        out.data().to_vec(),
        ImageCache {
            col,
            z,
            patches: grid.patches,
            block_inputs,
            block_caches,
            pooled,
            normed,
        },
    ))
}

/// Encodes a normalized image into a `d_embed`-dimensional vector.
pub fn encode_image(params: &ImageEncoderParams, config: &ModelConfig, image: &Tensor3) -> Result<Vec<f64>> {
    encode_image_cached(params, config, image).map(|(v, _)| v)
}

/// Accumulates image-encoder gradients for one sample into `grads`.
pub(crate) fn image_backward(
    params: &ImageEncoderParams,
    config: &ModelConfig,
    cache: &ImageCache,
    d_embed: &[f64],
    grads: &mut ImageEncoderParams,
) -> Result<()> {
    let dout = Matrix::from_vec(1, d_embed.len(), d_embed.to_vec())
        .map_err(|_| Error::Shape("non-finite embedding gradient".into()))?;
    grads.out_proj.add_scaled(&matmul(&cache.normed.transpose(), &dout)?, 1.0);
    let dnormed = matmul(&dout, &params.out_proj.transpose())?;
    let (dpooled, _) = layer_norm_backward(
        &cache.pooled,
        &LayerNormParams::identity(cache.pooled.cols()),
        &dnormed,
    );

    let last = cache.block_inputs.last().expect("nonempty");
    let inv = 1.0 / last.rows() as f64;
    let mut dx = Matrix::from_fn(last.rows(), last.cols(), |_, j| dpooled[(0, j)] * inv);

    for idx in (0..params.blocks.len()).rev() {
        let (dx_in, block_grads) = transformer_block_backward_cached(
            &cache.block_inputs[idx],
            &params.blocks[idx],
            &cache.block_caches[idx],
            &dx,
        )?;
        add_block_grads(&mut grads.blocks[idx], &block_grads);
        dx = dx_in;
    }

    grads.positional.add_scaled(&dx, 1.0);
    grads.patch_proj.add_scaled(&matmul(&cache.patches.transpose(), &dx)?, 1.0);
    let dpatches = matmul(&dx, &params.patch_proj.transpose())?;

    // Patch extraction is a permutation of entries, so its backward is the
    // inverse scatter.
    let grid = PatchGrid {
        patch_size: config.patch_size,
        patches: dpatches,
        source_shape: (config.image_size, config.image_size, config.conv_channels),
    };
    let dfeatures = reassemble_patches(&grid)?;
    let hw = config.image_size * config.image_size;
    let mut dz = Matrix::from_vec(hw, config.conv_channels, dfeatures.data().to_vec())
        .expect("gradient entries are finite");
    for (g, &z) in dz.data_mut().iter_mut().zip(cache.z.data()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    grads.conv_w.add_scaled(&matmul(&cache.col.transpose(), &dz)?, 1.0);
    Ok(())
}

pub(crate) fn add_block_grads(acc: &mut TransformerBlockParams, delta: &TransformerBlockParams) {
    for (a, d) in acc.mha.wq.iter_mut().zip(&delta.mha.wq) {
        a.add_scaled(d, 1.0);
    }
    for (a, d) in acc.mha.wk.iter_mut().zip(&delta.mha.wk) {
        a.add_scaled(d, 1.0);
    }
    for (a, d) in acc.mha.wv.iter_mut().zip(&delta.mha.wv) {
        a.add_scaled(d, 1.0);
    }
    acc.mha.wo.add_scaled(&delta.mha.wo, 1.0);
    acc.ffn_w1.add_scaled(&delta.ffn_w1, 1.0);
    acc.ffn_w2.add_scaled(&delta.ffn_w2, 1.0);
    acc.ln1.gain.add_scaled(&delta.ln1.gain, 1.0);
    acc.ln1.bias.add_scaled(&delta.ln1.bias, 1.0);
    acc.ln2.gain.add_scaled(&delta.ln2.gain, 1.0);
    acc.ln2.bias.add_scaled(&delta.ln2.bias, 1.0);
}

pub(crate) struct TextCache {
    token_ids: Vec<u32>,
    rows: Matrix,
    block_cache: BlockCache,
    block_out: Matrix,
    pool_mask: Vec<bool>,
    pool_count: usize,
    pooled: Matrix,
    normed: Matrix,
}

pub(crate) fn encode_text_cached(
    params: &TextEncoderParams,
    config: &ModelConfig,
    token_ids: &[u32],
) -> Result<(Vec<f64>, TextCache)> {
    if token_ids.len() != config.caption_len {
        return Err(Error::Shape(format!(
            "token sequence has length {}, model expects {}",
            token_ids.len(),
            config.caption_len
        )));
    }
    if let Some(pos) = token_ids.iter().position(|&id| id as usize >= config.vocab_size) {
        return Err(Error::InvalidInput(format!(
            "token id {} at position {pos} is outside the vocabulary of size {}",
            token_ids[pos], config.vocab_size
        )));
    }
    let d = params.embedding.cols();
    let mut rows = Matrix::zeros(token_ids.len(), d);
    for (r, &id) in token_ids.iter().enumerate() {
        rows.row_mut(r).copy_from_slice(params.embedding.row(id as usize));
    }
    let (block_out, block_cache) = transformer_block_forward(&rows, &params.block)?;

    // Mean-pool over non-PAD positions; an all-PAD caption pools over all.
    let mut pool_mask: Vec<bool> = token_ids.iter().map(|&id| id != PAD_ID).collect();
    if pool_mask.iter().all(|&m| !m) {
        pool_mask.iter_mut().for_each(|m| *m = true);
    }
    let pool_count = pool_mask.iter().filter(|&&m| m).count();
    let inv = 1.0 / pool_count as f64;
    let mut pooled = Matrix::zeros(1, d);
    for (r, &keep) in pool_mask.iter().enumerate() {
        if keep {
            for (p, &v) in pooled.row_mut(0).iter_mut().zip(block_out.row(r)) {
                *p += v * inv;
            }
        }
    }
    let normed = layer_norm(&pooled, &LayerNormParams::identity(pooled.cols()));
    let out = matmul(&normed, &params.out_proj)?;
    Ok((
        out.data().to_vec(),
        TextCache {
            token_ids: token_ids.to_vec(),
            rows,
            block_cache,
            block_out,
            pool_mask,
            pool_count,
            pooled,
            normed,
        },
    ))
}

/// Encodes a fixed-length token id sequence into a `d_embed`-dimensional
/// vector.
pub fn encode_text(params: &TextEncoderParams, config: &ModelConfig, token_ids: &[u32]) -> Result<Vec<f64>> {
    encode_text_cached(params, config, token_ids).map(|(v, _)| v)
}

/// Accumulates text-encoder gradients for one sample into `grads`.
pub(crate) fn text_backward(
    params: &TextEncoderParams,
    cache: &TextCache,
    d_embed: &[f64],
    grads: &mut TextEncoderParams,
) -> Result<()> {
    let dout = Matrix::from_vec(1, d_embed.len(), d_embed.to_vec())
        .map_err(|_| Error::Shape("non-finite embedding gradient".into()))?;
    grads.out_proj.add_scaled(&matmul(&cache.normed.transpose(), &dout)?, 1.0);
    let dnormed = matmul(&dout, &params.out_proj.transpose())?;
    let (dpooled, _) = layer_norm_backward(
        &cache.pooled,
        &LayerNormParams::identity(cache.pooled.cols()),
        &dnormed,
    );

    let inv = 1.0 / cache.pool_count as f64;
    let mut dblock_out = Matrix::zeros(cache.block_out.rows(), cache.block_out.cols());
    for (r, &keep) in cache.pool_mask.iter().enumerate() {
        if keep {
            for (g, &v) in dblock_out.row_mut(r).iter_mut().zip(dpooled.row(0)) {
                *g = v * inv;
            }
        }
    }
    let (drows, block_grads) =
        transformer_block_backward_cached(&cache.rows, &params.block, &cache.block_cache, &dblock_out)?;
    add_block_grads(&mut grads.block, &block_grads);

    for (r, &id) in cache.token_ids.iter().enumerate() {
        let src = drows.row(r).to_vec();
        let dst = grads.embedding.row_mut(id as usize);
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
    Ok(())
}
