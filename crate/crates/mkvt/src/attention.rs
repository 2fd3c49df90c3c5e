//! Scaled dot-product attention, multi-head attention, patch embedding, and
//! a pre-norm transformer block, each paired with an analytic backward pass.
//!
//! Backward functions return gradients in the same parameter structs as the
//! forward passes take, so a gradient is always shaped like its parameter.

use crate::error::{Error, Result};
use crate::numerics::{matmul, softmax_rows, Matrix, Rng, Tensor3};

/// Epsilon inside the layer-norm variance square root.
pub const LN_EPSILON: f64 = 1e-5;

/// Query, key, and value matrices for one attention evaluation.
#[derive(Clone, Debug)]
pub struct AttentionInput {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

impl AttentionInput {
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<AttentionInput> {
        if q.cols() != k.cols() {
            return Err(Error::Shape(format!(
                "query width {} does not match key width {}",
                q.cols(),
                k.cols()
            )));
        }
        if k.rows() != v.rows() {
            return Err(Error::Shape(format!(
                "{} keys but {} values",
                k.rows(),
                v.rows()
            )));
        }
        if q.rows() == 0 || q.cols() == 0 || v.rows() == 0 || v.cols() == 0 {
            return Err(Error::Shape("attention operands must be nonempty".into()));
        }
        Ok(AttentionInput { q, k, v })
    }
}

/// `softmax(q k' / sqrt(d_k)) v`. Returns the mixed values and the
/// row-stochastic attention weights.
pub fn scaled_dot_attention(inp: &AttentionInput) -> (Matrix, Matrix) {
    let scale = 1.0 / (inp.q.cols() as f64).sqrt();
    let scores = matmul(&inp.q, &inp.k.transpose())
        .expect("attention shapes validated at construction")
        .scale(scale);
    let weights = softmax_rows(&scores).expect("scores are finite");
    let out = matmul(&weights, &inp.v).expect("attention shapes validated at construction");
    (out, weights)
}

/// Gradients of an attention output with respect to its three operands.
#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
}

/// Row-wise softmax backward: for each row, `ds = w .* (dw - <dw, w>)`.
fn softmax_rows_backward(weights: &Matrix, upstream: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(weights.rows(), weights.cols());
    for r in 0..weights.rows() {
        let w = weights.row(r);
        let dw = upstream.row(r);
        let inner: f64 = w.iter().zip(dw).map(|(a, b)| a * b).sum();
        for (o, (&wi, &dwi)) in out.row_mut(r).iter_mut().zip(w.iter().zip(dw)) {
            *o = wi * (dwi - inner);
        }
    }
    out
}

/// Exact gradients of `scaled_dot_attention` contracted with `upstream`.
pub fn attention_backward(inp: &AttentionInput, upstream: &Matrix) -> Result<AttentionGrads> {
    let (_, weights) = scaled_dot_attention(inp);
    attention_backward_cached(inp, &weights, upstream)
}

/// Backward pass reusing attention weights cached from the forward pass.
pub(crate) fn attention_backward_cached(
    inp: &AttentionInput,
    weights: &Matrix,
    upstream: &Matrix,
) -> Result<AttentionGrads> {
    if upstream.shape() != (inp.q.rows(), inp.v.cols()) {
        return Err(Error::Shape(format!(
            "upstream gradient is {}x{}, output is {}x{}",
            upstream.rows(),
            upstream.cols(),
            inp.q.rows(),
            inp.v.cols()
        )));
    }
    let scale = 1.0 / (inp.q.cols() as f64).sqrt();
    let dv = matmul(&weights.transpose(), upstream)?;
    let dw = matmul(upstream, &inp.v.transpose())?;
    let dscores = softmax_rows_backward(weights, &dw).scale(scale);
    let dq = matmul(&dscores, &inp.k)?;
    let dk = matmul(&dscores.transpose(), &inp.q)?;
    Ok(AttentionGrads { dq, dk, dv })
}

fn xavier(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-bound, bound))
}

/// Per-head projection matrices and the output projection of multi-head
/// attention.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadParams {
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    pub wo: Matrix,
}

impl MultiHeadParams {
    pub fn new(wq: Vec<Matrix>, wk: Vec<Matrix>, wv: Vec<Matrix>, wo: Matrix) -> Result<MultiHeadParams> {
        let h = wq.len();
        if h == 0 || wk.len() != h || wv.len() != h {
            return Err(Error::Config(format!(
                "projection lists must share a nonzero head count, got {}/{}/{}",
                wq.len(),
                wk.len(),
                wv.len()
            )));
        }
        let d_model = wq[0].rows();
        let d_head = wq[0].cols();
        for m in wq.iter().chain(&wk).chain(&wv) {
            if m.shape() != (d_model, d_head) {
                return Err(Error::Config(format!(
                    "every head projection must be {d_model}x{d_head}, found {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if d_head * h != d_model {
            return Err(Error::Config(format!(
                "head width {d_head} times head count {h} must equal the model width {d_model}"
            )));
        }
        if wo.shape() != (h * d_head, d_model) {
            return Err(Error::Config(format!(
                "output projection must be {}x{}, got {}x{}",
                h * d_head,
                d_model,
                wo.rows(),
                wo.cols()
            )));
        }
        Ok(MultiHeadParams { wq, wk, wv, wo })
    }

    /// Seeded Xavier-uniform initialization. Errors when the head count does
    /// not divide the model width.
    pub fn init(d_model: usize, heads: usize, rng: &mut Rng) -> Result<MultiHeadParams> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "head count {heads} must divide the model width {d_model}"
            )));
        }
        let d_head = d_model / heads;
        let mk = |rng: &mut Rng| xavier(d_model, d_head, rng);
        let wq = (0..heads).map(|_| mk(rng)).collect();
        let wk = (0..heads).map(|_| mk(rng)).collect();
        let wv = (0..heads).map(|_| mk(rng)).collect();
        let wo = xavier(d_model, d_model, rng);
        MultiHeadParams::new(wq, wk, wv, wo)
    }

    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn d_model(&self) -> usize {
        self.wq[0].rows()
    }

    pub fn d_head(&self) -> usize {
        self.wq[0].cols()
    }

    pub fn zeros_like(&self) -> MultiHeadParams {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        MultiHeadParams {
            wq: self.wq.iter().map(z).collect(),
            wk: self.wk.iter().map(z).collect(),
            wv: self.wv.iter().map(z).collect(),
            wo: z(&self.wo),
        }
    }
}

pub(crate) struct MhaCache {
    inputs: Vec<AttentionInput>,
    weights: Vec<Matrix>,
    concat: Matrix,
}

fn concat_cols(parts: &[Matrix]) -> Matrix {
    let rows = parts[0].rows();
    let total: usize = parts.iter().map(Matrix::cols).sum();
    let mut out = Matrix::zeros(rows, total);
    let mut offset = 0;
    for p in parts {
        for r in 0..rows {
            out.row_mut(r)[offset..offset + p.cols()].copy_from_slice(p.row(r));
        }
        offset += p.cols();
    }
    out
}

fn slice_cols(m: &Matrix, start: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), width);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[start..start + width]);
    }
    out
}

pub(crate) fn multi_head_forward(x: &Matrix, params: &MultiHeadParams) -> Result<(Matrix, MhaCache)> {
    if x.cols() != params.d_model() {
        return Err(Error::Shape(format!(
            "input width {} does not match model width {}",
            x.cols(),
            params.d_model()
        )));
    }
    let mut heads = Vec::with_capacity(params.heads());
    let mut inputs = Vec::with_capacity(params.heads());
    let mut weights = Vec::with_capacity(params.heads());
    for i in 0..params.heads() {
        let inp = AttentionInput::new(
            matmul(x, &params.wq[i])?,
            matmul(x, &params.wk[i])?,
            matmul(x, &params.wv[i])?,
        )?;
        let (head, w) = scaled_dot_attention(&inp);
        heads.push(head);
        inputs.push(inp);
        weights.push(w);
    }
    let concat = concat_cols(&heads);
    let out = matmul(&concat, &params.wo)?;
    Ok((out, MhaCache { inputs, weights, concat }))
}

/// Self-attention over `x` with per-head projections, concatenation, and an
/// output projection. Output has the same shape as `x`.
pub fn multi_head_attention(x: &Matrix, params: &MultiHeadParams) -> Result<Matrix> {
    multi_head_forward(x, params).map(|(out, _)| out)
}

/// Gradients of `multi_head_attention` with respect to the input and every
/// projection matrix.
pub fn multi_head_backward(
    x: &Matrix,
    params: &MultiHeadParams,
    upstream: &Matrix,
) -> Result<(Matrix, MultiHeadParams)> {
    let (_, cache) = multi_head_forward(x, params)?;
    multi_head_backward_cached(x, params, &cache, upstream)
}

pub(crate) fn multi_head_backward_cached(
    x: &Matrix,
    params: &MultiHeadParams,
    cache: &MhaCache,
    upstream: &Matrix,
) -> Result<(Matrix, MultiHeadParams)> {
    if upstream.shape() != (x.rows(), params.d_model()) {
        return Err(Error::Shape(format!(
            "upstream gradient is {}x{}, expected {}x{}",
            upstream.rows(),
            upstream.cols(),
            x.rows(),
            params.d_model()
        )));
    }
    let mut grads = params.zeros_like();
    let x_t = x.transpose();
    grads.wo = matmul(&cache.concat.transpose(), upstream)?;
    let dconcat = matmul(upstream, &params.wo.transpose())?;
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    let d_head = params.d_head();
    for i in 0..params.heads() {
        let dhead = slice_cols(&dconcat, i * d_head, d_head);
        let att = attention_backward_cached(&cache.inputs[i], &cache.weights[i], &dhead)?;
        grads.wq[i] = matmul(&x_t, &att.dq)?;
        grads.wk[i] = matmul(&x_t, &att.dk)?;
        grads.wv[i] = matmul(&x_t, &att.dv)?;
        dx.add_scaled(&matmul(&att.dq, &params.wq[i].transpose())?, 1.0);
        dx.add_scaled(&matmul(&att.dk, &params.wk[i].transpose())?, 1.0);
        dx.add_scaled(&matmul(&att.dv, &params.wv[i].transpose())?, 1.0);
    }
    Ok((dx, grads))
}

/// Flattened image patches plus the geometry needed to reassemble them.
#[derive(Clone, Debug)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub patches: Matrix,
    pub source_shape: (usize, usize, usize),
}

/// Splits an image into `patch_size` x `patch_size` blocks, scanning the
/// block grid row-major and flattening each block row-major with channels
/// fastest. Patch i, pixel (r, c), channel ch lands at column
/// `(r * patch_size + c) * channels + ch`.
pub fn extract_patches(image: &Tensor3, patch_size: usize) -> Result<PatchGrid> {
    let (h, w, c) = image.shape();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} is not divisible into {patch_size}x{patch_size} patches"
        )));
    }
    let rows = h / patch_size;
    let cols = w / patch_size;
    let patch_dim = patch_size * patch_size * c;
    let mut patches = Matrix::zeros(rows * cols, patch_dim);
    for pr in 0..rows {
        for pc in 0..cols {
            let row = patches.row_mut(pr * cols + pc);
            let mut idx = 0;
            for dr in 0..patch_size {
                for dc in 0..patch_size {
                    for ch in 0..c {
                        row[idx] = image.get(pr * patch_size + dr, pc * patch_size + dc, ch);
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(PatchGrid { patch_size, patches, source_shape: (h, w, c) })
}

/// Inverse of `extract_patches`; exact because flattening only moves values.
pub fn reassemble_patches(grid: &PatchGrid) -> Result<Tensor3> {
    let (h, w, c) = grid.source_shape;
    let ps = grid.patch_size;
    let cols = w / ps;
    let mut image = Tensor3::zeros(h, w, c);
    for (p, _) in (0..grid.patches.rows()).map(|p| (p, ())) {
        let (pr, pc) = (p / cols, p % cols);
        let row = grid.patches.row(p);
        let mut idx = 0;
        for dr in 0..ps {
            for dc in 0..ps {
                for ch in 0..c {
                    image.set(pr * ps + dr, pc * ps + dc, ch, row[idx]);
                    idx += 1;
                }
            }
        }
    }
    Ok(image)
}

/// Patch extraction, linear projection, and addition of one learned
/// positional vector per patch index.
pub fn patch_embed(
    image: &Tensor3,
    patch_size: usize,
    embed: &Matrix,
    positional: &Matrix,
) -> Result<Matrix> {
    let grid = extract_patches(image, patch_size)?;
    if grid.patches.cols() != embed.rows() {
        return Err(Error::Shape(format!(
            "patch dimension {} does not match projection input {}",
            grid.patches.cols(),
            embed.rows()
        )));
    }
    let projected = matmul(&grid.patches, embed)?;
    if positional.shape() != projected.shape() {
        return Err(Error::Shape(format!(
            "positional table is {}x{}, expected {}x{}",
            positional.rows(),
            positional.cols(),
            projected.rows(),
            projected.cols()
        )));
    }
    Ok(projected.add(positional))
}

/// Per-feature gain and bias of a layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Matrix,
    pub bias: Matrix,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> LayerNormParams {
        LayerNormParams {
            gain: Matrix::from_fn(1, d, |_, _| 1.0),
            bias: Matrix::zeros(1, d),
        }
    }

    pub fn zeros_like(&self) -> LayerNormParams {
        LayerNormParams {
            gain: Matrix::zeros(1, self.gain.cols()),
            bias: Matrix::zeros(1, self.bias.cols()),
        }
    }
}

/// Row-wise layer normalization with learned gain and bias.
pub fn layer_norm(x: &Matrix, p: &LayerNormParams) -> Matrix {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPSILON).sqrt();
        for (j, (o, &v)) in out.row_mut(r).iter_mut().zip(row).enumerate() {
            *o = p.gain[(0, j)] * (v - mean) * inv + p.bias[(0, j)];
        }
    }
    out
}

/// Backward of `layer_norm`: input gradient plus gain/bias gradients.
pub fn layer_norm_backward(
    x: &Matrix,
    p: &LayerNormParams,
    upstream: &Matrix,
) -> (Matrix, LayerNormParams) {
    let d = x.cols();
    let mut dx = Matrix::zeros(x.rows(), d);
    let mut grads = p.zeros_like();
    for r in 0..x.rows() {
        let row = x.row(r);
        let dy = upstream.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPSILON).sqrt();

        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for j in 0..d {
            let xhat = (row[j] - mean) * inv;
            let g = dy[j] * p.gain[(0, j)];
            mean_g += g;
            mean_gx += g * xhat;
            grads.gain[(0, j)] += dy[j] * xhat;
            grads.bias[(0, j)] += dy[j];
        }
        mean_g /= d as f64;
        mean_gx /= d as f64;
        for j in 0..d {
            let xhat = (row[j] - mean) * inv;
            let g = dy[j] * p.gain[(0, j)];
            dx[(r, j)] = inv * (g - mean_g - xhat * mean_gx);
        }
    }
    (dx, grads)
}

/// One pre-norm transformer encoder block:
/// `h = x + MHA(LN1(x))`, `out = h + W2 relu(W1 LN2(h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlockParams {
    pub mha: MultiHeadParams,
    pub ffn_w1: Matrix,
    pub ffn_w2: Matrix,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

impl TransformerBlockParams {
    pub fn init(d_model: usize, heads: usize, ffn_hidden: usize, rng: &mut Rng) -> Result<TransformerBlockParams> {
        Ok(TransformerBlockParams {
            mha: MultiHeadParams::init(d_model, heads, rng)?,
            ffn_w1: xavier(d_model, ffn_hidden, rng),
            ffn_w2: xavier(ffn_hidden, d_model, rng),
            ln1: LayerNormParams::identity(d_model),
            ln2: LayerNormParams::identity(d_model),
        })
    }

    pub fn d_model(&self) -> usize {
        self.mha.d_model()
    }

    pub fn zeros_like(&self) -> TransformerBlockParams {
        TransformerBlockParams {
            mha: self.mha.zeros_like(),
            ffn_w1: Matrix::zeros(self.ffn_w1.rows(), self.ffn_w1.cols()),
            ffn_w2: Matrix::zeros(self.ffn_w2.rows(), self.ffn_w2.cols()),
            ln1: self.ln1.zeros_like(),
            ln2: self.ln2.zeros_like(),
        }
    }
}

pub(crate) struct BlockCache {
    n1: Matrix,
    mha: MhaCache,
    h: Matrix,
    n2: Matrix,
    z: Matrix,
    relu: Matrix,
}

pub(crate) fn transformer_block_forward(
    x: &Matrix,
    params: &TransformerBlockParams,
) -> Result<(Matrix, BlockCache)> {
    if x.cols() != params.d_model() {
        return Err(Error::Shape(format!(
            "input width {} does not match block width {}",
            x.cols(),
            params.d_model()
        )));
    }
    let n1 = layer_norm(x, &params.ln1);
    let (attended, mha) = multi_head_forward(&n1, &params.mha)?;
    let h = x.add(&attended);
    let n2 = layer_norm(&h, &params.ln2);
    let z = matmul(&n2, &params.ffn_w1)?;
    let relu = z.map(|v| v.max(0.0));
    let f = matmul(&relu, &params.ffn_w2)?;
    let out = h.add(&f);
    Ok((out, BlockCache { n1, mha, h, n2, z, relu }))
}

/// Pre-norm residual transformer block. Output shape equals input shape.
pub fn transformer_block(x: &Matrix, params: &TransformerBlockParams) -> Result<Matrix> {
    transformer_block_forward(x, params).map(|(out, _)| out)
}

/// Gradients of `transformer_block` with respect to the input and all
/// parameters.
pub fn transformer_block_backward(
    x: &Matrix,
    params: &TransformerBlockParams,
    upstream: &Matrix,
) -> Result<(Matrix, TransformerBlockParams)> {
    let (_, cache) = transformer_block_forward(x, params)?;
    transformer_block_backward_cached(x, params, &cache, upstream)
}

pub(crate) fn transformer_block_backward_cached(
    x: &Matrix,
    params: &TransformerBlockParams,
    cache: &BlockCache,
    upstream: &Matrix,
) -> Result<(Matrix, TransformerBlockParams)> {
    if upstream.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "upstream gradient is {}x{}, expected {}x{}",
            upstream.rows(),
            upstream.cols(),
            x.rows(),
            x.cols()
        )));
    }
    let mut grads = params.zeros_like();

    // Feed-forward branch.
    let drelu = matmul(upstream, &params.ffn_w2.transpose())?;
    grads.ffn_w2 = matmul(&cache.relu.transpose(), upstream)?;
    let mut dz = drelu;
    for (g, &z) in dz.data_mut().iter_mut().zip(cache.z.data()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    grads.ffn_w1 = matmul(&cache.n2.transpose(), &dz)?;
    let dn2 = matmul(&dz, &params.ffn_w1.transpose())?;
    let (dh_ffn, ln2_grads) = layer_norm_backward(&cache.h, &params.ln2, &dn2);
    grads.ln2 = ln2_grads;
    let dh = upstream.add(&dh_ffn);

    // Attention branch.
    let (dn1, mha_grads) = multi_head_backward_cached(&cache.n1, &params.mha, &cache.mha, &dh)?;
    grads.mha = mha_grads;
    let (dx_ln1, ln1_grads) = layer_norm_backward(x, &params.ln1, &dn1);
    grads.ln1 = ln1_grads;
    let dx = dh.add(&dx_ln1);

    Ok((dx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_rel_err};

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
    }

    fn weighted_sum(m: &Matrix, t: &Matrix) -> f64 {
        m.data().iter().zip(t.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn single_key_attention_passes_value_through() {
        let inp = AttentionInput::new(
            Matrix::from_vec(1, 3, vec![0.2, -1.0, 0.5]).unwrap(),
            Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap(),
            Matrix::from_vec(1, 2, vec![7.0, -4.0]).unwrap(),
        )
        .unwrap();
        let (out, weights) = scaled_dot_attention(&inp);
        assert_eq!(weights.data(), &[1.0]);
        assert_eq!(out.data(), &[7.0, -4.0]);
    }

    #[test]
    fn zero_query_mixes_values_uniformly() {
        let inp = AttentionInput::new(
            Matrix::zeros(2, 3),
            Matrix::from_vec(4, 3, (0..12).map(|i| i as f64).collect()).unwrap(),
            Matrix::from_vec(4, 2, vec![1.0, 0.0, 3.0, 2.0, 5.0, 4.0, 7.0, 6.0]).unwrap(),
        )
        .unwrap();
        let (out, weights) = scaled_dot_attention(&inp);
        for r in 0..2 {
            for &w in weights.row(r) {
                assert!((w - 0.25).abs() < 1e-15);
            }
            assert!((out[(r, 0)] - 4.0).abs() < 1e-12);
            assert!((out[(r, 1)] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_are_row_stochastic() {
        let mut rng = Rng::new(6);
        for _ in 0..20 {
            let (nq, n, dk, dv) = (
                1 + rng.below(4),
                1 + rng.below(5),
                1 + rng.below(4),
                1 + rng.below(3),
            );
            let inp = AttentionInput::new(
                random_matrix(nq, dk, &mut rng),
                random_matrix(n, dk, &mut rng),
                random_matrix(n, dv, &mut rng),
            )
            .unwrap();
            let (_, weights) = scaled_dot_attention(&inp);
            for r in 0..weights.rows() {
                let sum: f64 = weights.row(r).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = Rng::new(12);
        let inp = AttentionInput::new(
            random_matrix(3, 5, &mut rng),
            random_matrix(4, 5, &mut rng),
            random_matrix(4, 2, &mut rng),
        )
        .unwrap();
        let target = random_matrix(3, 2, &mut rng);
        let grads = attention_backward(&inp, &target).unwrap();

        let h = 1e-5;
        let fd_q = finite_diff_grad(
            |q| {
                let probe = AttentionInput::new(q.clone(), inp.k.clone(), inp.v.clone()).unwrap();
                weighted_sum(&scaled_dot_attention(&probe).0, &target)
            },
            &inp.q,
            h,
        )
        .unwrap();
        let fd_k = finite_diff_grad(
            |k| {
                let probe = AttentionInput::new(inp.q.clone(), k.clone(), inp.v.clone()).unwrap();
                weighted_sum(&scaled_dot_attention(&probe).0, &target)
            },
            &inp.k,
            h,
        )
        .unwrap();
        let fd_v = finite_diff_grad(
            |v| {
                let probe = AttentionInput::new(inp.q.clone(), inp.k.clone(), v.clone()).unwrap();
                weighted_sum(&scaled_dot_attention(&probe).0, &target)
            },
            &inp.v,
            h,
        )
        .unwrap();

        assert!(max_rel_err(&grads.dq, &fd_q) < 1e-4, "dq error {}", max_rel_err(&grads.dq, &fd_q));
        assert!(max_rel_err(&grads.dk, &fd_k) < 1e-4, "dk error {}", max_rel_err(&grads.dk, &fd_k));
        assert!(max_rel_err(&grads.dv, &fd_v) < 1e-4, "dv error {}", max_rel_err(&grads.dv, &fd_v));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(3);
        let inp = AttentionInput::new(
            random_matrix(2, 3, &mut rng),
            random_matrix(4, 3, &mut rng),
            random_matrix(4, 2, &mut rng),
        )
        .unwrap();
        let grads = attention_backward(&inp, &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(grads.dq, Matrix::zeros(2, 3));
        assert_eq!(grads.dk, Matrix::zeros(4, 3));
        assert_eq!(grads.dv, Matrix::zeros(4, 2));
    }

    #[test]
    fn single_key_backward_routes_everything_to_value() {
        let mut rng = Rng::new(8);
        let inp = AttentionInput::new(
            random_matrix(1, 3, &mut rng),
            random_matrix(1, 3, &mut rng),
            random_matrix(1, 2, &mut rng),
        )
        .unwrap();
        let upstream = random_matrix(1, 2, &mut rng);
        let grads = attention_backward(&inp, &upstream).unwrap();
        assert_eq!(grads.dv, upstream);
        assert_eq!(grads.dq, Matrix::zeros(1, 3));
        assert_eq!(grads.dk, Matrix::zeros(1, 3));
    }

    #[test]
    fn backward_rejects_mismatched_upstream() {
        let mut rng = Rng::new(4);
        let inp = AttentionInput::new(
            random_matrix(2, 3, &mut rng),
            random_matrix(4, 3, &mut rng),
            random_matrix(4, 2, &mut rng),
        )
        .unwrap();
        assert!(attention_backward(&inp, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn single_head_identity_projections_reduce_to_plain_attention() {
        let mut rng = Rng::new(15);
        let d = 4;
        let x = random_matrix(3, d, &mut rng);
        let params = MultiHeadParams::new(
            vec![Matrix::identity(d)],
            vec![Matrix::identity(d)],
            vec![Matrix::identity(d)],
            Matrix::identity(d),
        )
        .unwrap();
        let mha = multi_head_attention(&x, &params).unwrap();
        let inp = AttentionInput::new(x.clone(), x.clone(), x).unwrap();
        let (plain, _) = scaled_dot_attention(&inp);
        assert!(mha.max_abs_diff(&plain) <= 1e-12);
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let mut rng = Rng::new(44);
        let x = random_matrix(5, 8, &mut rng);
        let params = MultiHeadParams::init(8, 2, &mut rng).unwrap();
        let out = multi_head_attention(&x, &params).unwrap();

        let perm = [3usize, 0, 4, 1, 2];
        let xp = Matrix::from_fn(5, 8, |i, j| x[(perm[i], j)]);
        let outp = multi_head_attention(&xp, &params).unwrap();
        let expected = Matrix::from_fn(5, 8, |i, j| out[(perm[i], j)]);
        assert!(outp.max_abs_diff(&expected) <= 1e-12);
    }

    #[test]
    fn multi_head_input_gradient_matches_finite_differences() {
        let mut rng = Rng::new(27);
        let x = random_matrix(3, 8, &mut rng);
        let params = MultiHeadParams::init(8, 2, &mut rng).unwrap();
        let target = random_matrix(3, 8, &mut rng);
        let (dx, _) = multi_head_backward(&x, &params, &target).unwrap();
        let fd = finite_diff_grad(
            |probe| weighted_sum(&multi_head_attention(probe, &params).unwrap(), &target),
            &x,
            1e-5,
        )
        .unwrap();
        let err = max_rel_err(&dx, &fd);
        assert!(err < 1e-4, "dx error {err}");
    }

    #[test]
    fn multi_head_projection_gradients_match_finite_differences() {
        let mut rng = Rng::new(28);
        let x = random_matrix(3, 6, &mut rng);
        let params = MultiHeadParams::init(6, 2, &mut rng).unwrap();
        let target = random_matrix(3, 6, &mut rng);
        let (_, grads) = multi_head_backward(&x, &params, &target).unwrap();

        let fd_wq0 = finite_diff_grad(
            |probe| {
                let mut p = params.clone();
                p.wq[0] = probe.clone();
                weighted_sum(&multi_head_attention(&x, &p).unwrap(), &target)
            },
            &params.wq[0],
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(&grads.wq[0], &fd_wq0) < 1e-4);

        let fd_wo = finite_diff_grad(
            |probe| {
                let mut p = params.clone();
                p.wo = probe.clone();
                weighted_sum(&multi_head_attention(&x, &p).unwrap(), &target)
            },
            &params.wo,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(&grads.wo, &fd_wo) < 1e-4);
    }

    #[test]
    fn head_count_must_divide_model_width() {
        let mut rng = Rng::new(1);
        let err = MultiHeadParams::init(8, 3, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn patch_shapes_for_small_images() {
        let img = Tensor3::zeros(4, 4, 1);
        let grid = extract_patches(&img, 2).unwrap();
        assert_eq!(grid.patches.shape(), (4, 4));

        let img = Tensor3::zeros(6, 6, 3);
        let grid = extract_patches(&img, 2).unwrap();
        assert_eq!(grid.patches.shape(), (9, 12));
    }

    #[test]
    fn constant_image_gives_identical_patch_rows() {
        let img = Tensor3::from_vec(4, 4, 2, vec![0.5; 32]).unwrap();
        let grid = extract_patches(&img, 2).unwrap();
        for p in 1..grid.patches.rows() {
            assert_eq!(grid.patches.row(p), grid.patches.row(0));
        }
    }

    #[test]
    fn non_divisible_patch_size_is_rejected_with_dimensions() {
        let img = Tensor3::zeros(5, 4, 1);
        let err = extract_patches(&img, 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('5') && msg.contains('4') && msg.contains('2'), "message: {msg}");
    }

    #[test]
    fn patch_round_trip_is_bit_exact() {
        let mut rng = Rng::new(64);
        let data: Vec<f64> = (0..6 * 4 * 3).map(|_| rng.next_f64()).collect();
        let img = Tensor3::from_vec(6, 4, 3, data).unwrap();
        let grid = extract_patches(&img, 2).unwrap();
        let back = reassemble_patches(&grid).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn patch_embed_projects_and_adds_positions() {
        let img = Tensor3::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // One 2x2 patch of raw dimension 4 projected to width 2.
        let embed = Matrix::from_vec(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let pos = Matrix::from_vec(1, 2, vec![10.0, 20.0]).unwrap();
        let out = patch_embed(&img, 2, &embed, &pos).unwrap();
        assert_eq!(out.data(), &[1.0 + 3.0 + 10.0, 2.0 + 4.0 + 20.0]);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = Rng::new(91);
        let x = random_matrix(3, 5, &mut rng);
        let mut p = LayerNormParams::identity(5);
        p.gain = random_matrix(1, 5, &mut rng).map(|v| v + 1.5);
        p.bias = random_matrix(1, 5, &mut rng);
        let target = random_matrix(3, 5, &mut rng);
        let (dx, grads) = layer_norm_backward(&x, &p, &target);

        let fd_x = finite_diff_grad(|probe| weighted_sum(&layer_norm(probe, &p), &target), &x, 1e-5).unwrap();
        assert!(max_rel_err(&dx, &fd_x) < 1e-4);

        let fd_gain = finite_diff_grad(
            |probe| {
                let mut pp = p.clone();
                pp.gain = probe.clone();
                weighted_sum(&layer_norm(&x, &pp), &target)
            },
            &p.gain,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(&grads.gain, &fd_gain) < 1e-4);
    }

    #[test]
    fn zeroed_mixing_weights_make_the_block_an_identity() {
        let mut rng = Rng::new(40);
        let mut params = TransformerBlockParams::init(8, 2, 16, &mut rng).unwrap();
        for m in params.mha.wv.iter_mut() {
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        params.mha.wo = Matrix::zeros(8, 8);
        params.ffn_w1 = Matrix::zeros(8, 16);
        params.ffn_w2 = Matrix::zeros(16, 8);
        let x = random_matrix(4, 8, &mut rng);
        let out = transformer_block(&x, &params).unwrap();
        assert!(out.max_abs_diff(&x) <= 1e-15);
    }

    #[test]
    fn block_output_shape_equals_input_shape() {
        let mut rng = Rng::new(41);
        for n in [1usize, 3, 7] {
            let params = TransformerBlockParams::init(8, 4, 12, &mut rng).unwrap();
            let x = random_matrix(n, 8, &mut rng);
            let out = transformer_block(&x, &params).unwrap();
            assert_eq!(out.shape(), x.shape());
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = Rng::new(52);
        let params = TransformerBlockParams::init(8, 2, 12, &mut rng).unwrap();
        let x = random_matrix(4, 8, &mut rng);
        let target = random_matrix(4, 8, &mut rng);
        let (dx, grads) = transformer_block_backward(&x, &params, &target).unwrap();

        let fd_x = finite_diff_grad(
            |probe| weighted_sum(&transformer_block(probe, &params).unwrap(), &target),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(&dx, &fd_x) < 1e-4, "dx error {}", max_rel_err(&dx, &fd_x));

        let fd_w1 = finite_diff_grad(
            |probe| {
                let mut p = params.clone();
                p.ffn_w1 = probe.clone();
                weighted_sum(&transformer_block(&x, &p).unwrap(), &target)
            },
            &params.ffn_w1,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(&grads.ffn_w1, &fd_w1) < 1e-4);

        let fd_ln1_gain = finite_diff_grad(
            |probe| {
                let mut p = params.clone();
                p.ln1.gain = probe.clone();
                weighted_sum(&transformer_block(&x, &p).unwrap(), &target)
            },
            &params.ln1.gain,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(&grads.ln1.gain, &fd_ln1_gain) < 1e-4);
    }
}
