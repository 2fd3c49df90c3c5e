//! Self-describing binary checkpoint container.
//!
//! Layout: magic bytes `MKVT`, format version `u32`, then a sequence of named
//! tensors until end of file. Each tensor is `u16` name length, the name
//! bytes, `u8` rank, one `u32` per dimension, and the row-major `f64`
//! payload. All integers and floats are little-endian. Round-trips are
//! bit-exact.

use std::path::Path;

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, KernelWeights};
use crate::mkl::{MklModel, SvmSolution};
use crate::model::{MatchModel, ModelConfig, ParamTensors};
use crate::numerics::Matrix;

const MAGIC: &[u8; 4] = b"MKVT";
const VERSION: u32 = 1;

/// Everything a saved model carries: parameters, the vocabulary they were
/// trained with, and the optional kernel re-scoring head.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MatchModel,
    pub vocab: Vocab,
    pub mkl_head: Option<MklHead>,
}

/// Trained multiple-kernel re-scoring head over concatenated embeddings.
#[derive(Clone, Debug)]
pub struct MklHead {
    pub model: MklModel,
}

struct RawTensor {
    rank: u8,
    dims: Vec<u32>,
    data: Vec<f64>,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, dims: &[u32], data: &[f64]) {
    let name_bytes = name.as_bytes();
    out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(name_bytes);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn config_values(c: &ModelConfig) -> Vec<f64> {
    vec![
        c.image_size as f64,
        c.image_channels as f64,
        c.patch_size as f64,
        c.conv_channels as f64,
        c.d_model as f64,
        c.heads as f64,
        c.blocks as f64,
        c.ffn_hidden as f64,
        c.d_embed as f64,
        c.vocab_size as f64,
        c.caption_len as f64,
    ]
}

fn config_from_values(v: &[f64]) -> Result<ModelConfig> {
    if v.len() != 11 {
        return Err(Error::Format(format!(
            "meta.config must hold 11 values, found {}",
            v.len()
        )));
    }
    let u = |x: f64| x as usize;
    Ok(ModelConfig {
        image_size: u(v[0]),
        image_channels: u(v[1]),
        patch_size: u(v[2]),
        conv_channels: u(v[3]),
        d_model: u(v[4]),
        heads: u(v[5]),
        blocks: u(v[6]),
        ffn_hidden: u(v[7]),
        d_embed: u(v[8]),
        vocab_size: u(v[9]),
        caption_len: u(v[10]),
    })
}

fn kernel_code(spec: &KernelSpec) -> [f64; 3] {
    match spec {
        KernelSpec::Linear => [0.0, 0.0, 0.0],
        KernelSpec::Rbf { gamma } => [1.0, *gamma, 0.0],
        KernelSpec::Polynomial { degree, coef0 } => [2.0, *degree as f64, *coef0],
        KernelSpec::Cosine => [3.0, 0.0, 0.0],
    }
}

fn kernel_from_code(row: &[f64]) -> Result<KernelSpec> {
    match row[0] as u32 {
        0 => Ok(KernelSpec::Linear),
        1 => KernelSpec::rbf(row[1]),
        2 => KernelSpec::polynomial(row[1] as u32, row[2]),
        3 => Ok(KernelSpec::Cosine),
        other => Err(Error::Format(format!("unknown kernel code {other}"))),
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let cfg = config_values(&ckpt.model.config);
    push_tensor(&mut out, "meta.config", &[cfg.len() as u32], &cfg);

    let vocab_bytes = ckpt.vocab.tokens().join("\n").into_bytes();
    let vocab_f64: Vec<f64> = vocab_bytes.iter().map(|&b| b as f64).collect();
    push_tensor(&mut out, "meta.vocab_utf8", &[vocab_f64.len() as u32], &vocab_f64);

    for (name, tensor) in ckpt.model.named_tensors() {
        push_tensor(
            &mut out,
            &name,
            &[tensor.rows() as u32, tensor.cols() as u32],
            tensor.data(),
        );
    }

    if let Some(head) = &ckpt.mkl_head {
        let m = &head.model;
        let n_sv = m.support_xs.len();
        let dim = m.support_xs.first().map_or(0, Vec::len);
        let flat: Vec<f64> = m.support_xs.iter().flatten().copied().collect();
        push_tensor(&mut out, "mkl.support", &[n_sv as u32, dim as u32], &flat);
        push_tensor(&mut out, "mkl.support_ys", &[n_sv as u32], &m.support_ys);
        push_tensor(&mut out, "mkl.alphas", &[n_sv as u32], &m.support_alphas);
        push_tensor(&mut out, "mkl.beta", &[m.weights.len() as u32], m.weights.beta());
        let bank: Vec<f64> = m.kernel_bank.iter().flat_map(|s| kernel_code(s)).collect();
        push_tensor(&mut out, "mkl.kernel_bank", &[m.kernel_bank.len() as u32, 3], &bank);
        let stats = vec![
            m.solution.bias,
            m.solution.dual_objective,
            m.solution.kkt_violation,
            if m.solution.degenerate { 1.0 } else { 0.0 },
            m.outer_iterations as f64,
            if m.converged { 1.0 } else { 0.0 },
        ];
        push_tensor(&mut out, "mkl.stats", &[stats.len() as u32], &stats);
    }
    out
}

/// Writes a checkpoint file.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: needed {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("length checked")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("length checked")))
    }

    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }
}

fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, RawTensor)>> {
    let mut reader = Reader { bytes, pos: 0 };
    let magic = reader.take(4, "the MKVT magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}, expected MKVT",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = reader.u32("the format version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let mut tensors = Vec::new();
    while !reader.done() {
        let name_len = reader.u16("a tensor name length")? as usize;
        let name = String::from_utf8(reader.take(name_len, "a tensor name")?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = reader.take(1, "a tensor rank")?[0];
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(reader.u32("a tensor dimension")?);
        }
        let count: usize = dims.iter().map(|&d| d as usize).product();
        let raw = reader.take(count * 8, &format!("the payload of tensor {name}"))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunked by 8")))
            .collect();
        tensors.push((name, RawTensor { rank, dims, data }));
    }
    Ok(tensors)
}

/// Reads a checkpoint file back into a model, vocabulary, and optional
/// kernel head.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read checkpoint {}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

/// Decodes checkpoint bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let tensors = decode_tensors(bytes)?;
    let mut map: std::collections::HashMap<String, RawTensor> = tensors.into_iter().collect();

    let config = {
        let raw = map
            .remove("meta.config")
            .ok_or_else(|| Error::Format("checkpoint is missing meta.config".into()))?;
        config_from_values(&raw.data)?
    };
    let vocab = {
        let raw = map
            .remove("meta.vocab_utf8")
            .ok_or_else(|| Error::Format("checkpoint is missing meta.vocab_utf8".into()))?;
        let bytes: Vec<u8> = raw.data.iter().map(|&v| v as u8).collect();
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Format("vocabulary payload is not UTF-8".into()))?;
        Vocab::from_id_order(text.split('\n').map(str::to_string).collect())?
    };

    let mut model = MatchModel::init(config, 0)?;
    for (name, tensor) in model.named_tensors_mut() {
        let raw = map
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
        if raw.rank != 2 || raw.dims.len() != 2 {
            return Err(Error::Format(format!("tensor {name} must have rank 2")));
        }
        let (r, c) = (raw.dims[0] as usize, raw.dims[1] as usize);
        if (r, c) != tensor.shape() {
            return Err(Error::Format(format!(
                "tensor {name} is {r}x{c}, model expects {}x{}",
                tensor.rows(),
                tensor.cols()
            )));
        }
        *tensor = Matrix::from_vec(r, c, raw.data)
            .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
    }

    let mkl_head = if map.contains_key("mkl.support") {
        let need = |map: &mut std::collections::HashMap<String, RawTensor>, key: &str| {
            map.remove(key)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {key}")))
        };
        let support = need(&mut map, "mkl.support")?;
        let ys = need(&mut map, "mkl.support_ys")?;
        let alphas = need(&mut map, "mkl.alphas")?;
        let beta = need(&mut map, "mkl.beta")?;
        let bank = need(&mut map, "mkl.kernel_bank")?;
        let stats = need(&mut map, "mkl.stats")?;
        if stats.data.len() != 6 {
            return Err(Error::Format("mkl.stats must hold 6 values".into()));
        }
        let (n_sv, dim) = (support.dims[0] as usize, support.dims[1] as usize);
        let support_xs: Vec<Vec<f64>> =
            support.data.chunks(dim.max(1)).take(n_sv).map(|c| c.to_vec()).collect();
        let kernel_bank: Vec<KernelSpec> = bank
            .data
            .chunks(3)
            .map(kernel_from_code)
            .collect::<Result<_>>()?;
        let weights = KernelWeights::new(beta.data.clone())?;
        let degenerate = stats.data[3] != 0.0;
        let model = MklModel {
            solution: SvmSolution {
                alpha: alphas.data.clone(),
                bias: stats.data[0],
                dual_objective: stats.data[1],
                kkt_violation: stats.data[2],
                degenerate,
            },
            weights: weights.clone(),
            support_xs,
            support_ys: ys.data,
            support_alphas: alphas.data,
            kernel_bank,
            outer_iterations: stats.data[4] as usize,
            weight_trajectory: vec![weights],
            converged: stats.data[5] != 0.0,
        };
        Some(MklHead { model })
    } else {
        None
    };

    Ok(Checkpoint { model, vocab, mkl_head })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_vocab;

    fn small_checkpoint() -> Checkpoint {
        let config = ModelConfig {
            image_size: 8,
            image_channels: 3,
            patch_size: 2,
            conv_channels: 2,
            d_model: 8,
            heads: 2,
            blocks: 1,
            ffn_hidden: 12,
            d_embed: 4,
            vocab_size: 8,
            caption_len: 6,
        };
        Checkpoint {
            model: MatchModel::init(config, 99).unwrap(),
            vocab: build_vocab(&["a dim square in the upper left"], 8).unwrap(),
            mkl_head: None,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = small_checkpoint();
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.model, ckpt.model);
        assert_eq!(back.vocab, ckpt.vocab);
        assert!(back.mkl_head.is_none());
        // Re-encoding must reproduce the same bytes.
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn round_trip_preserves_the_kernel_head() {
        use crate::mkl::{train_mkl, MklProblem};
        let mut ckpt = small_checkpoint();
        let problem = MklProblem::new(
            vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.8, 0.1], vec![-0.9, 0.2]],
            vec![1.0, -1.0, 1.0, -1.0],
            KernelSpec::default_bank(),
            1.0,
        )
        .unwrap();
        ckpt.mkl_head = Some(MklHead { model: train_mkl(&problem, 1e-4, 20).unwrap() });
        let back = decode_checkpoint(&encode_checkpoint(&ckpt)).unwrap();
        let orig = ckpt.mkl_head.as_ref().unwrap();
        let loaded = back.mkl_head.as_ref().unwrap();
        assert_eq!(loaded.model.support_xs, orig.model.support_xs);
        assert_eq!(loaded.model.weights.beta(), orig.model.weights.beta());
        assert_eq!(loaded.model.solution.bias, orig.model.solution.bias);
        // Decision values agree exactly.
        let x = vec![0.3, -0.2];
        let a = crate::mkl::decision_function(&orig.model, &x).unwrap();
        let b = crate::mkl::decision_function(&loaded.model, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_magic_is_reported() {
        let err = decode_checkpoint(b"NOPE rest of file").unwrap_err();
        assert!(err.to_string().contains("MKVT"), "got: {err}");
    }

    #[test]
    fn truncation_is_reported() {
        let ckpt = small_checkpoint();
        let bytes = encode_checkpoint(&ckpt);
        let err = decode_checkpoint(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "got: {err}");
    }
}
