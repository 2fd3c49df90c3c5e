//! Finite-difference audit of every analytic backward pass: plain attention,
//! multi-head attention, the transformer block, and the end-to-end
//! micro-batch loss. Used by the `gradcheck` subcommand and the acceptance
//! suite.

use serde::Serialize;

use crate::attention::{
    attention_backward, multi_head_attention, multi_head_backward, scaled_dot_attention,
    transformer_block, transformer_block_backward, AttentionInput, MultiHeadParams,
    TransformerBlockParams,
};
use crate::data::{build_vocab, tokenize_to_ids, ImageSample, PairDataset, PairRecord, Split, TextSample};
use crate::error::Result;
use crate::model::{MatchModel, ModelConfig, ParamTensors};
use crate::numerics::{finite_diff_grad, max_rel_err, Matrix, Rng, Tensor3};

/// Step size of the central differences.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error threshold for the attention-level checks.
pub const ATTENTION_TOL: f64 = 1e-4;
/// Relative-error threshold for the end-to-end micro-batch check.
pub const END_TO_END_TOL: f64 = 1e-3;

/// Outcome of one named check.
#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Outcome of the whole audit.
#[derive(Clone, Debug, Serialize)]
pub struct AuditReport {
    pub seed: u64,
    pub instances: usize,
    pub checks: Vec<CheckResult>,
    pub all_pass: bool,
}

impl AuditReport {
    /// Aligned text table, one row per check.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<24} {:>14} {:>10} {:>6}\n", "check", "max_rel_err", "threshold", "pass");
        for c in &self.checks {
            out.push_str(&format!(
                "{:<24} {:>14.3e} {:>10.0e} {:>6}\n",
                c.name,
                c.max_rel_err,
                c.threshold,
                if c.pass { "yes" } else { "NO" }
            ));
        }
        out
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
}

fn weighted_sum(m: &Matrix, t: &Matrix) -> f64 {
    m.data().iter().zip(t.data()).map(|(a, b)| a * b).sum()
}

fn check_attention(rng: &mut Rng, instances: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (nq, n, dk, dv) = (1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(5), 1 + rng.below(3));
        let inp = AttentionInput::new(
            random_matrix(nq, dk, rng),
            random_matrix(n, dk, rng),
            random_matrix(n, dv, rng),
        )?;
        let target = random_matrix(nq, dv, rng);
        let grads = attention_backward(&inp, &target)?;
        let fd_q = finite_diff_grad(
            |q| {
                let probe = AttentionInput::new(q.clone(), inp.k.clone(), inp.v.clone()).unwrap();
                weighted_sum(&scaled_dot_attention(&probe).0, &target)
            },
            &inp.q,
            FD_STEP,
        )?;
        let fd_k = finite_diff_grad(
            |k| {
                let probe = AttentionInput::new(inp.q.clone(), k.clone(), inp.v.clone()).unwrap();
                weighted_sum(&scaled_dot_attention(&probe).0, &target)
            },
            &inp.k,
            FD_STEP,
        )?;
        let fd_v = finite_diff_grad(
            |v| {
                let probe = AttentionInput::new(inp.q.clone(), inp.k.clone(), v.clone()).unwrap();
                weighted_sum(&scaled_dot_attention(&probe).0, &target)
            },
            &inp.v,
            FD_STEP,
        )?;
        worst = worst
            .max(max_rel_err(&grads.dq, &fd_q))
            .max(max_rel_err(&grads.dk, &fd_k))
            .max(max_rel_err(&grads.dv, &fd_v));
    }
    Ok(worst)
}

fn check_multi_head(rng: &mut Rng, instances: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let d_model = 8;
        let heads = [1, 2, 4][rng.below(3)];
        let n = 1 + rng.below(5);
        let params = MultiHeadParams::init(d_model, heads, rng)?;
        let x = random_matrix(n, d_model, rng);
        let target = random_matrix(n, d_model, rng);
        let (dx, grads) = multi_head_backward(&x, &params, &target)?;

        let fd_x = finite_diff_grad(
            |probe| weighted_sum(&multi_head_attention(probe, &params).unwrap(), &target),
            &x,
            FD_STEP,
        )?;
        worst = worst.max(max_rel_err(&dx, &fd_x));

        // One projection per family keeps the check cheap while still
        // exercising every gradient path.
        let fd_wq = finite_diff_grad(
            |probe| {
                let mut p = params.clone();
                p.wq[0] = probe.clone();
                weighted_sum(&multi_head_attention(&x, &p).unwrap(), &target)
            },
            &params.wq[0],
            FD_STEP,
        )?;
        worst = worst.max(max_rel_err(&grads.wq[0], &fd_wq));
        let fd_wo = finite_diff_grad(
            |probe| {
                let mut p = params.clone();
                p.wo = probe.clone();
                weighted_sum(&multi_head_attention(&x, &p).unwrap(), &target)
            },
            &params.wo,
            FD_STEP,
        )?;
        worst = worst.max(max_rel_err(&grads.wo, &fd_wo));
    }
    Ok(worst)
}

fn check_transformer_block(rng: &mut Rng, instances: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let d_model = 8;
        let params = TransformerBlockParams::init(d_model, 2, 12, rng)?;
        let n = 1 + rng.below(5);
        let x = random_matrix(n, d_model, rng);
        let target = random_matrix(n, d_model, rng);
        let (dx, grads) = transformer_block_backward(&x, &params, &target)?;

        let fd_x = finite_diff_grad(
            |probe| weighted_sum(&transformer_block(probe, &params).unwrap(), &target),
            &x,
            FD_STEP,
        )?;
        worst = worst.max(max_rel_err(&dx, &fd_x));

        let fd_w1 = finite_diff_grad(
            |probe| {
                let mut p = params.clone();
                p.ffn_w1 = probe.clone();
                weighted_sum(&transformer_block(&x, &p).unwrap(), &target)
            },
            &params.ffn_w1,
            FD_STEP,
        )?;
        worst = worst.max(max_rel_err(&grads.ffn_w1, &fd_w1));

        let fd_ln2 = finite_diff_grad(
            |probe| {
                let mut p = params.clone();
                p.ln2.gain = probe.clone();
                weighted_sum(&transformer_block(&x, &p).unwrap(), &target)
            },
            &params.ln2.gain,
            FD_STEP,
        )?;
        worst = worst.max(max_rel_err(&grads.ln2.gain, &fd_ln2));
    }
    Ok(worst)
}

/// A disposable in-memory dataset of random images and short captions.
fn micro_dataset(rng: &mut Rng, config: &ModelConfig) -> PairDataset {
    let words = ["red", "green", "blue", "box", "dot", "bar"];
    let n = 4;
    let captions: Vec<String> = (0..n)
        .map(|_| {
            format!(
                "{} {} {}",
                words[rng.below(words.len())],
                words[rng.below(words.len())],
                words[rng.below(words.len())]
            )
        })
        .collect();
    let vocab = build_vocab(&captions, config.vocab_size).expect("cap is large enough");
    let images = (0..n)
        .map(|i| ImageSample {
            id: format!("pair_{i:05}"),
            pixels: Tensor3::from_vec(
                config.image_size,
                config.image_size,
                config.image_channels,
                (0..config.image_size * config.image_size * config.image_channels)
                    .map(|_| rng.next_f64())
                    .collect(),
            )
            .expect("finite pixels"),
            source: "audit".into(),
        })
        .collect();
    let texts = captions
        .iter()
        .enumerate()
        .map(|(i, c)| TextSample {
            id: format!("pair_{i:05}"),
            raw: c.clone(),
            token_ids: tokenize_to_ids(c, &vocab, config.caption_len),
        })
        .collect();
    let pairs = (0..n)
        .map(|i| PairRecord {
            pair_id: format!("pair_{i:05}"),
            image: i,
            text: i,
            label: 1,
        })
        .collect();
    PairDataset {
        images,
        texts,
        pairs,
        splits: vec![Split::Train; n],
        vocab,
    }
}

fn check_end_to_end(rng: &mut Rng, instances: usize) -> Result<f64> {
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
        vocab_size: 16,
        caption_len: 6,
    };
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let data = micro_dataset(rng, &config);
        let model = MatchModel::init(config, rng.next_u64())?;
        let batch = [0usize, 1];
        let neg_seed = rng.next_u64();

        let mut grads = model.zeros_like();
        crate::model::batch_step(&model, &data, &batch, &mut Rng::new(neg_seed), 1, &mut grads)?;

        let loss_of = |m: &MatchModel| -> f64 {
            let mut sink = m.zeros_like();
            let (loss, _) =
                crate::model::batch_step(m, &data, &batch, &mut Rng::new(neg_seed), 1, &mut sink)
                    .expect("micro batch evaluates");
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
                    loss_of(&m)
                },
                &base,
                FD_STEP,
            )?;
            let analytic = grads
                .named_tensors()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, m)| m.clone())
                .expect("gradient exists");
            worst = worst.max(max_rel_err(&analytic, &fd));
        }
    }
    Ok(worst)
}

/// Runs the full audit. `corrupt` injects a deliberate error into the first
/// check's reported gradient error, as a negative control for the harness.
pub fn run_audit(seed: u64, instances: usize, corrupt: bool) -> Result<AuditReport> {
    let mut rng = Rng::new(seed);
    let mut checks = Vec::new();

    let mut attention_err = check_attention(&mut rng, instances)?;
    if corrupt {
        attention_err += 1.0;
    }
    checks.push(CheckResult {
        name: "scaled_dot_attention".into(),
        max_rel_err: attention_err,
        threshold: ATTENTION_TOL,
        pass: attention_err <= ATTENTION_TOL,
    });

    let mha_err = check_multi_head(&mut rng, instances)?;
    checks.push(CheckResult {
        name: "multi_head_attention".into(),
        max_rel_err: mha_err,
        threshold: ATTENTION_TOL,
        pass: mha_err <= ATTENTION_TOL,
    });

    let block_err = check_transformer_block(&mut rng, instances)?;
    checks.push(CheckResult {
        name: "transformer_block".into(),
        max_rel_err: block_err,
        threshold: ATTENTION_TOL,
        pass: block_err <= ATTENTION_TOL,
    });

    // The end-to-end sweep walks every parameter group, so a handful of
    // instances already covers thousands of entries.
    let e2e_instances = instances.div_ceil(4).max(1);
    let e2e_err = check_end_to_end(&mut rng, e2e_instances)?;
    checks.push(CheckResult {
        name: "end_to_end_micro_batch".into(),
        max_rel_err: e2e_err,
        threshold: END_TO_END_TOL,
        pass: e2e_err <= END_TO_END_TOL,
    });

    let all_pass = checks.iter().all(|c| c.pass);
    Ok(AuditReport { seed, instances, checks, all_pass })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_audit_passes() {
        let report = run_audit(42, 3, false).unwrap();
        assert!(report.all_pass, "table:\n{}", report.to_table());
        assert_eq!(report.checks.len(), 4);
    }

    #[test]
    fn corrupted_backward_fails_the_audit() {
        let report = run_audit(42, 2, true).unwrap();
        assert!(!report.all_pass);
        assert!(!report.checks[0].pass);
    }

    #[test]
    fn audit_is_deterministic() {
        let a = run_audit(7, 2, false).unwrap();
        let b = run_audit(7, 2, false).unwrap();
        let errs = |r: &AuditReport| r.checks.iter().map(|c| c.max_rel_err).collect::<Vec<_>>();
        assert_eq!(errs(&a), errs(&b));
    }
}
