//! LM span-denoising loss, symmetric in-batch contrastive loss and their
//! weighted sum.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GurError, Result};
use crate::masking::{CorruptedExample, TokenId};
use crate::model::{Gur, CLS, PAD};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            temperature: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(GurError::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(GurError::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Which terms of `lm + alpha * cl` are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Full,
    /// Contrastive term only.
    ClOnly,
    /// LM term only.
    LmOnly,
}

impl Mode {
    pub fn uses_lm(self) -> bool {
        matches!(self, Mode::Full | Mode::LmOnly)
    }

    pub fn uses_cl(self) -> bool {
        matches!(self, Mode::Full | Mode::ClOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::ClOnly => "cl-only",
            Mode::LmOnly => "lm-only",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(Mode::Full),
            "cl-only" => Ok(Mode::ClOnly),
            "lm-only" => Ok(Mode::LmOnly),
            _ => Err(format!("unknown mode {s:?}; expected full, cl-only or lm-only")),
        }
    }
}

/// `lm + alpha * cl` with both terms checked for finiteness.
pub fn total_loss(lm: f64, cl: f64, weights: &LossWeights) -> Result<f64> {
    if !lm.is_finite() {
        return Err(GurError::Numeric(format!("lm_loss = {lm}")));
    }
    if !cl.is_finite() {
        return Err(GurError::Numeric(format!("cl_loss = {cl}")));
    }
    Ok(lm + weights.alpha * cl)
}

/// Symmetric InfoNCE over `S = a * b^T / tau` with positives on the
/// diagonal. Rows of `a` and `b` must be unit-norm.
pub fn cl_loss_graph<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, tau: f64) -> Result<Var> {
    let (n, _) = g.value(a).dims2()?;
    if n < 2 {
        return Err(GurError::invalid(format!("contrastive loss needs N >= 2, got {n}")));
    }
    if !(tau > 0.0) {
        return Err(GurError::invalid(format!("temperature must be > 0, got {tau}")));
    }
    let s = g.matmul_t(a, b)?;
    let s = g.scale(s, 1.0 / tau)?;
    let targets: Vec<u32> = (0..n as u32).collect();
    let rows = g.cross_entropy(s, &targets, None)?;
    let st = g.transpose(s)?;
    let cols = g.cross_entropy(st, &targets, None)?;
    let both = g.add(rows, cols)?;
    g.scale(both, 0.5)
}

/// Loss value for explicit embedding matrices.
pub fn cl_loss(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(GurError::invalid(format!("{} vs {} embeddings", a.len(), b.len())));
    }
    let dim = a[0].len();
    let to_tensor = |v: &[Vec<f64>]| -> Result<Tensor<f64>> {
        if v.iter().any(|r| r.len() != dim) {
            return Err(GurError::invalid("embeddings differ in length"));
        }
        Tensor::new(vec![v.len(), dim], v.concat())
    };
    let mut g = Graph::inference();
    let (ta, tb) = (g.constant(to_tensor(a)?), g.constant(to_tensor(b)?));
    let l = cl_loss_graph(&mut g, ta, tb, tau)?;
    Ok(g.value(l).item())
}

/// One training batch: corrupted LM examples and tokenized sentence pairs
/// (each side already starting with `[CLS]`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainBatch {
    pub lm_examples: Vec<CorruptedExample>,
    pub pairs: Vec<(Vec<TokenId>, Vec<TokenId>)>,
}

/// Teacher-forcing inputs: decoder prefix `[PAD] + target[..n-1]`.
fn decoder_prefix(target: &[TokenId]) -> Vec<TokenId> {
    let mut p = Vec::with_capacity(target.len());
    p.push(PAD);
    p.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    p
}

/// Mean cross-entropy of the decoder over every non-PAD target token.
pub fn lm_loss_graph<T: Scalar>(model: &Gur<T>, g: &mut Graph<T>, examples: &[CorruptedExample]) -> Result<Var> {
    if examples.is_empty() {
        return Err(GurError::invalid("lm_loss needs at least one example"));
    }
    let enc_inputs: Vec<Vec<TokenId>> = examples
        .iter()
        .map(|e| {
            let mut v = Vec::with_capacity(e.encoder_input.len() + 1);
            v.push(CLS);
            v.extend_from_slice(&e.encoder_input);
            v
        })
        .collect();
    if examples.iter().all(|e| e.decoder_target.iter().all(|&t| t == PAD)) {
        return Err(GurError::invalid("lm_loss: every target token is PAD"));
    }
    let prefixes: Vec<Vec<TokenId>> = examples.iter().map(|e| decoder_prefix(&e.decoder_target)).collect();
    let enc_refs: Vec<&[TokenId]> = enc_inputs.iter().map(Vec::as_slice).collect();
    let pre_refs: Vec<&[TokenId]> = prefixes.iter().map(Vec::as_slice).collect();
    let enc = model.encode_batch(g, &enc_refs)?;
    let logits = model.decode_batch(g, &enc, &pre_refs)?;
    let max_len = prefixes.iter().map(Vec::len).max().unwrap_or(0);
    let mut targets = Vec::with_capacity(examples.len() * max_len);
    for e in examples {
        targets.extend_from_slice(&e.decoder_target);
        targets.extend(std::iter::repeat_n(PAD, max_len - e.decoder_target.len()));
    }
    g.cross_entropy(logits, &targets, Some(PAD))
}

pub fn lm_loss<T: Scalar>(model: &Gur<T>, examples: &[CorruptedExample]) -> Result<f64> {
    let mut g = Graph::inference();
    let l = lm_loss_graph(model, &mut g, examples)?;
    Ok(g.value(l).item().to_f64().unwrap_or(f64::NAN))
}

/// Contrastive loss of a batch of tokenized pairs through the encoder and
/// projection head. Both sides share one encoder pass.
pub fn pair_cl_loss_graph<T: Scalar>(
    model: &Gur<T>,
    g: &mut Graph<T>,
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    tau: f64,
) -> Result<Var> {
    let n = pairs.len();
    let seqs: Vec<&[TokenId]> = pairs
        .iter()
        .map(|(a, _)| a.as_slice())
        .chain(pairs.iter().map(|(_, b)| b.as_slice()))
        .collect();
    let enc = model.encode_batch(g, &seqs)?;
    let h = model.project(g, &enc)?;
    let a = g.select_rows(h, &(0..n).collect::<Vec<_>>())?;
    let b = g.select_rows(h, &(n..2 * n).collect::<Vec<_>>())?;
    cl_loss_graph(g, a, b, tau)
}

#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub lm: Option<Var>,
    pub cl: Option<Var>,
    pub total: Var,
}

/// Builds the mode's terms for `batch` and combines them.
pub fn batch_loss_graph<T: Scalar>(
    model: &Gur<T>,
    g: &mut Graph<T>,
    batch: &TrainBatch,
    weights: &LossWeights,
    mode: Mode,
) -> Result<BatchLoss> {
    let lm = if mode.uses_lm() {
        Some(lm_loss_graph(model, g, &batch.lm_examples)?)
    } else {
        None
    };
    let cl = if mode.uses_cl() {
        Some(pair_cl_loss_graph(model, g, &batch.pairs, weights.temperature)?)
    } else {
        None
    };
    let total = match (lm, cl) {
        (Some(l), Some(c)) => {
            let c = g.scale(c, weights.alpha)?;
            g.add(l, c)?
        }
        (Some(l), None) => l,
        (None, Some(c)) => g.scale(c, weights.alpha)?,
        (None, None) => unreachable!("every mode has a term"),
    };
    Ok(BatchLoss { lm, cl, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{corrupt, sample_layout, MaskingConfig};
    use crate::model::{ModelConfig, Vocab, DEFAULT_SENTINELS, EOS};
    use crate::tensor::gradcheck::check_gradients;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn total_loss_examples() {
        let w = |alpha| LossWeights {
            alpha,
            temperature: 0.1,
        };
        assert_eq!(total_loss(2.0, 3.0, &w(1.0)).unwrap(), 5.0);
        assert_eq!(total_loss(2.0, 3.0, &w(0.0)).unwrap(), 2.0);
        assert_eq!(total_loss(2.0, 3.0, &w(0.5)).unwrap(), 3.5);
        let err = total_loss(2.0, f64::NAN, &w(1.0)).unwrap_err().to_string();
        assert!(err.contains("cl_loss"), "{err}");
        let err = total_loss(f64::INFINITY, 1.0, &w(1.0)).unwrap_err().to_string();
        assert!(err.contains("lm_loss"), "{err}");
    }

    #[test]
    fn cl_uniform_is_ln_n() {
        for n in [2usize, 3, 8] {
            let e: Vec<Vec<f64>> = vec![unit(vec![1.0, 2.0, 3.0]); n];
            let l = cl_loss(&e, &e, 0.1).unwrap();
            assert!((l - (n as f64).ln()).abs() < 1e-9, "{n}: {l}");
        }
    }

    #[test]
    fn cl_identity_two() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let l = cl_loss(&e, &e, 0.1).unwrap();
        let oracle = -(10f64.exp() / (10f64.exp() + 1.0)).ln();
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 4.54e-5).abs() < 1e-7);
        assert!(cl_loss(&e[..1], &e[..1], 0.1).is_err());
    }

    proptest! {
        #[test]
        fn cl_permutation_invariant(seed in 0u64..1000, perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::Rng;
            let mk = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..5).map(|_| unit((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect()
            };
            let (a, b) = (mk(&mut rng), mk(&mut rng));
            let pa: Vec<Vec<f64>> = perm.iter().map(|&i| a[i].clone()).collect();
            let pb: Vec<Vec<f64>> = perm.iter().map(|&i| b[i].clone()).collect();
            let l = cl_loss(&a, &b, 0.1).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!((l - cl_loss(&pa, &pb, 0.1).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn row_argmax_is_temperature_invariant() {
        let a: Vec<Vec<f64>> = (0..4).map(|i| unit(vec![1.0, i as f64, 0.5])).collect();
        let b: Vec<Vec<f64>> = (0..4).map(|i| unit(vec![i as f64, 1.0, -0.5])).collect();
        let argmax = |tau: f64| -> Vec<usize> {
            a.iter()
                .map(|r| {
                    let s: Vec<f64> = b
                        .iter()
                        .map(|c| r.iter().zip(c).map(|(x, y)| x * y).sum::<f64>() / tau)
                        .collect();
                    crate::model::argmax(&s)
                })
                .collect()
        };
        assert_eq!(argmax(0.1), argmax(3.0));
    }

    fn tiny_model<T: Scalar>() -> Gur<T> {
        let vocab = Vocab::build(["abcdefgh ."], DEFAULT_SENTINELS);
        let cfg = ModelConfig {
            model_dim: 8,
            num_heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_dim: 12,
            vector_dim: 4,
            max_seq: 16,
            ..ModelConfig::default()
        };
        Gur::new(cfg, vocab, 7).unwrap()
    }

    fn tiny_batch<T: Scalar>(model: &Gur<T>) -> TrainBatch {
        let v = model.vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let texts = ["abc def", "cab fed.", "head bag", "bad egg."];
        let masking = MaskingConfig::default();
        let dist = masking.distribution().unwrap();
        let lm_examples = texts
            .iter()
            .map(|t| {
                let toks = v.tokenize(t);
                let layout = sample_layout(toks.len(), 0.3, &dist, &mut rng).unwrap();
                corrupt(&toks, &layout, v.sentinels(), EOS).unwrap()
            })
            .collect();
        let pairs = [("abc def", "abc fed"), ("head bag", "head egg"), ("bad", "bad.")]
            .iter()
            .map(|(a, b)| (model.encoder_input(a), model.encoder_input(b)))
            .collect();
        TrainBatch { lm_examples, pairs }
    }

    #[test]
    fn untrained_lm_loss_near_ln_v() {
        let model = tiny_model::<f64>();
        let batch = tiny_batch(&model);
        let l = lm_loss(&model, &batch.lm_examples).unwrap();
        let ln_v = (model.vocab().len() as f64).ln();
        assert!((l - ln_v).abs() < 0.2, "{l} vs {ln_v}");
    }

    #[test]
    fn all_pad_targets_rejected() {
        let model = tiny_model::<f64>();
        let ex = CorruptedExample {
            encoder_input: vec![5, 6],
            decoder_target: vec![PAD, PAD],
        };
        assert!(lm_loss(&model, &[ex]).is_err());
        assert!(lm_loss(&model, &[]).is_err());
    }

    #[test]
    fn argmax_targets_bound_true_targets() {
        let model = tiny_model::<f64>();
        let batch = tiny_batch(&model);
        let truth = lm_loss(&model, &batch.lm_examples).unwrap();
        let mut g = Graph::inference();
        let pre: Vec<Vec<TokenId>> = batch
            .lm_examples
            .iter()
            .map(|e| decoder_prefix(&e.decoder_target))
            .collect();
        let enc_in: Vec<Vec<TokenId>> = batch
            .lm_examples
            .iter()
            .map(|e| std::iter::once(CLS).chain(e.encoder_input.iter().copied()).collect())
            .collect();
        let er: Vec<&[TokenId]> = enc_in.iter().map(Vec::as_slice).collect();
        let pr: Vec<&[TokenId]> = pre.iter().map(Vec::as_slice).collect();
        let enc = model.encode_batch(&mut g, &er).unwrap();
        let logits = model.decode_batch(&mut g, &enc, &pr).unwrap();
        let t = g.value(logits);
        let max_len = pre.iter().map(Vec::len).max().unwrap();
        let ce = |row: &[f64], k: usize| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m - row[k]
        };
        let (mut with_truth, mut with_argmax, mut n) = (0.0, 0.0, 0.0);
        for (b, e) in batch.lm_examples.iter().enumerate() {
            for (i, &tok) in e.decoder_target.iter().enumerate() {
                let row = t.row(b * max_len + i);
                with_truth += ce(row, tok as usize);
                with_argmax += ce(row, crate::model::argmax(row));
                n += 1.0;
            }
        }
        assert!((with_truth / n - truth).abs() < 1e-12);
        assert!(with_argmax <= with_truth);
    }

    #[test]
    fn full_objective_gradcheck() {
        let model = tiny_model::<f64>();
        let batch = tiny_batch(&model);
        let w = LossWeights::default();
        let inputs: Vec<Tensor<f64>> = model.params().iter().map(|(_, t)| t.clone()).collect();
        let ids: Vec<_> = model.params().ids().collect();
        let r = check_gradients(&inputs, 1e-5, |g, vars| {
            for (&id, &v) in ids.iter().zip(vars) {
                g.bind_param(id, v);
            }
            Ok(batch_loss_graph(&model, g, &batch, &w, Mode::Full)?.total)
        })
        .unwrap();
        assert!(r.checked == model.params().num_scalars());
        assert!(r.max_rel_error < 1e-4, "max rel error {}", r.max_rel_error);
    }
}
