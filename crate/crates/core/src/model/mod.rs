//! Encoder-decoder transformer over characters with a projection head on the
//! `[CLS]` encoder state.

mod checkpoint;
pub mod vocab;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GurError, Result};
use crate::eval::SentenceEncoder;
use crate::masking::TokenId;
use crate::tensor::{AttentionSpec, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub use checkpoint::{read_manifest, Manifest, ParamEntry, MANIFEST_FILE, PARAMS_FILE};
pub use vocab::{Vocab, CLS, DEFAULT_SENTINELS, EOS, PAD, UNK};

const LN_EPS: f64 = 1e-5;
const INFER_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_dim: usize,
    pub vector_dim: usize,
    pub max_seq: usize,
    pub projection_token: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            model_dim: 64,
            num_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_dim: 256,
            vector_dim: 32,
            max_seq: 160,
            projection_token: "[CLS]".into(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("ff_dim", self.ff_dim),
            ("vector_dim", self.vector_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(GurError::Config(format!("{name} must be positive")));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(GurError::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.max_seq < 2 {
            return Err(GurError::Config("max_seq must be at least 2".into()));
        }
        if self.projection_token != "[CLS]" {
            return Err(GurError::Config(format!(
                "unsupported projection_token {:?}; only [CLS] is available",
                self.projection_token
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Attn {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Debug, Clone)]
struct Ff {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    ff: Ff,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: Norm,
    self_attn: Attn,
    ln2: Norm,
    cross: Attn,
    ln3: Norm,
    ff: Ff,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    enc: Vec<EncLayer>,
    enc_ln: Norm,
    dec: Vec<DecLayer>,
    dec_ln: Norm,
    lm_head: ParamId,
    proj_w1: ParamId,
    proj_b1: ParamId,
    proj_w2: ParamId,
    proj_b2: ParamId,
}

/// Initial values: `Uniform` with the given standard deviation, or a
/// constant.
enum Init {
    Std(f64),
    Const(f64),
}

struct Builder<'a, T: Scalar> {
    store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Std(std) => {
                let a = std * 3f64.sqrt();
                (0..n).map(|_| T::c(self.rng.gen_range(-a..a))).collect()
            }
            Init::Const(c) => vec![T::c(c); n],
        };
        self.store
            .add(name, Tensor::new(shape, data).expect("consistent shape"))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{prefix}.g"), vec![d], Init::Const(1.0)),
            bias: self.add(format!("{prefix}.b"), vec![d], Init::Const(0.0)),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize, out_std: f64) -> Attn {
        let std = 1.0 / (d as f64).sqrt();
        Attn {
            wq: self.add(format!("{prefix}.wq"), vec![d, d], Init::Std(std)),
            wk: self.add(format!("{prefix}.wk"), vec![d, d], Init::Std(std)),
            wv: self.add(format!("{prefix}.wv"), vec![d, d], Init::Std(std)),
            wo: self.add(format!("{prefix}.wo"), vec![d, d], Init::Std(out_std)),
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, f: usize, out_scale: f64) -> Ff {
        Ff {
            w1: self.add(format!("{prefix}.w1"), vec![d, f], Init::Std(1.0 / (d as f64).sqrt())),
            b1: self.add(format!("{prefix}.b1"), vec![f], Init::Const(0.0)),
            w2: self.add(
                format!("{prefix}.w2"),
                vec![f, d],
                Init::Std(out_scale / (f as f64).sqrt()),
            ),
            b2: self.add(format!("{prefix}.b2"), vec![d], Init::Const(0.0)),
        }
    }
}

/// Encoder output for a padded batch.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// `[batch * max_len, model_dim]`.
    pub states: Var,
    pub lens: Vec<usize>,
    pub max_len: usize,
}

#[derive(Debug, Clone)]
pub struct Gur<T: Scalar> {
    config: ModelConfig,
    vocab: Vocab,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> Gur<T> {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.sentinels().count == 0 {
            return Err(GurError::Config("vocabulary has no sentinel tokens".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let (d, f, v) = (config.model_dim, config.ff_dim, vocab.len());
        let depth = (config.encoder_layers + config.decoder_layers) as f64;
        let out_scale = 1.0 / (2.0 * depth).sqrt();
        let out_std = out_scale / (d as f64).sqrt();
        let tok_emb = b.add("tok_emb".into(), vec![v, d], Init::Std(0.5));
        let enc_pos = b.add("enc.pos".into(), vec![config.max_seq, d], Init::Std(0.1));
        let dec_pos = b.add("dec.pos".into(), vec![config.max_seq, d], Init::Std(0.1));
        let enc = (0..config.encoder_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                EncLayer {
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    attn: b.attn(&format!("{p}.attn"), d, out_std),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    ff: b.ff(&format!("{p}.ff"), d, f, out_scale),
                }
            })
            .collect();
        let enc_ln = b.norm("enc.ln", d);
        let dec = (0..config.decoder_layers)
            .map(|l| {
                let p = format!("dec.{l}");
                DecLayer {
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    self_attn: b.attn(&format!("{p}.self"), d, out_std),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    cross: b.attn(&format!("{p}.cross"), d, out_std),
                    ln3: b.norm(&format!("{p}.ln3"), d),
                    ff: b.ff(&format!("{p}.ff"), d, f, out_scale),
                }
            })
            .collect();
        let dec_ln = b.norm("dec.ln", d);
        let lm_head = b.add("lm_head".into(), vec![d, v], Init::Std(0.02));
        let proj_w1 = b.add("proj.w1".into(), vec![d, d], Init::Std(1.0 / (d as f64).sqrt()));
        let proj_b1 = b.add("proj.b1".into(), vec![d], Init::Const(0.0));
        let proj_w2 = b.add(
            "proj.w2".into(),
            vec![d, config.vector_dim],
            Init::Std(1.0 / (d as f64).sqrt()),
        );
        let proj_b2 = b.add("proj.b2".into(), vec![config.vector_dim], Init::Const(0.0));
        let params = b.store;
        Ok(Gur {
            config,
            vocab,
            params,
            layout: Layout {
                tok_emb,
                enc_pos,
                dec_pos,
                enc,
                enc_ln,
                dec,
                dec_ln,
                lm_head,
                proj_w1,
                proj_b1,
                proj_w2,
                proj_b2,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Parameters used only by the decoder and LM head.
    pub fn decoder_params(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| {
                let n = self.params.name(id);
                n.starts_with("dec.") || n == "lm_head"
            })
            .collect()
    }

    /// Output projections of every residual branch (attention `wo` and the
    /// second feed-forward matrix with its bias).
    pub fn residual_output_params(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| {
                let n = self.params.name(id);
                n.ends_with(".wo") || n.ends_with(".ff.w2") || n.ends_with(".ff.b2")
            })
            .collect()
    }

    /// `[CLS]` followed by the tokenized text, truncated to `max_seq`.
    pub fn encoder_input(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::with_capacity(text.len() + 1);
        ids.push(CLS);
        ids.extend(self.vocab.tokenize(text));
        ids.truncate(self.config.max_seq);
        ids
    }

    fn p(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(&self.params, id)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, n: &Norm) -> Result<Var> {
        let (gain, bias) = (self.p(g, n.gain), self.p(g, n.bias));
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    fn attention(&self, g: &mut Graph<T>, x: Var, kv: Var, a: &Attn, spec: &AttentionSpec) -> Result<Var> {
        let (wq, wk, wv, wo) = (self.p(g, a.wq), self.p(g, a.wk), self.p(g, a.wv), self.p(g, a.wo));
        let q = g.matmul(x, wq)?;
        let k = g.matmul(kv, wk)?;
        let v = g.matmul(kv, wv)?;
        let o = g.attention(q, k, v, spec)?;
        g.matmul(o, wo)
    }

    fn ff(&self, g: &mut Graph<T>, x: Var, f: &Ff) -> Result<Var> {
        let (w1, b1, w2, b2) = (self.p(g, f.w1), self.p(g, f.b1), self.p(g, f.w2), self.p(g, f.b2));
        let h = g.matmul(x, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, w2)?;
        g.add_bias(h, b2)
    }

    fn check_seq(&self, s: &[TokenId], what: &str) -> Result<()> {
        if s.is_empty() || s.len() > self.config.max_seq {
            return Err(GurError::invalid(format!(
                "{what} length {} outside 1..={}",
                s.len(),
                self.config.max_seq
            )));
        }
        if let Some(&t) = s.iter().find(|&&t| t as usize >= self.vocab.len()) {
            return Err(GurError::invalid(format!("{what} token {t} outside vocabulary")));
        }
        Ok(())
    }

    /// Token plus position embeddings of right-padded sequences.
    fn embed(&self, g: &mut Graph<T>, seqs: &[&[TokenId]], pos: ParamId) -> Result<(Var, Vec<usize>, usize)> {
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * max_len);
        let mut pos_ids = Vec::with_capacity(seqs.len() * max_len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, max_len - s.len()));
            pos_ids.extend(0..max_len as u32);
        }
        let (tok, pos) = (self.p(g, self.layout.tok_emb), self.p(g, pos));
        let te = g.embed(tok, &ids)?;
        let pe = g.embed(pos, &pos_ids)?;
        Ok((g.add(te, pe)?, seqs.iter().map(|s| s.len()).collect(), max_len))
    }

    /// Runs the encoder on sequences that already start with `[CLS]`.
    pub fn encode_batch(&self, g: &mut Graph<T>, seqs: &[&[TokenId]]) -> Result<EncodedBatch> {
        if seqs.is_empty() {
            return Err(GurError::invalid("empty encoder batch"));
        }
        for s in seqs {
            self.check_seq(s, "encoder input")?;
        }
        let (mut x, lens, max_len) = self.embed(g, seqs, self.layout.enc_pos)?;
        let spec = AttentionSpec {
            batch: seqs.len(),
            q_len: max_len,
            k_len: max_len,
            heads: self.config.num_heads,
            key_lens: lens.clone(),
            causal: false,
        };
        for layer in &self.layout.enc {
            let h = self.norm(g, x, &layer.ln1)?;
            let a = self.attention(g, h, h, &layer.attn, &spec)?;
            x = g.add(x, a)?;
            let h = self.norm(g, x, &layer.ln2)?;
            let f = self.ff(g, h, &layer.ff)?;
            x = g.add(x, f)?;
        }
        let states = self.norm(g, x, &self.layout.enc_ln)?;
        Ok(EncodedBatch { states, lens, max_len })
    }

    /// Teacher-forced decoder logits `[batch * max_prefix, vocab]`.
    pub fn decode_batch(&self, g: &mut Graph<T>, enc: &EncodedBatch, prefixes: &[&[TokenId]]) -> Result<Var> {
        if prefixes.len() != enc.lens.len() {
            return Err(GurError::invalid(format!(
                "{} decoder prefixes for {} encoded sequences",
                prefixes.len(),
                enc.lens.len()
            )));
        }
        for s in prefixes {
            self.check_seq(s, "decoder prefix")?;
        }
        let (mut x, lens, max_len) = self.embed(g, prefixes, self.layout.dec_pos)?;
        let self_spec = AttentionSpec {
            batch: prefixes.len(),
            q_len: max_len,
            k_len: max_len,
            heads: self.config.num_heads,
            key_lens: lens,
            causal: true,
        };
        let cross_spec = AttentionSpec {
            batch: prefixes.len(),
            q_len: max_len,
            k_len: enc.max_len,
            heads: self.config.num_heads,
            key_lens: enc.lens.clone(),
            causal: false,
        };
        for layer in &self.layout.dec {
            let h = self.norm(g, x, &layer.ln1)?;
            let a = self.attention(g, h, h, &layer.self_attn, &self_spec)?;
            x = g.add(x, a)?;
            let h = self.norm(g, x, &layer.ln2)?;
            let c = self.attention(g, h, enc.states, &layer.cross, &cross_spec)?;
            x = g.add(x, c)?;
            let h = self.norm(g, x, &layer.ln3)?;
            let f = self.ff(g, h, &layer.ff)?;
            x = g.add(x, f)?;
        }
        let h = self.norm(g, x, &self.layout.dec_ln)?;
        let head = self.p(g, self.layout.lm_head);
        g.matmul(h, head)
    }

    /// Unit-norm sentence vectors `[batch, vector_dim]` from the `[CLS]` rows.
    pub fn project(&self, g: &mut Graph<T>, enc: &EncodedBatch) -> Result<Var> {
        let rows: Vec<usize> = (0..enc.lens.len()).map(|b| b * enc.max_len).collect();
        let cls = g.select_rows(enc.states, &rows)?;
        let (w1, b1, w2, b2) = (
            self.p(g, self.layout.proj_w1),
            self.p(g, self.layout.proj_b1),
            self.p(g, self.layout.proj_w2),
            self.p(g, self.layout.proj_b2),
        );
        let h = g.matmul(cls, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.tanh(h)?;
        let h = g.matmul(h, w2)?;
        let h = g.add_bias(h, b2)?;
        g.l2_normalize(h)
    }

    /// Encoder states `[len, model_dim]` for one sequence.
    pub fn encode(&self, ids: &[TokenId]) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let enc = self.encode_batch(&mut g, &[ids])?;
        Ok(g.value(enc.states).clone())
    }

    pub fn represent(&self, text: &str) -> Result<Vec<T>> {
        Ok(self.represent_many(&[text])?.remove(0))
    }

    /// Sentence vectors for many texts, in input order.
    pub fn represent_many(&self, texts: &[&str]) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(INFER_BATCH) {
            let inputs: Vec<Vec<TokenId>> = chunk.iter().map(|t| self.encoder_input(t)).collect();
            let refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
            let mut g = Graph::inference();
            let enc = self.encode_batch(&mut g, &refs)?;
            let v = self.project(&mut g, &enc)?;
            let t = g.value(v);
            out.extend((0..chunk.len()).map(|r| t.row(r).to_vec()));
        }
        Ok(out)
    }

    /// Decoder logits `[prefix.len(), vocab]` given one sequence's encoder
    /// states.
    pub fn decode_logits(&self, enc_states: &Tensor<T>, prefix: &[TokenId]) -> Result<Tensor<T>> {
        let (len, d) = enc_states.dims2()?;
        if d != self.config.model_dim || len == 0 {
            return Err(GurError::invalid(format!(
                "encoder states of shape {:?} do not match model_dim {}",
                enc_states.shape(),
                self.config.model_dim
            )));
        }
        let mut g = Graph::inference();
        let states = g.constant(enc_states.clone());
        let enc = EncodedBatch {
            states,
            lens: vec![len],
            max_len: len,
        };
        let logits = self.decode_batch(&mut g, &enc, &[prefix])?;
        Ok(g.value(logits).clone())
    }

    /// Next-token logits after `prefix`.
    pub fn decode_step(&self, enc_states: &Tensor<T>, prefix: &[TokenId]) -> Result<Vec<T>> {
        let logits = self.decode_logits(enc_states, prefix)?;
        Ok(logits.row(prefix.len() - 1).to_vec())
    }

    /// Greedy token ids after the start token, without the final `[EOS]`.
    pub fn generate_ids(&self, prompt: &str, max_new: usize) -> Result<Vec<TokenId>> {
        if max_new == 0 {
            return Err(GurError::invalid("max_new must be at least 1"));
        }
        let enc = self.encode(&self.encoder_input(prompt))?;
        let mut prefix = vec![PAD];
        let limit = max_new.min(self.config.max_seq - 1);
        while prefix.len() <= limit {
            let logits = self.decode_step(&enc, &prefix)?;
            let next = argmax(&logits) as TokenId;
            if next == EOS {
                break;
            }
            prefix.push(next);
        }
        Ok(prefix.split_off(1))
    }

    pub fn generate_greedy(&self, prompt: &str, max_new: usize) -> Result<String> {
        Ok(self.vocab.detokenize(&self.generate_ids(prompt, max_new)?))
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        checkpoint::save(self, dir)
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        checkpoint::load(dir, None)
    }

    /// Loads a checkpoint and rejects it unless its config equals `expected`.
    pub fn load_expecting(dir: &std::path::Path, expected: &ModelConfig) -> Result<Self> {
        checkpoint::load(dir, Some(expected))
    }
}

/// First index of the maximum.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> SentenceEncoder for Gur<T> {
    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        Ok(self
            .represent_many(texts)?
            .into_iter()
            .map(|v| v.into_iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect())
            .collect())
    }
}
