//! Fast invariant checks run by `gur selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Document;
use crate::error::Result;
use crate::eval::{mrr_at_k, recall_at_k, Bm25Index, Qrels, Ranking};
use crate::lcs::{brute_force_lcs, longest_common_substring};
use crate::masking::{hump_geometric_pmf, sample_layout, HumpGeometricParams};
use crate::miner::{mine_pairs, MinerConfig};
use crate::model::{Gur, ModelConfig, Vocab, DEFAULT_SENTINELS};
use crate::objectives::cl_loss;
use crate::tensor::gradcheck::{check_gradients, seeded_tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random_text(rng: &mut ChaCha8Rng, alphabet: &[char], max_len: usize) -> String {
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
}

fn lcs_oracle() -> Result<(bool, String)> {
    let alphabet: Vec<char> = "abc 北京".chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..200 {
        let a = random_text(&mut rng, &alphabet, 24);
        let b = random_text(&mut rng, &alphabet, 24);
        let fast = longest_common_substring(&a, &b);
        let slow = brute_force_lcs(&a, &b)?;
        if fast.char_length != slow.char_length || fast.weight != slow.weight {
            return Ok((false, format!("case {i}: {a:?} / {b:?}")));
        }
    }
    Ok((true, "200 random pairs".into()))
}

fn fig2() -> Result<(bool, String)> {
    let doc = Document::from_text(
        "fig2",
        Some("Tom and Jerry".into()),
        "Spike is chasing Tom. Spike is chasing Jerry. Tom is chasing Jerry. Jerry is chasing Tom.",
    )
    .expect("sentences");
    let pairs = mine_pairs(&doc, &MinerConfig::default());
    let ok = pairs.len() == 1 && pairs[0].weight == 14 && pairs[0].lcs == "spike is chasing";
    Ok((ok, format!("{} pair(s) accepted", pairs.len())))
}

fn hump() -> Result<(bool, String)> {
    let d = hump_geometric_pmf(&HumpGeometricParams::default())?;
    let sum: f64 = d.probs().iter().sum();
    let ok = (d.mean() - 3.795).abs() < 1e-3 && (sum - 1.0).abs() < 1e-12;
    Ok((ok, format!("mean {:.4}, mass {sum}", d.mean())))
}

fn mask_rate() -> Result<(bool, String)> {
    let d = hump_geometric_pmf(&HumpGeometricParams::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut total = 0usize;
    let n = 1000;
    for _ in 0..n {
        total += sample_layout(128, 0.15, &d, &mut rng)?.masked_tokens();
    }
    let rate = total as f64 / (n * 128) as f64;
    Ok(((0.14..=0.16).contains(&rate), format!("mean masked fraction {rate:.4}")))
}

fn gradients() -> Result<(bool, String)> {
    let x = seeded_tensor::<f64>(3, 4, 3, 1.0);
    let w = seeded_tensor::<f64>(4, 5, 4, 1.0);
    let res = check_gradients(&[x, w], 1e-5, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.gelu(h)?;
        let h = g.tanh(h)?;
        let h = g.softmax(h, 1)?;
        g.cross_entropy(h, &[0, 2, 4], None)
    })?;
    Ok((
        res.max_rel_error < 1e-4,
        format!("max rel error {:.2e}", res.max_rel_error),
    ))
}

fn contrastive() -> Result<(bool, String)> {
    let n = 4;
    let same = vec![vec![1.0, 0.0]; n];
    let uniform = cl_loss(&same, &same, 0.1)?;
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let ident = cl_loss(&eye, &eye, 0.1)?;
    let ok = (uniform - (n as f64).ln()).abs() < 1e-9 && (ident - 4.54e-5).abs() < 1e-7;
    Ok((ok, format!("uniform {uniform:.9}, identity {ident:.3e}")))
}

fn bm25() -> Result<(bool, String)> {
    let idx = Bm25Index::new([("d0", "cat sat"), ("d1", "dog ran far"), ("d2", "cat cat dog")]);
    let hits = idx.search("dog ran", 3);
    let ok = hits.first().is_some_and(|(id, _)| id == "d1");
    Ok((ok, format!("top hit {:?}", hits.first().map(|h| &h.0))))
}

fn metrics() -> Result<(bool, String)> {
    let ranking: Ranking = [("q".to_string(), vec!["a".into(), "b".into(), "c".into()])].into();
    let qrels: Qrels = [("q".to_string(), ["c".to_string()].into())].into();
    let mrr = mrr_at_k(&ranking, &qrels, 3)?.value;
    let cut = mrr_at_k(&ranking, &qrels, 2)?.value;
    let r1 = recall_at_k(&ranking, &qrels, 1)?.value;
    let r3 = recall_at_k(&ranking, &qrels, 3)?.value;
    let ok = (mrr - 1.0 / 3.0).abs() < 1e-15 && cut == 0.0 && r1 <= r3 && r3 == 1.0;
    Ok((ok, format!("mrr@3 {mrr:.4}, mrr@2 {cut}")))
}

fn checkpoint() -> Result<(bool, String)> {
    let dir = tempfile::tempdir().map_err(|e| crate::GurError::io(std::env::temp_dir(), e))?;
    let cfg = ModelConfig {
        model_dim: 8,
        num_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ff_dim: 16,
        vector_dim: 4,
        max_seq: 16,
        ..ModelConfig::default()
    };
    let m = Gur::<f32>::new(cfg, Vocab::build(["selftest"], DEFAULT_SENTINELS), 3)?;
    m.save(dir.path())?;
    let back = Gur::<f32>::load(dir.path())?;
    let ok = back.represent("test")? == m.represent("test")?;
    Ok((ok, "save/load round trip".into()))
}

pub fn run_all() -> Vec<Check> {
    vec![
        check("lcs-oracle", lcs_oracle),
        check("fig2-mining", fig2),
        check("hump-geometric", hump),
        check("masking-rate", mask_rate),
        check("gradients", gradients),
        check("contrastive-analytics", contrastive),
        check("bm25", bm25),
        check("metrics", metrics),
        check("checkpoint", checkpoint),
    ]
}
