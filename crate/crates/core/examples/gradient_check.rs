//! Finite-difference check of the joint objective on a tiny f64 model.
//!
//! cargo run --release --example gradient_check

use gur::masking::{corrupt, sample_layout, MaskingConfig};
use gur::model::{Gur, ModelConfig, Vocab, CLS, DEFAULT_SENTINELS, EOS};
use gur::objectives::{batch_loss_graph, LossWeights, Mode, TrainBatch};
use gur::tensor::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gur::Result<()> {
    let texts = ["tom chases jerry", "jerry chases tom", "spike naps"];
    let vocab = Vocab::build(texts, DEFAULT_SENTINELS);
    let cfg = ModelConfig {
        model_dim: 8,
        num_heads: 2,
        encoder_layers: 2,
        decoder_layers: 2,
        ff_dim: 16,
        vector_dim: 4,
        max_seq: 24,
        ..ModelConfig::default()
    };
    let mut model = Gur::<f64>::new(cfg, vocab.clone(), 5)?;
    let dist = MaskingConfig::default().distribution()?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut batch = TrainBatch::default();
    for t in texts {
        let ids = vocab.tokenize(t);
        let layout = sample_layout(ids.len(), 0.15, &dist, &mut rng)?;
        batch.lm_examples.push(corrupt(&ids, &layout, vocab.sentinels(), EOS)?);
        let with_cls: Vec<u32> = [CLS].into_iter().chain(ids).collect();
        batch.pairs.push((with_cls.clone(), with_cls));
    }
    let w = LossWeights::default();
    let loss_at = |m: &Gur<f64>| -> gur::Result<f64> {
        let mut g = Graph::inference();
        let l = batch_loss_graph(m, &mut g, &batch, &w, Mode::Full)?;
        Ok(g.value(l.total).item())
    };
    let mut g = Graph::new();
    let l = batch_loss_graph(&model, &mut g, &batch, &w, Mode::Full)?;
    let grads = g.param_grads(&g.backward(l.total)?, model.params());
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = model.params().ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let Some(grad) = grads[k].clone() else { continue };
        for i in (0..grad.len()).step_by(7) {
            let x = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = x + h;
            let up = loss_at(&model)?;
            model.params_mut().get_mut(id).data_mut()[i] = x - h;
            let down = loss_at(&model)?;
            model.params_mut().get_mut(id).data_mut()[i] = x;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / (fd.abs() + grad[i].abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    println!(
        "loss {:.6}, max relative error over sampled coordinates {worst:.2e}",
        loss_at(&model)?
    );
    Ok(())
}
