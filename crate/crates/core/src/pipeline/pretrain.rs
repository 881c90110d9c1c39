use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{create_dir, write_file, write_json, PipelineError, Result, RunConfig};
use crate::autodiff::{Graph, Tensor};
use crate::resunet::{HeadKind, ResUNet};
use crate::synth::generate_pretrain_corpus;
use crate::volume::pad_to_multiple;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    /// Mean squared reconstruction error per epoch.
    pub epoch_losses: Vec<f64>,
    pub weights: PathBuf,
    pub encoder_params: usize,
}

/// Trains a denoising Res-UNet on the synthetic corpus and writes its encoder to
/// `<out_dir>/encoder.runw`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainSummary> {
    cfg.validate()?;
    let p = &cfg.pretrain;
    if cfg.synth.sequences != cfg.model.in_channels {
        return Err(PipelineError::Config(format!(
            "pretraining corpus has {} channels, model expects {}",
            cfg.synth.sequences, cfg.model.in_channels
        )));
    }
    let out = &cfg.out_dir;
    create_dir(out)?;

    let multiple = cfg.model.spatial_multiple();
    let corpus = generate_pretrain_corpus(&cfg.synth, p.samples)?;
    let mut noisy = Vec::new();
    let mut clean = Vec::new();
    let mut dims = (0, 0, 0);
    for (n, c) in &corpus {
        let (n, _) = pad_to_multiple(n, multiple)?;
        let (c, _) = pad_to_multiple(c, multiple)?;
        dims = (n.channels, n.height, n.width);
        noisy.extend_from_slice(&n.values);
        clean.extend_from_slice(&c.values);
    }
    let (ch, h, w) = dims;
    let size = ch * h * w;

    let mut model = ResUNet::<f32>::new(&cfg.model, HeadKind::Regression)?;
    let mut adam = model.adam_state();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0DE1_5E00);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_losses = Vec::with_capacity(p.epochs);
    let mut csv = String::from("epoch,mse\n");
    for epoch in 1..=p.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(p.batch_size) {
            let gather = |src: &[f32]| {
                let mut v = Vec::with_capacity(chunk.len() * size);
                for &i in chunk {
                    v.extend_from_slice(&src[i * size..(i + 1) * size]);
                }
                Tensor::new(vec![chunk.len(), ch, h, w], v).expect("batch sized to shape")
            };
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let x = g.constant(gather(&noisy));
            let target = g.constant(gather(&clean));
            let y = model.forward_graph(&mut g, &vars, x)?;
            let diff = g.sub(y, target)?;
            let sq = g.mul(diff, diff)?;
            let loss = g.mean(sq)?;
            g.backward(loss)?;
            sum += f64::from(g.value(loss).item()) * chunk.len() as f64;
            let grads = model.gradients(&g, &vars);
            model.adam_step(&grads, &mut adam, p.learning_rate)?;
        }
        let mse = sum / corpus.len() as f64;
        log::info!("pretrain epoch {epoch:>3}: mse {mse:.6}");
        csv.push_str(&format!("{epoch},{mse}\n"));
        epoch_losses.push(mse);
    }

    let weights = out.join("encoder.runw");
    let store = model.encoder_store();
    let encoder_params = store.records.iter().map(|r| r.value.numel()).sum();
    store.write(&weights)?;
    write_file(&out.join("pretrain_log.csv"), csv)?;
    let summary = PretrainSummary { epoch_losses, weights, encoder_params };
    write_json(&out.join("pretrain_summary.json"), &summary)?;
    Ok(summary)
}
