use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{axis_dataset, load_cases, split_cases, AxisDataset};
use super::{create_dir, io_err, write_file, write_json, PipelineError, Result, RunConfig};
use crate::autodiff::{Graph, Tensor};
use crate::loss::{total_loss, LossConfig};
use crate::resunet::{build_model, Group, ResUNet, WeightStore};
use crate::volume::Axis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub axis: Axis,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_dice_loss: f64,
    pub val_loss: Option<f64>,
    pub val_soft_dice: Option<f64>,
    pub trainable_params: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisSummary {
    pub axis: Axis,
    pub weights: PathBuf,
    pub total_params: usize,
    pub trainable_params: usize,
    /// Decoder plus head parameter count, for comparison with `trainable_params` when frozen.
    pub decoder_head_params: usize,
    pub class_weights: Vec<f64>,
    pub pretrained: bool,
    pub frozen: bool,
    pub epoch1_val_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub final_val_soft_dice: Option<f64>,
    /// Epoch-1 validation loss of a from-scratch model on the same data.
    pub scratch_epoch1_val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub train_cases: Vec<String>,
    pub validation_cases: Vec<String>,
    pub test_cases: Vec<String>,
    pub axes: Vec<AxisSummary>,
    pub elapsed_secs: f64,
}

impl TrainSummary {
    pub fn axis(&self, axis: Axis) -> Option<&AxisSummary> {
        self.axes.iter().find(|a| a.axis == axis)
    }
}

/// Fresh segmentation model, with the pretrained encoder loaded and frozen as configured.
pub fn initial_model(cfg: &RunConfig) -> Result<ResUNet<f32>> {
    let mut model = build_model::<f32>(&cfg.model)?;
    if let Some(path) = &cfg.pretrained {
        let store = WeightStore::<f32>::read(path)?;
        let n = model.load_encoder(&store)?;
        log::info!("loaded {n} encoder layers from {}", path.display());
    }
    if cfg.freeze_encoder {
        model.freeze_encoder();
    }
    Ok(model)
}

fn batch(ds: &AxisDataset, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
    let (size, plane) = (ds.sample_size(), ds.plane());
    let mut inputs = Vec::with_capacity(indices.len() * size);
    let mut labels = Vec::with_capacity(indices.len() * plane);
    for &i in indices {
        inputs.extend_from_slice(&ds.inputs[i * size..(i + 1) * size]);
        labels.extend(ds.labels[i * plane..(i + 1) * plane].iter().map(|&l| l as usize));
    }
    let t = Tensor::new(vec![indices.len(), ds.channels, ds.height, ds.width], inputs).expect("batch sized to shape");
    (t, labels)
}

/// Mean total loss and soft dice pooled over every voxel of `ds`.
pub fn evaluate_axis(
    model: &ResUNet<f32>,
    ds: &AxisDataset,
    loss_cfg: &LossConfig,
    class_weights: &[f64],
    batch_size: usize,
) -> Result<(f64, f64)> {
    let order: Vec<usize> = (0..ds.len).collect();
    let (mut loss_sum, mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0, 0.0);
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, labels) = batch(ds, chunk);
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let xv = g.constant(x);
        let probs = model.forward_graph(&mut g, &vars, xv)?;
        let terms = total_loss(&mut g, probs, &labels, loss_cfg, class_weights)?;
        loss_sum += f64::from(g.value(terms.total).item()) * chunk.len() as f64;
        let [n, c, h, w] = [chunk.len(), model.out_channels(), ds.height, ds.width];
        let p = g.value(probs).data();
        for s in 0..n {
            for i in 0..h * w {
                let pv = f64::from(p[(s * c + 1) * h * w + i]);
                let gv = if labels[s * h * w + i] == 1 { 1.0 } else { 0.0 };
                inter += pv * gv;
                sp += pv * pv;
                sg += gv;
            }
        }
    }
    let eps = loss_cfg.smooth_eps;
    Ok((loss_sum / ds.len.max(1) as f64, (2.0 * inter + eps) / (sp + sg + eps)))
}

fn shuffle_rng(seed: u64, axis: Axis) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (axis.index() as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F))
}

/// Trains `model` in place for `epochs` passes over `train`, calling `on_epoch` after each.
#[allow(clippy::too_many_arguments)]
pub fn train_axis(
    cfg: &RunConfig,
    axis: Axis,
    train: &AxisDataset,
    val: &AxisDataset,
    model: &mut ResUNet<f32>,
    class_weights: &[f64],
    epochs: usize,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    if train.len == 0 {
        return Err(PipelineError::DataMissing(format!("no training slices along axis {axis}")));
    }
    let mut rng = shuffle_rng(cfg.seed, axis);
    let mut adam = model.adam_state();
    let mut order: Vec<usize> = (0..train.len).collect();
    let mut records = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut total, mut ce, mut dl) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = batch(train, chunk);
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let xv = g.constant(x);
            let probs = model.forward_graph(&mut g, &vars, xv)?;
            let terms = total_loss(&mut g, probs, &labels, &cfg.loss, class_weights)?;
            g.backward(terms.total)?;
            let weight = chunk.len() as f64;
            total += f64::from(g.value(terms.total).item()) * weight;
            ce += f64::from(g.value(terms.cross_entropy).item()) * weight;
            dl += f64::from(g.value(terms.dice_loss).item()) * weight;
            let grads = model.gradients(&g, &vars);
            model.adam_step(&grads, &mut adam, cfg.learning_rate)?;
        }
        let n = train.len as f64;
        let (val_loss, val_soft_dice) = if val.len > 0 {
            let (l, d) = evaluate_axis(model, val, &cfg.loss, class_weights, cfg.batch_size)?;
            (Some(l), Some(d))
        } else {
            (None, None)
        };
        let rec = EpochRecord {
            axis,
            epoch,
            train_loss: total / n,
            train_ce: ce / n,
            train_dice_loss: dl / n,
            val_loss,
            val_soft_dice,
            trainable_params: model.count_params(true),
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec)?;
        records.push(rec);
    }
    Ok(records)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.6}"))
}

/// Trains one model per configured axis and writes weights, logs and a summary to `out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let out = &cfg.out_dir;
    create_dir(out)?;
    write_file(&out.join("config.toml"), cfg.to_toml()?)?;

    let cases = load_cases(cfg)?;
    let (train_cases, val_cases, test_cases) = split_cases(cases, cfg.split_ratio, cfg.test_cases)?;
    let names = |cs: &[super::Case]| cs.iter().map(|c| c.name.clone()).collect::<Vec<_>>();

    let mut text = String::new();
    let _ = writeln!(
        text,
        "epochs={} batch_size={} learning_rate={} split_ratio={} seed={}",
        cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.split_ratio, cfg.seed
    );
    let _ = writeln!(text, "train={} validation={} test={}", train_cases.len(), val_cases.len(), test_cases.len());
    log::info!("{}", text.trim_end());

    let csv_path = out.join("train_log.csv");
    let mut csv = csv::Writer::from_path(&csv_path).map_err(|e| PipelineError::Io { path: csv_path.clone(), source: e.into() })?;
    let csv_err = |e: csv::Error| PipelineError::Io { path: out.join("train_log.csv"), source: e.into() };

    let multiple = cfg.model.spatial_multiple();
    let mut summaries = Vec::new();
    for &axis in &cfg.axes {
        let train = axis_dataset(&train_cases, axis, multiple)?;
        let val = axis_dataset(&val_cases, axis, multiple)?;
        let (bg, lesion) = train.class_counts();
        let class_weights = cfg.loss.resolve_class_weights(cfg.model.num_classes, bg, lesion)?;
        let mut model = initial_model(cfg)?;
        let audit = model.count_group(|g| !g.is_encoder_side());
        let line = format!(
            "axis {axis}: {} slices {}x{}, trainable parameters {} of {} (decoder+head {audit}), class weights {:?}",
            train.len,
            train.height,
            train.width,
            model.count_params(true),
            model.count_params(false),
            class_weights
        );
        log::info!("{line}");
        let _ = writeln!(text, "{line}");

        let records = train_axis(cfg, axis, &train, &val, &mut model, &class_weights, cfg.epochs, |r| {
            let line = format!(
                "axis {} epoch {:>3}: train_loss {:.6} val_loss {} val_soft_dice {} ({:.1}s)",
                r.axis,
                r.epoch,
                r.train_loss,
                fmt_opt(r.val_loss),
                fmt_opt(r.val_soft_dice),
                r.seconds
            );
            log::info!("{line}");
            let _ = writeln!(text, "{line}");
            csv.serialize(r).map_err(csv_err)?;
            csv.flush().map_err(io_err(&csv_path))
        })?;

        let scratch_epoch1_val_loss = if cfg.compare_scratch && cfg.pretrained.is_some() {
            let mut scratch = build_model::<f32>(&cfg.model)?;
            let r = train_axis(cfg, axis, &train, &val, &mut scratch, &class_weights, 1, |_| Ok(()))?;
            let _ = writeln!(text, "axis {axis} scratch epoch 1: val_loss {}", fmt_opt(r[0].val_loss));
            r[0].val_loss
        } else {
            None
        };

        let weights = out.join(format!("model_{}.runw", axis.to_string().to_lowercase()));
        model.save_weights(&weights)?;
        let last = records.last().expect("at least one epoch");
        summaries.push(AxisSummary {
            axis,
            weights,
            total_params: model.count_params(false),
            trainable_params: model.count_params(true),
            decoder_head_params: model.count_group(|g| matches!(g, Group::Decoder | Group::Head)),
            class_weights,
            pretrained: cfg.pretrained.is_some(),
            frozen: cfg.freeze_encoder,
            epoch1_val_loss: records[0].val_loss,
            final_val_loss: last.val_loss,
            final_val_soft_dice: last.val_soft_dice,
            scratch_epoch1_val_loss,
        });
    }
    let summary = TrainSummary {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        train_cases: names(&train_cases),
        validation_cases: names(&val_cases),
        test_cases: names(&test_cases),
        axes: summaries,
        elapsed_secs: start.elapsed().as_secs_f64(),
    };
    write_file(&out.join("train.log"), text)?;
    write_json(&out.join("train_summary.json"), &summary)?;
    Ok(summary)
}
