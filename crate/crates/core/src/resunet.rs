//! Residual U-Net: residual encoder, skip-connected decoder, 1×1 head.
//!
//! Layout for `depth = d` with `ch_i = base · 2^i`:
//!
//! ```text
//! enc{i}      ResBlock(ch_{i-1} → ch_i), keep as skip_i, 2×2 max-pool   (i < d, ch_{-1} = in)
//! bottleneck  ResBlock(ch_{d-1} → ch_d)
//! dec{i}      up: transposed conv k2 s2 (ch_{i+1} → ch_i), concat skip_i,
//!             ResBlock(2·ch_i → ch_i)                                 (i = d-1 … 0)
//! head        1×1 conv (ch_0 → classes), channel softmax
//! ```
//!
//! A ResBlock is `relu(conv3x3(relu(conv3x3(x))) + shortcut(x))`, where the
//! shortcut is the identity when channel counts agree and a 1×1 conv otherwise.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, AdamState, AutodiffError, Graph, Real, Tensor, Var};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"RUNW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("input shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("weights do not match the configuration: {0}")]
    ConfigMismatch(String),
    #[error("corrupt weight file: {0}")]
    CorruptWeights(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResUNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub seed: u64,
}

impl Default for ResUNetConfig {
    fn default() -> Self {
        ResUNetConfig { in_channels: 4, num_classes: 2, depth: 4, base_channels: 8, seed: 0 }
    }
}

impl ResUNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.in_channels == 0 {
            return bad("in_channels must be at least 1");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.depth == 0 || self.depth > 16 {
            return bad("depth must lie in 1..=16");
        }
        if self.base_channels == 0 {
            return bad("base_channels must be at least 1");
        }
        if self.base_channels.checked_shl(self.depth as u32).is_none_or(|c| c > 1 << 20) {
            return bad("base_channels · 2^depth is too large");
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    fn same_architecture(&self, other: &ResUNetConfig) -> bool {
        (self.in_channels, self.num_classes, self.depth, self.base_channels)
            == (other.in_channels, other.num_classes, other.depth, other.base_channels)
    }
}

/// What the final 1×1 conv produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// `num_classes` channels followed by a channel softmax.
    Segmentation,
    /// `in_channels` raw channels, used for denoising pretraining.
    Regression,
}

impl HeadKind {
    fn code(self) -> u8 {
        match self {
            HeadKind::Segmentation => 0,
            HeadKind::Regression => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(HeadKind::Segmentation),
            1 => Some(HeadKind::Regression),
            _ => None,
        }
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Encoder,
    Bottleneck,
    Decoder,
    Head,
}

impl Group {
    pub fn of(name: &str) -> Group {
        if name.starts_with("enc") {
            Group::Encoder
        } else if name.starts_with("bottleneck") {
            Group::Bottleneck
        } else if name.starts_with("dec") {
            Group::Decoder
        } else {
            Group::Head
        }
    }

    /// Encoder stages and bottleneck: the part that pretraining transfers.
    pub fn is_encoder_side(self) -> bool {
        matches!(self, Group::Encoder | Group::Bottleneck)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub frozen: bool,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
}

#[derive(Debug, Clone, Copy)]
struct DecoderStage {
    up: Conv,
    block: ResBlock,
}

struct Builder<T> {
    params: Vec<Parameter<T>>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<T> {
    fn push(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".bias") {
            vec![T::zero(); n]
        } else {
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite He std");
            (0..n).map(|_| T::of(normal.sample(&mut self.rng))).collect()
        };
        self.params.push(Parameter { name, value: Tensor::new(shape, data).expect("length matches shape"), frozen: false });
        self.params.len() - 1
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let weight = self.push(format!("{prefix}.weight"), vec![cout, cin, k, k], cin * k * k);
        let bias = self.push(format!("{prefix}.bias"), vec![cout], 1);
        Conv { weight, bias }
    }

    fn up(&mut self, prefix: &str, cin: usize, cout: usize) -> Conv {
        // Each output pixel of a k2/s2 transposed conv sees exactly one tap per input channel.
        let weight = self.push(format!("{prefix}.weight"), vec![cin, cout, 2, 2], cin);
        let bias = self.push(format!("{prefix}.bias"), vec![cout], 1);
        Conv { weight, bias }
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize) -> ResBlock {
        let conv1 = self.conv(&format!("{prefix}.conv1"), cin, cout, 3);
        let conv2 = self.conv(&format!("{prefix}.conv2"), cout, cout, 3);
        let shortcut = (cin != cout).then(|| self.conv(&format!("{prefix}.shortcut"), cin, cout, 1));
        ResBlock { conv1, conv2, shortcut }
    }
}

#[derive(Debug, Clone)]
pub struct ResUNet<T> {
    config: ResUNetConfig,
    head_kind: HeadKind,
    params: Vec<Parameter<T>>,
    encoder: Vec<ResBlock>,
    bottleneck: ResBlock,
    /// Deepest stage first, i.e. forward order.
    decoder: Vec<DecoderStage>,
    head: Conv,
}

/// Segmentation model with He-initialized weights drawn from `config.seed`.
pub fn build_model<T: Real>(config: &ResUNetConfig) -> Result<ResUNet<T>> {
    ResUNet::new(config, HeadKind::Segmentation)
}

impl<T: Real> ResUNet<T> {
    pub fn new(config: &ResUNetConfig, head_kind: HeadKind) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { params: Vec::new(), rng: ChaCha8Rng::seed_from_u64(config.seed) };
        let d = config.depth;
        let mut encoder = Vec::with_capacity(d);
        let mut cin = config.in_channels;
        for i in 0..d {
            encoder.push(b.block(&format!("enc{i}"), cin, config.channels(i)));
            cin = config.channels(i);
        }
        let bottleneck = b.block("bottleneck", cin, config.channels(d));
        let mut decoder = Vec::with_capacity(d);
        for i in (0..d).rev() {
            let ch = config.channels(i);
            let up = b.up(&format!("dec{i}.up"), config.channels(i + 1), ch);
            let block = b.block(&format!("dec{i}"), 2 * ch, ch);
            decoder.push(DecoderStage { up, block });
        }
        let out = match head_kind {
            HeadKind::Segmentation => config.num_classes,
            HeadKind::Regression => config.in_channels,
        };
        let head = b.conv("head", config.channels(0), out, 1);
        Ok(ResUNet { config: config.clone(), head_kind, params: b.params, encoder, bottleneck, decoder, head })
    }

    pub fn config(&self) -> &ResUNetConfig {
        &self.config
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head_kind
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn out_channels(&self) -> usize {
        self.params[self.head.bias].value.numel()
    }

    /// Parameter tensors in model order, for the optimizer.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    /// One Adam update over all parameters; `None` gradients (frozen) are skipped.
    pub fn adam_step(&mut self, grads: &[Option<&[T]>], state: &mut AdamState<T>, lr: f64) -> Result<()> {
        let mut tensors: Vec<Tensor<T>> =
            self.params.iter_mut().map(|p| std::mem::replace(&mut p.value, Tensor::zeros(vec![0]))).collect();
        let result = adam_step(&mut tensors, grads, state, lr);
        for (p, t) in self.params.iter_mut().zip(tensors) {
            p.value = t;
        }
        Ok(result?)
    }

    pub fn adam_state(&self) -> AdamState<T> {
        AdamState::new(&self.params.iter().map(|p| p.value.clone()).collect::<Vec<_>>())
    }

    /// Number of scalar parameters, optionally only the unfrozen ones.
    pub fn count_params(&self, trainable_only: bool) -> usize {
        self.params.iter().filter(|p| !(trainable_only && p.frozen)).map(|p| p.value.numel()).sum()
    }

    pub fn count_group(&self, pred: impl Fn(Group) -> bool) -> usize {
        self.params.iter().filter(|p| pred(Group::of(&p.name))).map(|p| p.value.numel()).sum()
    }

    /// Freezes every encoder-stage and bottleneck parameter.
    pub fn freeze_encoder(&mut self) {
        for p in &mut self.params {
            if Group::of(&p.name).is_encoder_side() {
                p.frozen = true;
            }
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.frozen = false);
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(ModelError::ShapeMismatch(format!("expected [N, C, H, W], got {shape:?}")));
        };
        if c != self.config.in_channels {
            return Err(ModelError::ShapeMismatch(format!("{c} input channels, model expects {}", self.config.in_channels)));
        }
        let m = self.config.spatial_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(ModelError::ShapeMismatch(format!("{h}x{w} is not divisible by 2^{} = {m}", self.config.depth)));
        }
        Ok(())
    }

    /// Places every parameter on `g`; unfrozen ones require gradients when `train` is set.
    pub fn bind(&self, g: &mut Graph<T>, train: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.value.clone(), train && !p.frozen)).collect()
    }

    /// Gradients of bound parameters in model order; `None` for frozen ones.
    pub fn gradients<'g>(&self, g: &'g Graph<T>, vars: &[Var]) -> Vec<Option<&'g [T]>> {
        self.params.iter().zip(vars).map(|(p, &v)| if p.frozen { None } else { g.grad(v) }).collect()
    }

    fn conv(&self, g: &mut Graph<T>, vars: &[Var], x: Var, c: Conv, pad: usize) -> Result<Var> {
        Ok(g.conv2d(x, vars[c.weight], Some(vars[c.bias]), 1, pad)?)
    }

    fn block(&self, g: &mut Graph<T>, vars: &[Var], x: Var, b: &ResBlock) -> Result<Var> {
        let h = self.conv(g, vars, x, b.conv1, 1)?;
        let h = g.relu(h)?;
        let h = self.conv(g, vars, h, b.conv2, 1)?;
        let skip = match b.shortcut {
            Some(s) => self.conv(g, vars, x, s, 0)?,
            None => x,
        };
        let sum = g.add(h, skip)?;
        Ok(g.relu(sum)?)
    }

    /// Forward pass on a graph: softmax probabilities, or raw maps for a regression head.
    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &[Var], input: Var) -> Result<Var> {
        self.check_input(g.value(input).shape())?;
        if vars.len() != self.params.len() {
            return Err(ModelError::ShapeMismatch(format!("{} bound vars for {} parameters", vars.len(), self.params.len())));
        }
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut x = input;
        for b in &self.encoder {
            let f = self.block(g, vars, x, b)?;
            skips.push(f);
            x = g.max_pool2d(f)?;
        }
        x = self.block(g, vars, x, &self.bottleneck)?;
        for stage in &self.decoder {
            let up = g.conv_transpose2d(x, vars[stage.up.weight], Some(vars[stage.up.bias]), 2)?;
            let skip = skips.pop().expect("one skip per decoder stage");
            let cat = g.concat_channels(up, skip)?;
            x = self.block(g, vars, cat, &stage.block)?;
        }
        let logits = self.conv(g, vars, x, self.head, 0)?;
        Ok(match self.head_kind {
            HeadKind::Segmentation => g.softmax_channels(logits)?,
            HeadKind::Regression => logits,
        })
    }

    /// Inference on `batch` [N, in_channels, H, W].
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let y = self.forward_graph(&mut g, &vars, x)?;
        Ok(g.value(y).clone())
    }

    pub fn to_store(&self) -> WeightStore<T> {
        WeightStore {
            config: self.config.clone(),
            head: self.head_kind,
            records: self.params.clone(),
        }
    }

    /// Only the encoder stages and bottleneck.
    pub fn encoder_store(&self) -> WeightStore<T> {
        WeightStore {
            config: self.config.clone(),
            head: self.head_kind,
            records: self.params.iter().filter(|p| Group::of(&p.name).is_encoder_side()).cloned().collect(),
        }
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_store().write(path)
    }

    /// Rebuilds a model from a complete store whose architecture matches `config`.
    pub fn from_store(store: WeightStore<T>, config: &ResUNetConfig) -> Result<Self> {
        if !store.config.same_architecture(config) {
            return Err(ModelError::ConfigMismatch(format!("file holds {:?}, expected {:?}", store.config, config)));
        }
        let mut model = ResUNet::new(config, store.head)?;
        if store.records.len() != model.params.len() {
            return Err(ModelError::ConfigMismatch(format!("{} layers in file, model has {}", store.records.len(), model.params.len())));
        }
        for (p, r) in model.params.iter_mut().zip(store.records) {
            if p.name != r.name || p.value.shape() != r.value.shape() {
                return Err(ModelError::ConfigMismatch(format!("layer {} {:?} vs file {} {:?}", p.name, p.value.shape(), r.name, r.value.shape())));
            }
            *p = r;
        }
        Ok(model)
    }

    /// Copies encoder-side layers from `store` and returns how many were copied.
    pub fn load_encoder(&mut self, store: &WeightStore<T>) -> Result<usize> {
        let src = &store.config;
        if (src.in_channels, src.depth, src.base_channels) != (self.config.in_channels, self.config.depth, self.config.base_channels) {
            return Err(ModelError::ConfigMismatch(format!("encoder from {src:?} does not fit {:?}", self.config)));
        }
        let mut copied = 0;
        for p in self.params.iter_mut().filter(|p| Group::of(&p.name).is_encoder_side()) {
            let r = store
                .records
                .iter()
                .find(|r| r.name == p.name)
                .ok_or_else(|| ModelError::ConfigMismatch(format!("layer {} missing from weight file", p.name)))?;
            if r.value.shape() != p.value.shape() {
                return Err(ModelError::ConfigMismatch(format!("layer {} shape {:?} vs {:?}", p.name, r.value.shape(), p.value.shape())));
            }
            p.value = r.value.clone();
            copied += 1;
        }
        Ok(copied)
    }
}

pub fn load_weights<T: Real>(path: impl AsRef<Path>, config: &ResUNetConfig) -> Result<ResUNet<T>> {
    ResUNet::from_store(WeightStore::read(path)?, config)
}

/// Serialized parameter set.
///
/// File layout, all little-endian:
///
/// ```text
/// "RUNW" | version u32 | dtype u8 (4 = f32, 8 = f64) | head u8
/// in_channels u32 | num_classes u32 | depth u32 | base_channels u32 | seed u64
/// record count u32
/// per record: name_len u16 | name utf-8 | frozen u8 | rank u8 | dims u32 × rank | values
/// crc32 of everything above, u32
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore<T> {
    pub config: ResUNetConfig,
    pub head: HeadKind,
    pub records: Vec<Parameter<T>>,
}

fn dtype_width<T: Real>() -> u8 {
    if T::DTYPE == "f32" {
        4
    } else {
        8
    }
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::CorruptWeights(msg.into())
}

impl<T: Real> WeightStore<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        let c = &self.config;
        // Writes into a Vec cannot fail.
        let w = &mut out;
        w.write_u32::<LittleEndian>(WEIGHTS_VERSION).unwrap();
        w.write_u8(dtype_width::<T>()).unwrap();
        w.write_u8(self.head.code()).unwrap();
        for v in [c.in_channels, c.num_classes, c.depth, c.base_channels] {
            w.write_u32::<LittleEndian>(v as u32).unwrap();
        }
        w.write_u64::<LittleEndian>(c.seed).unwrap();
        w.write_u32::<LittleEndian>(self.records.len() as u32).unwrap();
        for r in &self.records {
            w.write_u16::<LittleEndian>(r.name.len() as u16).unwrap();
            w.extend_from_slice(r.name.as_bytes());
            w.write_u8(u8::from(r.frozen)).unwrap();
            w.write_u8(r.value.shape().len() as u8).unwrap();
            for &d in r.value.shape() {
                w.write_u32::<LittleEndian>(d as u32).unwrap();
            }
            for &v in r.value.data() {
                if dtype_width::<T>() == 4 {
                    w.write_f32::<LittleEndian>(v.as_f64() as f32).unwrap();
                } else {
                    w.write_f64::<LittleEndian>(v.as_f64()).unwrap();
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.write_u32::<LittleEndian>(crc).unwrap();
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != WEIGHTS_MAGIC {
            return Err(corrupt("missing RUNW magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(corrupt(format!("checksum {actual:08x} does not match stored {stored:08x}")));
        }
        let eof = |_| corrupt("unexpected end of data");
        let mut r = Cursor::new(&body[4..]);
        let version = r.read_u32::<LittleEndian>().map_err(eof)?;
        if version != WEIGHTS_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let width = r.read_u8().map_err(eof)?;
        if width != dtype_width::<T>() {
            return Err(corrupt(format!("stored {}-byte values, reading as {}", width, T::DTYPE)));
        }
        let head = HeadKind::from_code(r.read_u8().map_err(eof)?).ok_or_else(|| corrupt("unknown head kind"))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        }
        let seed = r.read_u64::<LittleEndian>().map_err(eof)?;
        let config = ResUNetConfig { in_channels: dims[0], num_classes: dims[1], depth: dims[2], base_channels: dims[3], seed };
        let count = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let mut records = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.read_u16::<LittleEndian>().map_err(eof)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(eof)?;
            let name = String::from_utf8(name).map_err(|_| corrupt("layer name is not utf-8"))?;
            let frozen = match r.read_u8().map_err(eof)? {
                0 => false,
                1 => true,
                f => return Err(corrupt(format!("frozen flag {f}"))),
            };
            let rank = r.read_u8().map_err(eof)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32::<LittleEndian>().map_err(eof)? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("shape overflow"))?;
            let remaining = body.len() - 4 - r.position() as usize;
            if n.checked_mul(width as usize).is_none_or(|b| b > remaining) {
                return Err(corrupt(format!("layer {name} needs {n} values, file too short")));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let v = if width == 4 {
                    r.read_f32::<LittleEndian>().map_err(eof)? as f64
                } else {
                    r.read_f64::<LittleEndian>().map_err(eof)?
                };
                data.push(T::of(v));
            }
            if records.iter().any(|p: &Parameter<T>| p.name == name) {
                return Err(corrupt(format!("duplicate layer {name}")));
            }
            records.push(Parameter { name, value: Tensor::new(shape, data)?, frozen });
        }
        if r.position() as usize != body.len() - 4 {
            return Err(corrupt("trailing bytes after last layer"));
        }
        Ok(WeightStore { config, head, records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
