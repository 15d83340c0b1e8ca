//! Baseline and multi-task network architectures on a pluggable
//! convolutional encoder.
//!
//! Both models share the layout encoder -> flatten -> dense(hidden, sigmoid).
//! The baseline adds one dense(1, sigmoid) classification head; the
//! multi-task model adds that head plus a dense(1, linear) regression head
//! for the configured crowd feature, so it has exactly hidden_units + 1 more
//! parameters than the baseline.
//!
//! Encoder trainability is behavioral, not just a flag: when frozen, the
//! encoder is skipped by both the backward pass and the optimizer, and a
//! checksum over its parameters lets tests prove no step ever touched it.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotations::Feature;
use crate::error::{Error, Result};
use crate::nn::{read_tensors, write_tensors, Activation, Conv2d, Dense, MaxPool2d, RmsProp};

/// Supported convolutional encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// The 13-conv / 5-pool VGG16 base; requires an ImageNet weights file.
    Vgg16Pretrained,
    /// Three small conv/pool stages with seeded random init, so the test
    /// suite runs without downloading anything.
    TinyTest,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderKind::Vgg16Pretrained => write!(f, "vgg16_pretrained"),
            EncoderKind::TinyTest => write!(f, "tiny_test"),
        }
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg16_pretrained" => Ok(EncoderKind::Vgg16Pretrained),
            "tiny_test" => Ok(EncoderKind::TinyTest),
            other => Err(Error::config(format!(
                "unknown encoder {other:?}, expected vgg16_pretrained or tiny_test"
            ))),
        }
    }
}

/// Encoder choice plus derived flattened output width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub trainable: bool,
    /// (height, width); inputs are 3-channel.
    pub input_size: (usize, usize),
    pub feature_dim: usize,
}

impl EncoderSpec {
    pub fn new(kind: EncoderKind, trainable: bool, input_size: (usize, usize)) -> Result<Self> {
        let feature_dim = flattened_dim(kind, input_size)?;
        Ok(EncoderSpec {
            kind,
            trainable,
            input_size,
            feature_dim,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Baseline,
    Multitask,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Baseline => write!(f, "baseline"),
            ModelKind::Multitask => write!(f, "multitask"),
        }
    }
}

pub const DEFAULT_HIDDEN_UNITS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub auxiliary_feature: Option<Feature>,
    pub hidden_units: usize,
    pub encoder: EncoderSpec,
}

impl ModelConfig {
    pub fn baseline(encoder: EncoderSpec, hidden_units: usize) -> Self {
        ModelConfig {
            kind: ModelKind::Baseline,
            auxiliary_feature: None,
            hidden_units,
            encoder,
        }
    }

    pub fn multitask(encoder: EncoderSpec, hidden_units: usize, feature: Feature) -> Self {
        ModelConfig {
            kind: ModelKind::Multitask,
            auxiliary_feature: Some(feature),
            hidden_units,
            encoder,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.auxiliary_feature) {
            (ModelKind::Baseline, Some(f)) => Err(Error::config(format!(
                "baseline model must not have an auxiliary feature (got {f})"
            ))),
            (ModelKind::Multitask, None) => Err(Error::config(
                "multitask model requires exactly one auxiliary feature",
            )),
            _ => {
                if self.hidden_units == 0 {
                    return Err(Error::config("hidden_units must be positive"));
                }
                let expected = flattened_dim(self.encoder.kind, self.encoder.input_size)?;
                if expected != self.encoder.feature_dim {
                    return Err(Error::config(format!(
                        "encoder feature_dim {} does not match input size (expected {expected})",
                        self.encoder.feature_dim
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Per-sample outputs: classification probability, and for multi-task models
/// the unbounded regression value.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    pub classification: Vec<f64>,
    pub regression: Option<Vec<f64>>,
}

#[allow(clippy::large_enum_variant)] // a handful of layers per model
enum EncoderLayer {
    Conv(Conv2d),
    Pool(MaxPool2d),
}

enum LayerPlan {
    Conv { in_c: usize, out_c: usize },
    Pool,
}

fn architecture(kind: EncoderKind) -> Vec<LayerPlan> {
    use LayerPlan::*;
    match kind {
        EncoderKind::TinyTest => vec![
            Conv { in_c: 3, out_c: 8 },
            Pool,
            Conv { in_c: 8, out_c: 16 },
            Pool,
            Conv { in_c: 16, out_c: 16 },
            Pool,
        ],
        EncoderKind::Vgg16Pretrained => {
            let mut plan = Vec::new();
            let blocks: [(usize, usize, usize); 5] = [
                (3, 64, 2),
                (64, 128, 2),
                (128, 256, 3),
                (256, 512, 3),
                (512, 512, 3),
            ];
            for (in_c, out_c, convs) in blocks {
                plan.push(Conv { in_c, out_c });
                for _ in 1..convs {
                    plan.push(Conv { in_c: out_c, out_c });
                }
                plan.push(Pool);
            }
            plan
        }
    }
}

/// (channels, height, width) after the encoder, for a 3-channel input.
fn output_shape(kind: EncoderKind, input_size: (usize, usize)) -> Result<(usize, usize, usize)> {
    let (mut h, mut w) = input_size;
    let mut channels = 3;
    for layer in architecture(kind) {
        match layer {
            LayerPlan::Conv { out_c, .. } => channels = out_c, // k3 p1 s1 keeps h, w
            LayerPlan::Pool => {
                h /= 2;
                w /= 2;
            }
        }
    }
    if h == 0 || w == 0 {
        return Err(Error::config(format!(
            "input size {:?} is too small for encoder {kind}",
            input_size
        )));
    }
    Ok((channels, h, w))
}

fn flattened_dim(kind: EncoderKind, input_size: (usize, usize)) -> Result<usize> {
    let (c, h, w) = output_shape(kind, input_size)?;
    Ok(c * h * w)
}

struct Encoder {
    layers: Vec<EncoderLayer>,
}

impl Encoder {
    fn build(kind: EncoderKind, rng: &mut ChaCha8Rng) -> Encoder {
        let layers = architecture(kind)
            .into_iter()
            .map(|plan| match plan {
                LayerPlan::Conv { in_c, out_c } => {
                    EncoderLayer::Conv(Conv2d::new(in_c, out_c, 3, 1, true, rng))
                }
                LayerPlan::Pool => EncoderLayer::Pool(MaxPool2d { size: 2 }),
            })
            .collect();
        Encoder { layers }
    }

    fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut current = x.clone();
        for layer in &self.layers {
            current = match layer {
                EncoderLayer::Conv(conv) => conv.forward(&current),
                EncoderLayer::Pool(pool) => pool.forward(&current),
            };
        }
        current
    }

    /// Forward pass keeping every intermediate activation;
    /// `acts[i]` is the input of layer `i`, `acts.last()` the encoder output.
    fn forward_train(&self, x: Array4<f64>) -> Vec<Array4<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for layer in &self.layers {
            let next = match layer {
                EncoderLayer::Conv(conv) => conv.forward(acts.last().unwrap()),
                EncoderLayer::Pool(pool) => pool.forward(acts.last().unwrap()),
            };
            acts.push(next);
        }
        acts
    }

    fn backward(&mut self, acts: &[Array4<f64>], grad_out: Array4<f64>) {
        let mut grad = grad_out;
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            grad = match layer {
                EncoderLayer::Conv(conv) => {
                    let grad_in = conv.backward(&acts[i], &acts[i + 1], &grad, i > 0);
                    match grad_in {
                        Some(g) => g,
                        None => break, // first layer: input gradient not needed
                    }
                }
                EncoderLayer::Pool(pool) => pool.backward(&acts[i], &grad),
            };
        }
    }

    fn convs(&self) -> impl Iterator<Item = (usize, &Conv2d)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            EncoderLayer::Conv(c) => Some((i, c)),
            _ => None,
        })
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = (usize, &mut Conv2d)> {
        self.layers
            .iter_mut()
            .enumerate()
            .filter_map(|(i, l)| match l {
                EncoderLayer::Conv(c) => Some((i, c)),
                _ => None,
            })
    }

    fn param_count(&self) -> usize {
        self.convs().map(|(_, c)| c.param_count()).sum()
    }
}

/// Activations kept by the training forward pass for the backward pass.
pub struct TrainForward {
    enc_acts: Vec<Array4<f64>>,
    flat: Array2<f64>,
    trunk_out: Array2<f64>,
    cls_out: Array2<f64>,
    reg_out: Option<Array2<f64>>,
}

impl TrainForward {
    pub fn classification(&self) -> Vec<f64> {
        self.cls_out.column(0).to_vec()
    }

    pub fn regression(&self) -> Option<Vec<f64>> {
        self.reg_out.as_ref().map(|r| r.column(0).to_vec())
    }
}

/// A built model: encoder, shared trunk and task heads.
pub struct Model {
    pub config: ModelConfig,
    encoder: Encoder,
    trunk: Dense,
    cls_head: Dense,
    reg_head: Option<Dense>,
}

impl Model {
    /// Builds the model with seeded random initialization. The
    /// vgg16_pretrained encoder cannot be randomly initialized;
    /// use `build_with_pretrained` for it.
    pub fn build(config: &ModelConfig, init_seed: u64) -> Result<Model> {
        config.validate()?;
        if config.encoder.kind == EncoderKind::Vgg16Pretrained {
            return Err(Error::config(
                "encoder vgg16_pretrained requires a weights file; use build_with_pretrained",
            ));
        }
        Ok(Self::build_unchecked(config, init_seed))
    }

    /// Builds the model and fills the encoder from a tensor container with
    /// entries `encoder.conv{i}.weight` / `encoder.conv{i}.bias`.
    pub fn build_with_pretrained(
        config: &ModelConfig,
        init_seed: u64,
        weights_path: &Path,
    ) -> Result<Model> {
        config.validate()?;
        let mut model = Self::build_unchecked(config, init_seed);
        let tensors = read_tensors(weights_path)?;
        for (i, conv) in model.encoder.convs_mut() {
            let w_name = format!("encoder.conv{i}.weight");
            let b_name = format!("encoder.conv{i}.bias");
            let (w_dims, w_data) = tensors
                .get(&w_name)
                .ok_or_else(|| Error::config(format!("weights file is missing {w_name}")))?;
            let (b_dims, b_data) = tensors
                .get(&b_name)
                .ok_or_else(|| Error::config(format!("weights file is missing {b_name}")))?;
            if w_dims.as_slice() != [conv.weight.nrows(), conv.weight.ncols()]
                || b_dims.as_slice() != [conv.bias.len()]
            {
                return Err(Error::config(format!(
                    "weights file tensor {w_name} has shape {w_dims:?}, expected [{}, {}]",
                    conv.weight.nrows(),
                    conv.weight.ncols()
                )));
            }
            conv.weight = Array2::from_shape_vec(
                (conv.weight.nrows(), conv.weight.ncols()),
                w_data.clone(),
            )
            .expect("validated shape");
            conv.bias = Array1::from_vec(b_data.clone());
        }
        Ok(model)
    }

    fn build_unchecked(config: &ModelConfig, init_seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let encoder = Encoder::build(config.encoder.kind, &mut rng);
        let trunk = Dense::new(
            config.encoder.feature_dim,
            config.hidden_units,
            Activation::Sigmoid,
            &mut rng,
        );
        let cls_head = Dense::new(config.hidden_units, 1, Activation::Sigmoid, &mut rng);
        let reg_head = match config.kind {
            ModelKind::Multitask => {
                Some(Dense::new(config.hidden_units, 1, Activation::Linear, &mut rng))
            }
            ModelKind::Baseline => None,
        };
        Model {
            config: config.clone(),
            encoder,
            trunk,
            cls_head,
            reg_head,
        }
    }

    pub fn encoder_trainable(&self) -> bool {
        self.config.encoder.trainable
    }

    /// Sets the effective trainability of every encoder parameter. When
    /// false, the encoder is skipped by backward() and apply_updates().
    pub fn set_encoder_trainable(&mut self, trainable: bool) {
        self.config.encoder.trainable = trainable;
    }

    /// Stacks (h, w, 3) images in [0, 255] into the network input layout
    /// (n, 3, h, w), applying the encoder's preprocessing.
    pub fn preprocess(&self, images: &[Array3<f64>]) -> Result<Array4<f64>> {
        let (h, w) = self.config.encoder.input_size;
        let n = images.len();
        if n == 0 {
            return Err(Error::shape("empty batch"));
        }
        let mut out = Array4::zeros((n, 3, h, w));
        for (i, img) in images.iter().enumerate() {
            let dim = img.dim();
            if dim != (h, w, 3) {
                return Err(Error::shape(format!(
                    "image {i} has shape {dim:?}, expected ({h}, {w}, 3)"
                )));
            }
            match self.config.encoder.kind {
                EncoderKind::TinyTest => {
                    for y in 0..h {
                        for x in 0..w {
                            for c in 0..3 {
                                out[(i, c, y, x)] = img[(y, x, c)] / 255.0;
                            }
                        }
                    }
                }
                // Caffe-style VGG16 preprocessing: BGR order, mean subtraction.
                EncoderKind::Vgg16Pretrained => {
                    const MEAN_BGR: [f64; 3] = [103.939, 116.779, 123.68];
                    for y in 0..h {
                        for x in 0..w {
                            for c in 0..3 {
                                out[(i, c, y, x)] = img[(y, x, 2 - c)] - MEAN_BGR[c];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Deterministic inference on a preprocessed batch.
    pub fn predict(&self, x: &Array4<f64>) -> Result<ModelOutputs> {
        self.check_input(x)?;
        let enc = self.encoder.forward(x);
        let flat = flatten(enc);
        let trunk_out = self.trunk.forward(&flat);
        let cls = self.cls_head.forward(&trunk_out);
        let reg = self.reg_head.as_ref().map(|h| h.forward(&trunk_out));
        Ok(ModelOutputs {
            classification: cls.column(0).to_vec(),
            regression: reg.map(|r| r.column(0).to_vec()),
        })
    }

    /// Convenience wrapper: preprocess then predict.
    pub fn predict_images(&self, images: &[Array3<f64>]) -> Result<ModelOutputs> {
        let x = self.preprocess(images)?;
        self.predict(&x)
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (h, w) = self.config.encoder.input_size;
        let dim = x.dim();
        if dim.1 != 3 || dim.2 != h || dim.3 != w {
            return Err(Error::shape(format!(
                "input batch has shape {dim:?}, expected (n, 3, {h}, {w})"
            )));
        }
        Ok(())
    }

    /// Forward pass that keeps the activations needed by `backward`.
    pub fn forward_train(&self, x: Array4<f64>) -> Result<TrainForward> {
        self.check_input(&x)?;
        let enc_acts = self.encoder.forward_train(x);
        let flat = flatten(enc_acts.last().unwrap().clone());
        let trunk_out = self.trunk.forward(&flat);
        let cls_out = self.cls_head.forward(&trunk_out);
        let reg_out = self.reg_head.as_ref().map(|h| h.forward(&trunk_out));
        Ok(TrainForward {
            enc_acts,
            flat,
            trunk_out,
            cls_out,
            reg_out,
        })
    }

    /// Accumulates gradients for one batch. `grad_cls_logit` is dL/dz of the
    /// classification head (pre-sigmoid); `grad_reg` is dL/dr of the linear
    /// regression output. A frozen encoder is skipped entirely.
    pub fn backward(
        &mut self,
        fwd: &TrainForward,
        grad_cls_logit: &[f64],
        grad_reg: Option<&[f64]>,
    ) -> Result<()> {
        let n = fwd.trunk_out.nrows();
        if grad_cls_logit.len() != n {
            return Err(Error::shape(format!(
                "grad_cls_logit has length {}, expected {n}",
                grad_cls_logit.len()
            )));
        }
        let gz_cls = Array2::from_shape_vec((n, 1), grad_cls_logit.to_vec()).unwrap();
        let mut grad_trunk_out = self.cls_head.backward_preact(&fwd.trunk_out, &gz_cls);

        match (&mut self.reg_head, grad_reg, &fwd.reg_out) {
            (Some(head), Some(grad), Some(_)) => {
                if grad.len() != n {
                    return Err(Error::shape(format!(
                        "grad_reg has length {}, expected {n}",
                        grad.len()
                    )));
                }
                let gz_reg = Array2::from_shape_vec((n, 1), grad.to_vec()).unwrap();
                grad_trunk_out += &head.backward_preact(&fwd.trunk_out, &gz_reg);
            }
            (None, None, None) => {}
            _ => {
                return Err(Error::shape(
                    "regression gradient does not match model kind",
                ));
            }
        }

        let grad_flat = self
            .trunk
            .backward(&fwd.flat, &fwd.trunk_out, &grad_trunk_out);

        if self.encoder_trainable() {
            let enc_out_dim = fwd.enc_acts.last().unwrap().dim();
            // dot() can emit non-standard layouts for unit dimensions;
            // normalize before reshaping.
            let grad_flat = if grad_flat.is_standard_layout() {
                grad_flat
            } else {
                grad_flat.as_standard_layout().to_owned()
            };
            let grad_enc = grad_flat
                .into_shape_with_order(enc_out_dim)
                .expect("flatten gradient reshape");
            self.encoder.backward(&fwd.enc_acts, grad_enc);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, conv) in self.encoder.convs_mut() {
            conv.zero_grads();
        }
        self.trunk.zero_grads();
        self.cls_head.zero_grads();
        if let Some(h) = &mut self.reg_head {
            h.zero_grads();
        }
    }

    /// One optimizer step over every trainable parameter.
    pub fn apply_updates(&mut self, opt: &mut RmsProp) {
        if self.encoder_trainable() {
            for (i, conv) in self.encoder.convs_mut() {
                let gw = conv.grad_weight.clone();
                let gb = conv.grad_bias.clone();
                opt.step(
                    &format!("encoder.conv{i}.weight"),
                    conv.weight.as_slice_mut().unwrap(),
                    gw.as_slice().unwrap(),
                );
                opt.step(
                    &format!("encoder.conv{i}.bias"),
                    conv.bias.as_slice_mut().unwrap(),
                    gb.as_slice().unwrap(),
                );
            }
        }
        let heads: [(&str, Option<&mut Dense>); 3] = [
            ("trunk", Some(&mut self.trunk)),
            ("cls_head", Some(&mut self.cls_head)),
            ("reg_head", self.reg_head.as_mut()),
        ];
        for (name, layer) in heads {
            if let Some(layer) = layer {
                let gw = layer.grad_weight.clone();
                let gb = layer.grad_bias.clone();
                opt.step(
                    &format!("{name}.weight"),
                    layer.weight.as_slice_mut().unwrap(),
                    gw.as_slice().unwrap(),
                );
                opt.step(
                    &format!("{name}.bias"),
                    layer.bias.as_slice_mut().unwrap(),
                    gb.as_slice().unwrap(),
                );
            }
        }
    }

    /// SHA-256 over the encoder parameters, in layer order.
    pub fn encoder_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (i, conv) in self.encoder.convs() {
            hasher.update(format!("encoder.conv{i}").as_bytes());
            for &v in conv.weight.iter().chain(conv.bias.iter()) {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.trunk.param_count()
            + self.cls_head.param_count()
            + self.reg_head.as_ref().map_or(0, |h| h.param_count())
    }

    /// How many parameters the optimizer may touch; excludes the encoder
    /// when it is frozen.
    pub fn trainable_param_count(&self) -> usize {
        let heads = self.trunk.param_count()
            + self.cls_head.param_count()
            + self.reg_head.as_ref().map_or(0, |h| h.param_count());
        if self.encoder_trainable() {
            heads + self.encoder.param_count()
        } else {
            heads
        }
    }

    fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        for (i, conv) in self.encoder.convs() {
            out.push((
                format!("encoder.conv{i}.weight"),
                vec![conv.weight.nrows(), conv.weight.ncols()],
                conv.weight.as_slice().unwrap(),
            ));
            out.push((
                format!("encoder.conv{i}.bias"),
                vec![conv.bias.len()],
                conv.bias.as_slice().unwrap(),
            ));
        }
        let heads: [(&str, Option<&Dense>); 3] = [
            ("trunk", Some(&self.trunk)),
            ("cls_head", Some(&self.cls_head)),
            ("reg_head", self.reg_head.as_ref()),
        ];
        for (name, layer) in heads {
            if let Some(layer) = layer {
                out.push((
                    format!("{name}.weight"),
                    vec![layer.weight.nrows(), layer.weight.ncols()],
                    layer.weight.as_slice().unwrap(),
                ));
                out.push((
                    format!("{name}.bias"),
                    vec![layer.bias.len()],
                    layer.bias.as_slice().unwrap(),
                ));
            }
        }
        out
    }

    /// Writes `config.json` (ModelConfig plus the trainability flag) and
    /// `weights.bin` into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let sidecar = CheckpointSidecar {
            model: self.config.clone(),
            encoder_trainable: self.encoder_trainable(),
        };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::validation(format!("checkpoint serialization failed: {e}")))?;
        let config_path = dir.join("config.json");
        std::fs::write(&config_path, json).map_err(|e| Error::io(&config_path, e))?;
        write_tensors(&dir.join("weights.bin"), &self.named_tensors())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Model> {
        let config_path = dir.join("config.json");
        let data = std::fs::read_to_string(&config_path)
            .map_err(|e| Error::io(&config_path, e))?;
        let sidecar: CheckpointSidecar = serde_json::from_str(&data)
            .map_err(|e| Error::validation(format!("checkpoint deserialization failed: {e}")))?;
        let mut model = Self::build_unchecked(&sidecar.model, 0);
        model.set_encoder_trainable(sidecar.encoder_trainable);
        let tensors = read_tensors(&dir.join("weights.bin"))?;
        model.fill_from_tensors(&tensors)?;
        Ok(model)
    }

    fn fill_from_tensors(&mut self, tensors: &crate::nn::TensorMap) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = self
            .named_tensors()
            .into_iter()
            .map(|(name, dims, _)| (name, dims))
            .collect();
        for (name, dims) in expected {
            let (got_dims, data) = tensors
                .get(&name)
                .ok_or_else(|| Error::validation(format!("checkpoint is missing tensor {name}")))?;
            if got_dims != &dims {
                return Err(Error::validation(format!(
                    "checkpoint tensor {name} has shape {got_dims:?}, expected {dims:?}"
                )));
            }
            self.assign_tensor(&name, data)?;
        }
        Ok(())
    }

    fn assign_tensor(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let slice: &mut [f64] = if let Some(rest) = name.strip_prefix("encoder.conv") {
            let (idx, field) = rest
                .split_once('.')
                .ok_or_else(|| Error::validation(format!("bad tensor name {name}")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::validation(format!("bad tensor name {name}")))?;
            let conv = self
                .encoder
                .convs_mut()
                .find(|(i, _)| *i == idx)
                .map(|(_, c)| c)
                .ok_or_else(|| Error::validation(format!("no conv layer {idx}")))?;
            match field {
                "weight" => conv.weight.as_slice_mut().unwrap(),
                "bias" => conv.bias.as_slice_mut().unwrap(),
                _ => return Err(Error::validation(format!("bad tensor name {name}"))),
            }
        } else {
            let (layer_name, field) = name
                .split_once('.')
                .ok_or_else(|| Error::validation(format!("bad tensor name {name}")))?;
            let layer = match layer_name {
                "trunk" => &mut self.trunk,
                "cls_head" => &mut self.cls_head,
                "reg_head" => self
                    .reg_head
                    .as_mut()
                    .ok_or_else(|| Error::validation("checkpoint has reg_head but model is baseline"))?,
                _ => return Err(Error::validation(format!("bad tensor name {name}"))),
            };
            match field {
                "weight" => layer.weight.as_slice_mut().unwrap(),
                "bias" => layer.bias.as_slice_mut().unwrap(),
                _ => return Err(Error::validation(format!("bad tensor name {name}"))),
            }
        };
        slice.copy_from_slice(data);
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointSidecar {
    model: ModelConfig,
    encoder_trainable: bool,
}

fn flatten(x: Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let x = if x.is_standard_layout() {
        x
    } else {
        x.as_standard_layout().to_owned()
    };
    x.into_shape_with_order((n, c * h * w))
        .expect("contiguous flatten")
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
