//! Layer specifications, forward pass with activation capture, minimal SGD
//! training, filter ablation, and model serialization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::LabeledDataset;
use crate::tensor::{
    self, conv2d, conv2d_transpose, conv2d_weight_grad, maxpool2d, maxunpool2d, out_side, softmax,
    ConvSpec, Switches, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model file at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("invalid feature id (layer {layer}, filter {filter}): {msg}")]
    InvalidFeature { layer: usize, filter: usize, msg: String },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("input image side {got} does not match network input side {want}")]
    WrongInputSide { got: usize, want: usize },
}

/// Addresses one filter (conv) or unit (fc): layer index p, filter index q.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeatureId {
    pub layer: usize,
    pub filter: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv(ConvSpec),
    Relu,
    MaxPool { window: usize, stride: usize },
    Flatten,
    Fc { inputs: usize, outputs: usize },
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    /// Conv: (out, in, M, M). Fc: (out, in, 1, 1).
    pub weights: Option<Tensor>,
    pub bias: Option<Vec<f32>>,
}

impl Layer {
    fn parametric(&self) -> bool {
        matches!(self.kind, LayerKind::Conv(_) | LayerKind::Fc { .. })
    }

    /// Number of output channels/units for conv and fc layers.
    pub fn unit_count(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Conv(spec) => Some(spec.out_channels),
            LayerKind::Fc { outputs, .. } => Some(outputs),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub input_channels: usize,
    pub input_side: usize,
    pub class_count: usize,
    /// Trailing layers excluded from descriptors (the classifier head).
    pub classifier_tail_len: usize,
}

/// Everything recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub input: Tensor,
    /// Per-layer outputs; empty unless capture was requested.
    pub outputs: Vec<Tensor>,
    pub switches: Vec<Option<Switches>>,
    pub logits: Vec<f32>,
    pub probs: Vec<f32>,
    pub predicted: usize,
}

impl ActivationTrace {
    pub fn captured(&self) -> bool {
        !self.outputs.is_empty()
    }
}

fn argmax_lowest(values: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Network {
    /// Reference MNIST-scale architecture:
    /// conv(5x5,16,S1,O0)-relu-pool(2,S2)-conv(5x5,32,S1,O0)-relu-pool(2,S2)
    /// -flatten-fc(128)-relu-fc(C)-softmax on 1x28x28 input.
    pub fn mnist_net() -> Network {
        Network::build(1, 28, 10, &[
            Blueprint::Conv { kernel: 5, stride: 1, pad: 0, out: 16 },
            Blueprint::Relu,
            Blueprint::Pool { window: 2, stride: 2 },
            Blueprint::Conv { kernel: 5, stride: 1, pad: 0, out: 32 },
            Blueprint::Relu,
            Blueprint::Pool { window: 2, stride: 2 },
            Blueprint::Flatten,
            Blueprint::Fc { outputs: 128 },
            Blueprint::Relu,
            Blueprint::FcClasses,
            Blueprint::Softmax,
        ])
        .expect("reference architecture is shape-legal")
    }

    /// Flower-net: same template on 3x64x64 input with a strided first conv.
    /// The first conv uses kernel 4, stride 2, pad 1; an odd kernel with
    /// stride 2 cannot tile a 64-pixel side exactly.
    pub fn flower_net(class_count: usize) -> Network {
        Network::build(3, 64, class_count, &[
            Blueprint::Conv { kernel: 4, stride: 2, pad: 1, out: 16 },
            Blueprint::Relu,
            Blueprint::Pool { window: 2, stride: 2 },
            Blueprint::Conv { kernel: 5, stride: 1, pad: 0, out: 32 },
            Blueprint::Relu,
            Blueprint::Pool { window: 2, stride: 2 },
            Blueprint::Flatten,
            Blueprint::Fc { outputs: 128 },
            Blueprint::Relu,
            Blueprint::FcClasses,
            Blueprint::Softmax,
        ])
        .expect("reference architecture is shape-legal")
    }

    /// Assembles a network from a blueprint, resolving fc input widths from
    /// the shape chain. Weights are zero until `init_weights` or load.
    pub fn build(
        input_channels: usize,
        input_side: usize,
        class_count: usize,
        blueprint: &[Blueprint],
    ) -> Result<Network, ModelError> {
        let mut layers = Vec::new();
        let mut c = input_channels;
        let mut side = input_side;
        let mut flat = false;
        for bp in blueprint {
            match *bp {
                Blueprint::Conv { kernel, stride, pad, out } => {
                    let b = out_side(side, kernel, stride, pad).ok_or_else(|| {
                        ModelError::Invalid(format!(
                            "conv kernel {kernel} stride {stride} pad {pad} illegal on side {side}"
                        ))
                    })?;
                    let spec = ConvSpec { kernel, stride, pad, in_channels: c, out_channels: out };
                    layers.push(Layer {
                        kind: LayerKind::Conv(spec),
                        weights: Some(Tensor::zeros(out, c, kernel, kernel)),
                        bias: Some(vec![0.0; out]),
                    });
                    c = out;
                    side = b;
                }
                Blueprint::Relu => layers.push(Layer { kind: LayerKind::Relu, weights: None, bias: None }),
                Blueprint::Pool { window, stride } => {
                    let b = out_side(side, window, stride, 0).ok_or_else(|| {
                        ModelError::Invalid(format!("pool {window}/{stride} illegal on side {side}"))
                    })?;
                    layers.push(Layer { kind: LayerKind::MaxPool { window, stride }, weights: None, bias: None });
                    side = b;
                }
                Blueprint::Flatten => {
                    c *= side * side;
                    side = 1;
                    flat = true;
                    layers.push(Layer { kind: LayerKind::Flatten, weights: None, bias: None });
                }
                Blueprint::Fc { .. } | Blueprint::FcClasses if !flat => {
                    return Err(ModelError::Invalid("fc before flatten".into()));
                }
                Blueprint::Fc { outputs } => {
                    layers.push(Layer {
                        kind: LayerKind::Fc { inputs: c, outputs },
                        weights: Some(Tensor::zeros(outputs, c, 1, 1)),
                        bias: Some(vec![0.0; outputs]),
                    });
                    c = outputs;
                }
                Blueprint::FcClasses => {
                    layers.push(Layer {
                        kind: LayerKind::Fc { inputs: c, outputs: class_count },
                        weights: Some(Tensor::zeros(class_count, c, 1, 1)),
                        bias: Some(vec![0.0; class_count]),
                    });
                    c = class_count;
                }
                Blueprint::Softmax => layers.push(Layer { kind: LayerKind::Softmax, weights: None, bias: None }),
            }
        }
        let net = Network { layers, input_channels, input_side, class_count, classifier_tail_len: 2 };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers.len() < 2 || self.classifier_tail_len < 1 {
            return Err(ModelError::Invalid("network too short or tail unset".into()));
        }
        let n = self.layers.len();
        match (&self.layers[n - 2].kind, &self.layers[n - 1].kind) {
            (LayerKind::Fc { outputs, .. }, LayerKind::Softmax) if *outputs == self.class_count => {}
            _ => {
                return Err(ModelError::Invalid(
                    "network must end with fc(class_count) followed by softmax".into(),
                ))
            }
        }
        self.layer_shapes()?;
        Ok(())
    }

    /// Output (channels, height, width) of every layer, chained from the
    /// declared input size.
    pub fn layer_shapes(&self) -> Result<Vec<(usize, usize, usize)>, ModelError> {
        let mut c = self.input_channels;
        let mut h = self.input_side;
        let mut w = self.input_side;
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            match &layer.kind {
                LayerKind::Conv(spec) => {
                    if spec.in_channels != c {
                        return Err(ModelError::Invalid(format!("layer {i}: conv expects {} channels, gets {c}", spec.in_channels)));
                    }
                    let oh = out_side(h, spec.kernel, spec.stride, spec.pad);
                    let ow = out_side(w, spec.kernel, spec.stride, spec.pad);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) => {
                            c = spec.out_channels;
                            h = oh;
                            w = ow;
                        }
                        _ => return Err(ModelError::Invalid(format!("layer {i}: conv illegal on {h}x{w}"))),
                    }
                }
                LayerKind::Relu => {}
                LayerKind::MaxPool { window, stride } => {
                    let oh = out_side(h, *window, *stride, 0);
                    let ow = out_side(w, *window, *stride, 0);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) => {
                            h = oh;
                            w = ow;
                        }
                        _ => return Err(ModelError::Invalid(format!("layer {i}: pool illegal on {h}x{w}"))),
                    }
                }
                LayerKind::Flatten => {
                    c *= h * w;
                    h = 1;
                    w = 1;
                }
                LayerKind::Fc { inputs, outputs } => {
                    if *inputs != c || h != 1 || w != 1 {
                        return Err(ModelError::Invalid(format!("layer {i}: fc expects {inputs}x1x1, gets {c}x{h}x{w}")));
                    }
                    c = *outputs;
                }
                LayerKind::Softmax => {}
            }
            shapes.push((c, h, w));
        }
        Ok(shapes)
    }

    /// Seeded Glorot-uniform initialization: +-sqrt(6/(fan_in+fan_out)).
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            let (fan_in, fan_out) = match layer.kind {
                LayerKind::Conv(spec) => {
                    (spec.in_channels * spec.kernel * spec.kernel, spec.out_channels * spec.kernel * spec.kernel)
                }
                LayerKind::Fc { inputs, outputs } => (inputs, outputs),
                _ => continue,
            };
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            if let Some(w) = layer.weights.as_mut() {
                for v in w.data_mut() {
                    *v = rng.gen_range(-bound..bound) as f32;
                }
            }
            if let Some(b) = layer.bias.as_mut() {
                for v in b.iter_mut() {
                    *v = 0.0;
                }
            }
        }
    }

    /// Indices of conv/fc layers outside the classifier tail, in order.
    /// These are the layers that contribute descriptor entries.
    pub fn feature_layers(&self) -> Vec<usize> {
        let cut = self.layers.len() - self.classifier_tail_len;
        (0..cut).filter(|&i| self.layers[i].parametric()).collect()
    }

    pub fn check_feature(&self, f: FeatureId) -> Result<(), ModelError> {
        let layer = self.layers.get(f.layer).ok_or(ModelError::InvalidFeature {
            layer: f.layer,
            filter: f.filter,
            msg: "layer index out of range".into(),
        })?;
        match layer.unit_count() {
            Some(n) if f.filter < n => Ok(()),
            Some(n) => Err(ModelError::InvalidFeature {
                layer: f.layer,
                filter: f.filter,
                msg: format!("filter index out of range (layer has {n} units)"),
            }),
            None => Err(ModelError::InvalidFeature {
                layer: f.layer,
                filter: f.filter,
                msg: "layer is not conv or fc".into(),
            }),
        }
    }

    /// Forward pass. With `capture`, per-layer outputs and pooling switches
    /// are retained for descriptor extraction and deconvnet backward passes.
    pub fn forward(&self, image: &Tensor, capture: bool) -> Result<ActivationTrace, ModelError> {
        if image.height() != self.input_side || image.width() != self.input_side {
            return Err(ModelError::WrongInputSide { got: image.height(), want: self.input_side });
        }
        if image.channels() != self.input_channels {
            return Err(ModelError::Invalid(format!(
                "image has {} channels, network expects {}",
                image.channels(),
                self.input_channels
            )));
        }
        let mut cur = image.clone();
        let mut outputs = Vec::new();
        let mut switches = Vec::new();
        let mut logits = Vec::new();
        for layer in &self.layers {
            let mut sw = None;
            cur = match &layer.kind {
                LayerKind::Conv(spec) => {
                    conv2d(&cur, layer.weights.as_ref().unwrap(), layer.bias.as_ref().unwrap(), spec)?
                }
                LayerKind::Relu => tensor::relu(&cur),
                LayerKind::MaxPool { window, stride } => {
                    let (out, s) = maxpool2d(&cur, *window, *stride)?;
                    sw = Some(s);
                    out
                }
                LayerKind::Flatten => {
                    let (n, c, h, w) = cur.shape();
                    cur.reshaped(n, c * h * w, 1, 1)?
                }
                LayerKind::Fc { inputs: _, outputs: o } => {
                    let w = layer.weights.as_ref().unwrap();
                    let b = layer.bias.as_ref().unwrap();
                    let spec = ConvSpec { kernel: 1, stride: 1, pad: 0, in_channels: cur.channels(), out_channels: *o };
                    conv2d(&cur, w, b, &spec)?
                }
                LayerKind::Softmax => {
                    logits = cur.data().to_vec();
                    let p = softmax(cur.data());
                    Tensor::from_vec(cur.shape(), p.clone())?
                }
            };
            if capture {
                outputs.push(cur.clone());
                switches.push(sw);
            }
        }
        let probs = cur.data().to_vec();
        let predicted = argmax_lowest(&logits);
        Ok(ActivationTrace { input: image.clone(), outputs, switches, logits, probs, predicted })
    }

    /// Copy with the listed filters' weights and bias zeroed, so their
    /// outgoing activations are zero for every input.
    pub fn zero_filters(&self, features: &[FeatureId]) -> Result<Network, ModelError> {
        for &f in features {
            self.check_feature(f)?;
        }
        let mut net = self.clone();
        for &f in features {
            let layer = &mut net.layers[f.layer];
            if let Some(w) = layer.weights.as_mut() {
                for ic in 0..w.channels() {
                    let plane = w.plane_mut(f.filter, ic);
                    for v in plane.iter_mut() {
                        *v = 0.0;
                    }
                }
            }
            if let Some(b) = layer.bias.as_mut() {
                b[f.filter] = 0.0;
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let file = File::create(path).map_err(|e| ModelError::Io { path: path.to_path_buf(), source: e })?;
        let mut w = BufWriter::new(file);
        let io = |e| ModelError::Io { path: path.to_path_buf(), source: e };
        w.write_all(b"LLNET1\n").map_err(io)?;
        let mut header = String::new();
        header.push_str(&format!("input {} {}\n", self.input_channels, self.input_side));
        header.push_str(&format!("classes {}\n", self.class_count));
        header.push_str(&format!("tail {}\n", self.classifier_tail_len));
        for layer in &self.layers {
            match &layer.kind {
                LayerKind::Conv(s) => header.push_str(&format!(
                    "layer conv {} {} {} {} {}\n",
                    s.in_channels, s.out_channels, s.kernel, s.stride, s.pad
                )),
                LayerKind::Relu => header.push_str("layer relu\n"),
                LayerKind::MaxPool { window, stride } => header.push_str(&format!("layer pool {window} {stride}\n")),
                LayerKind::Flatten => header.push_str("layer flatten\n"),
                LayerKind::Fc { inputs, outputs } => header.push_str(&format!("layer fc {inputs} {outputs}\n")),
                LayerKind::Softmax => header.push_str("layer softmax\n"),
            }
        }
        w.write_all(header.as_bytes()).map_err(io)?;
        w.write_all(b"\0BLOB\0").map_err(io)?;
        for layer in &self.layers {
            if !layer.parametric() {
                continue;
            }
            let weights = layer.weights.as_ref().unwrap();
            w.write_u64::<LittleEndian>((weights.data().len() * 4) as u64).map_err(io)?;
            for &v in weights.data() {
                w.write_f32::<LittleEndian>(v).map_err(io)?;
            }
            let bias = layer.bias.as_ref().unwrap();
            w.write_u64::<LittleEndian>((bias.len() * 4) as u64).map_err(io)?;
            for &v in bias {
                w.write_f32::<LittleEndian>(v).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Network, ModelError> {
        let file = File::open(path).map_err(|e| ModelError::Io { path: path.to_path_buf(), source: e })?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| ModelError::Io { path: path.to_path_buf(), source: e })?;
        Network::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Network, ModelError> {
        const MAGIC: &[u8] = b"LLNET1\n";
        const SEP: &[u8] = b"\0BLOB\0";
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ModelError::Format { offset: 0, msg: "missing LLNET1 magic".into() });
        }
        let sep_pos = bytes
            .windows(SEP.len())
            .position(|w| w == SEP)
            .ok_or(ModelError::Format { offset: MAGIC.len() as u64, msg: "missing blob separator".into() })?;
        let header = std::str::from_utf8(&bytes[MAGIC.len()..sep_pos])
            .map_err(|e| ModelError::Format { offset: MAGIC.len() as u64 + e.valid_up_to() as u64, msg: "header is not UTF-8".into() })?;

        let mut input_channels = 0usize;
        let mut input_side = 0usize;
        let mut class_count = 0usize;
        let mut tail = 2usize;
        let mut layers: Vec<Layer> = Vec::new();
        for line in header.lines() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let parse = |s: &str| -> Result<usize, ModelError> {
                s.parse().map_err(|_| ModelError::Format { offset: MAGIC.len() as u64, msg: format!("bad number '{s}' in header line '{line}'") })
            };
            match parts.as_slice() {
                ["input", c, s] => {
                    input_channels = parse(c)?;
                    input_side = parse(s)?;
                }
                ["classes", c] => class_count = parse(c)?,
                ["tail", t] => tail = parse(t)?,
                ["layer", "conv", ic, oc, k, s, p] => {
                    let spec = ConvSpec {
                        kernel: parse(k)?,
                        stride: parse(s)?,
                        pad: parse(p)?,
                        in_channels: parse(ic)?,
                        out_channels: parse(oc)?,
                    };
                    layers.push(Layer {
                        kind: LayerKind::Conv(spec),
                        weights: Some(Tensor::zeros(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)),
                        bias: Some(vec![0.0; spec.out_channels]),
                    });
                }
                ["layer", "relu"] => layers.push(Layer { kind: LayerKind::Relu, weights: None, bias: None }),
                ["layer", "pool", w, s] => layers.push(Layer {
                    kind: LayerKind::MaxPool { window: parse(w)?, stride: parse(s)? },
                    weights: None,
                    bias: None,
                }),
                ["layer", "flatten"] => layers.push(Layer { kind: LayerKind::Flatten, weights: None, bias: None }),
                ["layer", "fc", i, o] => {
                    let (i, o) = (parse(i)?, parse(o)?);
                    layers.push(Layer {
                        kind: LayerKind::Fc { inputs: i, outputs: o },
                        weights: Some(Tensor::zeros(o, i, 1, 1)),
                        bias: Some(vec![0.0; o]),
                    });
                }
                ["layer", "softmax"] => layers.push(Layer { kind: LayerKind::Softmax, weights: None, bias: None }),
                [] => {}
                _ => {
                    return Err(ModelError::Format { offset: MAGIC.len() as u64, msg: format!("unrecognized header line '{line}'") })
                }
            }
        }

        let mut offset = sep_pos + SEP.len();
        let mut read_blob = |want_bytes: usize| -> Result<Vec<f32>, ModelError> {
            if bytes.len() < offset + 8 {
                return Err(ModelError::Format { offset: offset as u64, msg: format!("expected 8-byte length prefix, file ends at {}", bytes.len()) });
            }
            let len = u64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap()) as usize;
            offset += 8;
            if len != want_bytes {
                return Err(ModelError::Format { offset: offset as u64, msg: format!("blob length {len} != expected {want_bytes}") });
            }
            if bytes.len() < offset + len {
                return Err(ModelError::Format { offset: offset as u64, msg: format!("blob of {len} bytes truncated; file ends at {} ({} bytes short)", bytes.len(), offset + len - bytes.len()) });
            }
            let mut vals = Vec::with_capacity(len / 4);
            for chunk in bytes[offset..offset + len].chunks_exact(4) {
                vals.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            offset += len;
            Ok(vals)
        };

        for layer in &mut layers {
            if !layer.parametric() {
                continue;
            }
            let wshape = layer.weights.as_ref().unwrap().shape();
            let wlen = wshape.0 * wshape.1 * wshape.2 * wshape.3;
            let wdata = read_blob(wlen * 4)?;
            layer.weights = Some(Tensor::from_vec(wshape, wdata)?);
            let blen = layer.bias.as_ref().unwrap().len();
            layer.bias = Some(read_blob(blen * 4)?);
        }
        if offset != bytes.len() {
            return Err(ModelError::Format { offset: offset as u64, msg: format!("{} trailing bytes after last blob", bytes.len() - offset) });
        }

        let net = Network { layers, input_channels, input_side, class_count, classifier_tail_len: tail };
        net.validate()?;
        Ok(net)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Blueprint {
    Conv { kernel: usize, stride: usize, pad: usize, out: usize },
    Relu,
    Pool { window: usize, stride: usize },
    Flatten,
    Fc { outputs: usize },
    FcClasses,
    Softmax,
}

#[derive(Debug, Clone)]
pub struct Hyperparams {
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop early once held-out accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f32,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 32,
            epochs: 20,
            target_accuracy: None,
            lr_decay: 0.95,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub epoch_losses: Vec<f64>,
    pub final_eval_accuracy: Option<f64>,
}

type Grads = Vec<Option<(Tensor, Vec<f32>)>>;

/// Backpropagates cross-entropy loss for one sample; accumulates parameter
/// gradients into `grads` and returns the sample loss.
fn backprop_sample(
    net: &Network,
    trace: &ActivationTrace,
    label: usize,
    grads: &mut Grads,
) -> Result<f64, ModelError> {
    let loss = -((trace.probs[label] as f64).max(1e-12)).ln();
    // combined softmax + cross-entropy gradient at the logits
    let mut dlogits: Vec<f32> = trace.probs.clone();
    dlogits[label] -= 1.0;
    let nlayers = net.layers.len();
    let logits_shape = trace.outputs[nlayers - 2].shape();
    let mut signal = Tensor::from_vec(logits_shape, dlogits)?;

    // walk backwards, skipping the softmax layer (handled above)
    for i in (0..nlayers - 1).rev() {
        let layer = &net.layers[i];
        let input = if i == 0 { &trace.input } else { &trace.outputs[i - 1] };
        signal = match &layer.kind {
            LayerKind::Conv(spec) => {
                let w = layer.weights.as_ref().unwrap();
                let (dw, db) = conv2d_weight_grad(input, &signal, spec)?;
                accumulate(grads, i, dw, db);
                conv2d_transpose(&signal, w, spec)?
            }
            LayerKind::Fc { inputs: _, outputs } => {
                let w = layer.weights.as_ref().unwrap();
                let spec = ConvSpec { kernel: 1, stride: 1, pad: 0, in_channels: input.channels(), out_channels: *outputs };
                let (dw, db) = conv2d_weight_grad(input, &signal, &spec)?;
                accumulate(grads, i, dw, db);
                conv2d_transpose(&signal, w, &spec)?
            }
            LayerKind::Relu => {
                let mut out = signal;
                for (v, &x) in out.data_mut().iter_mut().zip(input.data()) {
                    if x <= 0.0 {
                        *v = 0.0;
                    }
                }
                out
            }
            LayerKind::MaxPool { .. } => {
                let sw = trace.switches[i].as_ref().expect("pool layer recorded switches");
                maxunpool2d(&signal, sw)?
            }
            LayerKind::Flatten => {
                let (n, c, h, w) = input.shape();
                signal.reshaped(n, c, h, w)?
            }
            LayerKind::Softmax => unreachable!("softmax handled with the loss"),
        };
    }
    Ok(loss)
}

fn accumulate(grads: &mut Grads, i: usize, dw: Tensor, db: Vec<f32>) {
    match &mut grads[i] {
        Some((gw, gb)) => {
            for (a, b) in gw.data_mut().iter_mut().zip(dw.data()) {
                *a += *b;
            }
            for (a, b) in gb.iter_mut().zip(&db) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some((dw, db)),
    }
}

/// Cross-entropy SGD with momentum; fully deterministic for a fixed seed.
pub fn train(
    net: &Network,
    dataset: &LabeledDataset,
    hp: &Hyperparams,
    seed: u64,
    eval: Option<&LabeledDataset>,
) -> Result<(Network, TrainReport), ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut velocity: Grads = vec![None; net.layers.len()];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut lr = hp.learning_rate;
    let mut report = TrainReport { epochs_run: 0, epoch_losses: Vec::new(), final_eval_accuracy: None };

    for _epoch in 0..hp.epochs {
        // Fisher-Yates with the run rng; deterministic replay
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(hp.batch_size.max(1)) {
            let mut grads: Grads = vec![None; net.layers.len()];
            for &idx in batch {
                let sample = &dataset.samples[idx];
                let trace = net.forward(&sample.image, true)?;
                epoch_loss += backprop_sample(&net, &trace, sample.label, &mut grads)?;
            }
            let scale = 1.0 / batch.len() as f32;
            for (i, grad) in grads.iter().enumerate() {
                let Some((dw, db)) = grad else { continue };
                let (vw, vb) = velocity[i].get_or_insert_with(|| {
                    (Tensor::zeros(dw.shape().0, dw.shape().1, dw.shape().2, dw.shape().3), vec![0.0; db.len()])
                });
                for (v, g) in vw.data_mut().iter_mut().zip(dw.data()) {
                    *v = hp.momentum * *v - lr * g * scale;
                }
                for (v, g) in vb.iter_mut().zip(db) {
                    *v = hp.momentum * *v - lr * g * scale;
                }
                let layer = &mut net.layers[i];
                for (w, v) in layer.weights.as_mut().unwrap().data_mut().iter_mut().zip(vw.data()) {
                    *w += v;
                }
                for (b, v) in layer.bias.as_mut().unwrap().iter_mut().zip(vb.iter()) {
                    *b += v;
                }
            }
        }
        report.epochs_run += 1;
        report.epoch_losses.push(epoch_loss / dataset.len() as f64);
        lr *= hp.lr_decay;
        if let (Some(target), Some(eval_set)) = (hp.target_accuracy, eval) {
            let acc = accuracy(&net, eval_set)?;
            report.final_eval_accuracy = Some(acc);
            if acc >= target {
                break;
            }
        }
    }
    if report.final_eval_accuracy.is_none() {
        if let Some(eval_set) = eval {
            report.final_eval_accuracy = Some(accuracy(&net, eval_set)?);
        }
    }
    Ok((net, report))
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn accuracy(net: &Network, dataset: &LabeledDataset) -> Result<f64, ModelError> {
    let mut correct = 0usize;
    for sample in &dataset.samples {
        let trace = net.forward(&sample.image, false)?;
        if trace.predicted == sample.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}
