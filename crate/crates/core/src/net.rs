//! VGG-style dream network: architecture description, weights file and the
//! feature/logit entry points used by the losses.
//!
//! Convolutions are always "same" convolutions with reflect-101 mirror
//! padding, and pooling layers are 2x2 average pools.
//!
//! # Weights file
//!
//! Little-endian, in this order:
//!
//! ```text
//! "LDW1"                 4 bytes
//! record count           u32
//! per record:
//!   layer index          u32
//!   role                 u8   (0 = kernel, 1 = bias)
//!   rank                 u8
//!   dims                 u32 x rank
//!   payload              f32 x product(dims)
//! ```
//!
//! [`save_weights`] writes records in ascending layer order, kernel before
//! bias. The architecture lives in a separate TOML file ([`NetworkSpec`]).

use std::collections::BTreeMap;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg32;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"LDW1";
const FORMAT: &str = "weights";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        #[serde(default = "default_true")]
        relu: bool,
    },
    Pool,
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
        #[serde(default)]
        relu: bool,
    },
}

fn default_true() -> bool {
    true
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }

    /// Expected `(kernel, bias)` shapes for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv {
                kernel,
                in_channels,
                out_channels,
                ..
            } => Some((
                vec![kernel, kernel, in_channels, out_channels],
                vec![out_channels],
            )),
            LayerSpec::Dense {
                inputs, outputs, ..
            } => Some((vec![inputs, outputs], vec![outputs])),
            _ => None,
        }
    }
}

/// Activation shape after a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Side length `T` of the square `T x T x 3` input.
    pub input_size: usize,
    /// Per-channel means subtracted from `[0, 1]` pixels.
    pub means: Vec<f32>,
    pub class_count: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: NetworkSpec =
            toml::from_str(text).map_err(|e| FormatError::Spec(e.to_string()))?;
        spec.infer_shapes()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("network spec serializes")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = read_file(path)?;
        let text = String::from_utf8(text)
            .map_err(|_| FormatError::Spec("spec file is not UTF-8".into()))?;
        Self::from_toml(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// Output shape of every layer, validating the whole stack.
    pub fn infer_shapes(&self) -> Result<Vec<ActShape>> {
        let bad = |msg: String| Error::Format(FormatError::Spec(msg));
        if self.input_size == 0 {
            return Err(bad("input_size must be positive".into()));
        }
        if self.means.len() != 3 {
            return Err(bad(format!("expected 3 channel means, found {}", self.means.len())));
        }
        let mut shape = ActShape::Spatial {
            h: self.input_size,
            w: self.input_size,
            c: 3,
        };
        let mut flattened = false;
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (*layer, shape) {
                (
                    LayerSpec::Conv {
                        kernel,
                        in_channels,
                        out_channels,
                        ..
                    },
                    ActShape::Spatial { h, w, c },
                ) => {
                    if in_channels != c {
                        return Err(bad(format!(
                            "layer {i}: conv expects {in_channels} channels, input has {c}"
                        )));
                    }
                    if kernel % 2 == 0 || out_channels == 0 {
                        return Err(bad(format!(
                            "layer {i}: conv needs an odd kernel and at least one filter"
                        )));
                    }
                    if kernel / 2 >= h.min(w) {
                        return Err(bad(format!(
                            "layer {i}: kernel {kernel} too large for {h}x{w} mirror padding"
                        )));
                    }
                    ActShape::Spatial {
                        h,
                        w,
                        c: out_channels,
                    }
                }
                (LayerSpec::Pool, ActShape::Spatial { h, w, c }) => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(bad(format!("layer {i}: pooling needs even size, got {h}x{w}")));
                    }
                    ActShape::Spatial {
                        h: h / 2,
                        w: w / 2,
                        c,
                    }
                }
                (LayerSpec::Flatten, ActShape::Spatial { h, w, c }) => {
                    if flattened {
                        return Err(bad(format!("layer {i}: second flatten")));
                    }
                    flattened = true;
                    ActShape::Flat(h * w * c)
                }
                (LayerSpec::Dense { inputs, outputs, .. }, ActShape::Flat(n)) => {
                    if inputs != n || outputs == 0 {
                        return Err(bad(format!(
                            "layer {i}: dense expects {inputs} inputs, previous layer gives {n}"
                        )));
                    }
                    ActShape::Flat(outputs)
                }
                (layer, shape) => {
                    return Err(bad(format!(
                        "layer {i}: {layer:?} cannot follow an activation of shape {shape:?}"
                    )))
                }
            };
            shapes.push(shape);
        }
        match shape {
            ActShape::Flat(n) if n == self.class_count => Ok(shapes),
            other => Err(bad(format!(
                "final activation {other:?} does not match class_count {}",
                self.class_count
            ))),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(LayerSpec::param_shapes)
            .map(|(k, b)| k.iter().product::<usize>() + b.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Parameters keyed by layer index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Weights {
    pub layers: BTreeMap<usize, LayerParams>,
}

impl Weights {
    /// Checks that every parameterized layer has exactly its expected
    /// kernel and bias shapes and that no other layer carries parameters.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        for &idx in self.layers.keys() {
            if !spec.layers.get(idx).is_some_and(LayerSpec::is_parameterized) {
                return Err(FormatError::WeightRecord(format!(
                    "layer {idx} has no parameters in the network description"
                ))
                .into());
            }
        }
        for (idx, layer) in spec.layers.iter().enumerate() {
            let Some((ks, bs)) = layer.param_shapes() else {
                continue;
            };
            let params = self.layers.get(&idx).ok_or_else(|| {
                FormatError::WeightRecord(format!("layer {idx} has no parameters"))
            })?;
            for (role, expected, found) in [
                ("kernel", &ks, params.kernel.shape()),
                ("bias", &bs, params.bias.shape()),
            ] {
                if expected.as_slice() != found {
                    return Err(FormatError::WeightShape {
                        layer: idx,
                        role,
                        expected: expected.clone(),
                        found: found.to_vec(),
                    }
                    .into());
                }
            }
        }
        Ok(())
    }

    /// He-style uniform initialisation with zero biases.
    pub fn random(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = Pcg32::seed_from_u64(seed);
        let mut layers = BTreeMap::new();
        for (idx, layer) in spec.layers.iter().enumerate() {
            let Some((ks, bs)) = layer.param_shapes() else {
                continue;
            };
            let fan_in: usize = ks[..ks.len() - 1].iter().product();
            let limit = (6.0 / fan_in as f32).sqrt();
            let kernel = Tensor::from_fn(&ks, |_| rng.random_range(-limit..limit));
            let bias = Tensor::zeros(&bs);
            layers.insert(idx, LayerParams { kernel, bias });
        }
        Self { layers }
    }
}

pub fn encode_weights(spec: &NetworkSpec, weights: &Weights) -> Result<Vec<u8>> {
    weights
        .validate(spec)
        .map_err(|e| Error::Contract(format!("save_weights: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&((weights.layers.len() * 2) as u32).to_le_bytes());
    for (&idx, params) in &weights.layers {
        for (role, t) in [(0u8, &params.kernel), (1u8, &params.bias)] {
            out.extend_from_slice(&(idx as u32).to_le_bytes());
            out.push(role);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated {
                format: FORMAT,
                needed: end,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes a weights file and checks it against `spec`.
pub fn decode_weights(bytes: &[u8], spec: &NetworkSpec) -> Result<Weights> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| FormatError::BadMagic { format: FORMAT })? != WEIGHTS_MAGIC {
        return Err(FormatError::BadMagic { format: FORMAT }.into());
    }
    let count = r.u32()?;
    let mut kernels: BTreeMap<usize, Tensor> = BTreeMap::new();
    let mut biases: BTreeMap<usize, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let layer = r.u32()? as usize;
        let role = r.u8()?;
        let rank = r.u8()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if rank == 0 || dims.contains(&0) {
            return Err(FormatError::WeightRecord(format!(
                "layer {layer}: invalid dims {dims:?}"
            ))
            .into());
        }
        let numel: usize = dims.iter().product();
        let payload = r.take(numel.checked_mul(4).ok_or_else(|| {
            FormatError::WeightRecord(format!("layer {layer}: dims {dims:?} overflow"))
        })?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(dims, data)?;
        let slot = match role {
            0 => &mut kernels,
            1 => &mut biases,
            other => {
                return Err(FormatError::WeightRecord(format!(
                    "layer {layer}: unknown tensor role {other}"
                ))
                .into())
            }
        };
        if slot.insert(layer, tensor).is_some() {
            return Err(FormatError::WeightRecord(format!(
                "layer {layer}: duplicate {} record",
                if role == 0 { "kernel" } else { "bias" }
            ))
            .into());
        }
    }
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes {
            format: FORMAT,
            extra: bytes.len() - r.pos,
        }
        .into());
    }
    let mut layers = BTreeMap::new();
    for (idx, kernel) in kernels {
        let bias = biases.remove(&idx).ok_or_else(|| {
            FormatError::WeightRecord(format!("layer {idx}: kernel without bias"))
        })?;
        layers.insert(idx, LayerParams { kernel, bias });
    }
    if let Some((idx, _)) = biases.into_iter().next() {
        return Err(FormatError::WeightRecord(format!("layer {idx}: bias without kernel")).into());
    }
    let weights = Weights { layers };
    weights.validate(spec)?;
    Ok(weights)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })
}

/// Reads a network spec (TOML) and its weights file.
pub fn load_weights(spec_path: &Path, weights_path: &Path) -> Result<(NetworkSpec, Weights)> {
    let spec = NetworkSpec::read(spec_path)?;
    let weights = decode_weights(&read_file(weights_path)?, &spec)?;
    Ok((spec, weights))
}

pub fn save_weights(spec: &NetworkSpec, weights: &Weights, path: &Path) -> Result<()> {
    let bytes = encode_weights(spec, weights)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// A validated, immutable network.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    weights: Weights,
    shapes: Vec<ActShape>,
}

impl Network {
    pub fn new(spec: NetworkSpec, weights: Weights) -> Result<Self> {
        let shapes = spec.infer_shapes()?;
        weights.validate(&spec)?;
        Ok(Self {
            spec,
            weights,
            shapes,
        })
    }

    pub fn load(spec_path: &Path, weights_path: &Path) -> Result<Self> {
        let (spec, weights) = load_weights(spec_path, weights_path)?;
        Self::new(spec, weights)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn input_size(&self) -> usize {
        self.spec.input_size
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    pub fn layer_shapes(&self) -> &[ActShape] {
        &self.shapes
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let t = self.spec.input_size;
        if image.shape() != [t, t, 3] {
            return Err(Error::Shape(format!(
                "network input must be {t}x{t}x3, found {:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    /// Records layers `0..=last` on the tape, returning each layer's output.
    pub fn forward_until(&self, tape: &mut Tape, image: Var, last: usize) -> Result<Vec<Var>> {
        self.check_input(tape.value(image))?;
        let mut x = tape.sub_channels(image, &self.spec.means)?;
        let mut outputs = Vec::with_capacity(last + 1);
        for (idx, layer) in self.spec.layers.iter().enumerate().take(last + 1) {
            x = match *layer {
                LayerSpec::Conv { kernel, relu, .. } => {
                    let p = &self.weights.layers[&idx];
                    let k = tape.constant(p.kernel.clone());
                    let b = tape.constant(p.bias.clone());
                    let pad = (kernel - 1) / 2;
                    let padded = tape.mirror_pad(x, pad, pad)?;
                    let y = tape.conv2d(padded, k, b)?;
                    if relu {
                        tape.relu(y)
                    } else {
                        y
                    }
                }
                LayerSpec::Pool => tape.avg_pool2(x)?,
                // dense consumes the row-major buffer directly
                LayerSpec::Flatten => x,
                LayerSpec::Dense { relu, .. } => {
                    let p = &self.weights.layers[&idx];
                    let w = tape.constant(p.kernel.clone());
                    let b = tape.constant(p.bias.clone());
                    let y = tape.dense(x, w, b)?;
                    if relu {
                        tape.relu(y)
                    } else {
                        y
                    }
                }
            };
            outputs.push(x);
        }
        Ok(outputs)
    }

    /// Feature map `map` of layer `layer` (a conv or pool output), as an
    /// `H x W` tensor on the tape.
    pub fn forward_features(
        &self,
        tape: &mut Tape,
        image: Var,
        layer: usize,
        map: usize,
    ) -> Result<Var> {
        match self.spec.layers.get(layer) {
            Some(LayerSpec::Conv { .. } | LayerSpec::Pool) => {}
            Some(other) => {
                return Err(Error::Index(format!(
                    "layer {layer} ({other:?}) has no feature maps"
                )))
            }
            None => {
                return Err(Error::Index(format!(
                    "layer {layer} out of range for {} layers",
                    self.spec.layers.len()
                )))
            }
        }
        let outs = self.forward_until(tape, image, layer)?;
        tape.channel(outs[layer], map)
    }

    /// Pre-softmax class scores on the tape.
    pub fn forward_logits(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let last = self.spec.layers.len() - 1;
        let outs = self.forward_until(tape, image, last)?;
        Ok(outs[last])
    }

    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let l = self.forward_logits(&mut tape, x)?;
        Ok(tape.take(l))
    }

    pub fn features(&self, image: &Tensor, layer: usize, map: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let f = self.forward_features(&mut tape, x, layer, map)?;
        Ok(tape.take(f))
    }
}

/// Small two-block network used by tests, benches and the `init-weights`
/// command: `conv3(3->c1) pool conv3(c1->c2) pool flatten dense`.
pub fn micro_spec(input_size: usize, c1: usize, c2: usize, classes: usize) -> NetworkSpec {
    let q = input_size / 4;
    NetworkSpec {
        input_size,
        means: vec![0.485, 0.456, 0.406],
        class_count: classes,
        layers: vec![
            LayerSpec::Conv {
                kernel: 3,
                in_channels: 3,
                out_channels: c1,
                relu: true,
            },
            LayerSpec::Pool,
            LayerSpec::Conv {
                kernel: 3,
                in_channels: c1,
                out_channels: c2,
                relu: true,
            },
            LayerSpec::Pool,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: q * q * c2,
                outputs: classes,
                relu: false,
            },
        ],
    }
}
