//! The compact UNet-like localisation network.
//!
//! Encoder levels are two 3x3x3 convolutions (leaky-ReLU) followed by 2x
//! average pooling; the bottleneck adds channel-wise spatial dropout; the
//! decoder mirrors the encoder with resample convolutions
//! (nearest-neighbour upsample + convolution) and skip joins that are
//! either plain concatenations or attention-gated concatenations. A final
//! 1x1x1 convolution produces the single-channel heatmap with a linear
//! output.
//!
//! Parameter registration order is a pure function of the config, which is
//! what keeps checkpoints stable.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::graph::{
    add, avgpool2, concat_channels, conv1x1, conv3d, leaky_relu, mul_channel_gate, sigmoid,
    spatial_dropout, upsample_nn2, GraphError, Mode, Scalar, Tensor,
};
use crate::volume::{Dims, Volume};

/// Negative slope of every activation in the network.
pub const ACT_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocatorConfig {
    /// Number of encoder/decoder resolution levels (>= 2).
    pub levels: usize,
    /// Channel width of the top level; doubles per level.
    pub base_channels: usize,
    /// Attention-gated skip connections instead of plain concatenation.
    pub attention: bool,
    /// Channel-dropout probability at the bottleneck.
    pub dropout_p: f64,
    /// Expected input dims (z, y, x); must be divisible by 2^levels.
    pub in_dims: Dims,
}

impl Default for LocatorConfig {
    fn default() -> Self {
        LocatorConfig {
            levels: 3,
            base_channels: 8,
            attention: true,
            dropout_p: 0.1,
            in_dims: [64, 128, 128],
        }
    }
}

impl LocatorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.levels < 2 {
            return Err(ModelError::BadConfig(format!(
                "levels must be >= 2, got {}",
                self.levels
            )));
        }
        if self.base_channels == 0 {
            return Err(ModelError::BadConfig("base_channels must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::BadConfig(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        let div = 1usize << self.levels;
        for (axis, &d) in self.in_dims.iter().enumerate() {
            if d == 0 || d % div != 0 {
                return Err(ModelError::BadConfig(format!(
                    "in_dims[{axis}] = {d} must be a positive multiple of 2^levels = {div}"
                )));
            }
        }
        Ok(())
    }

    /// Channel width at encoder level `l`.
    fn width(&self, l: usize) -> usize {
        self.base_channels << l
    }

    fn bottleneck_width(&self) -> usize {
        self.base_channels << self.levels
    }
}

#[derive(Debug)]
pub enum ModelError {
    BadConfig(String),
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    Graph(GraphError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::BadConfig(msg) => write!(f, "bad model config: {msg}"),
            ModelError::InputShape { expected, got } => {
                write!(f, "input shape {got:?}, model expects {expected:?}")
            }
            ModelError::Graph(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<GraphError> for ModelError {
    fn from(e: GraphError) -> Self {
        ModelError::Graph(e)
    }
}

struct ConvBlock<T: Scalar> {
    weight: Tensor<T>,
    bias: Tensor<T>,
}

struct PointwiseConv<T: Scalar> {
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
}

/// Additive attention over a skip connection, gated by the coarser signal
/// from one level below.
pub struct AttentionGate<T: Scalar> {
    wg: PointwiseConv<T>,
    wx: PointwiseConv<T>,
    psi: PointwiseConv<T>,
}

impl<T: Scalar> AttentionGate<T> {
    /// `alpha = sigmoid(psi(leaky_relu(Wg g_up + Wx skip + b)))`;
    /// returns `skip * alpha` broadcast over channels.
    pub fn apply(&self, skip: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>, GraphError> {
        let ss = skip.shape();
        let gs = gate.shape();
        if ss.len() != 5
            || gs.len() != 5
            || ss[0] != gs[0]
            || [gs[2] * 2, gs[3] * 2, gs[4] * 2] != [ss[2], ss[3], ss[4]]
        {
            return Err(GraphError::ShapeMismatch {
                op: "attention_gate",
                detail: format!("gate {gs:?} must be skip {ss:?} at half spatial resolution"),
            });
        }
        let g_up = upsample_nn2(gate)?;
        let gq = conv1x1(&g_up, &self.wg.weight, self.wg.bias.as_ref())?;
        let xq = conv1x1(skip, &self.wx.weight, None)?;
        let q = leaky_relu(&add(&gq, &xq)?, ACT_SLOPE);
        let alpha = sigmoid(&conv1x1(&q, &self.psi.weight, self.psi.bias.as_ref())?);
        mul_channel_gate(skip, &alpha)
    }
}

struct EncoderLevel<T: Scalar> {
    conv1: ConvBlock<T>,
    conv2: ConvBlock<T>,
}

struct DecoderLevel<T: Scalar> {
    up: ConvBlock<T>,
    attention: Option<AttentionGate<T>>,
    conv1: ConvBlock<T>,
    conv2: ConvBlock<T>,
}

/// The assembled network: config plus the ordered, named parameter set.
pub struct LocatorModel<T: Scalar> {
    config: LocatorConfig,
    encoder: Vec<EncoderLevel<T>>,
    bottleneck: (ConvBlock<T>, ConvBlock<T>),
    /// Indexed by level; traversed deepest-first during the forward pass.
    decoder: Vec<DecoderLevel<T>>,
    head: PointwiseConv<T>,
    names: Vec<String>,
}

/// He-uniform initialiser; draws are in f64 so the parameter stream is
/// identical across element types for a fixed seed.
struct ParamBuilder<'r, T: Scalar> {
    rng: &'r mut ChaCha8Rng,
    names: Vec<String>,
    _marker: std::marker::PhantomData<T>,
}

impl<'r, T: Scalar> ParamBuilder<'r, T> {
    fn conv3(&mut self, name: &str, cout: usize, cin: usize) -> ConvBlock<T> {
        let fan_in = cin * 27;
        let limit = (6.0 / fan_in as f64).sqrt();
        let weight = self.draw(&format!("{name}.weight"), vec![cout, cin, 3, 3, 3], limit);
        let bias = self.zeros(&format!("{name}.bias"), vec![cout]);
        ConvBlock { weight, bias }
    }

    fn conv1(&mut self, name: &str, cout: usize, cin: usize, with_bias: bool) -> PointwiseConv<T> {
        let limit = (6.0 / cin as f64).sqrt();
        let weight = self.draw(&format!("{name}.weight"), vec![cout, cin, 1, 1, 1], limit);
        let bias = with_bias.then(|| self.zeros(&format!("{name}.bias"), vec![cout]));
        PointwiseConv { weight, bias }
    }

    /// Zero-initialised pointwise conv: the gating projection starts
    /// neutral (alpha = 0.5 everywhere) and learns to deviate.
    fn conv1_zero(
        &mut self,
        name: &str,
        cout: usize,
        cin: usize,
        with_bias: bool,
    ) -> PointwiseConv<T> {
        let weight = self.zeros(&format!("{name}.weight"), vec![cout, cin, 1, 1, 1]);
        let bias = with_bias.then(|| self.zeros(&format!("{name}.bias"), vec![cout]));
        PointwiseConv { weight, bias }
    }

    fn draw(&mut self, name: &str, shape: Vec<usize>, limit: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(self.rng.random_range(-limit..limit)).expect("finite draw"))
            .collect();
        self.names.push(name.to_string());
        Tensor::param(shape, data)
    }

    fn zeros(&mut self, name: &str, shape: Vec<usize>) -> Tensor<T> {
        let n: usize = shape.iter().product();
        self.names.push(name.to_string());
        Tensor::param(shape, vec![T::zero(); n])
    }
}

/// Build a freshly initialised model; weights are He-uniform from the
/// seed, biases zero. The same seed always yields bit-identical parameters.
pub fn build_locator<T: Scalar>(
    config: &LocatorConfig,
    seed: u64,
) -> Result<LocatorModel<T>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pb = ParamBuilder::<T> {
        rng: &mut rng,
        names: Vec::new(),
        _marker: std::marker::PhantomData,
    };

    let mut encoder = Vec::with_capacity(config.levels);
    for l in 0..config.levels {
        let cin = if l == 0 { 1 } else { config.width(l - 1) };
        let c = config.width(l);
        encoder.push(EncoderLevel {
            conv1: pb.conv3(&format!("enc{l}.conv1"), c, cin),
            conv2: pb.conv3(&format!("enc{l}.conv2"), c, c),
        });
    }

    let cb = config.bottleneck_width();
    let bottleneck = (
        pb.conv3("bottleneck.conv1", cb, config.width(config.levels - 1)),
        pb.conv3("bottleneck.conv2", cb, cb),
    );

    let mut decoder_rev = Vec::with_capacity(config.levels);
    for l in (0..config.levels).rev() {
        let c = config.width(l);
        let below = if l == config.levels - 1 {
            cb
        } else {
            config.width(l + 1)
        };
        let up = pb.conv3(&format!("dec{l}.up"), c, below);
        let attention = config.attention.then(|| {
            let f_int = (c / 2).max(1);
            AttentionGate {
                wg: pb.conv1(&format!("dec{l}.att.wg"), f_int, below, true),
                wx: pb.conv1(&format!("dec{l}.att.wx"), f_int, c, false),
                psi: pb.conv1_zero(&format!("dec{l}.att.psi"), 1, f_int, true),
            }
        });
        decoder_rev.push(DecoderLevel {
            up,
            attention,
            conv1: pb.conv3(&format!("dec{l}.conv1"), c, 2 * c),
            conv2: pb.conv3(&format!("dec{l}.conv2"), c, c),
        });
    }
    // Store by level index; forward walks it deepest-first.
    decoder_rev.reverse();

    let head = pb.conv1("head", 1, config.width(0), true);
    let names = pb.names;

    Ok(LocatorModel {
        config: *config,
        encoder,
        bottleneck,
        decoder: decoder_rev,
        head,
        names,
    })
}

impl<T: Scalar> LocatorModel<T> {
    pub fn config(&self) -> &LocatorConfig {
        &self.config
    }

    /// All trainable tensors in registration order, paired with their
    /// stable names.
    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<Tensor<T>> = Vec::new();
        for level in &self.encoder {
            out.extend([
                level.conv1.weight.clone(),
                level.conv1.bias.clone(),
                level.conv2.weight.clone(),
                level.conv2.bias.clone(),
            ]);
        }
        for block in [&self.bottleneck.0, &self.bottleneck.1] {
            out.extend([block.weight.clone(), block.bias.clone()]);
        }
        for l in (0..self.decoder.len()).rev() {
            let d = &self.decoder[l];
            out.extend([d.up.weight.clone(), d.up.bias.clone()]);
            if let Some(att) = &d.attention {
                out.extend([att.wg.weight.clone(), att.wg.bias.clone().unwrap()]);
                out.push(att.wx.weight.clone());
                out.extend([att.psi.weight.clone(), att.psi.bias.clone().unwrap()]);
            }
            out.extend([
                d.conv1.weight.clone(),
                d.conv1.bias.clone(),
                d.conv2.weight.clone(),
                d.conv2.bias.clone(),
            ]);
        }
        out.push(self.head.weight.clone());
        out.extend(self.head.bias.clone());
        self.names.iter().cloned().zip(out).collect()
    }

    /// Parameter tensors without names, in registration order.
    pub fn param_tensors(&self) -> Vec<Tensor<T>> {
        self.parameters().into_iter().map(|(_, t)| t).collect()
    }

    /// The attention gate at a decoder level, when the config enables one.
    pub fn decoder_attention(&self, level: usize) -> Option<&AttentionGate<T>> {
        self.decoder.get(level).and_then(|d| d.attention.as_ref())
    }

    /// The tensors belonging to one attention gate, in registration order.
    pub fn attention_gate_params(&self, level: usize) -> Vec<Tensor<T>> {
        match self.decoder_attention(level) {
            Some(att) => vec![
                att.wg.weight.clone(),
                att.wg.bias.clone().expect("wg carries a bias"),
                att.wx.weight.clone(),
                att.psi.weight.clone(),
                att.psi.bias.clone().expect("psi carries a bias"),
            ],
            None => vec![],
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in self.parameters() {
            t.zero_grad();
        }
    }

    /// Run the network on a `[B, 1, z, y, x]` batch. Dropout is active in
    /// `Mode::Train` and draws from `rng`; eval mode is deterministic.
    pub fn forward<R: Rng>(
        &self,
        input: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor<T>, ModelError> {
        let d = self.config.in_dims;
        let s = input.shape();
        if s.len() != 5 || s[1] != 1 || [s[2], s[3], s[4]] != d {
            return Err(ModelError::InputShape {
                expected: vec![s.first().copied().unwrap_or(1), 1, d[0], d[1], d[2]],
                got: s.to_vec(),
            });
        }

        let mut x = input.clone();
        let mut skips = Vec::with_capacity(self.config.levels);
        for level in &self.encoder {
            x = leaky_relu(&conv3d(&x, &level.conv1.weight, &level.conv1.bias)?, ACT_SLOPE);
            x = leaky_relu(&conv3d(&x, &level.conv2.weight, &level.conv2.bias)?, ACT_SLOPE);
            skips.push(x.clone());
            x = avgpool2(&x)?;
        }

        let (b1, b2) = (&self.bottleneck.0, &self.bottleneck.1);
        x = leaky_relu(&conv3d(&x, &b1.weight, &b1.bias)?, ACT_SLOPE);
        x = leaky_relu(&conv3d(&x, &b2.weight, &b2.bias)?, ACT_SLOPE);
        x = spatial_dropout(&x, self.config.dropout_p, mode, rng)?;

        for l in (0..self.config.levels).rev() {
            let dec = &self.decoder[l];
            let gate = x.clone();
            x = conv3d(&upsample_nn2(&x)?, &dec.up.weight, &dec.up.bias)?;
            let skip = match &dec.attention {
                Some(att) => att.apply(&skips[l], &gate)?,
                None => skips[l].clone(),
            };
            x = concat_channels(&skip, &x)?;
            x = leaky_relu(&conv3d(&x, &dec.conv1.weight, &dec.conv1.bias)?, ACT_SLOPE);
            x = leaky_relu(&conv3d(&x, &dec.conv2.weight, &dec.conv2.bias)?, ACT_SLOPE);
        }

        Ok(conv1x1(&x, &self.head.weight, self.head.bias.as_ref())?)
    }

    /// Deterministic inference-mode forward.
    pub fn forward_eval(&self, input: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.forward(input, Mode::Eval, &mut rng)
    }
}

/// Stack single-channel volumes into a `[B, 1, z, y, x]` batch tensor.
pub fn volumes_to_batch<T: Scalar>(vols: &[&Volume]) -> Tensor<T> {
    assert!(!vols.is_empty(), "batch must contain at least one volume");
    let dims = vols[0].dims;
    let n = dims[0] * dims[1] * dims[2];
    let mut data = Vec::with_capacity(vols.len() * n);
    for v in vols {
        assert_eq!(v.dims, dims, "batch volumes must share dims");
        data.extend(v.data.iter().map(|&x| T::from_f32(x).expect("finite voxel")));
    }
    Tensor::leaf(vec![vols.len(), 1, dims[0], dims[1], dims[2]], data)
}

/// Split a `[B, 1, z, y, x]` prediction back into per-sample heatmaps.
pub fn batch_to_heatmaps<T: Scalar>(t: &Tensor<T>, spacing_mm: [f64; 3]) -> Vec<Volume> {
    let s = t.shape();
    assert_eq!(s.len(), 5);
    assert_eq!(s[1], 1);
    let dims = [s[2], s[3], s[4]];
    let n = dims[0] * dims[1] * dims[2];
    let data = t.data();
    (0..s[0])
        .map(|b| {
            let slice = &data[b * n..(b + 1) * n];
            Volume::new(
                dims,
                spacing_mm,
                slice
                    .iter()
                    .map(|&v| v.to_f32().expect("finite voxel"))
                    .collect(),
            )
            .expect("prediction grid is valid")
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GCKP0001";

/// A trained parameter snapshot, decoupled from the live graph so it can
/// cross threads and round-trip through disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: LocatorConfig,
    pub params: Vec<CheckpointParam>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config: LocatorConfig,
    params: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the f32 blob, in elements.
    offset: usize,
}

#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    Format(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "i/o error: {e}"),
            CheckpointError::Format(msg) => write!(f, "bad checkpoint: {msg}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

impl Checkpoint {
    pub fn from_model(model: &LocatorModel<f32>) -> Self {
        let params = model
            .parameters()
            .into_iter()
            .map(|(name, t)| CheckpointParam {
                name,
                shape: t.shape().to_vec(),
                data: t.to_vec(),
            })
            .collect();
        Checkpoint {
            config: *model.config(),
            params,
        }
    }

    /// Rebuild a live model; names and shapes must match the architecture
    /// the config describes.
    pub fn into_model(&self) -> Result<LocatorModel<f32>, CheckpointError> {
        let model = build_locator::<f32>(&self.config, 0)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        let live = model.parameters();
        if live.len() != self.params.len() {
            return Err(CheckpointError::Format(format!(
                "expected {} parameters for this config, file has {}",
                live.len(),
                self.params.len()
            )));
        }
        for ((name, tensor), saved) in live.iter().zip(self.params.iter()) {
            if *name != saved.name || tensor.shape() != saved.shape.as_slice() {
                return Err(CheckpointError::Format(format!(
                    "parameter mismatch: model has {name} {:?}, file has {} {:?}",
                    tensor.shape(),
                    saved.name,
                    saved.shape
                )));
            }
            tensor.data_mut().copy_from_slice(&saved.data);
        }
        Ok(model)
    }

    /// Serialized layout: magic, little-endian u32 manifest length, JSON
    /// manifest `{"config":..,"params":[{"name","shape","offset"},..]}`,
    /// then one contiguous little-endian f32 blob.
    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut writer = BufWriter::new(File::create(path)?);
        let mut entries = Vec::with_capacity(self.params.len());
        let mut offset = 0usize;
        for p in &self.params {
            entries.push(ManifestEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                offset,
            });
            offset += p.data.len();
        }
        let manifest = CheckpointManifest {
            config: self.config,
            params: entries,
        };
        let manifest_bytes =
            serde_json::to_vec(&manifest).expect("manifest serialization cannot fail");
        writer.write_all(CHECKPOINT_MAGIC)?;
        writer.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
        writer.write_all(&manifest_bytes)?;
        for p in &self.params {
            let mut buf = Vec::with_capacity(p.data.len() * 4);
            for &v in &p.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            writer.write_all(&buf)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        reader.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Format(format!(
                "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let mut len_bytes = [0u8; 4];
        reader.read_exact(&mut len_bytes)?;
        let mut manifest_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
        reader.read_exact(&mut manifest_bytes)?;
        let manifest: CheckpointManifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;

        let mut blob = Vec::new();
        reader.read_to_end(&mut blob)?;
        let total: usize = manifest
            .params
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        if blob.len() != total * 4 {
            return Err(CheckpointError::Format(format!(
                "blob holds {} bytes, manifest requires {}",
                blob.len(),
                total * 4
            )));
        }

        let mut params = Vec::with_capacity(manifest.params.len());
        for e in &manifest.params {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 4;
            let end = start + n * 4;
            if end > blob.len() {
                return Err(CheckpointError::Format(format!(
                    "parameter {} overruns the blob",
                    e.name
                )));
            }
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push(CheckpointParam {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data,
            });
        }
        Ok(Checkpoint {
            config: manifest.config,
            params,
        })
    }
}
