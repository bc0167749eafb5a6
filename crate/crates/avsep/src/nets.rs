//! Differentiable building blocks: the appearance encoder `A`, the sound
//! encoder-decoder `S`, the category classifier head, and parameter plumbing
//! shared by all of them (storage, initialization, checkpoints).
//!
//! Every network is a plain struct of parameter indices into a [`ParamStore`];
//! a forward pass binds those parameters onto a [`Tape`](crate::tensor::Tape)
//! so the same store can back multiple tied forward passes in one graph.

use std::collections::HashSet;
use std::io::Read as _;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AvsepError, Result};
use crate::tensor::{NodeId, Tape};

/// Default embedding width when the conditioning variant does not force K = C.
pub const DEFAULT_K: usize = 16;

/// Leaky-ReLU slope used throughout the networks.
pub const LEAKY_SLOPE: f64 = 0.1;

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Vec<(String, ArrayD<f64>)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Registers a tensor under a unique name; returns its index.
    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> usize {
        assert!(
            self.params.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
        self.params.push((name.to_string(), value));
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.params[idx].0
    }

    pub fn value(&self, idx: usize) -> &ArrayD<f64> {
        &self.params[idx].1
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut ArrayD<f64> {
        &mut self.params[idx].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.params.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|(_, v)| v.len()).sum()
    }

    /// Replaces values from a loaded checkpoint, matching by name.
    pub fn load_values(&mut self, tensors: &[(String, ArrayD<f64>)]) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(AvsepError::Checkpoint(format!(
                "parameter count mismatch: store has {}, checkpoint has {}",
                self.params.len(),
                tensors.len()
            )));
        }
        for (name, value) in tensors {
            let slot = self
                .params
                .iter_mut()
                .find(|(n, _)| n == name)
                .ok_or_else(|| AvsepError::Checkpoint(format!("unknown parameter {name}")))?;
            if slot.1.shape() != value.shape() {
                return Err(AvsepError::Checkpoint(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    slot.1.shape(),
                    value.shape()
                )));
            }
            slot.1 = value.clone();
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Records which tape leaves were created from which store parameters during
/// a forward pass, so gradients can be routed back to the store. The same
/// parameter may be bound more than once (weight tying across the two
/// sources of a mixture); its gradients are then summed.
#[derive(Debug, Default)]
pub struct Binder {
    pub bound: Vec<(usize, NodeId)>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, idx: usize) -> NodeId {
        let node = tape.leaf(store.value(idx).clone());
        self.bound.push((idx, node));
        node
    }

    /// Sums tape gradients per store parameter. Unbound parameters get zeros.
    pub fn collect(&self, store: &ParamStore, tape_grads: &[ArrayD<f64>]) -> Vec<ArrayD<f64>> {
        let mut out: Vec<ArrayD<f64>> = store
            .iter()
            .map(|(_, v)| ArrayD::zeros(v.raw_dim()))
            .collect();
        for &(idx, node) in &self.bound {
            out[idx] += &tape_grads[node];
        }
        out
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, shape: &[usize]) -> ArrayD<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(shape.to_vec(), || rng.random_range(-limit..limit))
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// A 2-D convolution layer: parameter indices plus geometry.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = he_uniform(rng, cin * k * k, &[cout, cin, k, k]);
        let b = Array1::<f64>::zeros(cout).into_dyn();
        Self {
            w: store.add(&format!("{name}.w"), w),
            b: store.add(&format!("{name}.b"), b),
            stride,
            pad,
        }
    }

    pub fn new_zeroed(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = ArrayD::<f64>::zeros(IxDyn(&[cout, cin, k, k]));
        let b = Array1::<f64>::zeros(cout).into_dyn();
        Self {
            w: store.add(&format!("{name}.w"), w),
            b: store.add(&format!("{name}.b"), b),
            stride,
            pad,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        x: NodeId,
    ) -> NodeId {
        let w = binder.bind(tape, store, self.w);
        let b = binder.bind(tape, store, self.b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// A depthwise 3x3 convolution layer.
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    pub w: usize,
    pub b: usize,
}

impl DepthwiseConv {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        let w = he_uniform(rng, 9, &[c, 3, 3]);
        let b = Array1::<f64>::zeros(c).into_dyn();
        Self {
            w: store.add(&format!("{name}.w"), w),
            b: store.add(&format!("{name}.b"), b),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        x: NodeId,
    ) -> NodeId {
        let w = binder.bind(tape, store, self.w);
        let b = binder.bind(tape, store, self.b);
        tape.depthwise_conv2d(x, w, b, 1, 1)
    }
}

/// A fully connected layer.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let w = he_uniform(rng, din, &[dout, din]);
        let b = Array1::<f64>::zeros(dout).into_dyn();
        Self {
            w: store.add(&format!("{name}.w"), w),
            b: store.add(&format!("{name}.b"), b),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        x: NodeId,
    ) -> NodeId {
        let w = binder.bind(tape, store, self.w);
        let b = binder.bind(tape, store, self.b);
        tape.linear(x, w, b)
    }
}

// ---------------------------------------------------------------------------
// Appearance encoder
// ---------------------------------------------------------------------------

/// Appearance encoder output: feature maps [K, H/16, W/16] and the
/// sigmoid-of-spatial-max embedding [K].
#[derive(Debug, Clone, Copy)]
pub struct AppearanceOut {
    pub maps: NodeId,
    pub embedding: NodeId,
}

/// Four stride-2 conv blocks (so the spatial contraction is exactly /16)
/// followed by a 1x1 projection to K channels.
#[derive(Debug, Clone)]
pub struct AppearanceNet {
    pub k: usize,
    blocks: Vec<Conv>,
    proj: Conv,
}

impl AppearanceNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, k: usize) -> Self {
        let widths = [3usize, 8, 16, 32, 32];
        let blocks = (0..4)
            .map(|i| {
                Conv::new(
                    store,
                    rng,
                    &format!("app.block{i}"),
                    widths[i],
                    widths[i + 1],
                    3,
                    2,
                    1,
                )
            })
            .collect();
        // Zero-initialized projection: appearance maps (and hence attention
        // logits and embeddings) start neutral instead of saturated, since
        // the backbone's post-ReLU activations are positively biased.
        let proj = Conv::new_zeroed(store, "app.proj", widths[4], k, 1, 1, 0);
        Self { k, blocks, proj }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        image: &Array3<f64>,
    ) -> Result<AppearanceOut> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(AvsepError::Shape(format!("expected 3 image channels, got {c}")));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(AvsepError::Config(format!(
                "image size {h}x{w} must be divisible by 16"
            )));
        }
        let mut x = tape.leaf3(image.clone());
        for block in &self.blocks {
            x = block.forward(tape, binder, store, x);
            x = tape.leaky_relu(x, LEAKY_SLOPE);
        }
        let maps = self.proj.forward(tape, binder, store, x);
        let pooled = tape.global_max_pool(maps);
        let embedding = tape.sigmoid(pooled);
        Ok(AppearanceOut { maps, embedding })
    }
}

// ---------------------------------------------------------------------------
// Sound networks
// ---------------------------------------------------------------------------

/// Sound-network presets. All satisfy the same contract: [1,256,256] in,
/// [K,256,256] out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoundNetKind {
    /// Pool-to-64 stem, base 8, depth 3. Sized for single-core training.
    UnetTiny,
    /// Full-resolution U-Net, base 16, depth 5.
    UnetSmall,
    /// Inverted-residual encoder-decoder at 0.5 width.
    Mv2Small,
}

impl SoundNetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unet-tiny" => Ok(Self::UnetTiny),
            "unet-small" => Ok(Self::UnetSmall),
            "mv2-small" => Ok(Self::Mv2Small),
            other => Err(AvsepError::Config(format!(
                "unknown sound net {other:?}; expected unet-tiny, unet-small, or mv2-small"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::UnetTiny => "unet-tiny",
            Self::UnetSmall => "unet-small",
            Self::Mv2Small => "mv2-small",
        }
    }
}

/// Encoder-decoder with skip connections. `stem_pool` average-pools the
/// input before the first conv and the head upsamples by the same factor,
/// so the output is always back at input resolution.
#[derive(Debug, Clone)]
pub struct UNet {
    stem_pool: usize,
    stem: Conv,
    downs: Vec<Conv>,
    ups: Vec<Conv>,
    head: Conv,
}

const UNET_MAX_WIDTH: usize = 128;

impl UNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        base: usize,
        depth: usize,
        stem_pool: usize,
        k: usize,
    ) -> Self {
        assert!(depth >= 2, "unet depth must be at least 2");
        let width = |level: usize| (base << level).min(UNET_MAX_WIDTH);
        let stem = Conv::new(store, rng, "snd.stem", 1, base, 3, 1, 1);
        let mut downs = Vec::new();
        for level in 1..depth {
            downs.push(Conv::new(
                store,
                rng,
                &format!("snd.down{level}"),
                width(level - 1),
                width(level),
                3,
                2,
                1,
            ));
        }
        let mut ups = Vec::new();
        for level in (1..depth).rev() {
            // input: upsampled deeper features concatenated with the skip
            ups.push(Conv::new(
                store,
                rng,
                &format!("snd.up{level}"),
                width(level) + width(level - 1),
                width(level - 1),
                3,
                1,
                1,
            ));
        }
        let head = Conv::new(store, rng, "snd.head", base, k, 1, 1, 0);
        Self { stem_pool, stem, downs, ups, head }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        mut x: NodeId,
    ) -> NodeId {
        if self.stem_pool > 1 {
            x = tape.avg_pool(x, self.stem_pool);
        }
        x = self.stem.forward(tape, binder, store, x);
        x = tape.leaky_relu(x, LEAKY_SLOPE);
        let mut skips = vec![x];
        for down in &self.downs {
            x = down.forward(tape, binder, store, x);
            x = tape.leaky_relu(x, LEAKY_SLOPE);
            skips.push(x);
        }
        skips.pop();
        for up in &self.ups {
            x = tape.upsample_nearest(x, 2);
            let skip = skips.pop().unwrap();
            x = tape.concat_channels(x, skip);
            x = up.forward(tape, binder, store, x);
            x = tape.leaky_relu(x, LEAKY_SLOPE);
        }
        // 1x1 head commutes with nearest upsampling; run it at the pooled
        // resolution so the conv touches stem_pool^2 fewer pixels.
        x = self.head.forward(tape, binder, store, x);
        if self.stem_pool > 1 {
            x = tape.upsample_nearest(x, self.stem_pool);
        }
        x
    }
}

/// Inverted-residual block: 1x1 expand, depthwise 3x3, 1x1 project, skip add.
#[derive(Debug, Clone)]
struct InvertedResidual {
    expand: Conv,
    depthwise: DepthwiseConv,
    project: Conv,
}

impl InvertedResidual {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        Self {
            expand: Conv::new(store, rng, &format!("{name}.expand"), c, 2 * c, 1, 1, 0),
            depthwise: DepthwiseConv::new(store, rng, &format!("{name}.dw"), 2 * c),
            project: Conv::new(store, rng, &format!("{name}.project"), 2 * c, c, 1, 1, 0),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        x: NodeId,
    ) -> NodeId {
        let mut y = self.expand.forward(tape, binder, store, x);
        y = tape.leaky_relu(y, LEAKY_SLOPE);
        y = self.depthwise.forward(tape, binder, store, y);
        y = tape.leaky_relu(y, LEAKY_SLOPE);
        y = self.project.forward(tape, binder, store, y);
        tape.add(y, x)
    }
}

/// Lightweight encoder-decoder built from inverted-residual blocks at half
/// the reference width (8/16/32 channels).
#[derive(Debug, Clone)]
pub struct Mv2Net {
    stem: Conv,
    block0: InvertedResidual,
    down1: Conv,
    block1: InvertedResidual,
    down2: Conv,
    block2: InvertedResidual,
    up1: Conv,
    up2: Conv,
    head: Conv,
}

impl Mv2Net {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, k: usize) -> Self {
        Self {
            stem: Conv::new(store, rng, "snd.stem", 1, 8, 3, 1, 1),
            block0: InvertedResidual::new(store, rng, "snd.ir0", 8),
            down1: Conv::new(store, rng, "snd.down1", 8, 16, 3, 2, 1),
            block1: InvertedResidual::new(store, rng, "snd.ir1", 16),
            down2: Conv::new(store, rng, "snd.down2", 16, 32, 3, 2, 1),
            block2: InvertedResidual::new(store, rng, "snd.ir2", 32),
            up1: Conv::new(store, rng, "snd.up1", 32 + 16, 16, 3, 1, 1),
            up2: Conv::new(store, rng, "snd.up2", 16 + 8, 8, 3, 1, 1),
            head: Conv::new(store, rng, "snd.head", 8, k, 1, 1, 0),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        x: NodeId,
    ) -> NodeId {
        let pooled = tape.avg_pool(x, 4);
        let mut s0 = self.stem.forward(tape, binder, store, pooled);
        s0 = tape.leaky_relu(s0, LEAKY_SLOPE);
        s0 = self.block0.forward(tape, binder, store, s0);
        let mut s1 = self.down1.forward(tape, binder, store, s0);
        s1 = tape.leaky_relu(s1, LEAKY_SLOPE);
        s1 = self.block1.forward(tape, binder, store, s1);
        let mut s2 = self.down2.forward(tape, binder, store, s1);
        s2 = tape.leaky_relu(s2, LEAKY_SLOPE);
        s2 = self.block2.forward(tape, binder, store, s2);
        let mut y = tape.upsample_nearest(s2, 2);
        y = tape.concat_channels(y, s1);
        y = self.up1.forward(tape, binder, store, y);
        y = tape.leaky_relu(y, LEAKY_SLOPE);
        y = tape.upsample_nearest(y, 2);
        y = tape.concat_channels(y, s0);
        y = self.up2.forward(tape, binder, store, y);
        y = tape.leaky_relu(y, LEAKY_SLOPE);
        y = tape.upsample_nearest(y, 4);
        self.head.forward(tape, binder, store, y)
    }
}

/// The sound network `S`: turns a compressed log spectrogram into K feature
/// maps at the input resolution.
#[derive(Debug, Clone)]
pub enum SoundNet {
    Unet(UNet),
    Mv2(Mv2Net),
}

impl SoundNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, kind: SoundNetKind, k: usize) -> Self {
        match kind {
            SoundNetKind::UnetTiny => Self::Unet(UNet::new(store, rng, 8, 3, 4, k)),
            SoundNetKind::UnetSmall => Self::Unet(UNet::new(store, rng, 16, 5, 1, k)),
            SoundNetKind::Mv2Small => Self::Mv2(Mv2Net::new(store, rng, k)),
        }
    }

    /// logspec must be [1, H, W] with H, W divisible by 16.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        logspec: &Array3<f64>,
    ) -> Result<NodeId> {
        let (c, h, w) = logspec.dim();
        if c != 1 {
            return Err(AvsepError::Shape(format!("expected 1 spectrogram channel, got {c}")));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(AvsepError::Shape(format!(
                "spectrogram size {h}x{w} must be divisible by 16"
            )));
        }
        let x = tape.leaf3(logspec.clone());
        Ok(match self {
            Self::Unet(net) => net.forward(tape, binder, store, x),
            Self::Mv2(net) => net.forward(tape, binder, store, x),
        })
    }
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

/// Image-category classifier: conv trunk, global average pool, linear head,
/// softmax. Used frozen as the `classifier` conditioning variant.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub classes: usize,
    blocks: Vec<Conv>,
    fc: Dense,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, classes: usize) -> Self {
        let widths = [3usize, 8, 16, 32];
        let blocks = (0..3)
            .map(|i| {
                Conv::new(
                    store,
                    rng,
                    &format!("cls.block{i}"),
                    widths[i],
                    widths[i + 1],
                    3,
                    2,
                    1,
                )
            })
            .collect();
        let fc = Dense::new(store, rng, "cls.fc", widths[3], classes);
        Self { classes, blocks, fc }
    }

    /// Returns the softmax probability node ([C], sums to 1) and the logits.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        image: &Array3<f64>,
    ) -> Result<(NodeId, NodeId)> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(AvsepError::Shape(format!("expected 3 image channels, got {c}")));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(AvsepError::Config(format!(
                "image size {h}x{w} must be divisible by 8"
            )));
        }
        let mut x = tape.leaf3(image.clone());
        for block in &self.blocks {
            x = block.forward(tape, binder, store, x);
            x = tape.leaky_relu(x, LEAKY_SLOPE);
        }
        let pooled = tape.global_avg_pool(x);
        let logits = self.fc.forward(tape, binder, store, pooled);
        let probs = tape.softmax(logits);
        Ok((probs, logits))
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"AVSEPCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Saves a versioned checkpoint: JSON header (config echo, epoch, RNG state)
/// followed by the raw parameter tensors. Save -> load -> save is byte-stable.
pub fn save_checkpoint(path: &Path, header: &serde_json::Value, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let header_bytes = serde_json::to_vec(header)?;
    buf.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
    buf.extend_from_slice(&header_bytes);
    buf.write_u64::<LittleEndian>(store.len() as u64)?;
    for (name, value) in store.iter() {
        buf.write_u64::<LittleEndian>(name.len() as u64)?;
        buf.extend_from_slice(name.as_bytes());
        buf.write_u64::<LittleEndian>(value.ndim() as u64)?;
        for &d in value.shape() {
            buf.write_u64::<LittleEndian>(d as u64)?;
        }
        for &x in value.iter() {
            buf.write_f64::<LittleEndian>(x)?;
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Loads a checkpoint's header and named tensors.
pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<(String, ArrayD<f64>)>)> {
    let bytes = std::fs::read(path)?;
    let mut cur = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(AvsepError::Checkpoint("bad magic".into()));
    }
    let version = cur.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(AvsepError::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = cur.read_u64::<LittleEndian>()? as usize;
    let mut header_bytes = vec![0u8; header_len];
    cur.read_exact(&mut header_bytes)?;
    let header: serde_json::Value = serde_json::from_slice(&header_bytes)?;
    let n = cur.read_u64::<LittleEndian>()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = cur.read_u64::<LittleEndian>()? as usize;
        let mut name_bytes = vec![0u8; name_len];
        cur.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| AvsepError::Checkpoint("non-utf8 tensor name".into()))?;
        let ndim = cur.read_u64::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.read_u64::<LittleEndian>()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(cur.read_f64::<LittleEndian>()?);
        }
        let value = ArrayD::from_shape_vec(shape, data)
            .map_err(|e| AvsepError::Checkpoint(e.to_string()))?;
        tensors.push((name, value));
    }
    Ok((header, tensors))
}

/// Debug aid: true when every parameter appears in the binder's gradient map
/// with at least one nonzero entry.
pub fn all_params_touched(store: &ParamStore, grads: &[ArrayD<f64>]) -> bool {
    let live: HashSet<usize> = grads
        .iter()
        .enumerate()
        .filter(|(_, g)| g.iter().any(|&x| x != 0.0))
        .map(|(i, _)| i)
        .collect();
    (0..store.len()).all(|i| live.contains(&i))
}

#[cfg(test)]
mod tests;
