//! Configurable mini residual network.
//!
//! Layout: a 3×3 stem convolution with ReLU, then `num_modules` modules of
//! residual blocks, global average pooling and a fully connected head. Each
//! block computes
//!
//! ```text
//! unit = mask(relu(conv1(x)))          <- the block's tap
//! out  = relu(conv2(unit) + skip(x))
//! ```
//!
//! where `skip` is the identity, or a strided 1×1 projection when the block
//! changes channel count or resolution. The tap is the post-ReLU channel
//! activation inside the residual branch: ablating a channel removes its
//! contribution to the block while the skip path carries the input through.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape of a residual network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub blocks_per_module: Vec<usize>,
    pub channels_per_module: Vec<usize>,
    /// Stride of the first block of each module.
    pub strides: Vec<usize>,
    /// `(channels, height, width)` of one input image.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        ArchitectureSpec {
            blocks_per_module: vec![2, 2, 2, 2],
            channels_per_module: vec![8, 16, 32, 64],
            strides: vec![1, 2, 2, 2],
            input_shape: [1, 16, 16],
            num_classes: 10,
        }
    }
}

impl ArchitectureSpec {
    pub fn num_modules(&self) -> usize {
        self.blocks_per_module.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.blocks_per_module.len();
        if m == 0 {
            return Err(Error::Config("architecture needs at least one module".into()));
        }
        if self.channels_per_module.len() != m || self.strides.len() != m {
            return Err(Error::Config(format!(
                "blocks_per_module ({m}), channels_per_module ({}) and strides ({}) must have equal length",
                self.channels_per_module.len(),
                self.strides.len()
            )));
        }
        if self.blocks_per_module.contains(&0) {
            return Err(Error::Config("every module needs at least one block".into()));
        }
        if self.channels_per_module.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.channels_per_module.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "channels must be nondecreasing across modules, got {:?}",
                self.channels_per_module
            )));
        }
        if self.strides.contains(&0) {
            return Err(Error::Config("strides must be positive".into()));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid input shape {:?}", self.input_shape)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    /// All taps in forward order.
    pub fn taps(&self) -> Vec<TapId> {
        self.blocks_per_module
            .iter()
            .enumerate()
            .flat_map(|(module, &blocks)| (0..blocks).map(move |block| TapId { module, block }))
            .collect()
    }

    pub fn tap_channels(&self, tap: TapId) -> Result<usize> {
        self.check_tap(tap)?;
        Ok(self.channels_per_module[tap.module])
    }

    pub fn check_tap(&self, tap: TapId) -> Result<()> {
        match self.blocks_per_module.get(tap.module) {
            Some(&blocks) if tap.block < blocks => Ok(()),
            _ => Err(Error::Config(format!("unknown tap {tap}"))),
        }
    }

    pub fn check_site(&self, site: Site) -> Result<()> {
        match site {
            Site::Tap(t) => self.check_tap(t),
            Site::ModuleOutput(m) if m < self.num_modules() => Ok(()),
            Site::ModuleOutput(m) => Err(Error::Config(format!("unknown module {m}"))),
            Site::Logits => Ok(()),
        }
    }

    /// Spatial extent `(h, w)` after each module.
    pub fn module_resolutions(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        self.strides
            .iter()
            .map(|&s| {
                // 3×3 convolution with padding 1
                h = (h - 1) / s + 1;
                w = (w - 1) / s + 1;
                (h, w)
            })
            .collect()
    }
}

/// A block's activation capture point: `(module, block)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TapId {
    pub module: usize,
    pub block: usize,
}

impl fmt::Display for TapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}b{}", self.module, self.block)
    }
}

/// Anything a forward pass can capture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Tap(TapId),
    /// Output of the last block of a module.
    ModuleOutput(usize),
    /// Output of the fully connected head.
    Logits,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Tap(t) => write!(f, "{t}"),
            Site::ModuleOutput(m) => write!(f, "module{m}"),
            Site::Logits => write!(f, "fc"),
        }
    }
}

/// Per-tap channel ablation masks; `true` means the channel is forced to 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AblationMask {
    masks: BTreeMap<TapId, Vec<bool>>,
}

impl AblationMask {
    pub fn new() -> Self {
        AblationMask::default()
    }

    /// Mask with every tap present and no channel ablated.
    pub fn all_false(spec: &ArchitectureSpec) -> Self {
        let masks = spec
            .taps()
            .into_iter()
            .map(|t| (t, vec![false; spec.channels_per_module[t.module]]))
            .collect();
        AblationMask { masks }
    }

    pub fn ablate(&mut self, spec: &ArchitectureSpec, tap: TapId, channel: usize) -> Result<()> {
        let channels = spec.tap_channels(tap)?;
        if channel >= channels {
            return Err(Error::Config(format!("tap {tap} has no channel {channel}")));
        }
        self.masks.entry(tap).or_insert_with(|| vec![false; channels])[channel] = true;
        Ok(())
    }

    /// Ablates every channel of every block in `module`.
    pub fn ablate_module(&mut self, spec: &ArchitectureSpec, module: usize) -> Result<()> {
        let blocks = *spec
            .blocks_per_module
            .get(module)
            .ok_or_else(|| Error::Config(format!("unknown module {module}")))?;
        for block in 0..blocks {
            let tap = TapId { module, block };
            self.masks.insert(tap, vec![true; spec.channels_per_module[module]]);
        }
        Ok(())
    }

    pub fn get(&self, tap: TapId) -> Option<&[bool]> {
        self.masks.get(&tap).map(Vec::as_slice)
    }

    pub fn ablated_count(&self) -> usize {
        self.masks.values().map(|m| m.iter().filter(|&&b| b).count()).sum()
    }

    fn validate(&self, spec: &ArchitectureSpec) -> Result<()> {
        for (&tap, mask) in &self.masks {
            let channels = spec.tap_channels(tap)?;
            if mask.len() != channels {
                return Err(Error::Config(format!(
                    "mask for {tap} has {} entries, tap has {channels} channels",
                    mask.len()
                )));
            }
        }
        Ok(())
    }
}

/// Activations recorded at one site during a forward pass. Tap captures
/// are post-ReLU and post-mask, hence nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct TapCapture {
    pub site: Site,
    pub activations: Tensor,
}

/// Graph handles produced by [`Model::forward_graph`].
#[derive(Debug, Clone)]
pub struct GraphForward {
    pub logits: Var,
    pub captures: Vec<(Site, Var)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BlockLayout {
    tap: TapId,
    conv1: usize,
    conv2: usize,
    proj: Option<usize>,
    stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    stem: usize,
    blocks: Vec<BlockLayout>,
    fc_weight: usize,
    fc_bias: usize,
}

impl Layout {
    fn new(spec: &ArchitectureSpec) -> Self {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            names.push(name);
            shapes.push(shape);
            names.len() - 1
        };
        let c0 = spec.channels_per_module[0];
        let stem = add("stem.weight".into(), vec![c0, spec.input_shape[0], 3, 3]);
        let mut blocks = Vec::new();
        let mut c_in = c0;
        for (module, (&nb, &c)) in spec
            .blocks_per_module
            .iter()
            .zip(&spec.channels_per_module)
            .enumerate()
        {
            for block in 0..nb {
                let stride = if block == 0 { spec.strides[module] } else { 1 };
                let prefix = format!("m{module}.b{block}");
                let conv1 = add(format!("{prefix}.conv1"), vec![c, c_in, 3, 3]);
                let conv2 = add(format!("{prefix}.conv2"), vec![c, c, 3, 3]);
                let proj = (stride != 1 || c_in != c).then(|| add(format!("{prefix}.proj"), vec![c, c_in, 1, 1]));
                blocks.push(BlockLayout {
                    tap: TapId { module, block },
                    conv1,
                    conv2,
                    proj,
                    stride,
                });
                c_in = c;
            }
        }
        let fc_weight = add("fc.weight".into(), vec![c_in, spec.num_classes]);
        let fc_bias = add("fc.bias".into(), vec![spec.num_classes]);
        Layout {
            names,
            shapes,
            stem,
            blocks,
            fc_weight,
            fc_bias,
        }
    }
}

/// A residual network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ArchitectureSpec,
    layout: Layout,
    params: Vec<Tensor>,
}

impl Model {
    /// Deterministic fan-in-scaled normal initialization. The second
    /// convolution of each residual branch is further scaled by
    /// `total_blocks^-1/2` so that the skip sum stays bounded without
    /// normalization layers.
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let layout = Layout::new(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total_blocks: usize = spec.blocks_per_module.iter().sum();
        let branch_scale = (total_blocks as f64).powf(-0.5);
        let conv2s: BTreeSet<usize> = layout.blocks.iter().map(|b| b.conv2).collect();

        let params = layout
            .shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                if i == layout.fc_bias {
                    return Tensor::zeros(shape);
                }
                let fan_in: usize = if i == layout.fc_weight {
                    shape[0]
                } else {
                    shape[1..].iter().product()
                };
                let mut std = if i == layout.fc_weight {
                    (1.0 / fan_in as f64).sqrt()
                } else {
                    (2.0 / fan_in as f64).sqrt()
                };
                if conv2s.contains(&i) {
                    std *= branch_scale;
                }
                Tensor::randn(shape, std, &mut rng)
            })
            .collect();
        Ok(Model {
            spec: spec.clone(),
            layout,
            params,
        })
    }

    /// Rebuilds a model from an explicit parameter list in
    /// [`Model::parameters`] order.
    pub fn from_parameters(spec: &ArchitectureSpec, params: Vec<Tensor>) -> Result<Model> {
        spec.validate()?;
        let layout = Layout::new(spec);
        if params.len() != layout.shapes.len() {
            return Err(Error::Checkpoint(format!(
                "architecture has {} parameter tensors, got {}",
                layout.shapes.len(),
                params.len()
            )));
        }
        for ((p, shape), name) in params.iter().zip(&layout.shapes).zip(&layout.names) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    p.shape()
                )));
            }
        }
        Ok(Model {
            spec: spec.clone(),
            layout,
            params,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    /// Named parameters in a fixed order.
    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.layout.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param_tensors(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.layout.names.iter().position(|n| n == name)
    }

    /// Replaces one parameter tensor, keeping its shape.
    pub fn set_parameter(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .param_index(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        if value.shape() != self.params[i].shape() {
            return Err(Error::Dimension(format!(
                "parameter {name} has shape {:?}, got {:?}",
                self.params[i].shape(),
                value.shape()
            )));
        }
        self.params[i] = value;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Zeroes both convolutions of every block in `module`, leaving only the
    /// skip paths.
    pub fn zero_residual_branches(&mut self, module: usize) -> Result<()> {
        if module >= self.spec.num_modules() {
            return Err(Error::Config(format!("unknown module {module}")));
        }
        for b in self.layout.blocks.iter().filter(|b| b.tap.module == module) {
            for i in [b.conv1, b.conv2] {
                self.params[i] = Tensor::zeros(self.params[i].shape());
            }
        }
        Ok(())
    }

    /// True when every block of `module` uses an identity skip.
    pub fn module_has_identity_skips(&self, module: usize) -> bool {
        self.layout
            .blocks
            .iter()
            .filter(|b| b.tap.module == module)
            .all(|b| b.proj.is_none())
    }

    /// Registers all parameters on `g`; as trainable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
            .collect()
    }

    /// Records a forward pass on `g` using parameter handles `params`
    /// (from [`Model::bind`], possibly with substitutions).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &[Var],
        input: Var,
        masks: Option<&AblationMask>,
        capture: &[Site],
    ) -> Result<GraphForward> {
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let [c, h, w] = self.spec.input_shape;
        let s = g.value(input).shape();
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::Dimension(format!(
                "batch shape {s:?} does not match input shape {:?}",
                self.spec.input_shape
            )));
        }
        for &site in capture {
            self.spec.check_site(site)?;
        }
        if let Some(m) = masks {
            m.validate(&self.spec)?;
        }
        let wanted: BTreeSet<Site> = capture.iter().copied().collect();
        let mut found: BTreeMap<Site, Var> = BTreeMap::new();

        let x = g.conv2d(input, params[self.layout.stem], 1, 1)?;
        let mut x = g.relu(x)?;
        for (i, b) in self.layout.blocks.iter().enumerate() {
            let pre = g.conv2d(x, params[b.conv1], b.stride, 1)?;
            let mut unit = g.relu(pre)?;
            if let Some(mask) = masks.and_then(|m| m.get(b.tap)) {
                if mask.iter().any(|&m| m) {
                    unit = g.mask_channels(unit, mask)?;
                }
            }
            if wanted.contains(&Site::Tap(b.tap)) {
                found.insert(Site::Tap(b.tap), unit);
            }
            let branch = g.conv2d(unit, params[b.conv2], 1, 1)?;
            let skip = match b.proj {
                Some(p) => g.conv2d(x, params[p], b.stride, 0)?,
                None => x,
            };
            let sum = g.add(branch, skip)?;
            x = g.relu(sum)?;
            let last_in_module = self
                .layout
                .blocks
                .get(i + 1)
                .is_none_or(|next| next.tap.module != b.tap.module);
            if last_in_module && wanted.contains(&Site::ModuleOutput(b.tap.module)) {
                found.insert(Site::ModuleOutput(b.tap.module), x);
            }
        }
        let pooled = g.global_avg_pool(x)?;
        let z = g.matmul(pooled, params[self.layout.fc_weight])?;
        let logits = g.bias_add(z, params[self.layout.fc_bias])?;
        if wanted.contains(&Site::Logits) {
            found.insert(Site::Logits, logits);
        }
        let captures = capture.iter().map(|s| (*s, found[s])).collect();
        Ok(GraphForward { logits, captures })
    }

    /// Inference forward pass: logits plus the requested captures, in the
    /// order requested.
    pub fn forward(
        &self,
        batch: &Tensor,
        masks: Option<&AblationMask>,
        capture: &[Site],
    ) -> Result<(Tensor, Vec<TapCapture>)> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let input = g.constant(batch.clone());
        let out = self.forward_graph(&mut g, &params, input, masks, capture)?;
        let captures = out
            .captures
            .iter()
            .map(|&(site, v)| TapCapture {
                site,
                activations: g.value(v).clone(),
            })
            .collect();
        Ok((g.value(out.logits).clone(), captures))
    }

    pub fn logits(&self, batch: &Tensor, masks: Option<&AblationMask>) -> Result<Tensor> {
        Ok(self.forward(batch, masks, &[])?.0)
    }
}
