//! The parameterized denoiser: a small U-Net over the channel concatenation
//! of noisy target and condition, modulated by a sinusoidal time embedding.
//!
//! Layout for the default config (`base_width` 32, `channel_mults` [1, 2],
//! `depth` 1): stem conv, one residual stage per multiplier with 2x
//! average-pool between stages, a middle residual block, then mirrored
//! decoder stages with nearest-neighbor upsampling and encoder skip
//! concatenation, and a zero-initialized output head. Residual blocks are
//! conv -> group-norm -> SiLU twice, with the time embedding projected and
//! added after the first norm.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ops, Element, Graph, Padding, Tensor};

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetConfig {
    /// Channels of the generated image (C). The network input is 2C.
    pub out_channels: usize,
    /// Channels at the first stage.
    pub base_width: usize,
    /// Per-stage width multipliers; the number of stages is the length.
    pub channel_mults: Vec<usize>,
    /// Residual blocks per stage.
    pub depth: usize,
    /// Width of the time embedding.
    pub time_embed_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            out_channels: 3,
            base_width: 32,
            channel_mults: vec![1, 2],
            depth: 1,
            time_embed_dim: 64,
        }
    }
}

impl UNetConfig {
    pub fn in_channels(&self) -> usize {
        2 * self.out_channels
    }

    pub fn stages(&self) -> usize {
        self.channel_mults.len()
    }

    /// Spatial extents must be divisible by this.
    pub fn extent_divisor(&self) -> usize {
        1 << (self.stages() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0
            || self.base_width == 0
            || self.depth == 0
            || self.channel_mults.is_empty()
            || self.channel_mults.iter().any(|&m| m == 0)
        {
            return Err(Error::InvalidArgument(
                "network config: all widths and depths must be positive".into(),
            ));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "network config: time_embed_dim must be positive and even, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    pub fn check_extents(&self, h: usize, w: usize) -> Result<()> {
        let d = self.extent_divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::shape(
                "unet",
                format!("spatial extents {h}x{w} must be positive multiples of {d}"),
            ));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        self.channel_mults
            .iter()
            .map(|&m| m * self.base_width)
            .collect()
    }
}

/// Group count used by every normalization layer: `min(8, channels)`,
/// lowered to the nearest divisor of the channel count.
pub fn norm_groups(channels: usize) -> usize {
    let mut g = channels.min(8);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

/// Ordered map from parameter name to tensor. Iteration order is the
/// construction order and is what checkpoints and optimizers rely on.
#[derive(Debug, Clone, Default)]
pub struct Parameters<T: Element> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Element> Parameters<T> {
    pub fn new() -> Self {
        Parameters {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name}"
            )));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn at(&self, i: usize) -> (&str, &Tensor<T>) {
        let (n, t) = &self.entries[i];
        (n.as_str(), t)
    }

    pub fn at_mut(&mut self, i: usize) -> (&str, &mut Tensor<T>) {
        let (n, t) = &mut self.entries[i];
        (n.as_str(), t)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> Parameters<U> {
        let mut out = Parameters::new();
        for (n, t) in &self.entries {
            out.insert(n.clone(), t.cast::<U>()).expect("names stay unique");
        }
        out
    }

    /// Names and shapes match entry for entry.
    pub fn same_structure<U: Element>(&self, other: &Parameters<U>) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }
}

/// Parameters registered on a graph as requires-grad leaves (or constants),
/// addressable by name during the forward pass.
pub struct BoundParams<T: Element> {
    map: HashMap<String, Tensor<T>>,
}

impl<T: Element> BoundParams<T> {
    /// Build a binding from an explicit map of graph handles, for callers
    /// that register the leaves themselves (gradient checks of a single
    /// parameter group).
    pub fn from_map(map: HashMap<String, Tensor<T>>) -> Self {
        BoundParams { map }
    }

    fn p(&self, name: &str) -> &Tensor<T> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("network parameter {name} missing from binding"))
    }

    pub fn handle(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }
}

/// Register every parameter on `graph`. With `trainable` set the leaves
/// require grad; otherwise they are constants.
pub fn bind_params<T: Element>(
    graph: &mut Graph<T>,
    params: &Parameters<T>,
    trainable: bool,
) -> BoundParams<T> {
    let mut map = HashMap::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        let handle = if trainable {
            let t = tensor.clone().with_requires_grad(true);
            graph.leaf(&t)
        } else {
            graph.constant(tensor)
        };
        map.insert(name.to_string(), handle);
    }
    BoundParams { map }
}

/// Sinusoidal embedding of a noise level, before the in-network perceptron.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "time_embed: dim must be positive and even, got {dim}"
        )));
    }
    if t <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "time_embed: t must be positive, got {t}"
        )));
    }
    Ok(ops::time_embed_values(t, dim))
}

struct LayerSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

enum Init {
    FanInNormal(usize),
    Zeros,
    Ones,
}

fn conv_specs(specs: &mut Vec<LayerSpec>, prefix: &str, cin: usize, cout: usize, k: usize) {
    specs.push(LayerSpec {
        name: format!("{prefix}.weight"),
        shape: vec![cout, cin, k, k],
        init: Init::FanInNormal(cin * k * k),
    });
    specs.push(LayerSpec {
        name: format!("{prefix}.bias"),
        shape: vec![cout],
        init: Init::Zeros,
    });
}

fn linear_specs(specs: &mut Vec<LayerSpec>, prefix: &str, cin: usize, cout: usize) {
    specs.push(LayerSpec {
        name: format!("{prefix}.weight"),
        shape: vec![cout, cin],
        init: Init::FanInNormal(cin),
    });
    specs.push(LayerSpec {
        name: format!("{prefix}.bias"),
        shape: vec![cout],
        init: Init::Zeros,
    });
}

fn norm_specs(specs: &mut Vec<LayerSpec>, prefix: &str, c: usize) {
    specs.push(LayerSpec {
        name: format!("{prefix}.weight"),
        shape: vec![c],
        init: Init::Ones,
    });
    specs.push(LayerSpec {
        name: format!("{prefix}.bias"),
        shape: vec![c],
        init: Init::Zeros,
    });
}

fn res_block_specs(specs: &mut Vec<LayerSpec>, prefix: &str, cin: usize, cout: usize, temb: usize) {
    conv_specs(specs, &format!("{prefix}.conv1"), cin, cout, 3);
    norm_specs(specs, &format!("{prefix}.norm1"), cout);
    linear_specs(specs, &format!("{prefix}.temb"), temb, cout);
    conv_specs(specs, &format!("{prefix}.conv2"), cout, cout, 3);
    norm_specs(specs, &format!("{prefix}.norm2"), cout);
    if cin != cout {
        conv_specs(specs, &format!("{prefix}.skip"), cin, cout, 1);
    }
}

fn architecture(cfg: &UNetConfig) -> Vec<LayerSpec> {
    let widths = cfg.widths();
    let stages = widths.len();
    let d = cfg.time_embed_dim;
    let mut specs = Vec::new();

    linear_specs(&mut specs, "time_mlp.fc1", d, d);
    linear_specs(&mut specs, "time_mlp.fc2", d, d);
    conv_specs(&mut specs, "stem", cfg.in_channels(), widths[0], 3);

    for s in 0..stages {
        let mut cin = if s == 0 { widths[0] } else { widths[s - 1] };
        for j in 0..cfg.depth {
            res_block_specs(&mut specs, &format!("enc{s}.res{j}"), cin, widths[s], d);
            cin = widths[s];
        }
    }
    res_block_specs(&mut specs, "mid.res0", widths[stages - 1], widths[stages - 1], d);
    for s in (0..stages.saturating_sub(1)).rev() {
        let mut cin = widths[s + 1] + widths[s];
        for j in 0..cfg.depth {
            res_block_specs(&mut specs, &format!("dec{s}.res{j}"), cin, widths[s], d);
            cin = widths[s];
        }
    }
    norm_specs(&mut specs, "head.norm", widths[0]);
    // The output projection starts at zero so the untrained model reduces to
    // the skip path.
    specs.push(LayerSpec {
        name: "head.conv.weight".into(),
        shape: vec![cfg.out_channels, widths[0], 3, 3],
        init: Init::Zeros,
    });
    specs.push(LayerSpec {
        name: "head.conv.bias".into(),
        shape: vec![cfg.out_channels],
        init: Init::Zeros,
    });
    specs
}

/// Deterministic parameter initialization: fan-in-scaled normals for
/// convolution and linear weights, ones/zeros for norms and biases, zeros
/// for the output head. Samples are drawn in f64 so every element type sees
/// the same values.
pub fn init<T: Element>(cfg: &UNetConfig, seed: u64) -> Result<Parameters<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::new();
    for spec in architecture(cfg) {
        let n = crate::tensor::numel(&spec.shape);
        let data: Vec<T> = match spec.init {
            Init::Zeros => vec![T::ZERO; n],
            Init::Ones => vec![T::ONE; n],
            Init::FanInNormal(fan_in) => {
                let std = (1.0 / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid normal");
                (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
            }
        };
        params.insert(spec.name, Tensor::from_vec(spec.shape, data)?)?;
    }
    Ok(params)
}

fn res_block<T: Element>(
    g: &mut Graph<T>,
    bp: &BoundParams<T>,
    prefix: &str,
    x: &Tensor<T>,
    temb: &Tensor<T>,
    cin: usize,
    cout: usize,
) -> Result<Tensor<T>> {
    let groups = norm_groups(cout);
    let mut h = g.conv2d(
        x,
        bp.p(&format!("{prefix}.conv1.weight")),
        Some(bp.p(&format!("{prefix}.conv1.bias"))),
        Padding::Same,
    )?;
    h = g.group_norm(
        &h,
        bp.p(&format!("{prefix}.norm1.weight")),
        bp.p(&format!("{prefix}.norm1.bias")),
        groups,
        GROUP_NORM_EPS,
    )?;
    let tproj = g.linear(
        temb,
        bp.p(&format!("{prefix}.temb.weight")),
        Some(bp.p(&format!("{prefix}.temb.bias"))),
    )?;
    h = g.bias_add(&h, &tproj)?;
    h = g.silu(&h)?;
    h = g.conv2d(
        &h,
        bp.p(&format!("{prefix}.conv2.weight")),
        Some(bp.p(&format!("{prefix}.conv2.bias"))),
        Padding::Same,
    )?;
    h = g.group_norm(
        &h,
        bp.p(&format!("{prefix}.norm2.weight")),
        bp.p(&format!("{prefix}.norm2.bias")),
        groups,
        GROUP_NORM_EPS,
    )?;
    h = g.silu(&h)?;
    let skip = if cin == cout {
        x.clone()
    } else {
        g.conv2d(
            x,
            bp.p(&format!("{prefix}.skip.weight")),
            Some(bp.p(&format!("{prefix}.skip.bias"))),
            Padding::Same,
        )?
    };
    g.add(&skip, &h)
}

/// Forward pass on an already-bound parameter set. `r_noisy` and `v` must
/// share the `[C, H, W]` shape; the concatenation order is fixed as
/// `[r_noisy, v]`.
pub fn forward_bound<T: Element>(
    g: &mut Graph<T>,
    cfg: &UNetConfig,
    bp: &BoundParams<T>,
    r_noisy: &Tensor<T>,
    v: &Tensor<T>,
    t: f64,
) -> Result<Tensor<T>> {
    let c = cfg.out_channels;
    if r_noisy.shape() != v.shape() {
        return Err(Error::shape(
            "unet",
            format!(
                "noisy target {:?} and condition {:?} must match",
                r_noisy.shape(),
                v.shape()
            ),
        ));
    }
    if r_noisy.shape().len() != 3 || r_noisy.shape()[0] != c {
        return Err(Error::shape(
            "unet",
            format!(
                "expected [{c}, H, W] inputs, got {:?}",
                r_noisy.shape()
            ),
        ));
    }
    cfg.check_extents(r_noisy.shape()[1], r_noisy.shape()[2])?;

    let d = cfg.time_embed_dim;
    let emb = g.time_embed(t, d)?;
    let emb = g.linear(
        &emb,
        bp.p("time_mlp.fc1.weight"),
        Some(bp.p("time_mlp.fc1.bias")),
    )?;
    let emb = g.silu(&emb)?;
    let temb = g.linear(
        &emb,
        bp.p("time_mlp.fc2.weight"),
        Some(bp.p("time_mlp.fc2.bias")),
    )?;

    let widths = cfg.widths();
    let stages = widths.len();

    let x = g.concat_channels(r_noisy, v)?;
    let mut h = g.conv2d(
        &x,
        bp.p("stem.weight"),
        Some(bp.p("stem.bias")),
        Padding::Same,
    )?;

    let mut skips: Vec<Tensor<T>> = Vec::with_capacity(stages.saturating_sub(1));
    for s in 0..stages {
        let mut cin = if s == 0 { widths[0] } else { widths[s - 1] };
        if s > 0 {
            h = g.avg_pool2x(&h)?;
        }
        for j in 0..cfg.depth {
            h = res_block(g, bp, &format!("enc{s}.res{j}"), &h, &temb, cin, widths[s])?;
            cin = widths[s];
        }
        if s < stages - 1 {
            skips.push(h.clone());
        }
    }

    h = res_block(g, bp, "mid.res0", &h, &temb, widths[stages - 1], widths[stages - 1])?;

    for s in (0..stages.saturating_sub(1)).rev() {
        h = g.upsample2x(&h)?;
        let skip = skips.pop().expect("one skip per decoder stage");
        h = g.concat_channels(&h, &skip)?;
        let mut cin = widths[s + 1] + widths[s];
        for j in 0..cfg.depth {
            h = res_block(g, bp, &format!("dec{s}.res{j}"), &h, &temb, cin, widths[s])?;
            cin = widths[s];
        }
    }

    h = g.group_norm(
        &h,
        bp.p("head.norm.weight"),
        bp.p("head.norm.bias"),
        norm_groups(widths[0]),
        GROUP_NORM_EPS,
    )?;
    h = g.silu(&h)?;
    g.conv2d(
        &h,
        bp.p("head.conv.weight"),
        Some(bp.p("head.conv.bias")),
        Padding::Same,
    )
}

/// Forward pass recording on `g`, binding `params` as constants or trainable
/// leaves per `trainable`.
pub fn forward<T: Element>(
    g: &mut Graph<T>,
    cfg: &UNetConfig,
    params: &Parameters<T>,
    r_noisy: &Tensor<T>,
    v: &Tensor<T>,
    t: f64,
    trainable: bool,
) -> Result<Tensor<T>> {
    let bp = bind_params(g, params, trainable);
    forward_bound(g, cfg, &bp, r_noisy, v, t)
}

/// Evaluate the network without keeping any graph state.
pub fn forward_eval<T: Element>(
    cfg: &UNetConfig,
    params: &Parameters<T>,
    r_noisy: &Tensor<T>,
    v: &Tensor<T>,
    t: f64,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    Ok(forward(&mut g, cfg, params, r_noisy, v, t, false)?.detach())
}
