//! Stacked conv-deconv network with multi-scale supervision heads and a fully
//! convolutional regression stage over the concatenated multi-scale heatmaps.
//!
//! Layout for `S` stacks, `C` feature channels, `N` keypoints and a ladder of
//! `L` halvings per stack:
//!
//! ```text
//! image -> stem (stride-2 convs down to base resolution)
//! stack s: conv@base -> [pool -> conv] x L -> [deconv x2] x L
//!          1x1 head (C -> N) on every ladder level whose divisor is supervised
//!          base heatmaps -> 1x1 remap (N -> C), added to the features fed to s+1
//! regression: upsample last-stack heatmaps to base, concat (|scales| * N),
//!             conv+relu x regression_layers, 1x1 -> N
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::heatmap::HeatmapStack;
use crate::tensor::{Scalar, Tensor};

/// Transposed-conv kernel used by the ladder; with stride 2 and pad 1 it doubles extents.
const DECONV_KERNEL: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub num_stacks: usize,
    pub feature_channels: usize,
    pub num_keypoints: usize,
    /// Supervised divisors of the base heatmap resolution. Always contains 1.
    pub scales: Vec<usize>,
    pub input_size: usize,
    pub base_heatmap_size: usize,
    pub regression_layers: usize,
    pub conv_kernel: usize,
    /// Whether the global regression stage is present.
    pub regression: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_stacks: 4,
            feature_channels: 64,
            num_keypoints: crate::keypoints::NUM_KEYPOINTS,
            scales: vec![1, 2, 4],
            input_size: 64,
            base_heatmap_size: 16,
            regression_layers: 3,
            conv_kernel: 3,
            regression: true,
        }
    }
}

fn log2_exact(v: usize) -> Option<u32> {
    (v.is_power_of_two()).then(|| v.trailing_zeros())
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_stacks == 0 {
            return Err(Error::config("num_stacks must be at least 1"));
        }
        if self.num_keypoints == 0 {
            return Err(Error::config("num_keypoints must be positive"));
        }
        if self.feature_channels < self.num_keypoints {
            return Err(Error::config(format!(
                "feature_channels ({}) must be at least num_keypoints ({})",
                self.feature_channels, self.num_keypoints
            )));
        }
        if self.conv_kernel == 0 || self.conv_kernel.is_multiple_of(2) {
            return Err(Error::config("conv_kernel must be odd"));
        }
        if self.scales.is_empty() || !self.scales.contains(&1) {
            return Err(Error::config("scales must include the base divisor 1"));
        }
        for &d in &self.scales {
            if log2_exact(d).is_none() {
                return Err(Error::config(format!(
                    "scale divisor {d} is not a power of two reachable by the deconv ladder"
                )));
            }
        }
        let mut sorted = self.scales.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.scales.len() {
            return Err(Error::config("scales contains duplicates"));
        }
        if self.base_heatmap_size == 0 || !self.input_size.is_multiple_of(self.base_heatmap_size) {
            return Err(Error::config(format!(
                "input_size {} is not a multiple of base_heatmap_size {}",
                self.input_size, self.base_heatmap_size
            )));
        }
        if log2_exact(self.input_size / self.base_heatmap_size).is_none() {
            return Err(Error::config("input_size / base_heatmap_size must be a power of two"));
        }
        let coarsest = 1usize << self.ladder_depth();
        if !self.base_heatmap_size.is_multiple_of(coarsest) {
            return Err(Error::config(format!(
                "base heatmap size {} cannot be halved {} times",
                self.base_heatmap_size,
                self.ladder_depth()
            )));
        }
        Ok(())
    }

    /// Number of pooling halvings inside one stack (at least two).
    pub fn ladder_depth(&self) -> usize {
        let max = self.scales.iter().copied().max().unwrap_or(1);
        (max.trailing_zeros() as usize).max(2)
    }

    fn stem_depth(&self) -> usize {
        (self.input_size / self.base_heatmap_size).trailing_zeros() as usize
    }

    /// Scales in ascending order.
    pub fn sorted_scales(&self) -> Vec<usize> {
        let mut s = self.scales.clone();
        s.sort_unstable();
        s
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let scales: Vec<String> = self.scales.iter().map(|s| s.to_string()).collect();
        format!(
            "num_stacks={}\nfeature_channels={}\nnum_keypoints={}\nscales={}\ninput_size={}\n\
             base_heatmap_size={}\nregression_layers={}\nconv_kernel={}\nregression={}\n",
            self.num_stacks,
            self.feature_channels,
            self.num_keypoints,
            scales.join(","),
            self.input_size,
            self.base_heatmap_size,
            self.regression_layers,
            self.conv_kernel,
            self.regression
        )
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("invalid value {v:?} for {key}")))
        }
        match key {
            "num_stacks" => self.num_stacks = num(key, value)?,
            "feature_channels" => self.feature_channels = num(key, value)?,
            "num_keypoints" => self.num_keypoints = num(key, value)?,
            "scales" => self.scales = parse_scales(value)?,
            "input_size" => self.input_size = num(key, value)?,
            "base_heatmap_size" => self.base_heatmap_size = num(key, value)?,
            "regression_layers" => self.regression_layers = num(key, value)?,
            "conv_kernel" => self.conv_kernel = num(key, value)?,
            "regression" => self.regression = num(key, value)?,
            _ => return Err(Error::config(format!("unknown network key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = NetworkConfig::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

/// Parses a comma-separated divisor list such as `1,2,4`.
pub fn parse_scales(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("invalid scale divisor {p:?}")))
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct StackLayers {
    /// `down[l]` runs at divisor `2^l`.
    down: Vec<ConvLayer>,
    /// `up[l]` produces divisor `2^l` from `2^(l+1)`.
    up: Vec<ConvLayer>,
    /// Heads keyed by divisor.
    heads: BTreeMap<usize, ConvLayer>,
    remap: Option<ConvLayer>,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: Vec<ConvLayer>,
    stacks: Vec<StackLayers>,
    regression: Vec<ConvLayer>,
    regression_out: Option<ConvLayer>,
}

/// Named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Network parameters plus the wiring that consumes them.
#[derive(Clone, Debug)]
pub struct Network<T: Scalar> {
    config: NetworkConfig,
    params: Vec<Param<T>>,
    layout: Layout,
}

/// Graph handles produced by [`Network::forward_graph`].
#[derive(Clone, Debug)]
pub struct OutputVars {
    /// Parameter leaves, in [`Network::params`] order.
    pub params: Vec<Var>,
    /// `per_stack[s][i]` is the `[B, N, h, w]` prediction at `sorted_scales()[i]`.
    pub per_stack: Vec<Vec<Var>>,
    pub refined: Option<Var>,
}

/// Per-sample network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleOutputs<T: Scalar> {
    pub per_stack: Vec<Vec<HeatmapStack<T>>>,
    pub refined: Option<HeatmapStack<T>>,
}

impl<T: Scalar> MultiScaleOutputs<T> {
    /// The base-scale heatmaps of the last stack (the input to regression).
    pub fn last_base(&self) -> &HeatmapStack<T> {
        &self.per_stack.last().expect("at least one stack")[0]
    }

    /// The network's final prediction: the refined stack when present.
    pub fn final_heatmaps(&self) -> &HeatmapStack<T> {
        self.refined.as_ref().unwrap_or_else(|| self.last_base())
    }
}

struct Builder<'a, T: Scalar> {
    params: Vec<Param<T>>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn layer(&mut self, name: &str, shape: [usize; 4]) -> ConvLayer {
        self.push(name, shape, shape[0])
    }

    /// Transposed-conv weights are `[Cin, Cout, K, K]`.
    fn deconv_layer(&mut self, name: &str, shape: [usize; 4]) -> ConvLayer {
        self.push(name, shape, shape[1])
    }

    fn push(&mut self, name: &str, shape: [usize; 4], bias_len: usize) -> ConvLayer {
        let [a, b, kh, kw] = shape;
        let fan = (a + b) * kh * kw;
        let limit = (6.0 / fan as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let data = (0..a * b * kh * kw).map(|_| T::lit(dist.sample(self.rng))).collect();
        self.params.push(Param {
            name: format!("{name}.weight"),
            value: Tensor::from_vec(&shape, data).expect("weight shape"),
        });
        self.params.push(Param {
            name: format!("{name}.bias"),
            value: Tensor::zeros(&[bias_len]),
        });
        ConvLayer {
            weight: self.params.len() - 2,
            bias: self.params.len() - 1,
        }
    }
}

impl<T: Scalar> Network<T> {
    /// Builds a network with parameters drawn deterministically from `seed`.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.feature_channels;
        let n = config.num_keypoints;
        let k = config.conv_kernel;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: Vec::new(),
            rng: &mut rng,
        };

        let stem = (0..config.stem_depth())
            .map(|i| b.layer(&format!("stem.conv{i}"), [c, if i == 0 { 3 } else { c }, k, k]))
            .collect();

        let depth = config.ladder_depth();
        let scales = config.sorted_scales();
        let mut stacks = Vec::with_capacity(config.num_stacks);
        for s in 0..config.num_stacks {
            let down = (0..=depth)
                .map(|l| b.layer(&format!("stack{s}.down{l}"), [c, c, k, k]))
                .collect();
            let up = (0..depth)
                .map(|l| b.deconv_layer(&format!("stack{s}.up{l}"), [c, c, DECONV_KERNEL, DECONV_KERNEL]))
                .collect();
            let heads = scales
                .iter()
                .map(|&d| (d, b.layer(&format!("stack{s}.head{d}"), [n, c, 1, 1])))
                .collect();
            let remap = (s + 1 < config.num_stacks).then(|| b.layer(&format!("stack{s}.remap"), [c, n, 1, 1]));
            stacks.push(StackLayers { down, up, heads, remap });
        }

        let (regression, regression_out) = if config.regression {
            let layers = (0..config.regression_layers)
                .map(|i| {
                    let cin = if i == 0 { n * scales.len() } else { c };
                    b.layer(&format!("regress.conv{i}"), [c, cin, k, k])
                })
                .collect();
            let out_in = if config.regression_layers == 0 { n * scales.len() } else { c };
            (layers, Some(b.layer("regress.out", [n, out_in, 1, 1])))
        } else {
            (Vec::new(), None)
        };

        Ok(Self {
            config: config.clone(),
            params: b.params,
            layout: Layout {
                stem,
                stacks,
                regression,
                regression_out,
            },
        })
    }

    /// Builds the layout for `config` and installs `params` (matched by name and shape).
    pub fn from_params(config: &NetworkConfig, params: Vec<Param<T>>) -> Result<Self> {
        let mut net = Self::build(config, 0)?;
        if params.len() != net.params.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, got {}",
                net.params.len(),
                params.len()
            )));
        }
        for (slot, p) in net.params.iter_mut().zip(params) {
            if slot.name != p.name || slot.value.shape() != p.value.shape() {
                return Err(Error::config(format!(
                    "parameter mismatch: expected {} {:?}, got {} {:?}",
                    slot.name,
                    slot.value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            *slot = p;
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    fn conv(&self, g: &mut Graph<T>, p: &[Var], x: Var, l: ConvLayer, stride: usize, relu: bool) -> Result<Var> {
        let k = g.value(p[l.weight]).shape()[2];
        let y = g.conv2d(x, p[l.weight], p[l.bias], stride, k / 2)?;
        if relu {
            g.relu(y)
        } else {
            Ok(y)
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, 3, h, w] if *h == self.config.input_size && *w == self.config.input_size => Ok(()),
            _ => Err(Error::shape(format!(
                "network expects [B,3,{s},{s}] images, got {shape:?}",
                s = self.config.input_size
            ))),
        }
    }

    /// Records the full forward pass on `g`. Parameters become trainable leaves
    /// when `trainable` is set.
    pub fn forward_graph(&self, g: &mut Graph<T>, image: Var, trainable: bool) -> Result<OutputVars> {
        let p: Vec<Var> = self
            .params
            .iter()
            .map(|prm| g.leaf(prm.value.clone(), trainable))
            .collect();
        self.forward_graph_with(g, image, p)
    }

    /// Like [`Network::forward_graph`] but reads parameters from existing
    /// vars, given in [`Network::params`] order. Stored values are ignored.
    pub fn forward_graph_with(&self, g: &mut Graph<T>, image: Var, p: Vec<Var>) -> Result<OutputVars> {
        self.check_input(g.value(image).shape())?;
        if p.len() != self.params.len() {
            return Err(Error::shape(format!(
                "expected {} parameter vars, got {}",
                self.params.len(),
                p.len()
            )));
        }
        for (v, prm) in p.iter().zip(&self.params) {
            if g.value(*v).shape() != prm.value.shape() {
                return Err(Error::shape(format!(
                    "parameter {} has shape {:?}, var has {:?}",
                    prm.name,
                    prm.value.shape(),
                    g.value(*v).shape()
                )));
            }
        }

        let mut x = image;
        for &l in &self.layout.stem {
            x = self.conv(g, &p, x, l, 2, true)?;
        }

        let mut per_stack = Vec::with_capacity(self.layout.stacks.len());
        for stack in &self.layout.stacks {
            let depth = stack.up.len();
            let mut heads: BTreeMap<usize, Var> = BTreeMap::new();
            let mut f = self.conv(g, &p, x, stack.down[0], 1, true)?;
            for l in 1..=depth {
                f = g.maxpool2d(f, 2, 2)?;
                f = self.conv(g, &p, f, stack.down[l], 1, true)?;
            }
            if let Some(&h) = stack.heads.get(&(1 << depth)) {
                heads.insert(1 << depth, self.conv(g, &p, f, h, 1, false)?);
            }
            for l in (0..depth).rev() {
                let up = stack.up[l];
                f = g.conv2d_transpose(f, p[up.weight], p[up.bias], 2, 1)?;
                f = g.relu(f)?;
                if let Some(&h) = stack.heads.get(&(1 << l)) {
                    heads.insert(1 << l, self.conv(g, &p, f, h, 1, false)?);
                }
            }
            if let Some(remap) = stack.remap {
                let back = self.conv(g, &p, heads[&1], remap, 1, false)?;
                x = g.add(f, back)?;
            }
            per_stack.push(heads.into_values().collect::<Vec<_>>());
        }

        let refined = if self.config.regression {
            let last = per_stack.last().expect("at least one stack").clone();
            Some(self.regress_graph(g, &p, &last)?)
        } else {
            None
        };

        Ok(OutputVars {
            params: p,
            per_stack,
            refined,
        })
    }

    fn regress_graph(&self, g: &mut Graph<T>, p: &[Var], heatmaps: &[Var]) -> Result<Var> {
        let scales = self.config.sorted_scales();
        if heatmaps.len() != scales.len() {
            return Err(Error::shape(format!(
                "regression expects {} scale inputs, got {}",
                scales.len(),
                heatmaps.len()
            )));
        }
        let base = self.config.base_heatmap_size;
        let mut aligned = Vec::with_capacity(heatmaps.len());
        for (&hm, &d) in heatmaps.iter().zip(&scales) {
            let [_, n, h, w] = g.value(hm).dims4()?;
            if n != self.config.num_keypoints || h * d != base || w * d != base {
                return Err(Error::shape(format!(
                    "regression input for divisor {d} has shape {:?}",
                    g.value(hm).shape()
                )));
            }
            aligned.push(if d == 1 { hm } else { g.upsample_nearest(hm, d)? });
        }
        let mut x = g.concat_channels(&aligned)?;
        for &l in &self.layout.regression {
            x = self.conv(g, p, x, l, 1, true)?;
        }
        let out = self.layout.regression_out.expect("regression enabled");
        self.conv(g, p, x, out, 1, false)
    }

    /// Runs the regression stage alone on one sample's last-stack heatmaps
    /// (one stack per configured scale, ascending divisor order).
    pub fn regress_refine(&self, stacks: &[HeatmapStack<T>]) -> Result<HeatmapStack<T>> {
        if !self.config.regression {
            return Err(Error::config("network was built without a regression stage"));
        }
        let scales = self.config.sorted_scales();
        let got: Vec<usize> = stacks.iter().map(|s| s.scale).collect();
        if got != scales {
            return Err(Error::shape(format!(
                "regression expects scales {scales:?}, got {got:?}"
            )));
        }
        let mut g = Graph::new();
        let p: Vec<Var> = self.params.iter().map(|prm| g.constant(prm.value.clone())).collect();
        let vars = stacks
            .iter()
            .map(|s| {
                let [n, h, w] = [s.channels(), s.height(), s.width()];
                Ok(g.constant(s.maps.clone().reshape(&[1, n, h, w])?))
            })
            .collect::<Result<Vec<_>>>()?;
        let out = self.regress_graph(&mut g, &p, &vars)?;
        let [_, n, h, w] = g.value(out).dims4()?;
        HeatmapStack::new(g.value(out).clone().reshape(&[n, h, w])?, 1, stacks[0].frame)
    }

    /// Inference on a `[B, 3, H, W]` batch; one output record per batch item.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Vec<MultiScaleOutputs<T>>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let vars = self.forward_graph(&mut g, x, false)?;
        let batch = image.shape()[0];
        let frame = (self.config.input_size, self.config.input_size);
        let scales = self.config.sorted_scales();
        let to_stack = |v: Var, b: usize, scale: usize| -> Result<HeatmapStack<T>> {
            let item = g.value(v).batch_item(b)?;
            let [_, n, h, w] = item.dims4()?;
            HeatmapStack::new(item.reshape(&[n, h, w])?, scale, frame)
        };
        (0..batch)
            .map(|b| {
                let per_stack = vars
                    .per_stack
                    .iter()
                    .map(|stack| {
                        stack
                            .iter()
                            .zip(&scales)
                            .map(|(&v, &d)| to_stack(v, b, d))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                let refined = vars.refined.map(|v| to_stack(v, b, 1)).transpose()?;
                Ok(MultiScaleOutputs { per_stack, refined })
            })
            .collect()
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }
}

impl fmt::Display for NetworkConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} stacks x {} ch, scales {:?}{}",
            self.num_stacks,
            self.feature_channels,
            self.scales,
            if self.regression { ", regression" } else { "" }
        )
    }
}
