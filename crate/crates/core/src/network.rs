//! The six-stage encoder-decoder: wavelet-fed encoder, sub-pixel decoder,
//! and one class-logit head per decoder stage.
//!
//! Stage `t` of the encoder works at the input resolution divided by the
//! cumulative stride of stages `1..=t`. Level `t` of the wavelet pyramid has
//! exactly that resolution, so each downsampling stage is
//!
//! ```text
//! enc[t-1] --unit(stride)--> a ─┐
//! I_w(t)   --unit-----------> b ┴ concat --unit--> enc[t]
//! ```
//!
//! and each decoder stage is
//!
//! ```text
//! dec[t+1] --subpixel(stride t)--> concat enc[t] --unit--unit--> dec[t] --1x1x1--> head t
//! ```

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::io::{join_list, KeyValues};
use crate::ops::{ShuffleFactors, EXPAND_KERNEL, LEAKY_SLOPE, PROJECT_KERNEL};
use crate::ops::norm::DEFAULT_EPS;
use crate::optim::{kaiming_normal, leaky_gain};
use crate::scalar::Scalar;
use crate::volume::{argmax_channels, LabelVolume, Shape3, Spacing, Volume4};
use crate::wavelet::build_pyramid;

pub const NUM_LAYERS: usize = 6;
pub const ISOTROPIC_STRIDE: Shape3 = [2, 2, 2];
pub const ANISOTROPIC_STRIDE: Shape3 = [1, 2, 2];
pub const FULL_KERNEL: Shape3 = [3, 3, 3];
pub const PLANAR_KERNEL: Shape3 = [1, 3, 3];

/// Architecture hyper-parameters.
///
/// `kernel_schedule[i]` is the kernel of encoder/decoder stage `i`;
/// `stride_schedule[i]` is the downsampling stride from stage `i` to `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub num_layers: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    pub kernel_schedule: Vec<Shape3>,
    pub stride_schedule: Vec<Shape3>,
    /// Output width of the wavelet-branch unit at stages `1..num_layers`.
    pub wavelet_branch_channels: Vec<usize>,
}

impl NetConfig {
    /// The first `planar_stages` strides are `(1,2,2)`, the rest `(2,2,2)`.
    pub fn new(
        in_channels: usize,
        num_classes: usize,
        base_channels: usize,
        channel_cap: usize,
        planar_stages: usize,
    ) -> Result<Self> {
        let strides: Vec<Shape3> = (0..NUM_LAYERS - 1)
            .map(|i| if i < planar_stages { ANISOTROPIC_STRIDE } else { ISOTROPIC_STRIDE })
            .collect();
        Self::from_strides(in_channels, num_classes, base_channels, channel_cap, strides)
    }

    /// Isotropic desk-scale configuration: base 8, cap 64.
    pub fn desk(in_channels: usize, num_classes: usize) -> Self {
        Self::new(in_channels, num_classes, 8, 64, 0).expect("valid desk configuration")
    }

    /// Strides follow the voxel spacing: a stage keeps the first axis while
    /// its spacing is at least three times that of the other axes, and the
    /// spacing of every halved axis doubles.
    pub fn for_spacing(
        spacing: Spacing,
        in_channels: usize,
        num_classes: usize,
        base_channels: usize,
        channel_cap: usize,
    ) -> Result<Self> {
        let mut s = spacing;
        let mut strides = Vec::with_capacity(NUM_LAYERS - 1);
        for _ in 0..NUM_LAYERS - 1 {
            let stride = if s[0] >= 3.0 * s[1].min(s[2]) {
                ANISOTROPIC_STRIDE
            } else {
                ISOTROPIC_STRIDE
            };
            for a in 0..3 {
                s[a] *= stride[a] as f64;
            }
            strides.push(stride);
        }
        Self::from_strides(in_channels, num_classes, base_channels, channel_cap, strides)
    }

    fn from_strides(
        in_channels: usize,
        num_classes: usize,
        base_channels: usize,
        channel_cap: usize,
        strides: Vec<Shape3>,
    ) -> Result<Self> {
        let mut kernels: Vec<Shape3> = strides
            .iter()
            .map(|&s| if s == ANISOTROPIC_STRIDE { PLANAR_KERNEL } else { FULL_KERNEL })
            .collect();
        kernels.push(FULL_KERNEL);
        let mut cfg = NetConfig {
            num_layers: NUM_LAYERS,
            in_channels,
            num_classes,
            base_channels,
            channel_cap,
            kernel_schedule: kernels,
            stride_schedule: strides,
            wavelet_branch_channels: Vec::new(),
        };
        cfg.wavelet_branch_channels = (1..NUM_LAYERS).map(|t| (cfg.channels(t) / 4).max(8)).collect();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Feature width of stage `t`: `min(base * 2^t, cap)`.
    pub fn channels(&self, t: usize) -> usize {
        (self.base_channels << t).min(self.channel_cap)
    }

    /// Per-axis product of the strides of stages `1..=t`.
    pub fn cumulative_stride(&self, t: usize) -> Shape3 {
        let mut c = [1; 3];
        for s in &self.stride_schedule[..t] {
            for a in 0..3 {
                c[a] *= s[a];
            }
        }
        c
    }

    /// Channel count of the stacked wavelet bands at stage `t >= 1`.
    pub fn wavelet_input_channels(&self, t: usize) -> usize {
        let transformed = self.stride_schedule[t - 1].iter().filter(|&&s| s == 2).count();
        self.in_channels << transformed
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.num_layers != NUM_LAYERS {
            return fail(format!("num_layers is {}, the network has {NUM_LAYERS}", self.num_layers));
        }
        if self.kernel_schedule.len() != NUM_LAYERS || self.stride_schedule.len() != NUM_LAYERS - 1 {
            return fail(format!(
                "expected {NUM_LAYERS} kernels and {} strides, got {} and {}",
                NUM_LAYERS - 1,
                self.kernel_schedule.len(),
                self.stride_schedule.len()
            ));
        }
        if self.wavelet_branch_channels.len() != NUM_LAYERS - 1
            || self.wavelet_branch_channels.contains(&0)
        {
            return fail("wavelet_branch_channels needs one positive width per downsampling stage".into());
        }
        if self.in_channels == 0 || self.num_classes < 2 || self.base_channels == 0 {
            return fail("in_channels and base_channels must be positive, num_classes at least 2".into());
        }
        if self.channel_cap < self.base_channels {
            return fail(format!(
                "channel cap {} below base width {}",
                self.channel_cap, self.base_channels
            ));
        }
        for (i, &s) in self.stride_schedule.iter().enumerate() {
            if s != ISOTROPIC_STRIDE && s != ANISOTROPIC_STRIDE {
                return fail(format!("stride {s:?} at stage {}; expected (2,2,2) or (1,2,2)", i + 1));
            }
        }
        for (i, &k) in self.kernel_schedule.iter().enumerate() {
            let planar_stride = self.stride_schedule.get(i) == Some(&ANISOTROPIC_STRIDE);
            let expected = if planar_stride { PLANAR_KERNEL } else { FULL_KERNEL };
            if k != expected {
                return fail(format!("stage {i} kernel {k:?} should be {expected:?} for its stride"));
            }
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.insert("num_layers", self.num_layers);
        kv.insert("in_channels", self.in_channels);
        kv.insert("num_classes", self.num_classes);
        kv.insert("base_channels", self.base_channels);
        kv.insert("channel_cap", self.channel_cap);
        kv.insert("kernel_schedule", triples_to_text(&self.kernel_schedule));
        kv.insert("stride_schedule", triples_to_text(&self.stride_schedule));
        kv.insert("wavelet_branch_channels", join_list(&self.wavelet_branch_channels));
        kv
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let cfg = (|| -> std::result::Result<Self, String> {
            Ok(NetConfig {
                num_layers: kv.parse_value("num_layers")?,
                in_channels: kv.parse_value("in_channels")?,
                num_classes: kv.parse_value("num_classes")?,
                base_channels: kv.parse_value("base_channels")?,
                channel_cap: kv.parse_value("channel_cap")?,
                kernel_schedule: triples_from_text(kv.require("kernel_schedule")?)?,
                stride_schedule: triples_from_text(kv.require("stride_schedule")?)?,
                wavelet_branch_channels: kv.parse_list("wavelet_branch_channels")?,
            })
        })()
        .map_err(Error::Config)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `1x3x3,3x3x3` style list.
pub fn triples_to_text(v: &[Shape3]) -> String {
    v.iter()
        .map(|t| format!("{}x{}x{}", t[0], t[1], t[2]))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn triples_from_text(s: &str) -> std::result::Result<Vec<Shape3>, String> {
    s.split(',')
        .map(|item| {
            let parts: Vec<usize> = item
                .trim()
                .split('x')
                .map(|p| p.parse::<usize>().map_err(|_| format!("bad triple `{item}`")))
                .collect::<std::result::Result<_, _>>()?;
            <Shape3>::try_from(parts).map_err(|_| format!("bad triple `{item}`"))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

/// One named parameter tensor, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub values: Vec<T>,
    /// Frozen parameters receive no updates.
    pub frozen: bool,
}

struct ParamSpec {
    name: String,
    len: usize,
    init: Init,
}

fn push_conv(out: &mut Vec<ParamSpec>, prefix: &str, spec: ConvSpec) {
    let fan_in = spec.in_channels * spec.size.iter().product::<usize>();
    out.push(ParamSpec {
        name: format!("{prefix}.w"),
        len: spec.weight_len(),
        init: Init::Kaiming { fan_in },
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b"),
        len: spec.out_channels,
        init: Init::Zeros,
    });
}

fn push_unit(out: &mut Vec<ParamSpec>, prefix: &str, spec: ConvSpec) {
    push_conv(out, prefix, spec);
    out.push(ParamSpec {
        name: format!("{prefix}.gamma"),
        len: spec.out_channels,
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.beta"),
        len: spec.out_channels,
        init: Init::Zeros,
    });
}

/// Geometry of every convolution in the network, keyed by name prefix.
struct Plan {
    specs: Vec<ParamSpec>,
}

impl Plan {
    fn new(cfg: &NetConfig) -> Self {
        let mut specs = Vec::new();
        for (prefix, spec) in unit_specs(cfg) {
            match prefix.rsplit('.').next() {
                Some("head") | Some("expand") | Some("project") => push_conv(&mut specs, &prefix, spec),
                _ => push_unit(&mut specs, &prefix, spec),
            }
        }
        Plan { specs }
    }
}

/// Every convolution of the network in forward order.
fn unit_specs(cfg: &NetConfig) -> Vec<(String, ConvSpec)> {
    let k = &cfg.kernel_schedule;
    let ch = |t| cfg.channels(t);
    let mut out = vec![
        ("enc0.u1".to_string(), ConvSpec::same(ch(0), cfg.in_channels, k[0])),
        ("enc0.u2".to_string(), ConvSpec::same(ch(0), ch(0), k[0])),
    ];
    for t in 1..cfg.num_layers {
        let wb = cfg.wavelet_branch_channels[t - 1];
        out.push((
            format!("enc{t}.u1"),
            ConvSpec::same(ch(t), ch(t - 1), k[t]).strided(cfg.stride_schedule[t - 1]),
        ));
        out.push((format!("enc{t}.wav"), ConvSpec::same(wb, cfg.wavelet_input_channels(t), k[t])));
        out.push((format!("enc{t}.u2"), ConvSpec::same(ch(t), ch(t) + wb, k[t])));
    }
    for t in (1..cfg.num_layers).rev() {
        let skip = ch(t - 1);
        let r = cfg.stride_schedule[t - 1].iter().product::<usize>();
        out.push((format!("dec{t}.expand"), ConvSpec::same(2 * ch(t), ch(t), EXPAND_KERNEL)));
        out.push((format!("dec{t}.project"), ConvSpec::same(r * skip, 2 * ch(t), PROJECT_KERNEL)));
        out.push((format!("dec{t}.u1"), ConvSpec::same(skip, 2 * skip, k[t - 1])));
        out.push((format!("dec{t}.u2"), ConvSpec::same(skip, skip, k[t - 1])));
        out.push((format!("dec{t}.head"), ConvSpec::same(cfg.num_classes, skip, [1; 3])));
    }
    out
}

/// Graph handles for one forward pass.
pub struct ForwardPass {
    /// Class logits; index 0 is full resolution, each next head is one
    /// stage coarser.
    pub heads: Vec<Var>,
    /// Parameter leaves in [`Network::params`] order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    config: NetConfig,
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Network<T> {
    /// Fan-in scaled normal convolution weights, zero biases, unit norm
    /// scales; deterministic in `seed`.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = leaky_gain(LEAKY_SLOPE);
        let params = Plan::new(&config)
            .specs
            .into_iter()
            .map(|s| Param {
                values: match s.init {
                    Init::Kaiming { fan_in } => kaiming_normal(s.len, fan_in, gain, &mut rng),
                    Init::Zeros => vec![T::zero(); s.len],
                    Init::Ones => vec![T::one(); s.len],
                },
                name: s.name,
                frozen: false,
            })
            .collect();
        Ok(Self::assemble(config, params))
    }

    /// All parameters zero.
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let params = Plan::new(&config)
            .specs
            .into_iter()
            .map(|s| Param {
                values: vec![T::zero(); s.len],
                name: s.name,
                frozen: false,
            })
            .collect();
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: NetConfig, params: Vec<Param<T>>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Network { config, params, index }
    }

    /// Rebuilds a network from stored parameters, checking names and sizes
    /// against the configuration.
    pub fn from_params(config: NetConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let plan = Plan::new(&config);
        if plan.specs.len() != params.len() {
            return Err(Error::config(format!(
                "configuration has {} parameter tensors, got {}",
                plan.specs.len(),
                params.len()
            )));
        }
        for (s, p) in plan.specs.iter().zip(&params) {
            if s.name != p.name || s.len != p.values.len() {
                return Err(Error::config(format!(
                    "parameter {} ({} values) does not match expected {} ({} values)",
                    p.name,
                    p.values.len(),
                    s.name,
                    s.len
                )));
            }
        }
        Ok(Self::assemble(config, params))
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Zeroes and freezes every wavelet-branch parameter, so the encoder
    /// sees only zeros from the wavelet inputs.
    pub fn zero_wavelet_branch(&mut self) {
        for p in self.params.iter_mut().filter(|p| is_wavelet_param(&p.name)) {
            p.values.iter_mut().for_each(|v| *v = T::zero());
            p.frozen = true;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    values: p.values.iter().map(|v| U::lit(v.as_f64())).collect(),
                    frozen: p.frozen,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Checks that every spatial axis is divisible by the total stride.
    pub fn check_input(&self, spatial: Shape3) -> Result<()> {
        let total = self.config.cumulative_stride(self.config.num_layers - 1);
        if (0..3).any(|a| spatial[a] == 0 || !spatial[a].is_multiple_of(total[a])) {
            return Err(Error::dim(format!(
                "input {spatial:?} is not divisible by the total stride {total:?}; pad it first"
            )));
        }
        Ok(())
    }

    /// Records the whole network on `g`.
    pub fn forward(&self, g: &mut Graph<T>, image: &Volume4<T>) -> Result<ForwardPass> {
        let cfg = &self.config;
        if image.channels() != cfg.in_channels {
            return Err(Error::dim(format!(
                "image has {} channels, network expects {}",
                image.channels(),
                cfg.in_channels
            )));
        }
        self.check_input(image.spatial())?;
        let vars: Vec<Var> = self.params.iter().map(|p| g.parameter(&p.values)).collect();
        let specs: HashMap<String, ConvSpec> = unit_specs(cfg).into_iter().collect();
        let ctx = Ctx {
            vars: &vars,
            index: &self.index,
            specs: &specs,
        };
        let pyramid = build_pyramid(image, &cfg.stride_schedule)?;

        let x = g.constant(image.clone());
        let mut skips = Vec::with_capacity(cfg.num_layers);
        let h = ctx.unit(g, "enc0.u1", x)?;
        skips.push(ctx.unit(g, "enc0.u2", h)?);
        for t in 1..cfg.num_layers {
            let down = ctx.unit(g, &format!("enc{t}.u1"), skips[t - 1])?;
            let bands = g.constant(pyramid.stacked(t)?);
            let wav = ctx.unit(g, &format!("enc{t}.wav"), bands)?;
            let fused = g.concat(&[down, wav])?;
            skips.push(ctx.unit(g, &format!("enc{t}.u2"), fused)?);
        }

        let mut heads = Vec::with_capacity(cfg.num_layers - 1);
        let mut below = skips[cfg.num_layers - 1];
        for t in (1..cfg.num_layers).rev() {
            let f = ShuffleFactors::new(cfg.stride_schedule[t - 1])?;
            let e = ctx.conv(g, &format!("dec{t}.expand"), below)?;
            let e = g.tanh(e);
            let p = ctx.conv(g, &format!("dec{t}.project"), e)?;
            let p = g.leaky_relu(p, T::lit(LEAKY_SLOPE));
            let up = g.pixel_shuffle(p, f)?;
            let joined = g.concat(&[up, skips[t - 1]])?;
            let h = ctx.unit(g, &format!("dec{t}.u1"), joined)?;
            below = ctx.unit(g, &format!("dec{t}.u2"), h)?;
            heads.push(ctx.conv(g, &format!("dec{t}.head"), below)?);
        }
        heads.reverse();
        Ok(ForwardPass { heads, params: vars })
    }

    /// Head values of a forward pass, full resolution first.
    pub fn logits(&self, image: &Volume4<T>) -> Result<Vec<Volume4<T>>> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, image)?;
        Ok(pass.heads.iter().map(|&h| g.value(h).clone()).collect())
    }

    /// Sliding-window prediction: full-resolution logits of overlapping
    /// patches are averaged uniformly, then each voxel takes the argmax
    /// class. Images smaller than the patch are zero-padded and cropped back.
    pub fn infer(&self, image: &Volume4<T>, patch: Shape3, overlap: f64) -> Result<LabelVolume> {
        if !(0.0..1.0).contains(&overlap) {
            return Err(Error::arg(format!("overlap {overlap} outside [0, 1)")));
        }
        let total = self.config.cumulative_stride(self.config.num_layers - 1);
        if (0..3).any(|a| patch[a] == 0 || !patch[a].is_multiple_of(total[a])) {
            return Err(Error::arg(format!(
                "patch {patch:?} is not a positive multiple of the total stride {total:?}"
            )));
        }
        let shape = image.spatial();
        let padded: Shape3 = std::array::from_fn(|a| shape[a].max(patch[a]));
        let source = if padded == shape {
            image.clone()
        } else {
            image.embed([0; 3], padded)?
        };
        let classes = self.config.num_classes;
        let mut acc = Volume4::<T>::zeros([padded[0], padded[1], padded[2], classes]);
        let mut hits = vec![0u32; padded.iter().product()];
        let starts: Vec<Vec<usize>> = (0..3).map(|a| window_starts(padded[a], patch[a], overlap)).collect();
        for &i0 in &starts[0] {
            for &j0 in &starts[1] {
                for &k0 in &starts[2] {
                    let window = source.crop([i0, j0, k0], patch)?;
                    let logits = self.logits(&window)?.swap_remove(0);
                    for i in 0..patch[0] {
                        for j in 0..patch[1] {
                            for k in 0..patch[2] {
                                let (a, b, c) = (i0 + i, j0 + j, k0 + k);
                                hits[(a * padded[1] + b) * padded[2] + c] += 1;
                                for ch in 0..classes {
                                    let o = acc.offset(a, b, c, ch);
                                    acc.data_mut()[o] += logits.get(i, j, k, ch);
                                }
                            }
                        }
                    }
                }
            }
        }
        for (v, chunk) in hits.iter().zip(acc.data_mut().chunks_mut(classes)) {
            let n = T::lit(f64::from(*v));
            chunk.iter_mut().for_each(|x| *x = *x / n);
        }
        let labels = argmax_channels(&acc);
        if padded == shape {
            Ok(labels)
        } else {
            labels.crop([0; 3], shape)
        }
    }
}

pub fn is_wavelet_param(name: &str) -> bool {
    name.split('.').nth(1) == Some("wav")
}

/// Window origins covering `0..n` with step `floor(patch * (1 - overlap))`;
/// the last window is flush with the end.
fn window_starts(n: usize, patch: usize, overlap: f64) -> Vec<usize> {
    let step = ((patch as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let last = n - patch;
    let mut out: Vec<usize> = (0..=last).step_by(step).collect();
    if *out.last().expect("at least one window") != last {
        out.push(last);
    }
    out
}

struct Ctx<'a> {
    vars: &'a [Var],
    index: &'a HashMap<String, usize>,
    specs: &'a HashMap<String, ConvSpec>,
}

impl Ctx<'_> {
    fn var(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    fn conv<T: Scalar>(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        let spec = self.specs[prefix];
        g.conv3d(x, self.var(&format!("{prefix}.w")), self.var(&format!("{prefix}.b")), spec)
    }

    /// convolution -> instance norm -> leaky ReLU
    fn unit<T: Scalar>(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        let y = self.conv(g, prefix, x)?;
        let y = g.instance_norm(
            y,
            self.var(&format!("{prefix}.gamma")),
            self.var(&format!("{prefix}.beta")),
            T::lit(DEFAULT_EPS),
        )?;
        Ok(g.leaky_relu(y, T::lit(LEAKY_SLOPE)))
    }
}
