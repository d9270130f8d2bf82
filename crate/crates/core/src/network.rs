//! The two-stream registration network and its factorization variants.
//!
//! Dataflow for pyramid depth `N`:
//!
//! ```text
//! stem:    concat(moving, fixed) -> conv 2->C -> RB                  = l, h_0
//! encoder: s = 1..N   (l, h_s) = MRB_s(l, pool(h_{s-1}))
//! extra:   k MRBs at scale N, fed with the running h_N
//! decoder: s = N-1..1 (l, h)   = MRB_s(l, up(h) + h_s)
//! head:    RB(C) -> conv C->C/2 + lrelu -> RB(C/2) -> conv C/2->3  = field
//! ```
//!
//! Regions that a variant may factorize: the full-resolution stream (stem
//! and head), the encoder (including extra MRBs) and the decoder. The final
//! 3-channel convolution and all 1x1x1 kernels are always regular.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::blocks::{ConvKind, ConvSite, Mrb, ResidualBlock};
use crate::error::{Error, Result};
use crate::volgrid::{DisplacementField, Volume};

/// Standard deviation of the final convolution's initial weights.
const HEAD_INIT_STD: f64 = 1e-5;

/// Multiplier on the He scale for the last kernel of every residual branch
/// (residual-block second convolutions and MRB bottlenecks). Without it the
/// full-resolution stream grows by roughly the branch gain at each of the
/// many residual additions, reaching ~1e5 at the head for N = 4.
const RESIDUAL_INIT_GAIN: f64 = 0.1;

fn closes_residual_branch(name: &str) -> bool {
    name.ends_with("conv2.weight")
        || name.ends_with("conv2.depth.weight")
        || name.ends_with("bottleneck.weight")
}

/// Which regions are factorized and how many extra MRBs are appended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariantSpec {
    pub factorize_fr: bool,
    pub factorize_encoder: bool,
    pub factorize_decoder: bool,
    pub extra_mrbs: usize,
}

/// The seven factorization variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    WoF3d,
    WF3d,
    Enc,
    Dec,
    Fr,
    Ms,
    Mrb,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::WoF3d,
        Variant::WF3d,
        Variant::Enc,
        Variant::Dec,
        Variant::Fr,
        Variant::Ms,
        Variant::Mrb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::WoF3d => "wo_f3d",
            Variant::WF3d => "w_f3d",
            Variant::Enc => "enc",
            Variant::Dec => "dec",
            Variant::Fr => "fr",
            Variant::Ms => "ms",
            Variant::Mrb => "mrb",
        }
    }

    pub fn spec(self) -> VariantSpec {
        let (fr, enc, dec, extra) = match self {
            Variant::WoF3d => (false, false, false, 0),
            Variant::WF3d => (true, true, true, 0),
            Variant::Enc => (false, true, false, 0),
            Variant::Dec => (false, false, true, 0),
            Variant::Fr => (true, false, false, 0),
            Variant::Ms => (false, true, true, 0),
            Variant::Mrb => (true, true, true, 2),
        };
        VariantSpec {
            factorize_fr: fr,
            factorize_encoder: enc,
            factorize_decoder: dec,
            extra_mrbs: extra,
        }
    }

    pub fn valid_names() -> String {
        Variant::ALL.map(Variant::name).join(", ")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown variant {s:?}; valid names: {}",
                    Variant::valid_names()
                ))
            })
    }
}

impl Serialize for Variant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Network hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Pyramid depth.
    #[serde(rename = "N")]
    pub n: usize,
    pub fr_channels: usize,
    /// Multi-scale channels per scale, length `N`.
    pub scale_channels: Vec<usize>,
    pub variant: Variant,
    pub seed: u64,
}

/// `[16, 16, 32, 32]` truncated to `n`, continuing with 32 beyond depth 4.
pub fn default_scale_channels(n: usize) -> Vec<usize> {
    (0..n).map(|s| if s < 2 { 16 } else { 32 }).collect()
}

impl NetworkConfig {
    pub fn new(n: usize, variant: Variant, seed: u64) -> Self {
        Self {
            n,
            fr_channels: 16,
            scale_channels: default_scale_channels(n),
            variant,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("N must be >= 1".into()));
        }
        if self.scale_channels.len() != self.n {
            return Err(Error::InvalidArgument(format!(
                "scale_channels has {} entries but N = {}",
                self.scale_channels.len(),
                self.n
            )));
        }
        if self.fr_channels < 2 || self.scale_channels.contains(&0) {
            return Err(Error::InvalidArgument(
                "channel counts must be positive (fr_channels >= 2)".into(),
            ));
        }
        Ok(())
    }

    /// Checks that `shape` is divisible by `2^N` along every axis.
    pub fn check_shape(&self, shape: [usize; 3]) -> Result<()> {
        let f = 1usize << self.n;
        if shape.iter().any(|&s| s == 0 || s % f != 0) {
            return Err(Error::Shape(format!(
                "volume shape {shape:?} is not divisible by 2^N = {f}"
            )));
        }
        Ok(())
    }
}

/// Network region a convolution site belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    FullResolution,
    Encoder,
    Decoder,
    /// The final 3-channel convolution.
    Output,
}

/// One row of the factorization audit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SiteInfo {
    pub name: String,
    pub region: Region,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub kind: ConvKind,
    pub params: usize,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    /// 1x1x1 channel projection of the upsampled deeper features, present
    /// when the two scales carry different channel counts.
    proj: Option<ConvSite>,
    mrb: Mrb,
}

#[derive(Clone, Debug)]
struct Topology {
    stem_conv: ConvSite,
    stem_rb: ResidualBlock,
    encoder: Vec<Mrb>,
    extra: Vec<Mrb>,
    /// Ordered from scale N-1 down to 1.
    decoder: Vec<DecoderStage>,
    head_rb1: ResidualBlock,
    head_conv1: ConvSite,
    head_rb2: ResidualBlock,
    head_out: ConvSite,
}

/// Assembled network: configuration, topology and parameters.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    topo: Topology,
    params: ParamStore<f32>,
}

fn kind(flag: bool) -> ConvKind {
    if flag {
        ConvKind::Factorized
    } else {
        ConvKind::Regular
    }
}

impl Network {
    /// Builds the topology and initialises weights from `config.seed`.
    pub fn build(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.variant.spec();
        let (fr, enc, dec) = (
            kind(spec.factorize_fr),
            kind(spec.factorize_encoder),
            kind(spec.factorize_decoder),
        );
        let c = config.fr_channels;
        let sc = &config.scale_channels;
        let n = config.n;
        let mut p = ParamStore::new();

        let stem_conv = ConvSite::new(&mut p, "stem.conv", 2, c, 3, fr)?;
        let stem_rb = ResidualBlock::new(&mut p, "stem.rb", c, fr)?;
        let mut encoder = Vec::with_capacity(n);
        let mut h_ch = c;
        for s in 1..=n {
            let name = format!("enc{s}");
            encoder.push(Mrb::new(&mut p, &name, s, c, h_ch, sc[s - 1], enc)?);
            h_ch = sc[s - 1];
        }
        let mut extra = Vec::with_capacity(spec.extra_mrbs);
        for k in 1..=spec.extra_mrbs {
            let name = format!("extra{k}");
            extra.push(Mrb::new(&mut p, &name, n, c, sc[n - 1], sc[n - 1], enc)?);
        }
        let mut decoder = Vec::with_capacity(n - 1);
        for s in (1..n).rev() {
            let deeper = sc[s];
            let proj = if deeper != sc[s - 1] {
                let name = format!("dec{s}.proj");
                Some(ConvSite::new(&mut p, &name, deeper, sc[s - 1], 1, ConvKind::Regular)?)
            } else {
                None
            };
            let name = format!("dec{s}");
            let mrb = Mrb::new(&mut p, &name, s, c, sc[s - 1], sc[s - 1], dec)?;
            decoder.push(DecoderStage { proj, mrb });
        }
        let half = c / 2;
        let head_rb1 = ResidualBlock::new(&mut p, "head.rb1", c, fr)?;
        let head_conv1 = ConvSite::new(&mut p, "head.conv1", c, half, 3, fr)?;
        let head_rb2 = ResidualBlock::new(&mut p, "head.rb2", half, fr)?;
        let head_out = ConvSite::new(&mut p, "head.out", half, 3, 3, ConvKind::Regular)?;

        let mut net = Self {
            config: config.clone(),
            topo: Topology {
                stem_conv,
                stem_rb,
                encoder,
                extra,
                decoder,
                head_rb1,
                head_conv1,
                head_rb2,
                head_out,
            },
            params: p,
        };
        net.init_weights(config.seed);
        Ok(net)
    }

    /// He-normal kernels (`std = sqrt(2 / fan_in)`, damped on the kernels
    /// that close residual branches), zero biases and a near-zero final
    /// convolution, drawn in parameter order.
    pub fn init_weights(&mut self, seed: u64) {
        self.init_weights_with_head_std(seed, Some(HEAD_INIT_STD));
    }

    /// As [`Network::init_weights`] with the final convolution drawn at
    /// `head_std`, or He-scaled like every other kernel when `None`.
    pub fn init_weights_with_head_std(&mut self, seed: u64, head_std: Option<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out_ids = self.topo.head_out.param_ids();
        for id in self.params.ids().collect::<Vec<_>>() {
            let param = self.params.get_mut(id);
            let shape = param.value.shape().to_vec();
            if shape.len() != 5 {
                param.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
                continue;
            }
            let fan_in: usize = shape[1..].iter().product();
            let he = (2.0 / fan_in as f64).sqrt();
            let std = match head_std {
                Some(s) if out_ids.contains(&id) => s,
                _ if closes_residual_branch(&param.name) => he * RESIDUAL_INIT_GAIN,
                _ => he,
            };
            let dist = Normal::new(0.0, std).expect("positive std");
            param
                .value
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = dist.sample(&mut rng) as f32);
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn count_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Every convolution site with its region and realisation.
    pub fn sites(&self) -> Vec<SiteInfo> {
        let t = &self.topo;
        let mut out = Vec::new();
        let mut push = |s: &ConvSite, region: Region| {
            out.push(SiteInfo {
                name: s.name.clone(),
                region,
                cin: s.cin,
                cout: s.cout,
                kernel: s.k,
                kind: s.kind,
                params: s.param_count(),
            })
        };
        push(&t.stem_conv, Region::FullResolution);
        t.stem_rb.sites().into_iter().for_each(|s| push(s, Region::FullResolution));
        for m in t.encoder.iter().chain(&t.extra) {
            m.sites().into_iter().for_each(|s| push(s, Region::Encoder));
        }
        for stage in &t.decoder {
            if let Some(p) = &stage.proj {
                push(p, Region::Decoder);
            }
            stage.mrb.sites().into_iter().for_each(|s| push(s, Region::Decoder));
        }
        t.head_rb1.sites().into_iter().for_each(|s| push(s, Region::FullResolution));
        push(&t.head_conv1, Region::FullResolution);
        t.head_rb2.sites().into_iter().for_each(|s| push(s, Region::FullResolution));
        push(&t.head_out, Region::Output);
        out
    }

    /// Checks that exactly the 3x3x3 sites of the variant's flagged regions
    /// are factorized; returns the offending site names otherwise.
    pub fn audit(&self) -> std::result::Result<(), Vec<String>> {
        let spec = self.config.variant.spec();
        let bad: Vec<String> = self
            .sites()
            .into_iter()
            .filter(|s| {
                let flagged = s.kernel == 3
                    && match s.region {
                        Region::FullResolution => spec.factorize_fr,
                        Region::Encoder => spec.factorize_encoder,
                        Region::Decoder => spec.factorize_decoder,
                        Region::Output => false,
                    };
                flagged != (s.kind == ConvKind::Factorized)
            })
            .map(|s| s.name)
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(bad)
        }
    }

    /// Records the forward pass on `tape` using `store` (the network's own
    /// parameters, possibly cast to another precision).
    pub fn forward_on<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        moving: Var,
        fixed: Var,
    ) -> Result<Var> {
        let t = &self.topo;
        let ms = tape.value(moving).dims4()?;
        let fs = tape.value(fixed).dims4()?;
        if ms != fs {
            return Err(Error::Shape(format!("moving {ms:?} and fixed {fs:?} differ")));
        }
        if ms[0] != 1 {
            return Err(Error::Shape(format!("inputs must have 1 channel, got {}", ms[0])));
        }
        self.config.check_shape([ms[1], ms[2], ms[3]])?;

        let x = tape.concat_channels(moving, fixed)?;
        let x = t.stem_conv.apply(tape, store, x)?;
        let x = tape.leaky_relu(x, T::lit(crate::autodiff::LEAKY_SLOPE))?;
        let mut l = t.stem_rb.apply(tape, store, x)?;

        let mut h = l;
        let mut skips = Vec::with_capacity(self.config.n);
        for mrb in &t.encoder {
            let h_in = tape.max_pool2(h)?;
            let out = mrb.apply(tape, store, l, h_in, true)?;
            l = out.l;
            h = out.h.expect("requested");
            skips.push(h);
        }
        for mrb in &t.extra {
            let out = mrb.apply(tape, store, l, h, true)?;
            l = out.l;
            h = out.h.expect("requested");
        }
        let last = t.decoder.len();
        for (k, stage) in t.decoder.iter().enumerate() {
            let s = stage.mrb.scale;
            let mut up = tape.upsample_trilinear2(h)?;
            if let Some(p) = &stage.proj {
                up = p.apply(tape, store, up)?;
            }
            let h_in = tape.add(up, skips[s - 1])?;
            // The shallowest decoder block's multi-scale output feeds nothing.
            let out = stage.mrb.apply(tape, store, l, h_in, k + 1 < last)?;
            l = out.l;
            if let Some(next) = out.h {
                h = next;
            }
        }

        let slope = T::lit(crate::autodiff::LEAKY_SLOPE);
        let y = t.head_rb1.apply(tape, store, l)?;
        let y = t.head_conv1.apply(tape, store, y)?;
        let y = tape.leaky_relu(y, slope)?;
        let y = t.head_rb2.apply(tape, store, y)?;
        t.head_out.apply(tape, store, y)
    }

    /// Predicts the displacement field aligning `moving` to `fixed`.
    pub fn register(&self, moving: &Volume, fixed: &Volume) -> Result<DisplacementField> {
        if moving.shape() != fixed.shape() {
            return Err(Error::Shape(format!(
                "moving {:?} and fixed {:?} differ",
                moving.shape(),
                fixed.shape()
            )));
        }
        let mut tape = Tape::<f32>::new();
        let m = tape.constant(moving.to_tensor());
        let f = tape.constant(fixed.to_tensor());
        let phi = self.forward_on(&mut tape, &self.params, m, f)?;
        DisplacementField::from_tensor(tape.value(phi), fixed.spacing_mm())
    }

    /// Replaces the parameters, checking names and shapes.
    pub fn load_params(&mut self, values: Vec<(String, Tensor<f32>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint holds {} tensors, network has {}",
                values.len(),
                self.params.len()
            )));
        }
        for (id, (name, value)) in self.params.ids().collect::<Vec<_>>().into_iter().zip(values) {
            let p = self.params.get_mut(id);
            if p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {name} {:?} does not match {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        Ok(())
    }
}
