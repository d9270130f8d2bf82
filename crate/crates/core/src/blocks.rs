//! Composite building blocks: convolution sites (regular or factorized),
//! the residual block and the multi-scale residual block.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Scalar, Tape, Tensor, Var, LEAKY_SLOPE};
use crate::error::{Error, Result};

/// How a 3x3x3 kernel site is realised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvKind {
    Regular,
    /// A 3x3 kernel in the H-W plane followed by a 3-tap kernel along D,
    /// with no activation in between.
    Factorized,
}

/// Parameter count of one site with `cin` inputs and `cout` outputs and a
/// cubic kernel of extent `k`.
pub fn site_param_count(cin: usize, cout: usize, k: usize, kind: ConvKind) -> usize {
    match kind {
        ConvKind::Regular => cout * cin * k * k * k + cout,
        ConvKind::Factorized => (cout * cin * k * k + cout) + (cout * cout * k + cout),
    }
}

#[derive(Clone, Debug)]
enum SiteParams {
    Regular {
        weight: ParamId,
        bias: ParamId,
    },
    Factorized {
        plane_w: ParamId,
        plane_b: ParamId,
        depth_w: ParamId,
        depth_b: ParamId,
    },
}

/// One convolution site of the network.
#[derive(Clone, Debug)]
pub struct ConvSite {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    /// Cubic kernel extent (3 or 1).
    pub k: usize,
    pub kind: ConvKind,
    params: SiteParams,
}

impl ConvSite {
    /// Registers zero-initialised parameters for a new site.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        kind: ConvKind,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel extent must be odd, got {k}")));
        }
        if kind == ConvKind::Factorized && k == 1 {
            return Err(Error::InvalidArgument(format!(
                "site {name}: a 1x1x1 kernel cannot be factorized"
            )));
        }
        let params = match kind {
            ConvKind::Regular => SiteParams::Regular {
                weight: store.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin, k, k, k]))?,
                bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?,
            },
            ConvKind::Factorized => SiteParams::Factorized {
                plane_w: store.add(
                    format!("{name}.plane.weight"),
                    Tensor::zeros(&[cout, cin, 1, k, k]),
                )?,
                plane_b: store.add(format!("{name}.plane.bias"), Tensor::zeros(&[cout]))?,
                depth_w: store.add(
                    format!("{name}.depth.weight"),
                    Tensor::zeros(&[cout, cout, k, 1, 1]),
                )?,
                depth_b: store.add(format!("{name}.depth.bias"), Tensor::zeros(&[cout]))?,
            },
        };
        Ok(Self {
            name: name.to_string(),
            cin,
            cout,
            k,
            kind,
            params,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self.params {
            SiteParams::Regular { weight, bias } => vec![weight, bias],
            SiteParams::Factorized {
                plane_w,
                plane_b,
                depth_w,
                depth_b,
            } => vec![plane_w, plane_b, depth_w, depth_b],
        }
    }

    pub fn param_count(&self) -> usize {
        site_param_count(self.cin, self.cout, self.k, self.kind)
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        match self.params {
            SiteParams::Regular { weight, bias } => {
                let (w, b) = (tape.param(store, weight), tape.param(store, bias));
                tape.conv3d(x, w, b)
            }
            SiteParams::Factorized {
                plane_w,
                plane_b,
                depth_w,
                depth_b,
            } => {
                let (w, b) = (tape.param(store, plane_w), tape.param(store, plane_b));
                let y = tape.conv3d(x, w, b)?;
                let (w, b) = (tape.param(store, depth_w), tape.param(store, depth_b));
                tape.conv3d(y, w, b)
            }
        }
    }
}

fn lrelu<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.leaky_relu(x, T::lit(LEAKY_SLOPE))
}

fn check_channels<T: Scalar>(tape: &Tape<T>, x: Var, expected: usize, what: &str) -> Result<()> {
    let c = tape.value(x).dims4()?[0];
    if c != expected {
        return Err(Error::Shape(format!("{what} expects {expected} channels, got {c}")));
    }
    Ok(())
}

/// `z + R(z)` with `R = lrelu ∘ conv ∘ lrelu ∘ conv`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub channels: usize,
    pub conv1: ConvSite,
    pub conv2: ConvSite,
}

impl ResidualBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kind: ConvKind,
    ) -> Result<Self> {
        Ok(Self {
            channels,
            conv1: ConvSite::new(store, &format!("{name}.conv1"), channels, channels, 3, kind)?,
            conv2: ConvSite::new(store, &format!("{name}.conv2"), channels, channels, 3, kind)?,
        })
    }

    pub fn sites(&self) -> Vec<&ConvSite> {
        vec![&self.conv1, &self.conv2]
    }

    /// The residual branch on its own.
    pub fn branch<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        check_channels(tape, z, self.channels, "residual block")?;
        let y = self.conv1.apply(tape, store, z)?;
        let y = lrelu(tape, y)?;
        let y = self.conv2.apply(tape, store, y)?;
        lrelu(tape, y)
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let r = self.branch(tape, store, z)?;
        tape.add(z, r)
    }
}

/// Multi-scale residual block at pyramid scale `scale` (resolution
/// `1 / 2^scale` of the full-resolution stream).
#[derive(Clone, Debug)]
pub struct Mrb {
    pub scale: usize,
    /// Full-resolution stream channels.
    pub fr_channels: usize,
    /// Channels of the incoming multi-scale features.
    pub h_in: usize,
    /// Channels of this block's multi-scale output.
    pub channels: usize,
    pub fuse: ConvSite,
    pub rb: ResidualBlock,
    pub bottleneck: ConvSite,
}

/// Outputs of one multi-scale residual block.
pub struct MrbOutput {
    pub l: Var,
    /// `None` when the caller asked to skip the multi-scale output.
    pub h: Option<Var>,
}

impl Mrb {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        scale: usize,
        fr_channels: usize,
        h_in: usize,
        channels: usize,
        kind: ConvKind,
    ) -> Result<Self> {
        if scale == 0 {
            return Err(Error::InvalidArgument("MRB scale must be >= 1".into()));
        }
        Ok(Self {
            scale,
            fr_channels,
            h_in,
            channels,
            fuse: ConvSite::new(
                store,
                &format!("{name}.fuse"),
                fr_channels + h_in,
                channels,
                3,
                kind,
            )?,
            rb: ResidualBlock::new(store, &format!("{name}.rb"), channels, kind)?,
            bottleneck: ConvSite::new(
                store,
                &format!("{name}.bottleneck"),
                channels,
                fr_channels,
                1,
                ConvKind::Regular,
            )?,
        })
    }

    pub fn sites(&self) -> Vec<&ConvSite> {
        vec![&self.fuse, &self.rb.conv1, &self.rb.conv2, &self.bottleneck]
    }

    fn fused<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        l_prev: Var,
        h_prev: Var,
    ) -> Result<Var> {
        check_channels(tape, l_prev, self.fr_channels, "MRB full-resolution input")?;
        check_channels(tape, h_prev, self.h_in, "MRB multi-scale input")?;
        let [_, d, h, w] = tape.value(l_prev).dims4()?;
        let [_, hd, hh, hw] = tape.value(h_prev).dims4()?;
        let f = 1 << self.scale;
        if [d, h, w] != [hd * f, hh * f, hw * f] {
            return Err(Error::Shape(format!(
                "MRB at scale {} needs h at 1/{f} of {:?}, got {:?}",
                self.scale,
                [d, h, w],
                [hd, hh, hw]
            )));
        }
        let mut pooled = l_prev;
        for _ in 0..self.scale {
            pooled = tape.max_pool2(pooled)?;
        }
        let x = tape.concat_channels(pooled, h_prev)?;
        let x = self.fuse.apply(tape, store, x)?;
        lrelu(tape, x)
    }

    /// The residual added to the full-resolution stream, on its own.
    pub fn branch<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        l_prev: Var,
        h_prev: Var,
    ) -> Result<Var> {
        let f = self.fused(tape, store, l_prev, h_prev)?;
        self.upsampled_bottleneck(tape, store, f)
    }

    fn upsampled_bottleneck<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f: Var,
    ) -> Result<Var> {
        let mut y = self.bottleneck.apply(tape, store, f)?;
        for _ in 0..self.scale {
            y = tape.upsample_trilinear2(y)?;
        }
        Ok(y)
    }

    /// Returns `(l_prev + M(l_prev, h_prev), RB(fuse))`; the multi-scale
    /// output is skipped when `want_h` is false.
    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        l_prev: Var,
        h_prev: Var,
        want_h: bool,
    ) -> Result<MrbOutput> {
        let f = self.fused(tape, store, l_prev, h_prev)?;
        let h = if want_h {
            Some(self.rb.apply(tape, store, f)?)
        } else {
            None
        };
        let m = self.upsampled_bottleneck(tape, store, f)?;
        let l = tape.add(l_prev, m)?;
        Ok(MrbOutput { l, h })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;

    #[test]
    fn site_counts() {
        assert_eq!(site_param_count(16, 16, 3, ConvKind::Regular), 6928);
        assert_eq!(site_param_count(16, 16, 3, ConvKind::Factorized), 3104);
        let mut s = ParamStore::<f32>::new();
        let site = ConvSite::new(&mut s, "x", 16, 16, 3, ConvKind::Factorized).unwrap();
        assert_eq!(s.numel(), site.param_count());
    }

    #[test]
    fn factorized_one_by_one_rejected() {
        let mut s = ParamStore::<f32>::new();
        assert!(ConvSite::new(&mut s, "x", 4, 4, 1, ConvKind::Factorized).is_err());
    }

    #[test]
    fn zero_block_is_identity() {
        let mut s = ParamStore::<f64>::new();
        let rb = ResidualBlock::new(&mut s, "rb", 2, ConvKind::Regular).unwrap();
        let mut t = Tape::new();
        let z = Tensor::from_vec(&[2, 2, 2, 2], (0..16).map(|i| i as f64 - 7.5).collect()).unwrap();
        let zv = t.input(z.clone());
        let y = rb.apply(&mut t, &s, zv).unwrap();
        assert_eq!(t.value(y), &z);
    }
}
