//! Parameterized layers shared by the encoders and the denoiser.

use rand::Rng;

use crate::numerics::{Graph, ParamId, ParamStore, Result, Var};

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// `in_dim`×`out_dim` weights drawn with std `gain / sqrt(in_dim)`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Result<Linear> {
        let w = store.add_normal(format!("{name}.w"), &[in_dim, out_dim], gain / (in_dim as f64).sqrt(), rng)?;
        let b = if bias { Some(store.add_normal(format!("{name}.b"), &[out_dim], 0.0, rng)?) } else { None };
        Ok(Linear { w, b })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Conv> {
        let fan_in = (in_ch * k * k) as f64;
        let w = store.add_normal(format!("{name}.w"), &[out_ch, in_ch, k, k], gain / fan_in.sqrt(), rng)?;
        let b = store.add_normal(format!("{name}.b"), &[out_ch], 0.0, rng)?;
        Ok(Conv { w, b, stride, pad: k / 2 })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<GroupNorm> {
        let gamma = store.add(format!("{name}.gamma"), crate::numerics::Tensor::ones(&[channels]))?;
        let beta = store.add(format!("{name}.beta"), crate::numerics::Tensor::zeros(&[channels]))?;
        Ok(GroupNorm { gamma, beta, groups })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}
