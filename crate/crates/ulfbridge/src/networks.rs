//! Network definitions: the time-conditioned generator and discriminator,
//! the epsilon-prediction backbones behind teacher and critic score models,
//! the auxiliary classifier head, and the small feature autoencoder used by
//! distribution metrics.
//!
//! All forwards are deterministic functions of (parameters, inputs). Sizes
//! target CPU training: the default generator stays under one million
//! parameters.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{
    bind, sinusoidal_embedding, Bound, Conv2d, GroupNorm, Linear, ParamStore, TIME_POS_SCALE,
};
use crate::rng::{rng_for, Stream};
use crate::scalar::Scalar;
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

fn gn_groups(channels: usize) -> usize {
    if channels % 8 == 0 {
        8
    } else {
        1
    }
}

/// Residual block with a per-block projection of the time embedding added
/// as a channel bias between the two convolutions.
#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    gn1: GroupNorm,
    tproj: Linear,
    conv2: Conv2d,
    gn2: GroupNorm,
}

impl ResBlock {
    fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        temb: usize,
    ) -> Self {
        ResBlock {
            conv1: Conv2d::init(store, rng, &format!("{name}.conv1"), channels, channels, 3, 1, 1),
            gn1: GroupNorm::init(store, &format!("{name}.gn1"), channels, gn_groups(channels)),
            tproj: Linear::init(store, rng, &format!("{name}.tproj"), temb, channels),
            conv2: Conv2d::init(store, rng, &format!("{name}.conv2"), channels, channels, 3, 1, 1),
            gn2: GroupNorm::init(store, &format!("{name}.gn2"), channels, gn_groups(channels)),
        }
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, b: &Bound, x: Var, temb: Var) -> Var {
        let h = self.conv1.forward(g, b, x);
        let h = self.gn1.forward(g, b, h);
        let tb = self.tproj.forward(g, b, temb);
        let h = g.add_channel_bias(h, tb);
        let h = g.relu(h);
        let h = self.conv2.forward(g, b, h);
        let h = self.gn2.forward(g, b, h);
        g.add(x, h)
    }
}

fn down_block<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
) -> (Conv2d, GroupNorm) {
    (
        Conv2d::init(store, rng, name, cin, cout, 3, 2, 1),
        GroupNorm::init(store, &format!("{name}.gn"), cout, gn_groups(cout)),
    )
}

fn check_image<S: Scalar>(x: &ArrayD<S>, channels: usize) -> Result<()> {
    let sh = x.shape();
    if sh.len() != 4 || sh[1] != channels {
        return Err(Error::Shape(format!(
            "expected (N,{channels},H,W) input, got {sh:?}"
        )));
    }
    Ok(())
}

// ── generator ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub temb_dim: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            in_channels: 3,
            base_width: 32,
            temb_dim: 64,
        }
    }
}

/// Three-level residual encoder-decoder with sinusoidal time conditioning
/// and a saturating tanh output. Encoder activations at three depths are
/// exposed for patch-contrastive feature sampling.
#[derive(Debug, Clone)]
pub struct Generator<S: Scalar> {
    pub cfg: GeneratorConfig,
    pub params: ParamStore<S>,
    temb_mlp: Linear,
    stem: Conv2d,
    enc1: ResBlock,
    down1: (Conv2d, GroupNorm),
    enc2: ResBlock,
    down2: (Conv2d, GroupNorm),
    mid: ResBlock,
    up1: (Conv2d, GroupNorm),
    dec2: ResBlock,
    up2: (Conv2d, GroupNorm),
    dec1: ResBlock,
    head: Conv2d,
}

/// Channel widths of the three encoder tap depths.
pub fn generator_tap_channels(cfg: &GeneratorConfig) -> [usize; 3] {
    [cfg.base_width, cfg.base_width * 2, cfg.base_width * 4]
}

impl<S: Scalar> Generator<S> {
    pub fn init(cfg: GeneratorConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, Stream::ParamInit, 0);
        let mut store = ParamStore::new();
        let (c1, c2, c3) = (cfg.base_width, cfg.base_width * 2, cfg.base_width * 4);
        let t = cfg.temb_dim;
        let temb_mlp = Linear::init(&mut store, &mut rng, "g.temb", t, t);
        let stem = Conv2d::init(&mut store, &mut rng, "g.stem", cfg.in_channels, c1, 3, 1, 1);
        let enc1 = ResBlock::init(&mut store, &mut rng, "g.enc1", c1, t);
        let down1 = down_block(&mut store, &mut rng, "g.down1", c1, c2);
        let enc2 = ResBlock::init(&mut store, &mut rng, "g.enc2", c2, t);
        let down2 = down_block(&mut store, &mut rng, "g.down2", c2, c3);
        let mid = ResBlock::init(&mut store, &mut rng, "g.mid", c3, t);
        let up1 = (
            Conv2d::init(&mut store, &mut rng, "g.up1", c3, c2, 3, 1, 1),
            GroupNorm::init(&mut store, "g.up1.gn", c2, gn_groups(c2)),
        );
        let dec2 = ResBlock::init(&mut store, &mut rng, "g.dec2", c2, t);
        let up2 = (
            Conv2d::init(&mut store, &mut rng, "g.up2", c2, c1, 3, 1, 1),
            GroupNorm::init(&mut store, "g.up2.gn", c1, gn_groups(c1)),
        );
        let dec1 = ResBlock::init(&mut store, &mut rng, "g.dec1", c1, t);
        let head = Conv2d::init(&mut store, &mut rng, "g.head", c1, cfg.in_channels, 3, 1, 1);
        Generator {
            cfg,
            params: store,
            temb_mlp,
            stem,
            enc1,
            down1,
            enc2,
            down2,
            mid,
            up1,
            dec2,
            up2,
            dec1,
            head,
        }
    }

    fn time_embedding(&self, g: &mut Graph<S>, b: &Bound, ts: &[f64]) -> Var {
        let pos: Vec<f64> = ts.iter().map(|t| t * TIME_POS_SCALE).collect();
        let raw = g.constant(sinusoidal_embedding::<S>(&pos, self.cfg.temb_dim));
        let e = self.temb_mlp.forward(g, b, raw);
        g.silu(e)
    }

    /// Encoder alone: the time embedding plus taps at the three depths.
    /// `ts` has one entry per batch sample.
    pub fn encoder(&self, g: &mut Graph<S>, b: &Bound, x: Var, ts: &[f64]) -> (Var, Vec<Var>) {
        let temb = self.time_embedding(g, b, ts);
        let h = self.stem.forward(g, b, x);
        let e1 = self.enc1.forward(g, b, h, temb);
        let h = self.down1.0.forward(g, b, e1);
        let h = self.down1.1.forward(g, b, h);
        let h = g.relu(h);
        let e2 = self.enc2.forward(g, b, h, temb);
        let h = self.down2.0.forward(g, b, e2);
        let h = self.down2.1.forward(g, b, h);
        let h = g.relu(h);
        let e3 = self.mid.forward(g, b, h, temb);
        (temb, vec![e1, e2, e3])
    }

    /// Full forward pass: translated image plus the encoder taps.
    pub fn forward(&self, g: &mut Graph<S>, b: &Bound, x: Var, ts: &[f64]) -> (Var, Vec<Var>) {
        let (temb, taps) = self.encoder(g, b, x, ts);
        let (e1, e2, e3) = (taps[0], taps[1], taps[2]);
        let h = g.upsample2x(e3);
        let h = self.up1.0.forward(g, b, h);
        let h = self.up1.1.forward(g, b, h);
        let h = g.relu(h);
        let h = g.add(h, e2);
        let h = self.dec2.forward(g, b, h, temb);
        let h = g.upsample2x(h);
        let h = self.up2.0.forward(g, b, h);
        let h = self.up2.1.forward(g, b, h);
        let h = g.relu(h);
        let h = g.add(h, e1);
        let h = self.dec1.forward(g, b, h, temb);
        let h = self.head.forward(g, b, h);
        let y = g.tanh(h);
        (y, taps)
    }

    /// Inference-mode batch prediction; no gradients recorded.
    pub fn predict(&self, x: &ArrayD<S>, t: f64) -> Result<ArrayD<S>> {
        check_image(x, self.cfg.in_channels)?;
        let n = x.shape()[0];
        let mut g = Graph::new();
        let b = crate::nn::bind_frozen(&mut g, &self.params);
        let xv = g.constant(x.clone());
        let (y, _) = self.forward(&mut g, &b, xv, &vec![t; n]);
        Ok(g.value(y).clone())
    }
}

// ── discriminator ──────────────────────────────────────────────────────

/// Patch discriminator: three stride-2 convolutions then a 3x3 logit head,
/// so the logit map is input size / 8. Time-conditioned like the generator.
#[derive(Debug, Clone)]
pub struct Discriminator<S: Scalar> {
    pub in_channels: usize,
    pub temb_dim: usize,
    pub params: ParamStore<S>,
    temb_mlp: Linear,
    c1: Conv2d,
    c2: Conv2d,
    gn2: GroupNorm,
    tproj: Linear,
    c3: Conv2d,
    gn3: GroupNorm,
    head: Conv2d,
}

impl<S: Scalar> Discriminator<S> {
    pub fn init(in_channels: usize, base: usize, temb_dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, Stream::ParamInit, 1);
        let mut store = ParamStore::new();
        let (c1w, c2w, c3w) = (base, base * 2, base * 4);
        let temb_mlp = Linear::init(&mut store, &mut rng, "d.temb", temb_dim, temb_dim);
        let c1 = Conv2d::init(&mut store, &mut rng, "d.c1", in_channels, c1w, 3, 2, 1);
        let c2 = Conv2d::init(&mut store, &mut rng, "d.c2", c1w, c2w, 3, 2, 1);
        let gn2 = GroupNorm::init(&mut store, "d.c2.gn", c2w, gn_groups(c2w));
        let tproj = Linear::init(&mut store, &mut rng, "d.tproj", temb_dim, c2w);
        let c3 = Conv2d::init(&mut store, &mut rng, "d.c3", c2w, c3w, 3, 2, 1);
        let gn3 = GroupNorm::init(&mut store, "d.c3.gn", c3w, gn_groups(c3w));
        let head = Conv2d::init(&mut store, &mut rng, "d.head", c3w, 1, 3, 1, 1);
        Discriminator {
            in_channels,
            temb_dim,
            params: store,
            temb_mlp,
            c1,
            c2,
            gn2,
            tproj,
            c3,
            gn3,
            head,
        }
    }

    /// Logit map of shape (N, 1, H/8, W/8).
    pub fn forward(&self, g: &mut Graph<S>, b: &Bound, x: Var, ts: &[f64]) -> Var {
        let pos: Vec<f64> = ts.iter().map(|t| t * TIME_POS_SCALE).collect();
        let raw = g.constant(sinusoidal_embedding::<S>(&pos, self.temb_dim));
        let temb = self.temb_mlp.forward(g, b, raw);
        let temb = g.silu(temb);
        let slope = S::from_f64c(0.2);
        let h = self.c1.forward(g, b, x);
        let h = g.leaky_relu(h, slope);
        let h = self.c2.forward(g, b, h);
        let h = self.gn2.forward(g, b, h);
        let tb = self.tproj.forward(g, b, temb);
        let h = g.add_channel_bias(h, tb);
        let h = g.leaky_relu(h, slope);
        let h = self.c3.forward(g, b, h);
        let h = self.gn3.forward(g, b, h);
        let h = g.leaky_relu(h, slope);
        self.head.forward(g, b, h)
    }

    /// Inference-mode logits.
    pub fn predict(&self, x: &ArrayD<S>, t: f64) -> Result<ArrayD<S>> {
        check_image(x, self.in_channels)?;
        let n = x.shape()[0];
        let mut g = Graph::new();
        let b = crate::nn::bind_frozen(&mut g, &self.params);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &b, xv, &vec![t; n]);
        Ok(g.value(y).clone())
    }
}

/// Non-saturating logistic GAN losses over a logit map.
///
/// `d_loss` uses detached fakes; `g_loss` backpropagates through `fake`.
/// Both are averaged so a zero-logit discriminator yields ln 2 for each.
pub fn adversarial_losses<S: Scalar>(
    g: &mut Graph<S>,
    disc: &Discriminator<S>,
    bound: &Bound,
    real: Var,
    fake: Var,
    ts: &[f64],
) -> Result<(Var, Var)> {
    if g.value(real).shape()[0] == 0 || g.value(fake).shape()[0] == 0 {
        return Err(Error::EmptyBatch);
    }
    let fake_det = g.detach(fake);
    let lr = disc.forward(g, bound, real, ts);
    let lf_det = disc.forward(g, bound, fake_det, ts);
    let lf = disc.forward(g, bound, fake, ts);
    let d_loss = adv_d_from_logits(g, lr, lf_det);
    let g_loss = adv_g_from_logits(g, lf);
    Ok((d_loss, g_loss))
}

/// 0.5 * (mean softplus(-real) + mean softplus(fake)).
pub fn adv_d_from_logits<S: Scalar>(g: &mut Graph<S>, logits_real: Var, logits_fake: Var) -> Var {
    let nr = g.mul_scalar(logits_real, -S::one());
    let lr = g.softplus(nr);
    let lr = g.mean(lr);
    let lf = g.softplus(logits_fake);
    let lf = g.mean(lf);
    let s = g.add(lr, lf);
    g.mul_scalar(s, S::from_f64c(0.5))
}

/// mean softplus(-fake).
pub fn adv_g_from_logits<S: Scalar>(g: &mut Graph<S>, logits_fake: Var) -> Var {
    let nf = g.mul_scalar(logits_fake, -S::one());
    let l = g.softplus(nf);
    g.mean(l)
}

// ── epsilon-prediction backbones ───────────────────────────────────────

/// A noise-conditional network predicting the injected noise. Implementors
/// also expose a trunk feature for the auxiliary classifier head.
pub trait EpsilonNet<S: Scalar>: Send + Sync {
    fn params(&self) -> &ParamStore<S>;
    fn params_mut(&mut self) -> &mut ParamStore<S>;
    /// Returns (epsilon_hat, trunk_features).
    fn forward(&self, g: &mut Graph<S>, b: &Bound, u: Var, taus: &[usize]) -> (Var, Var);
    fn clone_box(&self) -> Box<dyn EpsilonNet<S>>;
    /// Channel count of the trunk feature, for head sizing.
    fn trunk_channels(&self) -> usize;
    /// Whether trunk features are spatial (NCHW) rather than flat (N,C).
    fn trunk_is_spatial(&self) -> bool;
}

impl<S: Scalar> Clone for Box<dyn EpsilonNet<S>> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Convolutional epsilon predictor for image batches.
#[derive(Debug, Clone)]
pub struct ConvEpsNet<S: Scalar> {
    pub in_channels: usize,
    pub base: usize,
    pub temb_dim: usize,
    params: ParamStore<S>,
    temb_mlp: Linear,
    stem: Conv2d,
    down: Conv2d,
    gn_down: GroupNorm,
    tproj: Linear,
    res: ResBlock,
    up: Conv2d,
    gn_up: GroupNorm,
    head: Conv2d,
}

impl<S: Scalar> ConvEpsNet<S> {
    pub fn init(in_channels: usize, base: usize, temb_dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, Stream::ParamInit, 2);
        let mut store = ParamStore::new();
        let c2 = base * 2;
        let temb_mlp = Linear::init(&mut store, &mut rng, "s.temb", temb_dim, temb_dim);
        let stem = Conv2d::init(&mut store, &mut rng, "s.stem", in_channels, base, 3, 1, 1);
        let down = Conv2d::init(&mut store, &mut rng, "s.down", base, c2, 3, 2, 1);
        let gn_down = GroupNorm::init(&mut store, "s.down.gn", c2, gn_groups(c2));
        let tproj = Linear::init(&mut store, &mut rng, "s.tproj", temb_dim, c2);
        let res = ResBlock::init(&mut store, &mut rng, "s.res", c2, temb_dim);
        let up = Conv2d::init(&mut store, &mut rng, "s.up", c2, base, 3, 1, 1);
        let gn_up = GroupNorm::init(&mut store, "s.up.gn", base, gn_groups(base));
        let head = Conv2d::init(&mut store, &mut rng, "s.head", base, in_channels, 3, 1, 1);
        ConvEpsNet {
            in_channels,
            base,
            temb_dim,
            params: store,
            temb_mlp,
            stem,
            down,
            gn_down,
            tproj,
            res,
            up,
            gn_up,
            head,
        }
    }
}

impl<S: Scalar> EpsilonNet<S> for ConvEpsNet<S> {
    fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph<S>, b: &Bound, u: Var, taus: &[usize]) -> (Var, Var) {
        let pos: Vec<f64> = taus.iter().map(|&t| t as f64).collect();
        let raw = g.constant(sinusoidal_embedding::<S>(&pos, self.temb_dim));
        let temb = self.temb_mlp.forward(g, b, raw);
        let temb = g.silu(temb);
        let h = self.stem.forward(g, b, u);
        let h = g.silu(h);
        let h = self.down.forward(g, b, h);
        let h = self.gn_down.forward(g, b, h);
        let tb = self.tproj.forward(g, b, temb);
        let h = g.add_channel_bias(h, tb);
        let h = g.silu(h);
        let trunk = self.res.forward(g, b, h, temb);
        let h = g.upsample2x(trunk);
        let h = self.up.forward(g, b, h);
        let h = self.gn_up.forward(g, b, h);
        let h = g.silu(h);
        let eps = self.head.forward(g, b, h);
        (eps, trunk)
    }

    fn clone_box(&self) -> Box<dyn EpsilonNet<S>> {
        Box::new(self.clone())
    }

    fn trunk_channels(&self) -> usize {
        self.base * 2
    }

    fn trunk_is_spatial(&self) -> bool {
        true
    }
}

/// Dense epsilon predictor for low-dimensional point testbeds.
#[derive(Debug, Clone)]
pub struct MlpEpsNet<S: Scalar> {
    pub dim: usize,
    pub hidden: usize,
    pub temb_dim: usize,
    params: ParamStore<S>,
    temb_mlp: Linear,
    fc1: Linear,
    tproj: Linear,
    fc2: Linear,
    head: Linear,
}

impl<S: Scalar> MlpEpsNet<S> {
    pub fn init(dim: usize, hidden: usize, temb_dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, Stream::ParamInit, 3);
        let mut store = ParamStore::new();
        let temb_mlp = Linear::init(&mut store, &mut rng, "s.temb", temb_dim, temb_dim);
        let fc1 = Linear::init(&mut store, &mut rng, "s.fc1", dim, hidden);
        let tproj = Linear::init(&mut store, &mut rng, "s.tproj", temb_dim, hidden);
        let fc2 = Linear::init(&mut store, &mut rng, "s.fc2", hidden, hidden);
        let head = Linear::init(&mut store, &mut rng, "s.head", hidden, dim);
        MlpEpsNet {
            dim,
            hidden,
            temb_dim,
            params: store,
            temb_mlp,
            fc1,
            tproj,
            fc2,
            head,
        }
    }
}

impl<S: Scalar> EpsilonNet<S> for MlpEpsNet<S> {
    fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph<S>, b: &Bound, u: Var, taus: &[usize]) -> (Var, Var) {
        let pos: Vec<f64> = taus.iter().map(|&t| t as f64).collect();
        let raw = g.constant(sinusoidal_embedding::<S>(&pos, self.temb_dim));
        let temb = self.temb_mlp.forward(g, b, raw);
        let temb = g.silu(temb);
        let h = self.fc1.forward(g, b, u);
        let tb = self.tproj.forward(g, b, temb);
        let h = g.add(h, tb);
        let h = g.silu(h);
        let trunk = self.fc2.forward(g, b, h);
        let trunk = g.silu(trunk);
        let eps = self.head.forward(g, b, trunk);
        (eps, trunk)
    }

    fn clone_box(&self) -> Box<dyn EpsilonNet<S>> {
        Box::new(self.clone())
    }

    fn trunk_channels(&self) -> usize {
        self.hidden
    }

    fn trunk_is_spatial(&self) -> bool {
        false
    }
}

// ── auxiliary classifier head ──────────────────────────────────────────

/// Small classifier on critic trunk features producing one logit per
/// sample.
#[derive(Debug, Clone)]
pub struct AuxHead<S: Scalar> {
    pub params: ParamStore<S>,
    spatial: bool,
    conv1: Option<Conv2d>,
    conv2: Option<Conv2d>,
    fc: Linear,
}

impl<S: Scalar> AuxHead<S> {
    pub fn init(trunk_channels: usize, spatial: bool, seed: u64) -> Self {
        let mut rng = rng_for(seed, Stream::ParamInit, 4);
        let mut store = ParamStore::new();
        let (conv1, conv2) = if spatial {
            (
                Some(Conv2d::init(
                    &mut store, &mut rng, "h.c1", trunk_channels, trunk_channels, 3, 2, 1,
                )),
                Some(Conv2d::init(
                    &mut store, &mut rng, "h.c2", trunk_channels, trunk_channels, 3, 2, 1,
                )),
            )
        } else {
            (None, None)
        };
        let fc = Linear::init(&mut store, &mut rng, "h.fc", trunk_channels, 1);
        AuxHead {
            params: store,
            spatial,
            conv1,
            conv2,
            fc,
        }
    }

    /// (N,) logits from trunk features.
    pub fn forward(&self, g: &mut Graph<S>, b: &Bound, trunk: Var) -> Var {
        let slope = S::from_f64c(0.2);
        let flat = if self.spatial {
            let h = self.conv1.as_ref().unwrap().forward(g, b, trunk);
            let h = g.leaky_relu(h, slope);
            let h = self.conv2.as_ref().unwrap().forward(g, b, h);
            let h = g.leaky_relu(h, slope);
            g.mean_spatial(h)
        } else {
            trunk
        };
        let l = self.fc.forward(g, b, flat);
        let n = g.value(l).shape()[0];
        g.reshape(l, &[n])
    }
}

// ── feature autoencoder ────────────────────────────────────────────────

/// Reconstruction autoencoder whose frozen encoder supplies the feature
/// space for distribution metrics.
#[derive(Debug, Clone)]
pub struct FeatureAutoencoder<S: Scalar> {
    pub in_channels: usize,
    pub feature_dim: usize,
    pub params: ParamStore<S>,
    e1: Conv2d,
    e2: Conv2d,
    e3: Conv2d,
    efc: Linear,
    dfc: Linear,
    d1: Conv2d,
    d2: Conv2d,
    d3: Conv2d,
    bottleneck_hw: usize,
}

impl<S: Scalar> FeatureAutoencoder<S> {
    /// `size` is the training resolution; the encoder flattens at size/8.
    pub fn init(in_channels: usize, feature_dim: usize, size: usize, seed: u64) -> Self {
        assert!(size % 8 == 0, "resolution must be divisible by 8");
        let mut rng = rng_for(seed, Stream::ParamInit, 5);
        let mut store = ParamStore::new();
        let hw = size / 8;
        let e1 = Conv2d::init(&mut store, &mut rng, "ae.e1", in_channels, 16, 3, 2, 1);
        let e2 = Conv2d::init(&mut store, &mut rng, "ae.e2", 16, 32, 3, 2, 1);
        let e3 = Conv2d::init(&mut store, &mut rng, "ae.e3", 32, 32, 3, 2, 1);
        let efc = Linear::init(&mut store, &mut rng, "ae.efc", 32 * hw * hw, feature_dim);
        let dfc = Linear::init(&mut store, &mut rng, "ae.dfc", feature_dim, 32 * hw * hw);
        let d1 = Conv2d::init(&mut store, &mut rng, "ae.d1", 32, 32, 3, 1, 1);
        let d2 = Conv2d::init(&mut store, &mut rng, "ae.d2", 32, 16, 3, 1, 1);
        let d3 = Conv2d::init(&mut store, &mut rng, "ae.d3", 16, in_channels, 3, 1, 1);
        FeatureAutoencoder {
            in_channels,
            feature_dim,
            params: store,
            e1,
            e2,
            e3,
            efc,
            dfc,
            d1,
            d2,
            d3,
            bottleneck_hw: hw,
        }
    }

    pub fn encode(&self, g: &mut Graph<S>, b: &Bound, x: Var) -> Var {
        let h = self.e1.forward(g, b, x);
        let h = g.relu(h);
        let h = self.e2.forward(g, b, h);
        let h = g.relu(h);
        let h = self.e3.forward(g, b, h);
        let h = g.relu(h);
        let n = g.value(h).shape()[0];
        let hw = self.bottleneck_hw;
        let flat = g.reshape(h, &[n, 32 * hw * hw]);
        self.efc.forward(g, b, flat)
    }

    pub fn decode(&self, g: &mut Graph<S>, b: &Bound, z: Var) -> Var {
        let n = g.value(z).shape()[0];
        let hw = self.bottleneck_hw;
        let h = self.dfc.forward(g, b, z);
        let h = g.relu(h);
        let h = g.reshape(h, &[n, 32, hw, hw]);
        let h = g.upsample2x(h);
        let h = self.d1.forward(g, b, h);
        let h = g.relu(h);
        let h = g.upsample2x(h);
        let h = self.d2.forward(g, b, h);
        let h = g.relu(h);
        let h = g.upsample2x(h);
        let h = self.d3.forward(g, b, h);
        g.tanh(h)
    }

    /// Inference-mode feature vectors, (N, feature_dim).
    pub fn features(&self, x: &ArrayD<S>) -> Result<ArrayD<S>> {
        check_image(x, self.in_channels)?;
        let mut g = Graph::new();
        let b = crate::nn::bind_frozen(&mut g, &self.params);
        let xv = g.constant(x.clone());
        let z = self.encode(&mut g, &b, xv);
        Ok(g.value(z).clone())
    }
}

// ── endpoint predictor abstraction ─────────────────────────────────────

/// What the bridge rollout needs from a generator.
pub trait EndpointPredictor<S: Scalar>: Send + Sync {
    fn predict(&self, x: &ArrayD<S>, t: f64) -> Result<ArrayD<S>>;
}

impl<S: Scalar> EndpointPredictor<S> for Generator<S> {
    fn predict(&self, x: &ArrayD<S>, t: f64) -> Result<ArrayD<S>> {
        Generator::predict(self, x, t)
    }
}

/// Identity map; a rollout fixed point.
pub struct IdentityGenerator;

impl<S: Scalar> EndpointPredictor<S> for IdentityGenerator {
    fn predict(&self, x: &ArrayD<S>, _t: f64) -> Result<ArrayD<S>> {
        Ok(x.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{max_rel_err, numeric_grad};
    use crate::rng::normal_array;
    use ndarray::IxDyn;

    fn rand_image(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = rng_for(seed, Stream::Oracle, 0);
        normal_array::<f64>(&mut rng, shape).mapv(|v| (v * 0.4).tanh())
    }

    #[test]
    fn generator_shape_and_range() {
        let gen = Generator::<f32>::init(GeneratorConfig::default(), 7);
        for size in [32usize, 48] {
            let x = rand_image(&[2, 3, size, size], size as u64).mapv(|v| v as f32);
            let y = gen.predict(&x, 0.0).unwrap();
            assert_eq!(y.shape(), &[2, 3, size, size]);
            assert!(y.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn generator_rejects_bad_channels() {
        let gen = Generator::<f32>::init(GeneratorConfig::default(), 7);
        let x = ArrayD::<f32>::zeros(IxDyn(&[1, 2, 32, 32]));
        assert!(matches!(gen.predict(&x, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn generator_time_conditioning_is_live() {
        let gen = Generator::<f64>::init(GeneratorConfig::default(), 3);
        let x = rand_image(&[1, 3, 32, 32], 5);
        let y0 = gen.predict(&x, 0.0).unwrap();
        let y5 = gen.predict(&x, 0.5).unwrap();
        let diff = (&y0 - &y5).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff > 1e-9, "outputs at t=0 and t=0.5 must differ");
        let y0b = gen.predict(&x, 0.0).unwrap();
        assert_eq!(y0, y0b);
    }

    #[test]
    fn generator_param_budget() {
        let gen = Generator::<f32>::init(GeneratorConfig::default(), 1);
        assert!(
            gen.params.num_scalars() < 1_000_000,
            "generator has {} parameters",
            gen.params.num_scalars()
        );
    }

    #[test]
    fn discriminator_contracts() {
        let d = Discriminator::<f64>::init(3, 32, 64, 9);
        let x = rand_image(&[2, 3, 32, 32], 11);
        let l = d.predict(&x, 0.25).unwrap();
        assert_eq!(l.shape(), &[2, 1, 4, 4]);
        let l2 = d.predict(&x, 0.25).unwrap();
        assert_eq!(l, l2);
        let ones = ArrayD::<f64>::from_elem(IxDyn(&[1, 3, 32, 32]), 1.0);
        let neg = ArrayD::<f64>::from_elem(IxDyn(&[1, 3, 32, 32]), -1.0);
        assert!(d.predict(&ones, 0.0).unwrap().iter().all(|v| v.is_finite()));
        assert!(d.predict(&neg, 0.9).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn adversarial_loss_examples() {
        // zero-logit discriminator: zero the head weights
        let mut d = Discriminator::<f64>::init(3, 16, 64, 2);
        *d.params.get_mut("d.head.w") = ArrayD::zeros(IxDyn(&[1, 64, 3, 3]));
        *d.params.get_mut("d.head.b") = ArrayD::zeros(IxDyn(&[1]));
        let real = rand_image(&[2, 3, 32, 32], 21);
        let fake = rand_image(&[2, 3, 32, 32], 22);
        let mut g = Graph::new();
        let b = bind(&mut g, &d.params);
        let rv = g.constant(real);
        let fv = g.constant(fake);
        let (dl, gl) = adversarial_losses(&mut g, &d, &b, rv, fv, &[0.0, 0.0]).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((g.scalar_value(dl) - ln2).abs() < 1e-12);
        assert!((g.scalar_value(gl) - ln2).abs() < 1e-12);
    }

    #[test]
    fn adversarial_separating_logits() {
        let mut g = Graph::<f64>::new();
        let lr = g.constant(ArrayD::from_elem(IxDyn(&[2, 1, 2, 2]), 20.0));
        let lf = g.constant(ArrayD::from_elem(IxDyn(&[2, 1, 2, 2]), -20.0));
        let d = adv_d_from_logits(&mut g, lr, lf);
        let gl = adv_g_from_logits(&mut g, lf);
        assert!(g.scalar_value(d) < 1e-8);
        assert!((g.scalar_value(gl) - 20.0).abs() < 1e-6);
    }

    #[test]
    fn adv_g_loss_gradient_matches_fd() {
        let d = Discriminator::<f64>::init(3, 8, 16, 5);
        let fake0 = rand_image(&[1, 3, 8, 8], 31);
        let build = |g: &mut Graph<f64>, fv: Var| {
            let b = crate::nn::bind_frozen(g, &d.params);
            let logits = d.forward(g, &b, fv, &[0.3]);
            adv_g_from_logits(g, logits)
        };
        let mut g = Graph::new();
        let fv = g.leaf(fake0.clone(), true);
        let loss = build(&mut g, fv);
        let grads = g.backward(loss);
        let analytic = grads.get(fv).unwrap().clone();
        let mut f = |x: &ArrayD<f64>| {
            let mut g2 = Graph::new();
            let xv = g2.leaf(x.clone(), true);
            let l = build(&mut g2, xv);
            g2.scalar_value(l)
        };
        let numeric = numeric_grad(&mut f, &fake0, 1e-5);
        assert!(max_rel_err(&analytic, &numeric) <= 1e-4);
    }

    #[test]
    fn eps_nets_forward_shapes() {
        let conv = ConvEpsNet::<f32>::init(3, 16, 32, 1);
        let x = rand_image(&[2, 3, 32, 32], 41).mapv(|v| v as f32);
        let mut g = Graph::new();
        let b = bind(&mut g, conv.params());
        let xv = g.constant(x);
        let (eps, trunk) = conv.forward(&mut g, &b, xv, &[3, 60]);
        assert_eq!(g.value(eps).shape(), &[2, 3, 32, 32]);
        assert_eq!(g.value(trunk).shape(), &[2, 32, 16, 16]);

        let mlp = MlpEpsNet::<f32>::init(2, 32, 16, 1);
        let u = ArrayD::<f32>::zeros(IxDyn(&[5, 2]));
        let mut g = Graph::new();
        let b = bind(&mut g, mlp.params());
        let uv = g.constant(u);
        let (eps, trunk) = mlp.forward(&mut g, &b, uv, &[1, 2, 3, 4, 5]);
        assert_eq!(g.value(eps).shape(), &[5, 2]);
        assert_eq!(g.value(trunk).shape(), &[5, 32]);
    }

    #[test]
    fn aux_head_logit_shape() {
        let head = AuxHead::<f32>::init(32, true, 4);
        let trunk = ArrayD::<f32>::zeros(IxDyn(&[3, 32, 16, 16]));
        let mut g = Graph::new();
        let b = bind(&mut g, &head.params);
        let tv = g.constant(trunk);
        let l = head.forward(&mut g, &b, tv);
        assert_eq!(g.value(l).shape(), &[3]);
    }

    #[test]
    fn autoencoder_roundtrip_shapes() {
        let ae = FeatureAutoencoder::<f32>::init(3, 64, 32, 6);
        let x = rand_image(&[2, 3, 32, 32], 51).mapv(|v| v as f32);
        let f = ae.features(&x).unwrap();
        assert_eq!(f.shape(), &[2, 64]);
        let mut g = Graph::new();
        let b = bind(&mut g, &ae.params);
        let xv = g.constant(x);
        let z = ae.encode(&mut g, &b, xv);
        let y = ae.decode(&mut g, &b, z);
        assert_eq!(g.value(y).shape(), &[2, 3, 32, 32]);
    }
}
