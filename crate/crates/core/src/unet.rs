//! A small conditional U-Net predicting the noise in a latent.
//!
//! The noisy latent and the image-condition latent are concatenated along
//! channels; the input convolution's weights for the condition channels start
//! at zero. The timestep, instruction and (optionally) guidance embeddings are
//! summed into one vector that modulates every residual block.

use corredit_nn::layers::{Conv2d, Embedding, GroupNorm, Linear};
use corredit_nn::{Bound, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Rows of the instruction table: the universal instruction and the null token.
pub const INSTRUCTION_ROWS: usize = 2;
pub const NULL_INSTRUCTION: usize = 1;

pub const GUIDANCE_PROJ: &str = "guidance_proj";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    /// Width multiplier per resolution level, highest resolution first.
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    /// Self-attention at the lowest resolution.
    pub attention: bool,
    pub groups: usize,
    /// Width of the Fourier guidance features.
    pub guidance_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 12,
            base_width: 32,
            channel_mults: vec![1, 2, 2],
            res_blocks: 2,
            attention: true,
            groups: 8,
            guidance_dim: 64,
        }
    }
}

impl UNetConfig {
    pub fn embed_dim(&self) -> usize {
        4 * self.base_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() || self.res_blocks == 0 || self.base_width == 0 {
            return Err(Error::Config("U-Net needs at least one level and one block".into()));
        }
        if self.base_width % 2 != 0 || self.guidance_dim % 2 != 0 || self.guidance_dim == 0 {
            return Err(Error::Config("base_width and guidance_dim must be even".into()));
        }
        for &m in &self.channel_mults {
            if m == 0 || (self.base_width * m) % self.groups != 0 {
                return Err(Error::Config(format!(
                    "level width {} not divisible into {} groups",
                    self.base_width * m,
                    self.groups
                )));
            }
        }
        Ok(())
    }

    /// Latent side lengths must halve cleanly at every level.
    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let div = 1 << (self.channel_mults.len() - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "latent {h}x{w} not divisible by {div} for {} levels",
                self.channel_mults.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &UNetConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, cfg.groups),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            emb: Linear::new(store, &format!("{name}.emb"), cfg.embed_dim(), cout, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, cfg.groups),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>, emb: &Var<T>) -> Result<Var<T>> {
        let h = self.conv1.forward(p, &self.norm1.forward(p, x)?.silu())?;
        let h = h.add_channel_embedding(&self.emb.forward(p, emb)?)?;
        let h = self.conv2.forward(p, &self.norm2.forward(p, &h)?.silu())?;
        let skip = match &self.skip {
            Some(s) => s.forward(p, x)?,
            None => x.clone(),
        };
        Ok(skip.add(&h)?)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    proj: Conv2d,
}

impl Attention {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        cfg: &UNetConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), c, cfg.groups),
            q: Conv2d::new(store, &format!("{name}.q"), c, c, 1, 1, rng),
            k: Conv2d::new(store, &format!("{name}.k"), c, c, 1, 1, rng),
            v: Conv2d::new(store, &format!("{name}.v"), c, c, 1, 1, rng),
            proj: Conv2d::new(store, &format!("{name}.proj"), c, c, 1, 1, rng),
        }
    }

    fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let &[b, c, h, w] = x.shape() else {
            return Err(Error::Shape(format!("attention input {:?}", x.shape())));
        };
        let n = self.norm.forward(p, x)?;
        let flat = |v: Var<T>| v.reshape(&[b, c, h * w]);
        let q = flat(self.q.forward(p, &n)?)?;
        let k = flat(self.k.forward(p, &n)?)?;
        let v = flat(self.v.forward(p, &n)?)?;
        let scores = q
            .transpose_last2()?
            .bmm(&k)?
            .scale(T::from_f64_lossy(1.0 / (c as f64).sqrt()));
        let attn = scores.softmax_last()?;
        let out = v.bmm(&attn.transpose_last2()?)?.reshape(&[b, c, h, w])?;
        Ok(x.add(&self.proj.forward(p, &out)?)?)
    }
}

#[derive(Debug, Clone)]
struct Level {
    blocks: Vec<ResBlock>,
    down: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct UpLevel {
    blocks: Vec<ResBlock>,
    up: Option<Conv2d>,
}

/// One network call's inputs, batched along the first axis.
pub struct UNetInput<'a, T> {
    /// `[B, C, h, w]`
    pub z_t: &'a Var<T>,
    /// `[B, C, h, w]`; all zeros where the image condition is dropped.
    pub image_cond: &'a Var<T>,
    pub timesteps: &'a [usize],
    pub instructions: &'a [usize],
    /// Per-sample `(omega_i, omega_t)` for guidance-embedded models.
    pub guidance: Option<&'a [(f64, f64)]>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    instruction: Embedding,
    down: Vec<Level>,
    mid1: ResBlock,
    mid_attn: Option<Attention>,
    mid2: ResBlock,
    up: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    /// Builds the layer layout and fresh parameters. The condition channels of
    /// the input convolution and the whole output convolution start at zero.
    pub fn init<T: Scalar, R: Rng + ?Sized>(config: &UNetConfig, rng: &mut R) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut s = ParamStore::new();
        let cfg = config;
        let lc = cfg.latent_channels;
        let w0 = cfg.base_width;
        let conv_in = Conv2d::new(&mut s, "conv_in", 2 * lc, w0, 3, 1, rng);
        {
            let wt = s.get_mut(conv_in.weight_name())?;
            let per_out = 2 * lc * 9;
            for o in 0..w0 {
                wt.data_mut()[o * per_out + lc * 9..(o + 1) * per_out].fill(T::zero());
            }
        }
        let time1 = Linear::new(&mut s, "time1", w0, cfg.embed_dim(), rng);
        let time2 = Linear::new(&mut s, "time2", cfg.embed_dim(), cfg.embed_dim(), rng);
        let instruction = Embedding::new(&mut s, "instruction", INSTRUCTION_ROWS, cfg.embed_dim(), rng);

        let widths: Vec<usize> = cfg.channel_mults.iter().map(|m| m * w0).collect();
        let mut down = Vec::new();
        let mut ch = w0;
        for (l, &c) in widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for r in 0..cfg.res_blocks {
                blocks.push(ResBlock::new(&mut s, &format!("down{l}.res{r}"), ch, c, cfg, rng));
                ch = c;
            }
            let down_conv =
                (l + 1 < widths.len()).then(|| Conv2d::new(&mut s, &format!("down{l}.down"), c, c, 3, 2, rng));
            down.push(Level {
                blocks,
                down: down_conv,
            });
        }
        let mid1 = ResBlock::new(&mut s, "mid.res0", ch, ch, cfg, rng);
        let mid_attn = cfg.attention.then(|| Attention::new(&mut s, "mid.attn", ch, cfg, rng));
        let mid2 = ResBlock::new(&mut s, "mid.res1", ch, ch, cfg, rng);

        let mut up = Vec::new();
        for (l, &c) in widths.iter().enumerate().rev() {
            let mut blocks = Vec::new();
            for r in 0..cfg.res_blocks {
                let cin = if r == 0 { ch + c } else { c };
                blocks.push(ResBlock::new(&mut s, &format!("up{l}.res{r}"), cin, c, cfg, rng));
                ch = c;
            }
            let up_conv = (l > 0).then(|| Conv2d::new(&mut s, &format!("up{l}.up"), c, c, 3, 1, rng));
            up.push(UpLevel { blocks, up: up_conv });
        }
        let norm_out = GroupNorm::new(&mut s, "norm_out", ch, cfg.groups);
        let conv_out = Conv2d::zeroed(&mut s, "conv_out", ch, lc, 3, 1);
        let net = Self {
            config: config.clone(),
            conv_in,
            time1,
            time2,
            instruction,
            down,
            mid1,
            mid_attn,
            mid2,
            up,
            norm_out,
            conv_out,
        };
        Ok((net, s))
    }

    /// The layer layout alone, for parameters loaded from disk.
    pub fn layout(config: &UNetConfig) -> Result<Self> {
        let mut rng = crate::seed::stream(0, &[]);
        Ok(Self::init::<f32, _>(config, &mut rng)?.0)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Name of the input-convolution weight (`[out, 2C, 3, 3]`); input
    /// channels `C..2C` read the image condition.
    pub fn conv_in_weight(&self) -> &str {
        self.conv_in.weight_name()
    }

    /// Adds the zero-initialized guidance projection to `store`.
    pub fn add_guidance_projection<T: Scalar>(&self, store: &mut ParamStore<T>) {
        Linear::zeroed(store, GUIDANCE_PROJ, self.config.guidance_dim, self.config.embed_dim());
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, input: &UNetInput<'_, T>) -> Result<Var<T>> {
        let &[b, c, h, w] = input.z_t.shape() else {
            return Err(Error::Shape(format!(
                "z_t must be [B, C, h, w], got {:?}",
                input.z_t.shape()
            )));
        };
        if c != self.config.latent_channels || input.image_cond.shape() != input.z_t.shape() {
            return Err(Error::Shape(format!(
                "z_t {:?} / image condition {:?} for {} latent channels",
                input.z_t.shape(),
                input.image_cond.shape(),
                self.config.latent_channels
            )));
        }
        if input.timesteps.len() != b || input.instructions.len() != b {
            return Err(Error::Shape(format!(
                "{} timesteps and {} instructions for batch {b}",
                input.timesteps.len(),
                input.instructions.len()
            )));
        }
        self.config.check_spatial(h, w)?;
        let graph = p.graph();

        let tfeat = graph.constant(timestep_features(input.timesteps, self.config.base_width));
        let mut emb = self.time2.forward(p, &self.time1.forward(p, &tfeat)?.silu())?;
        emb = emb.add(&self.instruction.forward(p, input.instructions)?)?;
        if let Some(g) = input.guidance {
            if g.len() != b {
                return Err(Error::Shape(format!("{} guidance pairs for batch {b}", g.len())));
            }
            let weight = format!("{GUIDANCE_PROJ}.weight");
            if p.var(&weight).is_err() {
                return Err(Error::Config("model has no guidance projection".into()));
            }
            let feats = graph.constant(guidance_features(g, self.config.guidance_dim));
            let proj = feats.linear(p.var(&weight)?, Some(p.var(&format!("{GUIDANCE_PROJ}.bias"))?))?;
            emb = emb.add(&proj)?;
        }
        let emb = emb.silu();

        let mut x = self.conv_in.forward(p, &input.z_t.concat_channels(input.image_cond)?)?;
        let mut skips = Vec::new();
        for level in &self.down {
            for blk in &level.blocks {
                x = blk.forward(p, &x, &emb)?;
            }
            skips.push(x.clone());
            if let Some(d) = &level.down {
                x = d.forward(p, &x)?;
            }
        }
        x = self.mid1.forward(p, &x, &emb)?;
        if let Some(a) = &self.mid_attn {
            x = a.forward(p, &x)?;
        }
        x = self.mid2.forward(p, &x, &emb)?;
        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            x = x.concat_channels(&skip)?;
            for blk in &level.blocks {
                x = blk.forward(p, &x, &emb)?;
            }
            if let Some(u) = &level.up {
                x = u.forward(p, &x.upsample_nearest2x()?)?;
            }
        }
        Ok(self.conv_out.forward(p, &self.norm_out.forward(p, &x)?.silu())?)
    }
}

/// Sinusoidal features of raw integer timesteps, `[B, dim]` as `[sin | cos]`.
pub fn timestep_features<T: Scalar>(timesteps: &[usize], dim: usize) -> Tensor<T> {
    sinusoid(timesteps.iter().map(|&t| t as f64), dim)
}

fn sinusoid<T: Scalar>(values: impl Iterator<Item = f64>, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64).ln() * i as f64 / (half.max(2) - 1) as f64).exp())
        .collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for v in values {
        rows += 1;
        data.extend(freqs.iter().map(|f| T::from_f64_lossy((v * f).sin())));
        data.extend(freqs.iter().map(|f| T::from_f64_lossy((v * f).cos())));
    }
    Tensor::new(&[rows, 2 * half], data).expect("sizes agree")
}

/// Fourier features of one guidance scale: sinusoids of `1000 * omega` over
/// `dim / 2` log-spaced frequencies.
pub fn fourier_scale<T: Scalar>(omegas: &[f64], dim: usize) -> Tensor<T> {
    sinusoid(omegas.iter().map(|w| 1000.0 * w), dim)
}

/// Elementwise product of the two scales' Fourier features, `[B, dim]`.
pub fn guidance_features<T: Scalar>(pairs: &[(f64, f64)], dim: usize) -> Tensor<T> {
    let wi: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let wt: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (fi, ft) = (fourier_scale::<T>(&wi, dim), fourier_scale::<T>(&wt, dim));
    fi.zip_map(&ft, |a, b| a * b).expect("same shape")
}
