//! The network: cube embedding, a unified encoder over visible video tokens
//! and text tokens, video and text decoders, pooled features and the
//! matching head.
//!
//! Parameters live in a flat, ordered list ([`ModelState::params`]). A
//! [`Layout`] maps each architectural role to its slot in that list; the
//! forward pass in [`net`] puts every slot on a tape and looks roles up
//! through the layout, so the same code runs in `f32` and `f64`.

pub mod net;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::numerics::Array;
use crate::synthclips::{ClipDims, VideoClip, CAPTION_LEN};
use crate::{Error, Result};

pub use net::{Decoded, EncoderInput, Encoded, Net, TextInput, VideoInput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    /// Separate video and text reconstruction stacks.
    Dual,
    /// One stack over `[video ∥ text]` with two output heads.
    Shared,
}

/// Architectural hyperparameters. Everything a checkpoint must agree on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub clip: ClipDims,
    /// Cube extents `(t, h, w)`.
    pub cube: [usize; 3],
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub video_decoder_depth: usize,
    pub video_decoder_heads: usize,
    pub text_decoder_depth: usize,
    pub vocab_size: usize,
    pub caption_len: usize,
    pub text_mask_token_in_encoder: bool,
    pub decoder_mode: DecoderMode,
    pub tau_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            clip: ClipDims::default(),
            cube: [2, 8, 8],
            dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            video_decoder_depth: 4,
            video_decoder_heads: 4,
            text_decoder_depth: 0,
            vocab_size: 19,
            caption_len: CAPTION_LEN,
            text_mask_token_in_encoder: true,
            decoder_mode: DecoderMode::Dual,
            tau_init: 0.07,
        }
    }
}

impl ModelConfig {
    /// A 4x8x8 clip in 8 cubes with an 8-wide single-layer encoder: small
    /// enough for exhaustive finite-difference checks.
    pub fn micro() -> Self {
        Self {
            clip: ClipDims { frames: 4, height: 8, width: 8, channels: 3 },
            cube: [2, 4, 4],
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            video_decoder_depth: 1,
            video_decoder_heads: 2,
            ..Self::default()
        }
    }

    /// Tokens per clip: `(T/t)·(H/h)·(W/w)`.
    pub fn n_video_tokens(&self) -> usize {
        self.grid().iter().product()
    }

    /// Token grid `(T/t, H/h, W/w)`.
    pub fn grid(&self) -> [usize; 3] {
        [self.clip.frames / self.cube[0], self.clip.height / self.cube[1], self.clip.width / self.cube[2]]
    }

    /// Pixel values per cube: `t·h·w·C`.
    pub fn cube_dim(&self) -> usize {
        self.cube.iter().product::<usize>() * self.clip.channels
    }

    pub fn decoder_dim(&self) -> usize {
        self.dim / 2
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.dim % 2 != 0 {
            return fail(format!("model.dim must be even and positive, got {}", self.dim));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("model.heads ({}) must divide model.dim ({})", self.heads, self.dim));
        }
        let dd = self.decoder_dim();
        let decoder_blocks = self.video_decoder_depth > 0 || self.text_decoder_depth > 0;
        if decoder_blocks && (self.video_decoder_heads == 0 || dd % self.video_decoder_heads != 0) {
            return fail(format!("model.video_decoder_heads ({}) must divide decoder width {dd}", self.video_decoder_heads));
        }
        if self.mlp_ratio == 0 {
            return fail("model.mlp_ratio must be positive".into());
        }
        let extents = [self.clip.frames, self.clip.height, self.clip.width];
        for (axis, (&e, &c)) in ["frames", "height", "width"].iter().zip(extents.iter().zip(&self.cube)) {
            if c == 0 || e % c != 0 {
                return fail(format!("clip {axis} {e} not divisible by cube extent {c}"));
            }
        }
        if self.clip.channels == 0 {
            return fail("model.clip.channels must be positive".into());
        }
        if self.vocab_size <= 3 {
            return fail(format!("model.vocab_size {} leaves no ordinary words", self.vocab_size));
        }
        if self.caption_len == 0 {
            return fail("model.caption_len must be positive".into());
        }
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return fail(format!("model.tau_init must be positive, got {}", self.tau_init));
        }
        Ok(())
    }
}

/// Lower bound applied to the contrastive temperature after every update.
pub const TAU_MIN: f32 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Normal(f64),
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub g: usize,
    pub b: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub ln1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

/// Slot of every architectural role in the flat parameter list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub cube: Linear,
    pub token_embed: usize,
    pub video_pos: usize,
    pub text_pos: usize,
    /// `[2, D]`: row 0 video, row 1 text.
    pub type_embed: usize,
    pub encoder: Vec<Block>,
    pub encoder_norm: Norm,
    pub video_dec_in: Linear,
    pub video_mask: usize,
    pub video_dec_pos: usize,
    pub video_decoder: Vec<Block>,
    pub video_dec_norm: Option<Norm>,
    pub video_head: Linear,
    /// Projection into the text decoder width, when it differs from D.
    pub text_dec_in: Option<Linear>,
    /// Re-inserted at masked caption positions when the encoder dropped them.
    pub text_mask: Option<usize>,
    pub text_dec_pos: Option<usize>,
    pub text_decoder: Vec<Block>,
    pub text_dec_norm: Option<Norm>,
    pub text_head: Linear,
    pub vtm_head: Linear,
    pub tau: usize,
}

struct Registry {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Registry {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.add(format!("{name}.weight"), vec![fan_in, fan_out], Init::Xavier { fan_in, fan_out }),
            b: self.add(format!("{name}.bias"), vec![fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            g: self.add(format!("{name}.gamma"), vec![width], Init::Ones),
            b: self.add(format!("{name}.beta"), vec![width], Init::Zeros),
        }
    }

    fn embedding(&mut self, name: &str, shape: Vec<usize>) -> usize {
        self.add(name.to_string(), shape, Init::Normal(0.02))
    }

    fn block(&mut self, name: &str, width: usize, heads: usize, mlp_ratio: usize) -> Block {
        Block {
            ln1: self.norm(&format!("{name}.ln1"), width),
            qkv: self.linear(&format!("{name}.attn.qkv"), width, 3 * width),
            proj: self.linear(&format!("{name}.attn.proj"), width, width),
            ln2: self.norm(&format!("{name}.ln2"), width),
            fc1: self.linear(&format!("{name}.mlp.fc1"), width, mlp_ratio * width),
            fc2: self.linear(&format!("{name}.mlp.fc2"), mlp_ratio * width, width),
            heads,
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Registry) {
    let mut r = Registry { names: Vec::new(), shapes: Vec::new(), inits: Vec::new() };
    let (d, dd, nv, l, v) = (cfg.dim, cfg.decoder_dim(), cfg.n_video_tokens(), cfg.caption_len, cfg.vocab_size);
    let cube = r.linear("cube_embed", cfg.cube_dim(), d);
    let token_embed = r.embedding("token_embed", vec![v, d]);
    let video_pos = r.embedding("video_pos", vec![nv, d]);
    let text_pos = r.embedding("text_pos", vec![l, d]);
    let type_embed = r.embedding("type_embed", vec![2, d]);
    let encoder = (0..cfg.depth).map(|i| r.block(&format!("encoder.{i}"), d, cfg.heads, cfg.mlp_ratio)).collect();
    let encoder_norm = r.norm("encoder.norm", d);

    let video_dec_in = r.linear("video_decoder.in", d, dd);
    let video_mask = r.embedding("video_decoder.mask_token", vec![1, dd]);
    let video_dec_pos = r.embedding("video_decoder.pos", vec![nv, dd]);
    let video_decoder: Vec<Block> = (0..cfg.video_decoder_depth)
        .map(|i| r.block(&format!("video_decoder.{i}"), dd, cfg.video_decoder_heads, cfg.mlp_ratio))
        .collect();
    let video_dec_norm = (!video_decoder.is_empty()).then(|| r.norm("video_decoder.norm", dd));
    let video_head = r.linear("video_decoder.head", dd, cfg.cube_dim());

    let shared = cfg.decoder_mode == DecoderMode::Shared;
    // Text decoder width: D when purely linear, D/2 when it has blocks or shares the video stack.
    let text_width = if shared || cfg.text_decoder_depth > 0 { dd } else { d };
    let text_dec_in = (text_width != d).then(|| r.linear("text_decoder.in", d, dd));
    let text_mask = (!cfg.text_mask_token_in_encoder).then(|| r.embedding("text_decoder.mask_token", vec![1, text_width]));
    let text_dec_pos = (text_width != d || text_mask.is_some()).then(|| r.embedding("text_decoder.pos", vec![l, text_width]));
    let text_decoder: Vec<Block> = if shared {
        Vec::new()
    } else {
        (0..cfg.text_decoder_depth)
            .map(|i| r.block(&format!("text_decoder.{i}"), dd, cfg.video_decoder_heads, cfg.mlp_ratio))
            .collect()
    };
    let text_dec_norm = (!text_decoder.is_empty()).then(|| r.norm("text_decoder.norm", dd));
    let text_head = r.linear("text_decoder.head", text_width, v);

    let vtm_head = r.linear("vtm_head", 2 * d, 2);
    let tau = r.add("tau".into(), vec![1], Init::Const(cfg.tau_init));
    let layout = Layout {
        cube,
        token_embed,
        video_pos,
        text_pos,
        type_embed,
        encoder,
        encoder_norm,
        video_dec_in,
        video_mask,
        video_dec_pos,
        video_decoder,
        video_dec_norm,
        video_head,
        text_dec_in,
        text_mask,
        text_dec_pos,
        text_decoder,
        text_dec_norm,
        text_head,
        vtm_head,
        tau,
    };
    (layout, r)
}

/// Every learnable tensor, in layout order, with the config that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Vec<Array<f32>>,
    names: Vec<String>,
    layout: Layout,
}

impl ModelState {
    /// Xavier-uniform linear weights, N(0, 0.02) embeddings and mask
    /// vectors, unit/zero norm affine, zero biases, τ at its configured value.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (layout, reg) = build_layout(&config);
        let params = reg
            .shapes
            .iter()
            .zip(&reg.inits)
            .map(|(shape, init)| {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = match *init {
                    Init::Xavier { fan_in, fan_out } => {
                        let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                        let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
                        (0..n).map(|_| dist.sample(rng)).collect()
                    }
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std as f32).expect("positive std");
                        (0..n).map(|_| dist.sample(rng)).collect()
                    }
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Const(v) => vec![v as f32; n],
                };
                Array::new(shape.clone(), data).expect("registered shape")
            })
            .collect();
        Ok(Self { config, params, names: reg.names, layout })
    }

    /// Reassembles a state from stored tensors, checking names and shapes.
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Array<f32>)>) -> Result<Self> {
        config.validate()?;
        let (layout, reg) = build_layout(&config);
        if named.len() != reg.names.len() {
            return Err(Error::Contract(format!("expected {} tensors, found {}", reg.names.len(), named.len())));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, arr), (want_name, want_shape)) in named.into_iter().zip(reg.names.iter().zip(&reg.shapes)) {
            if &name != want_name || arr.shape() != want_shape.as_slice() {
                return Err(Error::Contract(format!(
                    "tensor {name} {:?} does not match expected {want_name} {want_shape:?}",
                    arr.shape()
                )));
            }
            params.push(arr);
        }
        Ok(Self { config, params, names: reg.names, layout })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Array::len).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Array<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn tau(&self) -> f32 {
        self.params[self.layout.tau].item()
    }

    pub fn clamp_tau(&mut self) {
        let t = &mut self.params[self.layout.tau].data_mut()[0];
        *t = t.max(TAU_MIN);
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Array::is_finite)
    }
}

/// Splits a clip into cube tokens: `[N_v, t·h·w·C]`, tokens in `(t, h, w)`
/// grid order and each cube flattened as `(dt, dy, dx, c)`.
pub fn patchify(clip: &VideoClip, cfg: &ModelConfig) -> Result<Vec<f32>> {
    if clip.dims != cfg.clip {
        return Err(Error::Config(format!("clip dims {:?} differ from model clip dims {:?}", clip.dims, cfg.clip)));
    }
    let [gt, gh, gw] = cfg.grid();
    let [ct, ch, cw] = cfg.cube;
    let (h, w, c) = (cfg.clip.height, cfg.clip.width, cfg.clip.channels);
    let mut out = Vec::with_capacity(clip.pixels.len());
    for ti in 0..gt {
        for hi in 0..gh {
            for wi in 0..gw {
                for dt in 0..ct {
                    for dy in 0..ch {
                        let row = ((ti * ct + dt) * h + hi * ch + dy) * w + wi * cw;
                        out.extend_from_slice(&clip.pixels[row * c..(row + cw) * c]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &[f32], cfg: &ModelConfig) -> VideoClip {
    let [gt, gh, gw] = cfg.grid();
    let [ct, ch, cw] = cfg.cube;
    let (h, w, c) = (cfg.clip.height, cfg.clip.width, cfg.clip.channels);
    let mut pixels = vec![0.0; cfg.clip.len()];
    let mut src = 0;
    for ti in 0..gt {
        for hi in 0..gh {
            for wi in 0..gw {
                for dt in 0..ct {
                    for dy in 0..ch {
                        let row = ((ti * ct + dt) * h + hi * ch + dy) * w + wi * cw;
                        pixels[row * c..(row + cw) * c].copy_from_slice(&tokens[src..src + cw * c]);
                        src += cw * c;
                    }
                }
            }
        }
    }
    VideoClip { dims: cfg.clip, pixels }
}

/// Projects every cube of `clip` to a D-wide token: `[N_v, D]`.
pub fn cube_embed(clip: &VideoClip, state: &ModelState) -> Result<Array<f32>> {
    let cfg = &state.config;
    let cubes = patchify(clip, cfg)?;
    let (k, d) = (cfg.cube_dim(), cfg.dim);
    let w = state.params[state.layout.cube.w].data();
    let b = state.params[state.layout.cube.b].data();
    let n = cfg.n_video_tokens();
    let mut out = vec![0.0f32; n * d];
    for t in 0..n {
        let row = &mut out[t * d..(t + 1) * d];
        row.copy_from_slice(b);
        for (i, &x) in cubes[t * k..(t + 1) * k].iter().enumerate() {
            if x != 0.0 {
                for (o, &wv) in row.iter_mut().zip(&w[i * d..(i + 1) * d]) {
                    *o += x * wv;
                }
            }
        }
    }
    Ok(Array::new(vec![n, d], out)?)
}
