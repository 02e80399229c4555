//! Forward pass, recorded on a [`Tape`] so that any scalar built from its
//! outputs can be differentiated with respect to every parameter.

use crate::numerics::{Array, Scalar, Tape, Var, LAYER_NORM_EPS};
use crate::synthclips::Vocabulary;
use crate::{Error, Result};

use super::{Block, DecoderMode, Layout, Linear, ModelConfig, ModelState, Norm};

/// Additive attention bias for keys that must be ignored.
const MASKED_KEY: f64 = -1e9;

/// Visible cubes of a batch. Every sample must expose the same count.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoInput {
    /// `[batch · n_visible · cube_dim]` pixel values.
    pub cubes: Vec<f32>,
    /// Grid index of each visible cube, `[batch · n_visible]`, ascending per sample.
    pub positions: Vec<usize>,
    pub n_visible: usize,
    pub n_tokens: usize,
    pub batch: usize,
}

impl VideoInput {
    /// Selects `visible[b]` from the patchified clip `cubes[b]`.
    pub fn select(cubes: &[&[f32]], visible: &[&[usize]], cfg: &ModelConfig) -> Result<Self> {
        let (k, nv) = (cfg.cube_dim(), cfg.n_video_tokens());
        let n_visible = visible.first().map_or(0, |v| v.len());
        if cubes.is_empty() || cubes.len() != visible.len() {
            return Err(Error::Contract(format!("{} clips for {} visibility lists", cubes.len(), visible.len())));
        }
        if n_visible == 0 {
            return Err(Error::Contract("no visible video tokens".into()));
        }
        let mut out = Vec::with_capacity(cubes.len() * n_visible * k);
        let mut positions = Vec::with_capacity(cubes.len() * n_visible);
        for (c, vis) in cubes.iter().zip(visible) {
            if vis.len() != n_visible {
                return Err(Error::Contract(format!("visible counts differ within batch: {} vs {n_visible}", vis.len())));
            }
            if c.len() != nv * k {
                return Err(Error::Contract(format!("clip has {} cube values, expected {}", c.len(), nv * k)));
            }
            for &j in *vis {
                if j >= nv {
                    return Err(Error::Contract(format!("video token {j} out of range {nv}")));
                }
                out.extend_from_slice(&c[j * k..(j + 1) * k]);
                positions.push(j);
            }
        }
        Ok(Self { cubes: out, positions, n_visible, n_tokens: nv, batch: cubes.len() })
    }

    /// All tokens visible.
    pub fn full(cubes: &[&[f32]], cfg: &ModelConfig) -> Result<Self> {
        let all: Vec<usize> = (0..cfg.n_video_tokens()).collect();
        let vis: Vec<&[usize]> = cubes.iter().map(|_| all.as_slice()).collect();
        Self::select(cubes, &vis, cfg)
    }
}

/// Caption tokens as the encoder sees them.
#[derive(Clone, Debug, PartialEq)]
pub struct TextInput {
    /// `[batch · len]` token ids (already corrupted, if masking applies).
    pub ids: Vec<u32>,
    /// Caption position of each entry, for the positional embedding.
    pub positions: Vec<usize>,
    /// Attendable keys: false for `[PAD]` and for batch filler.
    pub valid: Vec<bool>,
    pub len: usize,
    pub batch: usize,
    pub caption_len: usize,
    /// Per caption position `[batch · caption_len]`: the entry that carries it,
    /// or `None` where the encoder never saw it.
    pub source: Vec<Option<usize>>,
    /// Per caption position: non-`[PAD]` in the original caption.
    pub content: Vec<bool>,
}

impl TextInput {
    /// Every caption position enters the encoder.
    pub fn full(captions: &[&[u32]]) -> Result<Self> {
        let none: Vec<&[usize]> = captions.iter().map(|_| &[][..]).collect();
        let mut t = Self::dropping(captions, &none)?;
        t.source = (0..t.ids.len()).map(Some).collect();
        Ok(t)
    }

    /// Drops the `masked[b]` positions of caption `b`, padding the batch to
    /// its longest remainder with inert filler.
    pub fn dropping(captions: &[&[u32]], masked: &[&[usize]]) -> Result<Self> {
        let l = captions.first().map_or(0, |c| c.len());
        if captions.is_empty() || l == 0 || captions.len() != masked.len() {
            return Err(Error::Contract("empty or mismatched caption batch".into()));
        }
        if captions.iter().any(|c| c.len() != l) {
            return Err(Error::Contract("captions of unequal length in one batch".into()));
        }
        let kept: Vec<Vec<usize>> = captions
            .iter()
            .zip(masked)
            .map(|(_, m)| (0..l).filter(|p| !m.contains(p)).collect())
            .collect();
        let len = kept.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let b = captions.len();
        let (mut ids, mut positions, mut valid) = (Vec::new(), Vec::new(), Vec::new());
        let mut source = vec![None; b * l];
        let mut content = Vec::with_capacity(b * l);
        for (i, (cap, keep)) in captions.iter().zip(&kept).enumerate() {
            for (slot, &p) in keep.iter().enumerate() {
                ids.push(cap[p]);
                positions.push(p);
                valid.push(cap[p] != Vocabulary::PAD_ID);
                source[i * l + p] = Some(i * len + slot);
            }
            for _ in keep.len()..len {
                ids.push(Vocabulary::PAD_ID);
                positions.push(0);
                valid.push(false);
            }
            content.extend(cap.iter().enumerate().map(|(p, &id)| id != Vocabulary::PAD_ID || masked[i].contains(&p)));
        }
        if (0..b).any(|i| !valid[i * len..(i + 1) * len].iter().any(|&v| v)) {
            return Err(Error::Contract("a caption has no visible tokens".into()));
        }
        Ok(Self { ids, positions, valid, len, batch: b, caption_len: l, source, content })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncoderInput {
    pub video: Option<VideoInput>,
    pub text: Option<TextInput>,
}

/// Encoder output and the bookkeeping the decoders and pooling need.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[batch, n_video + n_text, D]`.
    pub latent: Var,
    pub batch: usize,
    pub n_video: usize,
    pub n_text: usize,
    /// Attention probabilities per layer, `[batch · heads, S, S]`.
    pub attention: Vec<Var>,
    pub video: Option<VideoInput>,
    pub text: Option<TextInput>,
}

impl Encoded {
    pub fn seq_len(&self) -> usize {
        self.n_video + self.n_text
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    /// `[batch, N_v, cube_dim]` pixel predictions for every token.
    pub video: Var,
    /// `[batch, caption_len, vocab]`.
    pub text: Var,
}

/// Parameters placed on a tape, addressed through the layout.
pub struct Net<'a> {
    pub cfg: &'a ModelConfig,
    pub layout: &'a Layout,
    pub vars: Vec<Var>,
}

impl<'a> Net<'a> {
    /// Puts every parameter of `state` on `tape` as a gradient leaf.
    pub fn load<T: Scalar>(tape: &mut Tape<T>, state: &'a ModelState) -> Self {
        let vars = state.params.iter().map(|p| tape.param(p.cast())).collect();
        Self { cfg: &state.config, layout: state.layout(), vars }
    }

    /// Puts every parameter on `tape` as a constant, for inference.
    pub fn load_frozen<T: Scalar>(tape: &mut Tape<T>, state: &'a ModelState) -> Self {
        let vars = state.params.iter().map(|p| tape.constant(p.cast())).collect();
        Self { cfg: &state.config, layout: state.layout(), vars }
    }

    /// Uses leaves already on the tape, in layout order.
    pub fn from_vars(cfg: &'a ModelConfig, layout: &'a Layout, vars: Vec<Var>) -> Self {
        Self { cfg, layout, vars }
    }

    pub fn tau(&self) -> Var {
        self.vars[self.layout.tau]
    }

    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn linear<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, l: Linear) -> Result<Var> {
        let y = tape.matmul(x, self.v(l.w))?;
        Ok(tape.add(y, self.v(l.b))?)
    }

    fn norm<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, n: Norm) -> Result<Var> {
        Ok(tape.layer_norm(x, self.v(n.g), self.v(n.b), LAYER_NORM_EPS)?)
    }

    /// Pre-norm Transformer block on `[B, S, W]`. Returns the output and the
    /// attention probabilities.
    fn block<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, blk: &Block, bias: Option<Var>) -> Result<(Var, Var)> {
        let shape = tape.shape(x).to_vec();
        let (b, s, w) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (blk.heads, w / blk.heads);

        let y = self.norm(tape, x, blk.ln1)?;
        let qkv = self.linear(tape, y, blk.qkv)?;
        let qkv = tape.reshape(qkv, &[b, s, 3, h, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = tape.reshape(qkv, &[3, b * h, s, dh])?;
        let mut parts = [qkv; 3];
        for (i, p) in parts.iter_mut().enumerate() {
            let n = tape.narrow(qkv, 0, i, 1)?;
            *p = tape.reshape(n, &[b * h, s, dh])?;
        }
        let [q, k, v] = parts;
        let scores = tape.matmul_nt(q, k)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(bias) = bias {
            scores = tape.add(scores, bias)?;
        }
        let probs = tape.softmax(scores, 2)?;
        let ctx = tape.matmul(probs, v)?;
        let ctx = tape.reshape(ctx, &[b, h, s, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, s, w])?;
        let attn = self.linear(tape, ctx, blk.proj)?;
        let x = tape.add(x, attn)?;

        let y = self.norm(tape, x, blk.ln2)?;
        let y = self.linear(tape, y, blk.fc1)?;
        let y = tape.gelu(y);
        let y = self.linear(tape, y, blk.fc2)?;
        Ok((tape.add(x, y)?, probs))
    }

    fn key_bias<T: Scalar>(tape: &mut Tape<T>, valid: &[bool], batch: usize, heads: usize) -> Option<Var> {
        if valid.iter().all(|&v| v) {
            return None;
        }
        let s = valid.len() / batch;
        let masked = T::from_f64(MASKED_KEY);
        let mut data = Vec::with_capacity(batch * heads * s * s);
        for b in 0..batch {
            let row: Vec<T> = valid[b * s..(b + 1) * s].iter().map(|&v| if v { T::zero() } else { masked }).collect();
            for _ in 0..heads * s {
                data.extend_from_slice(&row);
            }
        }
        Some(tape.constant(Array::new(vec![batch * heads, s, s], data).expect("bias shape")))
    }

    fn type_row<T: Scalar>(&self, tape: &mut Tape<T>, row: usize) -> Result<Var> {
        let r = tape.narrow(self.v(self.layout.type_embed), 0, row, 1)?;
        Ok(tape.reshape(r, &[self.cfg.dim])?)
    }

    /// Runs the shared encoder over `[visible video ∥ text]`. Masked video
    /// cubes are never embedded.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, input: &EncoderInput) -> Result<Encoded> {
        let d = self.cfg.dim;
        let batch = match (&input.video, &input.text) {
            (Some(v), Some(t)) if v.batch != t.batch => {
                return Err(Error::Contract(format!("video batch {} vs text batch {}", v.batch, t.batch)))
            }
            (Some(v), _) => v.batch,
            (None, Some(t)) => t.batch,
            (None, None) => return Err(Error::Contract("encoder input is empty".into())),
        };
        let mut pieces = Vec::new();
        let mut valid_parts: Vec<Vec<bool>> = vec![Vec::new(); batch];
        let (mut n_video, mut n_text) = (0, 0);

        if let Some(v) = &input.video {
            n_video = v.n_visible;
            let k = self.cfg.cube_dim();
            if v.cubes.len() != batch * n_video * k || v.n_tokens != self.cfg.n_video_tokens() {
                return Err(Error::Contract(format!(
                    "video input holds {} values, expected {batch}x{n_video}x{k}",
                    v.cubes.len()
                )));
            }
            let cubes = tape.constant(Array::new(vec![batch * n_video, k], v.cubes.iter().map(|&x| T::from_f64(x as f64)).collect())?);
            let tokens = self.linear(tape, cubes, self.layout.cube)?;
            let pos = tape.gather_rows(self.v(self.layout.video_pos), &v.positions)?;
            let tokens = tape.add(tokens, pos)?;
            let ty = self.type_row(tape, 0)?;
            let tokens = tape.add(tokens, ty)?;
            pieces.push(tape.reshape(tokens, &[batch, n_video, d])?);
            for parts in &mut valid_parts {
                parts.extend(std::iter::repeat_n(true, n_video));
            }
        }
        if let Some(t) = &input.text {
            n_text = t.len;
            if t.ids.len() != batch * n_text || t.caption_len != self.cfg.caption_len {
                return Err(Error::Contract(format!(
                    "text input of {} ids for caption length {}, expected {batch}x{n_text} with length {}",
                    t.ids.len(),
                    t.caption_len,
                    self.cfg.caption_len
                )));
            }
            if let Some(&bad) = t.ids.iter().find(|&&i| i as usize >= self.cfg.vocab_size) {
                return Err(Error::Contract(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size)));
            }
            let ids: Vec<usize> = t.ids.iter().map(|&i| i as usize).collect();
            let tokens = tape.gather_rows(self.v(self.layout.token_embed), &ids)?;
            let pos = tape.gather_rows(self.v(self.layout.text_pos), &t.positions)?;
            let tokens = tape.add(tokens, pos)?;
            let ty = self.type_row(tape, 1)?;
            let tokens = tape.add(tokens, ty)?;
            pieces.push(tape.reshape(tokens, &[batch, n_text, d])?);
            for (b, parts) in valid_parts.iter_mut().enumerate() {
                parts.extend_from_slice(&t.valid[b * n_text..(b + 1) * n_text]);
            }
        }
        let mut x = if pieces.len() == 1 { pieces[0] } else { tape.concat(&pieces, 1)? };
        let s = n_video + n_text;
        if tape.shape(x) != [batch, s, d] {
            return Err(Error::Contract(format!("encoder sequence {:?} != [{batch}, {s}, {d}]", tape.shape(x))));
        }
        let valid: Vec<bool> = valid_parts.concat();
        let bias = Self::key_bias(tape, &valid, batch, self.cfg.heads);
        let mut attention = Vec::with_capacity(self.layout.encoder.len());
        for blk in &self.layout.encoder {
            let (y, probs) = self.block(tape, x, blk, bias)?;
            x = y;
            attention.push(probs);
        }
        let latent = self.norm(tape, x, self.layout.encoder_norm)?;
        Ok(Encoded { latent, batch, n_video, n_text, attention, video: input.video.clone(), text: input.text.clone() })
    }

    /// Full-length video sequence for the decoder: visible tokens projected to
    /// decoder width, the shared mask vector elsewhere, positions added.
    fn fill_video<T: Scalar>(&self, tape: &mut Tape<T>, enc: &Encoded, v: &VideoInput) -> Result<Var> {
        let (b, nvis, nv, dd) = (enc.batch, enc.n_video, v.n_tokens, self.cfg.decoder_dim());
        let vis = tape.narrow(enc.latent, 1, 0, nvis)?;
        let vis = self.linear(tape, vis, self.layout.video_dec_in)?;
        let vis = tape.reshape(vis, &[b * nvis, dd])?;
        let rows = tape.concat(&[vis, self.v(self.layout.video_mask)], 0)?;
        let mask_row = b * nvis;
        let mut idx = vec![mask_row; b * nv];
        for (r, &j) in v.positions.iter().enumerate() {
            idx[(r / nvis) * nv + j] = r;
        }
        let full = tape.gather_rows(rows, &idx)?;
        let full = tape.reshape(full, &[b, nv, dd])?;
        Ok(tape.add(full, self.v(self.layout.video_dec_pos))?)
    }

    /// Caption-length text sequence at text-decoder width, with the mask
    /// vector re-inserted where the encoder dropped positions.
    fn fill_text<T: Scalar>(&self, tape: &mut Tape<T>, enc: &Encoded, t: &TextInput) -> Result<Var> {
        let (b, l) = (enc.batch, t.caption_len);
        let mut x = tape.narrow(enc.latent, 1, enc.n_video, enc.n_text)?;
        if let Some(lin) = self.layout.text_dec_in {
            x = self.linear(tape, x, lin)?;
        }
        let w = *tape.shape(x).last().expect("rank 3");
        if let Some(mask) = self.layout.text_mask {
            let flat = tape.reshape(x, &[b * enc.n_text, w])?;
            let rows = tape.concat(&[flat, self.v(mask)], 0)?;
            let fill = b * enc.n_text;
            let idx: Vec<usize> = t.source.iter().map(|s| s.unwrap_or(fill)).collect();
            let full = tape.gather_rows(rows, &idx)?;
            x = tape.reshape(full, &[b, l, w])?;
        } else if t.source.iter().any(Option::is_none) || enc.n_text != l {
            return Err(Error::Contract("encoder dropped caption positions but the model has no text mask vector".into()));
        }
        if let Some(pos) = self.layout.text_dec_pos {
            x = tape.add(x, self.v(pos))?;
        }
        Ok(x)
    }

    /// Reconstructs pixels for every video token and logits for every caption
    /// position.
    pub fn decode<T: Scalar>(&self, tape: &mut Tape<T>, enc: &Encoded) -> Result<Decoded> {
        let (Some(v), Some(t)) = (&enc.video, &enc.text) else {
            return Err(Error::Contract("decoding needs a joint video-text encoding".into()));
        };
        let (b, nv, l) = (enc.batch, v.n_tokens, t.caption_len);
        let video_seq = self.fill_video(tape, enc, v)?;
        let text_seq = self.fill_text(tape, enc, t)?;
        match self.cfg.decoder_mode {
            DecoderMode::Dual => {
                let mut x = video_seq;
                for blk in &self.layout.video_decoder {
                    x = self.block(tape, x, blk, None)?.0;
                }
                if let Some(n) = self.layout.video_dec_norm {
                    x = self.norm(tape, x, n)?;
                }
                let video = self.linear(tape, x, self.layout.video_head)?;

                let mut y = text_seq;
                if !self.layout.text_decoder.is_empty() {
                    let bias = Self::key_bias(tape, &t.content, b, self.cfg.video_decoder_heads);
                    for blk in &self.layout.text_decoder {
                        y = self.block(tape, y, blk, bias)?.0;
                    }
                }
                if let Some(n) = self.layout.text_dec_norm {
                    y = self.norm(tape, y, n)?;
                }
                let text = self.linear(tape, y, self.layout.text_head)?;
                Ok(Decoded { video, text })
            }
            DecoderMode::Shared => {
                let mut x = tape.concat(&[video_seq, text_seq], 1)?;
                if !self.layout.video_decoder.is_empty() {
                    let mut valid = Vec::with_capacity(b * (nv + l));
                    for i in 0..b {
                        valid.extend(std::iter::repeat_n(true, nv));
                        valid.extend_from_slice(&t.content[i * l..(i + 1) * l]);
                    }
                    let bias = Self::key_bias(tape, &valid, b, self.cfg.video_decoder_heads);
                    for blk in &self.layout.video_decoder {
                        x = self.block(tape, x, blk, bias)?.0;
                    }
                }
                if let Some(n) = self.layout.video_dec_norm {
                    x = self.norm(tape, x, n)?;
                }
                let xv = tape.narrow(x, 1, 0, nv)?;
                let xt = tape.narrow(x, 1, nv, l)?;
                let video = self.linear(tape, xv, self.layout.video_head)?;
                let text = self.linear(tape, xt, self.layout.text_head)?;
                Ok(Decoded { video, text })
            }
        }
    }

    fn pool<T: Scalar>(tape: &mut Tape<T>, enc: &Encoded, weights: Vec<T>) -> Result<Var> {
        let (b, s) = (enc.batch, enc.seq_len());
        let w = tape.constant(Array::new(vec![b, 1, s], weights)?);
        let pooled = tape.matmul(w, enc.latent)?;
        let d = *tape.shape(pooled).last().expect("rank 3");
        Ok(tape.reshape(pooled, &[b, d])?)
    }

    /// Mean of the visible video token outputs, `[B, D]`, not normalized.
    pub fn pool_video<T: Scalar>(&self, tape: &mut Tape<T>, enc: &Encoded) -> Result<Var> {
        if enc.n_video == 0 {
            return Err(Error::Contract("no video tokens to pool".into()));
        }
        let s = enc.seq_len();
        let share = T::from_f64(1.0 / enc.n_video as f64);
        let mut w = vec![T::zero(); enc.batch * s];
        for b in 0..enc.batch {
            w[b * s..b * s + enc.n_video].iter_mut().for_each(|x| *x = share);
        }
        Self::pool(tape, enc, w)
    }

    /// Mean of the non-`[PAD]` text token outputs, `[B, D]`, not normalized.
    pub fn pool_text<T: Scalar>(&self, tape: &mut Tape<T>, enc: &Encoded) -> Result<Var> {
        let t = enc.text.as_ref().ok_or_else(|| Error::Contract("no text tokens to pool".into()))?;
        let (s, n) = (enc.seq_len(), enc.n_text);
        let mut w = vec![T::zero(); enc.batch * s];
        for b in 0..enc.batch {
            let valid = &t.valid[b * n..(b + 1) * n];
            let share = T::from_f64(1.0 / valid.iter().filter(|&&v| v).count() as f64);
            for (j, &v) in valid.iter().enumerate() {
                if v {
                    w[b * s + enc.n_video + j] = share;
                }
            }
        }
        Self::pool(tape, enc, w)
    }

    /// Matched/unmatched logits `[B, 2]` from pooled video and text features.
    pub fn vtm_logits<T: Scalar>(&self, tape: &mut Tape<T>, video: Var, text: Var) -> Result<Var> {
        let x = tape.concat(&[video, text], 1)?;
        self.linear(tape, x, self.layout.vtm_head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelState;
    use crate::synthclips::ClipDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            clip: ClipDims { frames: 4, height: 8, width: 8, channels: 3 },
            cube: [2, 4, 4],
            dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            video_decoder_depth: 1,
            video_decoder_heads: 2,
            ..ModelConfig::default()
        }
    }

    fn caption(n: usize) -> Vec<u32> {
        let mut c: Vec<u32> = (0..n as u32).map(|i| 3 + i % 16).collect();
        c.resize(18, 0);
        c
    }

    fn cubes(cfg: &ModelConfig, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        (0..cfg.n_video_tokens() * cfg.cube_dim()).map(|_| rng.random()).collect()
    }

    #[test]
    fn encoder_length_counts_visible_plus_text() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = ModelState::init(small(), &mut rng).unwrap();
        let cfg = &state.config;
        let c = cubes(cfg, 1);
        let cap = caption(5);
        let vis: Vec<usize> = vec![1, 4, 6];
        let mut tape = Tape::<f32>::new();
        let net = Net::load(&mut tape, &state);
        let input = EncoderInput {
            video: Some(VideoInput::select(&[&c], &[&vis], cfg).unwrap()),
            text: Some(TextInput::full(&[&cap]).unwrap()),
        };
        let enc = net.encode(&mut tape, &input).unwrap();
        assert_eq!(tape.shape(enc.latent), &[1, 3 + 18, 16]);
        assert_eq!(enc.attention.len(), 2);

        let dropped = TextInput::dropping(&[&cap], &[&[0, 2]]).unwrap();
        let input = EncoderInput { video: input.video.clone(), text: Some(dropped) };
        let enc = net.encode(&mut tape, &input).unwrap();
        assert_eq!(tape.shape(enc.latent), &[1, 3 + 16, 16]);
    }

    #[test]
    fn uneven_visible_counts_are_rejected() {
        let cfg = small();
        let c = cubes(&cfg, 1);
        let err = VideoInput::select(&[&c, &c], &[&[0, 1], &[2]], &cfg).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn pad_keys_get_no_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = ModelState::init(small(), &mut rng).unwrap();
        let cfg = &state.config;
        let c = cubes(cfg, 2);
        let cap = caption(4);
        let mut tape = Tape::<f64>::new();
        let net = Net::load(&mut tape, &state);
        let input = EncoderInput {
            video: Some(VideoInput::full(&[&c], cfg).unwrap()),
            text: Some(TextInput::full(&[&cap]).unwrap()),
        };
        let enc = net.encode(&mut tape, &input).unwrap();
        let nv = cfg.n_video_tokens();
        let s = nv + 18;
        for &a in &enc.attention {
            let p = tape.value(a).data();
            for row in p.chunks(s) {
                for j in nv + 4..s {
                    assert_eq!(row[j], 0.0);
                }
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn visible_token_order_is_equivariant() {
        // Reordering the visible tokens (each keeps its positional embedding)
        // permutes the outputs the same way.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let state = ModelState::init(small(), &mut rng).unwrap();
        let cfg = &state.config;
        let c = cubes(cfg, 4);
        let cap = caption(6);
        let run = |order: &[usize]| {
            let mut tape = Tape::<f64>::new();
            let net = Net::load(&mut tape, &state);
            let k = cfg.cube_dim();
            let mut sel = Vec::new();
            for &j in order {
                sel.extend_from_slice(&c[j * k..(j + 1) * k]);
            }
            let video = VideoInput { cubes: sel, positions: order.to_vec(), n_visible: order.len(), n_tokens: cfg.n_video_tokens(), batch: 1 };
            let input = EncoderInput { video: Some(video), text: Some(TextInput::full(&[&cap]).unwrap()) };
            let enc = net.encode(&mut tape, &input).unwrap();
            tape.value(enc.latent).data().to_vec()
        };
        let a = run(&[0, 3, 5, 7]);
        let b = run(&[5, 0, 7, 3]);
        let d = 16;
        let perm = [1, 3, 0, 2]; // position of a's token i within b
        for (i, &pi) in perm.iter().enumerate() {
            for x in 0..d {
                assert!((a[i * d + x] - b[pi * d + x]).abs() < 1e-12);
            }
        }
        for t in 4..4 + 18 {
            for x in 0..d {
                assert!((a[t * d + x] - b[t * d + x]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_shapes_for_every_variant() {
        for mode in [DecoderMode::Dual, DecoderMode::Shared] {
            for with_m in [true, false] {
                for (vd, td) in [(0, 0), (1, 0), (1, 1)] {
                    let cfg = ModelConfig {
                        decoder_mode: mode,
                        text_mask_token_in_encoder: with_m,
                        video_decoder_depth: vd,
                        text_decoder_depth: td,
                        ..small()
                    };
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    let state = ModelState::init(cfg, &mut rng).unwrap();
                    let cfg = &state.config;
                    let (c1, c2) = (cubes(cfg, 1), cubes(cfg, 2));
                    let (t1, t2) = (caption(5), caption(7));
                    let mut tape = Tape::<f32>::new();
                    let net = Net::load(&mut tape, &state);
                    let text = if with_m {
                        TextInput::full(&[&t1, &t2]).unwrap()
                    } else {
                        TextInput::dropping(&[&t1, &t2], &[&[1], &[0, 4, 6]]).unwrap()
                    };
                    let input = EncoderInput {
                        video: Some(VideoInput::select(&[&c1, &c2], &[&[0, 2], &[5, 6]], cfg).unwrap()),
                        text: Some(text),
                    };
                    let enc = net.encode(&mut tape, &input).unwrap();
                    let dec = net.decode(&mut tape, &enc).unwrap();
                    assert_eq!(tape.shape(dec.video), &[2, 8, cfg.cube_dim()]);
                    assert_eq!(tape.shape(dec.text), &[2, 18, cfg.vocab_size]);
                    let pv = net.pool_video(&mut tape, &enc).unwrap();
                    let pt = net.pool_text(&mut tape, &enc).unwrap();
                    assert_eq!(tape.shape(pv), &[2, 16]);
                    let logits = net.vtm_logits(&mut tape, pv, pt).unwrap();
                    assert_eq!(tape.shape(logits), &[2, 2]);
                }
            }
        }
    }

    #[test]
    fn pooling_a_single_token_returns_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = ModelState::init(small(), &mut rng).unwrap();
        let cfg = &state.config;
        let c = cubes(cfg, 1);
        let mut tape = Tape::<f64>::new();
        let net = Net::load(&mut tape, &state);
        let input = EncoderInput { video: Some(VideoInput::select(&[&c], &[&[3]], cfg).unwrap()), text: None };
        let enc = net.encode(&mut tape, &input).unwrap();
        let pooled = net.pool_video(&mut tape, &enc).unwrap();
        assert_eq!(tape.value(pooled).data(), tape.value(enc.latent).data());
        let unit = tape.l2_normalize(pooled);
        let norm: f64 = tape.value(unit).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_head_gives_uniform_text_and_even_vtm() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut state = ModelState::init(small(), &mut rng).unwrap();
        let (th, vh) = (state.layout().text_head, state.layout().vtm_head);
        for i in [th.w, th.b, vh.w, vh.b] {
            state.params[i].data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let cfg = &state.config;
        let c = cubes(cfg, 1);
        let cap = caption(5);
        let mut tape = Tape::<f64>::new();
        let net = Net::load(&mut tape, &state);
        let input = EncoderInput {
            video: Some(VideoInput::select(&[&c], &[&[0, 1]], cfg).unwrap()),
            text: Some(TextInput::full(&[&cap]).unwrap()),
        };
        let enc = net.encode(&mut tape, &input).unwrap();
        let dec = net.decode(&mut tape, &enc).unwrap();
        let p = tape.softmax(dec.text, 2).unwrap();
        let v = cfg.vocab_size as f64;
        assert!(tape.value(p).data().iter().all(|&x| (x - 1.0 / v).abs() < 1e-12));
        let pv = net.pool_video(&mut tape, &enc).unwrap();
        let pt = net.pool_text(&mut tape, &enc).unwrap();
        let logits = net.vtm_logits(&mut tape, pv, pt).unwrap();
        let probs = tape.softmax(logits, 1).unwrap();
        assert_eq!(tape.value(probs).data(), &[0.5, 0.5]);
    }
}
