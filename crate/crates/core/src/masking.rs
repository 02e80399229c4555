//! Per-modality mask sampling: uniform exact-count tube masking for video and
//! BERT-like or MAE-like word corruption for text, with independent ratios.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthclips::Vocabulary;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("config: mask ratio {0} outside [0, 1)")]
    Ratio(f64),
    #[error("config: {0}")]
    Config(String),
    #[error("caption has no non-pad tokens to mask")]
    DegenerateInput,
}

/// `floor(x + 0.5)`, with a small slack so that products such as `0.75 * 18`
/// that land a hair under `.5` in binary still round up.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

fn check_ratio(r: f64) -> Result<(), MaskError> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(MaskError::Ratio(r))
    }
}

/// Number of masked video tokens: rounded, then clamped so one stays visible.
pub fn video_mask_count(n_tokens: usize, ratio: f64) -> usize {
    round_half_up(ratio * n_tokens as f64).min(n_tokens.saturating_sub(1))
}

pub fn text_mask_count(n_content: usize, ratio: f64) -> usize {
    round_half_up(ratio * n_content as f64).min(n_content)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMaskStrategy {
    /// `[M]` 80%, random word 10%, unchanged 10%.
    BertLike,
    /// Always `[M]`.
    MaeLike,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextAction {
    Mask,
    Random(u32),
    Keep,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoMask {
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

impl VideoMask {
    pub fn n_tokens(&self) -> usize {
        self.masked.len() + self.visible.len()
    }

    /// Per-token flag, true where masked.
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.n_tokens()];
        for &i in &self.masked {
            f[i] = true;
        }
        f
    }
}

/// Masked caption positions with the corruption applied at each. The loss
/// target at every masked position is the original token.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextMask {
    pub masked: Vec<usize>,
    pub actions: Vec<TextAction>,
    pub targets: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub video: VideoMask,
    pub text: TextMask,
    pub rho_v: f64,
    pub rho_t: f64,
}

impl MaskPlan {
    /// A plan that hides nothing.
    pub fn unmasked(n_video: usize) -> Self {
        Self { video: VideoMask { masked: Vec::new(), visible: (0..n_video).collect() }, ..Default::default() }
    }
}

fn sorted_sample<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut v = sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

fn complement(n: usize, chosen: &[usize]) -> Vec<usize> {
    let mut flags = vec![false; n];
    for &i in chosen {
        flags[i] = true;
    }
    (0..n).filter(|&i| !flags[i]).collect()
}

/// Picks exactly [`video_mask_count`] tokens uniformly without replacement.
pub fn sample_video_mask<R: Rng + ?Sized>(n_tokens: usize, ratio: f64, rng: &mut R) -> Result<VideoMask, MaskError> {
    check_ratio(ratio)?;
    if n_tokens == 0 {
        return Err(MaskError::Config("no video tokens".into()));
    }
    let masked = sorted_sample(rng, n_tokens, video_mask_count(n_tokens, ratio));
    let visible = complement(n_tokens, &masked);
    Ok(VideoMask { masked, visible })
}

fn draw_action<R: Rng + ?Sized>(strategy: TextMaskStrategy, vocab_len: usize, rng: &mut R) -> TextAction {
    match strategy {
        TextMaskStrategy::MaeLike => TextAction::Mask,
        TextMaskStrategy::BertLike => {
            let u: f64 = rng.random();
            if u < 0.8 {
                TextAction::Mask
            } else if u < 0.9 {
                TextAction::Random(rng.random_range(Vocabulary::FIRST_WORD..vocab_len as u32))
            } else {
                TextAction::Keep
            }
        }
    }
}

/// The caption with each masked position rewritten per its action.
pub fn corrupt(ids: &[u32], mask: &TextMask) -> Vec<u32> {
    let mut out = ids.to_vec();
    for (&pos, &action) in mask.masked.iter().zip(&mask.actions) {
        match action {
            TextAction::Mask => out[pos] = Vocabulary::MASK_ID,
            TextAction::Random(id) => out[pos] = id,
            TextAction::Keep => {}
        }
    }
    out
}

/// Samples masked caption positions among non-`[PAD]` tokens and returns the
/// mask with the corrupted sequence.
pub fn sample_text_mask<R: Rng + ?Sized>(
    ids: &[u32],
    ratio: f64,
    strategy: TextMaskStrategy,
    vocab_len: usize,
    rng: &mut R,
) -> Result<(TextMask, Vec<u32>), MaskError> {
    check_ratio(ratio)?;
    let content: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] != Vocabulary::PAD_ID).collect();
    if content.is_empty() {
        return Err(MaskError::DegenerateInput);
    }
    if vocab_len <= Vocabulary::FIRST_WORD as usize {
        return Err(MaskError::Config("vocabulary has no ordinary words".into()));
    }
    let picks = sorted_sample(rng, content.len(), text_mask_count(content.len(), ratio));
    let masked: Vec<usize> = picks.iter().map(|&k| content[k]).collect();
    let actions = masked.iter().map(|_| draw_action(strategy, vocab_len, rng)).collect();
    let targets = masked.iter().map(|&p| ids[p]).collect();
    let mask = TextMask { masked, actions, targets };
    let corrupted = corrupt(ids, &mask);
    Ok((mask, corrupted))
}

/// One ratio over the concatenated `[video ∥ text]` range, split back per
/// modality. Text indices address the first `n_text` caption positions and
/// masked words always become `[M]`. At least one video token stays visible:
/// if the draw covers all of them, one is swapped for an unmasked text slot.
pub fn whole_sequence_mask<R: Rng + ?Sized>(
    n_video: usize,
    ids: &[u32],
    ratio: f64,
    rng: &mut R,
) -> Result<MaskPlan, MaskError> {
    check_ratio(ratio)?;
    if n_video == 0 {
        return Err(MaskError::Config("no video tokens".into()));
    }
    let n_text = ids.iter().filter(|&&i| i != Vocabulary::PAD_ID).count();
    let total = n_video + n_text;
    let count = round_half_up(ratio * total as f64).min(total - 1);
    let picks = sorted_sample(rng, total, count);
    let mut video_masked: Vec<usize> = picks.iter().copied().filter(|&i| i < n_video).collect();
    let mut text_masked: Vec<usize> = picks.iter().filter(|&&i| i >= n_video).map(|&i| i - n_video).collect();
    if video_masked.len() == n_video {
        let free = complement(n_text, &text_masked);
        let give_back = video_masked.remove(rng.random_range(0..n_video));
        let take = free[rng.random_range(0..free.len())];
        debug_assert!(give_back < n_video);
        text_masked.push(take);
        text_masked.sort_unstable();
    }
    let visible = complement(n_video, &video_masked);
    let text = TextMask {
        actions: vec![TextAction::Mask; text_masked.len()],
        targets: text_masked.iter().map(|&p| ids[p]).collect(),
        masked: text_masked,
    };
    Ok(MaskPlan {
        video: VideoMask { masked: video_masked, visible },
        text,
        rho_v: ratio,
        rho_t: ratio,
    })
}

/// Samples both modalities with separate ratios; returns the plan and the
/// corrupted caption.
pub fn sample_plan<R: Rng + ?Sized>(
    n_video: usize,
    ids: &[u32],
    rho_v: f64,
    rho_t: f64,
    strategy: TextMaskStrategy,
    vocab_len: usize,
    rng: &mut R,
) -> Result<(MaskPlan, Vec<u32>), MaskError> {
    let video = sample_video_mask(n_video, rho_v, rng)?;
    let (text, corrupted) = sample_text_mask(ids, rho_t, strategy, vocab_len, rng)?;
    Ok((MaskPlan { video, text, rho_v, rho_t }, corrupted))
}
