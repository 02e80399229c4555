//! Retrieval evaluation (R@K, median rank), the mask-ratio sweep, and
//! reconstruction and attention dumps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{MaskConfig, RunConfig};
use crate::masking::{sample_plan, MaskPlan, TextMaskStrategy};
use crate::model::{patchify, unpatchify, ModelState, Net};
use crate::numerics::{Array, Tape};
use crate::synthclips::{detokenize, Sample, Split, VideoClip, Vocabulary};
use crate::trainer::{train, TrainOptions};
use crate::{Error, Result};

/// Mid-gray used for hidden cubes in dumps.
pub const MASK_GRAY: f32 = 128.0 / 255.0;

pub fn parse_split(name: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| Error::Config(format!("unknown split `{name}` (expected train, val or test)")))
}

/// Whether embedding sees all tokens or training-style masked inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Masking {
    Off,
    /// Masks drawn per item from `seed` at the given ratios.
    On { rho_v: f64, rho_t: f64, strategy: TextMaskStrategy, seed: u64 },
}

/// Row-normalized pooled features, one row per item.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub video: Array<f32>,
    pub text: Array<f32>,
}

fn item_rng(seed: u64, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(item as u64 + 2);
    rng
}

fn item_plan(state: &ModelState, ids: &[u32], masking: Masking, item: usize) -> Result<(MaskPlan, Vec<u32>)> {
    let n_video = state.config.n_video_tokens();
    match masking {
        Masking::Off => Ok((MaskPlan::unmasked(n_video), ids.to_vec())),
        Masking::On { rho_v, rho_t, strategy, seed } => {
            Ok(sample_plan(n_video, ids, rho_v, rho_t, strategy, state.config.vocab_size, &mut item_rng(seed, item))?)
        }
    }
}

fn normalize_rows(v: &mut [f32], d: usize) {
    for row in v.chunks_exact_mut(d) {
        let n = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
    }
}

/// Unimodal pooled features for `samples`, computed in parallel chunks of
/// `chunk` items. Results do not depend on the chunking or thread count.
pub fn embed_gallery(samples: &[Sample], state: &ModelState, masking: Masking, chunk: usize) -> Result<Features> {
    let d = state.config.dim;
    let chunk = chunk.max(1);
    let offsets: Vec<usize> = (0..samples.len()).step_by(chunk).collect();
    let parts: Vec<(Vec<f32>, Vec<f32>)> = offsets
        .par_iter()
        .map(|&start| embed_chunk(&samples[start..(start + chunk).min(samples.len())], start, state, masking))
        .collect::<Result<_>>()?;
    let (mut video, mut text) = (Vec::with_capacity(samples.len() * d), Vec::with_capacity(samples.len() * d));
    for (v, t) in parts {
        video.extend(v);
        text.extend(t);
    }
    Ok(Features { video: Array::new(vec![samples.len(), d], video)?, text: Array::new(vec![samples.len(), d], text)? })
}

fn embed_chunk(items: &[Sample], offset: usize, state: &ModelState, masking: Masking) -> Result<(Vec<f32>, Vec<f32>)> {
    use crate::model::{EncoderInput, TextInput, VideoInput};
    let cfg = &state.config;
    let cubes: Vec<Vec<f32>> = items.iter().map(|s| patchify(&s.clip, cfg)).collect::<Result<_>>()?;
    let plans: Vec<(MaskPlan, Vec<u32>)> =
        items.iter().enumerate().map(|(i, s)| item_plan(state, &s.caption.ids, masking, offset + i)).collect::<Result<_>>()?;
    let cube_refs: Vec<&[f32]> = cubes.iter().map(Vec::as_slice).collect();
    let visible: Vec<&[usize]> = plans.iter().map(|(p, _)| p.video.visible.as_slice()).collect();
    let caps: Vec<&[u32]> = plans.iter().map(|(_, c)| c.as_slice()).collect();
    let text = if cfg.text_mask_token_in_encoder {
        TextInput::full(&caps)?
    } else {
        let masked: Vec<&[usize]> = plans.iter().map(|(p, _)| p.text.masked.as_slice()).collect();
        TextInput::dropping(&caps, &masked)?
    };
    let mut tape = Tape::<f32>::new();
    let net = Net::load_frozen(&mut tape, state);
    let ve = net.encode(&mut tape, &EncoderInput { video: Some(VideoInput::select(&cube_refs, &visible, cfg)?), text: None })?;
    let te = net.encode(&mut tape, &EncoderInput { video: None, text: Some(text) })?;
    let vf = net.pool_video(&mut tape, &ve)?;
    let tf = net.pool_text(&mut tape, &te)?;
    let mut v = tape.value(vf).data().to_vec();
    let mut t = tape.value(tf).data().to_vec();
    normalize_rows(&mut v, cfg.dim);
    normalize_rows(&mut t, cfg.dim);
    Ok((v, t))
}

/// Text-query by video-gallery scores with the correct gallery index of each
/// query.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub queries: usize,
    pub gallery: usize,
    /// Row-major `[queries, gallery]`.
    pub scores: Vec<f64>,
    pub truth: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn new(queries: usize, gallery: usize, scores: Vec<f64>, truth: Vec<usize>) -> Result<Self> {
        if queries == 0 || gallery == 0 {
            return Err(Error::Contract("similarity matrix needs at least one query and one gallery item".into()));
        }
        if scores.len() != queries * gallery || truth.len() != queries {
            return Err(Error::Contract(format!(
                "{} scores and {} ground truths for a {queries}x{gallery} matrix",
                scores.len(),
                truth.len()
            )));
        }
        if let Some((q, &g)) = truth.iter().enumerate().find(|&(_, &g)| g >= gallery) {
            return Err(Error::Contract(format!("query {q} has ground truth {g} outside gallery of {gallery}")));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Contract("non-finite similarity score".into()));
        }
        Ok(Self { queries, gallery, scores, truth })
    }

    /// Dot products of row-normalized text and video features.
    pub fn from_features(text: &Array<f32>, video: &Array<f32>, truth: Vec<usize>) -> Result<Self> {
        let (q, g, d) = (text.shape()[0], video.shape()[0], video.shape()[1]);
        let mut scores = Vec::with_capacity(q * g);
        for tq in text.data().chunks_exact(d) {
            for vg in video.data().chunks_exact(d) {
                scores.push(tq.iter().zip(vg).map(|(&a, &b)| a as f64 * b as f64).sum());
            }
        }
        Self::new(q, g, scores, truth)
    }

    /// 1-based rank of each query's ground truth. Ties go to the lower
    /// gallery index.
    pub fn ranks(&self) -> Vec<usize> {
        (0..self.queries)
            .map(|q| {
                let row = &self.scores[q * self.gallery..(q + 1) * self.gallery];
                let gt = self.truth[q];
                let s = row[gt];
                1 + row.iter().enumerate().filter(|&(j, &x)| x > s || (x == s && j < gt)).count()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    /// Median 1-based rank; the mean of the two middle ranks for an even count.
    pub mdr: f64,
    pub queries: usize,
    pub gallery: usize,
    pub config_digest: String,
    pub seed: u64,
}

pub fn recall_at(ranks: &[usize], k: usize) -> f64 {
    100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn median_rank(ranks: &[usize]) -> f64 {
    let mut r = ranks.to_vec();
    r.sort_unstable();
    let n = r.len();
    if n % 2 == 1 {
        r[n / 2] as f64
    } else {
        (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0
    }
}

pub fn recall_metrics(sim: &SimilarityMatrix) -> EvalReport {
    let ranks = sim.ranks();
    EvalReport {
        r1: recall_at(&ranks, 1),
        r5: recall_at(&ranks, 5),
        r10: recall_at(&ranks, 10),
        mdr: median_rank(&ranks),
        queries: sim.queries,
        gallery: sim.gallery,
        config_digest: String::new(),
        seed: 0,
    }
}

/// Query captions and gallery clips for text-to-video retrieval.
///
/// With `dedup`, every distinct caption is one query and the gallery holds
/// the first clip carrying each caption, so identically captioned clips do
/// not compete. Otherwise item `i`'s caption retrieves clip `i`.
pub fn retrieval_pairs(samples: &[Sample], dedup: bool) -> Vec<usize> {
    if !dedup {
        return (0..samples.len()).collect();
    }
    let mut seen = std::collections::HashSet::new();
    (0..samples.len()).filter(|&i| seen.insert(samples[i].caption.ids.clone())).collect()
}

/// Embeds `samples` without masking and scores text-to-video retrieval.
pub fn evaluate_retrieval(samples: &[Sample], state: &ModelState, run: &RunConfig) -> Result<EvalReport> {
    let picked: Vec<Sample> = retrieval_pairs(samples, run.eval.dedup_captions).into_iter().map(|i| samples[i].clone()).collect();
    if picked.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let f = embed_gallery(&picked, state, Masking::Off, run.eval.batch_size)?;
    let sim = SimilarityMatrix::from_features(&f.text, &f.video, (0..picked.len()).collect())?;
    let mut report = recall_metrics(&sim);
    report.config_digest = run.digest();
    report.seed = run.train.seed;
    Ok(report)
}

/// Top-1 accuracy of the text head on masked words, over `draws` mask
/// samples per item.
pub fn masked_word_accuracy(samples: &[Sample], state: &ModelState, mask: &MaskConfig, seed: u64, draws: usize) -> Result<f64> {
    let cfg = &state.config;
    let (mut hit, mut total) = (0usize, 0usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..draws {
        for chunk in samples.chunks(32) {
            let cubes: Vec<Vec<f32>> = chunk.iter().map(|s| patchify(&s.clip, cfg)).collect::<Result<_>>()?;
            let captions: Vec<Vec<u32>> = chunk.iter().map(|s| s.caption.ids.clone()).collect();
            let batch = crate::objectives::Batch::sample(
                cubes,
                captions,
                cfg.n_video_tokens(),
                mask.video_ratio,
                mask.text_ratio,
                mask.text_strategy,
                cfg.vocab_size,
                false,
                &mut rng,
            )?;
            let logits = decode_text(state, &batch)?;
            let (l, v) = (cfg.caption_len, cfg.vocab_size);
            for (b, plan) in batch.plans.iter().enumerate() {
                for (&p, &target) in plan.text.masked.iter().zip(&plan.text.targets) {
                    let row = &logits[(b * l + p) * v..(b * l + p + 1) * v];
                    hit += (argmax(row) == target as usize) as usize;
                    total += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::Contract("no masked words to score".into()));
    }
    Ok(hit as f64 / total as f64)
}

fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &x)| if x > row[best] { i } else { best })
}

fn joint_input(state: &ModelState, batch: &crate::objectives::Batch) -> Result<crate::model::EncoderInput> {
    use crate::model::{EncoderInput, TextInput, VideoInput};
    let cfg = &state.config;
    let cubes: Vec<&[f32]> = batch.cubes.iter().map(Vec::as_slice).collect();
    let vis: Vec<&[usize]> = batch.plans.iter().map(|p| p.video.visible.as_slice()).collect();
    let caps: Vec<&[u32]> = batch.corrupted.iter().map(Vec::as_slice).collect();
    let text = if cfg.text_mask_token_in_encoder {
        TextInput::full(&caps)?
    } else {
        let masked: Vec<&[usize]> = batch.plans.iter().map(|p| p.text.masked.as_slice()).collect();
        TextInput::dropping(&caps, &masked)?
    };
    Ok(EncoderInput { video: Some(VideoInput::select(&cubes, &vis, cfg)?), text: Some(text) })
}

/// Text logits `[B · L · V]` of the reconstruction decoder for a masked batch.
fn decode_text(state: &ModelState, batch: &crate::objectives::Batch) -> Result<Vec<f32>> {
    Ok(decode(state, batch)?.1)
}

fn decode(state: &ModelState, batch: &crate::objectives::Batch) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut tape = Tape::<f32>::new();
    let net = Net::load_frozen(&mut tape, state);
    let enc = net.encode(&mut tape, &joint_input(state, batch)?)?;
    let dec = net.decode(&mut tape, &enc)?;
    Ok((tape.value(dec.video).data().to_vec(), tape.value(dec.text).data().to_vec()))
}

/// One row of the mask-ratio sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho_v: f64,
    pub rho_t: f64,
    pub seed: u64,
    pub report: EvalReport,
}

pub const SWEEP_HEADER: &str = "rho_v,rho_t,seed,r1,r5";

/// Trains one model per `(rho_v, rho_t, seed)` under the same budget and
/// evaluates each on `eval`.
pub fn sweep_mask_ratios(
    train_set: &[Sample],
    eval: &[Sample],
    base: &RunConfig,
    video_ratios: &[f64],
    text_ratios: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &rho_v in video_ratios {
        for &rho_t in text_ratios {
            for &seed in seeds {
                let mut run = base.clone();
                run.mask.video_ratio = rho_v;
                run.mask.text_ratio = rho_t;
                run.train.seed = seed;
                let out = train(train_set, &run, TrainOptions::default())?;
                let report = evaluate_retrieval(eval, &out.state, &run)?;
                rows.push(SweepRow { rho_v, rho_t, seed, report });
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.rho_v, r.rho_t, r.seed, r.report.r1, r.report.r5);
    }
    out
}

fn to_byte(x: f32) -> u8 {
    (x * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Binary PPM (P6) with all frames side by side.
pub fn frames_ppm(clip: &VideoClip) -> Vec<u8> {
    let d = clip.dims;
    let mut out = format!("P6\n{} {}\n255\n", d.width * d.frames, d.height).into_bytes();
    for y in 0..d.height {
        for t in 0..d.frames {
            for x in 0..d.width {
                for c in 0..3 {
                    out.push(to_byte(clip.at(t, y, x, c.min(d.channels - 1))));
                }
            }
        }
    }
    out
}

/// Binary PGM (P5) of a `width x height` image with values in `[0, 1]`.
pub fn pgm(width: usize, height: usize, values: &[f32]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    out
}

fn write(path: PathBuf, bytes: &[u8], files: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, bytes).map_err(Error::io(&path))?;
    files.push(path);
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct DumpSummary {
    pub files: Vec<PathBuf>,
    /// Hidden video cubes per sample.
    pub masked_cubes: Vec<usize>,
}

/// Writes, per sample, the original, masked and reconstructed frame strips
/// (`sampleNNN_{original,masked,reconstructed}.ppm`) and a text file with the
/// original, masked and reconstructed captions. Reconstructed frames keep
/// visible cubes and fill hidden ones with predictions; the reconstructed
/// caption keeps unmasked words and fills masked ones with the top word.
pub fn dump_reconstructions(
    state: &ModelState,
    samples: &[Sample],
    vocab: &Vocabulary,
    mask: &MaskConfig,
    seed: u64,
    dir: &Path,
) -> Result<DumpSummary> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let cfg = &state.config;
    let (k, l, v) = (cfg.cube_dim(), cfg.caption_len, cfg.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = DumpSummary::default();
    for (i, s) in samples.iter().enumerate() {
        let cubes = patchify(&s.clip, cfg)?;
        let batch = crate::objectives::Batch::sample(
            vec![cubes.clone()],
            vec![s.caption.ids.clone()],
            cfg.n_video_tokens(),
            mask.video_ratio,
            mask.text_ratio,
            mask.text_strategy,
            v,
            false,
            &mut rng,
        )?;
        let (video, text) = decode(state, &batch)?;
        let plan = &batch.plans[0];
        let mut masked = cubes.clone();
        let mut recon = cubes.clone();
        for &j in &plan.video.masked {
            masked[j * k..(j + 1) * k].iter_mut().for_each(|x| *x = MASK_GRAY);
            recon[j * k..(j + 1) * k].copy_from_slice(&video[j * k..(j + 1) * k]);
        }
        let stem = format!("sample{i:03}");
        write(dir.join(format!("{stem}_original.ppm")), &frames_ppm(&s.clip), &mut summary.files)?;
        write(dir.join(format!("{stem}_masked.ppm")), &frames_ppm(&unpatchify(&masked, cfg)), &mut summary.files)?;
        write(dir.join(format!("{stem}_reconstructed.ppm")), &frames_ppm(&unpatchify(&recon, cfg)), &mut summary.files)?;
        let mut filled = s.caption.ids.clone();
        for &p in &plan.text.masked {
            filled[p] = argmax(&text[p * v..(p + 1) * v]) as u32;
        }
        debug_assert_eq!(text.len(), l * v);
        let lines = format!(
            "original: {}\nmasked: {}\nreconstructed: {}\n",
            detokenize(&s.caption.ids, vocab),
            detokenize(&batch.corrupted[0], vocab),
            detokenize(&filled, vocab)
        );
        write(dir.join(format!("{stem}_captions.txt")), lines.as_bytes(), &mut summary.files)?;
        summary.masked_cubes.push(plan.video.masked.len());
    }
    Ok(summary)
}

/// Attention from one caption word to the video tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// Head-averaged weights on the `(T/t, H/h, W/w)` video grid.
    pub grid: [usize; 3],
    pub weights: Vec<f32>,
    pub files: Vec<PathBuf>,
}

impl AttentionMap {
    /// Attention mass on the video tokens of frame pair `t`.
    pub fn slice(&self, t: usize) -> &[f32] {
        let n = self.grid[1] * self.grid[2];
        &self.weights[t * n..(t + 1) * n]
    }
}

/// Joint unmasked encoding of `sample`; writes one overlay per temporal cube
/// slot (`attn_tNN.pgm`): the first frame of the slot in gray, brightened by
/// the upsampled attention normalized to its maximum.
pub fn dump_attention(
    state: &ModelState,
    sample: &Sample,
    word: usize,
    layer: Option<usize>,
    dir: Option<&Path>,
) -> Result<AttentionMap> {
    use crate::model::{EncoderInput, TextInput, VideoInput};
    let cfg = &state.config;
    let ids = &sample.caption.ids;
    if word >= ids.len() || ids[word] == Vocabulary::PAD_ID {
        return Err(Error::Contract(format!("word index {word} is padding or past the caption")));
    }
    let layer = layer.unwrap_or(cfg.depth - 1);
    if layer >= cfg.depth {
        return Err(Error::Config(format!("attention layer {layer} out of range for depth {}", cfg.depth)));
    }
    let cubes = patchify(&sample.clip, cfg)?;
    let mut tape = Tape::<f32>::new();
    let net = Net::load_frozen(&mut tape, state);
    let input = EncoderInput { video: Some(VideoInput::full(&[&cubes], cfg)?), text: Some(TextInput::full(&[ids])?) };
    let enc = net.encode(&mut tape, &input)?;
    let probs = tape.value(enc.attention[layer]).data();
    let (s, n_v, heads) = (enc.seq_len(), enc.n_video, cfg.heads);
    let query = n_v + word;
    let mut weights = vec![0.0f32; n_v];
    for h in 0..heads {
        let row = &probs[(h * s + query) * s..(h * s + query) * s + n_v];
        weights.iter_mut().zip(row).for_each(|(w, &p)| *w += p / heads as f32);
    }
    let map = AttentionMap { grid: cfg.grid(), weights, files: Vec::new() };
    let Some(dir) = dir else { return Ok(map) };
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let [gt, gh, gw] = map.grid;
    let [ct, ch, cw] = cfg.cube;
    let (h, w) = (cfg.clip.height, cfg.clip.width);
    let peak = map.weights.iter().copied().fold(f32::MIN_POSITIVE, f32::max);
    let mut files = Vec::with_capacity(gt);
    for t in 0..gt {
        let heat = map.slice(t);
        let mut img = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let c = sample.clip.dims.channels;
                let luma = (0..c).map(|k| sample.clip.at(t * ct, y, x, k)).sum::<f32>() / c as f32;
                let a = heat[(y / ch).min(gh - 1) * gw + (x / cw).min(gw - 1)] / peak;
                img.push(0.35 * luma + 0.65 * a);
            }
        }
        write(dir.join(format!("attn_t{t:02}.pgm")), &pgm(w, h, &img), &mut files)?;
    }
    Ok(AttentionMap { files, ..map })
}
