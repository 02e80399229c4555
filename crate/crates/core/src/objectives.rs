//! Masked signal modeling, video-text contrast and video-text matching, and
//! their unweighted sum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::masking::{sample_plan, MaskPlan, TextMaskStrategy};
use crate::model::{EncoderInput, ModelState, Net, TextInput, VideoInput};
use crate::numerics::{grad_check_with, Array, Coordinates, GradCheckReport, NumericsError, Scalar, Tape, Var};
use crate::{Error, Result};

/// Which terms enter the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LossSwitches {
    pub msm: bool,
    pub vtc: bool,
    pub vtm: bool,
}

impl LossSwitches {
    pub const ALL_ON: Self = Self { msm: true, vtc: true, vtm: true };

    /// Every non-empty combination, in the order MSM, VTC, VTM, MSM+VTC,
    /// MSM+VTM, VTC+VTM, all three.
    pub const COMBINATIONS: [Self; 7] = [
        Self { msm: true, vtc: false, vtm: false },
        Self { msm: false, vtc: true, vtm: false },
        Self { msm: false, vtc: false, vtm: true },
        Self { msm: true, vtc: true, vtm: false },
        Self { msm: true, vtc: false, vtm: true },
        Self { msm: false, vtc: true, vtm: true },
        Self { msm: true, vtc: true, vtm: true },
    ];

    pub fn validate(&self) -> Result<()> {
        if !(self.msm || self.vtc || self.vtm) {
            return Err(Error::Config("all loss switches are off".into()));
        }
        Ok(())
    }

    /// The encoder must see video and text together.
    pub fn needs_joint_pass(&self) -> bool {
        self.msm || self.vtm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub msm: bool,
    pub vtc: bool,
    pub vtm: bool,
    /// Contrast masked inputs (true) or the original, unmasked pairs.
    pub vtc_masked: bool,
    /// Standardize each target cube before the pixel loss.
    pub norm_pix_target: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { msm: true, vtc: true, vtm: true, vtc_masked: true, norm_pix_target: false }
    }
}

impl LossConfig {
    pub fn switches(&self) -> LossSwitches {
        LossSwitches { msm: self.msm, vtc: self.vtc, vtm: self.vtm }
    }
}

/// Per-term values of one evaluation. Disabled terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_msm_video: f64,
    pub l_msm_text: f64,
    pub l_msm: f64,
    pub l_vtc: f64,
    pub l_vtm: f64,
    pub l_total: f64,
    /// Set when a batch had nothing masked in that modality.
    pub empty_video_mask: bool,
    pub empty_text_mask: bool,
}

/// Unweighted sum of the enabled terms.
pub fn total_loss(b: &LossBreakdown, switches: LossSwitches) -> Result<f64> {
    switches.validate()?;
    let mut total = 0.0;
    if switches.msm {
        total += b.l_msm_video + b.l_msm_text;
    }
    if switches.vtc {
        total += b.l_vtc;
    }
    if switches.vtm {
        total += b.l_vtm;
    }
    Ok(total)
}

/// One training batch with its masks and matching negatives fixed, so that
/// the loss is a deterministic function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Patchified clips, `[N_v · cube_dim]` each.
    pub cubes: Vec<Vec<f32>>,
    pub captions: Vec<Vec<u32>>,
    pub plans: Vec<MaskPlan>,
    pub corrupted: Vec<Vec<u32>>,
    /// Text index paired with each video to form its unmatched pair.
    pub negatives: Vec<usize>,
}

/// For each of `b` videos, a uniformly chosen different index.
pub fn sample_negatives<R: Rng + ?Sized>(b: usize, rng: &mut R) -> Result<Vec<usize>> {
    if b < 2 {
        return Err(Error::Config(format!("matching needs at least two pairs per batch, got {b}")));
    }
    Ok((0..b)
        .map(|i| {
            let j = rng.random_range(0..b - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect())
}

impl Batch {
    /// Samples masks (and negatives when matching is on) for the given pairs.
    #[allow(clippy::too_many_arguments)]
    pub fn sample<R: Rng + ?Sized>(
        cubes: Vec<Vec<f32>>,
        captions: Vec<Vec<u32>>,
        n_video: usize,
        rho_v: f64,
        rho_t: f64,
        strategy: TextMaskStrategy,
        vocab_len: usize,
        with_negatives: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut plans = Vec::with_capacity(captions.len());
        let mut corrupted = Vec::with_capacity(captions.len());
        for cap in &captions {
            let (p, c) = sample_plan(n_video, cap, rho_v, rho_t, strategy, vocab_len, rng)?;
            plans.push(p);
            corrupted.push(c);
        }
        let negatives = if with_negatives { sample_negatives(captions.len(), rng)? } else { Vec::new() };
        Ok(Self { cubes, captions, plans, corrupted, negatives })
    }

    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    fn masked_video_input(&self, net: &Net<'_>) -> Result<VideoInput> {
        let cubes: Vec<&[f32]> = self.cubes.iter().map(Vec::as_slice).collect();
        let vis: Vec<&[usize]> = self.plans.iter().map(|p| p.video.visible.as_slice()).collect();
        VideoInput::select(&cubes, &vis, net.cfg)
    }

    /// Corrupted captions, optionally with the indexed order `order`.
    fn masked_text_input(&self, net: &Net<'_>, order: &[usize]) -> Result<TextInput> {
        let caps: Vec<&[u32]> = order.iter().map(|&i| self.corrupted[i].as_slice()).collect();
        if net.cfg.text_mask_token_in_encoder {
            TextInput::full(&caps)
        } else {
            let masked: Vec<&[usize]> = order.iter().map(|&i| self.plans[i].text.masked.as_slice()).collect();
            TextInput::dropping(&caps, &masked)
        }
    }
}

/// Pixel MSE over masked cubes and cross-entropy over masked words.
/// A modality with nothing masked yields `None`.
pub fn msm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    video_pred: Var,
    text_logits: Var,
    batch: &Batch,
    norm_pix_target: bool,
) -> Result<(Option<Var>, Option<Var>)> {
    let vs = tape.shape(video_pred).to_vec();
    let (b, nv, k) = (vs[0], vs[1], vs[2]);
    let mut rows = Vec::new();
    let mut target = Vec::new();
    for (i, plan) in batch.plans.iter().enumerate() {
        for &j in &plan.video.masked {
            rows.push(i * nv + j);
            let cube = &batch.cubes[i][j * k..(j + 1) * k];
            if norm_pix_target {
                let mean = cube.iter().map(|&x| x as f64).sum::<f64>() / k as f64;
                let var = cube.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / k as f64;
                let rstd = 1.0 / (var + 1e-6).sqrt();
                target.extend(cube.iter().map(|&x| T::from_f64((x as f64 - mean) * rstd)));
            } else {
                target.extend(cube.iter().map(|&x| T::from_f64(x as f64)));
            }
        }
    }
    let video = if rows.is_empty() {
        None
    } else {
        let flat = tape.reshape(video_pred, &[b * nv, k])?;
        let picked = tape.gather_rows(flat, &rows)?;
        let target = Array::new(vec![rows.len(), k], target)?;
        let mask = vec![true; target.len()];
        Some(tape.mse(picked, &target, &mask)?)
    };

    let ts = tape.shape(text_logits).to_vec();
    let (l, v) = (ts[1], ts[2]);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, plan) in batch.plans.iter().enumerate() {
        for (&p, &t) in plan.text.masked.iter().zip(&plan.text.targets) {
            rows.push(i * l + p);
            targets.push(t as usize);
        }
    }
    let text = if rows.is_empty() {
        None
    } else {
        let flat = tape.reshape(text_logits, &[b * l, v])?;
        let picked = tape.gather_rows(flat, &rows)?;
        Some(tape.cross_entropy(picked, &targets)?)
    };
    Ok((video, text))
}

/// Symmetric InfoNCE over `[B, D]` unit-norm features with temperature `tau`
/// (a one-element variable).
pub fn vtc_loss<T: Scalar>(tape: &mut Tape<T>, video: Var, text: Var, tau: Var) -> Result<Var> {
    for f in [video, text] {
        let d = *tape.shape(f).last().expect("rank 2");
        for row in tape.value(f).data().chunks(d) {
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt().as_f64();
            if (norm - 1.0).abs() > 1e-3 {
                return Err(Error::Contract(format!("contrastive features must be unit norm, found {norm}")));
            }
        }
    }
    let b = tape.shape(video)[0];
    let sim = tape.matmul_nt(video, text)?;
    let logits = tape.div_scalar(sim, tau)?;
    let diag: Vec<usize> = (0..b).collect();
    let v2t = tape.cross_entropy(logits, &diag)?;
    let cols = tape.permute(logits, &[1, 0])?;
    let t2v = tape.cross_entropy(cols, &diag)?;
    let both = tape.add(v2t, t2v)?;
    Ok(tape.scale(both, 0.5))
}

/// Two-class cross-entropy: `positive` rows labelled matched (class 1),
/// `negative` rows unmatched (class 0).
pub fn vtm_loss<T: Scalar>(tape: &mut Tape<T>, positive: Var, negative: Var) -> Result<Var> {
    let (p, n) = (tape.shape(positive)[0], tape.shape(negative)[0]);
    let logits = tape.concat(&[positive, negative], 0)?;
    let targets: Vec<usize> = std::iter::repeat_n(1, p).chain(std::iter::repeat_n(0, n)).collect();
    Ok(tape.cross_entropy(logits, &targets)?)
}

/// Variables of each enabled term and of their sum.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub msm_video: Option<Var>,
    pub msm_text: Option<Var>,
    pub vtc: Option<Var>,
    pub vtm: Option<Var>,
    pub total: Var,
}

/// Builds the full pre-training objective for `batch` on `tape`.
///
/// Reconstruction and matching positives share one joint pass over the
/// masked pair. Contrastive features come from separate video-only and
/// text-only passes through the same encoder, over masked or original inputs
/// per `vtc_masked`. Each video's unmatched pair reuses its own visible
/// cubes with the corrupted caption at `batch.negatives[i]`.
pub fn pretrain_loss<T: Scalar>(tape: &mut Tape<T>, net: &Net<'_>, batch: &Batch, cfg: &LossConfig) -> Result<LossVars> {
    let switches = cfg.switches();
    switches.validate()?;
    let b = batch.len();
    if b == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if switches.vtm && batch.negatives.len() != b {
        return Err(Error::Config(format!("matching needs one negative per video; batch of {b} has {}", batch.negatives.len())));
    }
    if let Some((i, &j)) = batch.negatives.iter().enumerate().find(|&(i, &j)| i == j || j >= b) {
        return Err(Error::Contract(format!("video {i} paired with invalid negative text {j}")));
    }
    let identity: Vec<usize> = (0..b).collect();
    let (mut msm_video, mut msm_text, mut vtc, mut vtm) = (None, None, None, None);
    let mut terms = Vec::new();

    if switches.needs_joint_pass() {
        let video = batch.masked_video_input(net)?;
        let input = EncoderInput { video: Some(video.clone()), text: Some(batch.masked_text_input(net, &identity)?) };
        let enc = net.encode(tape, &input)?;
        if switches.msm {
            let dec = net.decode(tape, &enc)?;
            let (v, t) = msm_loss(tape, dec.video, dec.text, batch, cfg.norm_pix_target)?;
            msm_video = v;
            msm_text = t;
            terms.extend(v);
            terms.extend(t);
        }
        if switches.vtm {
            let pv = net.pool_video(tape, &enc)?;
            let pt = net.pool_text(tape, &enc)?;
            let pos = net.vtm_logits(tape, pv, pt)?;
            let neg_input = EncoderInput { video: Some(video), text: Some(batch.masked_text_input(net, &batch.negatives)?) };
            let neg = net.encode(tape, &neg_input)?;
            let nv = net.pool_video(tape, &neg)?;
            let nt = net.pool_text(tape, &neg)?;
            let neg = net.vtm_logits(tape, nv, nt)?;
            let l = vtm_loss(tape, pos, neg)?;
            vtm = Some(l);
            terms.push(l);
        }
    }
    if switches.vtc {
        let (video, text) = if cfg.vtc_masked {
            (batch.masked_video_input(net)?, batch.masked_text_input(net, &identity)?)
        } else {
            let cubes: Vec<&[f32]> = batch.cubes.iter().map(Vec::as_slice).collect();
            let caps: Vec<&[u32]> = batch.captions.iter().map(Vec::as_slice).collect();
            (VideoInput::full(&cubes, net.cfg)?, TextInput::full(&caps)?)
        };
        let ve = net.encode(tape, &EncoderInput { video: Some(video), text: None })?;
        let te = net.encode(tape, &EncoderInput { video: None, text: Some(text) })?;
        let vf = net.pool_video(tape, &ve)?;
        let tf = net.pool_text(tape, &te)?;
        let vf = tape.l2_normalize(vf);
        let tf = tape.l2_normalize(tf);
        let l = vtc_loss(tape, vf, tf, net.tau())?;
        vtc = Some(l);
        terms.push(l);
    }
    let total = match terms.split_first() {
        None => tape.constant(Array::scalar(T::zero())),
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = tape.add(acc, t)?;
            }
            acc
        }
    };
    Ok(LossVars { msm_video, msm_text, vtc, vtm, total })
}

/// Finite-difference check of the full objective on `batch`, in f64, with
/// respect to every parameter of `state`.
pub fn check_gradients<R: Rng + ?Sized>(
    state: &ModelState,
    batch: &Batch,
    cfg: &LossConfig,
    h: f64,
    tol: f64,
    coords: Coordinates,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let mut params: Vec<Array<f64>> = state.params.iter().map(Array::cast).collect();
    // Surface configuration errors with their own category before the check.
    {
        let mut tape = Tape::<f64>::new();
        let net = Net::load(&mut tape, state);
        pretrain_loss(&mut tape, &net, batch, cfg)?;
    }
    let report = grad_check_with(
        &mut params,
        |tape, leaves| {
            let net = Net::from_vars(&state.config, state.layout(), leaves.to_vec());
            pretrain_loss(tape, &net, batch, cfg).map(|v| v.total).map_err(|e| match e {
                Error::Numerics(n) => n,
                other => NumericsError::Contract(other.to_string()),
            })
        },
        h,
        tol,
        coords,
        rng,
    )?;
    Ok(report)
}

/// Reads the term values off a tape.
pub fn breakdown<T: Scalar>(tape: &Tape<T>, vars: &LossVars, switches: LossSwitches) -> LossBreakdown {
    let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
    let mut b = LossBreakdown {
        l_msm_video: get(vars.msm_video),
        l_msm_text: get(vars.msm_text),
        l_vtc: get(vars.vtc),
        l_vtm: get(vars.vtm),
        empty_video_mask: switches.msm && vars.msm_video.is_none(),
        empty_text_mask: switches.msm && vars.msm_text.is_none(),
        ..LossBreakdown::default()
    };
    b.l_msm = b.l_msm_video + b.l_msm_text;
    b.l_total = tape.value(vars.total).item().as_f64();
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn features(tape: &mut Tape<f64>, rows: &[[f64; 2]]) -> Var {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        tape.param(Array::new(vec![rows.len(), 2], data).unwrap())
    }

    #[test]
    fn vtc_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let v = features(&mut tape, &[[1.0, 0.0], [0.0, 1.0]]);
        let t = features(&mut tape, &[[1.0, 0.0], [0.0, 1.0]]);
        let tau = tape.param(Array::scalar(1.0));
        let l = vtc_loss(&mut tape, v, t, tau).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((tape.value(l).item() - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);

        let v = features(&mut tape, &[[0.6, 0.8]]);
        let l = vtc_loss(&mut tape, v, v, tau).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn vtc_rejects_unnormalized_features() {
        let mut tape = Tape::<f64>::new();
        let v = features(&mut tape, &[[2.0, 0.0]]);
        let tau = tape.constant(Array::scalar(0.07));
        assert!(matches!(vtc_loss(&mut tape, v, v, tau), Err(Error::Contract(_))));
    }

    #[test]
    fn vtc_is_symmetric_and_relabeling_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::<f64>::new();
        let mut unit = |tape: &mut Tape<f64>| {
            let raw = tape.constant(Array::from_fn(&[4, 3], |_| rng.random_range(-1.0..1.0)));
            tape.l2_normalize(raw)
        };
        let v = unit(&mut tape);
        let t = unit(&mut tape);
        let tau = tape.constant(Array::scalar(0.3));
        let a = vtc_loss(&mut tape, v, t, tau).unwrap();
        let b = vtc_loss(&mut tape, t, v, tau).unwrap();
        assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-12);
        let perm = [2, 0, 3, 1];
        let vp = tape.gather_rows(v, &perm).unwrap();
        let tp = tape.gather_rows(t, &perm).unwrap();
        let c = vtc_loss(&mut tape, vp, tp, tau).unwrap();
        assert!((tape.value(a).item() - tape.value(c).item()).abs() < 1e-12);
    }

    #[test]
    fn vtm_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let even = tape.constant(Array::zeros(&[3, 2]));
        let l = vtm_loss(&mut tape, even, even).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);
        let pos = tape.constant(Array::from_f64(&[1, 2], &[-50.0, 50.0]).unwrap());
        let neg = tape.constant(Array::from_f64(&[1, 2], &[50.0, -50.0]).unwrap());
        let l = vtm_loss(&mut tape, pos, neg).unwrap();
        assert!(tape.value(l).item() < 1e-40);
    }

    #[test]
    fn total_is_unweighted_sum_of_enabled_terms() {
        let b = LossBreakdown { l_msm_video: 0.4, l_msm_text: 0.6, l_vtc: 2.0, l_vtm: 0.5, ..Default::default() };
        assert_eq!(total_loss(&b, LossSwitches::ALL_ON).unwrap(), 3.5);
        assert_eq!(total_loss(&b, LossSwitches::COMBINATIONS[0]).unwrap(), 1.0);
        let off = LossSwitches { msm: false, vtc: false, vtm: false };
        assert!(matches!(total_loss(&b, off), Err(Error::Config(_))));
    }

    #[test]
    fn combinations_are_the_seven_nonempty_subsets() {
        let mut seen: Vec<(bool, bool, bool)> = LossSwitches::COMBINATIONS.iter().map(|s| (s.msm, s.vtc, s.vtm)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 7);
        assert!(!seen.contains(&(false, false, false)));
    }

    #[test]
    fn negatives_never_pick_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let b = rng.random_range(2..9);
            let n = sample_negatives(b, &mut rng).unwrap();
            assert!(n.iter().enumerate().all(|(i, &j)| i != j && j < b));
        }
        assert!(matches!(sample_negatives(1, &mut rng), Err(Error::Config(_))));
    }
}
