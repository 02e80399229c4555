//! Deterministic pre-training loop: batching, per-batch mask sampling,
//! Adam with linear warmup, global-norm clipping, per-epoch checkpoints and
//! a JSON-lines metrics stream.

pub mod checkpoint;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TrainConfig};
use crate::model::{patchify, ModelState, Net};
use crate::numerics::{Array, Tape};
use crate::objectives::{breakdown, pretrain_loss, Batch, LossBreakdown, LossSwitches};
use crate::synthclips::Sample;
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";

/// Adam with bias correction and optional decoupled weight decay on
/// parameters of rank 2 or more.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl Adam {
    pub fn new(params: &[Array<f32>], cfg: &TrainConfig) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [Array<f32>], grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr / c1) as f32;
        let (rc2, eps) = ((1.0 / c2) as f32, self.eps as f32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.shape().len() >= 2 { (lr * self.weight_decay) as f32 } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *x -= step * *m / ((*v * rc2).sqrt() + eps) + decay * *x;
            }
        }
    }
}

/// Linear warmup over the first `warmup_steps` updates, then constant.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 {
        cfg.lr
    } else {
        cfg.lr * ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
    }
}

/// Scales `grads` so their joint Euclidean norm is at most `max`. Returns the
/// norm before scaling.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max: Option<f64>) -> f64 {
    let norm = grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if let Some(max) = max {
        if norm > max {
            let s = (max / norm) as f32;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
    }
    norm
}

/// One line of the metrics stream. Terms that are switched off are omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_msm_video: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_msm_text: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_msm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_vtc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_vtm: Option<f64>,
    pub l_total: f64,
    pub tau: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// ChaCha word position of the training stream after this step.
    pub rng_digest: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty_mask_warning: bool,
}

impl MetricsRecord {
    fn new(step: u64, epoch: usize, b: &LossBreakdown, s: LossSwitches) -> Self {
        let on = |flag: bool, v: f64| flag.then_some(v);
        Self {
            step,
            epoch,
            l_msm_video: on(s.msm, b.l_msm_video),
            l_msm_text: on(s.msm, b.l_msm_text),
            l_msm: on(s.msm, b.l_msm),
            l_vtc: on(s.vtc, b.l_vtc),
            l_vtm: on(s.vtm, b.l_vtm),
            l_total: b.l_total,
            tau: 0.0,
            lr: 0.0,
            grad_norm: 0.0,
            rng_digest: String::new(),
            empty_mask_warning: b.empty_video_mask || b.empty_text_mask,
        }
    }
}

/// Wall-clock time per step, kept apart from the metrics so that those stay
/// bit-reproducible.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimingRecord {
    pub step: u64,
    pub wall_ms: f64,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Checkpoint, metrics and timing files go here.
    pub out_dir: Option<&'a Path>,
    /// Continue from this state instead of a fresh initialization.
    pub init: Option<ModelState>,
    pub on_step: Option<&'a mut dyn FnMut(&MetricsRecord)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub metrics: Vec<MetricsRecord>,
}

#[derive(Serialize)]
struct FailureDump<'a> {
    step: u64,
    epoch: usize,
    what: &'a str,
    sample_indices: &'a [usize],
    captions: &'a [Vec<u32>],
    corrupted: &'a [Vec<u32>],
    plans: &'a [crate::masking::MaskPlan],
    negatives: &'a [usize],
    losses: LossBreakdown,
}

fn dump_failure(out_dir: Option<&Path>, dump: &FailureDump<'_>) -> PathBuf {
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(std::env::temp_dir);
    let path = dir.join(format!("nonfinite_step{}.json", dump.step));
    // Best effort: the abort itself is the primary signal.
    let _ = std::fs::create_dir_all(&dir).and_then(|_| std::fs::write(&path, serde_json::to_vec_pretty(dump).unwrap_or_default()));
    path
}

/// Deterministic stream for the training loop (stream 0) and for parameter
/// initialization (stream 1).
pub fn rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let data = ChaCha8Rng::seed_from_u64(seed);
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    init.set_stream(1);
    (data, init)
}

/// Pre-trains on `samples` under `run`. Identical inputs give bit-identical
/// parameters and metrics.
pub fn train(samples: &[Sample], run: &RunConfig, mut opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    run.validate()?;
    let tc = &run.train;
    let samples = &samples[..tc.subset.unwrap_or(samples.len()).min(samples.len())];
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let switches = run.loss.switches();
    let (mut rng, mut init_rng) = rngs(tc.seed);
    let mut state = match opts.init.take() {
        Some(s) => {
            if s.config != run.model {
                return Err(Error::Config("initial state was built for a different model config".into()));
            }
            s
        }
        None => ModelState::init(run.model.clone(), &mut init_rng)?,
    };
    let cubes: Vec<Vec<f32>> = samples.iter().map(|s| patchify(&s.clip, &state.config)).collect::<Result<_>>()?;
    let batch_size = tc.batch_size.min(samples.len());
    if switches.vtm && batch_size < 2 {
        return Err(Error::Config("matching needs at least two training pairs".into()));
    }
    let mut adam = Adam::new(&state.params, tc);
    let mut metrics_out = None;
    let mut timing_out = None;
    if let Some(dir) = opts.out_dir {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            Ok(BufWriter::new(File::create(&p).map_err(Error::io(&p))?))
        };
        metrics_out = Some(open(METRICS_FILE)?);
        timing_out = Some(open(TIMING_FILE)?);
    }
    let n_video = state.config.n_video_tokens();
    let vocab = state.config.vocab_size;
    let mut metrics = Vec::new();
    let mut step: u64 = 0;
    let max_steps = tc.max_steps.unwrap_or(u64::MAX);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    'epochs: for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        // Incomplete trailing batches are dropped.
        for chunk in order.chunks_exact(batch_size) {
            if step >= max_steps {
                break 'epochs;
            }
            let started = Instant::now();
            let batch = Batch::sample(
                chunk.iter().map(|&i| cubes[i].clone()).collect(),
                chunk.iter().map(|&i| samples[i].caption.ids.clone()).collect(),
                n_video,
                run.mask.video_ratio,
                run.mask.text_ratio,
                run.mask.text_strategy,
                vocab,
                switches.vtm,
                &mut rng,
            )?;
            let mut tape = Tape::<f32>::new();
            let net = Net::load(&mut tape, &state);
            let vars = pretrain_loss(&mut tape, &net, &batch, &run.loss)?;
            let losses = breakdown(&tape, &vars, switches);
            let fail = |what: &str, losses: LossBreakdown| {
                let dump = FailureDump {
                    step,
                    epoch,
                    what,
                    sample_indices: chunk,
                    captions: &batch.captions,
                    corrupted: &batch.corrupted,
                    plans: &batch.plans,
                    negatives: &batch.negatives,
                    losses,
                };
                Error::NonFinite { what: what.into(), step, dump: dump_failure(opts.out_dir, &dump) }
            };
            if !losses.l_total.is_finite() {
                return Err(fail("loss", losses));
            }
            let mut grads_out = tape.backward(vars.total)?;
            let mut grads: Vec<Vec<f32>> = net
                .vars
                .iter()
                .zip(&state.params)
                .map(|(&v, p)| grads_out.take(v).map(Array::into_data).unwrap_or_else(|| vec![0.0; p.len()]))
                .collect();
            drop(tape);
            let grad_norm = clip_global_norm(&mut grads, tc.grad_clip);
            if !grad_norm.is_finite() {
                return Err(fail("gradient", losses));
            }
            let lr = lr_at(step, tc);
            adam.step(&mut state.params, &grads, lr);
            state.clamp_tau();
            if !state.is_finite() {
                return Err(fail("parameter", losses));
            }

            let mut rec = MetricsRecord::new(step, epoch, &losses, switches);
            rec.tau = state.tau() as f64;
            rec.lr = lr;
            rec.grad_norm = grad_norm;
            rec.rng_digest = format!("{:032x}", rng.get_word_pos());
            if let Some(w) = metrics_out.as_mut() {
                let line = serde_json::to_string(&rec).expect("record serializes");
                writeln!(w, "{line}").map_err(Error::io(opts.out_dir.unwrap().join(METRICS_FILE)))?;
            }
            if let Some(w) = timing_out.as_mut() {
                let t = TimingRecord { step, wall_ms: started.elapsed().as_secs_f64() * 1e3 };
                let line = serde_json::to_string(&t).expect("record serializes");
                writeln!(w, "{line}").map_err(Error::io(opts.out_dir.unwrap().join(TIMING_FILE)))?;
            }
            if let Some(cb) = opts.on_step.as_mut() {
                cb(&rec);
            }
            metrics.push(rec);
            step += 1;
        }
        if let Some(dir) = opts.out_dir {
            save_checkpoint(&state, &dir.join(CHECKPOINT_FILE))?;
        }
    }
    if let Some(dir) = opts.out_dir {
        for (w, name) in [(metrics_out.as_mut(), METRICS_FILE), (timing_out.as_mut(), TIMING_FILE)] {
            if let Some(w) = w {
                w.flush().map_err(Error::io(dir.join(name)))?;
            }
        }
        save_checkpoint(&state, &dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome { state, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        // f(x) = x²/2 at x = 1: gradient 1, bias-corrected step = lr.
        let cfg = TrainConfig::default();
        let mut p = vec![Array::scalar(1.0f32)];
        let mut adam = Adam::new(&p, &cfg);
        adam.step(&mut p, &[vec![1.0]], 0.1);
        assert!((p[0].item() - 0.9).abs() < 1e-6, "{}", p[0].item());
        // Second step with gradient x = 0.9 still moves by ~lr.
        let g = p[0].item();
        adam.step(&mut p, &[vec![g]], 0.1);
        assert!((p[0].item() - 0.8).abs() < 1e-3);
    }

    #[test]
    fn warmup_is_linear_then_flat() {
        let cfg = TrainConfig { lr: 1.0, warmup_steps: 4, ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..6).map(|s| lr_at(s, &cfg)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
        assert_eq!(lr_at(0, &TrainConfig { warmup_steps: 0, ..cfg }), 1.0);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![vec![3.0f32], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, Some(1.0)), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-6 && (g[1][0] - 0.8).abs() < 1e-6);
        let mut g = vec![vec![0.3f32]];
        clip_global_norm(&mut g, Some(1.0));
        assert_eq!(g[0][0], 0.3);
        let mut g = vec![vec![30.0f32]];
        clip_global_norm(&mut g, None);
        assert_eq!(g[0][0], 30.0);
    }

    #[test]
    fn metrics_omit_disabled_terms() {
        let b = LossBreakdown { l_msm: 1.0, l_total: 1.0, ..Default::default() };
        let rec = MetricsRecord::new(0, 0, &b, LossSwitches::COMBINATIONS[0]);
        let line = serde_json::to_string(&rec).unwrap();
        assert!(line.contains("l_msm") && !line.contains("l_vtc") && !line.contains("l_vtm"));
        assert!(!line.contains("empty_mask_warning"));
    }
}
