//! Procedural video-caption pairs: a single colored shape moving or resizing
//! over a flat gray background, described by a templated caption.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Padded caption length.
pub const CAPTION_LEN: usize = 18;

pub const PAD: &str = "[PAD]";
pub const MASK: &str = "[M]";
pub const UNK: &str = "[UNK]";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("config: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed corpus file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Grows,
    Shrinks,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::White];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::White => "white",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.9, 0.1],
            Color::Blue => [0.1, 0.1, 0.9],
            Color::Yellow => [0.9, 0.9, 0.1],
            Color::White => [0.95, 0.95, 0.95],
        }
    }
}

impl Motion {
    pub const ALL: [Motion; 6] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down, Motion::Grows, Motion::Shrinks];

    pub fn word(self) -> &'static str {
        match self {
            Motion::Left => "left",
            Motion::Right => "right",
            Motion::Up => "up",
            Motion::Down => "down",
            Motion::Grows => "grows",
            Motion::Shrinks => "shrinks",
        }
    }

    fn is_translation(self) -> bool {
        matches!(self, Motion::Left | Motion::Right | Motion::Up | Motion::Down)
    }
}

/// Everything needed to render one clip and its caption.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    pub color: Color,
    pub motion: Motion,
    /// Background gray level in `[0, 1]`.
    pub background: f32,
    /// Drives size and placement.
    pub seed: u64,
}

impl SceneSpec {
    /// Index into the 90-way (shape, color, motion) cross-product.
    pub fn class_id(&self) -> usize {
        let s = ShapeKind::ALL.iter().position(|&x| x == self.shape).unwrap();
        let c = Color::ALL.iter().position(|&x| x == self.color).unwrap();
        let m = Motion::ALL.iter().position(|&x| x == self.motion).unwrap();
        (s * Color::ALL.len() + c) * Motion::ALL.len() + m
    }
}

pub const NUM_CLASSES: usize = 3 * 5 * 6;

/// Frame geometry of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for ClipDims {
    fn default() -> Self {
        Self { frames: 16, height: 32, width: 32, channels: 3 }
    }
}

impl ClipDims {
    pub fn len(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Translating shapes move one pixel per frame and must stay in view.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.channels != 3 {
            return Err(DataError::Config(format!("clips are RGB, got {} channels", self.channels)));
        }
        if self.frames < 2 {
            return Err(DataError::Config("clips need at least two frames".into()));
        }
        if self.max_translating_radius() < 2 {
            return Err(DataError::Config(format!(
                "{}x{} frames are too small for {} frames of one-pixel motion",
                self.height, self.width, self.frames
            )));
        }
        Ok(())
    }

    fn max_translating_radius(&self) -> i64 {
        let side = self.height.min(self.width) as i64;
        ((side - self.frames as i64) / 2).min(7)
    }
}

/// A `T x H x W x C` clip with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub dims: ClipDims,
    pub pixels: Vec<f32>,
}

impl VideoClip {
    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        let d = &self.dims;
        self.pixels[((t * d.height + y) * d.width + x) * d.channels + c]
    }
}

#[derive(Clone, Copy, Debug)]
struct FrameShape {
    cx: f32,
    cy: f32,
    radius: f32,
}

fn geometry(spec: &SceneSpec, dims: &ClipDims) -> Vec<FrameShape> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let t_last = (dims.frames - 1) as i64;
    let (w, h) = (dims.width as i64, dims.height as i64);
    if spec.motion.is_translation() {
        let r_hi = dims.max_translating_radius();
        let r = rng.random_range((r_hi - 2).max(2)..=r_hi);
        // Start far enough from the edge the shape travels toward.
        let span = |extent: i64, moving: bool| {
            if moving {
                (r + t_last, extent - 1 - r)
            } else {
                (r, extent - 1 - r)
            }
        };
        let horizontal = matches!(spec.motion, Motion::Left | Motion::Right);
        let (xlo, xhi) = span(w, horizontal);
        let (ylo, yhi) = span(h, !horizontal);
        let x0 = rng.random_range(xlo..=xhi);
        let y0 = rng.random_range(ylo..=yhi);
        (0..dims.frames as i64)
            .map(|t| {
                let (cx, cy) = match spec.motion {
                    Motion::Left => (x0 - t, y0),
                    Motion::Right => (w - 1 - x0 + t, y0),
                    Motion::Up => (x0, y0 - t),
                    _ => (x0, h - 1 - y0 + t),
                };
                FrameShape { cx: cx as f32, cy: cy as f32, radius: r as f32 }
            })
            .collect()
    } else {
        let side = w.min(h);
        let big = (side / 2 - 5).max(3) as f32;
        let small = (big / 3.0).max(1.5);
        let reach = big.ceil() as i64;
        let cx = rng.random_range(reach..=(w - 1 - reach).max(reach));
        let cy = rng.random_range(reach..=(h - 1 - reach).max(reach));
        (0..dims.frames)
            .map(|t| {
                let frac = t as f32 / t_last as f32;
                let radius = match spec.motion {
                    Motion::Grows => small + (big - small) * frac,
                    _ => big - (big - small) * frac,
                };
                FrameShape { cx: cx as f32, cy: cy as f32, radius }
            })
            .collect()
    }
}

fn inside(kind: ShapeKind, dx: f32, dy: f32, r: f32) -> bool {
    match kind {
        ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        // Apex up, base down (image rows grow downward).
        ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
    }
}

/// Rasterizes the clip for `spec`. Deterministic in `spec`.
pub fn render_clip(spec: &SceneSpec, dims: &ClipDims) -> VideoClip {
    let frames = geometry(spec, dims);
    let rgb = spec.color.rgb();
    let bg = spec.background.clamp(0.0, 1.0);
    let mut pixels = Vec::with_capacity(dims.len());
    for f in &frames {
        for y in 0..dims.height {
            for x in 0..dims.width {
                let hit = inside(spec.shape, x as f32 - f.cx, y as f32 - f.cy, f.radius);
                for &v in &rgb {
                    pixels.push(if hit { v } else { bg });
                }
            }
        }
    }
    VideoClip { dims: *dims, pixels }
}

/// The templated caption, e.g. `"a red square moves left"` or `"a blue circle grows"`.
pub fn caption_of(spec: &SceneSpec) -> String {
    let head = format!("a {} {}", spec.color.word(), spec.shape.word());
    if spec.motion.is_translation() {
        format!("{head} moves {}", spec.motion.word())
    } else {
        format!("{head} {}", spec.motion.word())
    }
}

/// Recovers (shape, color, motion) from a caption produced by [`caption_of`].
pub fn parse_caption(text: &str) -> Option<(ShapeKind, Color, Motion)> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let color = Color::ALL.into_iter().find(|c| words.get(1) == Some(&c.word()))?;
    let shape = ShapeKind::ALL.into_iter().find(|s| words.get(2) == Some(&s.word()))?;
    let last = words.last()?;
    let motion = Motion::ALL.into_iter().find(|m| m.word() == *last)?;
    Some((shape, color, motion))
}

/// Bidirectional word/id map. Ids 0..3 are `[PAD]`, `[M]`, `[UNK]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub const PAD_ID: u32 = 0;
    pub const MASK_ID: u32 = 1;
    pub const UNK_ID: u32 = 2;
    /// First id of an ordinary word.
    pub const FIRST_WORD: u32 = 3;

    pub fn from_words<I: IntoIterator<Item = S>, S: Into<String>>(words: I) -> Self {
        let mut v = Self { words: Vec::new(), ids: HashMap::new() };
        for w in [PAD, MASK, UNK].into_iter().map(String::from).chain(words.into_iter().map(Into::into)) {
            if !v.ids.contains_key(&w) {
                v.ids.insert(w.clone(), v.words.len() as u32);
                v.words.push(w);
            }
        }
        v
    }

    /// Every word any template caption can produce.
    pub fn synthetic() -> Self {
        let mut words = vec!["a"];
        words.extend(Color::ALL.iter().map(|c| c.word()));
        words.extend(ShapeKind::ALL.iter().map(|s| s.word()));
        words.push("moves");
        words.extend(Motion::ALL.iter().map(|m| m.word()));
        Self::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> =
            self.words.iter().enumerate().map(|(i, w)| (w.clone(), serde_json::Value::from(i))).collect();
        serde_json::Value::Object(map)
    }

    pub fn from_json(value: &serde_json::Value) -> Option<Self> {
        let map = value.as_object()?;
        let mut pairs: Vec<(u64, &String)> = map.iter().map(|(w, id)| id.as_u64().map(|i| (i, w))).collect::<Option<_>>()?;
        pairs.sort();
        if pairs.iter().enumerate().any(|(i, (id, _))| *id != i as u64) {
            return None;
        }
        let v = Self::from_words(pairs.iter().skip(3).map(|(_, w)| w.as_str()));
        (v.len() == pairs.len() && v.word(0) == Some(PAD) && v.word(1) == Some(MASK) && v.word(2) == Some(UNK)).then_some(v)
    }
}

/// Token ids padded with `[PAD]` to a fixed length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub ids: Vec<u32>,
}

impl Caption {
    /// Count of non-`[PAD]` positions. Content is left-aligned.
    pub fn content_len(&self) -> usize {
        self.ids.iter().filter(|&&i| i != Vocabulary::PAD_ID).count()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Whitespace split, lowercase, map to ids (`[UNK]` when absent), then pad or
/// truncate to `len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, len: usize) -> Caption {
    let mut ids: Vec<u32> = text
        .split_whitespace()
        .map(|w| vocab.id(&w.to_lowercase()).unwrap_or(Vocabulary::UNK_ID))
        .take(len)
        .collect();
    ids.resize(len, Vocabulary::PAD_ID);
    Caption { ids }
}

pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&i| i != Vocabulary::PAD_ID)
        .map(|&i| vocab.word(i).unwrap_or(UNK))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub clip: VideoClip,
    pub caption: Caption,
    /// Present for generated samples; absent after import.
    pub spec: Option<SceneSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub dims: ClipDims,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Upper bound on sampled background gray so every shape color stays visible.
pub const MAX_BACKGROUND: f32 = 0.3;

/// Draws `n` specs uniformly over the (shape, color, motion) cross-product.
pub fn sample_specs<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<SceneSpec> {
    (0..n)
        .map(|_| SceneSpec {
            shape: ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())],
            color: Color::ALL[rng.random_range(0..Color::ALL.len())],
            motion: Motion::ALL[rng.random_range(0..Motion::ALL.len())],
            background: rng.random_range(0.0..MAX_BACKGROUND),
            seed: rng.next_u64(),
        })
        .collect()
}

/// Sizes of the (train, val, test) splits for `n` samples.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize), DataError> {
    if n < 3 {
        return Err(DataError::Config(format!("corpus of {n} samples cannot be split three ways")));
    }
    let held = (n / 10).max(1);
    Ok((n - 2 * held, held, held))
}

pub fn sample_from_spec(spec: SceneSpec, dims: &ClipDims, vocab: &Vocabulary) -> Sample {
    Sample {
        clip: render_clip(&spec, dims),
        caption: tokenize(&caption_of(&spec), vocab, CAPTION_LEN),
        spec: Some(spec),
    }
}

/// Generates `n` pairs and splits them 80/10/10. Deterministic in `seed`.
pub fn make_corpus(n: usize, seed: u64, dims: ClipDims) -> Result<Corpus, DataError> {
    dims.validate()?;
    let (n_train, n_val, _) = split_sizes(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = sample_specs(n, &mut rng);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let vocab = Vocabulary::synthetic();
    let samples: Vec<Sample> = order.par_iter().map(|&i| sample_from_spec(specs[i], &dims, &vocab)).collect();
    let mut it = samples.into_iter();
    let train = it.by_ref().take(n_train).collect();
    let val = it.by_ref().take(n_val).collect();
    let test = it.collect();
    Ok(Corpus { vocab, dims, train, val, test })
}

#[derive(Serialize, Deserialize)]
struct ClipSidecar {
    shape: [usize; 4],
}

/// Writes `dir/vocab.json` and, per split, `dir/<split>/NNNNN.f32` raw
/// little-endian clips with `NNNNN.json` sidecars plus `captions.txt`.
pub fn export_corpus(corpus: &Corpus, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let vocab_path = dir.join("vocab.json");
    let vocab_json = serde_json::to_string_pretty(&corpus.vocab.to_json()).expect("vocab serializes");
    fs::write(&vocab_path, vocab_json).map_err(io_err(&vocab_path))?;
    for split in Split::ALL {
        let sdir = dir.join(split.name());
        fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
        let mut captions = String::new();
        for (i, s) in corpus.split(split).iter().enumerate() {
            let d = s.clip.dims;
            let raw: Vec<u8> = s.clip.pixels.iter().flat_map(|v| v.to_le_bytes()).collect();
            let clip_path = sdir.join(format!("{i:05}.f32"));
            fs::write(&clip_path, raw).map_err(io_err(&clip_path))?;
            let side = ClipSidecar { shape: [d.frames, d.height, d.width, d.channels] };
            let side_path = sdir.join(format!("{i:05}.json"));
            fs::write(&side_path, serde_json::to_string(&side).expect("sidecar serializes")).map_err(io_err(&side_path))?;
            captions.push_str(&detokenize(&s.caption.ids, &corpus.vocab));
            captions.push('\n');
        }
        let cap_path = sdir.join("captions.txt");
        let mut f = fs::File::create(&cap_path).map_err(io_err(&cap_path))?;
        f.write_all(captions.as_bytes()).map_err(io_err(&cap_path))?;
    }
    Ok(())
}

/// Reads a directory written by [`export_corpus`].
pub fn import_corpus(dir: &Path) -> Result<Corpus, DataError> {
    let vocab_path = dir.join("vocab.json");
    let text = fs::read_to_string(&vocab_path).map_err(io_err(&vocab_path))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| DataError::Format { path: vocab_path.clone(), reason: e.to_string() })?;
    let vocab = Vocabulary::from_json(&value)
        .ok_or_else(|| DataError::Format { path: vocab_path.clone(), reason: "not a contiguous word->id map with specials first".into() })?;
    let mut splits: Vec<Vec<Sample>> = Vec::new();
    let mut dims: Option<ClipDims> = None;
    for split in Split::ALL {
        let sdir = dir.join(split.name());
        let cap_path = sdir.join("captions.txt");
        let file = fs::File::open(&cap_path).map_err(io_err(&cap_path))?;
        let mut samples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&cap_path))?;
            let side_path = sdir.join(format!("{i:05}.json"));
            let side_text = fs::read_to_string(&side_path).map_err(io_err(&side_path))?;
            let side: ClipSidecar = serde_json::from_str(&side_text)
                .map_err(|e| DataError::Format { path: side_path.clone(), reason: e.to_string() })?;
            let d = ClipDims { frames: side.shape[0], height: side.shape[1], width: side.shape[2], channels: side.shape[3] };
            if dims.is_some_and(|prev| prev != d) {
                return Err(DataError::Format { path: side_path, reason: "clip shape differs from earlier clips".into() });
            }
            dims = Some(d);
            let clip_path = sdir.join(format!("{i:05}.f32"));
            let raw = fs::read(&clip_path).map_err(io_err(&clip_path))?;
            if raw.len() != d.len() * 4 {
                return Err(DataError::Format {
                    path: clip_path,
                    reason: format!("expected {} bytes for shape {:?}, found {}", d.len() * 4, side.shape, raw.len()),
                });
            }
            let pixels = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            samples.push(Sample { clip: VideoClip { dims: d, pixels }, caption: tokenize(&line, &vocab, CAPTION_LEN), spec: None });
        }
        splits.push(samples);
    }
    let test = splits.pop().unwrap_or_default();
    let val = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Ok(Corpus { vocab, dims: dims.unwrap_or_default(), train, val, test })
}
