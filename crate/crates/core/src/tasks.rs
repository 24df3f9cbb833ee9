//! Synthetic grid-world generation and understanding tasks.
//!
//! A scene is a `side × side` grid of color cells with a single object
//! filling one quadrant. Generation samples caption the scene and ask the
//! model to produce its image tokens; understanding samples show the image
//! and ask for the object's color or quadrant.
//!
//! Joint ids (specials, then 16 text words, then 8 image colors):
//!
//! | ids     | tokens                                                     |
//! |---------|------------------------------------------------------------|
//! | 0–5     | PAD BOS EOS IMG_START IMG_END ANS                          |
//! | 6–13    | color words: red green blue yellow cyan magenta white black|
//! | 14      | `object`                                                   |
//! | 15–18   | quadrant words: top-left top-right bottom-left bottom-right|
//! | 19–21   | `what` `color` `where`                                     |
//! | 22–29   | image cells, one per color                                 |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{special, Modality, ModelConfig, Task, TokenSequence};

pub const COLORS: usize = 8;
pub const TEXT_VOCAB: usize = 16;
pub const IMAGE_VOCAB: usize = COLORS;
pub const DEFAULT_SIDE: usize = 4;

pub const COLOR_NAMES: [&str; COLORS] = ["red", "green", "blue", "yellow", "cyan", "magenta", "white", "black"];
const WORD_OBJECT: usize = 8;
const WORD_QUADRANT: usize = 9;
const WORD_WHAT: usize = 13;
const WORD_COLOR: usize = 14;
const WORD_WHERE: usize = 15;

pub fn color_word(color: usize) -> usize {
    special::COUNT + color
}

pub fn image_token(color: usize) -> usize {
    special::COUNT + TEXT_VOCAB + color
}

pub fn word(index: usize) -> usize {
    special::COUNT + index
}

/// The model config these tasks are tokenized for; other fields default.
pub fn task_model_config() -> ModelConfig {
    ModelConfig { text_vocab: TEXT_VOCAB, image_vocab: IMAGE_VOCAB, ..ModelConfig::default() }
}

/// Fails unless `cfg` uses the vocabulary layout of these tasks.
pub fn check_vocab(cfg: &ModelConfig) -> Result<()> {
    if cfg.text_vocab != TEXT_VOCAB || cfg.image_vocab != IMAGE_VOCAB {
        return Err(Error::Input(format!(
            "model vocabulary ({} text, {} image) does not match the task vocabulary ({TEXT_VOCAB}, {IMAGE_VOCAB})",
            cfg.text_vocab, cfg.image_vocab
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::TopLeft, Quadrant::TopRight, Quadrant::BottomLeft, Quadrant::BottomRight];

    pub fn word(self) -> usize {
        word(WORD_QUADRANT + self as usize)
    }

    fn contains(self, row: usize, col: usize, side: usize) -> bool {
        let half = side / 2;
        let (top, left) = (row < half, col < half);
        match self {
            Quadrant::TopLeft => top && left,
            Quadrant::TopRight => top && !left,
            Quadrant::BottomLeft => !top && left,
            Quadrant::BottomRight => !top && !left,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridScene {
    pub side: usize,
    pub background: usize,
    pub object: usize,
    pub quadrant: Quadrant,
}

impl GridScene {
    pub fn validate(&self) -> Result<()> {
        if self.side < 2 || self.side % 2 != 0 {
            return Err(Error::Input(format!("grid side {} must be even and at least 2", self.side)));
        }
        if self.background >= COLORS || self.object >= COLORS {
            return Err(Error::Input("color id out of range".into()));
        }
        if self.background == self.object {
            return Err(Error::Input("object color equals background color".into()));
        }
        Ok(())
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let background = rng.random_range(0..COLORS);
        let mut object = rng.random_range(0..COLORS - 1);
        if object >= background {
            object += 1;
        }
        let quadrant = Quadrant::ALL[rng.random_range(0..4)];
        Self { side: DEFAULT_SIDE, background, object, quadrant }
    }
}

/// Row-major cell colors as image-vocabulary ids; length `side²`.
pub fn scene_to_tokens(scene: &GridScene) -> Vec<usize> {
    let s = scene.side;
    (0..s * s)
        .map(|i| {
            let color = if scene.quadrant.contains(i / s, i % s, s) { scene.object } else { scene.background };
            image_token(color)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Question {
    WhatColor,
    Where,
}

impl Question {
    fn words(self) -> &'static [usize] {
        match self {
            Question::WhatColor => &[WORD_WHAT, WORD_COLOR],
            Question::Where => &[WORD_WHERE],
        }
    }

    /// The answer token, derived from the scene alone.
    pub fn answer(self, scene: &GridScene) -> usize {
        match self {
            Question::WhatColor => color_word(scene.object),
            Question::Where => scene.quadrant.word(),
        }
    }
}

/// Generator switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleOptions {
    /// Also supervise the token that opens the generated segment
    /// (IMG_START for generation, ANS for understanding).
    pub supervise_boundary: bool,
}

struct Builder {
    ids: Vec<usize>,
    modality: Vec<Modality>,
    loss_mask: Vec<bool>,
}

impl Builder {
    fn new() -> Self {
        Self { ids: Vec::new(), modality: Vec::new(), loss_mask: Vec::new() }
    }

    fn push(&mut self, id: usize, modality: Modality, supervised: bool) {
        self.ids.push(id);
        self.modality.push(modality);
        self.loss_mask.push(supervised);
    }

    fn finish(self, task: Task) -> TokenSequence {
        TokenSequence { task, ids: self.ids, modality: self.modality, loss_mask: self.loss_mask }
    }
}

/// `BOS <color> object <quadrant> IMG_START image… EOS`; supervised on the
/// image tokens and EOS.
pub fn generation_sequence(scene: &GridScene, opts: SampleOptions) -> TokenSequence {
    let mut b = Builder::new();
    b.push(special::BOS, Modality::Special, false);
    for w in [color_word(scene.object), word(WORD_OBJECT), scene.quadrant.word()] {
        b.push(w, Modality::Text, false);
    }
    b.push(special::IMG_START, Modality::Special, opts.supervise_boundary);
    for id in scene_to_tokens(scene) {
        b.push(id, Modality::Image, true);
    }
    b.push(special::EOS, Modality::Special, true);
    b.finish(Task::Generation)
}

/// `BOS IMG_START image… IMG_END question… ANS answer EOS`; supervised on
/// the answer and EOS.
pub fn understanding_sequence(scene: &GridScene, question: Question, opts: SampleOptions) -> TokenSequence {
    let mut b = Builder::new();
    b.push(special::BOS, Modality::Special, false);
    b.push(special::IMG_START, Modality::Special, false);
    for id in scene_to_tokens(scene) {
        b.push(id, Modality::Image, false);
    }
    b.push(special::IMG_END, Modality::Special, false);
    for &w in question.words() {
        b.push(word(w), Modality::Text, false);
    }
    b.push(special::ANS, Modality::Special, opts.supervise_boundary);
    b.push(question.answer(scene), Modality::Text, true);
    b.push(special::EOS, Modality::Special, true);
    b.finish(Task::Understanding)
}

pub fn gen_sample<R: Rng + ?Sized>(rng: &mut R) -> TokenSequence {
    gen_sample_with(rng, SampleOptions::default())
}

pub fn gen_sample_with<R: Rng + ?Sized>(rng: &mut R, opts: SampleOptions) -> TokenSequence {
    generation_sequence(&GridScene::random(rng), opts)
}

pub fn und_sample<R: Rng + ?Sized>(rng: &mut R) -> TokenSequence {
    und_sample_with(rng, SampleOptions::default())
}

pub fn und_sample_with<R: Rng + ?Sized>(rng: &mut R, opts: SampleOptions) -> TokenSequence {
    let scene = GridScene::random(rng);
    let question = if rng.random_bool(0.5) { Question::WhatColor } else { Question::Where };
    understanding_sequence(&scene, question, opts)
}

/// Train/eval partition of sample seeds: train seeds are even, eval seeds odd.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of sample `index` drawn from `base` within `split`.
pub fn sample_seed(split: Split, base: u64, index: u64) -> u64 {
    let mixed = splitmix64(splitmix64(base) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    match split {
        Split::Train => mixed & !1,
        Split::Eval => mixed | 1,
    }
}

/// Sample of `task` generated purely from `seed`.
pub fn sample_from_seed(task: Task, seed: u64, opts: SampleOptions) -> TokenSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match task {
        Task::Generation => gen_sample_with(&mut rng, opts),
        Task::Understanding => und_sample_with(&mut rng, opts),
    }
}

/// Gen:Und batch sampling weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixerConfig {
    pub gen_weight: u32,
    pub und_weight: u32,
    pub seed: u64,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self { gen_weight: 1, und_weight: 1, seed: 0 }
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl MixerConfig {
    pub fn new(gen_weight: u32, und_weight: u32, seed: u64) -> Result<Self> {
        let cfg = Self { gen_weight, und_weight, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gen_weight == 0 || self.und_weight == 0 {
            return Err(Error::Config("mixer weights must both be at least 1".into()));
        }
        Ok(())
    }

    /// Weights divided by their gcd, e.g. `(4, 2)` → `(2, 1)`.
    pub fn reduced(&self) -> (u32, u32) {
        let g = gcd(self.gen_weight, self.und_weight).max(1);
        (self.gen_weight / g, self.und_weight / g)
    }

    /// Parses `"gen:und"`.
    pub fn parse_ratio(s: &str, seed: u64) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse mix ratio {s:?}"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        Self::new(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?, seed)
    }
}

/// One single-task batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub index: usize,
    pub task: Task,
    pub samples: Vec<TokenSequence>,
}

/// Deterministic stream of single-task batches.
pub struct MixStream {
    cfg: MixerConfig,
    opts: SampleOptions,
    batch_size: usize,
    remaining: usize,
    next_index: usize,
    task_rng: ChaCha8Rng,
}

impl Iterator for MixStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let total = u64::from(self.cfg.gen_weight) + u64::from(self.cfg.und_weight);
        let task = if self.task_rng.random_range(0..total) < u64::from(self.cfg.gen_weight) {
            Task::Generation
        } else {
            Task::Understanding
        };
        let index = self.next_index;
        self.next_index += 1;
        let samples = (0..self.batch_size)
            .map(|i| {
                let seed = sample_seed(Split::Train, self.cfg.seed, (index * self.batch_size + i) as u64);
                sample_from_seed(task, seed, self.opts)
            })
            .collect();
        Some(Batch { index, task, samples })
    }
}

pub fn mix_stream(cfg: MixerConfig, batch_size: usize, count: usize) -> Result<MixStream> {
    mix_stream_with(cfg, batch_size, count, SampleOptions::default())
}

pub fn mix_stream_with(cfg: MixerConfig, batch_size: usize, count: usize, opts: SampleOptions) -> Result<MixStream> {
    cfg.validate()?;
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let task_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x6D69_7865_7200_0000));
    Ok(MixStream { cfg, opts, batch_size, remaining: count, next_index: 0, task_rng })
}

/// Checks that `seq` follows the generation or understanding layout and
/// that its loss mask covers exactly the generated segment.
pub fn validate_layout(seq: &TokenSequence, opts: SampleOptions) -> Result<()> {
    let cfg = task_model_config();
    seq.validate(&cfg)?;
    let bad = |why: &str| Err(Error::Input(format!("{} layout: {why}", seq.task)));
    let ids = &seq.ids;
    let n = ids.len();
    let cells = DEFAULT_SIDE * DEFAULT_SIDE;
    if ids.first() != Some(&special::BOS) || ids.last() != Some(&special::EOS) {
        return bad("must start with BOS and end with EOS");
    }
    let mut expected_mask = vec![false; n];
    match seq.task {
        Task::Generation => {
            let Some(start) = ids.iter().position(|&i| i == special::IMG_START) else {
                return bad("missing IMG_START");
            };
            if start < 2 || !ids[1..start].iter().all(|&i| cfg.is_text(i)) {
                return bad("caption must be non-empty text");
            }
            if n != start + cells + 2 || !ids[start + 1..n - 1].iter().all(|&i| cfg.is_image(i)) {
                return bad("expected image tokens between IMG_START and EOS");
            }
            expected_mask[start] = opts.supervise_boundary;
            expected_mask[start + 1..].iter_mut().for_each(|m| *m = true);
        }
        Task::Understanding => {
            if ids.get(1) != Some(&special::IMG_START) || ids.get(cells + 2) != Some(&special::IMG_END) {
                return bad("expected IMG_START image… IMG_END");
            }
            if !ids[2..cells + 2].iter().all(|&i| cfg.is_image(i)) {
                return bad("image segment holds non-image tokens");
            }
            let Some(ans) = ids.iter().position(|&i| i == special::ANS) else {
                return bad("missing ANS");
            };
            if ans <= cells + 3 || !ids[cells + 3..ans].iter().all(|&i| cfg.is_text(i)) {
                return bad("question must be non-empty text");
            }
            if n != ans + 3 || !cfg.is_text(ids[ans + 1]) {
                return bad("expected ANS answer EOS");
            }
            expected_mask[ans] = opts.supervise_boundary;
            expected_mask[ans + 1] = true;
            expected_mask[ans + 2] = true;
        }
    }
    if seq.loss_mask != expected_mask {
        return bad("loss mask does not cover exactly the generated segment");
    }
    Ok(())
}
