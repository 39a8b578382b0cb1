//! Synthetic clip/narration corpus.
//!
//! Each clip renders a coloured object over a scenario-tinted background:
//! the noun picks the object's colour and texture, the verb picks the
//! orientation and period of a grating that drifts across frames.

mod io;
mod lexicon;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use io::{load_jsonl, save_jsonl, sidecar_path};
pub use lexicon::{Lexicon, CLS, MASK, NOUNS, PAD, UNK, VERBS};

use crate::config::{CorpusConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::{purpose, rng_for};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub clip_id: String,
    /// `[T, H, W, C]`, row-major, values in [0, 1].
    pub frames: Vec<f32>,
    pub frame_shape: [usize; 4],
    pub scenario_id: usize,
    pub duration_s: f64,
}

impl ClipSample {
    pub fn frames_tensor(&self) -> Tensor {
        let data = self.frames.iter().map(|&v| v as f64).collect();
        Tensor::new(data, &self.frame_shape).expect("frame buffer matches its shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NarrationSample {
    /// CLS-prefixed ids padded to `max_text_len`.
    pub text: Vec<usize>,
    /// True at real (non-pad) positions.
    pub pad_mask: Vec<bool>,
    pub nouns: BTreeSet<usize>,
    pub verbs: BTreeSet<usize>,
}

impl NarrationSample {
    pub fn real_len(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }

    /// Rebuilds a sample from stored ids (pad mask from PAD positions).
    pub fn from_tokens(text: Vec<usize>, nouns: BTreeSet<usize>, verbs: BTreeSet<usize>) -> Self {
        let pad_mask = text.iter().map(|&t| t != PAD).collect();
        NarrationSample {
            text,
            pad_mask,
            nouns,
            verbs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub clip: ClipSample,
    pub narration: NarrationSample,
}

/// Whitespace tokenizer: lower-cases, strips surrounding punctuation,
/// prefixes CLS and pads or truncates to `max_text_len`.
pub fn tokenize(text: &str, lexicon: &Lexicon, max_text_len: usize) -> NarrationSample {
    let mut ids = vec![CLS];
    ids.extend(
        text.split_whitespace()
            .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()))
            .filter(|w| !w.is_empty())
            .map(|w| lexicon.id(w)),
    );
    ids.truncate(max_text_len.max(1));
    let (nouns, verbs) = lexicon.tag(&ids);
    let real = ids.len();
    ids.resize(max_text_len.max(1), PAD);
    NarrationSample {
        pad_mask: (0..ids.len()).map(|i| i < real).collect(),
        text: ids,
        nouns,
        verbs,
    }
}

const TAILS: [&str; 5] = ["", "on the left", "on the right", "with her", "with his"];

pub fn narration_text(noun_k: usize, verb_k: usize, tail: usize) -> String {
    let base = format!("c {} the {}", VERBS[verb_k], NOUNS[noun_k]);
    match TAILS[tail % TAILS.len()] {
        "" => base,
        t => format!("{base} {t}"),
    }
}

const NOUN_COLORS: [[f32; 3]; 8] = [
    [0.95, 0.15, 0.15],
    [0.15, 0.85, 0.2],
    [0.2, 0.3, 0.95],
    [0.95, 0.9, 0.15],
    [0.9, 0.2, 0.9],
    [0.15, 0.9, 0.9],
    [1.0, 0.55, 0.1],
    [0.95, 0.95, 0.95],
];

fn scenario_color(s: usize) -> [f32; 3] {
    // Low-saturation, dark tint; hue walks by the golden ratio.
    let h = (s as f32 * 0.618_034).fract() * 6.0;
    let (v, sat) = (0.32f32, 0.45f32);
    let c = v * sat;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Parameters of one rendered clip beyond its labels.
#[derive(Debug, Clone, Copy, Default)]
pub struct Nuisance {
    pub dy: i64,
    pub dx: i64,
    pub brightness: f32,
}

const GRATING: f32 = 0.12;

/// Noise-free pattern for (noun, verb, scenario), `[T, H, W, C]`.
pub fn render_pattern(model: &ModelConfig, noun_k: usize, verb_k: usize, scenario: usize, nz: Nuisance) -> Vec<f32> {
    let (t_n, h, w, c_n) = (model.frames, model.image_size, model.image_size, model.channels);
    let bg = scenario_color(scenario);
    let fg = NOUN_COLORS[noun_k % NOUN_COLORS.len()];
    // Noun: coloured box in the middle, checkered for the upper half of the
    // noun list. Verb: an oriented grating drifting one pixel per frame.
    let (bh, bw) = ((h / 2).max(1) as i64, (w / 2).max(1) as i64);
    let (by, bx) = ((h as i64 - bh) / 2 + nz.dy, (w as i64 - bw) / 2 + nz.dx);
    let checkered = noun_k >= 4;
    let orient = verb_k % 4;
    let period = if verb_k < 4 { 4 } else { 8 };
    let mut out = vec![0f32; t_n * h * w * c_n];
    for t in 0..t_n {
        for y in 0..h {
            for x in 0..w {
                let (yi, xi) = (y as i64, x as i64);
                let inside = yi >= by && yi < by + bh && xi >= bx && xi < bx + bw;
                let base = if inside {
                    let tex = if checkered && (x / 2 + y / 2) % 2 == 1 { 0.7 } else { 1.0 };
                    fg.map(|v| v * tex)
                } else {
                    bg
                };
                let u = match orient {
                    0 => xi,
                    1 => yi,
                    2 => xi + yi,
                    _ => xi - yi + 2 * h as i64,
                } + t as i64;
                let grating = if u.rem_euclid(period) < period / 2 { GRATING } else { -GRATING };
                let o = ((t * h + y) * w + x) * c_n;
                for ch in 0..c_n {
                    out[o + ch] = (base[ch % 3] + grating + nz.brightness).clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

fn render_clip(model: &ModelConfig, cc: &CorpusConfig, noun_k: usize, verb_k: usize, scenario: usize, rng: &mut impl Rng) -> Vec<f32> {
    let nz = Nuisance {
        dy: rng.random_range(-1..=1),
        dx: rng.random_range(-1..=1),
        brightness: rng.random_range(-0.05..0.05),
    };
    let pattern = render_pattern(model, noun_k, verb_k, scenario, nz);
    let noise = Normal::new(0.0, cc.noise_std).expect("validated noise_std");
    let s = cc.signal as f32;
    pattern
        .into_iter()
        .map(|p| (s * p + (1.0 - s) * 0.5 + noise.sample(rng) as f32).clamp(0.0, 1.0))
        .collect()
}

/// Labels of one generated pair, before rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSpec {
    pub noun_k: usize,
    pub verb_k: usize,
    pub scenario: usize,
}

/// Renders the pair for `spec`; `stream` keys its private random stream.
pub fn make_pair(model: &ModelConfig, cc: &CorpusConfig, lexicon: &Lexicon, seed: u64, stream: u64, clip_id: String, spec: PairSpec) -> Pair {
    let mut rng = rng_for(seed, &[purpose::CORPUS, 1, stream]);
    let tail = rng.random_range(0..TAILS.len());
    let narration = tokenize(&narration_text(spec.noun_k, spec.verb_k, tail), lexicon, model.max_text_len);
    let frames = render_clip(model, cc, spec.noun_k, spec.verb_k, spec.scenario, &mut rng);
    let duration_s = rng.random_range(2.0..6.0);
    Pair {
        clip: ClipSample {
            clip_id,
            frames,
            frame_shape: [model.frames, model.image_size, model.image_size, model.channels],
            scenario_id: spec.scenario,
            duration_s,
        },
        narration,
    }
}

/// Draws labels for `cc.n_pairs` pairs; every scenario receives at least two.
pub fn plan_corpus(cc: &CorpusConfig, seed: u64) -> Result<Vec<PairSpec>> {
    cc.validate()?;
    let mut rng = rng_for(seed, &[purpose::CORPUS, 0]);
    let combos = NOUNS.len() * VERBS.len();
    let labels: Vec<(usize, usize)> = if cc.unique_narrations {
        if cc.n_pairs > combos {
            return Err(Error::config(
                "corpus.unique_narrations",
                format!("only {combos} distinct narrations exist, {} pairs requested", cc.n_pairs),
            ));
        }
        let mut all: Vec<usize> = (0..combos).collect();
        all.shuffle(&mut rng);
        all[..cc.n_pairs].iter().map(|&k| (k / VERBS.len(), k % VERBS.len())).collect()
    } else {
        (0..cc.n_pairs)
            .map(|_| (rng.random_range(0..NOUNS.len()), rng.random_range(0..VERBS.len())))
            .collect()
    };
    let mut scenarios: Vec<usize> = (0..cc.n_scenarios).flat_map(|s| [s, s]).collect();
    while scenarios.len() < cc.n_pairs {
        scenarios.push(rng.random_range(0..cc.n_scenarios));
    }
    scenarios.shuffle(&mut rng);
    Ok(labels
        .into_iter()
        .zip(scenarios)
        .map(|((noun_k, verb_k), scenario)| PairSpec { noun_k, verb_k, scenario })
        .collect())
}

/// Seed-deterministic synthetic corpus.
pub fn generate_corpus(cc: &CorpusConfig, model: &ModelConfig, lexicon: &Lexicon, seed: u64) -> Result<Vec<Pair>> {
    model.validate()?;
    if lexicon.len() > model.vocab_size {
        return Err(Error::config(
            "model.vocab_size",
            format!("lexicon has {} words, vocab_size is {}", lexicon.len(), model.vocab_size),
        ));
    }
    let specs = plan_corpus(cc, seed)?;
    Ok(specs
        .into_iter()
        .enumerate()
        .map(|(i, spec)| make_pair(model, cc, lexicon, seed, i as u64, format!("clip{i:05}"), spec))
        .collect())
}

/// Per-quadrant mean colour averaged over frames (4·C values).
pub fn clip_color_feature(frames: &[f32], shape: [usize; 4]) -> Vec<f64> {
    let [t_n, h, w, c_n] = shape;
    let mut feat = vec![0.0; 4 * c_n];
    for t in 0..t_n {
        for y in 0..h {
            for x in 0..w {
                let q = (2 * y / h) * 2 + 2 * x / w;
                let o = ((t * h + y) * w + x) * c_n;
                for ch in 0..c_n {
                    feat[q * c_n + ch] += frames[o + ch] as f64;
                }
            }
        }
    }
    let per_quadrant = (t_n * h * w / 4) as f64;
    feat.iter_mut().for_each(|v| *v /= per_quadrant);
    feat
}

/// Fraction of clips whose nearest noise-free prototype within their own
/// scenario carries the paired narration's noun.
pub fn nearest_noun_accuracy(pairs: &[Pair], model: &ModelConfig, cc: &CorpusConfig, lexicon: &Lexicon) -> f64 {
    let s = cc.signal;
    let mut hits = 0;
    for p in pairs {
        let f = clip_color_feature(&p.clip.frames, p.clip.frame_shape);
        let mut best = (f64::INFINITY, usize::MAX);
        for noun_k in 0..NOUNS.len() {
            for verb_k in 0..VERBS.len() {
                let proto = render_pattern(model, noun_k, verb_k, p.clip.scenario_id, Nuisance::default());
                let proto: Vec<f32> = proto.iter().map(|&v| (s as f32) * v + (1.0 - s as f32) * 0.5).collect();
                let g = clip_color_feature(&proto, p.clip.frame_shape);
                let d: f64 = f.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, noun_k);
                }
            }
        }
        if p.narration.nouns.contains(&lexicon.noun(best.1)) {
            hits += 1;
        }
    }
    hits as f64 / pairs.len().max(1) as f64
}
