//! Retrieval scoring, multiple-choice evaluation, kernel temporal
//! segmentation and query-focused summarization.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{CorpusConfig, DownstreamConfig, ModelConfig, PositiveRule, RunConfig, TrainConfig};
use crate::corpus::{generate_corpus, make_pair, narration_text, tokenize, ClipSample, Lexicon, NarrationSample, Pair, PairSpec, NOUNS, VERBS};
use crate::encoders::{Attention, Ffn, LayerNorm, Linear, TextBatch};
use crate::error::{Error, Result};
use crate::fusion::{pooled, FusionMode, Model};
use crate::objectives::{shares, vtm_loss};
use crate::rng::{derive_seed, purpose, rng_for};
use crate::tensor::{concat, no_grad, ParamStore, Tensor};
use crate::trainer::{adamw_update, TrainState};

const CHUNK: usize = 32;

/// How a query is scored against candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    Dual,
    Fused,
    Ensemble,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = *t.shape().last().unwrap_or(&1);
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

/// Unit-norm dual video embeddings, one row per clip.
pub fn embed_clips(model: &Model, clips: &[&ClipSample]) -> Result<Vec<Vec<f64>>> {
    no_grad(|| {
        let mut out = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(CHUNK) {
            out.extend(rows(&model.encode_video(&model.patchify(chunk)?)?));
        }
        Ok(out)
    })
}

pub fn embed_texts(model: &Model, texts: &[&NarrationSample]) -> Result<Vec<Vec<f64>>> {
    no_grad(|| {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(CHUNK) {
            out.extend(rows(&model.encode_text(&TextBatch::from_samples(chunk)?)?));
        }
        Ok(out)
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `scores[i][j]` = cosine of query text `i` and gallery clip `j`.
pub fn retrieve_dual(model: &Model, queries: &[&NarrationSample], gallery: &[&ClipSample]) -> Result<Vec<Vec<f64>>> {
    let t = embed_texts(model, queries)?;
    let v = embed_clips(model, gallery)?;
    Ok(t.iter().map(|ti| v.iter().map(|vj| dot(ti, vj)).collect()).collect())
}

/// `scores[i][j]` = sigmoid of the matching logit of the fused pass on
/// gallery clip `j` with query `i`.
pub fn retrieve_fused(model: &Model, queries: &[&NarrationSample], gallery: &[&ClipSample]) -> Result<Vec<Vec<f64>>> {
    no_grad(|| {
        let mut xv_chunks = Vec::new();
        for chunk in gallery.chunks(CHUNK) {
            xv_chunks.push(model.bottom_video(model.embed_video(&model.patchify(chunk)?)?)?);
        }
        let mut scores = Vec::with_capacity(queries.len());
        for q in queries {
            let tb = TextBatch::from_samples(&[*q])?;
            let xt = model.bottom_text(model.embed_text(&tb)?, &tb.mask)?;
            let mut row = Vec::with_capacity(gallery.len());
            for xv in &xv_chunks {
                let g = xv.shape()[0];
                let rep = vec![0; g];
                let sel = tb.select(&rep);
                let out = model.forward_from(xv.clone(), xt.index_select(0, &rep)?, &sel.mask, FusionMode::Fused, false)?;
                row.extend(model.vtm_logits(&out)?.sigmoid().data());
            }
            scores.push(row);
        }
        Ok(scores)
    })
}

fn minmax_rows(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    m.iter()
        .map(|r| {
            let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            r.iter().map(|&x| if span > 0.0 { (x - lo) / span } else { 0.0 }).collect()
        })
        .collect()
}

/// Elementwise sum, optionally after per-row min-max rescaling of both.
pub fn retrieve_ensemble(dual: &[Vec<f64>], fused: &[Vec<f64>], minmax: bool) -> Result<Vec<Vec<f64>>> {
    if dual.len() != fused.len() || dual.iter().zip(fused).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Shape {
            op: "retrieve_ensemble",
            lhs: vec![dual.len(), dual.first().map_or(0, Vec::len)],
            rhs: vec![fused.len(), fused.first().map_or(0, Vec::len)],
        });
    }
    let (d, f) = if minmax {
        (minmax_rows(dual), minmax_rows(fused))
    } else {
        (dual.to_vec(), fused.to_vec())
    };
    Ok(d.iter().zip(&f).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect())
}

pub fn retrieve(model: &Model, queries: &[&NarrationSample], gallery: &[&ClipSample], mode: ScoreMode, minmax: bool) -> Result<Vec<Vec<f64>>> {
    match mode {
        ScoreMode::Dual => retrieve_dual(model, queries, gallery),
        ScoreMode::Fused => retrieve_fused(model, queries, gallery),
        ScoreMode::Ensemble => retrieve_ensemble(
            &retrieve_dual(model, queries, gallery)?,
            &retrieve_fused(model, queries, gallery)?,
            minmax,
        ),
    }
}

/// Held-out retrieval gallery: `gallery_size` pairs with pairwise distinct
/// narrations, drawn independently of the training corpus.
pub fn gallery_corpus(cfg: &RunConfig, lexicon: &Lexicon, seed: u64) -> Result<Vec<Pair>> {
    let n = cfg.downstream.gallery_size;
    let cc = CorpusConfig {
        n_pairs: n,
        n_scenarios: cfg.corpus.n_scenarios.min(n / 2).max(1),
        unique_narrations: true,
        ..cfg.corpus.clone()
    };
    generate_corpus(&cc, &cfg.model, lexicon, derive_seed(seed, &[purpose::EVAL, 10]))
}

/// Fresh corpus with the training distribution, for multiple-choice items.
pub fn mcq_corpus(cfg: &RunConfig, lexicon: &Lexicon, seed: u64) -> Result<Vec<Pair>> {
    generate_corpus(&cfg.corpus, &cfg.model, lexicon, derive_seed(seed, &[purpose::EVAL, 11]))
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Fraction of queries whose target ranks within the top `k` (ties count
/// against the target only when a lower index holds the same score).
pub fn recall_at_k(scores: &[Vec<f64>], targets: &[usize], k: usize) -> f64 {
    let hits = scores
        .iter()
        .zip(targets)
        .filter(|(row, &t)| {
            let better = row.iter().enumerate().filter(|&(j, &s)| s > row[t] || (s == row[t] && j < t)).count();
            better < k
        })
        .count();
    hits as f64 / scores.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McqKind {
    Inter,
    Intra,
}

/// Five-way choice: which clip goes with the query text.
#[derive(Debug, Clone, PartialEq)]
pub struct McqItem {
    pub query: NarrationSample,
    pub candidates: Vec<ClipSample>,
    pub answer_index: usize,
    pub kind: McqKind,
}

pub const MCQ_CANDIDATES: usize = 5;

/// Serialized item referencing corpus clip ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McqRecord {
    pub query_clip_id: String,
    pub candidate_clip_ids: Vec<String>,
    pub answer_index: usize,
    pub kind: McqKind,
}

/// Builds `n_items` items alternating inter and intra. Distractors never
/// carry the same noun and verb as the answer; intra distractors share the
/// answer's scenario, inter distractors come from other scenarios.
pub fn build_mcq(pairs: &[Pair], n_items: usize, seed: u64) -> Result<Vec<McqRecord>> {
    let mut rng = rng_for(seed, &[purpose::EVAL, 1]);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let mut items = Vec::with_capacity(n_items);
    let mut cursor = 0;
    let mut failures = 0;
    while items.len() < n_items {
        if failures > pairs.len() * 2 {
            return Err(Error::Sampling(format!("could only build {} of {n_items} MCQ items", items.len())));
        }
        let a = order[cursor % order.len()];
        cursor += 1;
        let kind = if items.len() % 2 == 0 { McqKind::Inter } else { McqKind::Intra };
        let scen = pairs[a].clip.scenario_id;
        let mut pool: Vec<usize> = (0..pairs.len())
            .filter(|&j| {
                j != a
                    && !shares(&pairs[a].narration, &pairs[j].narration, PositiveRule::And)
                    && ((pairs[j].clip.scenario_id == scen) == (kind == McqKind::Intra))
            })
            .collect();
        if pool.len() < MCQ_CANDIDATES - 1 {
            failures += 1;
            continue;
        }
        pool.shuffle(&mut rng);
        let mut cands: Vec<usize> = pool[..MCQ_CANDIDATES - 1].to_vec();
        let answer_index = rng.random_range(0..MCQ_CANDIDATES);
        cands.insert(answer_index, a);
        items.push(McqRecord {
            query_clip_id: pairs[a].clip.clip_id.clone(),
            candidate_clip_ids: cands.iter().map(|&j| pairs[j].clip.clip_id.clone()).collect(),
            answer_index,
            kind,
        });
    }
    Ok(items)
}

/// Resolves records against the corpus they were built from.
pub fn resolve_mcq(records: &[McqRecord], pairs: &[Pair]) -> Result<Vec<McqItem>> {
    let find = |id: &str| {
        pairs
            .iter()
            .find(|p| p.clip.clip_id == id)
            .ok_or_else(|| Error::contract(format!("clip `{id}` is not in the corpus")))
    };
    records
        .iter()
        .map(|r| {
            if r.candidate_clip_ids.len() != MCQ_CANDIDATES || r.answer_index >= MCQ_CANDIDATES {
                return Err(Error::contract(format!("MCQ item for `{}` is malformed", r.query_clip_id)));
            }
            Ok(McqItem {
                query: find(&r.query_clip_id)?.narration.clone(),
                candidates: r.candidate_clip_ids.iter().map(|c| find(c).map(|p| p.clip.clone())).collect::<Result<_>>()?,
                answer_index: r.answer_index,
                kind: r.kind,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McqResult {
    pub inter_accuracy: f64,
    pub intra_accuracy: f64,
    pub n_inter: usize,
    pub n_intra: usize,
}

/// Per-kind accuracy of `scorer`'s argmax (ties to the lowest index). A kind
/// with no items reports 0.
pub fn eval_mcq(items: &[McqItem], mut scorer: impl FnMut(&McqItem) -> Result<Vec<f64>>) -> Result<McqResult> {
    let (mut hit, mut n) = ([0usize; 2], [0usize; 2]);
    for item in items {
        if item.candidates.len() != MCQ_CANDIDATES {
            return Err(Error::contract(format!("MCQ item has {} candidates", item.candidates.len())));
        }
        let s = scorer(item)?;
        let k = (item.kind == McqKind::Intra) as usize;
        n[k] += 1;
        if argmax(&s) == item.answer_index {
            hit[k] += 1;
        }
    }
    let acc = |k: usize| if n[k] == 0 { 0.0 } else { hit[k] as f64 / n[k] as f64 };
    Ok(McqResult {
        inter_accuracy: acc(0),
        intra_accuracy: acc(1),
        n_inter: n[0],
        n_intra: n[1],
    })
}

/// Candidate scores for one item under `mode`.
pub fn mcq_scores(model: &Model, item: &McqItem, mode: ScoreMode, minmax: bool) -> Result<Vec<f64>> {
    let cands: Vec<&ClipSample> = item.candidates.iter().collect();
    Ok(retrieve(model, &[&item.query], &cands, mode, minmax)?.remove(0))
}

/// Scores computed once per item for several modes.
pub fn eval_mcq_modes(model: &Model, items: &[McqItem], minmax: bool) -> Result<Vec<(ScoreMode, McqResult)>> {
    let mut dual = Vec::with_capacity(items.len());
    let mut fused = Vec::with_capacity(items.len());
    for it in items {
        dual.push(mcq_scores(model, it, ScoreMode::Dual, minmax)?);
        fused.push(mcq_scores(model, it, ScoreMode::Fused, minmax)?);
    }
    let mut out = Vec::new();
    for mode in [ScoreMode::Dual, ScoreMode::Fused, ScoreMode::Ensemble] {
        let mut k = 0;
        let r = eval_mcq(items, |_| {
            let s = match mode {
                ScoreMode::Dual => dual[k].clone(),
                ScoreMode::Fused => fused[k].clone(),
                ScoreMode::Ensemble => retrieve_ensemble(&[dual[k].clone()], &[fused[k].clone()], minmax)?.remove(0),
            };
            k += 1;
            Ok(s)
        })?;
        out.push((mode, r));
    }
    Ok(out)
}

/// Within-segment scatter under the inner-product kernel of unit vectors.
struct Scatter {
    diag: Vec<f64>,
    /// 2-D prefix sums of the kernel, `(n+1)²`.
    block: Vec<f64>,
    n: usize,
}

impl Scatter {
    fn new(x: &[Vec<f64>]) -> Scatter {
        let n = x.len();
        let k = |i: usize, j: usize| dot(&x[i], &x[j]);
        let mut diag = vec![0.0; n + 1];
        let mut block = vec![0.0; (n + 1) * (n + 1)];
        for i in 0..n {
            diag[i + 1] = diag[i] + k(i, i);
            for j in 0..n {
                block[(i + 1) * (n + 1) + j + 1] = k(i, j) + block[i * (n + 1) + j + 1] + block[(i + 1) * (n + 1) + j] - block[i * (n + 1) + j];
            }
        }
        Scatter { diag, block, n }
    }

    /// Scatter of `[a, b)`.
    fn cost(&self, a: usize, b: usize) -> f64 {
        let w = self.n + 1;
        let s = self.block[b * w + b] - self.block[a * w + b] - self.block[b * w + a] + self.block[a * w + a];
        (self.diag[b] - self.diag[a]) - s / (b - a) as f64
    }
}

fn unit_rows(features: &[Vec<f64>]) -> Vec<Vec<f64>> {
    features
        .iter()
        .map(|f| {
            let n = dot(f, f).sqrt();
            if n > 0.0 { f.iter().map(|x| x / n).collect() } else { f.clone() }
        })
        .collect()
}

/// Objective of a segmentation: total scatter plus `penalty·k·ln n`.
pub fn kts_objective(features: &[Vec<f64>], boundaries: &[usize], penalty: f64) -> f64 {
    let x = unit_rows(features);
    let sc = Scatter::new(&x);
    let n = x.len();
    let mut edges = vec![0];
    edges.extend(boundaries);
    edges.push(n);
    let scatter: f64 = edges.windows(2).map(|w| sc.cost(w[0], w[1])).sum();
    scatter + penalty * (edges.len() - 1) as f64 * (n as f64).ln()
}

/// Change points (segment starts after the first) minimising total
/// within-segment scatter plus `penalty·k·ln n` over `k ≤ max_segments`
/// segments. Ties prefer fewer segments, then earlier boundaries.
pub fn kts_segment(features: &[Vec<f64>], max_segments: usize, penalty: f64) -> Result<Vec<usize>> {
    let n = features.len();
    if n < 2 {
        return Err(Error::contract(format!("segmentation needs at least 2 frames, got {n}")));
    }
    if max_segments == 0 {
        return Err(Error::config("downstream.kts_max_segments", "must be positive"));
    }
    let sc = Scatter::new(&unit_rows(features));
    let kmax = max_segments.min(n);
    // cost[k][j]: best scatter of the first j items in k+1 segments.
    let mut cost = vec![vec![f64::INFINITY; n + 1]; kmax];
    let mut from = vec![vec![0usize; n + 1]; kmax];
    for j in 1..=n {
        cost[0][j] = sc.cost(0, j);
    }
    for k in 1..kmax {
        for j in k + 1..=n {
            for i in k..j {
                let c = cost[k - 1][i] + sc.cost(i, j);
                if c < cost[k][j] {
                    cost[k][j] = c;
                    from[k][j] = i;
                }
            }
        }
    }
    let ln_n = (n as f64).ln();
    let mut best_k = 0;
    let mut best = f64::INFINITY;
    for (k, row) in cost.iter().enumerate() {
        let obj = row[n] + penalty * (k + 1) as f64 * ln_n;
        if obj < best - 1e-12 {
            best = obj;
            best_k = k;
        }
    }
    let mut bounds = Vec::with_capacity(best_k);
    let mut j = n;
    for k in (1..=best_k).rev() {
        j = from[k][j];
        bounds.push(j);
    }
    bounds.reverse();
    Ok(bounds)
}

/// Maximum-weight assignment on a rectangular integer matrix; returns the
/// total weight and `(row, col)` pairs with positive weight.
pub fn max_weight_matching(w: &[Vec<i64>]) -> (i64, Vec<(usize, usize)>) {
    let r = w.len();
    let c = w.first().map_or(0, Vec::len);
    let n = r.max(c);
    if n == 0 {
        return (0, Vec::new());
    }
    let weight = |i: usize, j: usize| if i < r && j < c { w[i][j] } else { 0 };
    // Hungarian method on costs -w, 1-indexed potentials.
    let inf = i64::MAX / 4;
    let (mut u, mut v) = (vec![0i64; n + 1], vec![0i64; n + 1]);
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = -weight(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0;
    let mut pairs = Vec::new();
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i - 1 < r && j - 1 < c && w[i - 1][j - 1] > 0 {
            total += w[i - 1][j - 1];
            pairs.push((i - 1, j - 1));
        }
    }
    pairs.sort();
    (total, pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: i64,
}

/// Concept-level scores after matching selected to reference clips by
/// concept overlap.
pub fn qfvs_f1(selected: &[BTreeSet<usize>], reference: &[BTreeSet<usize>]) -> F1Report {
    let w: Vec<Vec<i64>> = selected
        .iter()
        .map(|s| reference.iter().map(|r| s.intersection(r).count() as i64).collect())
        .collect();
    let (matched, _) = max_weight_matching(&w);
    let ns: usize = selected.iter().map(BTreeSet::len).sum();
    let nr: usize = reference.iter().map(BTreeSet::len).sum();
    let precision = if ns == 0 { 0.0 } else { matched as f64 / ns as f64 };
    let recall = if nr == 0 { 0.0 } else { matched as f64 / nr as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    F1Report {
        precision,
        recall,
        f1,
        matched,
    }
}

pub const PROMPT_TEMPLATES: [&str; 10] = [
    "All scenes containing {a} and {b}",
    "Show me clips with {a} and {b}",
    "Find every shot that has {a} and {b}",
    "Scenes where {a} and {b} appear",
    "Video segments featuring {a} and {b}",
    "Moments including both {a} and {b}",
    "Parts of the video showing {a} and {b}",
    "Clips depicting {a} together with {b}",
    "Any frames which contain {a} and {b}",
    "Shots in which there are {a} and {b}",
];

/// Fills template `template_id` with the plurals of two noun ids.
pub fn render_prompt(concepts: (usize, usize), template_id: usize, lexicon: &Lexicon) -> Result<String> {
    let t = PROMPT_TEMPLATES
        .get(template_id)
        .ok_or_else(|| Error::contract(format!("unknown prompt template {template_id}; {} exist", PROMPT_TEMPLATES.len())))?;
    Ok(t.replace("{a}", lexicon.plural(concepts.0)?).replace("{b}", lexicon.plural(concepts.1)?))
}

/// A long video of short clips and a two-concept query.
#[derive(Debug, Clone, PartialEq)]
pub struct QfvsTask {
    pub clips: Vec<ClipSample>,
    pub query: NarrationSample,
    pub concepts: (usize, usize),
    /// Concept ids present in each clip.
    pub annotations: Vec<BTreeSet<usize>>,
    pub budget_fraction: f64,
    /// Clips that show a query concept.
    pub reference_summary: Vec<usize>,
    /// Narration-style sentences for each noun the query mentions, one per verb.
    pub concept_probes: Vec<NarrationSample>,
}

/// Narrations pairing every noun tagged in `query` with every verb.
pub fn concept_probes(query: &NarrationSample, lexicon: &Lexicon, max_text_len: usize) -> Vec<NarrationSample> {
    let mut out = Vec::new();
    for noun_k in (0..NOUNS.len()).filter(|&k| query.nouns.contains(&lexicon.noun(k))) {
        for verb_k in 0..VERBS.len() {
            out.push(tokenize(&narration_text(noun_k, verb_k, 0), lexicon, max_text_len));
        }
    }
    out
}

/// Number of clips a summary keeps: `round(fraction·n)`, at least 1.
pub fn budget(n_clips: usize, fraction: f64) -> usize {
    ((fraction * n_clips as f64).round() as usize).clamp(1, n_clips.max(1))
}

/// Synthetic task with exactly `budget(n_clips, fraction)` clips showing one
/// of the two query nouns; the rest show other nouns.
pub fn make_qfvs_task(model: &ModelConfig, cc: &CorpusConfig, lexicon: &Lexicon, seed: u64, index: u64, n_clips: usize, fraction: f64) -> Result<QfvsTask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("downstream.qfvs_budget_fraction", "must lie in (0, 1]"));
    }
    if n_clips == 0 {
        return Err(Error::config("downstream.qfvs_clips", "must be positive"));
    }
    let task_seed = derive_seed(seed, &[purpose::QFVS, index]);
    let mut rng = rng_for(task_seed, &[0]);
    let mut nouns: Vec<usize> = (0..NOUNS.len()).collect();
    nouns.shuffle(&mut rng);
    let (a, b) = (nouns[0], nouns[1]);
    let others = &nouns[2..];
    let scenario = rng.random_range(0..cc.n_scenarios.max(1));
    let k = budget(n_clips, fraction);
    let mut pos: Vec<usize> = (0..n_clips).collect();
    pos.shuffle(&mut rng);
    let mut relevant = pos[..k].to_vec();
    relevant.sort();
    let mut clips = Vec::with_capacity(n_clips);
    let mut annotations = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let noun_k = match relevant.iter().position(|&r| r == i) {
            Some(slot) => [a, b][slot % 2],
            None => others[rng.random_range(0..others.len())],
        };
        let spec = PairSpec {
            noun_k,
            verb_k: rng.random_range(0..VERBS.len()),
            scenario,
        };
        let pair = make_pair(model, cc, lexicon, task_seed, i as u64, format!("qfvs{index:03}_{i:04}"), spec);
        clips.push(pair.clip);
        annotations.push(BTreeSet::from([lexicon.noun(noun_k)]));
    }
    let concepts = (lexicon.noun(a), lexicon.noun(b));
    let template = rng.random_range(0..PROMPT_TEMPLATES.len());
    let query = tokenize(&render_prompt(concepts, template, lexicon)?, lexicon, model.max_text_len);
    let concept_probes = concept_probes(&query, lexicon, model.max_text_len);
    Ok(QfvsTask {
        clips,
        query,
        concepts,
        annotations,
        budget_fraction: fraction,
        reference_summary: relevant,
        concept_probes,
    })
}

/// Zero mean, unit variance; a constant input maps to zeros.
fn standardize(x: &[f64]) -> Vec<f64> {
    let n = x.len().max(1) as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    x.iter().map(|v| if sd > 1e-12 { (v - mean) / sd } else { 0.0 }).collect()
}

/// Frozen-backbone inputs of the summarization head.
#[derive(Debug, Clone)]
pub struct QfvsFeatures {
    /// Clip indices of each segment.
    pub segments: Vec<Vec<usize>>,
    /// Per segment `[len, 2d+1]`: fused video CLS, fused query CLS and the
    /// dual cosine between clip and query.
    pub clip_features: Vec<Tensor>,
    /// `[1, d]` query CLS from the dual text tower.
    pub query_feature: Tensor,
}

/// Bottom layers once per clip, segmentation on their CLS tokens, then the
/// top fused layers per segment with the query.
pub fn qfvs_features(model: &Model, task: &QfvsTask, cfg: &DownstreamConfig) -> Result<QfvsFeatures> {
    no_grad(|| {
        let n = task.clips.len();
        let mut xv_parts = Vec::new();
        let clip_refs: Vec<&ClipSample> = task.clips.iter().collect();
        for chunk in clip_refs.chunks(CHUNK) {
            xv_parts.push(model.bottom_video(model.embed_video(&model.patchify(chunk)?)?)?);
        }
        let xv = concat(&xv_parts, 0)?;
        let tb = TextBatch::from_samples(&[&task.query])?;
        let xq = model.bottom_text(model.embed_text(&tb)?, &tb.mask)?;

        let cls_rows = rows(&pooled(&xv)?);
        let bounds = if n >= 2 { kts_segment(&cls_rows, cfg.kts_max_segments, cfg.kts_penalty)? } else { Vec::new() };
        let mut edges = vec![0];
        edges.extend(&bounds);
        edges.push(n);
        let segments: Vec<Vec<usize>> = edges.windows(2).map(|w| (w[0]..w[1]).collect()).collect();

        let query_feature = pooled(&model.final_text(&model.top_text(xq.clone(), &tb.mask)?)?)?;
        // Best dual-encoder match between each clip and any concept probe.
        let v_embed = rows(&model.project_video(&model.final_video(&model.top_video(xv.clone())?)?)?);
        let probes = embed_texts(model, &task.concept_probes.iter().collect::<Vec<_>>())?;
        let concept_score: Vec<f64> = v_embed
            .iter()
            .map(|v| probes.iter().map(|p| dot(v, p)).fold(f64::NEG_INFINITY, f64::max))
            .map(|s| if s.is_finite() { s } else { 0.0 })
            .collect();
        let concept_score = standardize(&concept_score);
        let d = model.cfg.d_model;

        let mut clip_features = Vec::with_capacity(segments.len());
        for seg in &segments {
            let rep = vec![0; seg.len()];
            let sel = tb.select(&rep);
            let out = model.forward_from(xv.index_select(0, seg)?, xq.index_select(0, &rep)?, &sel.mask, FusionMode::Fused, false)?;
            let sims: Vec<f64> = seg.iter().map(|&i| concept_score[i]).collect();
            let f = concat(&[out.video_cls()?, out.text_cls()?, Tensor::new(sims, &[seg.len(), 1])?], 1)?;
            debug_assert_eq!(f.shape(), [seg.len(), 2 * d + 1]);
            clip_features.push(f);
        }
        Ok(QfvsFeatures {
            segments,
            clip_features,
            query_feature,
        })
    })
}

/// Single-layer transformer over `[query, clips…]` with a per-clip scorer.
#[derive(Debug, Clone)]
pub struct QfvsHead {
    pub store: ParamStore,
    pub in_clip: Linear,
    pub in_query: Linear,
    pub ln_sa: LayerNorm,
    pub attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: Ffn,
    pub out: Linear,
    /// Direct path from the concept-match column to the logit.
    pub skip: Linear,
}

impl QfvsHead {
    pub fn new(d: usize, n_heads: usize, seed: u64) -> Result<QfvsHead> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[purpose::QFVS, purpose::INIT]));
        let s = &mut store;
        Ok(QfvsHead {
            in_clip: Linear::new(s, "qfvs.in_clip", 2 * d + 1, d, &mut rng)?,
            in_query: Linear::new(s, "qfvs.in_query", d, d, &mut rng)?,
            ln_sa: LayerNorm::new(s, "qfvs.ln_sa", d, 1e-5)?,
            attn: Attention::new(s, "qfvs.attn", d, n_heads, &mut rng)?,
            ln_ffn: LayerNorm::new(s, "qfvs.ln_ffn", d, 1e-5)?,
            ffn: Ffn::new(s, "qfvs.ffn", d, 2 * d, &mut rng)?,
            out: Linear::new(s, "qfvs.out", d, 1, &mut rng)?,
            skip: Linear::new(s, "qfvs.skip", 1, 1, &mut rng)?,
            store,
        })
    }

    /// Relevance logits `[len]` for one segment.
    pub fn forward(&self, clips: &Tensor, query: &Tensor) -> Result<Tensor> {
        let s = &self.store;
        let len = clips.shape()[0];
        let d = query.shape()[1];
        let x = concat(&[self.in_query.forward(s, query)?, self.in_clip.forward(s, clips)?], 0)?.reshape(&[1, len + 1, d])?;
        let u = self.ln_sa.forward(s, &x)?;
        let x = x.add(&self.attn.forward(s, &u, &u, None)?)?;
        let x = x.add(&self.ffn.forward(s, &self.ln_ffn.forward(s, &x)?)?)?;
        let clips_out = x.reshape(&[len + 1, d])?.index_select(0, &(1..=len).collect::<Vec<_>>())?;
        let matched = clips.index_select(1, &[clips.shape()[1] - 1])?;
        self.out.forward(s, &clips_out)?.add(&self.skip.forward(s, &matched)?)?.reshape(&[len])
    }

    /// Per-clip scores in clip order.
    pub fn score(&self, f: &QfvsFeatures, n_clips: usize) -> Result<Vec<f64>> {
        no_grad(|| {
            let mut scores = vec![0.0; n_clips];
            for (seg, feats) in f.segments.iter().zip(&f.clip_features) {
                for (&i, &s) in seg.iter().zip(self.forward(feats, &f.query_feature)?.data()) {
                    scores[i] = s;
                }
            }
            Ok(scores)
        })
    }
}

/// 1 where a clip shows a query concept.
pub fn overlap_labels(task: &QfvsTask) -> Vec<f64> {
    let q = [task.concepts.0, task.concepts.1];
    task.annotations.iter().map(|a| if q.iter().any(|c| a.contains(c)) { 1.0 } else { 0.0 }).collect()
}

/// Head-tuning with frozen backbones: binary cross-entropy on per-clip
/// concept-overlap labels, one AdamW step per task.
pub fn train_qfvs_head(model: &Model, tasks: &[QfvsTask], cfg: &DownstreamConfig, seed: u64) -> Result<QfvsHead> {
    let mut head = QfvsHead::new(model.cfg.d_model, model.cfg.n_heads, seed)?;
    let feats: Vec<QfvsFeatures> = tasks.iter().map(|t| qfvs_features(model, t, cfg)).collect::<Result<_>>()?;
    let labels: Vec<Vec<f64>> = tasks.iter().map(overlap_labels).collect();
    let opt = TrainConfig::default();
    let mut state = TrainState::new(&head.store);
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    let mut rng = rng_for(seed, &[purpose::QFVS, 2]);
    let mut t = 0;
    for _ in 0..cfg.qfvs_head_epochs {
        order.shuffle(&mut rng);
        for &k in &order {
            let f = &feats[k];
            let mut logits = Vec::new();
            let mut y = Vec::new();
            for (seg, x) in f.segments.iter().zip(&f.clip_features) {
                logits.push(head.forward(x, &f.query_feature)?);
                y.extend(seg.iter().map(|&i| labels[k][i]));
            }
            let loss = vtm_loss(&concat(&logits, 0)?, &y)?;
            loss.backward()?;
            t += 1;
            adamw_update(&mut head.store, &mut state, [cfg.qfvs_head_lr; 3], &opt, t)?;
        }
    }
    Ok(head)
}

/// Top `budget` clips by head score (ties to the earlier clip), in order.
pub fn select_top(scores: &[f64], fraction: f64) -> Vec<usize> {
    let k = budget(scores.len(), fraction);
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out = idx[..k.min(idx.len())].to_vec();
    out.sort();
    out
}

pub fn qfvs_summarize(model: &Model, head: &QfvsHead, task: &QfvsTask, cfg: &DownstreamConfig) -> Result<Vec<usize>> {
    let f = qfvs_features(model, task, cfg)?;
    Ok(select_top(&head.score(&f, task.clips.len())?, task.budget_fraction))
}

/// F1 of a selection against the task's reference summary.
pub fn qfvs_task_f1(task: &QfvsTask, selected: &[usize]) -> F1Report {
    let sel: Vec<_> = selected.iter().map(|&i| task.annotations[i].clone()).collect();
    let reference: Vec<_> = task.reference_summary.iter().map(|&i| task.annotations[i].clone()).collect();
    qfvs_f1(&sel, &reference)
}

/// `{metric: value}` pairs as a two-column text table.
pub fn metrics_table(metrics: &[(String, f64)]) -> String {
    let w = metrics.iter().map(|(k, _)| k.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<w$}  value\n", "metric");
    for (k, v) in metrics {
        s.push_str(&format!("{k:<w$}  {v:.4}\n"));
    }
    s
}
