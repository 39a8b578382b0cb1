//! Pre-training losses and their sampling machinery.

use rand::Rng;

use crate::config::{LossConfig, PositiveRule};
use crate::corpus::{NarrationSample, CLS, MASK, PAD};
use crate::encoders::{Linear, TextBatch};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

/// Square boolean matrix, row-major.
pub type Mask = Vec<Vec<bool>>;

/// Index structure of one contrastive batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub base_indices: Vec<usize>,
    /// Same-scenario partner of each base sample; empty when scene
    /// negatives are disabled.
    pub scene_negative_indices: Vec<usize>,
    /// Positive relation over the augmented batch (base then scene
    /// negatives).
    pub positive_mask: Mask,
    pub seed: u64,
}

impl BatchPlan {
    /// Base indices followed by scene-negative indices.
    pub fn augmented(&self) -> Vec<usize> {
        self.base_indices.iter().chain(&self.scene_negative_indices).copied().collect()
    }

    /// Positive relation restricted to the base samples.
    pub fn base_mask(&self) -> Mask {
        let n = self.base_indices.len();
        self.positive_mask[..n].iter().map(|r| r[..n].to_vec()).collect()
    }
}

pub fn shares(a: &NarrationSample, b: &NarrationSample, rule: PositiveRule) -> bool {
    let noun = !a.nouns.is_disjoint(&b.nouns);
    let verb = !a.verbs.is_disjoint(&b.verbs);
    match rule {
        PositiveRule::And => noun && verb,
        PositiveRule::Or => noun || verb,
    }
}

/// `mask[i][k]` is true when `i == k` or the narrations share per `rule`.
pub fn build_positive_mask(narrations: &[&NarrationSample], rule: PositiveRule) -> Mask {
    let n = narrations.len();
    (0..n)
        .map(|i| (0..n).map(|k| i == k || shares(narrations[i], narrations[k], rule)).collect())
        .collect()
}

pub fn identity_mask(n: usize) -> Mask {
    (0..n).map(|i| (0..n).map(|k| i == k).collect()).collect()
}

/// For each batch member, a uniformly drawn different corpus member with the
/// same scenario.
pub fn sample_scene_negatives(batch: &[usize], scenario_ids: &[usize], rng: &mut impl Rng) -> Result<Vec<usize>> {
    batch
        .iter()
        .map(|&j| {
            let s = *scenario_ids.get(j).ok_or(Error::Index {
                op: "sample_scene_negatives",
                index: j,
                extent: scenario_ids.len(),
            })?;
            let others: Vec<usize> = (0..scenario_ids.len()).filter(|&k| k != j && scenario_ids[k] == s).collect();
            if others.is_empty() {
                return Err(Error::Sampling(format!("scenario {s} has a single clip; no scene negative for sample {j}")));
            }
            Ok(others[rng.random_range(0..others.len())])
        })
        .collect()
}

/// Builds the plan for one batch.
pub fn plan_batch(
    base: &[usize],
    narrations: &[NarrationSample],
    scenario_ids: &[usize],
    cfg: &LossConfig,
    seed: u64,
    rng: &mut impl Rng,
) -> Result<BatchPlan> {
    let scene = if cfg.scene_negatives {
        sample_scene_negatives(base, scenario_ids, rng)?
    } else {
        Vec::new()
    };
    let all: Vec<&NarrationSample> = base.iter().chain(&scene).map(|&i| &narrations[i]).collect();
    let positive_mask = if cfg.shared_positives {
        build_positive_mask(&all, cfg.positive_rule)
    } else {
        identity_mask(all.len())
    };
    Ok(BatchPlan {
        base_indices: base.to_vec(),
        scene_negative_indices: scene,
        positive_mask,
        seed,
    })
}

fn check_unit_rows(name: &str, x: &Tensor) -> Result<()> {
    let d = *x.shape().last().unwrap_or(&1);
    for (i, row) in x.data().chunks(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!("{name} row {i} has norm {norm}, expected unit norm")));
        }
    }
    Ok(())
}

fn mask_tensor(mask: &Mask, transpose: bool) -> Result<Tensor> {
    let n = mask.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let m = if transpose { mask[k][i] } else { mask[i][k] };
            if !m {
                data[i * n + k] = f64::NEG_INFINITY;
            }
        }
    }
    Tensor::new(data, &[n, n])
}

/// Contrastive loss with noun/verb positives and same-scenario negatives.
///
/// With `S = V·Tᵀ / τ` over the augmented batch,
/// `L = -(mean_i log Σ_{k∈P_i} e^{S_ik} / Σ_j e^{S_ij}
///        + mean_i log Σ_{k∈P_i} e^{S_ki} / Σ_j e^{S_ji})`.
pub fn egonce(video: &Tensor, text: &Tensor, positive_mask: &Mask, tau: f64) -> Result<Tensor> {
    let n = video.shape()[0];
    if video.rank() != 2 || text.shape() != video.shape() || positive_mask.len() != n || positive_mask.iter().any(|r| r.len() != n) {
        return Err(Error::Shape {
            op: "egonce",
            lhs: video.shape().to_vec(),
            rhs: text.shape().to_vec(),
        });
    }
    if !(tau > 0.0) {
        return Err(Error::config("loss.tau", "must be positive"));
    }
    if (0..n).any(|i| !positive_mask[i][i]) {
        return Err(Error::contract("positive mask must contain the diagonal"));
    }
    check_unit_rows("video embedding", video)?;
    check_unit_rows("text embedding", text)?;
    let sim = video.matmul(&text.transpose(0, 1)?)?.scale(1.0 / tau);
    let sim_t = sim.transpose(0, 1)?;
    let v2t = sim.logsumexp(1)?.sub(&sim.add(&mask_tensor(positive_mask, false)?)?.logsumexp(1)?)?.mean_all();
    let t2v = sim_t.logsumexp(1)?.sub(&sim_t.add(&mask_tensor(positive_mask, true)?)?.logsumexp(1)?)?.mean_all();
    v2t.add(&t2v)
}

/// Text batch after masking plus the positions to reconstruct.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub text: TextBatch,
    /// (row, position, original id).
    pub targets: Vec<(usize, usize, usize)>,
}

/// Outcome of masking one position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

/// Selects each real non-CLS token with probability `p`; selected tokens
/// become MASK (80%), a random ordinary id (10%) or stay (10%).
pub fn mask_tokens(tokens: &[usize], real: &[bool], p: f64, ordinary: std::ops::Range<usize>, rng: &mut impl Rng) -> (Vec<usize>, Vec<(usize, usize, MaskAction)>) {
    let mut out = tokens.to_vec();
    let mut targets = Vec::new();
    for (pos, (&t, &is_real)) in tokens.iter().zip(real).enumerate() {
        if !is_real || t == CLS || t == PAD {
            continue;
        }
        if !rng.random_bool(p) {
            continue;
        }
        let u: f64 = rng.random();
        let action = if u < 0.8 {
            out[pos] = MASK;
            MaskAction::Mask
        } else if u < 0.9 {
            out[pos] = rng.random_range(ordinary.clone());
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        targets.push((pos, t, action));
    }
    (out, targets)
}

pub fn mask_batch(text: &TextBatch, p: f64, vocab_size: usize, rng: &mut impl Rng) -> MaskedBatch {
    let l = text.len;
    let mut ids = Vec::with_capacity(text.ids.len());
    let mut targets = Vec::new();
    for row in 0..text.batch {
        let (masked, t) = mask_tokens(&text.ids[row * l..(row + 1) * l], &text.mask[row * l..(row + 1) * l], p, 4..vocab_size, rng);
        ids.extend(masked);
        targets.extend(t.into_iter().map(|(pos, orig, _)| (row, pos, orig)));
    }
    MaskedBatch {
        text: TextBatch { ids, ..text.clone() },
        targets,
    }
}

/// Mean cross-entropy of `logits` (`[n, V]`) against `targets`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (n, v) = match *logits.shape() {
        [n, v] if n == targets.len() => (n, v),
        _ => {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![targets.len()],
            })
        }
    };
    let mut onehot = vec![0.0; n * v];
    for (i, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::Index {
                op: "cross_entropy",
                index: t,
                extent: v,
            });
        }
        onehot[i * v + t] = 1.0;
    }
    Ok(logits.log_softmax(1)?.mul(&Tensor::new(onehot, &[n, v])?)?.sum_all().scale(-1.0 / n as f64))
}

/// Reconstruction loss over the masked positions of fused text tokens
/// (`[B, L, d]`); zero when nothing was masked.
pub fn mlm_loss(text_tokens: &Tensor, targets: &[(usize, usize, usize)], head: &Linear, store: &ParamStore) -> Result<Tensor> {
    if targets.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let (b, l, d) = match *text_tokens.shape() {
        [b, l, d] => (b, l, d),
        _ => {
            return Err(Error::Shape {
                op: "mlm_loss",
                lhs: text_tokens.shape().to_vec(),
                rhs: vec![],
            })
        }
    };
    let rows: Vec<usize> = targets.iter().map(|&(r, p, _)| r * l + p).collect();
    if let Some(&bad) = rows.iter().find(|&&r| r >= b * l) {
        return Err(Error::Index {
            op: "mlm_loss",
            index: bad,
            extent: b * l,
        });
    }
    let picked = text_tokens.reshape(&[b * l, d])?.index_select(0, &rows)?;
    let ids: Vec<usize> = targets.iter().map(|&(_, _, t)| t).collect();
    cross_entropy(&head.forward(store, &picked)?, &ids)
}

/// Hard negatives drawn from one similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HardNegatives {
    /// Negative text index for each video.
    pub text_for_video: Vec<usize>,
    /// Negative video index for each text.
    pub video_for_text: Vec<usize>,
    /// Rows or columns where every candidate was a positive and the draw
    /// fell back to uniform.
    pub warnings: Vec<String>,
}

fn draw_weighted(weights: &[(usize, f64)], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().map(|w| w.1).sum();
    let mut u = rng.random::<f64>() * total;
    for &(j, w) in weights {
        if u < w {
            return j;
        }
        u -= w;
    }
    weights.last().expect("non-empty candidates").0
}

/// Candidates and weights `∝ exp(sim/τ)` for one row (`by_row`) or column.
pub fn hard_negative_weights(sim: &[Vec<f64>], mask: &Mask, tau: f64, idx: usize, by_row: bool) -> Option<Vec<(usize, f64)>> {
    let n = sim.len();
    let get = |j: usize| if by_row { (sim[idx][j], mask[idx][j]) } else { (sim[j][idx], mask[j][idx]) };
    let cands: Vec<(usize, f64)> = (0..n).filter(|&j| j != idx && !get(j).1).map(|j| (j, get(j).0 / tau)).collect();
    if cands.is_empty() {
        return None;
    }
    let max = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    Some(cands.into_iter().map(|(j, s)| (j, (s - max).exp())).collect())
}

/// For video `i`, a text `j ≠ i` outside `P_i` drawn with probability
/// `∝ exp(sim[i][j]/τ)`; symmetrically for texts over columns.
pub fn sample_hard_negatives(sim: &[Vec<f64>], mask: &Mask, tau: f64, rng: &mut impl Rng) -> Result<HardNegatives> {
    let n = sim.len();
    if n < 2 {
        return Err(Error::Sampling(format!("hard negatives need at least 2 pairs, got {n}")));
    }
    let mut warnings = Vec::new();
    let mut draw = |i: usize, by_row: bool, warnings: &mut Vec<String>| match hard_negative_weights(sim, mask, tau, i, by_row) {
        Some(w) => draw_weighted(&w, rng),
        None => {
            warnings.push(format!(
                "{} {i}: every candidate shares nouns/verbs; drew uniformly",
                if by_row { "video" } else { "text" }
            ));
            let j = rng.random_range(0..n - 1);
            if j >= i { j + 1 } else { j }
        }
    };
    let text_for_video = (0..n).map(|i| draw(i, true, &mut warnings)).collect();
    let video_for_text = (0..n).map(|j| draw(j, false, &mut warnings)).collect();
    Ok(HardNegatives {
        text_for_video,
        video_for_text,
        warnings,
    })
}

/// Mean binary cross-entropy of logits against 0/1 labels.
pub fn vtm_loss(logits: &Tensor, labels: &[f64]) -> Result<Tensor> {
    if logits.shape() != [labels.len()] {
        return Err(Error::Shape {
            op: "vtm_loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let y = Tensor::new(labels.to_vec(), &[labels.len()])?;
    Ok(logits.softplus().sub(&logits.mul(&y)?)?.mean_all())
}

/// `(1 - γ - δ)·ego + γ·mlm + δ·vtm`.
pub fn total_loss(l_ego: &Tensor, l_mlm: &Tensor, l_vtm: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    cfg.validate()?;
    l_ego
        .scale(1.0 - cfg.gamma - cfg.delta)
        .add(&l_mlm.scale(cfg.gamma))?
        .add(&l_vtm.scale(cfg.delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Lexicon};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Tensor {
        let mut v = Vec::with_capacity(n * d);
        for _ in 0..n {
            let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.extend(row.iter().map(|x| x / norm));
        }
        Tensor::new(v, &[n, d]).unwrap()
    }

    /// Direct summation, one term at a time.
    fn egonce_oracle(v: &Tensor, t: &Tensor, mask: &Mask, tau: f64) -> f64 {
        let n = mask.len();
        let d = v.shape()[1];
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let vr = |i: usize| &v.data()[i * d..(i + 1) * d];
        let tr = |i: usize| &t.data()[i * d..(i + 1) * d];
        let (mut v2t, mut t2v) = (0.0, 0.0);
        for i in 0..n {
            let (mut num, mut den) = (0.0, 0.0);
            let (mut num2, mut den2) = (0.0, 0.0);
            for j in 0..n {
                let e = (dot(vr(i), tr(j)) / tau).exp();
                let e2 = (dot(tr(i), vr(j)) / tau).exp();
                den += e;
                den2 += e2;
                if mask[i][j] {
                    num += e;
                }
                if mask[j][i] {
                    num2 += e2;
                }
            }
            v2t += (num / den).ln();
            t2v += (num2 / den2).ln();
        }
        -(v2t / n as f64 + t2v / n as f64)
    }

    fn random_narrations(rng: &mut impl Rng, n: usize) -> Vec<NarrationSample> {
        let lex = Lexicon::standard();
        (0..n)
            .map(|_| {
                let text = format!(
                    "c {} the {}",
                    crate::corpus::VERBS[rng.random_range(0..3)],
                    crate::corpus::NOUNS[rng.random_range(0..3)]
                );
                tokenize(&text, &lex, 8)
            })
            .collect()
    }

    #[test]
    fn disjoint_narrations_give_identity() {
        let lex = Lexicon::standard();
        let a = tokenize("open drawer", &lex, 8);
        let b = tokenize("cut knife", &lex, 8);
        assert_eq!(build_positive_mask(&[&a, &b], PositiveRule::Or), identity_mask(2));
        let c = tokenize("open fridge", &lex, 8);
        assert!(build_positive_mask(&[&a, &c], PositiveRule::Or)[0][1]);
        assert!(!build_positive_mask(&[&a, &c], PositiveRule::And)[0][1]);
    }

    #[test]
    fn mask_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for rule in [PositiveRule::And, PositiveRule::Or] {
            let ns = random_narrations(&mut rng, 8);
            let refs: Vec<_> = ns.iter().collect();
            let m = build_positive_mask(&refs, rule);
            for i in 0..8 {
                for k in 0..8 {
                    let noun = ns[i].nouns.intersection(&ns[k].nouns).count() > 0;
                    let verb = ns[i].verbs.intersection(&ns[k].verbs).count() > 0;
                    let expect = i == k || if rule == PositiveRule::And { noun && verb } else { noun || verb };
                    assert_eq!(m[i][k], expect);
                }
            }
        }
    }

    #[test]
    fn scene_negative_forced_choice_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scen = [0, 1, 0, 2];
        assert_eq!(sample_scene_negatives(&[0], &scen, &mut rng).unwrap(), vec![2]);
        match sample_scene_negatives(&[1], &scen, &mut rng) {
            Err(Error::Sampling(msg)) => assert!(msg.contains("scenario 1")),
            other => panic!("{other:?}"),
        }
        let a = sample_scene_negatives(&[0, 2], &scen, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_scene_negatives(&[0, 2], &scen, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scene_negatives_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scen = [5, 5, 5, 5];
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[sample_scene_negatives(&[0], &scen, &mut rng).unwrap()[0]] += 1;
        }
        assert_eq!(counts[0], 0);
        for c in &counts[1..] {
            assert!((*c as f64 / 10_000.0 - 1.0 / 3.0).abs() < 0.02);
        }
    }

    #[test]
    fn egonce_degenerate_cases() {
        let v = Tensor::new(vec![0.6, 0.8], &[1, 2]).unwrap();
        assert_eq!(egonce(&v, &v, &identity_mask(1), 0.05).unwrap().item(), 0.0);
        let rows = Tensor::new([0.6, 0.8].repeat(4), &[4, 2]).unwrap();
        let all = vec![vec![true; 4]; 4];
        assert_eq!(egonce(&rows, &rows, &all, 0.05).unwrap().item(), 0.0);
        let bad = Tensor::new(vec![1.0, 1.0], &[1, 2]).unwrap();
        assert!(matches!(egonce(&bad, &bad, &identity_mask(1), 0.05), Err(Error::Contract(_))));
    }

    #[test]
    fn egonce_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for rule in [PositiveRule::And, PositiveRule::Or] {
            for n in [2, 4, 8] {
                let ns = random_narrations(&mut rng, n);
                let refs: Vec<_> = ns.iter().collect();
                let mask = build_positive_mask(&refs, rule);
                let v = unit_rows(&mut rng, n, 6);
                let t = unit_rows(&mut rng, n, 6);
                let got = egonce(&v, &t, &mask, 0.1).unwrap().item();
                assert!((got - egonce_oracle(&v, &t, &mask, 0.1)).abs() <= 1e-9);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn egonce_is_permutation_invariant(seed in 0u64..1000, n in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ns = random_narrations(&mut rng, n);
            let refs: Vec<_> = ns.iter().collect();
            let mask = build_positive_mask(&refs, PositiveRule::Or);
            let v = unit_rows(&mut rng, n, 4);
            let t = unit_rows(&mut rng, n, 4);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.rotate_left(seed as usize % n);
            perm.swap(0, n - 1);
            let pv = v.index_select(0, &perm).unwrap();
            let pt = t.index_select(0, &perm).unwrap();
            let pm: Mask = perm.iter().map(|&i| perm.iter().map(|&k| mask[i][k]).collect()).collect();
            let a = egonce(&v, &t, &mask, 0.07).unwrap().item();
            let b = egonce(&pv, &pt, &pm, 0.07).unwrap().item();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn egonce_oracle_agrees(seed in 0u64..1000, n in 1usize..9, or in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ns = random_narrations(&mut rng, n);
            let refs: Vec<_> = ns.iter().collect();
            let rule = if or { PositiveRule::Or } else { PositiveRule::And };
            let mask = build_positive_mask(&refs, rule);
            let v = unit_rows(&mut rng, n, 5);
            let t = unit_rows(&mut rng, n, 5);
            let got = egonce(&v, &t, &mask, 0.05).unwrap().item();
            prop_assert!((got - egonce_oracle(&v, &t, &mask, 0.05)).abs() <= 1e-9);
        }

        #[test]
        fn masking_never_touches_cls_or_pad(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tokens = [CLS, 7, 9, 12, PAD, PAD];
            let real = [true, true, true, true, false, false];
            let (out, targets) = mask_tokens(&tokens, &real, 1.0, 4..64, &mut rng);
            prop_assert_eq!(out[0], CLS);
            prop_assert_eq!(&out[4..], &[PAD, PAD]);
            prop_assert_eq!(targets.len(), 3);
        }
    }

    #[test]
    fn mask_split_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tokens: Vec<usize> = std::iter::once(CLS).chain((0..99).map(|i| 4 + i % 60)).collect();
        let real = vec![true; 100];
        let (mut sel, mut masked, mut random, mut kept, mut total) = (0, 0, 0, 0, 0);
        while total < 100_000 {
            let (_, t) = mask_tokens(&tokens, &real, 0.15, 4..64, &mut rng);
            total += 99;
            sel += t.len();
            for (_, _, a) in t {
                match a {
                    MaskAction::Mask => masked += 1,
                    MaskAction::Random => random += 1,
                    MaskAction::Keep => kept += 1,
                }
            }
        }
        assert!((sel as f64 / total as f64 - 0.15).abs() < 0.005);
        assert!((masked as f64 / sel as f64 - 0.8).abs() < 0.01);
        assert!((random as f64 / sel as f64 - 0.1).abs() < 0.01);
        assert!((kept as f64 / sel as f64 - 0.1).abs() < 0.01);
        let (out, t) = mask_tokens(&tokens, &real, 0.0, 4..64, &mut rng);
        assert!(t.is_empty());
        assert_eq!(out, tokens);
    }

    #[test]
    fn cross_entropy_cases() {
        let v = 7;
        let uniform = Tensor::zeros(&[3, v]);
        let l = cross_entropy(&uniform, &[0, 3, 6]).unwrap().item();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
        let mut sharp = vec![0.0; v];
        sharp[2] = 800.0;
        assert!(cross_entropy(&Tensor::new(sharp, &[1, v]).unwrap(), &[2]).unwrap().item() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits: Vec<f64> = (0..4 * v).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tg = [1, 5, 0, 6];
        let mut oracle = 0.0;
        for (i, &t) in tg.iter().enumerate() {
            let row = &logits[i * v..(i + 1) * v];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            oracle -= (row[t].exp() / z).ln();
        }
        let got = cross_entropy(&Tensor::new(logits, &[4, v]).unwrap(), &tg).unwrap().item();
        assert!((got - oracle / 4.0).abs() <= 1e-10);
    }

    #[test]
    fn hard_negative_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sim = vec![vec![1.0, 0.2], vec![0.3, 1.0]];
        let hn = sample_hard_negatives(&sim, &identity_mask(2), 0.05, &mut rng).unwrap();
        assert_eq!(hn.text_for_video, vec![1, 0]);
        assert_eq!(hn.video_for_text, vec![1, 0]);
        assert!(sample_hard_negatives(&[vec![1.0]], &identity_mask(1), 0.05, &mut rng).is_err());
        let all = vec![vec![true; 3]; 3];
        let hn = sample_hard_negatives(&vec![vec![0.0; 3]; 3], &all, 0.05, &mut rng).unwrap();
        assert_eq!(hn.warnings.len(), 6);
        assert!(hn.text_for_video.iter().enumerate().all(|(i, &j)| i != j));
    }

    #[test]
    fn hard_negative_frequencies_follow_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sim = vec![
            vec![1.0, 0.30, 0.25, 0.1, 0.9],
            vec![0.2, 1.0, 0.1, 0.1, 0.1],
            vec![0.2, 0.1, 1.0, 0.1, 0.1],
            vec![0.2, 0.1, 0.1, 1.0, 0.1],
            vec![0.9, 0.1, 0.1, 0.1, 1.0],
        ];
        let mut mask = identity_mask(5);
        mask[0][4] = true;
        mask[4][0] = true;
        let tau = 0.1;
        let w = hard_negative_weights(&sim, &mask, tau, 0, true).unwrap();
        let z: f64 = w.iter().map(|x| x.1).sum();
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            let hn = sample_hard_negatives(&sim, &mask, tau, &mut rng).unwrap();
            counts[hn.text_for_video[0]] += 1;
        }
        assert_eq!(counts[0] + counts[4], 0);
        for (j, wj) in w {
            assert!((counts[j] as f64 / 10_000.0 - wj / z).abs() < 0.02);
        }
    }

    #[test]
    fn vtm_loss_cases() {
        let l = vtm_loss(&Tensor::zeros(&[6]), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap().item();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let sep = Tensor::new(vec![60.0, -60.0], &[2]).unwrap();
        assert!(vtm_loss(&sep, &[1.0, 0.0]).unwrap().item() < 1e-20);
        let z = [0.3, -1.2, 2.5, 0.0];
        let y = [1.0, 0.0, 0.0, 1.0];
        let oracle: f64 = z
            .iter()
            .zip(&y)
            .map(|(&z, &y): (&f64, &f64)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 4.0;
        let got = vtm_loss(&Tensor::new(z.to_vec(), &[4]).unwrap(), &y).unwrap().item();
        assert!((got - oracle).abs() <= 1e-10);
    }

    #[test]
    fn total_loss_cases() {
        let (a, b, c) = (Tensor::scalar(1.0), Tensor::scalar(2.0), Tensor::scalar(4.0));
        let cfg = LossConfig::default();
        assert!((total_loss(&a, &b, &c, &cfg).unwrap().item() - 2.75).abs() < 1e-15);
        let only = LossConfig { gamma: 0.0, delta: 0.0, ..cfg.clone() };
        assert_eq!(total_loss(&a, &b, &c, &only).unwrap().item(), 1.0);
        let bad = LossConfig { gamma: 0.5, delta: 0.5, ..cfg };
        assert!(total_loss(&a, &b, &c, &bad).unwrap_err().is_config());
    }

    #[test]
    fn total_gradient_is_weighted_sum() {
        let w = Tensor::param(vec![0.3, -0.2, 0.5], &[3]).unwrap();
        let cfg = LossConfig::default();
        let losses = |w: &Tensor| -> (Tensor, Tensor, Tensor) {
            (w.mul(w).unwrap().sum_all(), w.exp().sum_all(), w.sigmoid().sum_all())
        };
        let (a, b, c) = losses(&w);
        total_loss(&a, &b, &c, &cfg).unwrap().backward().unwrap();
        let joint = w.grad().unwrap();
        let mut sum = vec![0.0; 3];
        for (k, scale) in [(0, 1.0 - cfg.gamma - cfg.delta), (1, cfg.gamma), (2, cfg.delta)] {
            w.zero_grad();
            let (a, b, c) = losses(&w);
            [a, b, c][k].scale(scale).backward().unwrap();
            sum.iter_mut().zip(w.grad().unwrap()).for_each(|(s, g)| *s += g);
        }
        for (x, y) in joint.iter().zip(&sum) {
            assert!((x - y).abs() <= 1e-10);
        }
    }
}
