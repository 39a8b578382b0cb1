//! Acceptance checks. Each test prints one `PASS`/`FAIL` line straight to
//! stdout (bypassing the harness capture) before asserting.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use fusevl_core::config::{CorpusConfig, LossConfig, ModelConfig, PositiveRule, RunConfig, TrainConfig};
use fusevl_core::corpus::{generate_corpus, ClipSample, Lexicon, NarrationSample, CLS, MASK, PAD};
use fusevl_core::costmodel::{count_macs, count_params, instrumented_forward, full_scale_config, FusionStack, StackedLayout, Variant};
use fusevl_core::downstream::{
    build_mcq, eval_mcq_modes, gallery_corpus, kts_segment, mcq_corpus, max_weight_matching, qfvs_f1, recall_at_k, resolve_mcq, retrieve_dual, ScoreMode,
};
use fusevl_core::encoders::TextBatch;
use fusevl_core::fusion::{layer_gradchecks, FusionMode, Model};
use fusevl_core::objectives::{build_positive_mask, egonce, identity_mask, mask_tokens, plan_batch, sample_hard_negatives, MaskAction, Mask};
use fusevl_core::tensor::{op_suite, Tensor};
use fusevl_core::trainer::{history_csv, pretrain, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// The MAC tally is process-global.
static MACS: Mutex<()> = Mutex::new(());

fn report(id: u32, name: &str, ok: bool, detail: String, elapsed: Duration) {
    let mut out = std::io::stdout().lock();
    let verdict = if ok { "PASS" } else { "FAIL" };
    writeln!(out, "{verdict} criterion {id:>2} {name}: {detail} ({:.2?})", elapsed).unwrap();
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn random_clip(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> ClipSample {
    let n = cfg.frames * cfg.image_size * cfg.image_size * cfg.channels;
    ClipSample {
        clip_id: "random".into(),
        frames: (0..n).map(|_| rng.random::<f32>()).collect(),
        frame_shape: [cfg.frames, cfg.image_size, cfg.image_size, cfg.channels],
        scenario_id: 0,
        duration_s: 1.0,
    }
}

fn random_text(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> NarrationSample {
    let real = rng.random_range(1..=cfg.max_text_len);
    let mut text = vec![CLS];
    text.extend((1..real).map(|_| rng.random_range(4..cfg.vocab_size)));
    text.resize(cfg.max_text_len, PAD);
    NarrationSample::from_tokens(text, BTreeSet::new(), BTreeSet::new())
}

#[test]
fn c01_switch_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let cfg = ModelConfig {
            n_layers: 2 + case as usize % 2,
            n_fused: 1 + case as usize % 2,
            d_model: 16,
            n_heads: 2,
            frames: 2,
            image_size: 16,
            patch_size: 8,
            max_text_len: 8,
            projector_dims: vec![16],
            ..ModelConfig::default()
        };
        let mut model = Model::new(&cfg, case).unwrap();
        // Move every weight off its initial value; gates stay at 0.
        let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone(), p.tensor.numel())).collect();
        for (id, name, n) in ids {
            if !name.ends_with("alpha") {
                let noisy: Vec<f64> = model.store.get(id).data().iter().map(|v| v + 0.1 * rng.random_range(-1.0..1.0)).collect();
                model.store.set_data(id, noisy).unwrap();
            } else {
                model.store.set_data(id, vec![0.0; n]).unwrap();
            }
        }
        let b = 1 + case as usize % 3;
        let clips: Vec<ClipSample> = (0..b).map(|_| random_clip(&mut rng, &cfg)).collect();
        let texts: Vec<NarrationSample> = (0..b).map(|_| random_text(&mut rng, &cfg)).collect();
        let clips: Vec<&ClipSample> = clips.iter().collect();
        let texts: Vec<&NarrationSample> = texts.iter().collect();
        let patches = model.patchify(&clips).unwrap();
        let tb = TextBatch::from_samples(&texts).unwrap();
        let fused = model.forward(&patches, &tb, FusionMode::Fused, true).unwrap();
        let dual = model.forward(&patches, &tb, FusionMode::Dual, true).unwrap();
        let diff = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst = worst
            .max(diff(&fused.video_tokens, &dual.video_tokens))
            .max(diff(&fused.text_tokens, &dual.text_tokens))
            .max(diff(fused.video_embed.as_ref().unwrap(), dual.video_embed.as_ref().unwrap()))
            .max(diff(fused.text_embed.as_ref().unwrap(), dual.text_embed.as_ref().unwrap()));
    }
    let el = t0.elapsed();
    let ok = worst <= 1e-9 && el < Duration::from_secs(10);
    report(1, "switch equivalence", ok, format!("max |fused - dual| = {worst:e} over 20 inputs"), el);
    assert!(ok);
}

#[test]
fn c02_gradient_suite() {
    let t0 = Instant::now();
    let mut reports = op_suite(10, 202, 1e-4).unwrap();
    reports.extend(layer_gradchecks(10, 203, 1e-4).unwrap());
    let el = t0.elapsed();
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| format!("{} ({:e})", r.name, r.max_rel_err)).collect();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let names: BTreeSet<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    let has_gates = names.iter().any(|n| n.contains("layer"));
    let ok = failed.is_empty() && has_gates && el < Duration::from_secs(60);
    report(
        2,
        "gradient suite",
        ok,
        format!("{} checks, worst rel-err {worst:e}, failures {failed:?}", names.len()),
        el,
    );
    assert!(ok);
}

fn egonce_oracle(v: &[Vec<f64>], t: &[Vec<f64>], mask: &Mask, tau: f64) -> f64 {
    let n = v.len();
    let s = |i: usize, j: usize| v[i].iter().zip(&t[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
    let mut v2t = 0.0;
    let mut t2v = 0.0;
    for i in 0..n {
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..n {
            den += s(i, j).exp();
            if mask[i][j] {
                num += s(i, j).exp();
            }
        }
        v2t += (num / den).ln();
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..n {
            den += s(j, i).exp();
            if mask[j][i] {
                num += s(j, i).exp();
            }
        }
        t2v += (num / den).ln();
    }
    -(v2t / n as f64) - t2v / n as f64
}

fn tensor_of(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(rows.concat(), &[rows.len(), rows[0].len()]).unwrap()
}

#[test]
fn c03_egonce_oracle() {
    let t0 = Instant::now();
    let lex = Lexicon::standard();
    let mcfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    let mut nontrivial = 0;
    for case in 0..50u64 {
        for rule in [PositiveRule::Or, PositiveRule::And] {
            let n = rng.random_range(2..=8);
            let cc = CorpusConfig {
                n_pairs: n.max(4),
                n_scenarios: 2,
                ..CorpusConfig::default()
            };
            let pairs = generate_corpus(&cc, &mcfg, &lex, case).unwrap();
            let narr: Vec<&NarrationSample> = pairs[..n].iter().map(|p| &p.narration).collect();
            let mask = build_positive_mask(&narr, rule);
            nontrivial += usize::from(mask.iter().flatten().filter(|&&m| m).count() > n);
            let tau = rng.random_range(0.03..1.0);
            let v = unit_rows(&mut rng, n, 6);
            let t = unit_rows(&mut rng, n, 6);
            let got = egonce(&tensor_of(&v), &tensor_of(&t), &mask, tau).unwrap().item();
            worst = worst.max((got - egonce_oracle(&v, &t, &mask, tau)).abs());

            // Same check on the augmented batch with scene negatives.
            let narrations: Vec<NarrationSample> = pairs.iter().map(|p| p.narration.clone()).collect();
            let scen: Vec<usize> = pairs.iter().map(|p| p.clip.scenario_id).collect();
            let base: Vec<usize> = (0..n.min(pairs.len())).collect();
            let lc = LossConfig {
                positive_rule: rule,
                ..LossConfig::default()
            };
            let plan = plan_batch(&base, &narrations, &scen, &lc, case, &mut rng).unwrap();
            let m = plan.positive_mask.len();
            let v = unit_rows(&mut rng, m, 6);
            let t = unit_rows(&mut rng, m, 6);
            let got = egonce(&tensor_of(&v), &tensor_of(&t), &plan.positive_mask, tau).unwrap().item();
            worst = worst.max((got - egonce_oracle(&v, &t, &plan.positive_mask, tau)).abs());
        }
    }
    let v = unit_rows(&mut rng, 1, 6);
    let t = unit_rows(&mut rng, 1, 6);
    let single = egonce(&tensor_of(&v), &tensor_of(&t), &identity_mask(1), 0.07).unwrap().item();
    let el = t0.elapsed();
    let ok = worst <= 1e-9 && single == 0.0 && single.is_sign_positive() && nontrivial > 0 && el < Duration::from_secs(30);
    report(
        3,
        "EgoNCE oracle",
        ok,
        format!("max |module - oracle| = {worst:e} over 200 batches ({nontrivial} with shared positives), N=1 loss = {single}"),
        el,
    );
    assert!(ok);
}

#[test]
fn c04_masking_statistics() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut real, mut selected, mut special_hits) = (0usize, 0usize, 0usize);
    let mut counts = [0usize; 3];
    while real < 120_000 {
        let n_real = rng.random_range(1..=30);
        let mut tokens = vec![CLS];
        tokens.extend((1..n_real).map(|_| rng.random_range(4..64)));
        let mut is_real = vec![true; n_real];
        tokens.resize(30, PAD);
        is_real.resize(30, false);
        let (out, targets) = mask_tokens(&tokens, &is_real, 0.15, 4..64, &mut rng);
        real += n_real - 1;
        selected += targets.len();
        for (pos, orig, action) in targets {
            if tokens[pos] == CLS || tokens[pos] == PAD || !is_real[pos] {
                special_hits += 1;
            }
            assert_eq!(orig, tokens[pos]);
            match action {
                MaskAction::Mask => {
                    assert_eq!(out[pos], MASK);
                    counts[0] += 1;
                }
                MaskAction::Random => counts[1] += 1,
                MaskAction::Keep => {
                    assert_eq!(out[pos], orig);
                    counts[2] += 1;
                }
            }
        }
        assert_eq!(out[0], CLS);
    }
    let rate = selected as f64 / real as f64;
    let split = counts.map(|c| c as f64 / selected as f64);
    let el = t0.elapsed();
    let ok = (rate - 0.15).abs() <= 0.005
        && (split[0] - 0.8).abs() <= 0.01
        && (split[1] - 0.1).abs() <= 0.01
        && (split[2] - 0.1).abs() <= 0.01
        && special_hits == 0;
    report(
        4,
        "masking statistics",
        ok,
        format!("{real} tokens, rate {rate:.4}, split {:.4}/{:.4}/{:.4}, CLS/PAD selected {special_hits}", split[0], split[1], split[2]),
        el,
    );
    assert!(ok);
}

#[test]
fn c05_hard_negative_sampler() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let n = 6;
    let tau = 0.5;
    let sim: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut mask = identity_mask(n);
    mask[0][3] = true;
    mask[3][0] = true;
    mask[2][5] = true;
    mask[5][2] = true;
    let draws = 10_000;
    let mut rows = vec![vec![0usize; n]; n];
    let mut cols = vec![vec![0usize; n]; n];
    let mut positive_drawn = 0;
    for _ in 0..draws {
        let h = sample_hard_negatives(&sim, &mask, tau, &mut rng).unwrap();
        for i in 0..n {
            rows[i][h.text_for_video[i]] += 1;
            cols[i][h.video_for_text[i]] += 1;
            positive_drawn += mask[i][h.text_for_video[i]] as usize + mask[h.video_for_text[i]][i] as usize;
        }
    }
    let mut worst = 0.0f64;
    for i in 0..n {
        for by_row in [true, false] {
            let score = |j: usize| if by_row { sim[i][j] } else { sim[j][i] };
            let pos = |j: usize| if by_row { mask[i][j] } else { mask[j][i] };
            let z: f64 = (0..n).filter(|&j| !pos(j)).map(|j| (score(j) / tau).exp()).sum();
            for j in 0..n {
                let expect = if pos(j) { 0.0 } else { (score(j) / tau).exp() / z };
                let seen = if by_row { rows[i][j] } else { cols[i][j] } as f64 / draws as f64;
                worst = worst.max((seen - expect).abs());
            }
        }
    }
    let el = t0.elapsed();
    let ok = worst <= 0.02 && positive_drawn == 0;
    report(
        5,
        "hard-negative sampler",
        ok,
        format!("max |freq - softmax| = {worst:.4} over {draws} draws, positives drawn {positive_drawn}"),
        el,
    );
    assert!(ok);
}

/// Toy pre-training setup shared by the training criteria.
fn toy_config() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            n_layers: 2,
            n_fused: 1,
            d_model: 32,
            n_heads: 2,
            frames: 4,
            image_size: 32,
            patch_size: 8,
            max_text_len: 10,
            projector_dims: vec![32],
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 20,
            batch_size: 8,
            peak_lr_backbone: 3e-3,
            peak_lr_crossattn: 6e-3,
            peak_lr_heads: 6e-3,
            ..TrainConfig::default()
        },
        seed: 0,
        ..RunConfig::default()
    }
}

#[test]
fn c06_toy_pretraining() {
    let t0 = Instant::now();
    let cfg = toy_config();
    let lex = Lexicon::standard();
    let pairs = generate_corpus(&cfg.corpus, &cfg.model, &lex, cfg.seed).unwrap();
    let (trainer, _) = pretrain(&cfg, &pairs, None).unwrap();
    let model = &trainer.model;

    let held = gallery_corpus(&cfg, &lex, cfg.seed).unwrap();
    let queries: Vec<_> = held.iter().map(|p| &p.narration).collect();
    let gallery: Vec<_> = held.iter().map(|p| &p.clip).collect();
    let scores = retrieve_dual(model, &queries, &gallery).unwrap();
    let r1 = recall_at_k(&scores, &(0..held.len()).collect::<Vec<_>>(), 1);

    let mcq_pairs = mcq_corpus(&cfg, &lex, cfg.seed).unwrap();
    let items = resolve_mcq(&build_mcq(&mcq_pairs, cfg.downstream.mcq_items, cfg.seed).unwrap(), &mcq_pairs).unwrap();
    let results = eval_mcq_modes(model, &items, cfg.downstream.ensemble_minmax).unwrap();
    let acc = |m: ScoreMode| {
        let r = results.iter().find(|(k, _)| *k == m).unwrap().1;
        (r.inter_accuracy * r.n_inter as f64 + r.intra_accuracy * r.n_intra as f64) / (r.n_inter + r.n_intra) as f64
    };
    let (dual, fused, ens) = (acc(ScoreMode::Dual), acc(ScoreMode::Fused), acc(ScoreMode::Ensemble));
    let el = t0.elapsed();
    let ok = r1 >= 0.90 && ens >= dual - 0.02 && el < Duration::from_secs(15 * 60);
    report(
        6,
        "toy pre-training",
        ok,
        format!("{} epochs, held-out R@1 {r1:.3}, MCQ dual {dual:.3} fused {fused:.3} ensemble {ens:.3}", cfg.train.epochs),
        el,
    );
    assert!(ok);
}

#[test]
fn c07_cost_model() {
    let t0 = Instant::now();
    let big = full_scale_config(6);
    let p_in = count_params(&big, Variant::InBackbone) as f64;
    let p_st = count_params(&big, Variant::Stacked) as f64;
    let m_in = count_macs(&big, Variant::InBackbone) as f64;
    let m_st = count_macs(&big, Variant::Stacked) as f64;
    let delta = p_st - p_in;
    let increase = m_st / m_in - 1.0;

    let _g = MACS.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut exact = 0;
    let toys = [
        ModelConfig {
            n_layers: 2,
            n_fused: 1,
            d_model: 16,
            n_heads: 2,
            frames: 2,
            image_size: 16,
            patch_size: 8,
            max_text_len: 6,
            projector_dims: vec![16],
            ..ModelConfig::default()
        },
        ModelConfig {
            n_layers: 3,
            n_fused: 2,
            d_model: 12,
            n_heads: 3,
            frames: 3,
            image_size: 8,
            patch_size: 4,
            max_text_len: 5,
            projector_dims: vec![10, 6],
            ..ModelConfig::default()
        },
        ModelConfig {
            n_layers: 2,
            n_fused: 2,
            d_model: 8,
            n_heads: 1,
            frames: 1,
            image_size: 12,
            patch_size: 6,
            max_text_len: 9,
            projector_dims: vec![8],
            ..ModelConfig::default()
        },
    ];
    let mut mismatches = Vec::new();
    for (k, cfg) in toys.iter().enumerate() {
        let model = Model::new(cfg, k as u64).unwrap();
        let stack = FusionStack::new(cfg, StackedLayout::default(), k as u64).unwrap();
        let clip = random_clip(&mut rng, cfg);
        let text = random_text(&mut rng, cfg);
        let tb = TextBatch::from_samples(&[&text]).unwrap();
        for v in Variant::ALL {
            let tally = instrumented_forward(&model, Some(&stack), &clip, &tb, v).unwrap();
            if tally == count_macs(cfg, v) {
                exact += 1;
            } else {
                mismatches.push(format!("{k}/{}: {tally} vs {}", v.as_str(), count_macs(cfg, v)));
            }
        }
    }
    let el = t0.elapsed();
    let ok = (p_in / 381.6e6 - 1.0).abs() <= 0.05
        && (delta / 33.0e6 - 1.0).abs() <= 0.20
        && (0.40..=0.52).contains(&increase)
        && mismatches.is_empty()
        && el < Duration::from_secs(5);
    report(
        7,
        "cost model",
        ok,
        format!(
            "in-backbone {:.2}M params, stacked delta {:.2}M, MAC increase {:.1}%, analytic = tally on {exact}/9 {mismatches:?}",
            p_in / 1e6,
            delta / 1e6,
            increase * 100.0
        ),
        el,
    );
    assert!(ok);
}

fn segment_scatter(x: &[Vec<f64>], a: usize, b: usize) -> f64 {
    let d = x[0].len();
    let mean: Vec<f64> = (0..d).map(|k| x[a..b].iter().map(|r| r[k]).sum::<f64>() / (b - a) as f64).collect();
    x[a..b].iter().map(|r| r.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>()).sum()
}

/// Exhaustive search over all boundary sets, scatter computed around
/// explicit segment means.
fn brute_segment(x: &[Vec<f64>], max_segments: usize, penalty: f64) -> (Vec<usize>, f64) {
    let n = x.len();
    let mut best = (Vec::new(), f64::INFINITY);
    for set in 0u32..1 << (n - 1) {
        if set.count_ones() as usize + 1 > max_segments {
            continue;
        }
        let b: Vec<usize> = (1..n).filter(|&i| set >> (i - 1) & 1 == 1).collect();
        let mut edges = vec![0];
        edges.extend(&b);
        edges.push(n);
        let obj = edges.windows(2).map(|w| segment_scatter(x, w[0], w[1])).sum::<f64>() + penalty * (edges.len() - 1) as f64 * (n as f64).ln();
        if obj < best.1 - 1e-9 || (obj <= best.1 + 1e-9 && b.len() < best.0.len()) {
            best = (b, obj);
        }
    }
    best
}

#[test]
fn c08_kts() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let normalize = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let mut planted_ok = 0;
    let planted_cases = 30;
    for _ in 0..planted_cases {
        let k = rng.random_range(1..=5);
        let mut lens: Vec<usize> = (0..k).map(|_| rng.random_range(2..=8)).collect();
        lens.iter_mut().for_each(|l| *l = (*l).max(2));
        let mut x = Vec::new();
        let mut truth = Vec::new();
        let mut prev: Option<Vec<f64>> = None;
        for (s, &l) in lens.iter().enumerate() {
            let level = loop {
                let v = normalize((0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
                if prev.as_ref().is_none_or(|p| p.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() < 0.5) {
                    break v;
                }
            };
            if s > 0 {
                truth.push(x.len());
            }
            x.extend(std::iter::repeat_n(level.clone(), l));
            prev = Some(level);
        }
        if kts_segment(&x, 6, 0.01).unwrap() == truth {
            planted_ok += 1;
        }
    }
    let mut exhaustive_ok = 0;
    let mut exhaustive_cases = 0;
    for n in 2..=20usize {
        let cases = if n >= 17 { 1 } else { 3 };
        for _ in 0..cases {
            exhaustive_cases += 1;
            let mut x = Vec::new();
            let mut level = normalize((0..5).map(|_| rng.random_range(-1.0..1.0)).collect());
            for _ in 0..n {
                if rng.random_bool(0.25) {
                    level = normalize((0..5).map(|_| rng.random_range(-1.0..1.0)).collect());
                }
                x.push(normalize(level.iter().map(|v| v + 0.1 * rng.random_range(-1.0..1.0)).collect()));
            }
            let max_segments = rng.random_range(1..=6);
            let penalty = [0.0, 0.02, 0.1][rng.random_range(0..3)];
            let (want, _) = brute_segment(&x, max_segments, penalty);
            if kts_segment(&x, max_segments, penalty).unwrap() == want {
                exhaustive_ok += 1;
            }
        }
    }
    let el = t0.elapsed();
    let ok = planted_ok == planted_cases && exhaustive_ok == exhaustive_cases && el < Duration::from_secs(10);
    report(
        8,
        "KTS",
        ok,
        format!("planted {planted_ok}/{planted_cases}, exhaustive {exhaustive_ok}/{exhaustive_cases} (n ≤ 20)"),
        el,
    );
    assert!(ok);
}

fn brute_matching(w: &[Vec<i64>]) -> i64 {
    let r = w.len();
    let c = w.first().map_or(0, Vec::len);
    // Assign each row to a distinct column or to nothing.
    fn go(w: &[Vec<i64>], row: usize, used: u32, c: usize) -> i64 {
        if row == w.len() {
            return 0;
        }
        let mut best = go(w, row + 1, used, c);
        for j in 0..c {
            if used >> j & 1 == 0 {
                best = best.max(w[row][j] + go(w, row + 1, used | 1 << j, c));
            }
        }
        best
    }
    if r == 0 { 0 } else { go(w, 0, 0, c) }
}

#[test]
fn c09_qfvs_matching() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut agree = 0;
    for _ in 0..200 {
        let (r, c) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let concepts = rng.random_range(1..=5);
        let set = |rng: &mut ChaCha8Rng| -> BTreeSet<usize> { (0..rng.random_range(0..=3)).map(|_| rng.random_range(0..concepts)).collect() };
        let sel: Vec<BTreeSet<usize>> = (0..r).map(|_| set(&mut rng)).collect();
        let refs: Vec<BTreeSet<usize>> = (0..c).map(|_| set(&mut rng)).collect();
        let w: Vec<Vec<i64>> = sel.iter().map(|s| refs.iter().map(|t| s.intersection(t).count() as i64).collect()).collect();
        let (total, _) = max_weight_matching(&w);
        if total == brute_matching(&w) && qfvs_f1(&sel, &refs).matched == total {
            agree += 1;
        }
    }
    let same: Vec<BTreeSet<usize>> = vec![[1, 2].into(), [3].into(), [2, 4, 5].into()];
    let f1 = qfvs_f1(&same, &same).f1;
    let el = t0.elapsed();
    let ok = agree == 200 && f1 == 1.0;
    report(9, "QFVS F1 matching", ok, format!("{agree}/200 match enumeration, identical-sets F1 = {f1}"), el);
    assert!(ok);
}

#[test]
fn c10_determinism() {
    let t0 = Instant::now();
    let mut cfg = toy_config();
    cfg.model.d_model = 16;
    cfg.model.image_size = 16;
    cfg.model.frames = 2;
    cfg.model.projector_dims = vec![16];
    cfg.corpus.n_pairs = 48;
    cfg.train.epochs = 3;
    let pairs = generate_corpus(&cfg.corpus, &cfg.model, &Lexicon::standard(), 5).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (_, ra) = pretrain(&cfg, &pairs, Some(a.path())).unwrap();
    let (_, rb) = pretrain(&cfg, &pairs, Some(b.path())).unwrap();
    let csv_a = std::fs::read(ra.unwrap().loss_csv).unwrap();
    let csv_b = std::fs::read(rb.unwrap().loss_csv).unwrap();
    let identical_runs = csv_a == csv_b;

    let mut straight = Trainer::new(&cfg, pairs.len()).unwrap();
    let total = straight.total_steps();
    straight.run_to(&pairs, total).unwrap();
    let mut first = Trainer::new(&cfg, pairs.len()).unwrap();
    first.run_to(&pairs, total / 2 + 1).unwrap();
    let ckpt = a.path().join("half.bin");
    first.save(&ckpt).unwrap();
    drop(first);
    let mut resumed = Trainer::load(&ckpt, &cfg, pairs.len()).unwrap();
    resumed.run_to(&pairs, total).unwrap();
    let resume_exact = history_csv(&resumed.state.history) == history_csv(&straight.state.history);
    let same_params = straight.model.store.iter().zip(resumed.model.store.iter()).all(|((_, p), (_, q))| p.tensor.data() == q.tensor.data());
    let el = t0.elapsed();
    let ok = identical_runs && resume_exact && same_params;
    report(
        10,
        "determinism",
        ok,
        format!("repeat runs identical: {identical_runs}, resumed trace identical: {resume_exact}, parameters identical: {same_params}"),
        el,
    );
    assert!(ok);
}
