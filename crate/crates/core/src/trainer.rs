//! Three-pass pre-training step, grouped AdamW, schedule and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::config::{RunConfig, TrainConfig};
use crate::corpus::Pair;
use crate::encoders::TextBatch;
use crate::error::{Error, Result, StepDiagnostic};
use crate::fusion::{FusionMode, Model};
use crate::objectives::{self, BatchPlan, HardNegatives, Mask, MaskedBatch};
use crate::rng::{purpose, rng_for};
use crate::tensor::{no_grad, read_archive, write_archive, Archive, ParamGroup, ParamStore, Tensor};

pub const CSV_HEADER: &str = "step,l_ego,l_mlm,l_vtm,total,lr_backbone,lr_cross_attention,lr_head";

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l_ego: f64,
    pub l_mlm: f64,
    pub l_vtm: f64,
    pub total: f64,
    /// Rates used for this update, in `ParamGroup::ALL` order.
    pub lr: [f64; 3],
}

impl LossRecord {
    fn to_row(self) -> [f64; 8] {
        [self.step as f64, self.l_ego, self.l_mlm, self.l_vtm, self.total, self.lr[0], self.lr[1], self.lr[2]]
    }

    fn from_row(r: &[f64]) -> LossRecord {
        LossRecord {
            step: r[0] as usize,
            l_ego: r[1],
            l_mlm: r[2],
            l_vtm: r[3],
            total: r[4],
            lr: [r[5], r[6], r[7]],
        }
    }
}

/// Shortest round-trip formatting, so equal traces give equal bytes.
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            r.step, r.l_ego, r.l_mlm, r.l_vtm, r.total, r.lr[0], r.lr[1], r.lr[2]
        );
    }
    out
}

/// Optimizer moments and bookkeeping.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainState {
    /// Completed updates.
    pub step: usize,
    /// First and second moments, aligned with the parameter store; empty for
    /// frozen parameters.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(store: &ParamStore) -> TrainState {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| if p.trainable { vec![0.0; p.tensor.numel()] } else { Vec::new() })
            .collect();
        TrainState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            history: Vec::new(),
        }
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to
/// `end` at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f64, end: f64) -> f64 {
    let step = step.min(total);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total == warmup {
        return peak;
    }
    let f = (step - warmup) as f64 / (total - warmup) as f64;
    end * f + peak * (1.0 - f)
}

/// Rates for every group at `step`, in `ParamGroup::ALL` order.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, cfg: &TrainConfig) -> [f64; 3] {
    let peaks = [cfg.peak_lr_backbone, cfg.peak_lr_crossattn, cfg.peak_lr_heads];
    peaks.map(|p| lr_at(step, total_steps, warmup_steps, p, cfg.end_lr))
}

fn group_index(g: ParamGroup) -> usize {
    ParamGroup::ALL.iter().position(|&x| x == g).expect("known group")
}

/// One decoupled-decay Adam update on every trainable parameter; a missing
/// gradient counts as zero. `t` is the 1-based update count.
pub fn adamw_update(store: &mut ParamStore, state: &mut TrainState, lr: [f64; 3], cfg: &TrainConfig, t: usize) -> Result<()> {
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = store.param(id);
        if !p.trainable {
            continue;
        }
        let rate = lr[group_index(p.group)];
        let g = p.tensor.grad().unwrap_or_else(|| vec![0.0; p.tensor.numel()]);
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let mut w = p.tensor.to_vec();
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            w[i] = w[i] * (1.0 - rate * cfg.weight_decay) - rate * mh / (vh.sqrt() + cfg.eps);
        }
        store.set_data(id, w)?;
    }
    store.zero_grads();
    Ok(())
}

/// Output of the dual pass.
pub struct EgoOutput {
    pub loss: Tensor,
    /// Detached cosine similarities among the first `n` (base) pairs.
    pub similarity: Vec<Vec<f64>>,
}

/// Pass 1: dual top layers on the augmented batch, then EgoNCE.
pub fn egonce_pass(model: &Model, xv: &Tensor, xt: &Tensor, text_mask: &[bool], plan: &BatchPlan, tau: f64) -> Result<EgoOutput> {
    let out = model.forward_from(xv.clone(), xt.clone(), text_mask, FusionMode::Dual, true)?;
    let (ve, te) = (out.video_embed.expect("projected"), out.text_embed.expect("projected"));
    let loss = objectives::egonce(&ve, &te, &plan.positive_mask, tau)?;
    let n = plan.base_indices.len();
    let d = ve.shape()[1];
    let (vd, td) = (ve.data(), te.data());
    let similarity = (0..n)
        .map(|i| (0..n).map(|j| (0..d).map(|c| vd[i * d + c] * td[j * d + c]).sum()).collect())
        .collect();
    Ok(EgoOutput { loss, similarity })
}

/// Pass 2: fused top layers on base clips with masked text, then MLM.
pub fn mlm_pass(model: &Model, xv: &Tensor, xt_masked: &Tensor, masked: &MaskedBatch) -> Result<Tensor> {
    let out = model.forward_from(xv.clone(), xt_masked.clone(), &masked.text.mask, FusionMode::Fused, false)?;
    objectives::mlm_loss(&out.text_tokens, &masked.targets, &model.mlm_head, &model.store)
}

/// Pairings for the matching pass: positives, then each video with its hard
/// negative text, then each text with its hard negative video.
pub fn vtm_pairs(hard: &HardNegatives) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let n = hard.text_for_video.len();
    let mut vi: Vec<usize> = (0..n).collect();
    let mut ti: Vec<usize> = (0..n).collect();
    vi.extend(0..n);
    ti.extend(&hard.text_for_video);
    vi.extend(&hard.video_for_text);
    ti.extend(0..n);
    let mut labels = vec![1.0; n];
    labels.extend(std::iter::repeat_n(0.0, 2 * n));
    (vi, ti, labels)
}

/// Pass 3: fused top layers on positive and hard-negative pairs, then VTM.
pub fn vtm_pass(model: &Model, xv: &Tensor, xt: &Tensor, text: &TextBatch, hard: &HardNegatives) -> Result<Tensor> {
    let (vi, ti, labels) = vtm_pairs(hard);
    let sel = text.select(&ti);
    let out = model.forward_from(xv.index_select(0, &vi)?, xt.index_select(0, &ti)?, &sel.mask, FusionMode::Fused, false)?;
    objectives::vtm_loss(&model.vtm_logits(&out)?, &labels)
}

/// Everything one step computes before the backward pass.
pub struct StepLosses {
    pub ego: Tensor,
    pub mlm: Tensor,
    pub vtm: Tensor,
    pub plan: BatchPlan,
    pub hard: HardNegatives,
}

/// Number of full batches per epoch (a trailing partial batch is dropped).
pub fn steps_per_epoch(n_pairs: usize, batch_size: usize) -> usize {
    n_pairs / batch_size
}

/// Corpus indices of the batch trained at `step`.
pub fn batch_indices(seed: u64, step: usize, n_pairs: usize, batch_size: usize) -> Vec<usize> {
    let spe = steps_per_epoch(n_pairs, batch_size).max(1);
    let (epoch, b) = (step / spe, step % spe);
    let mut order: Vec<usize> = (0..n_pairs).collect();
    order.shuffle(&mut rng_for(seed, &[purpose::ORDER, epoch as u64]));
    order[b * batch_size..(b + 1) * batch_size].to_vec()
}

/// Forward half of a step: shared bottom layers, then the three passes.
pub fn step_losses(model: &Model, cfg: &RunConfig, pairs: &[Pair], step: usize) -> Result<StepLosses> {
    let seed = cfg.seed;
    let s = step as u64;
    let base = batch_indices(seed, step, pairs.len(), cfg.train.batch_size);
    let narrations: Vec<_> = pairs.iter().map(|p| p.narration.clone()).collect();
    let scenarios: Vec<usize> = pairs.iter().map(|p| p.clip.scenario_id).collect();
    let plan = objectives::plan_batch(&base, &narrations, &scenarios, &cfg.loss, seed, &mut rng_for(seed, &[purpose::SCENE, s]))?;
    let aug = plan.augmented();
    let n = base.len();

    let clips: Vec<_> = aug.iter().map(|&i| &pairs[i].clip).collect();
    let texts: Vec<_> = aug.iter().map(|&i| &pairs[i].narration).collect();
    let text = TextBatch::from_samples(&texts)?;
    let base_rows: Vec<usize> = (0..n).collect();
    let base_text = text.select(&base_rows);
    let masked = objectives::mask_batch(&base_text, cfg.loss.mlm_probability, cfg.model.vocab_size, &mut rng_for(seed, &[purpose::MASK, s]));

    let xv = model.bottom_video(model.embed_video(&model.patchify(&clips)?)?)?;
    let xt = model.bottom_text(model.embed_text(&text)?, &text.mask)?;
    let xt_masked = model.bottom_text(model.embed_text(&masked.text)?, &masked.text.mask)?;
    let (xv_base, xt_base) = if aug.len() > n {
        (xv.index_select(0, &base_rows)?, xt.index_select(0, &base_rows)?)
    } else {
        (xv.clone(), xt.clone())
    };

    let ego = egonce_pass(model, &xv, &xt, &text.mask, &plan, cfg.loss.tau)?;
    let base_mask: Mask = plan.base_mask();
    let hard = objectives::sample_hard_negatives(&ego.similarity, &base_mask, cfg.loss.tau, &mut rng_for(seed, &[purpose::HARD, s]))?;
    let mlm = mlm_pass(model, &xv_base, &xt_masked, &masked)?;
    let vtm = vtm_pass(model, &xv_base, &xt_base, &base_text, &hard)?;
    Ok(StepLosses {
        ego: ego.loss,
        mlm,
        vtm,
        plan,
        hard,
    })
}

fn grad_norms(store: &ParamStore) -> Vec<(String, f64)> {
    store
        .iter()
        .filter_map(|(_, p)| p.tensor.grad().map(|g| (p.name.clone(), g.iter().map(|x| x * x).sum::<f64>().sqrt())))
        .collect()
}

/// Model, optimizer state and the schedule geometry of one run.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub state: TrainState,
    pub n_pairs: usize,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, n_pairs: usize) -> Result<Trainer> {
        cfg.validate()?;
        if steps_per_epoch(n_pairs, cfg.train.batch_size) == 0 {
            return Err(Error::config(
                "train.batch_size",
                format!("{} exceeds the corpus size {n_pairs}", cfg.train.batch_size),
            ));
        }
        let model = Model::new(&cfg.model, cfg.seed)?;
        let state = TrainState::new(&model.store);
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            state,
            n_pairs,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        steps_per_epoch(self.n_pairs, self.cfg.train.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.train.epochs * self.steps_per_epoch()
    }

    pub fn warmup_steps(&self) -> usize {
        self.cfg.train.warmup_epochs * self.steps_per_epoch()
    }

    /// Rates applied by the update that follows `step` completed updates.
    pub fn rates(&self, step: usize) -> [f64; 3] {
        lr_schedule(step + 1, self.total_steps(), self.warmup_steps(), &self.cfg.train)
    }

    /// One full step: three forwards, one backward on the weighted total,
    /// one optimizer update.
    pub fn step(&mut self, pairs: &[Pair]) -> Result<LossRecord> {
        if pairs.len() != self.n_pairs {
            return Err(Error::contract(format!("trainer built for {} pairs, got {}", self.n_pairs, pairs.len())));
        }
        let step = self.state.step;
        let losses = step_losses(&self.model, &self.cfg, pairs, step)?;
        let total = objectives::total_loss(&losses.ego, &losses.mlm, &losses.vtm, &self.cfg.loss)?;
        total.backward()?;
        let norms = grad_norms(&self.model.store);
        if !total.item().is_finite() || norms.iter().any(|(_, n)| !n.is_finite()) {
            self.model.store.zero_grads();
            return Err(Error::NonFinite(Box::new(StepDiagnostic {
                step,
                l_ego: losses.ego.item(),
                l_mlm: losses.mlm.item(),
                l_vtm: losses.vtm.item(),
                grad_norms: norms,
            })));
        }
        let lr = self.rates(step);
        adamw_update(&mut self.model.store, &mut self.state, lr, &self.cfg.train, step + 1)?;
        let rec = LossRecord {
            step,
            l_ego: losses.ego.item(),
            l_mlm: losses.mlm.item(),
            l_vtm: losses.vtm.item(),
            total: total.item(),
            lr,
        };
        self.state.step += 1;
        self.state.history.push(rec);
        Ok(rec)
    }

    /// Runs until `until` updates are complete (capped at the schedule end).
    pub fn run_to(&mut self, pairs: &[Pair], until: usize) -> Result<()> {
        while self.state.step < until.min(self.total_steps()) {
            self.step(pairs)?;
        }
        Ok(())
    }

    pub fn capabilities(&self) -> Capabilities {
        Capabilities {
            dual: true,
            vtm: self.cfg.loss.delta > 0.0,
        }
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::default();
        a.set_meta("config_hash", self.cfg.hash());
        a.set_meta("step", self.state.step);
        a.set_meta("seed", self.cfg.seed);
        a.set_meta("capabilities", self.capabilities());
        for (k, (_, p)) in self.model.store.iter().enumerate() {
            a.push(p.name.clone(), p.tensor.shape(), p.tensor.to_vec());
            if p.trainable {
                a.push(format!("adam.m/{}", p.name), p.tensor.shape(), self.state.m[k].clone());
                a.push(format!("adam.v/{}", p.name), p.tensor.shape(), self.state.v[k].clone());
            }
        }
        let rows: Vec<f64> = self.state.history.iter().flat_map(|r| r.to_row()).collect();
        a.push("history", &[self.state.history.len(), 8], rows);
        a
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_archive(path, &self.to_archive())
    }

    /// Restores model, moments and history; refuses a different config.
    pub fn load(path: &Path, cfg: &RunConfig, n_pairs: usize) -> Result<Trainer> {
        let a = read_archive(path)?;
        let mut t = Trainer::new(cfg, n_pairs)?;
        restore_params(&a, cfg, &mut t.model.store)?;
        for (k, (_, p)) in t.model.store.iter().enumerate() {
            if p.trainable {
                t.state.m[k] = entry_data(&a, &format!("adam.m/{}", p.name), p.tensor.shape())?;
                t.state.v[k] = entry_data(&a, &format!("adam.v/{}", p.name), p.tensor.shape())?;
            }
        }
        let h = a.entry("history").ok_or_else(|| Error::Checkpoint("missing history".into()))?;
        t.state.history = h.data.chunks(8).map(LossRecord::from_row).collect();
        t.state.step = a
            .meta("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing step".into()))?;
        if t.state.history.len() != t.state.step {
            return Err(Error::Checkpoint("history length disagrees with step".into()));
        }
        Ok(t)
    }
}

/// Which scorers a checkpoint supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub dual: bool,
    pub vtm: bool,
}

impl std::fmt::Display for Capabilities {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if self.dual {
            parts.push("dual");
        }
        if self.vtm {
            parts.push("vtm");
        }
        f.write_str(&parts.join(","))
    }
}

impl Capabilities {
    pub fn parse(s: &str) -> Capabilities {
        let has = |k: &str| s.split(',').any(|p| p == k);
        Capabilities {
            dual: has("dual"),
            vtm: has("vtm"),
        }
    }
}

fn entry_data(a: &Archive, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let e = a.entry(name).ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))?;
    if e.shape != shape {
        return Err(Error::Checkpoint(format!("entry `{name}` has shape {:?}, expected {:?}", e.shape, shape)));
    }
    Ok(e.data.clone())
}

fn restore_params(a: &Archive, cfg: &RunConfig, store: &mut ParamStore) -> Result<()> {
    let stored = a.meta("config_hash").unwrap_or("").to_string();
    let current = cfg.hash();
    if stored != current {
        return Err(Error::ConfigHash { stored, current });
    }
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.tensor.shape().to_vec())).collect();
    for (id, name, shape) in ids {
        store.set_data(id, entry_data(a, &name, &shape)?)?;
    }
    Ok(())
}

/// Model weights and capabilities from a checkpoint, for inference.
pub fn load_model(path: &Path, cfg: &RunConfig) -> Result<(Model, Capabilities)> {
    let a = read_archive(path)?;
    let mut model = Model::new(&cfg.model, cfg.seed)?;
    restore_params(&a, cfg, &mut model.store)?;
    let caps = Capabilities::parse(a.meta("capabilities").unwrap_or(""));
    Ok((model, caps))
}

/// Files written by a run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

/// Full training run. With `out_dir`, writes `loss.csv`, the final
/// `checkpoint.bin`, and `checkpoint_epoch{e}.bin` every
/// `checkpoint_every` epochs.
pub fn pretrain(cfg: &RunConfig, pairs: &[Pair], out_dir: Option<&Path>) -> Result<(Trainer, Option<RunArtifacts>)> {
    let mut t = Trainer::new(cfg, pairs.len())?;
    let spe = t.steps_per_epoch();
    for epoch in 1..=cfg.train.epochs {
        t.run_to(pairs, epoch * spe)?;
        if let (Some(dir), e) = (out_dir, cfg.train.checkpoint_every) {
            if e > 0 && epoch % e == 0 && epoch < cfg.train.epochs {
                fs::create_dir_all(dir)?;
                t.save(&dir.join(format!("checkpoint_epoch{epoch}.bin")))?;
            }
        }
    }
    let artifacts = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let art = RunArtifacts {
                checkpoint: dir.join("checkpoint.bin"),
                loss_csv: dir.join("loss.csv"),
            };
            t.save(&art.checkpoint)?;
            fs::write(&art.loss_csv, history_csv(&t.state.history))?;
            Some(art)
        }
        None => None,
    };
    Ok((t, artifacts))
}

/// Mean loss of the first batch under the current weights, without updating.
pub fn probe_loss(trainer: &Trainer, pairs: &[Pair], step: usize) -> Result<f64> {
    no_grad(|| {
        let l = step_losses(&trainer.model, &trainer.cfg, pairs, step)?;
        Ok(objectives::total_loss(&l.ego, &l.mlm, &l.vtm, &trainer.cfg.loss)?.item())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{CorpusConfig, ModelConfig};
    use crate::corpus::{generate_corpus, Lexicon};

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            n_layers: 2,
            n_fused: 1,
            d_model: 16,
            n_heads: 2,
            frames: 2,
            image_size: 16,
            patch_size: 8,
            max_text_len: 8,
            projector_dims: vec![16, 16],
            ..ModelConfig::default()
        };
        cfg.corpus = CorpusConfig {
            n_pairs: 24,
            n_scenarios: 4,
            ..CorpusConfig::default()
        };
        cfg.train.batch_size = 6;
        cfg.train.epochs = 3;
        cfg.train.warmup_epochs = 1;
        cfg.seed = 5;
        cfg
    }

    fn corpus(cfg: &RunConfig) -> Vec<Pair> {
        generate_corpus(&cfg.corpus, &cfg.model, &Lexicon::standard(), cfg.seed).unwrap()
    }

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("video.w", vec![w], &[1]).unwrap();
        s
    }

    #[test]
    fn adamw_single_step_oracle() {
        let mut s = scalar_store(1.0);
        let id = s.id("video.w").unwrap();
        s.get(id).accumulate(&[1.0]);
        let mut st = TrainState::new(&s);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        adamw_update(&mut s, &mut st, [0.1; 3], &cfg, 1).unwrap();
        assert!((s.get(id).item() - 0.9).abs() < 1e-8);
        assert!(s.get(id).grad().is_none_or(|g| g == [0.0]));
    }

    #[test]
    fn adamw_zero_gradient_and_decay() {
        let mut s = scalar_store(2.0);
        let mut st = TrainState::new(&s);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        adamw_update(&mut s, &mut st, [0.1; 3], &cfg, 1).unwrap();
        assert_eq!(s.by_name("video.w").unwrap().tensor.item(), 2.0);
        let cfg = TrainConfig {
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        adamw_update(&mut s, &mut st, [0.1; 3], &cfg, 2).unwrap();
        assert_eq!(s.by_name("video.w").unwrap().tensor.item(), 2.0 * (1.0 - 0.001));
    }

    #[test]
    fn adamw_uses_group_rates_and_skips_frozen() {
        let mut s = ParamStore::new();
        let a = s.add("video.layer0.attn_t.q.weight", vec![1.0], &[1]).unwrap();
        let b = s.add("video.layer0.ca.attn.q.weight", vec![1.0], &[1]).unwrap();
        let c = s.add("heads.vtm.weight", vec![1.0], &[1]).unwrap();
        let f = s.add_frozen("video.layer0.ca.alpha", vec![0.5], &[]).unwrap();
        for id in [a, b, c] {
            s.get(id).accumulate(&[1.0]);
        }
        let mut st = TrainState::new(&s);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        adamw_update(&mut s, &mut st, [0.1, 0.2, 0.3], &cfg, 1).unwrap();
        for (id, lr) in [(a, 0.1), (b, 0.2), (c, 0.3)] {
            assert!((s.get(id).item() - (1.0 - lr)).abs() < 1e-7);
        }
        assert_eq!(s.get(f).item(), 0.5);
    }

    #[test]
    fn schedule_endpoints_and_shape() {
        let cfg = TrainConfig::default();
        let (total, warm) = (100, 10);
        assert_eq!(lr_schedule(0, total, warm, &cfg), [0.0; 3]);
        assert_eq!(lr_schedule(warm, total, warm, &cfg), [cfg.peak_lr_backbone, cfg.peak_lr_crossattn, cfg.peak_lr_heads]);
        assert_eq!(lr_schedule(total, total, warm, &cfg), [cfg.end_lr; 3]);
        let lrs: Vec<f64> = (0..=total).map(|s| lr_schedule(s, total, warm, &cfg)[0]).collect();
        assert!(lrs[..=warm].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[warm..].windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..4).flat_map(|b| batch_indices(3, 4 + b, 26, 6)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 24);
        assert_ne!(batch_indices(3, 0, 26, 6), batch_indices(3, 4, 26, 6));
        assert_eq!(batch_indices(3, 1, 26, 6), batch_indices(3, 1, 26, 6));
    }

    #[test]
    fn vtm_pairs_layout() {
        let hn = HardNegatives {
            text_for_video: vec![2, 0, 1],
            video_for_text: vec![1, 2, 0],
            warnings: vec![],
        };
        let (v, t, y) = vtm_pairs(&hn);
        assert_eq!(v, vec![0, 1, 2, 0, 1, 2, 1, 2, 0]);
        assert_eq!(t, vec![0, 1, 2, 2, 0, 1, 0, 1, 2]);
        assert_eq!(y, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dual_pass_leaves_cross_attention_untouched() {
        let cfg = tiny();
        let pairs = corpus(&cfg);
        let model = Model::new(&cfg.model, cfg.seed).unwrap();
        let l = step_losses(&model, &cfg, &pairs, 0).unwrap();
        l.ego.backward().unwrap();
        for (_, p) in model.store.iter() {
            let g = p.tensor.grad().map(|g| g.iter().any(|&x| x != 0.0)).unwrap_or(false);
            match p.group {
                ParamGroup::CrossAttention => assert!(!g, "{} got gradient from the dual pass", p.name),
                ParamGroup::Backbone if p.name.starts_with("video.layer") => assert!(g, "{} has no gradient", p.name),
                _ => {}
            }
        }
        model.store.zero_grads();
        l.mlm.add(&l.vtm).unwrap().backward().unwrap();
        let ca_live = model
            .store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::CrossAttention)
            .any(|(_, p)| p.tensor.grad().is_some_and(|g| g.iter().any(|&x| x != 0.0)));
        assert!(ca_live);
    }

    #[test]
    fn joint_backward_equals_weighted_sum() {
        let cfg = tiny();
        let pairs = corpus(&cfg);
        let model = Model::new(&cfg.model, cfg.seed).unwrap();
        let l = step_losses(&model, &cfg, &pairs, 2).unwrap();
        objectives::total_loss(&l.ego, &l.mlm, &l.vtm, &cfg.loss).unwrap().backward().unwrap();
        let joint: Vec<Vec<f64>> = model.store.iter().map(|(_, p)| p.tensor.grad().unwrap_or_default()).collect();
        model.store.zero_grads();
        let w = [1.0 - cfg.loss.gamma - cfg.loss.delta, cfg.loss.gamma, cfg.loss.delta];
        for k in 0..3 {
            let l = step_losses(&model, &cfg, &pairs, 2).unwrap();
            [l.ego, l.mlm, l.vtm][k].scale(w[k]).backward().unwrap();
        }
        for ((_, p), j) in model.store.iter().zip(&joint) {
            let s = p.tensor.grad().unwrap_or_default();
            let n = j.len().max(s.len());
            for i in 0..n {
                let (a, b) = (j.get(i).copied().unwrap_or(0.0), s.get(i).copied().unwrap_or(0.0));
                assert!((a - b).abs() <= 1e-10, "{}: {a} vs {b}", p.name);
            }
        }
    }

    #[test]
    fn zero_weights_reduce_to_contrastive_step() {
        let mut cfg = tiny();
        cfg.loss.gamma = 0.0;
        cfg.loss.delta = 0.0;
        let pairs = corpus(&cfg);
        let mut t = Trainer::new(&cfg, pairs.len()).unwrap();
        t.step(&pairs).unwrap();

        let mut model = Model::new(&cfg.model, cfg.seed).unwrap();
        let mut st = TrainState::new(&model.store);
        step_losses(&model, &cfg, &pairs, 0).unwrap().ego.backward().unwrap();
        adamw_update(&mut model.store, &mut st, t.rates(0), &cfg.train, 1).unwrap();
        for ((_, a), (_, b)) in t.model.store.iter().zip(model.store.iter()) {
            assert_eq!(a.tensor.to_vec(), b.tensor.to_vec(), "{}", a.name);
        }
    }

    #[test]
    fn runs_are_bitwise_repeatable_and_resumable() {
        let cfg = tiny();
        let pairs = corpus(&cfg);
        let (a, _) = pretrain(&cfg, &pairs, None).unwrap();
        let (b, _) = pretrain(&cfg, &pairs, None).unwrap();
        assert_eq!(history_csv(&a.state.history), history_csv(&b.state.history));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.bin");
        let mut c = Trainer::new(&cfg, pairs.len()).unwrap();
        c.run_to(&pairs, 5).unwrap();
        c.save(&path).unwrap();
        let mut d = Trainer::load(&path, &cfg, pairs.len()).unwrap();
        assert_eq!(d.state, c.state);
        assert_eq!(d.model.alphas(), c.model.alphas());
        d.run_to(&pairs, usize::MAX).unwrap();
        assert_eq!(history_csv(&d.state.history), history_csv(&a.state.history));
    }

    #[test]
    fn checkpoint_refuses_other_config_and_corruption() {
        let cfg = tiny();
        let pairs = corpus(&cfg);
        let mut t = Trainer::new(&cfg, pairs.len()).unwrap();
        t.step(&pairs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        t.save(&path).unwrap();
        let mut other = cfg.clone();
        other.loss.tau = 0.07;
        match Trainer::load(&path, &other, pairs.len()) {
            Err(Error::ConfigHash { stored, current }) => {
                assert_eq!(stored, cfg.hash());
                assert_eq!(current, other.hash());
            }
            other => panic!("expected a hash refusal, got {:?}", other.err()),
        }
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Trainer::load(&path, &cfg, pairs.len()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn one_step_opens_the_gates() {
        let cfg = tiny();
        let pairs = corpus(&cfg);
        let mut t = Trainer::new(&cfg, pairs.len()).unwrap();
        t.step(&pairs).unwrap();
        assert!(t.model.alphas().iter().any(|(_, a)| *a != 0.0));
    }

    #[test]
    fn non_finite_loss_reports_the_step() {
        let mut cfg = tiny();
        cfg.train.peak_lr_backbone = 1e300;
        cfg.train.peak_lr_heads = 1e300;
        cfg.train.warmup_epochs = 0;
        let pairs = corpus(&cfg);
        let mut t = Trainer::new(&cfg, pairs.len()).unwrap();
        let err = (0..5).map(|_| t.step(&pairs)).find_map(|r| r.err()).expect("training diverges");
        match err {
            Error::NonFinite(d) => assert!(d.step >= 1 && !d.grad_norms.is_empty()),
            e => panic!("{e}"),
        }
    }
}
