//! Closed-form parameter and multiply-accumulate counts, and the instrumented
//! forwards they are checked against.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::corpus::ClipSample;
use crate::encoders::{Attention, Ffn, LayerNorm, Linear, Projector, TextBatch};
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, GatedCrossAttention, Model};
use crate::rng::{derive_seed, purpose};
use crate::tensor::{mac_tally, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dual,
    InBackbone,
    Stacked,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Dual, Variant::InBackbone, Variant::Stacked];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dual => "dual",
            Variant::InBackbone => "in_backbone",
            Variant::Stacked => "stacked",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which stream(s) the extra fusion layers of the stacked variant update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackedLayout {
    #[default]
    VideoStream,
    TextStream,
    BothStreams,
}

/// One accounted block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCost {
    pub block: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: Variant,
    pub n_fusion_layers: usize,
    pub params: u64,
    pub macs_per_instance: u64,
    pub breakdown: Vec<BlockCost>,
}

impl CostReport {
    fn from_blocks(variant: Variant, m: usize, breakdown: Vec<BlockCost>) -> CostReport {
        CostReport {
            variant,
            n_fusion_layers: m,
            params: breakdown.iter().map(|b| b.params).sum(),
            macs_per_instance: breakdown.iter().map(|b| b.macs).sum(),
            breakdown,
        }
    }
}

fn block(name: &str, params: usize, macs: u64) -> BlockCost {
    BlockCost {
        block: name.to_string(),
        params: params as u64,
        macs,
    }
}

fn ln_params(d: usize) -> usize {
    2 * d
}

fn ffn_params(d: usize, ff: usize) -> usize {
    Linear::num_params(d, ff) + Linear::num_params(ff, d)
}

fn ffn_macs(l: usize, d: usize, ff: usize) -> u64 {
    2 * (l * d * ff) as u64
}

fn projector_macs(d_in: usize, dims: &[usize]) -> u64 {
    let mut prev = d_in;
    let mut total = 0u64;
    for &o in dims {
        total += (prev * o) as u64;
        prev = o;
    }
    total
}

/// Parameters of one extra fusion layer on one stream: self-attention,
/// cross-attention, FFN and three norms.
fn stack_layer_params(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    2 * Attention::num_params(d) + ffn_params(d, cfg.ffn_dim()) + 3 * ln_params(d)
}

fn stack_layer_macs(l_self: usize, l_other: usize, cfg: &ModelConfig) -> u64 {
    let d = cfg.d_model;
    Attention::macs(l_self, l_self, d) + Attention::macs(l_self, l_other, d) + ffn_macs(l_self, d, cfg.ffn_dim())
}

/// Analytic costs of one video-text instance. MACs cover linear projections
/// and attention contractions; the MLM and VTM heads count toward
/// parameters only. The fusion depth is `cfg.n_fused`.
pub fn cost_report(cfg: &ModelConfig, variant: Variant, layout: StackedLayout) -> CostReport {
    let (d, ff) = (cfg.d_model, cfg.ffn_dim());
    let (t, s) = (cfg.frames, cfg.patches_per_frame());
    let lv = cfg.video_tokens();
    let lt = cfg.max_text_len;
    let m = cfg.n_fused;
    let n = cfg.n_layers;
    let v = cfg.vocab_size;

    let video_layer_params = 3 * ln_params(d) + 2 * Attention::num_params(d) + ffn_params(d, ff);
    let video_layer_macs = s as u64 * Attention::macs(t, t, d) + t as u64 * Attention::macs(s + 1, s + 1, d) + ffn_macs(lv, d, ff);
    let text_layer_params = 2 * ln_params(d) + Attention::num_params(d) + ffn_params(d, ff);
    let text_layer_macs = Attention::macs(lt, lt, d) + ffn_macs(lt, d, ff);

    let mut blocks = vec![
        block(
            "video.patch",
            Linear::num_params(cfg.patch_dim(), d) + d + s * d + t * d,
            (t * s * cfg.patch_dim() * d) as u64,
        ),
        block("video.layers", n * video_layer_params, n as u64 * video_layer_macs),
        block("video.ln_final", ln_params(d), 0),
        block(
            "video.projector",
            Projector::num_params(d, &cfg.projector_dims),
            projector_macs(d, &cfg.projector_dims),
        ),
        block("text.embed", v * d + lt * d, 0),
        block("text.layers", n * text_layer_params, n as u64 * text_layer_macs),
        block("text.ln_final", ln_params(d), 0),
        block(
            "text.projector",
            Projector::num_params(d, &cfg.projector_dims),
            projector_macs(d, &cfg.projector_dims),
        ),
        block("heads", Linear::num_params(d, v) + Linear::num_params(2 * d, 1), 0),
    ];
    match variant {
        Variant::Dual => {}
        Variant::InBackbone => {
            let ca = GatedCrossAttention::num_params(d);
            blocks.push(block("video.cross_attention", m * ca, m as u64 * Attention::macs(lv, lt, d)));
            blocks.push(block("text.cross_attention", m * ca, m as u64 * Attention::macs(lt, lv, d)));
        }
        Variant::Stacked => {
            let p = stack_layer_params(cfg);
            if layout != StackedLayout::TextStream {
                blocks.push(block("fusion_stack.video", m * p, m as u64 * stack_layer_macs(lv, lt, cfg)));
            }
            if layout != StackedLayout::VideoStream {
                blocks.push(block("fusion_stack.text", m * p, m as u64 * stack_layer_macs(lt, lv, cfg)));
            }
        }
    }
    CostReport::from_blocks(variant, m, blocks)
}

pub fn count_params(cfg: &ModelConfig, variant: Variant) -> u64 {
    cost_report(cfg, variant, StackedLayout::default()).params
}

pub fn count_macs(cfg: &ModelConfig, variant: Variant) -> u64 {
    cost_report(cfg, variant, StackedLayout::default()).macs_per_instance
}

/// Backbone sized like the published model (ViT-B video tower, RoBERTa-B
/// text tower, three 4096-wide projector layers, 16 frames at 224²).
pub fn full_scale_config(n_fused: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 12,
        n_fused,
        d_model: 768,
        n_heads: 12,
        frames: 16,
        patch_size: 16,
        image_size: 224,
        channels: 3,
        vocab_size: 50265,
        max_text_len: 30,
        projector_dims: vec![4096, 4096, 4096],
        ffn_mult: 4,
        ..ModelConfig::default()
    }
}

/// One extra fusion layer updating a single stream.
#[derive(Debug, Clone)]
pub struct StackLayer {
    pub ln_sa: LayerNorm,
    pub sa: Attention,
    pub ln_ca: LayerNorm,
    pub ca: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: Ffn,
}

impl StackLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(StackLayer {
            ln_sa: LayerNorm::new(store, &format!("{name}.ln_sa"), d, cfg.ln_eps)?,
            sa: Attention::new(store, &format!("{name}.sa"), d, cfg.n_heads, rng)?,
            ln_ca: LayerNorm::new(store, &format!("{name}.ln_ca"), d, cfg.ln_eps)?,
            ca: Attention::new(store, &format!("{name}.ca"), d, cfg.n_heads, rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d, cfg.ln_eps)?,
            ffn: Ffn::new(store, &format!("{name}.ffn"), d, cfg.ffn_dim(), rng)?,
        })
    }

    /// Pre-norm self-attention, cross-attention to `other`, then FFN.
    pub fn forward(&self, s: &ParamStore, x: &Tensor, x_mask: Option<&[bool]>, other: &Tensor, other_mask: Option<&[bool]>) -> Result<Tensor> {
        let u = self.ln_sa.forward(s, x)?;
        let x = x.add(&self.sa.forward(s, &u, &u, x_mask)?)?;
        let x = x.add(&self.ca.forward(s, &self.ln_ca.forward(s, &x)?, other, other_mask)?)?;
        x.add(&self.ffn.forward(s, &self.ln_ffn.forward(s, &x)?)?)
    }
}

/// Fusion layers stacked on top of the dual towers.
#[derive(Debug, Clone)]
pub struct FusionStack {
    pub store: ParamStore,
    pub layout: StackedLayout,
    pub video: Vec<StackLayer>,
    pub text: Vec<StackLayer>,
}

impl FusionStack {
    pub fn new(cfg: &ModelConfig, layout: StackedLayout, seed: u64) -> Result<FusionStack> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[purpose::INIT, 1]));
        let mut video = Vec::new();
        let mut text = Vec::new();
        for k in 0..cfg.n_fused {
            if layout != StackedLayout::TextStream {
                video.push(StackLayer::new(&mut store, &format!("stack.video{k}"), cfg, &mut rng)?);
            }
            if layout != StackedLayout::VideoStream {
                text.push(StackLayer::new(&mut store, &format!("stack.text{k}"), cfg, &mut rng)?);
            }
        }
        Ok(FusionStack { store, layout, video, text })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Updates both streams layer by layer; each stream attends to the
    /// other's state from before the layer.
    pub fn forward(&self, video: &Tensor, text: &Tensor, text_mask: &[bool]) -> Result<(Tensor, Tensor)> {
        let (mut v, mut t) = (video.clone(), text.clone());
        let layers = self.video.len().max(self.text.len());
        for k in 0..layers {
            let nv = match self.video.get(k) {
                Some(l) => l.forward(&self.store, &v, None, &t, Some(text_mask))?,
                None => v.clone(),
            };
            let nt = match self.text.get(k) {
                Some(l) => l.forward(&self.store, &t, Some(text_mask), &v, None)?,
                None => t.clone(),
            };
            v = nv;
            t = nt;
        }
        Ok((v, t))
    }
}

/// Runs the per-instance forward of `variant` on the first clip and text and
/// returns the multiply-accumulate tally. `Stacked` needs `stack`.
pub fn instrumented_forward(model: &Model, stack: Option<&FusionStack>, clip: &ClipSample, text: &TextBatch, variant: Variant) -> Result<u64> {
    if text.batch != 1 {
        return Err(Error::contract("instrumented forward takes a single instance"));
    }
    let patches = model.patchify(&[clip])?;
    let (res, tally) = mac_tally(|| -> Result<()> {
        match variant {
            Variant::Dual => {
                model.forward(&patches, text, FusionMode::Dual, true)?;
            }
            Variant::InBackbone => {
                model.forward(&patches, text, FusionMode::Fused, true)?;
            }
            Variant::Stacked => {
                let stack = stack.ok_or_else(|| Error::contract("stacked forward needs a fusion stack"))?;
                let out = model.forward(&patches, text, FusionMode::Dual, true)?;
                stack.forward(&out.video_tokens, &out.text_tokens, &text.mask)?;
            }
        }
        Ok(())
    })?;
    res?;
    Ok(tally)
}

/// Plain-text comparison table: variant, fusion layers, params, GMACs.
pub fn format_table(reports: &[CostReport]) -> String {
    let mut out = format!("{:<12} {:>13} {:>14} {:>18}\n", "variant", "fusion_layers", "params", "gmacs_per_instance");
    for r in reports {
        out.push_str(&format!(
            "{:<12} {:>13} {:>14} {:>18.6}\n",
            r.variant.as_str(),
            r.n_fusion_layers,
            r.params,
            r.macs_per_instance as f64 / 1e9
        ));
    }
    out
}
