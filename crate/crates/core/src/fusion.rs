//! Gated cross-attention in the top layers of both towers and the full
//! two-tower model.
//!
//! Inside fused layer `k` the video layer runs first and the text layer
//! attends to its output:
//!
//! ```text
//! z      = SpaceTime(x_vid)
//! x_vid' = x_vid + z + α_v · CA(z, x_text)          then FFN
//! x̂      = SA(x_text)
//! x_txt' = x_text + x̂ + α_t · CA(x̂, x_vid')         then FFN
//! ```
//!
//! In dual mode the cross-attention branches are not evaluated at all.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, NormPlacement};
use crate::encoders::{
    dims3, patchify, residual, Attention, Ffn, LayerNorm, Linear, PatchEmbed, Projector, SpaceTimeBlock, TextBatch, TextBlock,
    TextEmbed,
};
use crate::corpus::ClipSample;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, purpose};
use crate::tensor::gradcheck::{gradcheck_params, GradcheckReport};
use crate::tensor::{concat, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Dual,
    Fused,
}

/// `α · CA(LN_q(query), LN_kv(context))`.
#[derive(Debug, Clone)]
pub struct GatedCrossAttention {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: Attention,
    pub alpha: ParamId,
    pub learnable: bool,
}

impl GatedCrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d_model;
        let ln_q = LayerNorm::new(store, &format!("{name}.ln_q"), d, cfg.ln_eps)?;
        let ln_kv = LayerNorm::new(store, &format!("{name}.ln_kv"), d, cfg.ln_eps)?;
        let attn = Attention::new(store, &format!("{name}.attn"), d, cfg.n_heads, rng)?;
        let alpha_name = format!("{name}.alpha");
        let (alpha, learnable) = match cfg.fixed_alpha {
            None => (store.add(&alpha_name, vec![0.0], &[])?, true),
            Some(v) => (store.add_frozen(&alpha_name, vec![v], &[])?, false),
        };
        Ok(GatedCrossAttention {
            ln_q,
            ln_kv,
            attn,
            alpha,
            learnable,
        })
    }

    /// The ungated cross-attention output.
    pub fn attend(&self, s: &ParamStore, query: &Tensor, context: &Tensor, context_mask: Option<&[bool]>) -> Result<Tensor> {
        let q = self.ln_q.forward(s, query)?;
        let kv = self.ln_kv.forward(s, context)?;
        self.attn.forward(s, &q, &kv, context_mask)
    }

    pub fn forward(&self, s: &ParamStore, query: &Tensor, context: &Tensor, context_mask: Option<&[bool]>) -> Result<Tensor> {
        self.attend(s, query, context, context_mask)?.mul(s.get(self.alpha))
    }

    pub fn num_params(d: usize) -> usize {
        2 * 2 * d + Attention::num_params(d) + 1
    }
}

#[derive(Debug, Clone)]
pub struct VideoLayer {
    pub st: SpaceTimeBlock,
    pub ln_ffn: LayerNorm,
    pub ffn: Ffn,
    pub ca: Option<GatedCrossAttention>,
    norm: NormPlacement,
}

#[derive(Debug, Clone)]
pub struct TextLayer {
    pub sa: TextBlock,
    pub ln_ffn: LayerNorm,
    pub ffn: Ffn,
    pub ca: Option<GatedCrossAttention>,
    norm: NormPlacement,
}

/// Output of video layer `layer`; the text layer of the same index consumes it.
#[derive(Debug, Clone)]
pub struct VideoLayerOutput {
    pub layer: usize,
    pub tokens: Tensor,
}

/// Text context handed to a fused video layer.
#[derive(Debug, Clone, Copy)]
pub struct TextContext<'a> {
    pub tokens: &'a Tensor,
    pub mask: &'a [bool],
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, T·S+1, d]` after the final norm.
    pub video_tokens: Tensor,
    /// `[B, L, d]` after the final norm.
    pub text_tokens: Tensor,
    pub video_embed: Option<Tensor>,
    pub text_embed: Option<Tensor>,
}

impl ForwardOutput {
    pub fn video_cls(&self) -> Result<Tensor> {
        pooled(&self.video_tokens)
    }

    pub fn text_cls(&self) -> Result<Tensor> {
        pooled(&self.text_tokens)
    }
}

/// Token 0 of every sequence, `[B, L, d] -> [B, d]`.
pub fn pooled(tokens: &Tensor) -> Result<Tensor> {
    let (b, _, d) = dims3("pooled", tokens)?;
    tokens.index_select(1, &[0])?.reshape(&[b, d])
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub patch: PatchEmbed,
    pub video_layers: Vec<VideoLayer>,
    pub video_ln: LayerNorm,
    pub video_proj: Projector,
    pub text_embed: TextEmbed,
    pub text_layers: Vec<TextLayer>,
    pub text_ln: LayerNorm,
    pub text_proj: Projector,
    pub mlm_head: Linear,
    pub vtm_head: Linear,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[purpose::INIT]));
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let s = &mut store;

        let patch = PatchEmbed::new(s, "video.patch", cfg, &mut rng)?;
        let mut video_layers = Vec::with_capacity(cfg.n_layers);
        for k in 0..cfg.n_layers {
            let name = format!("video.layer{k}");
            video_layers.push(VideoLayer {
                st: SpaceTimeBlock::new(s, &name, cfg, &mut rng)?,
                ln_ffn: LayerNorm::new(s, &format!("{name}.ln_ffn"), d, cfg.ln_eps)?,
                ffn: Ffn::new(s, &format!("{name}.ffn"), d, cfg.ffn_dim(), &mut rng)?,
                ca: if k >= cfg.first_fused() {
                    Some(GatedCrossAttention::new(s, &format!("{name}.ca"), cfg, &mut rng)?)
                } else {
                    None
                },
                norm: cfg.norm,
            });
        }
        let video_ln = LayerNorm::new(s, "video.ln_final", d, cfg.ln_eps)?;
        let video_proj = Projector::new(s, "video.projector", d, &cfg.projector_dims, &mut rng)?;

        let text_embed = TextEmbed::new(s, "text.embed", cfg, &mut rng)?;
        let mut text_layers = Vec::with_capacity(cfg.n_layers);
        for k in 0..cfg.n_layers {
            let name = format!("text.layer{k}");
            text_layers.push(TextLayer {
                sa: TextBlock::new(s, &name, cfg, &mut rng)?,
                ln_ffn: LayerNorm::new(s, &format!("{name}.ln_ffn"), d, cfg.ln_eps)?,
                ffn: Ffn::new(s, &format!("{name}.ffn"), d, cfg.ffn_dim(), &mut rng)?,
                ca: if k >= cfg.first_fused() {
                    Some(GatedCrossAttention::new(s, &format!("{name}.ca"), cfg, &mut rng)?)
                } else {
                    None
                },
                norm: cfg.norm,
            });
        }
        let text_ln = LayerNorm::new(s, "text.ln_final", d, cfg.ln_eps)?;
        let text_proj = Projector::new(s, "text.projector", d, &cfg.projector_dims, &mut rng)?;

        let mlm_head = Linear::new(s, "heads.mlm", d, cfg.vocab_size, &mut rng)?;
        let vtm_head = Linear::zeros(s, "heads.vtm", 2 * d, 1)?;

        Ok(Model {
            cfg: cfg.clone(),
            store,
            patch,
            video_layers,
            video_ln,
            video_proj,
            text_embed,
            text_layers,
            text_ln,
            text_proj,
            mlm_head,
            vtm_head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Every gate as (name, value).
    pub fn alphas(&self) -> Vec<(String, f64)> {
        self.video_layers
            .iter()
            .filter_map(|l| l.ca.as_ref())
            .chain(self.text_layers.iter().filter_map(|l| l.ca.as_ref()))
            .map(|ca| (self.store.param(ca.alpha).name.clone(), self.store.get(ca.alpha).item()))
            .collect()
    }

    pub fn patchify(&self, clips: &[&ClipSample]) -> Result<Tensor> {
        patchify(clips, &self.cfg)
    }

    pub fn embed_video(&self, patches: &Tensor) -> Result<Tensor> {
        self.patch.forward(&self.store, patches)
    }

    pub fn embed_text(&self, text: &TextBatch) -> Result<Tensor> {
        self.text_embed.forward(&self.store, text)
    }

    /// Video layer `k`. In fused mode a fused layer needs the text tokens
    /// from the previous text layer.
    pub fn video_layer(&self, k: usize, x: &Tensor, text: Option<TextContext<'_>>, mode: FusionMode) -> Result<VideoLayerOutput> {
        let s = &self.store;
        let layer = self.video_layers.get(k).ok_or(Error::Index {
            op: "video_layer",
            index: k,
            extent: self.video_layers.len(),
        })?;
        let z = layer.st.forward(s, x)?;
        let mut h = x.add(&z)?;
        if let (FusionMode::Fused, Some(ca)) = (mode, &layer.ca) {
            let text = text.ok_or_else(|| Error::contract(format!("fused video layer {k} needs the text tower")))?;
            h = h.add(&ca.forward(s, &z, text.tokens, Some(text.mask))?)?;
        }
        let tokens = residual(layer.norm, &layer.ln_ffn, s, &h, |u| layer.ffn.forward(s, u))?;
        Ok(VideoLayerOutput { layer: k, tokens })
    }

    /// Text layer `k`. In fused mode a fused layer needs the output of video
    /// layer `k`.
    pub fn text_layer(&self, k: usize, x: &Tensor, mask: &[bool], video: Option<&VideoLayerOutput>, mode: FusionMode) -> Result<Tensor> {
        let s = &self.store;
        let layer = self.text_layers.get(k).ok_or(Error::Index {
            op: "text_layer",
            index: k,
            extent: self.text_layers.len(),
        })?;
        let x_hat = layer.sa.forward(s, x, mask)?;
        let mut h = x.add(&x_hat)?;
        if let (FusionMode::Fused, Some(ca)) = (mode, &layer.ca) {
            let video = video.ok_or_else(|| Error::contract(format!("fused text layer {k} called before video layer {k}")))?;
            if video.layer != k {
                return Err(Error::contract(format!(
                    "fused text layer {k} received the output of video layer {}",
                    video.layer
                )));
            }
            h = h.add(&ca.forward(s, &x_hat, &video.tokens, None)?)?;
        }
        if layer.norm == NormPlacement::Post {
            h = layer.sa.ln.forward(s, &h)?;
        }
        residual(layer.norm, &layer.ln_ffn, s, &h, |u| layer.ffn.forward(s, u))
    }

    /// Layers `0..N-M` of the video tower.
    pub fn bottom_video(&self, mut x: Tensor) -> Result<Tensor> {
        for k in 0..self.cfg.first_fused() {
            x = self.video_layer(k, &x, None, FusionMode::Dual)?.tokens;
        }
        Ok(x)
    }

    pub fn bottom_text(&self, mut x: Tensor, mask: &[bool]) -> Result<Tensor> {
        for k in 0..self.cfg.first_fused() {
            x = self.text_layer(k, &x, mask, None, FusionMode::Dual)?;
        }
        Ok(x)
    }

    /// Layers `N-M..N` of both towers, video first within each layer.
    pub fn top(&self, mut xv: Tensor, mut xt: Tensor, mask: &[bool], mode: FusionMode) -> Result<(Tensor, Tensor)> {
        for k in self.cfg.first_fused()..self.cfg.n_layers {
            let v = self.video_layer(k, &xv, Some(TextContext { tokens: &xt, mask }), mode)?;
            xt = self.text_layer(k, &xt, mask, Some(&v), mode)?;
            xv = v.tokens;
        }
        Ok((xv, xt))
    }

    /// Top layers of the video tower alone (dual mode).
    pub fn top_video(&self, mut xv: Tensor) -> Result<Tensor> {
        for k in self.cfg.first_fused()..self.cfg.n_layers {
            xv = self.video_layer(k, &xv, None, FusionMode::Dual)?.tokens;
        }
        Ok(xv)
    }

    pub fn top_text(&self, mut xt: Tensor, mask: &[bool]) -> Result<Tensor> {
        for k in self.cfg.first_fused()..self.cfg.n_layers {
            xt = self.text_layer(k, &xt, mask, None, FusionMode::Dual)?;
        }
        Ok(xt)
    }

    pub fn final_video(&self, x: &Tensor) -> Result<Tensor> {
        self.video_ln.forward(&self.store, x)
    }

    pub fn final_text(&self, x: &Tensor) -> Result<Tensor> {
        self.text_ln.forward(&self.store, x)
    }

    pub fn project_video(&self, tokens: &Tensor) -> Result<Tensor> {
        self.video_proj.forward(&self.store, &pooled(tokens)?)
    }

    pub fn project_text(&self, tokens: &Tensor) -> Result<Tensor> {
        self.text_proj.forward(&self.store, &pooled(tokens)?)
    }

    /// Unit-norm video embeddings from the dual video tower alone.
    pub fn encode_video(&self, patches: &Tensor) -> Result<Tensor> {
        let x = self.top_video(self.bottom_video(self.embed_video(patches)?)?)?;
        self.project_video(&self.final_video(&x)?)
    }

    pub fn encode_text(&self, text: &TextBatch) -> Result<Tensor> {
        let x = self.top_text(self.bottom_text(self.embed_text(text)?, &text.mask)?, &text.mask)?;
        self.project_text(&self.final_text(&x)?)
    }

    /// Both towers on paired inputs. `project` adds the unit-norm embeddings.
    pub fn forward(&self, patches: &Tensor, text: &TextBatch, mode: FusionMode, project: bool) -> Result<ForwardOutput> {
        let xv = self.bottom_video(self.embed_video(patches)?)?;
        let xt = self.bottom_text(self.embed_text(text)?, &text.mask)?;
        self.forward_from(xv, xt, &text.mask, mode, project)
    }

    /// Continues from bottom-layer outputs.
    pub fn forward_from(&self, xv: Tensor, xt: Tensor, mask: &[bool], mode: FusionMode, project: bool) -> Result<ForwardOutput> {
        if xv.shape()[0] != xt.shape()[0] {
            return Err(Error::Shape {
                op: "forward",
                lhs: xv.shape().to_vec(),
                rhs: xt.shape().to_vec(),
            });
        }
        let (xv, xt) = self.top(xv, xt, mask, mode)?;
        let video_tokens = self.final_video(&xv)?;
        let text_tokens = self.final_text(&xt)?;
        let (video_embed, text_embed) = if project {
            (Some(self.project_video(&video_tokens)?), Some(self.project_text(&text_tokens)?))
        } else {
            (None, None)
        };
        Ok(ForwardOutput {
            video_tokens,
            text_tokens,
            video_embed,
            text_embed,
        })
    }

    /// VTM logits `[B]` from fused outputs.
    pub fn vtm_logits(&self, out: &ForwardOutput) -> Result<Tensor> {
        let joint = concat(&[out.video_cls()?, out.text_cls()?], 1)?;
        let b = joint.shape()[0];
        self.vtm_head.forward(&self.store, &joint)?.reshape(&[b])
    }

    /// MLM logits `[B, L, V]` from fused text tokens.
    pub fn mlm_logits(&self, text_tokens: &Tensor) -> Result<Tensor> {
        self.mlm_head.forward(&self.store, text_tokens)
    }
}

/// Finite-difference checks of one fused video layer and one fused text
/// layer with non-zero gates, over every parameter including the gates.
pub fn layer_gradchecks(points: usize, seed: u64, tolerance: f64) -> Result<Vec<GradcheckReport>> {
    let cfg = ModelConfig {
        n_layers: 1,
        n_fused: 1,
        d_model: 8,
        n_heads: 2,
        frames: 2,
        image_size: 8,
        patch_size: 4,
        vocab_size: 16,
        max_text_len: 4,
        projector_dims: vec![4],
        ffn_mult: 2,
        ..ModelConfig::default()
    };
    let mut video_runs = Vec::new();
    let mut text_runs = Vec::new();
    for p in 0..points {
        let pseed = derive_seed(seed, &[p as u64]);
        let mut model = Model::new(&cfg, pseed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(pseed);
        for ca in [&model.video_layers[0].ca, &model.text_layers[0].ca] {
            let id = ca.as_ref().expect("fused layer").alpha;
            let v = rand::Rng::random_range(&mut rng, 0.3..1.2);
            model.store.set_data(id, vec![v])?;
        }
        let rand = |rng: &mut ChaCha8Rng, shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new((0..n).map(|_| rand::Rng::random_range(rng, -1.0..1.0)).collect(), shape)
        };
        let xv = rand(&mut rng, &[2, cfg.video_tokens(), 8])?;
        let xt = rand(&mut rng, &[2, 4, 8])?;
        let mask = [true, true, true, false, true, true, false, false];
        let m = &model;
        video_runs.push(gradcheck_params(
            "fused_video_layer",
            &model.store,
            |s| {
                let mm = Model { store: s.clone(), ..m.clone() };
                Ok(mm.video_layer(0, &xv, Some(TextContext { tokens: &xt, mask: &mask }), FusionMode::Fused)?.tokens)
            },
            tolerance,
            pseed,
            8,
        )?);
        let vout = VideoLayerOutput { layer: 0, tokens: xv.clone() };
        text_runs.push(gradcheck_params(
            "fused_text_layer",
            &model.store,
            |s| {
                let mm = Model { store: s.clone(), ..m.clone() };
                mm.text_layer(0, &xt, &mask, Some(&vout), FusionMode::Fused)
            },
            tolerance,
            pseed ^ 1,
            8,
        )?);
    }
    Ok(vec![
        GradcheckReport::merge("fused_video_layer", &video_runs),
        GradcheckReport::merge("fused_text_layer", &text_runs),
    ])
}
