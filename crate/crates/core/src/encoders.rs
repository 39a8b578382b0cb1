//! Building blocks of the two towers: linear/LN/attention/FFN, the divided
//! space-time block of the video tower, the self-attention block of the text
//! tower, input embeddings and contrastive projectors.

use rand::Rng;

use crate::config::{ModelConfig, NormPlacement};
use crate::corpus::{ClipSample, NarrationSample};
use crate::error::{Error, Result};
use crate::tensor::{concat, embedding_lookup, ParamId, ParamStore, Tensor};

const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights drawn from N(0, 1/sqrt(d_in)), zero bias.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let weight = store.add_normal(&format!("{name}.weight"), &[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng)?;
        let bias = store.add_const(&format!("{name}.bias"), &[d_out], 0.0)?;
        Ok(Linear { weight, bias, d_in, d_out })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.add_const(&format!("{name}.weight"), &[d_in, d_out], 0.0)?;
        let bias = store.add_const(&format!("{name}.bias"), &[d_out], 0.0)?;
        Ok(Linear { weight, bias, d_in, d_out })
    }

    /// `[.., d_in] -> [.., d_out]`.
    pub fn forward(&self, s: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.matmul(s.get(self.weight))?.add(s.get(self.bias))
    }

    pub fn num_params(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, eps: f64) -> Result<Self> {
        let gain = store.add_const(&format!("{name}.gain"), &[d], 1.0)?;
        let bias = store.add_const(&format!("{name}.bias"), &[d], 0.0)?;
        Ok(LayerNorm { gain, bias, eps })
    }

    pub fn forward(&self, s: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(s.get(self.gain), s.get(self.bias), self.eps)
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, n_heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, rng)?,
            n_heads,
        })
    }

    /// `xq: [B, Lq, d]`, `xkv: [B, Lk, d]`. `key_mask` (length `B·Lk`, true
    /// for attendable keys) hides padded keys from every query.
    pub fn forward(&self, s: &ParamStore, xq: &Tensor, xkv: &Tensor, key_mask: Option<&[bool]>) -> Result<Tensor> {
        let (b, lq, d) = dims3("attention", xq)?;
        let (bk, lk, dk) = dims3("attention", xkv)?;
        if bk != b || dk != d {
            return Err(Error::Shape {
                op: "attention",
                lhs: xq.shape().to_vec(),
                rhs: xkv.shape().to_vec(),
            });
        }
        let h = self.n_heads;
        let hd = d / h;
        let q = self.q.forward(s, xq)?.reshape(&[b, lq, h, hd])?.permute(&[0, 2, 1, 3])?;
        let k = self.k.forward(s, xkv)?.reshape(&[b, lk, h, hd])?.permute(&[0, 2, 3, 1])?;
        let v = self.v.forward(s, xkv)?.reshape(&[b, lk, h, hd])?.permute(&[0, 2, 1, 3])?;
        let mut scores = q.matmul(&k)?.scale(1.0 / (hd as f64).sqrt());
        if let Some(mask) = key_mask {
            if mask.len() != b * lk {
                return Err(Error::Shape {
                    op: "attention mask",
                    lhs: vec![b, lk],
                    rhs: vec![mask.len()],
                });
            }
            for bi in 0..b {
                if !mask[bi * lk..(bi + 1) * lk].iter().any(|&m| m) {
                    return Err(Error::contract(format!("sequence {bi} has no attendable key")));
                }
            }
            let mut add = vec![0.0; b * h * lq * lk];
            for bi in 0..b {
                for hi in 0..h {
                    for qi in 0..lq {
                        let row = ((bi * h + hi) * lq + qi) * lk;
                        for ki in 0..lk {
                            if !mask[bi * lk + ki] {
                                add[row + ki] = f64::NEG_INFINITY;
                            }
                        }
                    }
                }
            }
            scores = scores.add(&Tensor::new(add, &[b, h, lq, lk])?)?;
        }
        let attn = scores.softmax(3)?;
        let out = attn.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, lq, d])?;
        self.o.forward(s, &out)
    }

    pub fn num_params(d: usize) -> usize {
        4 * Linear::num_params(d, d)
    }

    /// MACs of one attention call over a single sequence pair.
    pub fn macs(lq: usize, lk: usize, d: usize) -> u64 {
        let (lq, lk, d) = (lq as u64, lk as u64, d as u64);
        2 * lq * d * d + 2 * lk * d * d + 2 * lq * lk * d
    }
}

pub(crate) fn dims3(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Shape {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

#[derive(Debug, Clone)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Ffn {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, rng)?,
        })
    }

    pub fn forward(&self, s: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(s, &self.fc1.forward(s, x)?.gelu())
    }
}

/// Applies a sublayer with the configured normalisation placement.
///
/// Pre-norm: `x + f(LN(x))`. Post-norm: `LN(x + f(x))`.
pub(crate) fn residual(
    norm: NormPlacement,
    ln: &LayerNorm,
    s: &ParamStore,
    x: &Tensor,
    f: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    match norm {
        NormPlacement::Pre => x.add(&f(&ln.forward(s, x)?)?),
        NormPlacement::Post => ln.forward(s, &x.add(&f(x)?)?),
    }
}

/// Frames of a clip batch cut into flattened patches, `[B, T·S, P·P·C]`.
/// Patches are frame-major, row-major within a frame; each patch vector is
/// ordered (row, column, channel).
pub fn patchify(clips: &[&ClipSample], cfg: &ModelConfig) -> Result<Tensor> {
    let (t_n, hw, p, c_n) = (cfg.frames, cfg.image_size, cfg.patch_size, cfg.channels);
    if hw % p != 0 {
        return Err(Error::config("model.patch_size", format!("image_size {hw} is not divisible by patch_size {p}")));
    }
    let g = hw / p;
    let s_n = g * g;
    let pd = p * p * c_n;
    let mut out = Vec::with_capacity(clips.len() * t_n * s_n * pd);
    for clip in clips {
        if clip.frame_shape != [t_n, hw, hw, c_n] {
            return Err(Error::Shape {
                op: "patchify",
                lhs: clip.frame_shape.to_vec(),
                rhs: vec![t_n, hw, hw, c_n],
            });
        }
        for t in 0..t_n {
            for gy in 0..g {
                for gx in 0..g {
                    for py in 0..p {
                        let y = gy * p + py;
                        let row = ((t * hw + y) * hw + gx * p) * c_n;
                        out.extend(clip.frames[row..row + p * c_n].iter().map(|&v| v as f64));
                    }
                }
            }
        }
    }
    Tensor::new(out, &[clips.len(), t_n * s_n, pd])
}

/// Patch projection, learned space/time position embeddings and a
/// prepended classification token.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub cls: ParamId,
    pub pos_space: ParamId,
    pub pos_time: ParamId,
    frames: usize,
    patches: usize,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(PatchEmbed {
            proj: Linear::new(store, &format!("{name}.proj"), cfg.patch_dim(), d, rng)?,
            cls: store.add_normal(&format!("{name}.cls"), &[1, d], EMBED_STD, rng)?,
            pos_space: store.add_normal(&format!("{name}.pos_space"), &[cfg.patches_per_frame(), d], EMBED_STD, rng)?,
            pos_time: store.add_normal(&format!("{name}.pos_time"), &[cfg.frames, d], EMBED_STD, rng)?,
            frames: cfg.frames,
            patches: cfg.patches_per_frame(),
        })
    }

    /// `[B, T·S, P·P·C] -> [B, T·S + 1, d]`.
    pub fn forward(&self, s: &ParamStore, patches: &Tensor) -> Result<Tensor> {
        let (b, n, _) = dims3("patch_embed", patches)?;
        if n != self.frames * self.patches {
            return Err(Error::Shape {
                op: "patch_embed",
                lhs: patches.shape().to_vec(),
                rhs: vec![self.frames * self.patches],
            });
        }
        let space_idx: Vec<usize> = (0..n).map(|i| i % self.patches).collect();
        let time_idx: Vec<usize> = (0..n).map(|i| i / self.patches).collect();
        let pos = embedding_lookup(s.get(self.pos_space), &space_idx)?.add(&embedding_lookup(s.get(self.pos_time), &time_idx)?)?;
        let tokens = self.proj.forward(s, patches)?.add(&pos)?;
        let d = tokens.shape()[2];
        let cls = s.get(self.cls).reshape(&[1, 1, d])?.index_select(0, &vec![0; b])?;
        concat(&[cls, tokens], 1)
    }
}

/// Divided space-time attention of one video layer, producing `z`:
///
/// ```text
/// x̂ = x + TempSA(x)
/// z = x + SpaSA(x̂)        (or x̂ + SpaSA(x̂) with residual_from_xhat)
/// ```
///
/// Temporal attention runs over the T copies of each spatial location and
/// leaves the classification token unchanged. Spatial attention runs within
/// each frame with a replica of the classification token prepended; the
/// replicas' outputs are averaged over frames.
#[derive(Debug, Clone)]
pub struct SpaceTimeBlock {
    pub ln_t: LayerNorm,
    pub attn_t: Attention,
    pub ln_s: LayerNorm,
    pub attn_s: Attention,
    frames: usize,
    patches: usize,
    norm: NormPlacement,
    residual_from_xhat: bool,
}

impl SpaceTimeBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(SpaceTimeBlock {
            ln_t: LayerNorm::new(store, &format!("{name}.ln_t"), d, cfg.ln_eps)?,
            attn_t: Attention::new(store, &format!("{name}.attn_t"), d, cfg.n_heads, rng)?,
            ln_s: LayerNorm::new(store, &format!("{name}.ln_s"), d, cfg.ln_eps)?,
            attn_s: Attention::new(store, &format!("{name}.attn_s"), d, cfg.n_heads, rng)?,
            frames: cfg.frames,
            patches: cfg.patches_per_frame(),
            norm: cfg.norm,
            residual_from_xhat: cfg.residual_from_xhat,
        })
    }

    /// Temporal self-attention update for every token (zero at the
    /// classification token). `u` is the already-normalised input.
    pub fn temporal(&self, s: &ParamStore, u: &Tensor) -> Result<Tensor> {
        let (b, l, d) = dims3("space_time_block", u)?;
        let (t_n, s_n) = (self.frames, self.patches);
        let patches = u.index_select(1, &(1..l).collect::<Vec<_>>())?;
        let seqs = patches.reshape(&[b, t_n, s_n, d])?.permute(&[0, 2, 1, 3])?.reshape(&[b * s_n, t_n, d])?;
        let out = self.attn_t.forward(s, &seqs, &seqs, None)?;
        let out = out.reshape(&[b, s_n, t_n, d])?.permute(&[0, 2, 1, 3])?.reshape(&[b, t_n * s_n, d])?;
        concat(&[Tensor::zeros(&[b, 1, d]), out], 1)
    }

    /// Spatial self-attention update for every token.
    pub fn spatial(&self, s: &ParamStore, u: &Tensor) -> Result<Tensor> {
        let (b, l, d) = dims3("space_time_block", u)?;
        let (t_n, s_n) = (self.frames, self.patches);
        let cls = u.index_select(1, &[0])?.reshape(&[b, 1, 1, d])?.index_select(1, &vec![0; t_n])?;
        let patches = u.index_select(1, &(1..l).collect::<Vec<_>>())?.reshape(&[b, t_n, s_n, d])?;
        let seqs = concat(&[cls, patches], 2)?.reshape(&[b * t_n, s_n + 1, d])?;
        let out = self.attn_s.forward(s, &seqs, &seqs, None)?.reshape(&[b, t_n, s_n + 1, d])?;
        let cls_out = out.index_select(2, &[0])?.mean_axis(1)?;
        let patch_out = out.index_select(2, &(1..=s_n).collect::<Vec<_>>())?.reshape(&[b, t_n * s_n, d])?;
        concat(&[cls_out, patch_out], 1)
    }

    /// `[B, T·S+1, d] -> z` of the same shape.
    pub fn forward(&self, s: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (_, l, _) = dims3("space_time_block", x)?;
        if l != self.frames * self.patches + 1 {
            return Err(Error::Shape {
                op: "space_time_block",
                lhs: x.shape().to_vec(),
                rhs: vec![self.frames * self.patches + 1],
            });
        }
        match self.norm {
            NormPlacement::Pre => {
                let x_hat = x.add(&self.temporal(s, &self.ln_t.forward(s, x)?)?)?;
                let spa = self.spatial(s, &self.ln_s.forward(s, &x_hat)?)?;
                if self.residual_from_xhat { x_hat.add(&spa) } else { x.add(&spa) }
            }
            NormPlacement::Post => {
                let x_hat = self.ln_t.forward(s, &x.add(&self.temporal(s, x)?)?)?;
                let spa = self.spatial(s, &x_hat)?;
                let base = if self.residual_from_xhat { &x_hat } else { x };
                self.ln_s.forward(s, &base.add(&spa)?)
            }
        }
    }
}

/// Padded id batch for the text tower.
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub ids: Vec<usize>,
    /// True at real tokens, `B·L`.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TextBatch {
    pub fn from_samples(samples: &[&NarrationSample]) -> Result<Self> {
        let len = samples.first().map(|s| s.text.len()).ok_or_else(|| Error::contract("empty text batch"))?;
        let mut ids = Vec::with_capacity(samples.len() * len);
        let mut mask = Vec::with_capacity(samples.len() * len);
        for s in samples {
            if s.text.len() != len || s.pad_mask.len() != len {
                return Err(Error::Shape {
                    op: "text batch",
                    lhs: vec![len],
                    rhs: vec![s.text.len()],
                });
            }
            ids.extend(&s.text);
            mask.extend(&s.pad_mask);
        }
        Ok(TextBatch {
            ids,
            mask,
            batch: samples.len(),
            len,
        })
    }

    /// Rows `idx` of this batch, in order.
    pub fn select(&self, idx: &[usize]) -> TextBatch {
        let l = self.len;
        TextBatch {
            ids: idx.iter().flat_map(|&i| self.ids[i * l..(i + 1) * l].iter().copied()).collect(),
            mask: idx.iter().flat_map(|&i| self.mask[i * l..(i + 1) * l].iter().copied()).collect(),
            batch: idx.len(),
            len: l,
        }
    }
}

/// Token plus position embeddings.
#[derive(Debug, Clone)]
pub struct TextEmbed {
    pub tokens: ParamId,
    pub pos: ParamId,
    vocab: usize,
}

impl TextEmbed {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(TextEmbed {
            tokens: store.add_normal(&format!("{name}.tokens"), &[cfg.vocab_size, cfg.d_model], EMBED_STD, rng)?,
            pos: store.add_normal(&format!("{name}.pos"), &[cfg.max_text_len, cfg.d_model], EMBED_STD, rng)?,
            vocab: cfg.vocab_size,
        })
    }

    pub fn forward(&self, s: &ParamStore, batch: &TextBatch) -> Result<Tensor> {
        let d = s.get(self.tokens).shape()[1];
        let max_len = s.get(self.pos).shape()[0];
        if batch.len > max_len {
            return Err(Error::Shape {
                op: "text_embed",
                lhs: vec![batch.len],
                rhs: vec![max_len],
            });
        }
        if let Some(&bad) = batch.ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::Index {
                op: "embedding_lookup",
                index: bad,
                extent: self.vocab,
            });
        }
        let tok = embedding_lookup(s.get(self.tokens), &batch.ids)?.reshape(&[batch.batch, batch.len, d])?;
        let pos = embedding_lookup(s.get(self.pos), &(0..batch.len).collect::<Vec<_>>())?;
        tok.add(&pos)
    }
}

/// Self-attention part of a text layer; returns the attention output only.
#[derive(Debug, Clone)]
pub struct TextBlock {
    pub ln: LayerNorm,
    pub attn: Attention,
    norm: NormPlacement,
}

impl TextBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(TextBlock {
            ln: LayerNorm::new(store, &format!("{name}.ln_sa"), cfg.d_model, cfg.ln_eps)?,
            attn: Attention::new(store, &format!("{name}.attn"), cfg.d_model, cfg.n_heads, rng)?,
            norm: cfg.norm,
        })
    }

    /// `x̂ = SA(x)` with padded keys masked (input normalised first under
    /// pre-norm).
    pub fn forward(&self, s: &ParamStore, x: &Tensor, mask: &[bool]) -> Result<Tensor> {
        let u = match self.norm {
            NormPlacement::Pre => self.ln.forward(s, x)?,
            NormPlacement::Post => x.clone(),
        };
        self.attn.forward(s, &u, &u, Some(mask))
    }

    /// Composes `x + x̂ + extra` with the layer's normalisation placement.
    pub fn compose(&self, s: &ParamStore, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        let h = x.add(x_hat)?;
        match self.norm {
            NormPlacement::Pre => Ok(h),
            NormPlacement::Post => self.ln.forward(s, &h),
        }
    }
}

/// MLP over the pooled token, GELU between layers, then unit normalisation.
#[derive(Debug, Clone)]
pub struct Projector {
    pub layers: Vec<Linear>,
}

impl Projector {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(dims.len());
        let mut prev = d_in;
        for (i, &d) in dims.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{name}.{i}"), prev, d, rng)?);
            prev = d;
        }
        Ok(Projector { layers })
    }

    /// `[B, d] -> [B, e]`, rows of unit norm.
    pub fn forward(&self, s: &ParamStore, pooled: &Tensor) -> Result<Tensor> {
        let mut h = pooled.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.gelu();
            }
            h = layer.forward(s, &h)?;
        }
        h.l2_normalize()
    }

    pub fn num_params(d_in: usize, dims: &[usize]) -> usize {
        let mut prev = d_in;
        dims.iter()
            .map(|&d| {
                let n = Linear::num_params(prev, d);
                prev = d;
                n
            })
            .sum()
    }
}
