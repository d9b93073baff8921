//! Network definitions: the tokenizer encoder/decoder pair, the student
//! token predictor, and the small teacher that scores patches for masking.
//!
//! All four networks share the same building blocks: a strided temporal
//! convolution stack that embeds one patch into a vector, learned absolute
//! positional embeddings, and pre-norm transformer layers whose attention is
//! evaluated per head with the fused tape op. Parameters live in a
//! [`ParamSet`] — an ordered, named list of tensors — so the trainer can
//! hand the whole collection to the optimizer and checkpoints can address
//! tensors by name.
//!
//! Initialization is deterministic given a seed: weights and embeddings are
//! truncated-normal with standard deviation 0.02 (resampled beyond two
//! sigma), biases and layer-norm offsets start at zero, layer-norm scales at
//! one.

use ndgrad::checkpoint::Checkpoint;
use ndgrad::{NodeId, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::PatchSequence;
use crate::seed::rng_from;
use crate::vq::Codebook;
use crate::{Error, Result};

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;
/// Epsilon used by every layer norm.
pub const LN_EPS: f64 = 1e-5;
/// Teacher backbone width (fixed, independent of the main config).
pub const TEACHER_HIDDEN: usize = 64;
/// Teacher transformer depth.
pub const TEACHER_LAYERS: usize = 2;
/// Teacher attention heads.
pub const TEACHER_HEADS: usize = 4;
/// Teacher MLP width.
pub const TEACHER_MLP: usize = 128;

/// One temporal convolution layer; input channels are implied by the chain
/// (the first layer sees the single raw channel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// What the tokenizer decoder reconstructs; decides the head width and
/// whether a non-negativity activation is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReconObjective {
    /// One-sided amplitude spectrum; softplus head (magnitudes are >= 0).
    #[default]
    Amplitude,
    /// Time-domain patch samples; linear head.
    Raw,
    /// Principal-value phase angles per spectrum bin; linear head. The
    /// angles are compared without wrap handling by design — this is the
    /// degraded reference variant.
    Phase,
    /// Amplitude and phase concatenated: softplus on the first half only.
    AmplitudePhase,
}

/// Dimensions shared by the tokenizer, student, and teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Temporal convolution stack applied to each patch.
    pub conv: Vec<ConvSpec>,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub student_layers: usize,
    pub hidden: usize,
    pub mlp: usize,
    pub heads: usize,
    /// Codebook entries.
    pub codebook_k: usize,
    /// Codebook vector dimension (also the encoder output width).
    pub codebook_d: usize,
    /// Samples per patch.
    pub patch_len: usize,
    /// Patches per segment (positional table size).
    pub seq_len: usize,
    /// Constant multiplier on residual branches; 1.0 disables it.
    pub layer_scale: f64,
    /// Seed the student token embedding from the codebook (requires
    /// `codebook_d == hidden`). Off by default.
    pub tie_student_embedding: bool,
    /// Decoder reconstruction target (fixes the decoder head shape).
    pub recon: ReconObjective,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            conv: vec![
                ConvSpec { out_channels: 8, kernel: 15, stride: 8, padding: 7 },
                ConvSpec { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
                ConvSpec { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
            ],
            encoder_layers: 2,
            decoder_layers: 1,
            student_layers: 2,
            hidden: 64,
            mlp: 128,
            heads: 4,
            codebook_k: 64,
            codebook_d: 16,
            patch_len: 50,
            seq_len: 240,
            layer_scale: 1.0,
            tie_student_embedding: false,
            recon: ReconObjective::Amplitude,
        }
    }
}

fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::InvalidConfig { detail });
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.codebook_k < 2 {
            return bad(format!("codebook needs at least 2 entries, got {}", self.codebook_k));
        }
        if self.codebook_d == 0 || self.mlp == 0 || self.patch_len == 0 || self.seq_len == 0 {
            return bad("zero-sized dimension".into());
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 || self.student_layers == 0 {
            return bad("transformer stacks need at least one layer".into());
        }
        if self.conv.is_empty() {
            return bad("empty convolution stack".into());
        }
        if !(self.layer_scale.is_finite() && self.layer_scale > 0.0) {
            return bad(format!("layer scale {}", self.layer_scale));
        }
        if self.tie_student_embedding && self.codebook_d != self.hidden {
            return bad(format!(
                "tied student embedding needs codebook_d == hidden, got {} vs {}",
                self.codebook_d, self.hidden
            ));
        }
        self.conv_chain()?;
        Ok(())
    }

    /// Per-layer `(in_channels, out_len)` of the convolution stack.
    fn conv_chain(&self) -> Result<Vec<(usize, usize)>> {
        let mut chain = Vec::with_capacity(self.conv.len());
        let mut channels = 1usize;
        let mut len = self.patch_len;
        for (i, spec) in self.conv.iter().enumerate() {
            if spec.out_channels == 0 {
                return Err(Error::InvalidConfig { detail: format!("conv layer {i} has no channels") });
            }
            let Some(out) = conv_out_len(len, spec.kernel, spec.stride, spec.padding) else {
                return Err(Error::InvalidConfig {
                    detail: format!(
                        "conv layer {i}: kernel {} does not fit length {} (padding {})",
                        spec.kernel, len, spec.padding
                    ),
                });
            };
            chain.push((channels, out));
            channels = spec.out_channels;
            len = out;
        }
        Ok(chain)
    }

    /// Width of a patch embedding after the stack is flattened.
    pub fn flatten_dim(&self) -> Result<usize> {
        let chain = self.conv_chain()?;
        let (_, last_len) = chain[chain.len() - 1];
        Ok(self.conv[self.conv.len() - 1].out_channels * last_len)
    }

    /// One-sided amplitude-spectrum bins for a patch of `patch_len` samples.
    pub fn spectrum_bins(&self) -> usize {
        self.patch_len / 2 + 1
    }

    /// Decoder head width for the configured reconstruction objective.
    pub fn decoder_out_dim(&self) -> usize {
        match self.recon {
            ReconObjective::Amplitude | ReconObjective::Phase => self.spectrum_bins(),
            ReconObjective::Raw => self.patch_len,
            ReconObjective::AmplitudePhase => 2 * self.spectrum_bins(),
        }
    }
}

/// An ordered, named collection of parameter tensors.
#[derive(Debug, Clone)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    fn new() -> Self {
        Self { entries: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.entries.push((name.into(), t));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    /// Clones the tensors out in order (the trainer's working copy).
    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    /// Writes a trainer's working copy back, checking shapes.
    pub fn set_from(&mut self, tensors: &[Tensor]) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::ShapeError {
                op: "param_set",
                detail: format!("{} tensors for {} slots", tensors.len(), self.entries.len()),
            });
        }
        for ((name, dst), src) in self.entries.iter_mut().zip(tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::ShapeError {
                    op: "param_set",
                    detail: format!("{name}: {:?} vs {:?}", dst.shape(), src.shape()),
                });
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Parameter count restricted to names starting with `prefix`.
    pub fn params_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Registers every tensor as a tape leaf, in order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.entries.iter().map(|(_, t)| tape.leaf(t.clone())).collect()
    }

    /// Checkpoint entries (name, tensor) in parameter order.
    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor)> {
        self.entries.clone()
    }

    /// Restores every parameter from a checkpoint by name.
    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (name, dst) in &mut self.entries {
            let Some(src) = ckpt.tensor(name) else {
                return Err(Error::CorruptContainer {
                    detail: format!("checkpoint is missing tensor '{name}'"),
                });
            };
            if src.shape() != dst.shape() {
                return Err(Error::CorruptContainer {
                    detail: format!("tensor '{name}': {:?} vs {:?}", src.shape(), dst.shape()),
                });
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

/// Deterministic initializer over one ChaCha stream.
struct Init {
    rng: ChaCha20Rng,
}

impl Init {
    fn new(parts: &[u64]) -> Self {
        Self { rng: rng_from(parts) }
    }

    /// Normal(0, INIT_STD^2) resampled until within two standard deviations.
    fn trunc_normal(&mut self, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel)
            .map(|_| {
                loop {
                    let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = self.rng.gen::<f64>();
                    let z = (-2.0 * u1.ln()).sqrt()
                        * (2.0 * std::f64::consts::PI * u2).cos();
                    if z.abs() <= 2.0 {
                        return INIT_STD * z;
                    }
                }
            })
            .collect();
        Tensor::new(shape, data).expect("init shape")
    }

    fn zeros(shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }

    fn ones(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![1.0; numel]).expect("init shape")
    }
}

/// Parameter indices of one pre-norm transformer layer.
#[derive(Debug, Clone)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

fn build_layer(ps: &mut ParamSet, init: &mut Init, prefix: &str, hidden: usize, mlp: usize) -> LayerIdx {
    LayerIdx {
        ln1_g: ps.push(format!("{prefix}.ln1.g"), Init::ones(&[hidden])),
        ln1_b: ps.push(format!("{prefix}.ln1.b"), Init::zeros(&[hidden])),
        wq: ps.push(format!("{prefix}.attn.wq"), init.trunc_normal(&[hidden, hidden])),
        bq: ps.push(format!("{prefix}.attn.bq"), Init::zeros(&[hidden])),
        wk: ps.push(format!("{prefix}.attn.wk"), init.trunc_normal(&[hidden, hidden])),
        bk: ps.push(format!("{prefix}.attn.bk"), Init::zeros(&[hidden])),
        wv: ps.push(format!("{prefix}.attn.wv"), init.trunc_normal(&[hidden, hidden])),
        bv: ps.push(format!("{prefix}.attn.bv"), Init::zeros(&[hidden])),
        wo: ps.push(format!("{prefix}.attn.wo"), init.trunc_normal(&[hidden, hidden])),
        bo: ps.push(format!("{prefix}.attn.bo"), Init::zeros(&[hidden])),
        ln2_g: ps.push(format!("{prefix}.ln2.g"), Init::ones(&[hidden])),
        ln2_b: ps.push(format!("{prefix}.ln2.b"), Init::zeros(&[hidden])),
        w1: ps.push(format!("{prefix}.mlp.w1"), init.trunc_normal(&[hidden, mlp])),
        b1: ps.push(format!("{prefix}.mlp.b1"), Init::zeros(&[mlp])),
        w2: ps.push(format!("{prefix}.mlp.w2"), init.trunc_normal(&[mlp, hidden])),
        b2: ps.push(format!("{prefix}.mlp.b2"), Init::zeros(&[hidden])),
    }
}

fn linear(tape: &mut Tape, leaves: &[NodeId], x: NodeId, w: usize, b: usize) -> Result<NodeId> {
    Ok(tape.linear(x, leaves[w], leaves[b])?)
}

fn scale_branch(tape: &mut Tape, x: NodeId, layer_scale: f64) -> Result<NodeId> {
    if layer_scale == 1.0 {
        Ok(x)
    } else {
        Ok(tape.mul_scalar(x, layer_scale)?)
    }
}

fn layer_forward(
    tape: &mut Tape,
    leaves: &[NodeId],
    layer: &LayerIdx,
    x: NodeId,
    heads: usize,
    hidden: usize,
    layer_scale: f64,
) -> Result<NodeId> {
    let d_head = hidden / heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let norm = tape.layer_norm(x, leaves[layer.ln1_g], leaves[layer.ln1_b], LN_EPS)?;
    let q = linear(tape, leaves, norm, layer.wq, layer.bq)?;
    let k = linear(tape, leaves, norm, layer.wk, layer.bk)?;
    let v = linear(tape, leaves, norm, layer.wv, layer.bv)?;
    let merged = tape.mha(q, k, v, heads, scale)?;
    let attn = linear(tape, leaves, merged, layer.wo, layer.bo)?;
    let attn = scale_branch(tape, attn, layer_scale)?;
    let x = tape.add(x, attn)?;
    let norm2 = tape.layer_norm(x, leaves[layer.ln2_g], leaves[layer.ln2_b], LN_EPS)?;
    let m = linear(tape, leaves, norm2, layer.w1, layer.b1)?;
    let m = tape.gelu(m)?;
    let m = linear(tape, leaves, m, layer.w2, layer.b2)?;
    let m = scale_branch(tape, m, layer_scale)?;
    Ok(tape.add(x, m)?)
}

/// Adds the first `n` rows of a positional table to `x`.
fn add_positions(tape: &mut Tape, pos: NodeId, x: NodeId, n: usize, table_rows: usize) -> Result<NodeId> {
    let pos_slice = if n == table_rows {
        pos
    } else {
        let ids: Vec<usize> = (0..n).collect();
        tape.gather_rows(pos, &ids)?
    };
    Ok(tape.add(x, pos_slice)?)
}

/// Parameter indices of a conv patch-embedding stack plus projection.
#[derive(Debug, Clone)]
struct ConvEmbedIdx {
    convs: Vec<(usize, usize)>,
    proj_w: usize,
    proj_b: usize,
}

fn build_conv_embed(
    ps: &mut ParamSet,
    init: &mut Init,
    prefix: &str,
    conv: &[ConvSpec],
    flatten: usize,
    hidden: usize,
) -> ConvEmbedIdx {
    let mut convs = Vec::with_capacity(conv.len());
    let mut in_channels = 1usize;
    for (i, spec) in conv.iter().enumerate() {
        let w = ps.push(
            format!("{prefix}.conv{i}.w"),
            init.trunc_normal(&[spec.out_channels, in_channels, spec.kernel]),
        );
        let b = ps.push(format!("{prefix}.conv{i}.b"), Init::zeros(&[spec.out_channels]));
        convs.push((w, b));
        in_channels = spec.out_channels;
    }
    let proj_w = ps.push(format!("{prefix}.proj.w"), init.trunc_normal(&[flatten, hidden]));
    let proj_b = ps.push(format!("{prefix}.proj.b"), Init::zeros(&[hidden]));
    ConvEmbedIdx { convs, proj_w, proj_b }
}

fn conv_embed_forward(
    tape: &mut Tape,
    leaves: &[NodeId],
    idx: &ConvEmbedIdx,
    conv: &[ConvSpec],
    flatten: usize,
    patches: &PatchSequence,
) -> Result<NodeId> {
    let n = patches.n();
    let mut x = tape.leaf(Tensor::new(&[n, 1, patches.t()], patches.flat().to_vec())?);
    for (spec, &(w, b)) in conv.iter().zip(&idx.convs) {
        x = tape.conv1d(x, leaves[w], leaves[b], spec.stride, spec.padding)?;
        x = tape.gelu(x)?;
    }
    let flat = tape.reshape(x, &[n, flatten])?;
    linear(tape, leaves, flat, idx.proj_w, idx.proj_b)
}

fn check_patches(cfg_patch: usize, cfg_seq: usize, patches: &PatchSequence) -> Result<()> {
    if patches.t() != cfg_patch || patches.n() == 0 || patches.n() > cfg_seq {
        return Err(Error::ShapeError {
            op: "net_forward",
            detail: format!(
                "{} patches of {} samples vs configured {} x {}",
                patches.n(),
                patches.t(),
                cfg_seq,
                cfg_patch
            ),
        });
    }
    Ok(())
}

/// The two-network tokenizer: encoder to latents, codebook, and a spectrum
/// decoder. The codebook is stored here (vectors plus usage histogram) and
/// trained together with the network parameters.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub cfg: NetConfig,
    pub params: ParamSet,
    pub codebook: Codebook,
    /// Set while the pretraining stage borrows the tokenizer; the trainer
    /// refuses to update a frozen tokenizer and verifies it never drifts.
    pub frozen: bool,
    enc_embed: ConvEmbedIdx,
    enc_pos: usize,
    enc_layers: Vec<LayerIdx>,
    enc_ln_g: usize,
    enc_ln_b: usize,
    enc_head_w: usize,
    enc_head_b: usize,
    dec_in_w: usize,
    dec_in_b: usize,
    dec_pos: usize,
    dec_layers: Vec<LayerIdx>,
    dec_ln_g: usize,
    dec_ln_b: usize,
    dec_head_w: usize,
    dec_head_b: usize,
    flatten: usize,
}

impl Tokenizer {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let flatten = cfg.flatten_dim()?;
        let out_dim = cfg.decoder_out_dim();
        let mut ps = ParamSet::new();
        let mut init = Init::new(&[seed, 0x10]);
        let enc_embed = build_conv_embed(&mut ps, &mut init, "enc", &cfg.conv, flatten, cfg.hidden);
        let enc_pos = ps.push("enc.pos", init.trunc_normal(&[cfg.seq_len, cfg.hidden]));
        let enc_layers: Vec<LayerIdx> = (0..cfg.encoder_layers)
            .map(|l| build_layer(&mut ps, &mut init, &format!("enc.l{l}"), cfg.hidden, cfg.mlp))
            .collect();
        let enc_ln_g = ps.push("enc.ln.g", Init::ones(&[cfg.hidden]));
        let enc_ln_b = ps.push("enc.ln.b", Init::zeros(&[cfg.hidden]));
        let enc_head_w = ps.push("enc.head.w", init.trunc_normal(&[cfg.hidden, cfg.codebook_d]));
        let enc_head_b = ps.push("enc.head.b", Init::zeros(&[cfg.codebook_d]));
        let dec_in_w = ps.push("dec.in.w", init.trunc_normal(&[cfg.codebook_d, cfg.hidden]));
        let dec_in_b = ps.push("dec.in.b", Init::zeros(&[cfg.hidden]));
        let dec_pos = ps.push("dec.pos", init.trunc_normal(&[cfg.seq_len, cfg.hidden]));
        let dec_layers: Vec<LayerIdx> = (0..cfg.decoder_layers)
            .map(|l| build_layer(&mut ps, &mut init, &format!("dec.l{l}"), cfg.hidden, cfg.mlp))
            .collect();
        let dec_ln_g = ps.push("dec.ln.g", Init::ones(&[cfg.hidden]));
        let dec_ln_b = ps.push("dec.ln.b", Init::zeros(&[cfg.hidden]));
        let dec_head_w = ps.push("dec.head.w", init.trunc_normal(&[cfg.hidden, out_dim]));
        let dec_head_b = ps.push("dec.head.b", Init::zeros(&[out_dim]));
        let codebook_init = init.trunc_normal(&[cfg.codebook_k, cfg.codebook_d]);
        let codebook = Codebook::new(cfg.codebook_k, cfg.codebook_d, codebook_init.data().to_vec())?;
        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            codebook,
            frozen: false,
            enc_embed,
            enc_pos,
            enc_layers,
            enc_ln_g,
            enc_ln_b,
            enc_head_w,
            enc_head_b,
            dec_in_w,
            dec_in_b,
            dec_pos,
            dec_layers,
            dec_ln_g,
            dec_ln_b,
            dec_head_w,
            dec_head_b,
            flatten,
        })
    }

    /// Registers all network parameters as tape leaves (codebook excluded;
    /// the trainer registers it separately so it can receive gradient).
    pub fn leaves(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.leaves(tape)
    }

    /// Patches to pre-quantization latents, shape `[n, codebook_d]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        leaves: &[NodeId],
        patches: &PatchSequence,
    ) -> Result<NodeId> {
        check_patches(self.cfg.patch_len, self.cfg.seq_len, patches)?;
        let n = patches.n();
        let embedded =
            conv_embed_forward(tape, leaves, &self.enc_embed, &self.cfg.conv, self.flatten, patches)?;
        let mut x = add_positions(tape, leaves[self.enc_pos], embedded, n, self.cfg.seq_len)?;
        for layer in &self.enc_layers {
            x = layer_forward(tape, leaves, layer, x, self.cfg.heads, self.cfg.hidden, self.cfg.layer_scale)?;
        }
        let x = tape.layer_norm(x, leaves[self.enc_ln_g], leaves[self.enc_ln_b], LN_EPS)?;
        linear(tape, leaves, x, self.enc_head_w, self.enc_head_b)
    }

    /// Code vectors (or straight-through latents) to the reconstruction
    /// target, shape `[n, decoder_out_dim]`. Amplitude outputs go through
    /// softplus; raw and phase outputs stay linear.
    pub fn decode(&self, tape: &mut Tape, leaves: &[NodeId], codes: NodeId) -> Result<NodeId> {
        let shape = tape.value(codes).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.codebook_d || shape[0] > self.cfg.seq_len {
            return Err(Error::ShapeError {
                op: "decode",
                detail: format!("codes {shape:?} vs [<= {}, {}]", self.cfg.seq_len, self.cfg.codebook_d),
            });
        }
        let n = shape[0];
        let projected = linear(tape, leaves, codes, self.dec_in_w, self.dec_in_b)?;
        let mut x = add_positions(tape, leaves[self.dec_pos], projected, n, self.cfg.seq_len)?;
        for layer in &self.dec_layers {
            x = layer_forward(tape, leaves, layer, x, self.cfg.heads, self.cfg.hidden, self.cfg.layer_scale)?;
        }
        let x = tape.layer_norm(x, leaves[self.dec_ln_g], leaves[self.dec_ln_b], LN_EPS)?;
        let head = linear(tape, leaves, x, self.dec_head_w, self.dec_head_b)?;
        Ok(match self.cfg.recon {
            ReconObjective::Amplitude => tape.softplus(head)?,
            ReconObjective::Raw | ReconObjective::Phase => head,
            ReconObjective::AmplitudePhase => {
                let bins = self.cfg.spectrum_bins();
                let amp = tape.slice_cols(head, 0, bins)?;
                let amp = tape.softplus(amp)?;
                let phase = tape.slice_cols(head, bins, bins)?;
                tape.concat_cols(&[amp, phase])?
            }
        })
    }

    /// Inference-only encode on a scratch tape; returns row-major `n x D`.
    pub fn encode_values(&self, patches: &PatchSequence) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let h = self.encode(&mut tape, &leaves, patches)?;
        Ok(tape.value(h).data().to_vec())
    }

    /// The codebook as a `[K, D]` tensor (the trainer's working copy).
    pub fn codebook_tensor(&self) -> Tensor {
        Tensor::new(&[self.cfg.codebook_k, self.cfg.codebook_d], self.codebook.vectors().to_vec())
            .expect("codebook shape")
    }

    /// Writes an updated codebook tensor back.
    pub fn set_codebook_from(&mut self, t: &Tensor) -> Result<()> {
        if t.shape() != [self.cfg.codebook_k, self.cfg.codebook_d] {
            return Err(Error::ShapeError {
                op: "codebook",
                detail: format!("{:?} vs [{}, {}]", t.shape(), self.cfg.codebook_k, self.cfg.codebook_d),
            });
        }
        self.codebook.vectors_mut().copy_from_slice(t.data());
        Ok(())
    }

    pub fn encoder_params(&self) -> usize {
        self.params.params_with_prefix("enc.")
    }

    pub fn decoder_params(&self) -> usize {
        self.params.params_with_prefix("dec.")
    }

    /// Network parameters plus codebook entries.
    pub fn total_params(&self) -> usize {
        self.params.total_params() + self.cfg.codebook_k * self.cfg.codebook_d
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        let mut tensors = self.params.checkpoint_entries();
        tensors.push(("codebook".into(), self.codebook_tensor()));
        Ok(Checkpoint {
            step,
            meta: serde_json::json!({ "kind": "tokenizer", "config": self.cfg }),
            tensors,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let kind = ckpt.meta.get("kind").and_then(|v| v.as_str());
        if kind != Some("tokenizer") {
            return Err(Error::CorruptContainer {
                detail: format!("checkpoint kind {kind:?}, want tokenizer"),
            });
        }
        let cfg_value = ckpt.meta.get("config").cloned().ok_or(Error::CorruptContainer {
            detail: "checkpoint has no config".into(),
        })?;
        let cfg: NetConfig = serde_json::from_value(cfg_value)?;
        let mut tok = Self::new(&cfg, 0)?;
        tok.params.load_from(ckpt)?;
        let cb = ckpt.tensor("codebook").ok_or(Error::CorruptContainer {
            detail: "checkpoint is missing tensor 'codebook'".into(),
        })?;
        tok.set_codebook_from(cb)?;
        Ok(tok)
    }
}

/// Token-sequence transformer that predicts the original code index at each
/// position. Index `K` of the embedding table is the mask token.
#[derive(Debug, Clone)]
pub struct Student {
    pub cfg: NetConfig,
    pub params: ParamSet,
    embed: usize,
    pos: usize,
    layers: Vec<LayerIdx>,
    ln_g: usize,
    ln_b: usize,
    head_w: usize,
    head_b: usize,
}

impl Student {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut init = Init::new(&[seed, 0x11]);
        let embed = ps.push(
            "student.embed",
            init.trunc_normal(&[cfg.codebook_k + 1, cfg.hidden]),
        );
        let pos = ps.push("student.pos", init.trunc_normal(&[cfg.seq_len, cfg.hidden]));
        let layers: Vec<LayerIdx> = (0..cfg.student_layers)
            .map(|l| build_layer(&mut ps, &mut init, &format!("student.l{l}"), cfg.hidden, cfg.mlp))
            .collect();
        let ln_g = ps.push("student.ln.g", Init::ones(&[cfg.hidden]));
        let ln_b = ps.push("student.ln.b", Init::zeros(&[cfg.hidden]));
        let head_w = ps.push("student.head.w", init.trunc_normal(&[cfg.hidden, cfg.codebook_k]));
        let head_b = ps.push("student.head.b", Init::zeros(&[cfg.codebook_k]));
        Ok(Self { cfg: cfg.clone(), params: ps, embed, pos, layers, ln_g, ln_b, head_w, head_b })
    }

    /// Copies codebook vectors into embedding rows `0..K` (the tied-start
    /// option; requires `codebook_d == hidden`).
    pub fn tie_embedding(&mut self, codebook: &Codebook) -> Result<()> {
        if codebook.d() != self.cfg.hidden || codebook.k() != self.cfg.codebook_k {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "cannot tie {}x{} codebook into {}x{} embedding",
                    codebook.k(),
                    codebook.d(),
                    self.cfg.codebook_k,
                    self.cfg.hidden
                ),
            });
        }
        let table = &mut self.params.entries[self.embed].1;
        let hidden = self.cfg.hidden;
        table.data_mut()[..codebook.k() * hidden].copy_from_slice(codebook.vectors());
        Ok(())
    }

    pub fn leaves(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.leaves(tape)
    }

    /// Logits over the codebook at every position, shape `[n, K]`. Masked
    /// positions are replaced by the mask embedding before the transformer.
    pub fn forward(
        &self,
        tape: &mut Tape,
        leaves: &[NodeId],
        tokens: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let n = tokens.len();
        if n == 0 || n > self.cfg.seq_len || mask.len() != n {
            return Err(Error::ShapeError {
                op: "student_forward",
                detail: format!("{n} tokens, {} mask flags, table {}", mask.len(), self.cfg.seq_len),
            });
        }
        let k = self.cfg.codebook_k;
        let mut ids = Vec::with_capacity(n);
        for (&token, &masked) in tokens.iter().zip(mask) {
            if token >= k {
                return Err(Error::TokenRange { token, k });
            }
            ids.push(if masked { k } else { token });
        }
        let embedded = tape.gather_rows(leaves[self.embed], &ids)?;
        let mut x = add_positions(tape, leaves[self.pos], embedded, n, self.cfg.seq_len)?;
        for layer in &self.layers {
            x = layer_forward(tape, leaves, layer, x, self.cfg.heads, self.cfg.hidden, self.cfg.layer_scale)?;
        }
        let x = tape.layer_norm(x, leaves[self.ln_g], leaves[self.ln_b], LN_EPS)?;
        linear(tape, leaves, x, self.head_w, self.head_b)
    }

    pub fn total_params(&self) -> usize {
        self.params.total_params()
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        Ok(Checkpoint {
            step,
            meta: serde_json::json!({ "kind": "student", "config": self.cfg }),
            tensors: self.params.checkpoint_entries(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let kind = ckpt.meta.get("kind").and_then(|v| v.as_str());
        if kind != Some("student") {
            return Err(Error::CorruptContainer {
                detail: format!("checkpoint kind {kind:?}, want student"),
            });
        }
        let cfg_value = ckpt.meta.get("config").cloned().ok_or(Error::CorruptContainer {
            detail: "checkpoint has no config".into(),
        })?;
        let cfg: NetConfig = serde_json::from_value(cfg_value)?;
        let mut student = Self::new(&cfg, 0)?;
        student.params.load_from(ckpt)?;
        Ok(student)
    }
}

/// Small fixed-width transformer that scores each patch with one raw logit;
/// the masking policy samples from these scores.
#[derive(Debug, Clone)]
pub struct Teacher {
    conv: Vec<ConvSpec>,
    patch_len: usize,
    seq_len: usize,
    flatten: usize,
    pub params: ParamSet,
    embed: ConvEmbedIdx,
    pos: usize,
    layers: Vec<LayerIdx>,
    ln_g: usize,
    ln_b: usize,
    head_w: usize,
    head_b: usize,
}

impl Teacher {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let flatten = cfg.flatten_dim()?;
        let mut ps = ParamSet::new();
        let mut init = Init::new(&[seed, 0x12]);
        let embed =
            build_conv_embed(&mut ps, &mut init, "teacher", &cfg.conv, flatten, TEACHER_HIDDEN);
        let pos = ps.push("teacher.pos", init.trunc_normal(&[cfg.seq_len, TEACHER_HIDDEN]));
        let layers: Vec<LayerIdx> = (0..TEACHER_LAYERS)
            .map(|l| {
                build_layer(&mut ps, &mut init, &format!("teacher.l{l}"), TEACHER_HIDDEN, TEACHER_MLP)
            })
            .collect();
        let ln_g = ps.push("teacher.ln.g", Init::ones(&[TEACHER_HIDDEN]));
        let ln_b = ps.push("teacher.ln.b", Init::zeros(&[TEACHER_HIDDEN]));
        let head_w = ps.push("teacher.head.w", init.trunc_normal(&[TEACHER_HIDDEN, 1]));
        let head_b = ps.push("teacher.head.b", Init::zeros(&[1]));
        Ok(Self {
            conv: cfg.conv.clone(),
            patch_len: cfg.patch_len,
            seq_len: cfg.seq_len,
            flatten,
            params: ps,
            embed,
            pos,
            layers,
            ln_g,
            ln_b,
            head_w,
            head_b,
        })
    }

    pub fn leaves(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.leaves(tape)
    }

    /// One raw logit per patch, rank-1 shape `[n]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        leaves: &[NodeId],
        patches: &PatchSequence,
    ) -> Result<NodeId> {
        check_patches(self.patch_len, self.seq_len, patches)?;
        let n = patches.n();
        let embedded =
            conv_embed_forward(tape, leaves, &self.embed, &self.conv, self.flatten, patches)?;
        let mut x = add_positions(tape, leaves[self.pos], embedded, n, self.seq_len)?;
        for layer in &self.layers {
            x = layer_forward(tape, leaves, layer, x, TEACHER_HEADS, TEACHER_HIDDEN, 1.0)?;
        }
        let x = tape.layer_norm(x, leaves[self.ln_g], leaves[self.ln_b], LN_EPS)?;
        let logits = linear(tape, leaves, x, self.head_w, self.head_b)?;
        Ok(tape.reshape(logits, &[n])?)
    }

    pub fn total_params(&self) -> usize {
        self.params.total_params()
    }

    pub fn to_checkpoint(&self, step: u64, cfg: &NetConfig) -> Result<Checkpoint> {
        Ok(Checkpoint {
            step,
            meta: serde_json::json!({ "kind": "teacher", "config": cfg }),
            tensors: self.params.checkpoint_entries(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let kind = ckpt.meta.get("kind").and_then(|v| v.as_str());
        if kind != Some("teacher") {
            return Err(Error::CorruptContainer {
                detail: format!("checkpoint kind {kind:?}, want teacher"),
            });
        }
        let cfg_value = ckpt.meta.get("config").cloned().ok_or(Error::CorruptContainer {
            detail: "checkpoint has no config".into(),
        })?;
        let cfg: NetConfig = serde_json::from_value(cfg_value)?;
        let mut teacher = Self::new(&cfg, 0)?;
        teacher.params.load_from(ckpt)?;
        Ok(teacher)
    }
}
