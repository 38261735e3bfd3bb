//! Miniature decoder-only transformer over a joint
//! `[audio-feature prefix | text prompt | completion]` sequence.
//!
//! Blocks are pre-norm (parameter-free layer norm) with causal multi-head
//! self-attention and a tanh feed-forward of width 4d. The forward pass is
//! built on the autodiff [`Tape`], and per-layer per-head attention rows
//! are exposed both as tape nodes (for the attention loss branch) and as
//! extracted values (for diagnostics). The audio-ablated pass removes the
//! prefix from the sequence entirely and re-bases positions, rather than
//! zeroing frames, so ablated attention has no audio keys to spend mass on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::tape::{NodeId, Tape};
use crate::util::{Fnv64, Mat};
use crate::{Error, Result};

pub type TokenId = usize;

const LN_EPS: f64 = 1e-5;
/// Additive score mask for future keys; large enough that the softmax
/// weight underflows to exactly 0.0.
const NEG_MASK: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub d_audio: usize,
    pub max_seq_len: usize,
    /// 1-based layer indices whose attention feeds the audio-mass signal.
    pub target_layers: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 16,
            vocab_size: 32,
            d_audio: 8,
            max_seq_len: 64,
            target_layers: vec![1, 2],
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.target_layers.is_empty() {
            return Err(Error::Config("target_layers must be nonempty".into()));
        }
        for &l in &self.target_layers {
            if l == 0 || l > self.layers {
                return Err(Error::Config(format!(
                    "target layer {l} outside 1..={}",
                    self.layers
                )));
            }
        }
        Ok(())
    }

    /// Canonical (name, rows, cols) list for every parameter array. Drives
    /// initialization, checkpoints, optimizer state, and gradient checks.
    pub fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let d = self.d_model;
        let mut shapes = vec![
            ("embed.tok".to_string(), self.vocab_size, d),
            ("embed.audio".to_string(), self.d_audio, d),
            ("embed.pos".to_string(), self.max_seq_len, d),
        ];
        for l in 0..self.layers {
            shapes.push((format!("layer{l}.wq"), d, d));
            shapes.push((format!("layer{l}.wk"), d, d));
            shapes.push((format!("layer{l}.wv"), d, d));
            shapes.push((format!("layer{l}.wo"), d, d));
            shapes.push((format!("layer{l}.ffn_w1"), d, self.ffn_dim()));
            shapes.push((format!("layer{l}.ffn_b1"), 1, self.ffn_dim()));
            shapes.push((format!("layer{l}.ffn_w2"), self.ffn_dim(), d));
            shapes.push((format!("layer{l}.ffn_b2"), 1, d));
        }
        shapes.push(("unembed".to_string(), d, self.vocab_size));
        shapes
    }
}

/// All learned arrays, stored in the order given by
/// [`ModelConfig::param_shapes`].
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    arrays: Vec<Mat>,
}

impl Parameters {
    /// Deterministic zero-mean normal initialization with the given scale.
    pub fn init(config: &ModelConfig, seed: u64, scale: f64) -> Result<Self> {
        config.validate()?;
        if scale <= 0.0 {
            return Err(Error::Config("init scale must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arrays = config
            .param_shapes()
            .iter()
            .map(|(_, r, c)| {
                let data = (0..r * c)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * scale
                    })
                    .collect();
                Mat::from_vec(*r, *c, data)
            })
            .collect();
        Ok(Parameters {
            config: config.clone(),
            arrays,
        })
    }

    pub fn from_arrays(config: &ModelConfig, arrays: Vec<Mat>) -> Result<Self> {
        let shapes = config.param_shapes();
        if arrays.len() != shapes.len() {
            return Err(Error::Config(format!(
                "expected {} parameter arrays, got {}",
                shapes.len(),
                arrays.len()
            )));
        }
        for ((name, r, c), m) in shapes.iter().zip(&arrays) {
            if m.rows != *r || m.cols != *c {
                return Err(Error::Config(format!(
                    "parameter {name}: expected {r}x{c}, got {}x{}",
                    m.rows, m.cols
                )));
            }
        }
        Ok(Parameters {
            config: config.clone(),
            arrays,
        })
    }

    pub fn arrays(&self) -> &[Mat] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Mat] {
        &mut self.arrays
    }

    pub fn named(&self) -> Vec<(String, &Mat)> {
        self.config
            .param_shapes()
            .into_iter()
            .map(|(n, _, _)| n)
            .zip(self.arrays.iter())
            .collect()
    }

    /// Flat copies of every array, in canonical order.
    pub fn to_flat(&self) -> Vec<Vec<f64>> {
        self.arrays.iter().map(|m| m.data.clone()).collect()
    }

    pub fn from_flat(config: &ModelConfig, flat: &[Vec<f64>]) -> Result<Self> {
        let shapes = config.param_shapes();
        if flat.len() != shapes.len() {
            return Err(Error::Config("flat parameter arity mismatch".into()));
        }
        let arrays = shapes
            .iter()
            .zip(flat)
            .map(|((_, r, c), v)| Mat::from_vec(*r, *c, v.clone()))
            .collect();
        Ok(Parameters {
            config: config.clone(),
            arrays,
        })
    }

    fn index_of(&self, name: &str) -> usize {
        self.config
            .param_shapes()
            .iter()
            .position(|(n, _, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn array(&self, name: &str) -> &Mat {
        &self.arrays[self.index_of(name)]
    }
}

// ── Forward graph ───────────────────────────────────────────────────────

/// Tape nodes for one attention head: pre-softmax scores (causal mask
/// already added) and post-softmax weights, both seq_len × seq_len.
#[derive(Debug, Clone, Copy)]
pub struct AttnNodes {
    pub scores: NodeId,
    pub weights: NodeId,
}

/// Node handles into a recorded forward pass.
pub struct ForwardGraph {
    pub logits: NodeId,
    /// `[layer][head]` attention nodes.
    pub heads: Vec<Vec<AttnNodes>>,
    /// Leaf node per parameter array, canonical order.
    pub param_leaves: Vec<NodeId>,
    pub audio_len: usize,
    pub seq_len: usize,
}

fn layer_norm(t: &mut Tape, x: NodeId) -> NodeId {
    let cols = t.shape(x).1;
    let mean = t.row_mean(x);
    let mean_b = t.broadcast_col(mean, cols);
    let centered = t.sub(x, mean_b);
    let sq = t.mul(centered, centered);
    let var = t.row_mean(sq);
    let var_eps = t.add_scalar(var, LN_EPS);
    let inv_std = t.pow(var_eps, -0.5);
    let inv_b = t.broadcast_col(inv_std, cols);
    t.mul(centered, inv_b)
}

fn add_bias(t: &mut Tape, x: NodeId, bias: NodeId) -> NodeId {
    let rows = t.shape(x).0;
    let b = t.broadcast_row(bias, rows);
    t.add(x, b)
}

fn validate_tokens(cfg: &ModelConfig, tokens: &[TokenId]) -> Result<()> {
    for &tok in tokens {
        if tok >= cfg.vocab_size {
            return Err(Error::Config(format!(
                "token id {tok} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }
    }
    Ok(())
}

/// Record the full forward pass on `tape`. `audio` of `None` (or zero
/// rows) builds the text-only sequence with positions re-based from zero.
pub fn build_forward(
    tape: &mut Tape,
    params: &Parameters,
    audio: Option<&Mat>,
    tokens: &[TokenId],
) -> Result<ForwardGraph> {
    let param_leaves: Vec<NodeId> = params.arrays.iter().map(|m| tape.leaf_mat(m)).collect();
    build_forward_shared(tape, params, &param_leaves, audio, tokens)
}

/// As [`build_forward`], but reusing already-registered parameter leaves so
/// multiple sequences in one batch accumulate gradients into one slot per
/// array.
pub fn build_forward_shared(
    tape: &mut Tape,
    params: &Parameters,
    param_leaves: &[NodeId],
    audio: Option<&Mat>,
    tokens: &[TokenId],
) -> Result<ForwardGraph> {
    let cfg = &params.config;
    validate_tokens(cfg, tokens)?;
    let audio = audio.filter(|a| a.rows > 0);
    if let Some(a) = audio {
        if a.cols != cfg.d_audio {
            return Err(Error::Config(format!(
                "audio feature width {} != d_audio {}",
                a.cols, cfg.d_audio
            )));
        }
    }
    let a_len = audio.map_or(0, |a| a.rows);
    let seq_len = a_len + tokens.len();
    if seq_len == 0 {
        return Err(Error::Config("empty input sequence".into()));
    }
    if seq_len > cfg.max_seq_len {
        return Err(Error::Config(format!(
            "sequence length {seq_len} exceeds max {}",
            cfg.max_seq_len
        )));
    }

    let shapes = cfg.param_shapes();
    assert_eq!(param_leaves.len(), shapes.len(), "parameter leaf arity");
    let leaf = |name: &str| -> NodeId {
        let idx = shapes
            .iter()
            .position(|(n, _, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        param_leaves[idx]
    };

    let x0 = match audio {
        Some(a) => {
            let audio_leaf = tape.leaf_mat(a);
            let audio_emb = tape.matmul(audio_leaf, leaf("embed.audio"));
            if tokens.is_empty() {
                audio_emb
            } else {
                let tok_emb = tape.gather_rows(leaf("embed.tok"), tokens);
                tape.concat_rows(&[audio_emb, tok_emb])
            }
        }
        None => tape.gather_rows(leaf("embed.tok"), tokens),
    };
    let pos = tape.slice_rows(leaf("embed.pos"), 0, seq_len);
    let mut x = tape.add(x0, pos);

    let mut mask = vec![0.0; seq_len * seq_len];
    for q in 0..seq_len {
        for k in (q + 1)..seq_len {
            mask[q * seq_len + k] = NEG_MASK;
        }
    }
    let mask_leaf = tape.leaf(seq_len, seq_len, mask);

    let dh = cfg.head_dim();
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let xn = layer_norm(tape, x);
        let q = tape.matmul(xn, leaf(&format!("layer{l}.wq")));
        let k = tape.matmul(xn, leaf(&format!("layer{l}.wk")));
        let v = tape.matmul(xn, leaf(&format!("layer{l}.wv")));

        let mut layer_heads = Vec::with_capacity(cfg.heads);
        let mut ctx_parts = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
            let kt = tape.transpose(kh);
            let raw = tape.matmul(qh, kt);
            let scaled = tape.scale(raw, inv_sqrt_dh);
            let scores = tape.add(scaled, mask_leaf);
            let weights = tape.softmax_rows(scores);
            let ctx = tape.matmul(weights, vh);
            ctx_parts.push(ctx);
            layer_heads.push(AttnNodes { scores, weights });
        }
        let ctx = tape.concat_cols(&ctx_parts);
        let attn_out = tape.matmul(ctx, leaf(&format!("layer{l}.wo")));
        x = tape.add(x, attn_out);

        let xn2 = layer_norm(tape, x);
        let h1 = tape.matmul(xn2, leaf(&format!("layer{l}.ffn_w1")));
        let h1b = add_bias(tape, h1, leaf(&format!("layer{l}.ffn_b1")));
        let act = tape.tanh(h1b);
        let h2 = tape.matmul(act, leaf(&format!("layer{l}.ffn_w2")));
        let h2b = add_bias(tape, h2, leaf(&format!("layer{l}.ffn_b2")));
        x = tape.add(x, h2b);

        heads.push(layer_heads);
    }

    let xf = layer_norm(tape, x);
    let logits = tape.matmul(xf, leaf("unembed"));
    Ok(ForwardGraph {
        logits,
        heads,
        param_leaves: param_leaves.to_vec(),
        audio_len: a_len,
        seq_len,
    })
}

// ── Extracted trace ─────────────────────────────────────────────────────

/// Values extracted from one forward pass: next-token logits at every
/// position and the full (layer, head, query, key) attention tensor with
/// causal masking. `S_audio` is the contiguous range `0..audio_len`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Mat,
    /// `[layer][head]`, each seq_len × seq_len.
    pub attn: Vec<Vec<Mat>>,
    pub audio_len: usize,
    pub prompt_len: usize,
    pub completion_len: usize,
}

impl ForwardTrace {
    pub fn prefix_len(&self) -> usize {
        self.audio_len + self.prompt_len
    }

    pub fn seq_len(&self) -> usize {
        self.prefix_len() + self.completion_len
    }

    /// Absolute attention-query position for completion token `t`
    /// (1-indexed): prefix length + t - 1.
    pub fn query_pos(&self, t: usize) -> usize {
        debug_assert!(t >= 1 && t <= self.completion_len);
        self.prefix_len() + t - 1
    }

    /// Row of `logits` that predicts completion token `t` (1-indexed).
    pub fn pred_row(&self, t: usize) -> usize {
        self.query_pos(t) - 1
    }
}

fn extract_trace(
    tape: &Tape,
    graph: &ForwardGraph,
    prompt_len: usize,
    completion_len: usize,
) -> Result<ForwardTrace> {
    let v = tape.shape(graph.logits).1;
    let logits = Mat::from_vec(graph.seq_len, v, tape.values(graph.logits)?.to_vec());
    let mut attn = Vec::with_capacity(graph.heads.len());
    for layer in &graph.heads {
        let mut per_head = Vec::with_capacity(layer.len());
        for nodes in layer {
            per_head.push(Mat::from_vec(
                graph.seq_len,
                graph.seq_len,
                tape.values(nodes.weights)?.to_vec(),
            ));
        }
        attn.push(per_head);
    }
    Ok(ForwardTrace {
        logits,
        attn,
        audio_len: graph.audio_len,
        prompt_len,
        completion_len,
    })
}

/// Forward pass over `[audio | prompt | completion]`, returning extracted
/// values. Gradients are not needed here; the tape is dropped.
pub fn forward_multimodal(
    params: &Parameters,
    audio: &Mat,
    prompt: &[TokenId],
    completion: &[TokenId],
) -> Result<ForwardTrace> {
    let mut tape = Tape::new();
    let tokens: Vec<TokenId> = prompt.iter().chain(completion).copied().collect();
    let graph = build_forward(&mut tape, params, Some(audio), &tokens)?;
    extract_trace(&tape, &graph, prompt.len(), completion.len())
}

/// Identical computation with the audio prefix removed from the sequence
/// entirely; positions are re-based so the prompt starts at position 0.
pub fn forward_text_ablated(
    params: &Parameters,
    prompt: &[TokenId],
    completion: &[TokenId],
) -> Result<ForwardTrace> {
    let mut tape = Tape::new();
    let tokens: Vec<TokenId> = prompt.iter().chain(completion).copied().collect();
    let graph = build_forward(&mut tape, params, None, &tokens)?;
    extract_trace(&tape, &graph, prompt.len(), completion.len())
}

// ── Logprobs ────────────────────────────────────────────────────────────

/// Per-token log-probabilities of `completion` under the full (untruncated)
/// next-token distribution recorded in `trace`.
pub fn completion_logprobs(trace: &ForwardTrace, completion: &[TokenId]) -> Result<Vec<f64>> {
    if completion.len() != trace.completion_len {
        return Err(Error::LengthMismatch {
            context: "completion_logprobs",
            left: completion.len(),
            right: trace.completion_len,
        });
    }
    let v = trace.logits.cols;
    let mut out = Vec::with_capacity(completion.len());
    for (i, &tok) in completion.iter().enumerate() {
        if tok >= v {
            return Err(Error::Config(format!("token id {tok} outside vocab {v}")));
        }
        let row = trace.logits.row(trace.pred_row(i + 1));
        out.push(log_softmax_entry(row, tok));
    }
    Ok(out)
}

fn log_softmax_entry(row: &[f64], idx: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|z| (z - m).exp()).sum::<f64>().ln() + m;
    row[idx] - lse
}

// ── Sampling ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodingParams {
    pub temperature: f64,
    /// Requested top-k; clamped to the vocabulary size at sampling time.
    pub top_k: usize,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub max_new_tokens: usize,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            temperature: 1.2,
            top_k: 50,
            top_p: 0.99,
            repetition_penalty: 1.0,
            max_new_tokens: 24,
        }
    }
}

impl DecodingParams {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config("top_p must be in (0, 1]".into()));
        }
        if self.repetition_penalty <= 0.0 {
            return Err(Error::Config("repetition_penalty must be > 0".into()));
        }
        Ok(())
    }

    /// Greedy decoding: argmax at every step.
    pub fn greedy(max_new_tokens: usize) -> Self {
        DecodingParams {
            temperature: 1.0,
            top_k: 1,
            top_p: 1.0,
            repetition_penalty: 1.0,
            max_new_tokens,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sampled {
    pub tokens: Vec<TokenId>,
    /// Log-probability of each sampled token under the truncated,
    /// renormalized distribution it was drawn from.
    pub logprobs: Vec<f64>,
}

/// Ancestral sampling: repetition penalty on previously generated ids,
/// temperature, top-k truncation, then nucleus truncation and
/// renormalization. Deterministic given the seed. Stops after `eos` or
/// `max_new_tokens`.
pub fn sample_completion(
    params: &Parameters,
    audio: &Mat,
    prompt: &[TokenId],
    decoding: &DecodingParams,
    eos: TokenId,
    seed: u64,
) -> Result<Sampled> {
    decoding.validate()?;
    let cfg = &params.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens: Vec<TokenId> = Vec::new();
    let mut logprobs: Vec<f64> = Vec::new();

    let budget = cfg
        .max_seq_len
        .saturating_sub(audio.rows + prompt.len())
        .min(decoding.max_new_tokens);
    for _ in 0..budget {
        let mut tape = Tape::new();
        let all: Vec<TokenId> = prompt.iter().chain(tokens.iter()).copied().collect();
        let graph = build_forward(&mut tape, params, Some(audio), &all)?;
        let logits_all = tape.values(graph.logits)?;
        let v = cfg.vocab_size;
        let mut row: Vec<f64> = logits_all[(graph.seq_len - 1) * v..].to_vec();

        if decoding.repetition_penalty != 1.0 {
            for &tok in &tokens {
                let z = &mut row[tok];
                if *z > 0.0 {
                    *z /= decoding.repetition_penalty;
                } else {
                    *z *= decoding.repetition_penalty;
                }
            }
        }
        for z in row.iter_mut() {
            *z /= decoding.temperature;
        }

        let (tok, lp) = sample_from_row(&row, decoding, &mut rng);
        tokens.push(tok);
        logprobs.push(lp);
        if tok == eos {
            break;
        }
    }
    Ok(Sampled { tokens, logprobs })
}

fn sample_from_row(row: &[f64], decoding: &DecodingParams, rng: &mut ChaCha8Rng) -> (TokenId, f64) {
    let v = row.len();
    let k = decoding.top_k.min(v);
    // Sort token ids by logit descending, ties by id ascending.
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);

    // Softmax over the kept set.
    let m = order.iter().map(|&i| row[i]).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = order.iter().map(|&i| (row[i] - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();

    // Nucleus cut: keep the smallest prefix with cumulative mass >= top_p.
    let mut keep = order.len();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if cum >= decoding.top_p {
            keep = i + 1;
            break;
        }
    }
    let kept_mass: f64 = probs[..keep].iter().sum();

    let u: f64 = rand::Rng::gen::<f64>(rng) * kept_mass;
    let mut acc = 0.0;
    let mut choice = keep - 1;
    for (i, p) in probs[..keep].iter().enumerate() {
        acc += p;
        if u < acc {
            choice = i;
            break;
        }
    }
    let lp = if keep == 1 {
        0.0
    } else {
        (probs[choice] / kept_mass).ln()
    };
    (order[choice], lp)
}

// ── Checkpoints ─────────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 5] = b"MAPO1";

/// Write `params` to `path`: magic, config block, named parameter blocks
/// (name, shape, little-endian f64 values), then an FNV-1a 64-bit checksum
/// of all value bytes. Returns the checksum.
pub fn save_checkpoint(path: &Path, params: &Parameters) -> Result<u64> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg_json = serde_json::to_vec(&params.config)?;
    out.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg_json);
    out.extend_from_slice(&(params.arrays.len() as u32).to_le_bytes());
    let mut hash = Fnv64::new();
    for (name, m) in params.named() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols as u32).to_le_bytes());
        for v in &m.data {
            let bytes = v.to_le_bytes();
            hash.update(&bytes);
            out.extend_from_slice(&bytes);
        }
    }
    let checksum = hash.finish();
    out.extend_from_slice(&checksum.to_le_bytes());
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(checksum)
}

pub fn load_checkpoint(path: &Path) -> Result<Parameters> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    let read_u32 = |cur: &mut usize| -> Result<u32> {
        let s = take(cur, 4)?;
        Ok(u32::from_le_bytes(s.try_into().unwrap()))
    };

    if take(&mut cur, 5)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let cfg_len = read_u32(&mut cur)? as usize;
    let config: ModelConfig = serde_json::from_slice(take(&mut cur, cfg_len)?)?;
    config.validate()?;
    let n_arrays = read_u32(&mut cur)? as usize;

    let mut hash = Fnv64::new();
    let mut arrays = Vec::with_capacity(n_arrays);
    let mut names = Vec::with_capacity(n_arrays);
    for _ in 0..n_arrays {
        let name_len = read_u32(&mut cur)? as usize;
        let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("bad parameter name".into()))?;
        let rows = read_u32(&mut cur)? as usize;
        let cols = read_u32(&mut cur)? as usize;
        let raw = take(&mut cur, rows * cols * 8)?;
        hash.update(raw);
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        names.push(name);
        arrays.push(Mat::from_vec(rows, cols, data));
    }
    let stored = u64::from_le_bytes(
        take(&mut cur, 8)?
            .try_into()
            .map_err(|_| Error::Checkpoint("truncated checksum".into()))?,
    );
    let computed = hash.finish();
    if stored != computed {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
        )));
    }
    let expected: Vec<String> = config.param_shapes().into_iter().map(|(n, _, _)| n).collect();
    if names != expected {
        return Err(Error::Checkpoint("parameter names out of order".into()));
    }
    Parameters::from_arrays(&config, arrays)
}
