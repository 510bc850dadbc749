//! Toy dual encoders with hand-written backward passes.
//!
//! Image tower: per-patch linear + tanh, mean-pool over surviving patches,
//! hidden linear + tanh + dropout, output projection, ℓ2 normalization.
//!
//! Text tower: embedding lookup, mean-pool over non-pad tokens, optional
//! manifold mixup of the pooled vector, hidden linear + tanh + dropout,
//! output projection, ℓ2 normalization.
//!
//! Randomness (TokenDrop, dropout) is keyed by each row's `key`, so a sample
//! sees the same masks whether it is encoded in a full batch, a worker shard
//! or a DGA sub-batch.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{contract, invalid, LabError, Result};
use crate::mixup::{Modality, MixupDecision};
use crate::numerics::{l2_normalize_backward, l2_normalize_rows, seeded_dropout_mask, Matrix, NormContext, SeedContext};

/// Unit-norm embeddings, one row per sample.
pub type EmbeddingBatch = Matrix;

pub const PAD_TOKEN: u32 = 0;
pub const MASK_TOKEN: u32 = 1;
/// First id available for ordinary tokens.
pub const FIRST_REGULAR_TOKEN: u32 = 2;

pub const INITIAL_TEMPERATURE: f64 = 0.02;
pub const MIN_TEMPERATURE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub d_patch: usize,
    pub image_hidden: usize,
    pub text_hidden: usize,
    pub d_emb: usize,
    pub vocab: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            d_patch: 16,
            image_hidden: 64,
            text_hidden: 64,
            d_emb: 512,
            vocab: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tower {
    Image,
    Text,
}

impl std::fmt::Display for Tower {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Tower::Image => "image",
            Tower::Text => "text",
        })
    }
}

impl std::str::FromStr for Tower {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Tower::Image),
            "text" => Ok(Tower::Text),
            other => Err(invalid(format!("unknown tower `{other}` (expected image|text)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTower {
    /// d_patch × h
    pub patch_proj: Matrix,
    /// h × h
    pub hidden: Matrix,
    /// h × d_emb
    pub output: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextTower {
    /// V × h
    pub embedding: Matrix,
    /// h × h
    pub hidden: Matrix,
    /// h × d_emb
    pub output: Matrix,
}

impl ImageTower {
    pub fn init(d_patch: usize, hidden: usize, d_emb: usize, ctx: &SeedContext) -> Self {
        Self {
            patch_proj: Matrix::random_uniform(d_patch, hidden, 1.0 / (d_patch as f64).sqrt(), &ctx.derive("patch_proj")),
            hidden: Matrix::random_uniform(hidden, hidden, 1.0 / (hidden as f64).sqrt(), &ctx.derive("hidden")),
            output: Matrix::random_uniform(hidden, d_emb, 1.0 / (hidden as f64).sqrt(), &ctx.derive("output")),
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self {
            patch_proj: Matrix::zeros(other.patch_proj.rows(), other.patch_proj.cols()),
            hidden: Matrix::zeros(other.hidden.rows(), other.hidden.cols()),
            output: Matrix::zeros(other.output.rows(), other.output.cols()),
        }
    }

    fn blocks(&self) -> [&Matrix; 3] {
        [&self.patch_proj, &self.hidden, &self.output]
    }

    fn blocks_mut(&mut self) -> [&mut Matrix; 3] {
        [&mut self.patch_proj, &mut self.hidden, &mut self.output]
    }
}

impl TextTower {
    pub fn init(vocab: usize, hidden: usize, d_emb: usize, ctx: &SeedContext) -> Self {
        // An embedding row has a single active input, so fan-in is 1.
        Self {
            embedding: Matrix::random_uniform(vocab, hidden, 1.0, &ctx.derive("embedding")),
            hidden: Matrix::random_uniform(hidden, hidden, 1.0 / (hidden as f64).sqrt(), &ctx.derive("hidden")),
            output: Matrix::random_uniform(hidden, d_emb, 1.0 / (hidden as f64).sqrt(), &ctx.derive("output")),
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self {
            embedding: Matrix::zeros(other.embedding.rows(), other.embedding.cols()),
            hidden: Matrix::zeros(other.hidden.rows(), other.hidden.cols()),
            output: Matrix::zeros(other.output.rows(), other.output.cols()),
        }
    }

    fn blocks(&self) -> [&Matrix; 3] {
        [&self.embedding, &self.hidden, &self.output]
    }

    fn blocks_mut(&mut self) -> [&mut Matrix; 3] {
        [&mut self.embedding, &mut self.hidden, &mut self.output]
    }
}

pub const BLOCK_NAMES: [&str; 6] = [
    "image.patch_proj",
    "image.hidden",
    "image.output",
    "text.embedding",
    "text.hidden",
    "text.output",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub image: ImageTower,
    pub text: TextTower,
    pub tau: f64,
    pub freeze_image: bool,
    pub freeze_text: bool,
    pub dropout: f64,
}

impl EncoderParams {
    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            d_patch: self.image.patch_proj.rows(),
            image_hidden: self.image.hidden.rows(),
            text_hidden: self.text.hidden.rows(),
            d_emb: self.image.output.cols(),
            vocab: self.text.embedding.rows(),
        }
    }

    pub fn is_frozen(&self, tower: Tower) -> bool {
        match tower {
            Tower::Image => self.freeze_image,
            Tower::Text => self.freeze_text,
        }
    }

    pub fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
        BLOCK_NAMES
            .iter()
            .copied()
            .zip(self.image.blocks().into_iter().chain(self.text.blocks()))
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let (img, txt) = (&mut self.image, &mut self.text);
        BLOCK_NAMES
            .iter()
            .copied()
            .zip(img.blocks_mut().into_iter().chain(txt.blocks_mut()))
            .collect()
    }

    /// All weights followed by τ.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.blocks().iter().flat_map(|(_, m)| m.data().iter().copied()).collect();
        v.push(self.tau);
        v
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected: usize = self.blocks().iter().map(|(_, m)| m.data().len()).sum::<usize>() + 1;
        if flat.len() != expected {
            return Err(contract(format!("flat parameter vector has {} entries, expected {expected}", flat.len())));
        }
        let mut offset = 0;
        for (_, m) in self.blocks_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        self.tau = flat[offset];
        Ok(())
    }

    /// Order-sensitive checksum of one tower's weights.
    pub fn tower_checksum(&self, tower: Tower) -> u64 {
        let blocks = match tower {
            Tower::Image => self.image.blocks(),
            Tower::Text => self.text.blocks(),
        };
        blocks.iter().fold(0u64, |acc, m| acc.rotate_left(7) ^ m.checksum())
    }
}

pub fn init_params(dims: EncoderDims, dropout: f64, ctx: &SeedContext) -> Result<EncoderParams> {
    if dims.d_patch == 0 || dims.image_hidden == 0 || dims.text_hidden == 0 || dims.d_emb == 0 {
        return Err(invalid("encoder dimensions must be positive"));
    }
    if dims.vocab <= FIRST_REGULAR_TOKEN as usize {
        return Err(invalid(format!("vocabulary of {} leaves no regular tokens", dims.vocab)));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(invalid(format!("dropout must lie in [0, 1), got {dropout}")));
    }
    Ok(EncoderParams {
        image: ImageTower::init(dims.d_patch, dims.image_hidden, dims.d_emb, &ctx.derive("image")),
        text: TextTower::init(dims.vocab, dims.text_hidden, dims.d_emb, &ctx.derive("text")),
        tau: INITIAL_TEMPERATURE,
        freeze_image: false,
        freeze_text: false,
        dropout,
    })
}

/// Gradients laid out like [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub image: ImageTower,
    pub text: TextTower,
    pub tau: f64,
}

impl ParamGrads {
    pub fn zeros_like(p: &EncoderParams) -> Self {
        Self {
            image: ImageTower::zeros_like(&p.image),
            text: TextTower::zeros_like(&p.text),
            tau: 0.0,
        }
    }

    pub fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
        BLOCK_NAMES
            .iter()
            .copied()
            .zip(self.image.blocks().into_iter().chain(self.text.blocks()))
            .collect()
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.image.blocks_mut().into_iter().zip(other.image.blocks()) {
            a.add_assign(b);
        }
        for (a, b) in self.text.blocks_mut().into_iter().zip(other.text.blocks()) {
            a.add_assign(b);
        }
        self.tau += other.tau;
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.blocks().iter().flat_map(|(_, m)| m.data().iter().copied()).collect();
        v.push(self.tau);
        v
    }

    pub fn norm(&self) -> f64 {
        self.to_flat().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tau.is_finite() && self.blocks().iter().all(|(_, m)| m.is_finite())
    }
}

/// N samples, each a P × d_patch matrix of patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    samples: Vec<Matrix>,
    keys: Vec<u64>,
}

impl ImageBatch {
    pub fn new(samples: Vec<Matrix>) -> Result<Self> {
        let keys = (0..samples.len() as u64).collect();
        Self::with_keys(samples, keys)
    }

    pub fn with_keys(samples: Vec<Matrix>, keys: Vec<u64>) -> Result<Self> {
        if samples.len() != keys.len() {
            return Err(contract("image batch keys must match sample count"));
        }
        if let Some(first) = samples.first() {
            let shape = first.shape();
            if shape.0 == 0 {
                return Err(invalid("image samples need at least one patch"));
            }
            if let Some(i) = samples.iter().position(|s| s.shape() != shape) {
                return Err(contract(format!("image sample {i} has shape {:?}, expected {shape:?}", samples[i].shape())));
            }
        }
        Ok(Self { samples, keys })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn patches(&self) -> usize {
        self.samples.first().map_or(0, Matrix::rows)
    }

    pub fn d_patch(&self) -> usize {
        self.samples.first().map_or(0, Matrix::cols)
    }

    pub fn samples(&self) -> &[Matrix] {
        &self.samples
    }

    pub fn keys(&self) -> &[u64] {
        &self.keys
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            samples: self.samples[start..end].to_vec(),
            keys: self.keys[start..end].to_vec(),
        }
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            samples: rows.iter().map(|&r| self.samples[r].clone()).collect(),
            keys: rows.iter().map(|&r| self.keys[r]).collect(),
        }
    }
}

/// N token sequences. `PAD_TOKEN` entries are excluded from pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBatch {
    sequences: Vec<Vec<u32>>,
    keys: Vec<u64>,
}

impl TextBatch {
    pub fn new(sequences: Vec<Vec<u32>>) -> Self {
        let keys = (0..sequences.len() as u64).collect();
        Self { sequences, keys }
    }

    pub fn with_keys(sequences: Vec<Vec<u32>>, keys: Vec<u64>) -> Result<Self> {
        if sequences.len() != keys.len() {
            return Err(contract("text batch keys must match sequence count"));
        }
        Ok(Self { sequences, keys })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn keys(&self) -> &[u64] {
        &self.keys
    }

    /// Padded id matrix (row-major, `PAD_TOKEN` fill) and its 0/1 validity mask.
    pub fn padded(&self) -> (Vec<Vec<u32>>, Vec<Vec<bool>>) {
        let width = self.sequences.iter().map(Vec::len).max().unwrap_or(0);
        self.sequences
            .iter()
            .map(|s| {
                let mut ids = s.clone();
                ids.resize(width, PAD_TOKEN);
                let mask = ids.iter().map(|&t| t != PAD_TOKEN).collect();
                (ids, mask)
            })
            .unzip()
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            sequences: self.sequences[start..end].to_vec(),
            keys: self.keys[start..end].to_vec(),
        }
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            sequences: rows.iter().map(|&r| self.sequences[r].clone()).collect(),
            keys: rows.iter().map(|&r| self.keys[r]).collect(),
        }
    }
}

/// Manifold mixup of the pooled text vector: `λ·v_j + (1−λ)·v_partner(j)`,
/// where row j of `partners` holds the partner's tokens.
#[derive(Debug, Clone)]
pub struct TextMix {
    pub lambda: f64,
    pub partners: TextBatch,
}

impl TextMix {
    /// Mirrored partners `r(j) = N−1−j` within `batch`.
    pub fn from_decision(decision: &MixupDecision, batch: &TextBatch) -> Result<Self> {
        if decision.modality != Modality::Text {
            return Err(contract("manifold mixup requested with an image-modality decision"));
        }
        if decision.n != batch.len() {
            return Err(contract(format!("mixup decision is for {} rows, batch has {}", decision.n, batch.len())));
        }
        let rows: Vec<usize> = (0..batch.len()).map(|j| decision.partner(j)).collect();
        Ok(Self {
            lambda: decision.lambda,
            partners: batch.select(&rows),
        })
    }
}

#[derive(Debug, Clone)]
struct HeadTape {
    /// pooled input to the hidden layer (N × h)
    pooled: Matrix,
    /// tanh(pooled · W_hidden)
    activated: Matrix,
    mask: Matrix,
    /// activated ⊙ mask
    dropped: Matrix,
    norm: NormContext,
}

#[derive(Debug, Clone)]
pub struct ImageTape {
    kept: Vec<Vec<usize>>,
    /// per sample: kept patch inputs (k × d_patch)
    inputs: Vec<Matrix>,
    /// per sample: tanh(kept · W_patch) (k × h)
    patch_act: Vec<Matrix>,
    head: HeadTape,
}

impl ImageTape {
    pub fn kept_patches(&self) -> &[Vec<usize>] {
        &self.kept
    }

    pub fn dropout_mask(&self) -> &Matrix {
        &self.head.mask
    }
}

#[derive(Debug, Clone)]
pub struct TextTape {
    tokens: Vec<Vec<u32>>,
    partner_tokens: Option<Vec<Vec<u32>>>,
    lambda: f64,
    head: HeadTape,
}

impl TextTape {
    pub fn dropout_mask(&self) -> &Matrix {
        &self.head.mask
    }
}

fn head_forward(
    pooled: Matrix,
    hidden: &Matrix,
    output: &Matrix,
    dropout: f64,
    keys: &[u64],
    ctx: &SeedContext,
) -> Result<(EmbeddingBatch, HeadTape)> {
    let activated = pooled.matmul(hidden).map(f64::tanh);
    let h = activated.cols();
    let mut mask = Matrix::zeros(activated.rows(), h);
    for (i, &key) in keys.iter().enumerate() {
        let row = seeded_dropout_mask(1, h, dropout, &ctx.for_row(key))?;
        mask.row_mut(i).copy_from_slice(row.data());
    }
    let dropped = activated.zip_map(&mask, |a, m| a * m);
    let raw = dropped.matmul(output);
    raw.ensure_finite("encoder output")?;
    let (emb, norm) = l2_normalize_rows(&raw)?;
    Ok((
        emb,
        HeadTape {
            pooled,
            activated,
            mask,
            dropped,
            norm,
        },
    ))
}

/// Returns (d hidden W, d output W, d pooled).
fn head_backward(tape: &HeadTape, hidden: &Matrix, output: &Matrix, upstream: &Matrix) -> (Matrix, Matrix, Matrix) {
    let d_raw = l2_normalize_backward(&tape.norm, upstream);
    let d_output = tape.dropped.t_matmul(&d_raw);
    let d_dropped = d_raw.matmul_t(output);
    let d_pre = Matrix::from_fn(d_dropped.rows(), d_dropped.cols(), |i, j| {
        let a = tape.activated[(i, j)];
        d_dropped[(i, j)] * tape.mask[(i, j)] * (1.0 - a * a)
    });
    let d_hidden = tape.pooled.t_matmul(&d_pre);
    let d_pooled = d_pre.matmul_t(hidden);
    (d_hidden, d_output, d_pooled)
}

pub fn encode_images(
    p: &EncoderParams,
    x: &ImageBatch,
    token_drop_rate: f64,
    ctx: &SeedContext,
) -> Result<(EmbeddingBatch, ImageTape)> {
    if !(0.0..1.0).contains(&token_drop_rate) {
        return Err(invalid(format!("token drop rate must lie in [0, 1), got {token_drop_rate}")));
    }
    if x.is_empty() {
        return Err(invalid("empty image batch"));
    }
    if x.d_patch() != p.image.patch_proj.rows() {
        return Err(contract(format!(
            "image features have {} dims, tower expects {}",
            x.d_patch(),
            p.image.patch_proj.rows()
        )));
    }
    let patches = x.patches();
    let n_drop = (token_drop_rate * patches as f64).floor() as usize;
    if n_drop >= patches {
        return Err(LabError::DegenerateInput {
            what: format!("token drop removes all {patches} patches"),
            index: 0,
        });
    }
    let h = p.image.patch_proj.cols();
    let drop_ctx = ctx.derive("token-drop");
    let mut kept_all = Vec::with_capacity(x.len());
    let mut inputs = Vec::with_capacity(x.len());
    let mut patch_act = Vec::with_capacity(x.len());
    let mut pooled = Matrix::zeros(x.len(), h);
    for (i, (sample, &key)) in x.samples().iter().zip(x.keys()).enumerate() {
        let mut order: Vec<usize> = (0..patches).collect();
        if n_drop > 0 {
            let mut rng = drop_ctx.for_row(key).rng();
            order.shuffle(&mut rng);
        }
        let mut kept: Vec<usize> = order[n_drop..].to_vec();
        kept.sort_unstable();
        let kept_inputs = sample.select_rows(&kept);
        let act = kept_inputs.matmul(&p.image.patch_proj).map(f64::tanh);
        let k = kept.len() as f64;
        for r in 0..act.rows() {
            for (o, &a) in pooled.row_mut(i).iter_mut().zip(act.row(r)) {
                *o += a / k;
            }
        }
        kept_all.push(kept);
        inputs.push(kept_inputs);
        patch_act.push(act);
    }
    let (emb, head) = head_forward(pooled, &p.image.hidden, &p.image.output, p.dropout, x.keys(), &ctx.derive("image-dropout"))?;
    Ok((
        emb,
        ImageTape {
            kept: kept_all,
            inputs,
            patch_act,
            head,
        },
    ))
}

fn pool_tokens(embedding: &Matrix, seq: &[u32], row: usize, out: &mut [f64]) -> Result<()> {
    let vocab = embedding.rows();
    let mut count = 0usize;
    for &t in seq {
        if t as usize >= vocab {
            return Err(contract(format!("token id {t} in row {row} is outside the vocabulary of {vocab}")));
        }
        if t != PAD_TOKEN {
            count += 1;
        }
    }
    if count == 0 {
        return Err(LabError::DegenerateInput {
            what: "text sequence has no non-pad tokens".into(),
            index: row,
        });
    }
    out.iter_mut().for_each(|o| *o = 0.0);
    let inv = 1.0 / count as f64;
    for &t in seq.iter().filter(|&&t| t != PAD_TOKEN) {
        for (o, &e) in out.iter_mut().zip(embedding.row(t as usize)) {
            *o += e * inv;
        }
    }
    Ok(())
}

fn non_pad(seqs: &[Vec<u32>]) -> Vec<Vec<u32>> {
    seqs.iter()
        .map(|s| s.iter().copied().filter(|&t| t != PAD_TOKEN).collect())
        .collect()
}

pub fn encode_texts(
    p: &EncoderParams,
    x: &TextBatch,
    manifold_mix: Option<&TextMix>,
    ctx: &SeedContext,
) -> Result<(EmbeddingBatch, TextTape)> {
    if x.is_empty() {
        return Err(invalid("empty text batch"));
    }
    let h = p.text.embedding.cols();
    let mut pooled = Matrix::zeros(x.len(), h);
    for (i, seq) in x.sequences().iter().enumerate() {
        pool_tokens(&p.text.embedding, seq, i, pooled.row_mut(i))?;
    }
    let (lambda, partner_tokens) = match manifold_mix {
        None => (1.0, None),
        Some(mix) => {
            if mix.partners.len() != x.len() {
                return Err(contract("manifold mixup partner count differs from batch size"));
            }
            if !(0.0..=1.0).contains(&mix.lambda) {
                return Err(invalid(format!("mixup λ must lie in [0, 1], got {}", mix.lambda)));
            }
            let mut partner = vec![0.0; h];
            for (i, seq) in mix.partners.sequences().iter().enumerate() {
                pool_tokens(&p.text.embedding, seq, i, &mut partner)?;
                for (v, &q) in pooled.row_mut(i).iter_mut().zip(&partner) {
                    *v = mix.lambda * *v + (1.0 - mix.lambda) * q;
                }
            }
            (mix.lambda, Some(non_pad(mix.partners.sequences())))
        }
    };
    let (emb, head) = head_forward(pooled, &p.text.hidden, &p.text.output, p.dropout, x.keys(), &ctx.derive("text-dropout"))?;
    Ok((
        emb,
        TextTape {
            tokens: non_pad(x.sequences()),
            partner_tokens,
            lambda,
            head,
        },
    ))
}

pub fn image_backward(p: &EncoderParams, tape: &ImageTape, upstream: &Matrix) -> Result<ImageTower> {
    if upstream.shape() != tape.head.norm.output.shape() {
        return Err(contract(format!(
            "image upstream gradient {:?} does not match tape {:?}",
            upstream.shape(),
            tape.head.norm.output.shape()
        )));
    }
    let (d_hidden, d_output, d_pooled) = head_backward(&tape.head, &p.image.hidden, &p.image.output, upstream);
    let mut d_patch = Matrix::zeros(p.image.patch_proj.rows(), p.image.patch_proj.cols());
    for (i, (inputs, act)) in tape.inputs.iter().zip(&tape.patch_act).enumerate() {
        let k = act.rows() as f64;
        let d_pre = Matrix::from_fn(act.rows(), act.cols(), |r, c| {
            let a = act[(r, c)];
            d_pooled[(i, c)] / k * (1.0 - a * a)
        });
        d_patch.add_assign(&inputs.t_matmul(&d_pre));
    }
    Ok(ImageTower {
        patch_proj: d_patch,
        hidden: d_hidden,
        output: d_output,
    })
}

pub fn text_backward(p: &EncoderParams, tape: &TextTape, upstream: &Matrix) -> Result<TextTower> {
    if upstream.shape() != tape.head.norm.output.shape() {
        return Err(contract(format!(
            "text upstream gradient {:?} does not match tape {:?}",
            upstream.shape(),
            tape.head.norm.output.shape()
        )));
    }
    let (d_hidden, d_output, d_pooled) = head_backward(&tape.head, &p.text.hidden, &p.text.output, upstream);
    let mut d_emb = Matrix::zeros(p.text.embedding.rows(), p.text.embedding.cols());
    let mut scatter = |tokens: &[u32], share: f64, row: usize| {
        let w = share / tokens.len() as f64;
        for &t in tokens {
            for (d, &g) in d_emb.row_mut(t as usize).iter_mut().zip(d_pooled.row(row)) {
                *d += w * g;
            }
        }
    };
    for (i, toks) in tape.tokens.iter().enumerate() {
        scatter(toks, tape.lambda, i);
        if let Some(partners) = &tape.partner_tokens {
            scatter(&partners[i], 1.0 - tape.lambda, i);
        }
    }
    Ok(TextTower {
        embedding: d_emb,
        hidden: d_hidden,
        output: d_output,
    })
}

/// Parameter gradients for both towers; frozen towers get exact zeros.
/// The τ entry is left at zero for the caller to fill.
pub fn encoder_backward(
    p: &EncoderParams,
    image_tape: &ImageTape,
    text_tape: &TextTape,
    d_img: &Matrix,
    d_txt: &Matrix,
) -> Result<ParamGrads> {
    let image = if p.freeze_image {
        ImageTower::zeros_like(&p.image)
    } else {
        image_backward(p, image_tape, d_img)?
    };
    let text = if p.freeze_text {
        TextTower::zeros_like(&p.text)
    } else {
        text_backward(p, text_tape, d_txt)?
    };
    Ok(ParamGrads { image, text, tau: 0.0 })
}
