//! Training engine: full-batch steps, simulated multi-worker gather,
//! decoupled gradient accumulation (DGA), AdamW and the cosine schedule.
//!
//! All gradient paths share one convention: the loss of a batch of N pairs is
//! normalized by 2N, worker shares use the global N, and per-worker parameter
//! gradients are summed in rank order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::contrastive::{
    coefficient_matrix, infonce_loss, local_share_gradients, negative_logp_stats, probability_matrices,
    similarity_matrix, GradientSet, LabelMatrix, ProbabilityPair,
};
use crate::encoders::{
    encode_images, encode_texts, encoder_backward, init_params, EncoderParams, ImageBatch, ImageTape, ImageTower,
    ParamGrads, TextBatch, TextMix, TextTape, TextTower, Tower, BLOCK_NAMES, MIN_TEMPERATURE,
};
use crate::error::{contract, invalid, LabError, Result};
use crate::mixup::{apply_input_mixup, sample_mixup_decision, MixupDecision, Modality};
use crate::numerics::{Matrix, SeedContext};
use crate::sampling::{
    build_debiased_epoch, build_random_epoch, build_sequential_epoch, cluster_into_virtual_sources, EpochPlan,
    SourceCatalog, SourceId,
};
use crate::synthdata::{corrupt_text_with_stats, Corpus, CorruptionRates, CorruptionStats, SourceTaggedSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatherMode {
    /// Remote embeddings are constants on each worker.
    Detached,
    /// Gradients w.r.t. remote embeddings are routed back to their owner.
    Reserved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecutionMode {
    Full,
    Workers { workers: usize, gather: GatherMode },
    Dga { sub_batch: usize },
}

impl ExecutionMode {
    pub fn validate(&self, batch_size: usize) -> Result<()> {
        match *self {
            ExecutionMode::Full => Ok(()),
            ExecutionMode::Workers { workers, .. } => {
                if workers == 0 || batch_size % workers != 0 {
                    Err(invalid(format!("{workers} workers do not divide batch size {batch_size}")))
                } else {
                    Ok(())
                }
            }
            ExecutionMode::Dga { sub_batch } => {
                if sub_batch == 0 || batch_size % sub_batch != 0 {
                    Err(invalid(format!("sub-batch {sub_batch} does not divide batch size {batch_size}")))
                } else {
                    Ok(())
                }
            }
        }
    }
}

impl fmt::Display for ExecutionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecutionMode::Full => f.write_str("full"),
            ExecutionMode::Workers { workers, gather } => {
                let g = match gather {
                    GatherMode::Detached => "detached",
                    GatherMode::Reserved => "reserved",
                };
                write!(f, "workers:{workers}:{g}")
            }
            ExecutionMode::Dga { sub_batch } => write!(f, "dga:{sub_batch}"),
        }
    }
}

impl FromStr for ExecutionMode {
    type Err = LabError;

    /// `full`, `workers:W:detached|reserved` or `dga:m`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |t: &str| {
            t.parse::<usize>()
                .map_err(|_| invalid(format!("`{t}` in mode `{s}` is not a positive integer")))
        };
        match parts.as_slice() {
            ["full"] => Ok(ExecutionMode::Full),
            ["workers", w, g] => {
                let gather = match *g {
                    "detached" => GatherMode::Detached,
                    "reserved" => GatherMode::Reserved,
                    other => return Err(invalid(format!("unknown gather mode `{other}`"))),
                };
                Ok(ExecutionMode::Workers { workers: num(w)?, gather })
            }
            ["dga", m] => Ok(ExecutionMode::Dga { sub_batch: num(m)? }),
            _ => Err(invalid(format!(
                "unknown mode `{s}` (expected full, workers:W:detached|reserved, dga:m)"
            ))),
        }
    }
}

/// Per-step forward options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOptions {
    pub token_drop: f64,
    pub mixup_alpha: Option<f64>,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            token_drop: 0.0,
            mixup_alpha: None,
        }
    }
}

/// One training batch of aligned pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub images: ImageBatch,
    pub texts: TextBatch,
    pub sources: Vec<SourceId>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Gathers the given samples; captions are corrupted when `corruption` is set.
    pub fn assemble(
        split: &[SourceTaggedSample],
        indices: &[usize],
        corruption: Option<&CorruptionRates>,
        vocab: usize,
        ctx: &SeedContext,
        stats: &mut CorruptionStats,
    ) -> Result<Self> {
        let (images, texts) = Corpus::batch(split, indices)?;
        let texts = match corruption {
            None => texts,
            Some(rates) => TextBatch::new(
                texts
                    .sequences()
                    .iter()
                    .enumerate()
                    .map(|(i, s)| corrupt_text_with_stats(s, vocab, rates, &ctx.for_row(i as u64), stats))
                    .collect(),
            ),
        };
        Ok(Self {
            images,
            texts,
            sources: Corpus::source_tags(split, indices),
        })
    }

    fn check(&self) -> Result<()> {
        if self.images.len() != self.texts.len() || self.sources.len() != self.images.len() {
            return Err(contract(format!(
                "batch has {} images, {} texts, {} source tags",
                self.images.len(),
                self.texts.len(),
                self.sources.len()
            )));
        }
        if self.images.is_empty() {
            return Err(invalid("empty batch"));
        }
        Ok(())
    }
}

/// Mixup decision and the inputs each tower should see.
struct PreparedInputs {
    decision: Option<MixupDecision>,
    images: ImageBatch,
    /// Per-row text partners for manifold mixup, aligned with the full batch.
    text_mix: Option<TextMix>,
}

impl PreparedInputs {
    fn new(batch: &PairBatch, opts: &StepOptions, ctx: &SeedContext) -> Result<Self> {
        let decision = match opts.mixup_alpha {
            Some(alpha) => Some(sample_mixup_decision(alpha, batch.len(), &ctx.derive("mixup"))?),
            None => None,
        };
        let images = match decision {
            Some(d) if d.modality == Modality::Image => apply_input_mixup(&batch.images, &d)?,
            _ => batch.images.clone(),
        };
        let text_mix = match decision {
            Some(d) if d.modality == Modality::Text => Some(TextMix::from_decision(&d, &batch.texts)?),
            _ => None,
        };
        Ok(Self {
            decision,
            images,
            text_mix,
        })
    }

    fn labels(&self, n: usize) -> Result<(LabelMatrix, LabelMatrix)> {
        match &self.decision {
            Some(d) => d.labels(),
            None => Ok((LabelMatrix::identity(n), LabelMatrix::identity(n))),
        }
    }

    /// Encodes rows `start..end` of the batch.
    fn encode_rows(
        &self,
        params: &EncoderParams,
        batch: &PairBatch,
        rows: std::ops::Range<usize>,
        opts: &StepOptions,
        ctx: &SeedContext,
    ) -> Result<(Matrix, ImageTape, Matrix, TextTape)> {
        let images = self.images.slice(rows.start, rows.end);
        let texts = batch.texts.slice(rows.start, rows.end);
        let mix = self.text_mix.as_ref().map(|m| TextMix {
            lambda: m.lambda,
            partners: m.partners.slice(rows.start, rows.end),
        });
        let (img, img_tape) = encode_images(params, &images, opts.token_drop, &ctx.derive("image"))?;
        let (txt, txt_tape) = encode_texts(params, &texts, mix.as_ref(), &ctx.derive("text"))?;
        Ok((img, img_tape, txt, txt_tape))
    }
}

/// Loss, parameter gradients and the probability matrices of one batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub grads: ParamGrads,
    pub probs: ProbabilityPair,
    pub labels: (LabelMatrix, LabelMatrix),
    pub decision: Option<MixupDecision>,
    pub img: Matrix,
    pub txt: Matrix,
}

impl BatchGradients {
    pub fn logp_neg_per_source(&self, sources: &[SourceId]) -> Result<BTreeMap<SourceId, f64>> {
        Ok(negative_logp_stats(&self.probs, &self.labels.0, &self.labels.1, sources)?.per_source)
    }
}

/// Single-machine forward and backward over the whole batch.
pub fn full_batch_gradients(
    params: &EncoderParams,
    batch: &PairBatch,
    opts: &StepOptions,
    ctx: &SeedContext,
) -> Result<BatchGradients> {
    batch.check()?;
    let n = batch.len();
    let prepared = PreparedInputs::new(batch, opts, ctx)?;
    let (img, img_tape, txt, txt_tape) = prepared.encode_rows(params, batch, 0..n, opts, ctx)?;
    let labels = prepared.labels(n)?;
    let sim = similarity_matrix(&img, &txt, params.tau)?;
    let loss = infonce_loss(&sim, &labels.0, &labels.1)?;
    let probs = probability_matrices(&sim)?;
    let g = crate::contrastive::analytic_gradients(&probs, &labels.0, &labels.1, &img, &txt, params.tau)?;
    let mut grads = encoder_backward(params, &img_tape, &txt_tape, &g.d_img, &g.d_txt)?;
    grads.tau = g.d_tau;
    Ok(BatchGradients {
        loss,
        grads,
        probs,
        labels,
        decision: prepared.decision,
        img,
        txt,
    })
}

/// Reduced result of a simulated multi-worker step.
#[derive(Debug, Clone)]
pub struct WorkerOutcome {
    pub loss: f64,
    /// Parameter gradients summed over workers in rank order.
    pub grads: ParamGrads,
    /// Gradient each worker back-propagated into its own embeddings, assembled
    /// in batch order.
    pub embedding_grads: GradientSet,
    pub probs: ProbabilityPair,
    pub labels: (LabelMatrix, LabelMatrix),
}

/// Simulates `workers` data-parallel workers, each owning a contiguous shard.
///
/// Every worker encodes its shard, embeddings are all-gathered, and each worker
/// differentiates its local loss share. In detached mode a worker keeps only
/// the gradient w.r.t. its own embeddings; in reserved mode the gradients
/// w.r.t. remote embeddings are sent back to their owners and summed.
pub fn simulate_workers(
    params: &EncoderParams,
    batch: &PairBatch,
    workers: usize,
    mode: GatherMode,
    opts: &StepOptions,
    ctx: &SeedContext,
) -> Result<WorkerOutcome> {
    batch.check()?;
    let n = batch.len();
    ExecutionMode::Workers { workers, gather: mode }.validate(n)?;
    let per = n / workers;
    let prepared = PreparedInputs::new(batch, opts, ctx)?;

    let forwards: Vec<Result<(Matrix, ImageTape, Matrix, TextTape)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|rank| {
                let prepared = &prepared;
                scope.spawn(move || prepared.encode_rows(params, batch, rank * per..(rank + 1) * per, opts, ctx))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker forward panicked")).collect()
    });
    let forwards = forwards.into_iter().collect::<Result<Vec<_>>>()?;
    let img = Matrix::vstack(&forwards.iter().map(|f| f.0.clone()).collect::<Vec<_>>())?;
    let txt = Matrix::vstack(&forwards.iter().map(|f| f.2.clone()).collect::<Vec<_>>())?;

    let labels = prepared.labels(n)?;
    let sim = similarity_matrix(&img, &txt, params.tau)?;
    let loss = infonce_loss(&sim, &labels.0, &labels.1)?;
    let probs = probability_matrices(&sim)?;
    let shards: Vec<Vec<usize>> = (0..workers).map(|w| (w * per..(w + 1) * per).collect()).collect();
    let shares = shards
        .iter()
        .map(|s| local_share_gradients(s, &probs, &labels.0, &labels.1, &img, &txt, params.tau))
        .collect::<Result<Vec<_>>>()?;

    let d = img.cols();
    let mut embedding_grads = GradientSet::zeros(n, n, d);
    let mut owned = Vec::with_capacity(workers);
    for (rank, shard) in shards.iter().enumerate() {
        let rows = shard[0]..shard[0] + per;
        let (d_img, d_txt) = match mode {
            GatherMode::Detached => (
                shares[rank].d_img.slice_rows(rows.start, rows.end),
                shares[rank].d_txt.slice_rows(rows.start, rows.end),
            ),
            GatherMode::Reserved => {
                let mut di = Matrix::zeros(per, d);
                let mut dt = Matrix::zeros(per, d);
                for share in &shares {
                    di.add_assign(&share.d_img.slice_rows(rows.start, rows.end));
                    dt.add_assign(&share.d_txt.slice_rows(rows.start, rows.end));
                }
                (di, dt)
            }
        };
        for r in 0..per {
            embedding_grads.d_img.row_mut(rows.start + r).copy_from_slice(d_img.row(r));
            embedding_grads.d_txt.row_mut(rows.start + r).copy_from_slice(d_txt.row(r));
        }
        owned.push((d_img, d_txt));
    }

    let backwards: Vec<Result<ParamGrads>> = std::thread::scope(|scope| {
        let handles: Vec<_> = forwards
            .iter()
            .zip(&owned)
            .map(|(f, (di, dt))| scope.spawn(move || encoder_backward(params, &f.1, &f.3, di, dt)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker backward panicked")).collect()
    });
    let mut grads = ParamGrads::zeros_like(params);
    for (rank, g) in backwards.into_iter().enumerate() {
        let mut g = g?;
        // τ is replicated; each worker holds the τ-gradient of its own share.
        g.tau = shares[rank].d_tau;
        grads.add_assign(&g);
    }
    embedding_grads.d_tau = grads.tau;
    Ok(WorkerOutcome {
        loss,
        grads,
        embedding_grads,
        probs,
        labels,
    })
}

/// Decoupled gradient accumulation over one large batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DgaPlan {
    pub global_batch: usize,
    pub sub_batch: usize,
    /// Randomness shared by both forward passes.
    pub seed: SeedContext,
    /// Overrides the second pass's forward randomness. Only useful for
    /// demonstrating what unstable seeding does.
    pub pass_two_seed: Option<SeedContext>,
    /// Compare pass-1 and pass-2 embedding checksums per sub-batch.
    pub check_stability: bool,
}

impl DgaPlan {
    pub fn new(global_batch: usize, sub_batch: usize, seed: SeedContext) -> Result<Self> {
        ExecutionMode::Dga { sub_batch }.validate(global_batch)?;
        Ok(Self {
            global_batch,
            sub_batch,
            seed,
            pass_two_seed: None,
            check_stability: true,
        })
    }
}

/// Pass-1 cache: stop-gradient embeddings of the whole batch and the
/// coefficient matrices `left_I = G·T̄/√τ`, `left_T = Gᵀ·Ī/√τ`.
#[derive(Debug, Clone)]
pub struct DgaCache {
    pub img_bar: Matrix,
    pub txt_bar: Matrix,
    pub left_img: Matrix,
    pub left_txt: Matrix,
    pub tau: f64,
    pub loss: f64,
    pub probs: ProbabilityPair,
    pub labels: (LabelMatrix, LabelMatrix),
    checksums: Vec<(u64, u64)>,
}

/// Forward every sub-batch without tapes being kept, then build the
/// coefficient matrices from the global probabilities.
pub fn dga_pass_one(params: &EncoderParams, batch: &PairBatch, plan: &DgaPlan, opts: &StepOptions) -> Result<DgaCache> {
    batch.check()?;
    if batch.len() != plan.global_batch {
        return Err(contract(format!("plan is for {} rows, batch has {}", plan.global_batch, batch.len())));
    }
    let n = plan.global_batch;
    let m = plan.sub_batch;
    let prepared = PreparedInputs::new(batch, opts, &plan.seed)?;
    let mut img_parts = Vec::with_capacity(n / m);
    let mut txt_parts = Vec::with_capacity(n / m);
    let mut checksums = Vec::with_capacity(n / m);
    for start in (0..n).step_by(m) {
        let (img, _, txt, _) = prepared.encode_rows(params, batch, start..start + m, opts, &plan.seed)?;
        checksums.push((img.checksum(), txt.checksum()));
        img_parts.push(img);
        txt_parts.push(txt);
    }
    let img_bar = Matrix::vstack(&img_parts)?;
    let txt_bar = Matrix::vstack(&txt_parts)?;
    let labels = prepared.labels(n)?;
    let tau = params.tau;
    let sim = similarity_matrix(&img_bar, &txt_bar, tau)?;
    let loss = infonce_loss(&sim, &labels.0, &labels.1)?;
    let probs = probability_matrices(&sim)?;
    let g = coefficient_matrix(&probs, &labels.0, &labels.1)?;
    let root = tau.sqrt();
    let left_img = g.matmul(&txt_bar).scaled(1.0 / root);
    let left_txt = g.t_matmul(&img_bar).scaled(1.0 / root);
    Ok(DgaCache {
        img_bar,
        txt_bar,
        left_img,
        left_txt,
        tau,
        loss,
        probs,
        labels,
        checksums,
    })
}

/// Both DGA passes. The returned gradients equal the full-batch gradients.
///
/// Pass 2 re-encodes each sub-batch with tapes and back-propagates the
/// surrogate `Σ(left_I ⊙ I + left_T ⊙ T) / (2N√τ)`, where the cached `left`
/// matrices are constants and τ is live.
pub fn dga_gradients(
    params: &EncoderParams,
    batch: &PairBatch,
    plan: &DgaPlan,
    opts: &StepOptions,
) -> Result<(ParamGrads, DgaCache)> {
    let cache = dga_pass_one(params, batch, plan, opts)?;
    let n = plan.global_batch;
    let m = plan.sub_batch;
    let prepared = PreparedInputs::new(batch, opts, &plan.seed)?;
    let pass_two = plan.pass_two_seed.as_ref().unwrap_or(&plan.seed);
    let root = params.tau.sqrt();
    let scale = 1.0 / (2.0 * n as f64 * root);
    let mut grads = ParamGrads::zeros_like(params);
    for (b, start) in (0..n).step_by(m).enumerate() {
        let (img, img_tape, txt, txt_tape) = prepared.encode_rows(params, batch, start..start + m, opts, pass_two)?;
        let sums = (img.checksum(), txt.checksum());
        if plan.check_stability && sums != cache.checksums[b] {
            let (first, second) = if sums.0 != cache.checksums[b].0 {
                (cache.checksums[b].0, sums.0)
            } else {
                (cache.checksums[b].1, sums.1)
            };
            return Err(LabError::StabilityViolation {
                sub_batch: b,
                first,
                second,
            });
        }
        let left_img = cache.left_img.slice_rows(start, start + m);
        let left_txt = cache.left_txt.slice_rows(start, start + m);
        let d_img = left_img.scaled(scale);
        let d_txt = left_txt.scaled(scale);
        let mut g = encoder_backward(params, &img_tape, &txt_tape, &d_img, &d_txt)?;
        // d/dτ of C/(2N√τ) with C fixed: −C/(4N τ^{3/2}).
        let c = left_img.inner(&img) + left_txt.inner(&txt);
        g.tau = -c / (4.0 * n as f64 * params.tau * root);
        grads.add_assign(&g);
    }
    Ok((grads, cache))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            min_lr: 1e-5,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ParamGrads,
    pub v: ParamGrads,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &EncoderParams) -> Self {
        Self {
            m: ParamGrads::zeros_like(params),
            v: ParamGrads::zeros_like(params),
            step: 0,
        }
    }
}

/// `min + ½(base − min)(1 + cos(π·step/total))`
pub fn cosine_lr(step: u64, total_steps: u64, base: f64, min: f64) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * t).cos())
}

fn adam_block(p: &mut Matrix, g: &Matrix, m: &mut Matrix, v: &mut Matrix, hyper: &AdamWConfig, lr: f64, step: u64) {
    let bc1 = 1.0 - hyper.beta1.powi(step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(step as i32);
    for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
        *mv = hyper.beta1 * *mv + (1.0 - hyper.beta1) * gv;
        *vv = hyper.beta2 * *vv + (1.0 - hyper.beta2) * gv * gv;
        let update = (*mv / bc1) / ((*vv / bc2).sqrt() + hyper.eps);
        *pv -= lr * (update + hyper.weight_decay * *pv);
    }
}

/// Bias-corrected AdamW with decoupled weight decay on the weights. τ gets
/// no weight decay and is clamped to `MIN_TEMPERATURE` afterwards. Frozen
/// towers and their moments are left untouched.
pub fn adamw_update(
    params: &mut EncoderParams,
    grads: &ParamGrads,
    state: &mut OptimizerState,
    hyper: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(LabError::NonFinite("parameter gradients".into()));
    }
    if grads.blocks().iter().zip(params.blocks()).any(|((_, g), (_, p))| g.shape() != p.shape()) {
        return Err(contract("gradient shapes do not match parameters"));
    }
    state.step += 1;
    let step = state.step;
    if !params.freeze_image {
        let p = &mut params.image;
        let (g, m, v) = (&grads.image, &mut state.m.image, &mut state.v.image);
        adam_block(&mut p.patch_proj, &g.patch_proj, &mut m.patch_proj, &mut v.patch_proj, hyper, lr, step);
        adam_block(&mut p.hidden, &g.hidden, &mut m.hidden, &mut v.hidden, hyper, lr, step);
        adam_block(&mut p.output, &g.output, &mut m.output, &mut v.output, hyper, lr, step);
    }
    if !params.freeze_text {
        let p = &mut params.text;
        let (g, m, v) = (&grads.text, &mut state.m.text, &mut state.v.text);
        adam_block(&mut p.embedding, &g.embedding, &mut m.embedding, &mut v.embedding, hyper, lr, step);
        adam_block(&mut p.hidden, &g.hidden, &mut m.hidden, &mut v.hidden, hyper, lr, step);
        adam_block(&mut p.output, &g.output, &mut m.output, &mut v.output, hyper, lr, step);
    }
    let no_decay = AdamWConfig {
        weight_decay: 0.0,
        ..*hyper
    };
    let mut tau = Matrix::filled(1, 1, params.tau);
    let mut mt = Matrix::filled(1, 1, state.m.tau);
    let mut vt = Matrix::filled(1, 1, state.v.tau);
    adam_block(&mut tau, &Matrix::filled(1, 1, grads.tau), &mut mt, &mut vt, &no_decay, lr, step);
    params.tau = tau[(0, 0)].max(MIN_TEMPERATURE);
    state.m.tau = mt[(0, 0)];
    state.v.tau = vt[(0, 0)];
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub tau: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub logp_neg_per_source: BTreeMap<SourceId, f64>,
}

fn finish_step(
    params: &mut EncoderParams,
    state: &mut OptimizerState,
    hyper: &AdamWConfig,
    lr: f64,
    loss: f64,
    grads: &ParamGrads,
    logp: BTreeMap<SourceId, f64>,
) -> Result<StepMetrics> {
    let grad_norm = grads.norm();
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(LabError::NonFinite(format!(
            "step {}: loss {loss}, grad norm {grad_norm}, tau {}, lr {lr}",
            state.step + 1,
            params.tau
        )));
    }
    adamw_update(params, grads, state, hyper, lr)?;
    Ok(StepMetrics {
        loss,
        tau: params.tau,
        lr,
        grad_norm,
        logp_neg_per_source: logp,
    })
}

pub fn full_batch_step(
    params: &mut EncoderParams,
    state: &mut OptimizerState,
    batch: &PairBatch,
    opts: &StepOptions,
    hyper: &AdamWConfig,
    lr: f64,
    ctx: &SeedContext,
) -> Result<StepMetrics> {
    let out = full_batch_gradients(params, batch, opts, ctx)?;
    let logp = out.logp_neg_per_source(&batch.sources)?;
    finish_step(params, state, hyper, lr, out.loss, &out.grads, logp)
}

pub fn dga_step(
    params: &mut EncoderParams,
    state: &mut OptimizerState,
    batch: &PairBatch,
    plan: &DgaPlan,
    opts: &StepOptions,
    hyper: &AdamWConfig,
    lr: f64,
) -> Result<StepMetrics> {
    let (grads, cache) = dga_gradients(params, batch, plan, opts)?;
    let logp = negative_logp_stats(&cache.probs, &cache.labels.0, &cache.labels.1, &batch.sources)?.per_source;
    finish_step(params, state, hyper, lr, cache.loss, &grads, logp)
}

/// One optimizer step in the given execution mode.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut EncoderParams,
    state: &mut OptimizerState,
    batch: &PairBatch,
    mode: ExecutionMode,
    opts: &StepOptions,
    hyper: &AdamWConfig,
    lr: f64,
    ctx: &SeedContext,
) -> Result<StepMetrics> {
    match mode {
        ExecutionMode::Full => full_batch_step(params, state, batch, opts, hyper, lr, ctx),
        ExecutionMode::Workers { workers, gather } => {
            let out = simulate_workers(params, batch, workers, gather, opts, ctx)?;
            let logp = negative_logp_stats(&out.probs, &out.labels.0, &out.labels.1, &batch.sources)?.per_source;
            finish_step(params, state, hyper, lr, out.loss, &out.grads, logp)
        }
        ExecutionMode::Dga { sub_batch } => {
            let plan = DgaPlan::new(batch.len(), sub_batch, ctx.clone())?;
            dga_step(params, state, batch, &plan, opts, hyper, lr)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Random,
    Sequential,
    Debiased,
    DebiasedKmeans,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Random => "random",
            SamplerKind::Sequential => "sequential",
            SamplerKind::Debiased => "debiased",
            SamplerKind::DebiasedKmeans => "debiased-kmeans",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SamplerKind::Random),
            "sequential" => Ok(SamplerKind::Sequential),
            "debiased" => Ok(SamplerKind::Debiased),
            "debiased-kmeans" => Ok(SamplerKind::DebiasedKmeans),
            other => Err(invalid(format!(
                "unknown sampler `{other}` (expected random|sequential|debiased|debiased-kmeans)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sampler: SamplerKind,
    pub sequential_order: Vec<SourceId>,
    pub batch_size: usize,
    pub epochs: usize,
    pub step_options: StepOptions,
    pub corruption: Option<CorruptionRates>,
    pub mode: ExecutionMode,
    pub optimizer: AdamWConfig,
    pub kmeans_k: usize,
    pub kmeans_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Debiased,
            sequential_order: Vec::new(),
            batch_size: 128,
            epochs: 15,
            step_options: StepOptions::default(),
            corruption: Some(CorruptionRates::default()),
            mode: ExecutionMode::Full,
            optimizer: AdamWConfig::default(),
            kmeans_k: 100,
            kmeans_iters: 50,
        }
    }
}

/// Metrics record emitted once per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub mode: String,
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
    pub grad_norm: f64,
    pub logp_neg_per_source: BTreeMap<String, f64>,
    pub wallclock_ms: f64,
}

/// Eval-mode embeddings (no dropout, no TokenDrop, no mixup).
pub fn embed_split(params: &EncoderParams, split: &[SourceTaggedSample]) -> Result<(Matrix, Matrix)> {
    let mut eval_params = params.clone();
    eval_params.dropout = 0.0;
    let indices: Vec<usize> = (0..split.len()).collect();
    let ctx = SeedContext::new(0, "eval");
    let mut img_parts = Vec::new();
    let mut txt_parts = Vec::new();
    for chunk in indices.chunks(512) {
        let (images, texts) = Corpus::batch(split, chunk)?;
        img_parts.push(encode_images(&eval_params, &images, 0.0, &ctx)?.0);
        txt_parts.push(encode_texts(&eval_params, &texts, None, &ctx)?.0);
    }
    Ok((Matrix::vstack(&img_parts)?, Matrix::vstack(&txt_parts)?))
}

fn build_catalog(params: &EncoderParams, corpus: &Corpus, cfg: &TrainConfig, ctx: &SeedContext) -> Result<SourceCatalog> {
    match cfg.sampler {
        SamplerKind::DebiasedKmeans => {
            let (img, _) = embed_split(params, &corpus.train)?;
            cluster_into_virtual_sources(&img, cfg.kmeans_k.min(corpus.train.len()), cfg.kmeans_iters, &ctx.derive("kmeans"))
        }
        _ => Ok(corpus.catalog()),
    }
}

pub fn epoch_plan(cfg: &TrainConfig, catalog: &SourceCatalog, ctx: &SeedContext) -> Result<EpochPlan> {
    match cfg.sampler {
        SamplerKind::Random => build_random_epoch(catalog, cfg.batch_size, ctx),
        SamplerKind::Sequential => {
            let order = if cfg.sequential_order.is_empty() {
                catalog.ids()
            } else {
                cfg.sequential_order.clone()
            };
            build_sequential_epoch(catalog, &order, cfg.batch_size, ctx)
        }
        SamplerKind::Debiased | SamplerKind::DebiasedKmeans => build_debiased_epoch(catalog, cfg.batch_size, ctx),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub optimizer: OptimizerState,
    pub steps: u64,
    pub corruption: CorruptionStats,
}

/// Trains for `cfg.epochs` epochs over the corpus training split.
///
/// Step `s` uses the seed stream `{ctx}/step-{s}`; epoch plans use
/// `{ctx}/epoch-{e}`. `observer` sees every step's record.
pub fn train(
    params: EncoderParams,
    corpus: &Corpus,
    cfg: &TrainConfig,
    ctx: &SeedContext,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    train_from(params, None, corpus, cfg, ctx, observer)
}

/// Continues training from a restored optimizer state.
pub fn train_from(
    mut params: EncoderParams,
    state: Option<OptimizerState>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    ctx: &SeedContext,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.mode.validate(cfg.batch_size)?;
    let mut state = state.unwrap_or_else(|| OptimizerState::new(&params));
    let catalog = build_catalog(&params, corpus, cfg, ctx)?;
    let plans = (0..cfg.epochs)
        .map(|e| epoch_plan(cfg, &catalog, &ctx.derive(format_args!("epoch-{e}"))))
        .collect::<Result<Vec<_>>>()?;
    let total_steps: u64 = plans.iter().map(|p| p.batches.len() as u64).sum();
    let vocab = params.dims().vocab;
    let mut corruption = CorruptionStats::default();
    let mut step = 0u64;
    for plan in &plans {
        for planned in &plan.batches {
            let started = Instant::now();
            let step_ctx = ctx.derive(format_args!("step-{step}"));
            let batch = PairBatch::assemble(
                &corpus.train,
                &planned.indices,
                cfg.corruption.as_ref(),
                vocab,
                &step_ctx.derive("corrupt"),
                &mut corruption,
            )?;
            let lr = cosine_lr(step, total_steps, cfg.optimizer.lr, cfg.optimizer.min_lr);
            let metrics = train_step(
                &mut params,
                &mut state,
                &batch,
                cfg.mode,
                &cfg.step_options,
                &cfg.optimizer,
                lr,
                &step_ctx,
            )?;
            observer(&StepRecord {
                step,
                mode: cfg.mode.to_string(),
                loss: metrics.loss,
                lr: metrics.lr,
                tau: metrics.tau,
                grad_norm: metrics.grad_norm,
                logp_neg_per_source: metrics
                    .logp_neg_per_source
                    .iter()
                    .map(|(k, v)| (k.to_string(), *v))
                    .collect(),
                wallclock_ms: started.elapsed().as_secs_f64() * 1e3,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome {
        params,
        optimizer: state,
        steps: step,
        corruption,
    })
}

/// Retrains one tower against the other, frozen, tower.
///
/// The trainable tower is re-initialized with `replacement_hidden` units
/// unless that equals its current width, in which case its weights are kept.
pub fn auxiliary_retrain(
    params: &EncoderParams,
    frozen_tower: Tower,
    replacement_hidden: usize,
    corpus: &Corpus,
    cfg: &TrainConfig,
    ctx: &SeedContext,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    let trainable = match frozen_tower {
        Tower::Image => Tower::Text,
        Tower::Text => Tower::Image,
    };
    if params.is_frozen(trainable) {
        return Err(invalid(format!(
            "both towers frozen: cannot retrain the {trainable} tower while it is frozen"
        )));
    }
    if replacement_hidden == 0 {
        return Err(invalid("replacement hidden width must be positive"));
    }
    let mut p = params.clone();
    let dims = p.dims();
    match trainable {
        Tower::Image if replacement_hidden != dims.image_hidden => {
            p.image = ImageTower::init(dims.d_patch, replacement_hidden, dims.d_emb, &ctx.derive("replacement-image"));
        }
        Tower::Text if replacement_hidden != dims.text_hidden => {
            p.text = TextTower::init(dims.vocab, replacement_hidden, dims.d_emb, &ctx.derive("replacement-text"));
        }
        _ => {}
    }
    match frozen_tower {
        Tower::Image => p.freeze_image = true,
        Tower::Text => p.freeze_text = true,
    }
    train(p, corpus, cfg, ctx, observer)
}

/// Fresh model with the given dims, then [`train`].
pub fn train_new(
    dims: crate::encoders::EncoderDims,
    dropout: f64,
    corpus: &Corpus,
    cfg: &TrainConfig,
    ctx: &SeedContext,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    let params = init_params(dims, dropout, &ctx.derive("init"))?;
    train(params, corpus, cfg, ctx, observer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub first_moment: Vec<NamedBlock>,
    pub second_moment: Vec<NamedBlock>,
    pub tau_moments: (f64, f64),
}

/// Versioned, flat parameter table plus optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub tau: f64,
    pub freeze_image: bool,
    pub freeze_text: bool,
    pub dropout: f64,
    pub blocks: Vec<NamedBlock>,
    pub optimizer: Option<OptimizerSnapshot>,
}

pub const CHECKPOINT_FORMAT: &str = "contralab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

fn named(blocks: Vec<(&'static str, &Matrix)>) -> Vec<NamedBlock> {
    blocks
        .into_iter()
        .map(|(name, m)| NamedBlock {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().to_vec(),
        })
        .collect()
}

fn unnamed(blocks: &[NamedBlock]) -> Result<Vec<Matrix>> {
    if blocks.len() != BLOCK_NAMES.len() {
        return Err(contract(format!("checkpoint has {} blocks, expected {}", blocks.len(), BLOCK_NAMES.len())));
    }
    blocks
        .iter()
        .zip(BLOCK_NAMES)
        .map(|(b, want)| {
            if b.name != want {
                return Err(contract(format!("checkpoint block `{}` where `{want}` was expected", b.name)));
            }
            Matrix::from_vec(b.rows, b.cols, b.data.clone())
        })
        .collect()
}

fn towers(mut m: Vec<Matrix>) -> (ImageTower, TextTower) {
    let text_output = m.pop().expect("six blocks");
    let text_hidden = m.pop().expect("six blocks");
    let embedding = m.pop().expect("six blocks");
    let output = m.pop().expect("six blocks");
    let hidden = m.pop().expect("six blocks");
    let patch_proj = m.pop().expect("six blocks");
    (
        ImageTower {
            patch_proj,
            hidden,
            output,
        },
        TextTower {
            embedding,
            hidden: text_hidden,
            output: text_output,
        },
    )
}

impl Checkpoint {
    pub fn capture(params: &EncoderParams, state: Option<&OptimizerState>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            tau: params.tau,
            freeze_image: params.freeze_image,
            freeze_text: params.freeze_text,
            dropout: params.dropout,
            blocks: named(params.blocks()),
            optimizer: state.map(|s| OptimizerSnapshot {
                step: s.step,
                first_moment: named(s.m.blocks()),
                second_moment: named(s.v.blocks()),
                tau_moments: (s.m.tau, s.v.tau),
            }),
        }
    }

    pub fn restore(&self) -> Result<(EncoderParams, Option<OptimizerState>)> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(contract(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                self.format, self.version
            )));
        }
        let (image, text) = towers(unnamed(&self.blocks)?);
        let params = EncoderParams {
            image,
            text,
            tau: self.tau,
            freeze_image: self.freeze_image,
            freeze_text: self.freeze_text,
            dropout: self.dropout,
        };
        let state = match &self.optimizer {
            None => None,
            Some(o) => {
                let (mi, mt) = towers(unnamed(&o.first_moment)?);
                let (vi, vt) = towers(unnamed(&o.second_moment)?);
                Some(OptimizerState {
                    m: ParamGrads {
                        image: mi,
                        text: mt,
                        tau: o.tau_moments.0,
                    },
                    v: ParamGrads {
                        image: vi,
                        text: vt,
                        tau: o.tau_moments.1,
                    },
                    step: o.step,
                })
            }
        };
        Ok((params, state))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
