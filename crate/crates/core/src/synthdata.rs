//! Synthetic multi-source image-text corpus with controllable dataset bias,
//! and the word-corruption augmentation applied to captions.
//!
//! Every pair starts from a hidden concept `z ~ N(0, I_dz)`:
//!
//! * image patch `p` is `A_p·z + strength·offset_s + noise·ε`, with mixing
//!   matrices `A_p` shared by all sources;
//! * the caption mixes content tokens, one per position, each naming a
//!   random coordinate of `z` and the bucket its value falls in, with the
//!   source's style tokens at rate `ρ_s`; its length follows the source.
//!
//! The eval split is generated with every style strength and style-token
//! rate forced to zero.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::{ImageBatch, TextBatch, FIRST_REGULAR_TOKEN, MASK_TOKEN};
use crate::error::{invalid, LabError, Result};
use crate::numerics::{Matrix, SeedContext};
use crate::sampling::{SourceCatalog, SourceId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub id: SourceId,
    pub samples: usize,
    pub style_offset: Vec<f64>,
    pub style_strength: f64,
    /// Inclusive caption length range.
    pub caption_len: (usize, usize),
    pub style_token_rate: f64,
    /// Half-open style token id range.
    pub style_tokens: (u32, u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub sources: Vec<SourceSpec>,
    pub d_z: usize,
    pub patches: usize,
    pub d_patch: usize,
    pub vocab: usize,
    /// Buckets per concept coordinate.
    pub resolution: usize,
    pub noise: f64,
    pub eval_size: usize,
}

impl CorpusSpec {
    /// First id after the content range `[2, 2 + d_z·resolution)`.
    pub fn content_end(&self) -> u32 {
        FIRST_REGULAR_TOKEN + (self.d_z * self.resolution) as u32
    }

    /// Three sources with image style offsets and distinct caption lengths
    /// (long, medium, short). Each source owns a style-token range, but the
    /// preset rate is 0: set `style_token_rate` to inject text style tokens.
    /// Pass the sample counts largest first so the last source is the smallest.
    pub fn biased_three_source(samples: [usize; 3], d_z: usize, ctx: &SeedContext) -> Self {
        let d_patch = 16;
        let resolution = 4;
        let style_vocab = 8u32;
        let content_end = FIRST_REGULAR_TOKEN + (d_z * resolution) as u32;
        let lens = [(16, 24), (10, 14), (4, 7)];
        let mut rng = ctx.derive("style-offsets").rng();
        let sources = (0..3)
            .map(|i| {
                let raw: Vec<f64> = (0..d_patch).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = raw.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
                let start = content_end + i as u32 * style_vocab;
                SourceSpec {
                    id: i as SourceId,
                    samples: samples[i],
                    style_offset: raw.iter().map(|x| x / norm).collect(),
                    style_strength: 1.5,
                    caption_len: lens[i],
                    style_token_rate: 0.0,
                    style_tokens: (start, start + style_vocab),
                }
            })
            .collect();
        Self {
            sources,
            d_z,
            patches: 8,
            d_patch,
            vocab: (content_end + 3 * style_vocab) as usize,
            resolution,
            noise: 0.3,
            eval_size: 1000,
        }
    }

    /// Copy with every style strength and style-token rate set to zero.
    pub fn unbiased(&self) -> Self {
        let mut s = self.clone();
        for src in &mut s.sources {
            src.style_strength = 0.0;
            src.style_token_rate = 0.0;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(invalid("corpus needs at least one source"));
        }
        if self.d_z == 0 || self.patches == 0 || self.d_patch == 0 || self.resolution == 0 {
            return Err(invalid("corpus dimensions must be positive"));
        }
        if self.content_end() as usize > self.vocab {
            return Err(invalid(format!(
                "content tokens need ids up to {}, vocabulary is {}",
                self.content_end(),
                self.vocab
            )));
        }
        let mut ranges: Vec<(u32, u32)> = Vec::new();
        for s in &self.sources {
            if s.samples == 0 {
                return Err(invalid(format!("source {} has no samples", s.id)));
            }
            if s.style_offset.len() != self.d_patch {
                return Err(invalid(format!(
                    "source {} style offset has {} dims, d_patch is {}",
                    s.id,
                    s.style_offset.len(),
                    self.d_patch
                )));
            }
            if s.caption_len.0 == 0 || s.caption_len.0 > s.caption_len.1 {
                return Err(invalid(format!("source {} caption length range {:?} is empty", s.id, s.caption_len)));
            }
            if !(0.0..1.0).contains(&s.style_token_rate) {
                return Err(invalid(format!("source {} style-token rate must lie in [0, 1)", s.id)));
            }
            let (lo, hi) = s.style_tokens;
            if s.style_token_rate > 0.0 && lo >= hi {
                return Err(invalid(format!("source {} has style tokens enabled but an empty range", s.id)));
            }
            if lo < hi {
                if lo < self.content_end() || hi as usize > self.vocab {
                    return Err(invalid(format!(
                        "source {} style tokens {lo}..{hi} overlap content ids or exceed the vocabulary",
                        s.id
                    )));
                }
                if ranges.iter().any(|&(a, b)| lo < b && a < hi) {
                    return Err(invalid(format!("source {} style token range overlaps another source", s.id)));
                }
                ranges.push((lo, hi));
            }
        }
        let mut ids: Vec<SourceId> = self.sources.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.sources.len() {
            return Err(invalid("source ids must be distinct"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceTaggedSample {
    /// patches × d_patch
    pub image: Matrix,
    pub tokens: Vec<u32>,
    pub source: SourceId,
    pub concept_id: usize,
    /// Hidden ground-truth concept vector.
    pub concept: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<SourceTaggedSample>,
    pub eval: Vec<SourceTaggedSample>,
}

impl Corpus {
    pub fn catalog(&self) -> SourceCatalog {
        SourceCatalog::from_tags(&self.train.iter().map(|s| s.source).collect::<Vec<_>>())
    }

    pub fn source_tags(split: &[SourceTaggedSample], indices: &[usize]) -> Vec<SourceId> {
        indices.iter().map(|&i| split[i].source).collect()
    }

    /// Image and text batches for the given sample positions of a split.
    pub fn batch(split: &[SourceTaggedSample], indices: &[usize]) -> Result<(ImageBatch, TextBatch)> {
        let images = ImageBatch::new(indices.iter().map(|&i| split[i].image.clone()).collect())?;
        let texts = TextBatch::new(indices.iter().map(|&i| split[i].tokens.clone()).collect());
        Ok((images, texts))
    }
}

fn content_token(spec: &CorpusSpec, coord: usize, value: f64) -> u32 {
    // Buckets split [-2, 2] evenly: sign and coarse magnitude.
    let res = spec.resolution as f64;
    let bucket = (((value + 2.0) / 4.0) * res).floor().clamp(0.0, res - 1.0) as usize;
    FIRST_REGULAR_TOKEN + (coord * spec.resolution + bucket) as u32
}

struct Generator<'a> {
    spec: &'a CorpusSpec,
    mixing: Vec<Matrix>,
}

impl Generator<'_> {
    fn sample(&self, src: &SourceSpec, concept_id: usize, rng: &mut impl Rng) -> SourceTaggedSample {
        let spec = self.spec;
        let z: Vec<f64> = (0..spec.d_z).map(|_| StandardNormal.sample(rng)).collect();
        let mut image = Matrix::zeros(spec.patches, spec.d_patch);
        for (p, a) in self.mixing.iter().enumerate() {
            for c in 0..spec.d_patch {
                let signal: f64 = a.row(c).iter().zip(&z).map(|(w, v)| w * v).sum();
                let eps: f64 = StandardNormal.sample(rng);
                image[(p, c)] = signal + src.style_strength * src.style_offset[c] + spec.noise * eps;
            }
        }
        let len = rng.random_range(src.caption_len.0..=src.caption_len.1);
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            if src.style_token_rate > 0.0 && rng.random::<f64>() < src.style_token_rate {
                tokens.push(rng.random_range(src.style_tokens.0..src.style_tokens.1));
            } else {
                let coord = rng.random_range(0..spec.d_z);
                tokens.push(content_token(spec, coord, z[coord]));
            }
        }
        SourceTaggedSample {
            image,
            tokens,
            source: src.id,
            concept_id,
            concept: z,
        }
    }
}

/// Training split (all sources, in source order), plus an unbiased eval split
/// whose samples cycle through the sources.
pub fn generate_corpus(spec: &CorpusSpec, ctx: &SeedContext) -> Result<Corpus> {
    spec.validate()?;
    let mut mix_rng = ctx.derive("mixing").rng();
    let scale = 1.0 / (spec.d_z as f64).sqrt();
    let mixing = (0..spec.patches)
        .map(|_| {
            Matrix::from_fn(spec.d_patch, spec.d_z, |_, _| {
                let v: f64 = StandardNormal.sample(&mut mix_rng);
                v * scale
            })
        })
        .collect();
    let generator = Generator { spec, mixing };
    let mut train = Vec::new();
    for src in &spec.sources {
        let mut rng = ctx.derive(format_args!("train/source-{}", src.id)).rng();
        for _ in 0..src.samples {
            let id = train.len();
            train.push(generator.sample(src, id, &mut rng));
        }
    }
    let unbiased = spec.unbiased();
    let mut rng = ctx.derive("eval").rng();
    let eval = (0..spec.eval_size)
        .map(|i| {
            let src = &unbiased.sources[i % unbiased.sources.len()];
            generator.sample(src, train.len() + i, &mut rng)
        })
        .collect();
    Ok(Corpus {
        spec: spec.clone(),
        train,
        eval,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRates {
    pub select: f64,
    pub mask: f64,
    pub replace: f64,
    pub delete: f64,
}

impl Default for CorruptionRates {
    fn default() -> Self {
        Self {
            select: 0.2,
            mask: 0.5,
            replace: 0.1,
            delete: 0.4,
        }
    }
}

impl CorruptionRates {
    pub fn disabled() -> Self {
        Self {
            select: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionStats {
    pub tokens: u64,
    pub selected: u64,
    pub masked: u64,
    pub replaced: u64,
    pub deleted: u64,
    /// Sequences where every token was deleted and one was restored.
    pub restored: u64,
}

/// Selects each token with probability `select`; a selected token is masked,
/// replaced by a uniform regular token, or deleted with the conditional
/// rates. At least one token always survives.
pub fn corrupt_text_with_stats(
    tokens: &[u32],
    vocab: usize,
    rates: &CorruptionRates,
    ctx: &SeedContext,
    stats: &mut CorruptionStats,
) -> Vec<u32> {
    if tokens.is_empty() || rates.select == 0.0 {
        stats.tokens += tokens.len() as u64;
        return tokens.to_vec();
    }
    let mut rng = ctx.rng();
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        stats.tokens += 1;
        if rng.random::<f64>() >= rates.select {
            out.push(t);
            continue;
        }
        stats.selected += 1;
        let action: f64 = rng.random();
        if action < rates.mask {
            stats.masked += 1;
            out.push(MASK_TOKEN);
        } else if action < rates.mask + rates.replace {
            stats.replaced += 1;
            out.push(rng.random_range(FIRST_REGULAR_TOKEN..vocab as u32));
        } else {
            stats.deleted += 1;
        }
    }
    if out.is_empty() {
        stats.restored += 1;
        out.push(*tokens.choose(&mut rng).expect("non-empty"));
    }
    out
}

pub fn corrupt_text(tokens: &[u32], vocab: usize, ctx: &SeedContext) -> Vec<u32> {
    corrupt_text_with_stats(tokens, vocab, &CorruptionRates::default(), ctx, &mut CorruptionStats::default())
}

const IMAGES_FILE: &str = "images.csv";
const TOKENS_FILE: &str = "tokens.txt";
const MANIFEST_FILE: &str = "manifest.csv";
const SPEC_FILE: &str = "corpus_spec.json";

/// Writes `images.csv`, `tokens.txt`, `manifest.csv` and `corpus_spec.json`.
/// Rows appear train split first, then eval, in sample order.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let spec = &corpus.spec;
    fs::write(dir.join(SPEC_FILE), serde_json::to_string_pretty(spec)?)?;
    let rows = corpus
        .train
        .iter()
        .map(|s| (Split::Train, s))
        .chain(corpus.eval.iter().map(|s| (Split::Eval, s)));

    let mut images = std::io::BufWriter::new(fs::File::create(dir.join(IMAGES_FILE))?);
    let mut tokens = std::io::BufWriter::new(fs::File::create(dir.join(TOKENS_FILE))?);
    let mut manifest = std::io::BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    let feat_cols: Vec<String> = (0..spec.d_patch).map(|c| format!("f{c}")).collect();
    writeln!(images, "row,patch,{}", feat_cols.join(","))?;
    let z_cols: Vec<String> = (0..spec.d_z).map(|c| format!("z{c}")).collect();
    writeln!(manifest, "row,split,source,concept_id,{}", z_cols.join(","))?;
    for (row, (split, s)) in rows.enumerate() {
        for p in 0..s.image.rows() {
            let vals: Vec<String> = s.image.row(p).iter().map(|v| format!("{v:e}")).collect();
            writeln!(images, "{row},{p},{}", vals.join(","))?;
        }
        let ids: Vec<String> = s.tokens.iter().map(ToString::to_string).collect();
        writeln!(tokens, "{}", ids.join(" "))?;
        let split = match split {
            Split::Train => "train",
            Split::Eval => "eval",
        };
        let z: Vec<String> = s.concept.iter().map(|v| format!("{v:e}")).collect();
        writeln!(manifest, "{row},{split},{},{},{}", s.source, s.concept_id, z.join(","))?;
    }
    images.flush()?;
    tokens.flush()?;
    manifest.flush()?;
    Ok(())
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    field.parse().map_err(|e| LabError::Parse {
        line,
        message: format!("`{field}`: {e}"),
    })
}

fn parse_usize(field: &str, line: usize) -> Result<usize> {
    field.parse().map_err(|e| LabError::Parse {
        line,
        message: format!("`{field}`: {e}"),
    })
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let spec: CorpusSpec = serde_json::from_str(&fs::read_to_string(dir.join(SPEC_FILE))?)?;
    let manifest = BufReader::new(fs::File::open(dir.join(MANIFEST_FILE))?);
    let mut meta = Vec::new();
    for (n, line) in manifest.lines().enumerate().skip(1) {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 + spec.d_z {
            return Err(LabError::Parse {
                line: n + 1,
                message: format!("manifest row has {} fields, expected {}", f.len(), 4 + spec.d_z),
            });
        }
        let split = match f[1] {
            "train" => Split::Train,
            "eval" => Split::Eval,
            other => {
                return Err(LabError::Parse {
                    line: n + 1,
                    message: format!("unknown split `{other}`"),
                })
            }
        };
        let source = parse_usize(f[2], n + 1)? as SourceId;
        let concept_id = parse_usize(f[3], n + 1)?;
        let concept = f[4..].iter().map(|v| parse_f64(v, n + 1)).collect::<Result<Vec<_>>>()?;
        meta.push((split, source, concept_id, concept));
    }
    let token_lines: Vec<String> = BufReader::new(fs::File::open(dir.join(TOKENS_FILE))?).lines().collect::<std::io::Result<_>>()?;
    if token_lines.len() != meta.len() {
        return Err(LabError::Parse {
            line: token_lines.len(),
            message: format!("{} token lines for {} manifest rows", token_lines.len(), meta.len()),
        });
    }
    let mut images = vec![Matrix::zeros(spec.patches, spec.d_patch); meta.len()];
    for (n, line) in BufReader::new(fs::File::open(dir.join(IMAGES_FILE))?).lines().enumerate().skip(1) {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 2 + spec.d_patch {
            return Err(LabError::Parse {
                line: n + 1,
                message: format!("image row has {} fields, expected {}", f.len(), 2 + spec.d_patch),
            });
        }
        let row = parse_usize(f[0], n + 1)?;
        let patch = parse_usize(f[1], n + 1)?;
        if row >= images.len() || patch >= spec.patches {
            return Err(LabError::Parse {
                line: n + 1,
                message: format!("row {row} patch {patch} out of range"),
            });
        }
        for (c, v) in f[2..].iter().enumerate() {
            images[row][(patch, c)] = parse_f64(v, n + 1)?;
        }
    }
    let mut corpus = Corpus {
        spec,
        train: Vec::new(),
        eval: Vec::new(),
    };
    for (n, ((meta, image), line)) in meta.into_iter().zip(images).zip(token_lines).enumerate() {
        let tokens = line
            .split_whitespace()
            .map(|t| parse_usize(t, n + 1).map(|v| v as u32))
            .collect::<Result<Vec<_>>>()?;
        let (split, source, concept_id, concept) = meta;
        let sample = SourceTaggedSample {
            image,
            tokens,
            source,
            concept_id,
            concept,
        };
        match split {
            Split::Train => corpus.train.push(sample),
            Split::Eval => corpus.eval.push(sample),
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        let mut s = CorpusSpec::biased_three_source([60, 40, 30], 6, &SeedContext::new(1, "spec"));
        s.eval_size = 30;
        for src in &mut s.sources {
            src.style_token_rate = 0.3;
        }
        s
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let ctx = SeedContext::new(7, "corpus");
        assert_eq!(generate_corpus(&spec, &ctx).unwrap(), generate_corpus(&spec, &ctx).unwrap());
    }

    #[test]
    fn eval_split_is_unbiased() {
        let spec = small_spec();
        let corpus = generate_corpus(&spec, &SeedContext::new(7, "corpus")).unwrap();
        let style_start = spec.content_end();
        assert!(corpus.eval.iter().all(|s| s.tokens.iter().all(|&t| t < style_start)));
        assert!(corpus.train.iter().any(|s| s.tokens.iter().any(|&t| t >= style_start)));
    }

    #[test]
    fn caption_lengths_follow_sources() {
        let mut spec = small_spec();
        spec.sources[0].caption_len = (5, 8);
        spec.sources[1].caption_len = (20, 25);
        let corpus = generate_corpus(&spec, &SeedContext::new(2, "c")).unwrap();
        let mean = |id| {
            let v: Vec<usize> = corpus.train.iter().filter(|s| s.source == id).map(|s| s.tokens.len()).collect();
            v.iter().sum::<usize>() as f64 / v.len() as f64
        };
        assert!((5.0..=8.0).contains(&mean(0)));
        assert!((20.0..=25.0).contains(&mean(1)));
    }

    #[test]
    fn overlapping_style_ranges_are_rejected() {
        let mut spec = small_spec();
        spec.sources[1].style_tokens = spec.sources[0].style_tokens;
        assert!(spec.validate().is_err());
        let mut spec = small_spec();
        spec.sources[0].style_tokens = (FIRST_REGULAR_TOKEN, FIRST_REGULAR_TOKEN + 3);
        assert!(spec.validate().is_err());
        let mut spec = small_spec();
        spec.sources[0].style_offset.pop();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn disabled_corruption_is_identity() {
        let toks = vec![5, 6, 7, 8];
        let out = corrupt_text_with_stats(
            &toks,
            50,
            &CorruptionRates::disabled(),
            &SeedContext::new(1, "c"),
            &mut CorruptionStats::default(),
        );
        assert_eq!(out, toks);
    }

    #[test]
    fn corruption_never_empties_or_leaves_vocab() {
        let rates = CorruptionRates {
            select: 1.0,
            mask: 0.0,
            replace: 0.0,
            delete: 1.0,
        };
        let mut stats = CorruptionStats::default();
        for i in 0..50 {
            let out = corrupt_text_with_stats(&[9, 10, 11], 20, &rates, &SeedContext::new(i, "c"), &mut stats);
            assert_eq!(out.len(), 1);
        }
        assert_eq!(stats.restored, 50);
        for i in 0..200 {
            let out = corrupt_text(&[3, 4, 5, 6, 7], 12, &SeedContext::new(i, "c"));
            assert!(!out.is_empty());
            assert!(out.iter().all(|&t| (t as usize) < 12));
        }
    }

    #[test]
    fn corpus_files_round_trip() {
        let spec = small_spec();
        let corpus = generate_corpus(&spec, &SeedContext::new(3, "corpus")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&corpus, dir.path()).unwrap();
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back, corpus);
    }
}
