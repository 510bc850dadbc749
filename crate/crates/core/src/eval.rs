//! Retrieval metrics, per-source negative log-probability diagnostics and
//! embedding export.
//!
//! Pairing is bijective: query `i` in either direction matches candidate `i`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::{negative_logp_stats, probability_matrices, similarity_matrix, LabelMatrix};
use crate::encoders::EncoderParams;
use crate::engine::embed_split;
use crate::error::{invalid, LabError, Result};
use crate::numerics::Matrix;
use crate::sampling::SourceId;
use crate::synthdata::SourceTaggedSample;

/// Recalls in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub i2t_r1: f64,
    pub i2t_r5: f64,
    pub i2t_r10: f64,
    pub t2i_r1: f64,
    pub t2i_r5: f64,
    pub t2i_r10: f64,
    pub rsum: f64,
}

impl RetrievalReport {
    pub fn recalls(&self) -> [f64; 6] {
        [self.i2t_r1, self.i2t_r5, self.i2t_r10, self.t2i_r1, self.t2i_r5, self.t2i_r10]
    }
}

/// 0-based rank of candidate `target` in `scores`: the number of candidates
/// that beat it, where equal scores at lower indices count as beating it.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(k, &s)| s > t || (s == t && k < target))
        .count()
}

fn recall_at(ranks: &[usize], k: usize) -> f64 {
    100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
}

/// R@{1,5,10} in both directions by cosine similarity; embeddings need not
/// be normalized.
pub fn retrieval_report(img: &Matrix, txt: &Matrix) -> Result<RetrievalReport> {
    if img.rows() != txt.rows() || img.cols() != txt.cols() {
        return Err(invalid(format!(
            "retrieval needs paired embeddings, got {}x{} images and {}x{} texts",
            img.rows(),
            img.cols(),
            txt.rows(),
            txt.cols()
        )));
    }
    if img.rows() == 0 {
        return Err(invalid("retrieval over an empty set"));
    }
    let (img, _) = crate::numerics::l2_normalize_rows(img)?;
    let (txt, _) = crate::numerics::l2_normalize_rows(txt)?;
    let s = img.matmul_t(&txt);
    let st = s.transpose();
    let n = s.rows();
    let i2t: Vec<usize> = (0..n).map(|i| rank_of(s.row(i), i)).collect();
    let t2i: Vec<usize> = (0..n).map(|i| rank_of(st.row(i), i)).collect();
    let mut r = RetrievalReport {
        i2t_r1: recall_at(&i2t, 1),
        i2t_r5: recall_at(&i2t, 5),
        i2t_r10: recall_at(&i2t, 10),
        t2i_r1: recall_at(&t2i, 1),
        t2i_r5: recall_at(&t2i, 5),
        t2i_r10: recall_at(&t2i, 10),
        rsum: 0.0,
    };
    r.rsum = r.recalls().iter().sum();
    Ok(r)
}

/// Eval-mode embeddings of a split, then [`retrieval_report`].
pub fn evaluate_split(params: &EncoderParams, split: &[SourceTaggedSample]) -> Result<RetrievalReport> {
    let (img, txt) = embed_split(params, split)?;
    retrieval_report(&img, &txt)
}

/// Mean log p̄ over negatives per source on fixed probe batches, in eval mode.
///
/// Probes are contiguous chunks of `probe_indices`; a trailing partial chunk
/// is dropped. Per-source means are averaged over the probes.
pub fn probe_logp_per_source(
    params: &EncoderParams,
    split: &[SourceTaggedSample],
    probe_indices: &[usize],
    probe_size: usize,
) -> Result<BTreeMap<SourceId, f64>> {
    if probe_size < 2 {
        return Err(invalid("probe batches need at least two samples"));
    }
    let mut sums: BTreeMap<SourceId, (f64, usize)> = BTreeMap::new();
    for chunk in probe_indices.chunks_exact(probe_size) {
        let subset: Vec<SourceTaggedSample> = chunk.iter().map(|&i| split[i].clone()).collect();
        let (img, txt) = embed_split(params, &subset)?;
        let p = probability_matrices(&similarity_matrix(&img, &txt, params.tau)?)?;
        let y = LabelMatrix::identity(chunk.len());
        let tags: Vec<SourceId> = subset.iter().map(|s| s.source).collect();
        for (src, v) in negative_logp_stats(&p, &y, &y, &tags)?.per_source {
            let e = sums.entry(src).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    if sums.is_empty() {
        return Err(invalid(format!(
            "{} probe indices do not fill one batch of {probe_size}",
            probe_indices.len()
        )));
    }
    Ok(sums.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect())
}

/// Image or text row of an embedding export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportModality {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingExport {
    pub img: Matrix,
    pub txt: Matrix,
    pub img_sources: Vec<SourceId>,
    pub txt_sources: Vec<SourceId>,
}

/// CSV: header `modality,source,e0,…,e{d-1}`, image rows then text rows,
/// components as `{:.16e}` (17 significant digits).
pub fn embeddings_to_csv(img: &Matrix, txt: &Matrix, img_sources: &[SourceId], txt_sources: &[SourceId]) -> Result<String> {
    if img.rows() != img_sources.len() || txt.rows() != txt_sources.len() {
        return Err(invalid(format!(
            "{} image rows with {} tags, {} text rows with {} tags",
            img.rows(),
            img_sources.len(),
            txt.rows(),
            txt_sources.len()
        )));
    }
    if img.cols() != txt.cols() {
        return Err(invalid(format!("image dim {} differs from text dim {}", img.cols(), txt.cols())));
    }
    let mut out = String::from("modality,source");
    for c in 0..img.cols() {
        write!(out, ",e{c}").unwrap();
    }
    out.push('\n');
    for (label, m, tags) in [("image", img, img_sources), ("text", txt, txt_sources)] {
        for (r, src) in tags.iter().enumerate() {
            write!(out, "{label},{src}").unwrap();
            for v in m.row(r) {
                write!(out, ",{v:.16e}").unwrap();
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn export_embeddings(
    img: &Matrix,
    txt: &Matrix,
    img_sources: &[SourceId],
    txt_sources: &[SourceId],
    path: &Path,
) -> Result<()> {
    fs::write(path, embeddings_to_csv(img, txt, img_sources, txt_sources)?)?;
    Ok(())
}

pub fn parse_embeddings(csv: &str) -> Result<EmbeddingExport> {
    let mut lines = csv.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| LabError::Parse {
        line: 1,
        message: "empty embedding file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "modality" || cols[1] != "source" {
        return Err(LabError::Parse {
            line: 1,
            message: format!("expected header `modality,source,e0,...`, got `{header}`"),
        });
    }
    let d = cols.len() - 2;
    for (c, name) in cols[2..].iter().enumerate() {
        if *name != format!("e{c}") {
            return Err(LabError::Parse {
                line: 1,
                message: format!("column {} should be `e{c}`, got `{name}`", c + 2),
            });
        }
    }
    let (mut img, mut txt) = (Vec::new(), Vec::new());
    let (mut img_sources, mut txt_sources) = (Vec::new(), Vec::new());
    for (i, line) in lines {
        let err = |message: String| LabError::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 2 {
            return Err(err(format!("expected {} fields, got {}", d + 2, fields.len())));
        }
        let src: SourceId = fields[1].parse().map_err(|_| err(format!("bad source id `{}`", fields[1])))?;
        let values = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| err(format!("bad number `{f}`"))))
            .collect::<Result<Vec<f64>>>()?;
        match fields[0] {
            "image" => {
                if !txt.is_empty() {
                    return Err(err("image row after text rows".into()));
                }
                img.push(values);
                img_sources.push(src);
            }
            "text" => {
                txt.push(values);
                txt_sources.push(src);
            }
            other => return Err(err(format!("unknown modality `{other}`"))),
        }
    }
    let build = |rows: Vec<Vec<f64>>| {
        if rows.is_empty() {
            Ok(Matrix::zeros(0, d))
        } else {
            Matrix::from_rows(&rows)
        }
    };
    Ok(EmbeddingExport {
        img: build(img)?,
        txt: build(txt)?,
        img_sources,
        txt_sources,
    })
}
