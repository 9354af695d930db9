//! Cross-modal retrieval metrics: ground-truth ranks, Recall@K and median
//! rank, plus the gallery evaluation harness.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetError, FeatureTable};
use crate::embedding::{cosine_similarity_matrix, EmbeddingBatch, EmbeddingError, SimilarityMatrix};
use crate::encoders::{ModelError, ModelSnapshot, Modality};

pub const DEFAULT_KS: [usize; 3] = [1, 10, 100];

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("similarity matrix is {rows}x{cols}, expected square")]
    NonSquare { rows: usize, cols: usize },
    #[error("empty rank vector")]
    EmptyInput,
    #[error("unknown direction {0:?}")]
    UnknownDirection(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// 1-based rank of each query's ground truth within its gallery row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankVector {
    pub ranks: Vec<usize>,
}

/// `rank_i = 1 + #{j != i : sim[i][j] > sim[i][i]}`; ties never push the
/// ground truth down.
pub fn ranks_from_similarity(sim: &SimilarityMatrix) -> Result<RankVector, RetrievalError> {
    let (rows, cols) = sim.shape();
    if rows != cols {
        return Err(RetrievalError::NonSquare { rows, cols });
    }
    let e = &sim.entries;
    let ranks = (0..rows)
        .map(|i| {
            let truth = e[[i, i]];
            1 + (0..cols).filter(|&j| j != i && e[[i, j]] > truth).count()
        })
        .collect();
    Ok(RankVector { ranks })
}

/// Fraction of ranks `<= k`.
pub fn recall_at_k(ranks: &RankVector, k: usize) -> f64 {
    if ranks.ranks.is_empty() {
        return 0.0;
    }
    ranks.ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.ranks.len() as f64
}

/// Middle rank; for an even count the mean of the two middle ranks.
pub fn median_rank(ranks: &RankVector) -> Result<f64, RetrievalError> {
    let mut r = ranks.ranks.clone();
    if r.is_empty() {
        return Err(RetrievalError::EmptyInput);
    }
    r.sort_unstable();
    let n = r.len();
    Ok(if n % 2 == 1 {
        r[n / 2] as f64
    } else {
        (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0
    })
}

/// Query modality -> gallery modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Image2Sound,
    Sound2Image,
    Text2Sound,
    Sound2Text,
    Text2Image,
    Image2Text,
}

impl Direction {
    pub const ALL: [Direction; 6] = [
        Self::Image2Sound,
        Self::Sound2Image,
        Self::Text2Sound,
        Self::Sound2Text,
        Self::Text2Image,
        Self::Image2Text,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Image2Sound => "image2sound",
            Self::Sound2Image => "sound2image",
            Self::Text2Sound => "text2sound",
            Self::Sound2Text => "sound2text",
            Self::Text2Image => "text2image",
            Self::Image2Text => "image2text",
        }
    }

    pub fn query(self) -> Modality {
        match self {
            Self::Image2Sound | Self::Image2Text => Modality::Image,
            Self::Sound2Image | Self::Sound2Text => Modality::Audio,
            Self::Text2Sound | Self::Text2Image => Modality::Text,
        }
    }

    pub fn gallery(self) -> Modality {
        match self {
            Self::Sound2Image | Self::Text2Image => Modality::Image,
            Self::Image2Sound | Self::Text2Sound => Modality::Audio,
            Self::Sound2Text | Self::Image2Text => Modality::Text,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = RetrievalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| RetrievalError::UnknownDirection(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub median_rank: f64,
    pub mean_rank: f64,
    pub gallery_size: usize,
}

pub fn report_from_similarity(
    direction: Direction,
    sim: &SimilarityMatrix,
    ks: &[usize],
) -> Result<RetrievalReport, RetrievalError> {
    let ranks = ranks_from_similarity(sim)?;
    let median = median_rank(&ranks)?;
    let mean = ranks.ranks.iter().sum::<usize>() as f64 / ranks.ranks.len() as f64;
    Ok(RetrievalReport {
        direction,
        recall_at_k: ks.iter().map(|&k| (k, recall_at_k(&ranks, k))).collect(),
        median_rank: median,
        mean_rank: mean,
        gallery_size: sim.shape().1,
    })
}

/// Reports for `directions` given one aligned embedding batch per modality.
pub fn evaluate_embeddings(
    embeddings: &BTreeMap<Modality, EmbeddingBatch>,
    directions: &[Direction],
    ks: &[usize],
) -> Result<Vec<RetrievalReport>, RetrievalError> {
    directions
        .iter()
        .map(|&d| {
            let q = &embeddings[&d.query()];
            let g = &embeddings[&d.gallery()];
            let sim = cosine_similarity_matrix(q, g)?;
            report_from_similarity(d, &sim, ks)
        })
        .collect()
}

/// Embeds every gallery item once per needed modality (evaluation path)
/// and reports each direction over the full gallery.
pub fn evaluate_crossmodal(
    snapshot: &ModelSnapshot,
    table: &FeatureTable,
    gallery_ids: &[String],
    directions: &[Direction],
    ks: &[usize],
) -> Result<Vec<RetrievalReport>, RetrievalError> {
    let batch = table.batch(gallery_ids)?;
    let mut embeddings = BTreeMap::new();
    for d in directions {
        for m in [d.query(), d.gallery()] {
            if embeddings.contains_key(&m) {
                continue;
            }
            let feats = match m {
                Modality::Audio => &batch.audio,
                Modality::Text => &batch.text,
                Modality::Image => &batch.image,
            };
            embeddings.insert(m, snapshot.encode(m, gallery_ids.to_vec(), feats.view())?);
        }
    }
    evaluate_embeddings(&embeddings, directions, ks)
}

/// Aligned text table: one row per direction, one column per K, then
/// median rank.
pub fn format_report_table(reports: &[RetrievalReport]) -> String {
    let ks: Vec<usize> = reports
        .first()
        .map(|r| r.recall_at_k.keys().copied().collect())
        .unwrap_or_default();
    let mut header = vec!["direction".to_string()];
    header.extend(ks.iter().map(|k| format!("R@{k}")));
    header.push("Median-R".into());
    header.push("gallery".into());
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.direction.to_string()];
        row.extend(ks.iter().map(|k| format!("{:.3}", r.recall_at_k.get(k).copied().unwrap_or(f64::NAN))));
        row.push(format!("{}", r.median_rank));
        row.push(r.gallery_size.to_string());
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}
