//! Embedding-space geometry: cosine distributions of matched pairs,
//! cross-modal alignment, modality gap and positive/negative separation.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::Serialize;

use crate::embed::{cosine, DenseVector, EmbeddingRecord};
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 50;

/// Uniform bins over `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bins {
    edges: Vec<f64>,
}

impl Bins {
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("histogram needs at least one bin"));
        }
        let edges = (0..=n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect();
        Ok(Self { edges })
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Bin of `x`; the top edge belongs to the last bin, and values outside
    /// the range are clamped into the end bins.
    pub fn index(&self, x: f64) -> usize {
        let n = self.len();
        let i = ((x + 1.0) / 2.0 * n as f64).floor();
        (i.max(0.0) as usize).min(n - 1)
    }
}

impl Default for Bins {
    fn default() -> Self {
        Self::uniform(DEFAULT_BINS).expect("nonzero bins")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionSummary {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl DistributionSummary {
    pub fn from_values(values: &[f64], bins: &Bins) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("distribution of an empty sample"));
        }
        let mut counts = vec![0u64; bins.len()];
        for &v in values {
            counts[bins.index(v)] += 1;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self {
            edges: bins.edges().to_vec(),
            counts,
            n: values.len(),
            mean,
            std: var.sqrt(),
        })
    }
}

/// `Σ min(p, q)` over the two normalized histograms; 1 for identical
/// shapes, 0 for disjoint supports.
pub fn overlap_coefficient(a: &DistributionSummary, b: &DistributionSummary) -> Result<f64> {
    if a.edges != b.edges {
        return Err(Error::invalid("histograms use different bins"));
    }
    let (na, nb) = (a.n as f64, b.n as f64);
    Ok(a.counts
        .iter()
        .zip(&b.counts)
        .map(|(&x, &y)| (x as f64 / na).min(y as f64 / nb))
        .sum())
}

/// Cosine of every pair.
pub fn pair_cosines(pairs: &[(&DenseVector, &DenseVector)]) -> Result<Vec<f64>> {
    pairs.iter().map(|(a, b)| cosine(a, b)).collect()
}

/// Mean cosine over matched cross-modal pairs.
pub fn alignment_score(pairs: &[(&DenseVector, &DenseVector)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("alignment score of an empty pair set"));
    }
    let c = pair_cosines(pairs)?;
    Ok(c.iter().sum::<f64>() / c.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModalityGap {
    pub cross_modal: DistributionSummary,
    pub same_modal: DistributionSummary,
    /// `mean(same_modal) - mean(cross_modal)`.
    pub gap: f64,
    pub overlap: f64,
}

pub fn modality_gap(
    cross_modal: &[(&DenseVector, &DenseVector)],
    same_modal: &[(&DenseVector, &DenseVector)],
    bins: &Bins,
) -> Result<ModalityGap> {
    if cross_modal.is_empty() || same_modal.is_empty() {
        return Err(Error::invalid(
            "modality gap needs nonempty cross- and same-modal sets",
        ));
    }
    let cross = DistributionSummary::from_values(&pair_cosines(cross_modal)?, bins)?;
    let same = DistributionSummary::from_values(&pair_cosines(same_modal)?, bins)?;
    Ok(ModalityGap {
        gap: same.mean - cross.mean,
        overlap: overlap_coefficient(&cross, &same)?,
        cross_modal: cross,
        same_modal: same,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConeEffect {
    pub positive: DistributionSummary,
    pub negative: DistributionSummary,
    /// `mean(positive) - mean(negative)`.
    pub separation: f64,
    pub overlap: f64,
}

pub fn cone_effect(
    positives: &[(&DenseVector, &DenseVector)],
    negatives: &[(&DenseVector, &DenseVector)],
    bins: &Bins,
) -> Result<ConeEffect> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::invalid(
            "cone effect needs nonempty positive and negative sets",
        ));
    }
    let pos = DistributionSummary::from_values(&pair_cosines(positives)?, bins)?;
    let neg = DistributionSummary::from_values(&pair_cosines(negatives)?, bins)?;
    Ok(ConeEffect {
        separation: pos.mean - neg.mean,
        overlap: overlap_coefficient(&pos, &neg)?,
        positive: pos,
        negative: neg,
    })
}

/// `bin_lo,bin_hi,count_a,count_b` rows.
pub fn write_histogram_csv<W: Write>(
    mut w: W,
    a: &DistributionSummary,
    b: &DistributionSummary,
) -> Result<()> {
    if a.edges != b.edges {
        return Err(Error::invalid("histograms use different bins"));
    }
    writeln!(w, "bin_lo,bin_hi,count_a,count_b")?;
    for i in 0..a.counts.len() {
        writeln!(
            w,
            "{:.6},{:.6},{},{}",
            a.edges[i],
            a.edges[i + 1],
            a.counts[i],
            b.counts[i]
        )?;
    }
    Ok(())
}

/// Tag of one line of a pair list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairTag {
    ImageText,
    TextText,
    Positive,
    Negative,
}

impl std::str::FromStr for PairTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image-text" | "text-image" => Ok(Self::ImageText),
            "text-text" => Ok(Self::TextText),
            "positive" => Ok(Self::Positive),
            "negative" => Ok(Self::Negative),
            other => Err(Error::invalid(format!(
                "unknown pair tag `{other}` (expected image-text, text-text, positive or negative)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedPair {
    pub a: String,
    pub b: String,
    pub tag: PairTag,
}

/// Reads `id_a<TAB>id_b<TAB>tag`; a first line with an unknown tag is a
/// header.
pub fn read_pair_list<R: BufRead>(r: R) -> Result<Vec<TaggedPair>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::invalid(format!(
                "line {}: expected 3 tab-separated fields, got {}",
                n + 1,
                fields.len()
            )));
        }
        let tag = match fields[2].trim().parse() {
            Ok(t) => t,
            Err(_) if n == 0 => continue,
            Err(e) => return Err(e),
        };
        out.push(TaggedPair {
            a: fields[0].to_string(),
            b: fields[1].to_string(),
            tag,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub pairs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modality_gap: Option<ModalityGap>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cone_effect: Option<ConeEffect>,
}

impl DiagnosticsReport {
    /// Histogram pair for CSV output: the modality-gap pair if present,
    /// else the cone-effect pair.
    pub fn histograms(&self) -> Option<(&DistributionSummary, &DistributionSummary)> {
        if let Some(g) = &self.modality_gap {
            return Some((&g.cross_modal, &g.same_modal));
        }
        self.cone_effect
            .as_ref()
            .map(|c| (&c.positive, &c.negative))
    }
}

/// Resolves pair ids (`a` in `left`, `b` in `right`) and runs every
/// analysis the tags allow: alignment and modality gap on image-text /
/// text-text pairs, cone effect on positive / negative pairs.
pub fn diagnose(
    left: &[EmbeddingRecord],
    right: &[EmbeddingRecord],
    pairs: &[TaggedPair],
    bins: &Bins,
) -> Result<DiagnosticsReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("pair list is empty"));
    }
    let index = |records: &[EmbeddingRecord]| -> HashMap<String, usize> {
        records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect()
    };
    let (li, ri) = (index(left), index(right));
    let mut by_tag: HashMap<PairTag, Vec<(&DenseVector, &DenseVector)>> = HashMap::new();
    for p in pairs {
        let a = li
            .get(&p.a)
            .ok_or_else(|| Error::invalid(format!("pair references unknown id `{}`", p.a)))?;
        let b = ri
            .get(&p.b)
            .ok_or_else(|| Error::invalid(format!("pair references unknown id `{}`", p.b)))?;
        by_tag
            .entry(p.tag)
            .or_default()
            .push((&left[*a].dense, &right[*b].dense));
    }
    let get = |t: PairTag| by_tag.get(&t).map(Vec::as_slice).unwrap_or(&[]);
    let (it, tt) = (get(PairTag::ImageText), get(PairTag::TextText));
    let (pos, neg) = (get(PairTag::Positive), get(PairTag::Negative));
    let alignment_score = if it.is_empty() {
        None
    } else {
        Some(alignment_score(it)?)
    };
    let modality_gap = if !it.is_empty() && !tt.is_empty() {
        Some(modality_gap(it, tt, bins)?)
    } else {
        None
    };
    let cone_effect = if !pos.is_empty() && !neg.is_empty() {
        Some(cone_effect(pos, neg, bins)?)
    } else {
        None
    };
    if alignment_score.is_none() && cone_effect.is_none() {
        return Err(Error::invalid(
            "pair list supports no analysis: need image-text pairs or both positive and negative pairs",
        ));
    }
    Ok(DiagnosticsReport {
        pairs: pairs.len(),
        alignment_score,
        modality_gap,
        cone_effect,
    })
}
