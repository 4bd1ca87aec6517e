//! Differentiable similarity layer: cosine and normalized late interaction
//! on raw `f64` embeddings, with the backward pass into those embeddings.

use ndarray::{Array2, ArrayView1};

use super::TrainEmbedding;
use crate::embed::ScoreMode;
use crate::error::{Error, Result};

fn norm(v: ArrayView1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Forward scores plus whatever the backward pass needs.
#[derive(Debug, Clone)]
pub struct PairScores {
    pub scores: Array2<f64>,
    mode: ScoreMode,
    /// Dense: prefix length used. Late: unused.
    prefix: usize,
    /// Late: best passage token per (query, passage, query token), laid
    /// out query-major.
    argmax: Vec<u32>,
    offsets: Vec<usize>,
}

fn check_dims(q: &[TrainEmbedding], p: &[TrainEmbedding], mode: ScoreMode) -> Result<usize> {
    let first = q
        .first()
        .or(p.first())
        .ok_or_else(|| Error::invalid("empty score batch"))?;
    let d = match mode {
        ScoreMode::Dense => first.dense.len(),
        ScoreMode::Late => first.multi.ncols(),
    };
    for e in q.iter().chain(p) {
        let found = match mode {
            ScoreMode::Dense => e.dense.len(),
            ScoreMode::Late => e.multi.ncols(),
        };
        if found != d {
            return Err(Error::DimensionMismatch { expected: d, found });
        }
        if mode == ScoreMode::Late && e.multi.nrows() == 0 {
            return Err(Error::invalid("multi-vector with no token rows"));
        }
    }
    Ok(d)
}

impl PairScores {
    pub fn compute(q: &[TrainEmbedding], p: &[TrainEmbedding], mode: ScoreMode) -> Result<Self> {
        match mode {
            ScoreMode::Dense => {
                let d = check_dims(q, p, mode)?;
                Self::dense(q, p, d)
            }
            ScoreMode::Late => Self::late(q, p),
        }
    }

    /// Cosine of the first `prefix` dense components.
    pub fn dense(q: &[TrainEmbedding], p: &[TrainEmbedding], prefix: usize) -> Result<Self> {
        let d = check_dims(q, p, ScoreMode::Dense)?;
        if prefix == 0 || prefix > d {
            return Err(Error::invalid(format!(
                "truncation length {prefix} exceeds vector dimension {d}"
            )));
        }
        let qn = prefix_norms(q, prefix)?;
        let pn = prefix_norms(p, prefix)?;
        let mut scores = Array2::zeros((q.len(), p.len()));
        for (a, qa) in q.iter().enumerate() {
            let qa = qa.dense.slice(ndarray::s![..prefix]);
            for (b, pb) in p.iter().enumerate() {
                let pb = pb.dense.slice(ndarray::s![..prefix]);
                scores[[a, b]] = dot(qa, pb) / (qn[a] * pn[b]);
            }
        }
        Ok(Self {
            scores,
            mode: ScoreMode::Dense,
            prefix,
            argmax: Vec::new(),
            offsets: Vec::new(),
        })
    }

    /// Query-length normalized late interaction.
    pub fn late(q: &[TrainEmbedding], p: &[TrainEmbedding]) -> Result<Self> {
        check_dims(q, p, ScoreMode::Late)?;
        let qn: Vec<Vec<f64>> = q.iter().map(row_norms).collect::<Result<_>>()?;
        let pn: Vec<Vec<f64>> = p.iter().map(row_norms).collect::<Result<_>>()?;
        let mut scores = Array2::zeros((q.len(), p.len()));
        let mut argmax = Vec::new();
        let mut offsets = Vec::with_capacity(q.len());
        for (a, qa) in q.iter().enumerate() {
            offsets.push(argmax.len());
            let t = qa.multi.nrows() as f64;
            for (b, pb) in p.iter().enumerate() {
                let mut total = 0.0;
                for (i, qi) in qa.multi.rows().into_iter().enumerate() {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_j = 0;
                    for (j, pj) in pb.multi.rows().into_iter().enumerate() {
                        let c = dot(qi, pj) / (qn[a][i] * pn[b][j]);
                        if c > best {
                            best = c;
                            best_j = j;
                        }
                    }
                    total += best;
                    argmax.push(best_j as u32);
                }
                scores[[a, b]] = total / t;
            }
        }
        Ok(Self {
            scores,
            mode: ScoreMode::Late,
            prefix: 0,
            argmax,
            offsets,
        })
    }

    pub fn mode(&self) -> ScoreMode {
        self.mode
    }

    /// Accumulates `dL/dq`, `dL/dp` given `grad = dL/dscores`.
    pub fn backward(
        &self,
        q: &[TrainEmbedding],
        p: &[TrainEmbedding],
        grad: &Array2<f64>,
        gq: &mut [TrainEmbedding],
        gp: &mut [TrainEmbedding],
    ) {
        assert_eq!(grad.dim(), self.scores.dim(), "gradient shape");
        match self.mode {
            ScoreMode::Dense => self.backward_dense(q, p, grad, gq, gp),
            ScoreMode::Late => self.backward_late(q, p, grad, gq, gp),
        }
    }

    fn backward_dense(
        &self,
        q: &[TrainEmbedding],
        p: &[TrainEmbedding],
        grad: &Array2<f64>,
        gq: &mut [TrainEmbedding],
        gp: &mut [TrainEmbedding],
    ) {
        let k = self.prefix;
        let qn = prefix_norms(q, k).expect("checked in forward");
        let pn = prefix_norms(p, k).expect("checked in forward");
        for (a, qa) in q.iter().enumerate() {
            for (b, pb) in p.iter().enumerate() {
                let g = grad[[a, b]];
                if g == 0.0 {
                    continue;
                }
                let c = self.scores[[a, b]];
                for l in 0..k {
                    let qh = qa.dense[l] / qn[a];
                    let ph = pb.dense[l] / pn[b];
                    gq[a].dense[l] += g * (ph - c * qh) / qn[a];
                    gp[b].dense[l] += g * (qh - c * ph) / pn[b];
                }
            }
        }
    }

    fn backward_late(
        &self,
        q: &[TrainEmbedding],
        p: &[TrainEmbedding],
        grad: &Array2<f64>,
        gq: &mut [TrainEmbedding],
        gp: &mut [TrainEmbedding],
    ) {
        let qn: Vec<Vec<f64>> = q.iter().map(|e| row_norms(e).unwrap()).collect();
        let pn: Vec<Vec<f64>> = p.iter().map(|e| row_norms(e).unwrap()).collect();
        for (a, qa) in q.iter().enumerate() {
            let t = qa.multi.nrows();
            for (b, pb) in p.iter().enumerate() {
                let g = grad[[a, b]] / t as f64;
                if g == 0.0 {
                    continue;
                }
                let base = self.offsets[a] + b * t;
                #[allow(clippy::needless_range_loop)]
                for i in 0..t {
                    let j = self.argmax[base + i] as usize;
                    let qi = qa.multi.row(i);
                    let pj = pb.multi.row(j);
                    let (nq, np) = (qn[a][i], pn[b][j]);
                    let c = dot(qi, pj) / (nq * np);
                    for l in 0..qi.len() {
                        let qh = qi[l] / nq;
                        let ph = pj[l] / np;
                        gq[a].multi[[i, l]] += g * (ph - c * qh) / nq;
                        gp[b].multi[[j, l]] += g * (qh - c * ph) / np;
                    }
                }
            }
        }
    }
}

fn prefix_norms(e: &[TrainEmbedding], k: usize) -> Result<Vec<f64>> {
    e.iter()
        .map(|x| {
            let n = norm(x.dense.slice(ndarray::s![..k]));
            if n == 0.0 {
                Err(Error::Degenerate("embedding"))
            } else {
                Ok(n)
            }
        })
        .collect()
}

fn row_norms(e: &TrainEmbedding) -> Result<Vec<f64>> {
    e.multi
        .rows()
        .into_iter()
        .map(|r| {
            let n = norm(r);
            if n == 0.0 {
                Err(Error::Degenerate("embedding"))
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Smallest gap between the best and second-best token cosine over every
/// MaxSim decision in `q x p`. Late-interaction gradients are only defined
/// away from ties; `f64::INFINITY` when every passage has one token.
pub fn min_maxsim_margin(q: &[TrainEmbedding], p: &[TrainEmbedding]) -> f64 {
    let mut margin = f64::INFINITY;
    for qa in q {
        for pb in p {
            for qi in qa.multi.rows() {
                let nq = norm(qi);
                let mut cs: Vec<f64> = pb
                    .multi
                    .rows()
                    .into_iter()
                    .map(|pj| dot(qi, pj) / (nq * norm(pj)))
                    .collect();
                if cs.len() < 2 {
                    continue;
                }
                cs.sort_by(|x, y| y.total_cmp(x));
                margin = margin.min(cs[0] - cs[1]);
            }
        }
    }
    margin
}
