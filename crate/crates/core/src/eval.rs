//! Retrieval metrics: per-query ranks, R@K, mean rank and median rank in
//! both directions.
//!
//! Tie rule: the matched item wins ties (rank counts only strictly
//! greater scores). Median is the lower median for even counts. Both
//! choices are fixed here and echoed in reports.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Text x video score grid. Rows are texts.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub scores: Vec<f32>,
    pub n_texts: usize,
    pub n_videos: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    T2v,
    V2t,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::T2v => "t2v",
            Direction::V2t => "v2t",
        }
    }
}

impl SimilarityMatrix {
    pub fn new(scores: Vec<f32>, n_texts: usize, n_videos: usize) -> Result<Self> {
        if scores.len() != n_texts * n_videos {
            return Err(CoreError::BadShape {
                op: "similarity_matrix",
                msg: format!("{} scores for {} x {}", scores.len(), n_texts, n_videos),
                shape: vec![n_texts, n_videos],
            });
        }
        if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite(format!("similarity score {}", bad)));
        }
        Ok(SimilarityMatrix { scores, n_texts, n_videos })
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.scores[i * self.n_videos + j]
    }

    pub fn transposed(&self) -> SimilarityMatrix {
        let mut scores = vec![0.0f32; self.scores.len()];
        for i in 0..self.n_texts {
            for j in 0..self.n_videos {
                scores[j * self.n_texts + i] = self.at(i, j);
            }
        }
        SimilarityMatrix { scores, n_texts: self.n_videos, n_videos: self.n_texts }
    }
}

/// Rank of each query's matched item under diagonal pairing.
///
/// rank = 1 + number of non-matched candidates scoring strictly higher.
pub fn ranks(s: &SimilarityMatrix, direction: Direction) -> Result<Vec<usize>> {
    if s.n_texts != s.n_videos {
        return Err(CoreError::InvalidSpec(format!(
            "diagonal pairing needs a square grid, got {} x {}",
            s.n_texts, s.n_videos
        )));
    }
    let n = s.n_texts;
    let mut out = Vec::with_capacity(n);
    for q in 0..n {
        let score = |c: usize| match direction {
            Direction::T2v => s.at(q, c),
            Direction::V2t => s.at(c, q),
        };
        let matched = score(q);
        let better = (0..n).filter(|&c| c != q && score(c) > matched).count();
        out.push(1 + better);
    }
    Ok(out)
}

/// R@K (percent), mean rank and median rank for one direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    /// (K, percentage) pairs, ascending in K.
    pub recall_at: Vec<(usize, f64)>,
    pub mean_rank: f64,
    pub median_rank: f64,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

pub fn metrics(ranks: &[usize], ks: &[usize], direction: Direction) -> Result<RetrievalReport> {
    if ranks.is_empty() {
        return Err(CoreError::InvalidSpec("metrics need at least one rank".into()));
    }
    let n = ranks.len() as f64;
    let recall_at = ks
        .iter()
        .map(|&k| (k, 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    let mean_rank = ranks.iter().sum::<usize>() as f64 / n;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    // Lower median for even counts.
    let median_rank = sorted[(sorted.len() - 1) / 2] as f64;
    Ok(RetrievalReport { direction, recall_at, mean_rank, median_rank })
}

/// Both directions on one square grid.
pub fn evaluate_both(s: &SimilarityMatrix, ks: &[usize]) -> Result<(RetrievalReport, RetrievalReport)> {
    let t2v = metrics(&ranks(s, Direction::T2v)?, ks, Direction::T2v)?;
    let v2t = metrics(&ranks(s, Direction::V2t)?, ks, Direction::V2t)?;
    Ok((t2v, v2t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    /// Sort-based oracle: descending sort with the match ahead of ties,
    /// rank = final position of the match.
    fn rank_oracle(scores: &[f32], n: usize, q: usize, by_row: bool) -> usize {
        let score = |c: usize| if by_row { scores[q * n + c] } else { scores[c * n + q] };
        let mut items: Vec<(f32, bool)> = (0..n).map(|c| (score(c), c == q)).collect();
        items.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(b.1.cmp(&a.1)));
        items.iter().position(|item| item.1).unwrap() + 1
    }

    #[test]
    fn identity_matrix_all_rank_one() {
        let n = 4;
        let mut scores = vec![0.0f32; n * n];
        for i in 0..n {
            scores[i * n + i] = 1.0;
        }
        let s = SimilarityMatrix::new(scores, n, n).unwrap();
        assert_eq!(ranks(&s, Direction::T2v).unwrap(), vec![1; n]);
        assert_eq!(ranks(&s, Direction::V2t).unwrap(), vec![1; n]);
    }

    #[test]
    fn match_wins_ties() {
        // row [0.9, 0.9, 0.1], match at column 0 -> rank 1
        let scores = vec![0.9, 0.9, 0.1, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let s = SimilarityMatrix::new(scores, 3, 3).unwrap();
        assert_eq!(ranks(&s, Direction::T2v).unwrap()[0], 1);
    }

    #[test]
    fn random_grid_matches_sort_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let n = 50;
        let scores: Vec<f32> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = SimilarityMatrix::new(scores.clone(), n, n).unwrap();
        let got = ranks(&s, Direction::T2v).unwrap();
        for q in 0..n {
            assert_eq!(got[q], rank_oracle(&scores, n, q, true));
        }
        let got = ranks(&s, Direction::V2t).unwrap();
        for q in 0..n {
            assert_eq!(got[q], rank_oracle(&scores, n, q, false));
        }
    }

    #[test]
    fn metric_arithmetic() {
        // all ranks 1
        let r = metrics(&[1, 1, 1], &DEFAULT_KS, Direction::T2v).unwrap();
        assert_eq!(r.recall(1), Some(100.0));
        assert_eq!(r.mean_rank, 1.0);
        assert_eq!(r.median_rank, 1.0);

        // ranks [1,2,3,4]: R@1 = 25, MnR 2.5, MdR 2 (lower median)
        let r = metrics(&[1, 2, 3, 4], &DEFAULT_KS, Direction::T2v).unwrap();
        assert_eq!(r.recall(1), Some(25.0));
        assert_eq!(r.mean_rank, 2.5);
        assert_eq!(r.median_rank, 2.0);

        // monotone in K; R@n = 100
        let r = metrics(&[3, 1, 4, 2], &[1, 2, 3, 4], Direction::T2v).unwrap();
        let vals: Vec<f64> = r.recall_at.iter().map(|(_, v)| *v).collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*vals.last().unwrap(), 100.0);
    }

    #[test]
    fn scale_invariance_and_transpose_duality() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 20;
        let scores: Vec<f32> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = SimilarityMatrix::new(scores.clone(), n, n).unwrap();
        let scaled =
            SimilarityMatrix::new(scores.iter().map(|v| v * 7.5).collect(), n, n).unwrap();
        assert_eq!(ranks(&s, Direction::T2v).unwrap(), ranks(&scaled, Direction::T2v).unwrap());

        let t = s.transposed();
        assert_eq!(ranks(&s, Direction::T2v).unwrap(), ranks(&t, Direction::V2t).unwrap());
        assert_eq!(ranks(&s, Direction::V2t).unwrap(), ranks(&t, Direction::T2v).unwrap());
    }

    #[test]
    fn non_square_rejected_and_non_finite_rejected() {
        let s = SimilarityMatrix::new(vec![0.0; 6], 2, 3).unwrap();
        assert!(ranks(&s, Direction::T2v).is_err());
        assert!(SimilarityMatrix::new(vec![f32::NAN], 1, 1).is_err());
    }
}
