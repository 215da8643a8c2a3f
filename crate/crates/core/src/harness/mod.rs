//! Retrieval metrics, sweep and benchmark drivers, and report output.

mod corpus;
mod report;
mod sweep;

pub use corpus::{write_image_set, CorpusConfig, CorpusManifest, CorpusPair, RetrievalCorpus};
pub use report::{
    emit_report, ReportFormat, ReportKind, ReportMetadata, SweepReport, SweepRow, CSV_COLUMNS, TIMING_COLUMNS,
};
pub use sweep::{bench_with, rerun, run_bench, run_sweep, sweep_with, Axis, BenchSpec, Evaluation, Metrics};

use crate::error::{Error, Result};
use crate::model::similarity;

/// Which side acts as the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Direction {
    #[default]
    ImageToText,
    TextToImage,
}

/// Rank of the matching item among `candidates` for `query`: the number of
/// candidates scoring strictly higher plus lower-indexed ties.
fn rank_of_match(query: &[f64], candidates: &[Vec<f64>], target: usize) -> usize {
    let s = similarity(query, &candidates[target]);
    candidates
        .iter()
        .enumerate()
        .filter(|&(j, c)| {
            let v = similarity(query, c);
            v > s || (v == s && j < target)
        })
        .count()
}

/// Fraction of queries whose same-index match ranks in the top `k`.
pub fn recall_at_k(images: &[Vec<f64>], texts: &[Vec<f64>], k: usize) -> Result<f64> {
    recall_at_k_dir(images, texts, k, Direction::ImageToText)
}

pub fn recall_at_k_dir(images: &[Vec<f64>], texts: &[Vec<f64>], k: usize, dir: Direction) -> Result<f64> {
    Ok(recall_many(images, texts, &[k], dir)?[0])
}

/// Recall at several cutoffs from one ranking pass.
pub fn recall_many(images: &[Vec<f64>], texts: &[Vec<f64>], ks: &[usize], dir: Direction) -> Result<Vec<f64>> {
    let n = images.len();
    if texts.len() != n {
        return Err(Error::invalid(format!("{n} image embeddings but {} text embeddings", texts.len())));
    }
    if n == 0 {
        return Err(Error::invalid("recall needs at least one pair"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={n}")));
    }
    let (queries, candidates) = match dir {
        Direction::ImageToText => (images, texts),
        Direction::TextToImage => (texts, images),
    };
    let ranks: Vec<usize> = (0..n).map(|i| rank_of_match(&queries[i], candidates, i)).collect();
    Ok(ks.iter().map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64).collect())
}

/// Mean cosine similarity of same-index pairs.
pub fn mean_pair_similarity(images: &[Vec<f64>], texts: &[Vec<f64>]) -> f64 {
    let n = images.len().min(texts.len());
    if n == 0 {
        return 0.0;
    }
    images.iter().zip(texts).map(|(a, b)| similarity(a, b)).sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn identity_structure_is_perfect() {
        let e: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        assert_eq!(recall_at_k(&e, &e, 1).unwrap(), 1.0);
        assert_eq!(recall_at_k_dir(&e, &e, 1, Direction::TextToImage).unwrap(), 1.0);
    }

    #[test]
    fn bad_k_is_rejected() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(recall_at_k(&e, &e, 3).is_err());
        assert!(recall_at_k(&e, &e, 0).is_err());
        assert!(recall_at_k(&e, &e[..1], 1).is_err());
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        // Both texts are identical, so each image sees a tie.
        let imgs = vec![unit(&[1.0, 0.2]), unit(&[1.0, -0.3])];
        let texts = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(recall_at_k(&imgs, &texts, 1).unwrap(), 0.5);
        assert_eq!(recall_at_k(&imgs, &texts, 2).unwrap(), 1.0);
    }

    #[test]
    fn hand_built_three_by_three() {
        // Similarity rows: image 0 prefers text 0, image 1 prefers text 2
        // then 1, image 2 ranks its text last.
        let texts = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let imgs = vec![unit(&[0.9, 0.1, 0.0]), unit(&[0.0, 0.5, 0.8]), unit(&[0.6, 0.7, 0.1])];
        assert_eq!(
            recall_many(&imgs, &texts, &[1, 2, 3], Direction::ImageToText).unwrap(),
            vec![1.0 / 3.0, 2.0 / 3.0, 1.0]
        );
    }

    fn oracle(imgs: &[Vec<f64>], texts: &[Vec<f64>], k: usize) -> f64 {
        let mut hits = 0;
        for (i, q) in imgs.iter().enumerate() {
            let mut order: Vec<usize> = (0..texts.len()).collect();
            order.sort_by(|&a, &b| {
                similarity(q, &texts[b]).partial_cmp(&similarity(q, &texts[a])).unwrap().then(a.cmp(&b))
            });
            if order[..k].contains(&i) {
                hits += 1;
            }
        }
        hits as f64 / imgs.len() as f64
    }

    proptest! {
        #[test]
        fn matches_sorting_oracle_and_is_monotone(
            raw in prop::collection::vec(prop::collection::vec(-3i32..4, 3), 2..9),
            raw_t in prop::collection::vec(prop::collection::vec(-3i32..4, 3), 9),
        ) {
            let n = raw.len();
            let f = |v: &Vec<i32>| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
            let imgs: Vec<Vec<f64>> = raw.iter().map(f).collect();
            let texts: Vec<Vec<f64>> = raw_t[..n].iter().map(f).collect();
            let mut prev = 0.0;
            for k in 1..=n {
                let r = recall_at_k(&imgs, &texts, k).unwrap();
                prop_assert_eq!(r, oracle(&imgs, &texts, k));
                prop_assert!(r >= prev);
                prev = r;
            }
            prop_assert_eq!(prev, 1.0);
        }
    }
}
