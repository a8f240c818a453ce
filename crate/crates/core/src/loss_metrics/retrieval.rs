//! Top-K retrieval accuracy over cosine similarity of image embeddings.

use crate::error::{Error, Result};

/// Scene identity and frame position of one item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ItemId {
    pub scene: u32,
    pub frame: u32,
}

/// Which other items count as correct matches for a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positives {
    /// Any other item from the same scene.
    SameGroup,
    /// Items from the same scene at most `window` frames away.
    Adjacent { window: u32 },
}

impl Positives {
    fn matches(self, q: ItemId, c: ItemId) -> bool {
        match self {
            Positives::SameGroup => q.scene == c.scene,
            Positives::Adjacent { window } => q.scene == c.scene && q.frame.abs_diff(c.frame) <= window,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalReport {
    pub accuracy: f64,
    pub queries: usize,
    /// Queries dropped for lacking any positive.
    pub skipped: usize,
}

fn normalized(v: &[f32]) -> Vec<f64> {
    let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|&x| x as f64 / n).collect()
}

/// Fraction of queries whose `k` most similar other items include a positive.
/// Ties in similarity are broken by lower index.
pub fn retrieval_topk(embeddings: &[Vec<f32>], ids: &[ItemId], k: usize, positives: Positives) -> Result<RetrievalReport> {
    if embeddings.len() != ids.len() {
        return Err(Error::Shape(format!("{} embeddings for {} ids", embeddings.len(), ids.len())));
    }
    if embeddings.len() < 2 || k == 0 {
        return Err(Error::InvalidInput("retrieval needs at least two items and k >= 1".into()));
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::Shape("embeddings differ in length".into()));
    }
    let z: Vec<Vec<f64>> = embeddings.iter().map(|e| normalized(e)).collect();
    let (mut hits, mut queries, mut skipped) = (0usize, 0usize, 0usize);
    for q in 0..z.len() {
        let others: Vec<usize> = (0..z.len()).filter(|&c| c != q).collect();
        if !others.iter().any(|&c| positives.matches(ids[q], ids[c])) {
            skipped += 1;
            continue;
        }
        let mut scored: Vec<(f64, usize)> = others
            .iter()
            .map(|&c| (z[q].iter().zip(&z[c]).map(|(a, b)| a * b).sum(), c))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        queries += 1;
        if scored.iter().take(k).any(|&(_, c)| positives.matches(ids[q], ids[c])) {
            hits += 1;
        }
    }
    if queries == 0 {
        return Err(Error::Undefined("no query has a positive".into()));
    }
    Ok(RetrievalReport {
        accuracy: hits as f64 / queries as f64,
        queries,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(scene: u32, frame: u32) -> ItemId {
        ItemId { scene, frame }
    }

    #[test]
    fn duplicates_retrieve_perfectly() {
        let e = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let ids = [id(0, 0), id(0, 1), id(1, 0), id(1, 1)];
        assert_eq!(retrieval_topk(&e, &ids, 1, Positives::SameGroup).unwrap().accuracy, 1.0);
    }

    #[test]
    fn mismatched_one_hots_score_zero() {
        let e = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]];
        let e = vec![e[0].clone(), e[1].clone(), e[0].clone(), e[1].clone()];
        let ids = [id(0, 0), id(1, 0), id(1, 1), id(0, 1)];
        assert_eq!(retrieval_topk(&e, &ids, 1, Positives::SameGroup).unwrap().accuracy, 0.0);
    }

    #[test]
    fn hand_set_cosines_match_exhaustive_ranking() {
        let e = vec![vec![1.0, 0.0], vec![0.8, 0.6], vec![0.0, 1.0]];
        let ids = [id(0, 0), id(1, 0), id(0, 1)];
        // cos(0,1)=0.8, cos(0,2)=0, cos(1,2)=0.6; item 1 has no positive
        let r1 = retrieval_topk(&e, &ids, 1, Positives::SameGroup).unwrap();
        assert_eq!((r1.queries, r1.skipped), (2, 1));
        assert_eq!(r1.accuracy, 0.0);
        assert_eq!(retrieval_topk(&e, &ids, 2, Positives::SameGroup).unwrap().accuracy, 1.0);
    }

    #[test]
    fn adjacency_window_restricts_positives() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.1]];
        let ids = [id(0, 0), id(0, 1), id(0, 5)];
        let same = retrieval_topk(&e, &ids, 1, Positives::SameGroup).unwrap();
        assert_eq!(same.accuracy, 1.0);
        let adj = retrieval_topk(&e, &ids, 1, Positives::Adjacent { window: 1 }).unwrap();
        assert_eq!((adj.queries, adj.skipped), (2, 1));
        assert_eq!(adj.accuracy, 0.0);
    }
}
