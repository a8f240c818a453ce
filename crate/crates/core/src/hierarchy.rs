//! Token hierarchy: farthest-point seeding, cosine soft assignment, graph
//! pooling and unpooling, and composition of per-level assignments into
//! pixel-level segmentations.
//!
//! Soft assignments carry gradients. Hard assignments (row argmax) are
//! plain bookkeeping and never enter the tape.

use crate::error::{Error, Result};
use crate::ndcore::{Array, Real, Tape, Var};

/// Epsilon on column mass when averaging pooled tokens.
pub const POOL_EPS: f64 = 1e-6;
/// Norm floor in cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// One-hot rows stored as a label per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    pub labels: Vec<usize>,
    pub n_segments: usize,
}

impl SegmentationMap {
    pub fn new(labels: Vec<usize>, n_segments: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_segments) {
            return Err(Error::InvalidInput(format!("label {bad} out of {n_segments} segments")));
        }
        Ok(Self { labels, n_segments })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            labels: (0..n).collect(),
            n_segments: n,
        }
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn to_dense<T: Real>(&self) -> Array<T> {
        let mut a = Array::zeros(&[self.labels.len(), self.n_segments]);
        for (i, &l) in self.labels.iter().enumerate() {
            a.set2(i, l, T::one());
        }
        a
    }

    /// True when every segment of `self` lies inside one segment of `coarser`.
    pub fn refines(&self, coarser: &SegmentationMap) -> bool {
        if self.rows() != coarser.rows() {
            return false;
        }
        let mut parent = vec![usize::MAX; self.n_segments];
        for (&f, &c) in self.labels.iter().zip(&coarser.labels) {
            if parent[f] == usize::MAX {
                parent[f] = c;
            } else if parent[f] != c {
                return false;
            }
        }
        true
    }
}

/// Row-stochastic `n_fine x n_coarse` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment<T>(Array<T>);

impl<T: Real> SoftAssignment<T> {
    pub fn new(p: Array<T>) -> Result<Self> {
        for r in 0..p.rows() {
            let row = p.row(r);
            if row.iter().any(|&v| v < T::zero() || !v.is_finite()) {
                return Err(Error::InvalidInput(format!("row {r} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().map(|v| v.as_f64()).sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidInput(format!("row {r} sums to {s}")));
            }
        }
        Ok(Self(p))
    }

    pub fn matrix(&self) -> &Array<T> {
        &self.0
    }

    pub fn harden(&self) -> HardAssignment {
        harden(&self.0)
    }
}

/// Row argmax of an assignment matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardAssignment {
    pub targets: Vec<usize>,
    pub n_coarse: usize,
}

impl HardAssignment {
    pub fn to_dense<T: Real>(&self) -> Array<T> {
        SegmentationMap {
            labels: self.targets.clone(),
            n_segments: self.n_coarse,
        }
        .to_dense()
    }
}

/// Row argmax with ties to the lowest column.
pub fn harden<T: Real>(p: &Array<T>) -> HardAssignment {
    HardAssignment {
        targets: (0..p.rows()).map(|r| p.row_argmax(r)).collect(),
        n_coarse: p.cols(),
    }
}

/// Row with the largest L2 norm, lowest index on ties.
pub fn fps_start<T: Real>(z: &Array<T>) -> usize {
    let mut best = (0, T::neg_infinity());
    for r in 0..z.rows() {
        let n = z.row(r).iter().map(|&v| v * v).sum::<T>();
        if n > best.1 {
            best = (r, n);
        }
    }
    best.0
}

/// Greedy max-min selection of `k` rows, starting from `start`.
pub fn farthest_point_sample<T: Real>(z: &Array<T>, k: usize, start: usize) -> Result<Vec<usize>> {
    let n = z.rows();
    if k > n {
        return Err(Error::InvalidInput(format!("cannot sample {k} of {n} points")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if start >= n {
        return Err(Error::InvalidInput(format!("start {start} out of {n} points")));
    }
    let dist2 = |a: usize, b: usize| -> T {
        z.row(a).iter().zip(z.row(b)).map(|(&x, &y)| (x - y) * (x - y)).sum()
    };
    let mut picked = vec![start];
    let mut taken = vec![false; n];
    taken[start] = true;
    let mut nearest: Vec<T> = (0..n).map(|i| dist2(i, start)).collect();
    while picked.len() < k {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if !taken[i] && best.is_none_or(|b| nearest[i] > nearest[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("k <= n leaves a candidate");
        taken[b] = true;
        picked.push(b);
        for i in 0..n {
            nearest[i] = nearest[i].min(dist2(i, b));
        }
    }
    Ok(picked)
}

/// `softmax_rows(cos(z_fine, z_coarse) / tau)`.
pub fn soft_assign<T: Real>(t: &mut Tape<T>, z_fine: Var, z_coarse: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if t.value(z_fine).cols() != t.value(z_coarse).cols() {
        return Err(Error::Shape("fine and coarse token widths differ".into()));
    }
    let f = t.normalize_rows(z_fine, T::lit(COSINE_EPS));
    let c = t.normalize_rows(z_coarse, T::lit(COSINE_EPS));
    let sim = t.matmul_t(f, false, c, true);
    let logits = t.scale(sim, T::lit(1.0 / tau));
    Ok(t.softmax_rows(logits))
}

/// Column-normalized `Pᵀ z_fine`, the weighted mean of fine tokens per
/// coarse slot.
pub fn pooled_mean<T: Real>(t: &mut Tape<T>, z_fine: Var, p: Var) -> Result<Var> {
    let (pv, zv) = (t.value(p), t.value(z_fine));
    if pv.rows() != zv.rows() {
        return Err(Error::Shape(format!(
            "assignment has {} rows for {} fine tokens",
            pv.rows(),
            zv.rows()
        )));
    }
    let num = t.matmul_t(p, true, z_fine, false);
    let mass = t.col_sum(p);
    let den = t.add_scalar(mass, T::lit(POOL_EPS));
    Ok(t.div_col(num, den))
}

/// `z_coarse_init + mlp(pooled_mean(z_fine, p))`.
pub fn pool_tokens<T: Real>(
    t: &mut Tape<T>,
    z_fine: Var,
    z_coarse_init: Var,
    p: Var,
    mlp: impl FnOnce(&mut Tape<T>, Var) -> Var,
) -> Result<Var> {
    if t.value(p).cols() != t.value(z_coarse_init).rows() {
        return Err(Error::Shape("assignment columns differ from coarse token count".into()));
    }
    let mean = pooled_mean(t, z_fine, p)?;
    let m = mlp(t, mean);
    Ok(t.add(z_coarse_init, m))
}

/// Harden `p` and push every row of `s_prev` through it.
pub fn compose_segmentation<T: Real>(s_prev: &SegmentationMap, p: &Array<T>) -> Result<SegmentationMap> {
    if p.rows() != s_prev.n_segments {
        return Err(Error::Shape(format!(
            "assignment has {} rows, segmentation has {} segments",
            p.rows(),
            s_prev.n_segments
        )));
    }
    let hard = harden(p);
    Ok(SegmentationMap {
        labels: s_prev.labels.iter().map(|&l| hard.targets[l]).collect(),
        n_segments: hard.n_coarse,
    })
}

/// Distribute coarse tokens to fine slots: `p · z_coarse`.
pub fn unpool_tokens<T: Real>(t: &mut Tape<T>, z_coarse: Var, p: Var) -> Result<Var> {
    if t.value(p).cols() != t.value(z_coarse).rows() {
        return Err(Error::Shape("assignment columns differ from coarse token count".into()));
    }
    Ok(t.matmul(p, z_coarse))
}

/// `mlp(z_unpooled + z_encoder)`.
pub fn skip_fuse<T: Real>(
    t: &mut Tape<T>,
    z_unpooled: Var,
    z_encoder: Var,
    mlp: impl FnOnce(&mut Tape<T>, Var) -> Var,
) -> Result<Var> {
    if t.value(z_unpooled).shape() != t.value(z_encoder).shape() {
        return Err(Error::Shape(format!(
            "skip shapes {:?} and {:?}",
            t.value(z_unpooled).shape(),
            t.value(z_encoder).shape()
        )));
    }
    let s = t.add(z_unpooled, z_encoder);
    Ok(mlp(t, s))
}

/// Chain product `P_1 ⋯ P_l`; an empty chain is the `n0 x n0` identity.
pub fn compose_soft<T: Real>(t: &mut Tape<T>, chain: &[Var], n0: usize) -> Result<Var> {
    let Some((&first, rest)) = chain.split_first() else {
        return Ok(t.constant(Array::identity(n0)));
    };
    let mut acc = first;
    for &p in rest {
        if t.value(acc).cols() != t.value(p).rows() {
            return Err(Error::Shape("assignment chain does not compose".into()));
        }
        acc = t.matmul(acc, p);
    }
    Ok(acc)
}

/// Per-pixel features `S₀ · P_chain · z_tokens`. `S₀` is one-hot, so it
/// acts as a row gather after the token product.
pub fn project_spatial<T: Real>(t: &mut Tape<T>, s0: &SegmentationMap, p_chain: Var, z_tokens: Var) -> Result<Var> {
    let pv = t.value(p_chain);
    if pv.rows() != s0.n_segments || pv.cols() != t.value(z_tokens).rows() {
        return Err(Error::Shape(format!(
            "chain {:?} against {} base segments and {} tokens",
            pv.shape(),
            s0.n_segments,
            t.value(z_tokens).rows()
        )));
    }
    let per_segment = t.matmul(p_chain, z_tokens);
    Ok(t.gather_rows(per_segment, &s0.labels))
}

/// Level-`l` pixel features when the level's tokens are already expressed
/// per base segment.
pub fn broadcast_segments<T: Real>(t: &mut Tape<T>, s0: &SegmentationMap, z_tokens: Var) -> Result<Var> {
    if t.value(z_tokens).rows() != s0.n_segments {
        return Err(Error::Shape("token count differs from base segment count".into()));
    }
    Ok(t.gather_rows(z_tokens, &s0.labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::{grad_check, Rng};
    use proptest::prelude::*;

    fn arr(rows: &[Vec<f64>]) -> Array<f64> {
        Array::from_rows(rows).unwrap()
    }

    fn value<F: FnOnce(&mut Tape<f64>) -> Var>(f: F) -> Array<f64> {
        let mut t = Tape::new();
        let v = f(&mut t);
        t.value(v).clone()
    }

    /// Exhaustive check of the two-point max-min objective for 1-D data.
    fn best_pair_from(points: &[f64], start: usize) -> usize {
        (0..points.len())
            .filter(|&j| j != start)
            .max_by(|&a, &b| {
                let (da, db) = ((points[a] - points[start]).abs(), (points[b] - points[start]).abs());
                da.partial_cmp(&db).unwrap().then(b.cmp(&a))
            })
            .unwrap()
    }

    #[test]
    fn fps_examples() {
        let z = arr(&[vec![0.0], vec![3.0], vec![10.0]]);
        let picked = farthest_point_sample(&z, 2, 0).unwrap();
        assert_eq!(picked, vec![0, best_pair_from(&[0.0, 3.0, 10.0], 0)]);
        assert_eq!(picked, vec![0, 2]);
        assert_eq!(farthest_point_sample(&z, 3, 0).unwrap(), vec![0, 2, 1]);
        let same = arr(&vec![vec![1.0, 1.0]; 4]);
        assert_eq!(farthest_point_sample(&same, 2, 2).unwrap(), vec![2, 0]);
        assert!(farthest_point_sample(&z, 4, 0).is_err());
        assert_eq!(fps_start(&z), 2);
        assert_eq!(fps_start(&same), 0);
    }

    #[test]
    fn soft_assign_sharpens_to_argmax() {
        let p = value(|t| {
            let f = t.constant(arr(&[vec![1.0, 0.0], vec![0.3, 0.9]]));
            let c = t.constant(arr(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
            soft_assign(t, f, c, 1e-3).unwrap()
        });
        assert!((p.get2(0, 0) - 1.0).abs() < 1e-12 && p.get2(0, 1) < 1e-12);
        assert!(p.get2(1, 1) > 1.0 - 1e-12);
        assert_eq!(harden(&p).targets, vec![0, 1]);
    }

    #[test]
    fn soft_assign_uniform_and_scale_invariant() {
        let p = value(|t| {
            let f = t.constant(arr(&[vec![1.0, 1.0]]));
            let c = t.constant(arr(&[vec![2.0, 2.0], vec![1.0, 1.0], vec![5.0, 5.0]]));
            soft_assign(t, f, c, 1.0).unwrap()
        });
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        let base = arr(&[vec![0.3, -1.0, 2.0], vec![1.0, 0.5, 0.1]]);
        let c = arr(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0]]);
        let a = value(|t| {
            let (f, c) = (t.constant(base.clone()), t.constant(c.clone()));
            soft_assign(t, f, c, 0.5).unwrap()
        });
        let b = value(|t| {
            let (f, c) = (t.constant(base.map(|v| v * 7.5)), t.constant(c.clone()));
            soft_assign(t, f, c, 0.5).unwrap()
        });
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut t = Tape::<f64>::new();
        let f = t.constant(base);
        assert!(soft_assign(&mut t, f, f, 0.0).is_err());
    }

    #[test]
    fn pool_examples() {
        let zero_mlp = |t: &mut Tape<f64>, x: Var| t.scale(x, 0.0);
        let out = value(|t| {
            let f = t.constant(arr(&[vec![2.0], vec![4.0]]));
            let c = t.constant(arr(&[vec![9.0]]));
            let p = t.constant(arr(&[vec![1.0], vec![1.0]]));
            pool_tokens(t, f, c, p, zero_mlp).unwrap()
        });
        assert_eq!(out.data(), &[9.0]);
        let mean = value(|t| {
            let f = t.constant(arr(&[vec![2.0], vec![4.0], vec![100.0]]));
            let p = t.constant(arr(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]));
            pooled_mean(t, f, p).unwrap()
        });
        assert!((mean.get2(0, 0) - 3.0).abs() < 1e-5);
        let constant = value(|t| {
            let f = t.constant(Array::full(&[4, 2], 1.5));
            let p = t.constant(arr(&[vec![0.2, 0.8], vec![0.5, 0.5], vec![0.9, 0.1], vec![0.3, 0.7]]));
            pooled_mean(t, f, p).unwrap()
        });
        assert!(constant.data().iter().all(|&v| (v - 1.5).abs() < 1e-5));
    }

    #[test]
    fn compose_segmentation_examples() {
        let s = SegmentationMap::new(vec![0, 1], 2).unwrap();
        let id = compose_segmentation(&s, &Array::<f64>::identity(2)).unwrap();
        assert_eq!(id, s);
        let col0 = compose_segmentation(&s, &arr(&[vec![0.7, 0.3], vec![0.6, 0.4]])).unwrap();
        assert_eq!(col0.labels, vec![0, 0]);
        let both = compose_segmentation(&s, &arr(&[vec![0.0, 1.0], vec![0.0, 1.0]])).unwrap();
        let dense = s.to_dense::<f64>().matmul(&harden(&arr(&[vec![0.0, 1.0], vec![0.0, 1.0]])).to_dense()).unwrap();
        assert_eq!(both.to_dense::<f64>(), dense);
        assert_eq!(both.labels, vec![1, 1]);
        // exact ties harden to the lowest column
        let tie = compose_segmentation(&s, &arr(&[vec![0.5, 0.5], vec![0.5, 0.5]])).unwrap();
        assert_eq!(tie.labels, vec![0, 0]);
    }

    #[test]
    fn unpool_examples() {
        let one_hot = value(|t| {
            let z = t.constant(arr(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
            let p = t.constant(arr(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]));
            unpool_tokens(t, z, p).unwrap()
        });
        assert_eq!(one_hot.data(), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let uniform = value(|t| {
            let z = t.constant(arr(&[vec![4.0], vec![10.0]]));
            let p = t.constant(Array::full(&[3, 2], 0.5));
            unpool_tokens(t, z, p).unwrap()
        });
        assert_eq!(uniform.data(), &[7.0; 3]);
        let mixed = value(|t| {
            let z = t.constant(arr(&[vec![4.0], vec![8.0]]));
            let p = t.constant(arr(&[vec![0.25, 0.75]]));
            unpool_tokens(t, z, p).unwrap()
        });
        assert_eq!(mixed.data(), &[7.0]);
    }

    #[test]
    fn skip_fuse_examples() {
        let a = arr(&[vec![1.0, -2.0]]);
        let b = arr(&[vec![0.5, 3.0]]);
        let ident = |_: &mut Tape<f64>, x: Var| x;
        let only_a = value(|t| {
            let (x, z) = (t.constant(a.clone()), t.constant(Array::zeros(&[1, 2])));
            skip_fuse(t, x, z, ident).unwrap()
        });
        assert_eq!(only_a, a);
        let sum = value(|t| {
            let (x, z) = (t.constant(a.clone()), t.constant(b.clone()));
            skip_fuse(t, x, z, ident).unwrap()
        });
        assert_eq!(sum.data(), &[1.5, 1.0]);
        let zero = value(|t| {
            let (x, z) = (t.constant(a.clone()), t.constant(b.clone()));
            skip_fuse(t, x, z, |t, v| t.scale(v, 0.0)).unwrap()
        });
        assert_eq!(zero.data(), &[0.0, 0.0]);
        let mut t = Tape::<f64>::new();
        let (x, z) = (t.constant(a), t.constant(Array::zeros(&[2, 2])));
        assert!(skip_fuse(&mut t, x, z, ident).is_err());
    }

    #[test]
    fn compose_soft_examples() {
        let single = arr(&[vec![0.3, 0.7], vec![1.0, 0.0]]);
        assert_eq!(
            value(|t| {
                let p = t.constant(single.clone());
                compose_soft(t, &[p], 2).unwrap()
            }),
            single
        );
        assert_eq!(
            value(|t| {
                let (a, b) = (t.constant(Array::identity(3)), t.constant(Array::identity(3)));
                compose_soft(t, &[a, b], 3).unwrap()
            }),
            Array::identity(3)
        );
        let u = value(|t| {
            let (a, b) = (t.constant(Array::full(&[2, 2], 0.5)), t.constant(Array::full(&[2, 2], 0.5)));
            compose_soft(t, &[a, b], 2).unwrap()
        });
        assert_eq!(u.data(), &[0.5; 4]);
        assert_eq!(value(|t| compose_soft(t, &[], 4).unwrap()), Array::identity(4));
    }

    #[test]
    fn project_spatial_examples() {
        let one = value(|t| {
            let s0 = SegmentationMap::new(vec![0; 5], 1).unwrap();
            let p = t.constant(Array::identity(1));
            let z = t.constant(arr(&[vec![2.0, 3.0]]));
            project_spatial(t, &s0, p, z).unwrap()
        });
        assert_eq!(one.data(), &[2.0, 3.0].repeat(5));
        let hard = value(|t| {
            let s0 = SegmentationMap::new(vec![1, 0, 2], 3).unwrap();
            let p = t.constant(arr(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]));
            let z = t.constant(arr(&[vec![5.0], vec![-1.0]]));
            project_spatial(t, &s0, p, z).unwrap()
        });
        assert_eq!(hard.data(), &[-1.0, 5.0, -1.0]);
        let soft = value(|t| {
            let s0 = SegmentationMap::new(vec![0, 1], 2).unwrap();
            let p = t.constant(Array::full(&[2, 2], 0.5));
            let z = t.constant(arr(&[vec![2.0], vec![6.0]]));
            project_spatial(t, &s0, p, z).unwrap()
        });
        // dense oracle S0 * P * Z
        let s0d = SegmentationMap::new(vec![0, 1], 2).unwrap().to_dense::<f64>();
        let dense = s0d
            .matmul(&Array::full(&[2, 2], 0.5))
            .unwrap()
            .matmul(&arr(&[vec![2.0], vec![6.0]]))
            .unwrap();
        assert_eq!(soft, dense);
        assert_eq!(soft.data(), &[4.0, 4.0]);
    }

    #[test]
    fn unpool_inverts_one_to_one_pooling() {
        let z = arr(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![4.0, 4.0]]);
        let back = value(|t| {
            let zf = t.constant(z.clone());
            let p = t.constant(arr(&[vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]));
            let pooled = pooled_mean(t, zf, p).unwrap();
            unpool_tokens(t, pooled, p).unwrap()
        });
        for (a, b) in back.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    fn random(shape: &[usize], rng: &mut Rng) -> Array<f64> {
        let n = shape.iter().product();
        Array::from_vec(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
        let mut rng = Rng::new(seed);
        let w = random(t.value(y).shape(), &mut rng);
        let y = t.mul_const(y, w);
        t.sum_all(y)
    }

    #[test]
    fn gradients_through_every_op() {
        let mut rng = Rng::new(5);
        let fine = random(&[6, 4], &mut rng);
        let coarse = random(&[3, 4], &mut rng);
        let w = random(&[4, 4], &mut rng);
        let f_fine = |t: &mut Tape<f64>, zf: Var| {
            let c = t.constant(coarse.clone());
            let p = soft_assign(t, zf, c, 0.7).unwrap();
            let wv = t.constant(w.clone());
            let pooled = pool_tokens(t, zf, c, p, |t, x| {
                let h = t.matmul(x, wv);
                t.gelu(h)
            })
            .unwrap();
            let up = unpool_tokens(t, pooled, p).unwrap();
            let fused = skip_fuse(t, up, zf, |t, x| t.matmul(x, wv)).unwrap();
            weighted_sum(t, fused, 1)
        };
        assert!(grad_check(f_fine, &fine, 1e-5, 1e-5).unwrap().pass);
        let f_coarse = |t: &mut Tape<f64>, c: Var| {
            let zf = t.constant(fine.clone());
            let p = soft_assign(t, zf, c, 0.7).unwrap();
            let pooled = pool_tokens(t, zf, c, p, |t, x| t.gelu(x)).unwrap();
            let s0 = SegmentationMap::new(vec![0, 5, 5, 2, 1, 3, 4, 0], 6).unwrap();
            let p2 = soft_assign(t, pooled, c, 1.0).unwrap();
            let chain = compose_soft(t, &[p, p2], 6).unwrap();
            let img = project_spatial(t, &s0, chain, pooled).unwrap();
            weighted_sum(t, img, 2)
        };
        assert!(grad_check(f_coarse, &coarse, 1e-5, 1e-5).unwrap().pass);
    }

    proptest! {
        #[test]
        fn nested_partitions_and_stochastic_chains(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let sizes = [10usize, 6, 3, 2];
            let s0 = SegmentationMap::new((0..25).map(|_| rng.below(10)).collect(), 10).unwrap();
            let mut t = Tape::<f64>::new();
            let mut z = t.constant(random(&[10, 5], &mut rng));
            let mut s = s0.clone();
            let mut chain = Vec::new();
            for w in sizes.windows(2) {
                let idx = farthest_point_sample(t.value(z), w[1], fps_start(t.value(z))).unwrap();
                let c = t.gather_rows(z, &idx);
                let p = soft_assign(&mut t, z, c, rng.uniform(0.1, 2.0)).unwrap();
                let next = compose_segmentation(&s, t.value(p)).unwrap();
                prop_assert!(s.refines(&next));
                prop_assert!(next.labels.iter().all(|&l| l < w[1]));
                s = next;
                chain.push(p);
                z = pool_tokens(&mut t, z, c, p, |t, x| t.gelu(x)).unwrap();
            }
            let prod = compose_soft(&mut t, &chain, 10).unwrap();
            let pv = t.value(prod);
            prop_assert!(SoftAssignment::new(pv.clone()).is_ok());
            for r in 0..pv.rows() {
                prop_assert!((pv.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }

        #[test]
        fn positive_scaling_keeps_row_argmax(seed in 0u64..500, k in 0.01f64..100.0) {
            let mut rng = Rng::new(seed);
            let f = random(&[5, 3], &mut rng);
            let c = random(&[3, 3], &mut rng);
            let row = rng.below(5);
            let mut scaled = f.clone();
            scaled.row_mut(row).iter_mut().for_each(|v| *v *= k);
            let run = |zf: &Array<f64>| {
                let mut t = Tape::new();
                let (a, b) = (t.constant(zf.clone()), t.constant(c.clone()));
                let p = soft_assign(&mut t, a, b, 1.0).unwrap();
                harden(t.value(p))
            };
            prop_assert_eq!(run(&f), run(&scaled));
        }
    }
}
