//! Layers composed from tape ops: linear maps, two-layer MLPs and the
//! pre-norm transformer block.

use super::array::Array;
use super::real::Real;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// `x * w + b` for `x: n x din`, `w: din x dout`, `b: dout`.
pub fn linear<T: Real>(t: &mut Tape<T>, x: Var, w: Var, b: Var) -> Var {
    let y = t.matmul(x, w);
    t.add_row(y, b)
}

/// Weights of a two-layer GELU perceptron.
#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn mlp<T: Real>(t: &mut Tape<T>, x: Var, p: &MlpVars) -> Var {
    let h = linear(t, x, p.w1, p.b1);
    let h = t.gelu(h);
    linear(t, h, p.w2, p.b2)
}

/// Weights of one pre-norm transformer block.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub mlp: MlpVars,
}

fn check_square<T: Real>(t: &Tape<T>, v: Var, d: usize, what: &str) -> Result<()> {
    if t.value(v).shape() != [d, d] {
        return Err(Error::Shape(format!(
            "{what}: expected [{d}, {d}], got {:?}",
            t.value(v).shape()
        )));
    }
    Ok(())
}

fn check_vec<T: Real>(t: &Tape<T>, v: Var, d: usize, what: &str) -> Result<()> {
    if t.value(v).len() != d {
        return Err(Error::Shape(format!(
            "{what}: expected length {d}, got {:?}",
            t.value(v).shape()
        )));
    }
    Ok(())
}

/// Multi-head self-attention and MLP, each behind a layer norm and a
/// residual connection.
pub fn attention_block<T: Real>(t: &mut Tape<T>, x: Var, p: &BlockVars, heads: usize) -> Result<Var> {
    let d = t.value(x).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
    }
    for (v, name) in [(p.wq, "wq"), (p.wk, "wk"), (p.wv, "wv"), (p.wo, "wo")] {
        check_square(t, v, d, name)?;
    }
    for (v, name) in [
        (p.bq, "bq"),
        (p.bk, "bk"),
        (p.bv, "bv"),
        (p.bo, "bo"),
        (p.ln1_g, "ln1_g"),
        (p.ln1_b, "ln1_b"),
        (p.ln2_g, "ln2_g"),
        (p.ln2_b, "ln2_b"),
        (p.mlp.b2, "mlp.b2"),
    ] {
        check_vec(t, v, d, name)?;
    }
    if t.value(p.mlp.w1).rows() != d || t.value(p.mlp.w2).cols() != d {
        return Err(Error::Shape("mlp weights do not match the token width".into()));
    }

    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let eps = T::lit(LN_EPS);

    let h = t.layer_norm(x, p.ln1_g, p.ln1_b, eps);
    let q = linear(t, h, p.wq, p.bq);
    let k = linear(t, h, p.wk, p.bk);
    let v = linear(t, h, p.wv, p.bv);
    let mut ctx = Vec::with_capacity(heads);
    for hd in 0..heads {
        let (lo, hi) = (hd * dh, (hd + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (t.slice_cols(q, lo, hi), t.slice_cols(k, lo, hi), t.slice_cols(v, lo, hi))
        };
        let s = t.matmul_t(qh, false, kh, true);
        let s = t.scale(s, scale);
        let a = t.softmax_rows(s);
        ctx.push(t.matmul(a, vh));
    }
    let ctx = if heads == 1 { ctx[0] } else { t.concat_cols(&ctx) };
    let attn = linear(t, ctx, p.wo, p.bo);
    let x = t.add(x, attn);

    let h = t.layer_norm(x, p.ln2_g, p.ln2_b, eps);
    let m = mlp(t, h, &p.mlp);
    Ok(t.add(x, m))
}

/// Plain-value weights of one block, used to build [`BlockVars`] on a tape.
#[derive(Debug, Clone)]
pub struct BlockWeights<T> {
    pub ln1_g: Array<T>,
    pub ln1_b: Array<T>,
    pub wq: Array<T>,
    pub bq: Array<T>,
    pub wk: Array<T>,
    pub bk: Array<T>,
    pub wv: Array<T>,
    pub bv: Array<T>,
    pub wo: Array<T>,
    pub bo: Array<T>,
    pub ln2_g: Array<T>,
    pub ln2_b: Array<T>,
    pub w1: Array<T>,
    pub b1: Array<T>,
    pub w2: Array<T>,
    pub b2: Array<T>,
}

impl<T: Real> BlockWeights<T> {
    /// All projections zero, unit layer-norm gains.
    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            ln1_g: Array::full(&[d], T::one()),
            ln1_b: Array::zeros(&[d]),
            wq: Array::zeros(&[d, d]),
            bq: Array::zeros(&[d]),
            wk: Array::zeros(&[d, d]),
            bk: Array::zeros(&[d]),
            wv: Array::zeros(&[d, d]),
            bv: Array::zeros(&[d]),
            wo: Array::zeros(&[d, d]),
            bo: Array::zeros(&[d]),
            ln2_g: Array::full(&[d], T::one()),
            ln2_b: Array::zeros(&[d]),
            w1: Array::zeros(&[d, hidden]),
            b1: Array::zeros(&[hidden]),
            w2: Array::zeros(&[hidden, d]),
            b2: Array::zeros(&[d]),
        }
    }

    pub fn random(d: usize, hidden: usize, std: f64, rng: &mut super::rng::Rng) -> Self {
        let mut w = Self::zeros(d, hidden);
        for a in [&mut w.wq, &mut w.wk, &mut w.wv, &mut w.wo, &mut w.w1, &mut w.w2] {
            for v in a.data_mut() {
                *v = T::lit(rng.truncated_normal(std));
            }
        }
        for a in [&mut w.bq, &mut w.bk, &mut w.bv, &mut w.bo, &mut w.b1, &mut w.b2, &mut w.ln1_b, &mut w.ln2_b] {
            for v in a.data_mut() {
                *v = T::lit(rng.truncated_normal(std));
            }
        }
        w
    }

    pub fn bind(&self, t: &mut Tape<T>, trainable: bool) -> BlockVars {
        let mut put = |a: &Array<T>| if trainable { t.leaf(a.clone()) } else { t.constant(a.clone()) };
        BlockVars {
            ln1_g: put(&self.ln1_g),
            ln1_b: put(&self.ln1_b),
            wq: put(&self.wq),
            bq: put(&self.bq),
            wk: put(&self.wk),
            bk: put(&self.bk),
            wv: put(&self.wv),
            bv: put(&self.bv),
            wo: put(&self.wo),
            bo: put(&self.bo),
            ln2_g: put(&self.ln2_g),
            ln2_b: put(&self.ln2_b),
            mlp: MlpVars {
                w1: put(&self.w1),
                b1: put(&self.b1),
                w2: put(&self.w2),
                b2: put(&self.b2),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::gradcheck::grad_check;
    use crate::ndcore::rng::Rng;

    fn random(shape: &[usize], rng: &mut Rng) -> Array<f64> {
        let n = shape.iter().product();
        Array::from_vec(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    // Scalar-loop reference: no tape, no GEMM, no shared helpers.
    fn naive_block(x: &Array<f64>, w: &BlockWeights<f64>, heads: usize) -> Vec<f64> {
        let (n, d) = (x.rows(), x.cols());
        let hid = w.b1.len();
        let xs = x.data();
        let norm = |row: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            (0..d).map(|j| (row[j] - mean) / (var + LN_EPS).sqrt() * g[j] + b[j]).collect()
        };
        let lin = |v: &[f64], m: &Array<f64>, b: &[f64], dout: usize| -> Vec<f64> {
            (0..dout)
                .map(|o| b[o] + (0..v.len()).map(|i| v[i] * m.data()[i * dout + o]).sum::<f64>())
                .collect()
        };
        let h: Vec<Vec<f64>> = (0..n).map(|i| norm(&xs[i * d..(i + 1) * d], w.ln1_g.data(), w.ln1_b.data())).collect();
        let q: Vec<Vec<f64>> = h.iter().map(|r| lin(r, &w.wq, w.bq.data(), d)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|r| lin(r, &w.wk, w.bk.data(), d)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| lin(r, &w.wv, w.bv.data(), d)).collect();
        let dh = d / heads;
        let mut ctx = vec![vec![0.0; d]; n];
        for hd in 0..heads {
            for i in 0..n {
                let mut s: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|c| q[i][hd * dh + c] * k[j][hd * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                for e in s.iter_mut() {
                    *e = (*e - mx).exp() / z;
                }
                for c in 0..dh {
                    ctx[i][hd * dh + c] = (0..n).map(|j| s[j] * v[j][hd * dh + c]).sum();
                }
            }
        }
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let a = lin(&ctx[i], &w.wo, w.bo.data(), d);
            let x1: Vec<f64> = (0..d).map(|j| xs[i * d + j] + a[j]).collect();
            let h2 = norm(&x1, w.ln2_g.data(), w.ln2_b.data());
            let m1: Vec<f64> = lin(&h2, &w.w1, w.b1.data(), hid)
                .into_iter()
                .map(|z| 0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z.powi(3))).tanh()))
                .collect();
            let m2 = lin(&m1, &w.w2, w.b2.data(), d);
            out.extend((0..d).map(|j| x1[j] + m2[j]));
        }
        out
    }

    #[test]
    fn zero_weights_are_identity() {
        let mut rng = Rng::new(1);
        let x = random(&[5, 8], &mut rng);
        let w = BlockWeights::<f64>::zeros(8, 32);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let p = w.bind(&mut t, false);
        let y = attention_block(&mut t, xv, &p, 2).unwrap();
        assert_eq!(t.value(y), &x);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = Rng::new(2);
        let x = random(&[1, 4], &mut rng);
        let mut w = BlockWeights::<f64>::random(4, 8, 0.5, &mut rng);
        // isolate the attention path
        w.w2 = Array::zeros(&[8, 4]);
        w.b2 = Array::zeros(&[4]);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let p = w.bind(&mut t, false);
        let y = attention_block(&mut t, xv, &p, 1).unwrap();
        // weights [1.0] => context = value row => out = x + (v * wo + bo)
        let (h, _, _) = crate::ndcore::layer_norm(&x, &w.ln1_g, &w.ln1_b, LN_EPS);
        let v = h.matmul(&w.wv).unwrap().zip_map(&w.bv.clone().reshape(&[1, 4]).unwrap(), |a, b| a + b);
        let o = v.matmul(&w.wo).unwrap();
        for j in 0..4 {
            let want = x.data()[j] + o.data()[j] + w.bo.data()[j];
            assert!((t.value(y).data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_oracle() {
        for seed in 0..5 {
            let mut rng = Rng::new(100 + seed);
            let (n, d, heads) = if seed == 0 { (3, 4, 1) } else { (2 + rng.below(4), 8, 1 + rng.below(2) * 3) };
            let heads = if d % heads == 0 { heads } else { 1 };
            let x = random(&[n, d], &mut rng);
            let w = BlockWeights::<f64>::random(d, 2 * d, 0.4, &mut rng);
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let p = w.bind(&mut t, false);
            let y = attention_block(&mut t, xv, &p, heads).unwrap();
            let want = naive_block(&x, &w, heads);
            for (a, b) in t.value(y).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-6, "seed {seed}");
            }
        }
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Array::zeros(&[2, 6]));
        let w = BlockWeights::<f64>::zeros(4, 8);
        let p = w.bind(&mut t, false);
        assert!(matches!(attention_block(&mut t, x, &p, 2), Err(Error::Shape(_))));
        let x4 = t.constant(Array::zeros(&[2, 4]));
        assert!(attention_block(&mut t, x4, &p, 3).is_err());
    }

    #[test]
    fn block_gradients_pass_grad_check() {
        for seed in 0..5 {
            let mut rng = Rng::new(200 + seed);
            let n = 2 + rng.below(3);
            let x = random(&[n, 4], &mut rng);
            let w = BlockWeights::<f64>::random(4, 8, 0.5, &mut rng);
            let probe = random(&[n, 4], &mut rng);
            let f = |t: &mut Tape<f64>, xv: Var| {
                let p = w.bind(t, false);
                let y = attention_block(t, xv, &p, 2).unwrap();
                let m = t.mul_const(y, probe.clone());
                t.sum_all(m)
            };
            let r = grad_check(f, &x, 1e-4, 1e-4).unwrap();
            assert!(r.pass, "{r:?}");
            // weight path: perturb the query projection
            let fq = |t: &mut Tape<f64>, wq: Var| {
                let xv = t.constant(x.clone());
                let mut p = w.bind(t, false);
                p.wq = wq;
                let y = attention_block(t, xv, &p, 2).unwrap();
                let m = t.mul_const(y, probe.clone());
                t.sum_all(m)
            };
            assert!(grad_check(fq, &w.wq, 1e-4, 1e-4).unwrap().pass);
        }
    }

    #[test]
    fn mlp_gradients_pass_grad_check() {
        let mut rng = Rng::new(300);
        for _ in 0..5 {
            let x = random(&[3, 4], &mut rng);
            let w1 = random(&[4, 6], &mut rng);
            let b1 = random(&[6], &mut rng);
            let w2 = random(&[6, 2], &mut rng);
            let b2 = random(&[2], &mut rng);
            let f = |t: &mut Tape<f64>, w1v: Var| {
                let xv = t.constant(x.clone());
                let p = MlpVars {
                    w1: w1v,
                    b1: t.constant(b1.clone()),
                    w2: t.constant(w2.clone()),
                    b2: t.constant(b2.clone()),
                };
                let y = mlp(t, xv, &p);
                let y = t.square(y);
                t.sum_all(y)
            };
            assert!(grad_check(f, &w1, 1e-4, 1e-4).unwrap().pass);
        }
    }
}
