use crate::error::{Error, Result};
use crate::numerics::mat::{dot, norm, Mat};

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = v.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

/// Attention weights and output of `softmax(q·kᵀ / sqrt(d)) · v`.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub weights: Mat,
    pub output: Mat,
}

pub fn attention_with_weights(q: &Mat, k: &Mat, v: &Mat) -> Result<AttentionOutput> {
    if q.cols() != k.cols() {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("query width {} vs key width {}", q.cols(), k.cols()),
        ));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("{} keys vs {} values", k.rows(), v.rows()),
        ));
    }
    let mut scores = q.matmul_nt(k)?;
    scores.scale(1.0 / (q.cols() as f64).sqrt());
    let weights = softmax_rows(&scores);
    let output = weights.matmul(v)?;
    Ok(AttentionOutput { weights, output })
}

pub fn scaled_dot_attention(q: &Mat, k: &Mat, v: &Mat) -> Result<Mat> {
    attention_with_weights(q, k, v).map(|a| a.output)
}

/// Gradients of attention w.r.t. its three inputs.
pub struct AttentionGrads {
    pub dq: Mat,
    pub dk: Mat,
    pub dv: Mat,
}

/// Backward pass of [`scaled_dot_attention`] given the forward weights.
pub fn attention_backward(q: &Mat, k: &Mat, v: &Mat, weights: &Mat, d_out: &Mat) -> Result<AttentionGrads> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let d_weights = d_out.matmul_nt(v)?;
    let dv = weights.matmul_tn(d_out)?;
    let mut d_scores = softmax_rows_backward(weights, &d_weights);
    d_scores.scale(scale);
    let dq = d_scores.matmul(k)?;
    let dk = d_scores.matmul_tn(q)?;
    Ok(AttentionGrads { dq, dk, dv })
}

/// Jacobian-vector product of row softmax: `a ⊙ (da − rowsum(da ⊙ a))`.
pub fn softmax_rows_backward(a: &Mat, da: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let ar = a.row(i);
        let dr = da.row(i);
        let inner = dot(ar, dr);
        for (o, (&p, &g)) in out.row_mut(i).iter_mut().zip(ar.iter().zip(dr)) {
            *o = p * (g - inner);
        }
    }
    out
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Index {
            index: label,
            len: logits.len(),
        });
    }
    Ok((log_sum_exp(logits) - logits[label]).max(0.0))
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_sim", format!("{} vs {}", u.len(), v.len())));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Gradient of `cosine_sim(u, v)` with respect to `v`.
pub fn cosine_sim_grad_v(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    let c = dot(u, v) / (nu * nv);
    Ok(u
        .iter()
        .zip(v)
        .map(|(&a, &b)| a / (nu * nv) - c * b / (nv * nv))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{RngStream, StreamKey};
    use proptest::prelude::*;

    fn rng(tag: &'static str) -> RngStream {
        RngStream::new(11, StreamKey::new(tag, 0, 0, 0))
    }

    #[test]
    fn softmax_uniform_and_shifted() {
        let m = Mat::from_rows(&[&[0.0, 0.0, 0.0], &[1000.0, 1000.0, f64::MIN / 2.0]]).unwrap();
        let s = softmax_rows(&m);
        for &p in s.row(0) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = softmax_rows(&Mat::from_rows(&[&[1000.0, 1000.0]]).unwrap());
        assert_eq!(big.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let s = softmax(&[1.0, 2.0, 3.0]);
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let direct = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        for (a, b) in s.iter().zip(direct) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let s = softmax(&row);
            let total: f64 = s.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(s.iter().all(|&p| p >= 0.0));
            let shifted: Vec<f64> = row.iter().map(|x| x + shift).collect();
            let t = softmax(&shifted);
            for (a, b) in s.iter().zip(&t) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn attention_output_is_convex_combination(seed in 0u64..1000) {
            let mut r = RngStream::new(seed, StreamKey::new("convex", 0, 0, 0));
            let q = Mat::from_fn(3, 4, |_, _| 3.0 * r.normal());
            let k = Mat::from_fn(6, 4, |_, _| 3.0 * r.normal());
            let v = Mat::from_fn(6, 5, |_, _| r.normal());
            let out = scaled_dot_attention(&q, &k, &v).unwrap();
            for j in 0..v.cols() {
                let lo = (0..v.rows()).map(|i| v.get(i, j)).fold(f64::INFINITY, f64::min);
                let hi = (0..v.rows()).map(|i| v.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
                for i in 0..out.rows() {
                    prop_assert!(out.get(i, j) >= lo - 1e-12 && out.get(i, j) <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_single_key_returns_value() {
        let q = Mat::from_rows(&[&[3.0, -1.0], &[0.2, 9.0]]).unwrap();
        let k = Mat::from_rows(&[&[1.0, 1.0]]).unwrap();
        let v = Mat::from_rows(&[&[4.0, 5.0, 6.0]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for i in 0..2 {
            assert_eq!(out.row(i), v.row(0));
        }
    }

    #[test]
    fn attention_orthogonal_query_equal_values() {
        let q = Mat::from_rows(&[&[1.0, 0.0]]).unwrap();
        let k = Mat::from_rows(&[&[0.0, 1.0], &[0.0, -2.0]]).unwrap();
        let v = Mat::from_rows(&[&[7.0, -3.0], &[7.0, -3.0]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!((out.get(0, 0) - 7.0).abs() < 1e-15);
        assert!((out.get(0, 1) + 3.0).abs() < 1e-15);
    }

    #[test]
    fn attention_matches_loop_reference() {
        let mut r = rng("attn-loop");
        let q = Mat::from_fn(3, 4, |_, _| r.normal());
        let k = Mat::from_fn(5, 4, |_, _| r.normal());
        let v = Mat::from_fn(5, 4, |_, _| r.normal());
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        let d = 4.0f64;
        for i in 0..3 {
            let mut scores = [0.0; 5];
            for (j, s) in scores.iter_mut().enumerate() {
                for c in 0..4 {
                    *s += q.get(i, c) * k.get(j, c);
                }
                *s /= d.sqrt();
            }
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for c in 0..4 {
                let mut acc = 0.0;
                for j in 0..5 {
                    acc += scores[j].exp() / z * v.get(j, c);
                }
                assert!((acc - out.get(i, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_shape_errors() {
        let q = Mat::zeros(2, 3);
        let k = Mat::zeros(2, 4);
        let v = Mat::zeros(2, 4);
        assert!(scaled_dot_attention(&q, &k, &v).is_err());
        let k = Mat::zeros(2, 3);
        let v = Mat::zeros(3, 4);
        assert!(scaled_dot_attention(&q, &k, &v).is_err());
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let mut r = rng("attn-bwd");
        let q = Mat::from_fn(2, 3, |_, _| r.normal());
        let k = Mat::from_fn(4, 3, |_, _| r.normal());
        let v = Mat::from_fn(4, 2, |_, _| r.normal());
        let w = Mat::from_fn(2, 2, |_, _| r.normal());
        // scalar objective: sum(out ⊙ w)
        let objective = |q: &Mat, k: &Mat, v: &Mat| -> f64 {
            let o = scaled_dot_attention(q, k, v).unwrap();
            o.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let fw = attention_with_weights(&q, &k, &v).unwrap();
        let g = attention_backward(&q, &k, &v, &fw.weights, &w).unwrap();
        let h = 1e-5;
        let check = |m: &Mat, grad: &Mat, which: usize| {
            for idx in 0..m.len() {
                let mut plus = m.clone();
                let mut minus = m.clone();
                plus.data_mut()[idx] += h;
                minus.data_mut()[idx] -= h;
                let (fp, fm) = match which {
                    0 => (objective(&plus, &k, &v), objective(&minus, &k, &v)),
                    1 => (objective(&q, &plus, &v), objective(&q, &minus, &v)),
                    _ => (objective(&q, &k, &plus), objective(&q, &k, &minus)),
                };
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - grad.data()[idx]).abs() < 1e-8, "input {which} idx {idx}");
            }
        };
        check(&q, &g.dq, 0);
        check(&k, &g.dk, 1);
        check(&v, &g.dv, 2);
    }

    #[test]
    fn cross_entropy_cases() {
        assert!((cross_entropy(&[0.0, 0.0], 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[30.0, -30.0], 0).unwrap() <= 1e-9);
        assert!(matches!(cross_entropy(&[0.0], 1), Err(Error::Index { .. })));
        let mut r = rng("ce");
        for _ in 0..20 {
            let logits: Vec<f64> = (0..6).map(|_| 4.0 * r.normal()).collect();
            let label = r.index(6);
            let z: f64 = logits.iter().map(|x| x.exp()).sum();
            let oracle = z.ln() - logits[label];
            assert!((cross_entropy(&logits, label).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_cases() {
        let u = [0.3, -2.0, 5.0];
        assert!((cosine_sim(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn cosine_grad_matches_finite_differences() {
        let u = [0.4, -1.2, 2.0];
        let v = [1.5, 0.3, -0.7];
        let g = cosine_sim_grad_v(&u, &v).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut p = v;
            let mut m = v;
            p[i] += h;
            m[i] -= h;
            let fd = (cosine_sim(&u, &p).unwrap() - cosine_sim(&u, &m).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }
}
