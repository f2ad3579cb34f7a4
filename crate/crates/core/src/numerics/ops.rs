//! Forward kernels shared by the tape and by inference code.

use super::Tensor;
use crate::error::{Error, Result};

/// Logit written at attention positions that may not be attended.
pub const MASKED_LOGIT: f64 = -1e9;
pub const LN_EPS: f64 = 1e-5;

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape { op, detail: format!("{:?} vs {:?}", a.shape(), b.shape()) }
}

fn dims2(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ((m, k), (k2, n)) = match (dims2(a), dims2(b)) {
        (Some(x), Some(y)) if x.1 == y.0 => (x, y),
        _ => return Err(shape_err("matmul", a, b)),
    };
    debug_assert_eq!(k, k2);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = ad[i * k + p];
            if s == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ((m, k), (n, _)) = match (dims2(a), dims2(b)) {
        (Some(x), Some(y)) if x.1 == y.1 => (x, y),
        _ => return Err(shape_err("matmul_nt", a, b)),
    };
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[k,m]ᵀ · b[k,n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ((k, m), (_, n)) = match (dims2(a), dims2(b)) {
        (Some(x), Some(y)) if x.0 == y.0 => (x, y),
        _ => return Err(shape_err("matmul_tn", a, b)),
    };
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let s = ad[p * m + i];
            if s == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Softmax over the last dimension, max-subtracted.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
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
    out
}

/// Layer norm over the last dimension; returns `(out, xhat, inv_std)`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let d = x.cols();
    if gamma.numel() != d || beta.numel() != d {
        return Err(shape_err("layer_norm", x, gamma));
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut out = x.clone();
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let o = out.row_mut(r);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            o[j] = g[j] * h + b[j];
        }
    }
    Ok((out, xhat, inv_std))
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * v * (1.0 + erf(v / std::f64::consts::SQRT_2)))
}

/// d gelu / dx = Φ(x) + x φ(x).
pub fn gelu_grad(v: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(v / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + v * pdf
}

/// Mean token cross-entropy over rows whose target is not `ignore`.
/// Returns `(loss, softmax probabilities, counted rows)`.
pub(crate) fn cross_entropy_parts(logits: &Tensor, targets: &[u32], ignore: u32) -> Result<(f64, Tensor, usize)> {
    let (t, v) = dims2(logits).ok_or_else(|| Error::Shape {
        op: "cross_entropy",
        detail: format!("logits must be 2-D, got {:?}", logits.shape()),
    })?;
    if targets.len() != t {
        return Err(Error::Shape { op: "cross_entropy", detail: format!("{} targets for {t} rows", targets.len()) });
    }
    let probs = softmax_rows(logits);
    let mut total = 0.0;
    let mut count = 0;
    for (r, &tg) in targets.iter().enumerate() {
        if tg == ignore {
            continue;
        }
        if tg as usize >= v {
            return Err(Error::InvalidArgument(format!("target {tg} outside vocabulary of {v}")));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[tg as usize];
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("cross entropy: every position is ignored".into()));
    }
    Ok((total / count as f64, probs, count))
}

pub fn cross_entropy(logits: &Tensor, targets: &[u32], ignore: u32) -> Result<f64> {
    cross_entropy_parts(logits, targets, ignore).map(|(l, _, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Neumaier-compensated sum.
    fn comp_sum(xs: impl Iterator<Item = f64>) -> f64 {
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for x in xs {
            let t = s + x;
            c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
            s = t;
        }
        s + c
    }

    #[test]
    fn matmul_examples() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &x).unwrap(), x);
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
        assert!(matmul(&a, &x.clone().reshape(&[3, 2]).unwrap()).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_t(&mut rng, &[5, 7]);
        let b = rand_t(&mut rng, &[7, 3]);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.data()[i * 7 + k] * b.data()[k * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - s).abs() < 1e-12);
            }
        }
        // transposed variants agree with explicit transposes
        let bt = Tensor::new(vec![3, 7], (0..21).map(|i| b.data()[(i % 7) * 3 + i / 7]).collect()).unwrap();
        assert!(matmul_nt(&a, &bt).unwrap().max_abs_diff(&c) < 1e-12);
        let at = Tensor::new(vec![7, 5], (0..35).map(|i| a.data()[(i % 5) * 7 + i / 5]).collect()).unwrap();
        assert!(matmul_tn(&at, &b).unwrap().max_abs_diff(&c) < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-300 + 1e-15 && s.data()[1] < 1e-300);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&mut rng, &[4, 9]);
        let s = softmax_rows(&x);
        for r in 0..4 {
            let z = comp_sum(x.row(r).iter().map(|v| v.exp()));
            for j in 0..9 {
                assert!((s.row(r)[j] - x.row(r)[j].exp() / z).abs() < 1e-12);
            }
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::full(&[3], 1.5);
        let b = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let (o, _, _) = layer_norm(&Tensor::full(&[1, 3], 4.0), &g, &b, LN_EPS).unwrap();
        assert_eq!(o.data(), b.data());
        let (o, _, _) = layer_norm(
            &Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap(),
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            LN_EPS,
        )
        .unwrap();
        assert!((o.data()[0] - 1.0).abs() < 1e-5 && (o.data()[1] + 1.0).abs() < 1e-5);
    }

    /// Maclaurin series for erf, independent of libm.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..60 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    }

    #[test]
    fn gelu_examples() {
        let z = gelu(&Tensor::scalar(0.0));
        assert_eq!(z.item(), 0.0);
        for &x in &[0.3, 1.0, 2.5, -4.0] {
            // odd part of gelu is x/2: gelu(x) - gelu(-x) = x
            let d = gelu(&Tensor::scalar(x)).item() - gelu(&Tensor::scalar(-x)).item();
            assert!((d - x).abs() < 1e-12);
        }
        let expect = 0.5 * (1.0 + erf_series(1.0 / std::f64::consts::SQRT_2));
        let got = gelu(&Tensor::scalar(1.0)).item();
        assert!((got - expect).abs() < 1e-14);
        assert!((got - 0.8413447).abs() < 1e-7);
    }

    #[test]
    fn cross_entropy_examples() {
        let v = 11;
        let l = cross_entropy(&Tensor::zeros(&[3, v]), &[1, 5, 10], u32::MAX).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
        let mut logits = Tensor::zeros(&[1, 4]);
        logits.data_mut()[2] = 1e4;
        assert!(cross_entropy(&logits, &[2], u32::MAX).unwrap() < 1e-12);
        assert!(cross_entropy(&logits, &[0], 0).is_err());
        assert!(cross_entropy(&logits, &[9], 0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_t(&mut rng, &[6, 8]);
        let targets = [3, 0, 7, 0, 1, 2];
        let got = cross_entropy(&x, &targets, 0).unwrap();
        let mut terms = Vec::new();
        for (r, &t) in targets.iter().enumerate() {
            if t == 0 {
                continue;
            }
            let z = comp_sum(x.row(r).iter().map(|v| v.exp()));
            terms.push(z.ln() - x.row(r)[t as usize]);
        }
        let expect = comp_sum(terms.iter().copied()) / terms.len() as f64;
        assert!((got - expect).abs() < 1e-10);
    }
}
