//! Slice-level numeric helpers shared by the tape and by inference code.

use crate::error::{Error, Result};

/// Norms below this are treated as zero vectors.
pub const DEGENERATE_NORM: f64 = 1e-12;

const GELU_K0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K1: f64 = 0.044_715;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `a·b / (‖a‖‖b‖)`, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("cosine_sim", &[a.len()], &[b.len()]));
    }
    let (na, nb) = (norm(a), norm(b));
    let n = na.min(nb);
    if n < DEGENERATE_NORM {
        return Err(Error::Degenerate {
            context: "cosine_sim".into(),
            norm: n,
        });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn normalized(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n < DEGENERATE_NORM {
        return Err(Error::Degenerate {
            context: "normalize".into(),
            norm: n,
        });
    }
    Ok(a.iter().map(|v| v / n).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K0 * (x + GELU_K1 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K0 * (x + GELU_K1 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K0 * (1.0 + 3.0 * GELU_K1 * x * x)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// `log softmax(row)[i]` without forming the softmax.
pub fn log_softmax_at(row: &[f64], i: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[i] - lse
}

/// Flat source indices that cut a `[D×H×W]` volume into non-overlapping
/// `patch` blocks. Tokens are ordered depth-major, then height, then width;
/// each token lists its voxels in the same order. Returns
/// `(index, tokens, patch_volume)`.
pub fn patch_index_3d(dims: [usize; 3], patch: [usize; 3]) -> Result<(Vec<usize>, usize, usize)> {
    const AXES: [&str; 3] = ["depth", "height", "width"];
    for a in 0..3 {
        if patch[a] == 0 || dims[a] % patch[a] != 0 {
            return Err(Error::Config(format!(
                "{} extent {} is not divisible by patch size {}",
                AXES[a], dims[a], patch[a]
            )));
        }
    }
    let [d, h, w] = dims;
    let [pd, ph, pw] = patch;
    let (nd, nh, nw) = (d / pd, h / ph, w / pw);
    let tokens = nd * nh * nw;
    let pvol = pd * ph * pw;
    let mut index = Vec::with_capacity(tokens * pvol);
    for bz in 0..nd {
        for by in 0..nh {
            for bx in 0..nw {
                for z in 0..pd {
                    for y in 0..ph {
                        for x in 0..pw {
                            let (zz, yy, xx) = (bz * pd + z, by * ph + y, bx * pw + x);
                            index.push((zz * h + yy) * w + xx);
                        }
                    }
                }
            }
        }
    }
    Ok((index, tokens, pvol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_closed_forms() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 1.0], &[-1.0, -1.0]).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_degenerate_and_mismatch() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Degenerate { .. })
        ));
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn sigmoid_and_softmax() {
        assert_eq!(sigmoid(0.0), 0.5);
        let mut r = [0.0, 0.0, 0.0];
        softmax_in_place(&mut r);
        for v in r {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut big = [1000.0, 1000.0];
        softmax_in_place(&mut big);
        assert_eq!(big, [0.5, 0.5]);
    }

    #[test]
    fn patch_index_counts_and_errors() {
        let (idx, tokens, pvol) = patch_index_3d([8, 32, 32], [2, 8, 8]).unwrap();
        assert_eq!(tokens, 64);
        assert_eq!(pvol, 128);
        assert_eq!(idx.len(), 8 * 32 * 32);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), idx.len());
        let err = patch_index_3d([8, 30, 32], [2, 8, 8]).unwrap_err();
        assert!(err.to_string().contains("height"));
    }
}
