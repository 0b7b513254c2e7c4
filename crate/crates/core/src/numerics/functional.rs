//! Value-level (non-recorded) counterparts of the graph operations.

use super::{NumericsError, Tensor, LOG_CLAMP, NORM_FLOOR};

/// Row-stochastic check tolerance used by the probability helpers.
pub const SIMPLEX_TOL: f64 = 1e-6;

pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for i in 0..t.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

pub fn l2_normalize_rows(t: &Tensor) -> Result<Tensor, NumericsError> {
    let mut out = t.clone();
    for i in 0..t.rows() {
        let row = out.row_mut(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n <= NORM_FLOOR {
            return Err(NumericsError::ZeroNorm { row: i });
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

fn check_simplex(probs: &Tensor) -> Result<(), NumericsError> {
    for (i, row) in probs.iter_rows().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|&p| p < 0.0) {
            return Err(NumericsError::NotAProbability { row: i, sum: s });
        }
    }
    Ok(())
}

/// Nonnegative entropy `-Σ_k p_k ln p_k` of every row.
pub fn entropy(probs: &Tensor) -> Result<Vec<f64>, NumericsError> {
    check_simplex(probs)?;
    Ok(probs.iter_rows().map(row_entropy).collect())
}

pub(crate) fn row_entropy(row: &[f64]) -> f64 {
    -row.iter().map(|&p| p * p.max(LOG_CLAMP).ln()).sum::<f64>()
}

/// Mean cross-entropy `-(1/B) Σ_i Σ_k y_ik ln p_ik` against one-hot targets.
pub fn cross_entropy(probs: &Tensor, targets: &Tensor) -> Result<f64, NumericsError> {
    if probs.shape() != targets.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "cross_entropy",
            lhs: probs.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    check_simplex(probs)?;
    let mut total = 0.0;
    for (i, (p, y)) in probs.iter_rows().zip(targets.iter_rows()).enumerate() {
        let ones = y.iter().filter(|&&v| v == 1.0).count();
        let zeros = y.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != y.len() {
            return Err(NumericsError::NotOneHot { row: i });
        }
        total -= p
            .iter()
            .zip(y)
            .map(|(&p, &y)| y * p.max(LOG_CLAMP).ln())
            .sum::<f64>();
    }
    Ok(total / probs.rows() as f64)
}

/// One-hot `B × K` matrix from class labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.row_mut(i)[l] = 1.0;
    }
    t
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= NORM_FLOOR || nb <= NORM_FLOOR {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax_rows(&Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn entropy_examples() {
        let uniform = Tensor::matrix(1, 4, vec![0.25; 4]).unwrap();
        assert!((entropy(&uniform).unwrap()[0] - 4f64.ln()).abs() < 1e-12);
        let onehot = Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(entropy(&onehot).unwrap()[0], 0.0);
        let p = Tensor::matrix(1, 2, vec![0.9, 0.1]).unwrap();
        assert!((entropy(&p).unwrap()[0] - 0.3251).abs() < 5e-5);
    }

    #[test]
    fn entropy_rejects_non_simplex() {
        let p = Tensor::matrix(1, 2, vec![0.9, 0.3]).unwrap();
        assert!(entropy(&p).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let y0 = one_hot(&[0], 2);
        let y1 = one_hot(&[1], 2);
        let certain = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(cross_entropy(&certain, &y0).unwrap() <= 1e-11);
        let half = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        assert!((cross_entropy(&half, &y1).unwrap() - 2f64.ln()).abs() < 1e-12);
        let p = Tensor::matrix(1, 2, vec![0.8, 0.2]).unwrap();
        assert!((cross_entropy(&p, &y1).unwrap() - 1.6094).abs() < 5e-5);
    }

    #[test]
    fn cross_entropy_rejects_soft_labels() {
        let p = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let y = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            cross_entropy(&p, &y),
            Err(NumericsError::NotOneHot { row: 0 })
        ));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 0.2, 0.3, 0.1, 0.1, 0.3]), 2);
    }
}
