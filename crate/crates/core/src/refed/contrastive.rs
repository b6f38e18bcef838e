//! Supervised contrastive loss over one supervision level.

use crate::error::{Error, Result};
use crate::nn::{gemm, Real};

const NORM_FLOOR: f64 = 1e-12;

/// Loss and gradient with respect to the input embeddings.
#[derive(Debug, Clone)]
pub struct ContrastiveOutput<F> {
    pub loss: F,
    pub grad: Vec<F>,
    /// Anchors with at least one positive.
    pub anchors: usize,
}

/// Supervised contrastive loss of `n` embeddings (rows of `z`, width `dim`)
/// with integer labels.
///
/// For every anchor `i` with positives `P(i)` (other items with the same
/// label) the term is `-(1/|P(i)|) sum_p log softmax_{a != i}(z_i . z_a / tau)[p]`.
/// Anchors without positives are skipped and the result is averaged over
/// the remaining anchors. With `normalize`, rows are L2-normalized first.
pub fn contrastive_loss<F: Real>(
    z: &[F],
    n: usize,
    dim: usize,
    labels: &[usize],
    tau: F,
    normalize: bool,
) -> Result<ContrastiveOutput<F>> {
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "contrastive loss needs at least 2 items, got {n}"
        )));
    }
    if z.len() != n * dim || labels.len() != n {
        return Err(Error::Shape(format!(
            "contrastive batch of {n} x {dim} got {} values and {} labels",
            z.len(),
            labels.len()
        )));
    }
    let floor = F::lit(NORM_FLOOR);
    let mut u = z.to_vec();
    let mut norms = vec![F::one(); n];
    if normalize {
        for (row, norm) in u.chunks_mut(dim).zip(norms.iter_mut()) {
            let s: F = row.iter().map(|&v| v * v).sum();
            *norm = s.sqrt().max(floor);
            row.iter_mut().for_each(|v| *v /= *norm);
        }
    }
    // logits s_ia = u_i . u_a / tau
    let mut sim = vec![F::zero(); n * n];
    gemm(n, dim, n, &u, false, &u, true, F::zero(), &mut sim);
    sim.iter_mut().for_each(|v| *v /= tau);

    let max_label = labels.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max_label + 1];
    for &l in labels {
        counts[l] += 1;
    }
    let anchors = labels.iter().filter(|&&l| counts[l] > 1).count();
    if anchors == 0 {
        return Ok(ContrastiveOutput {
            loss: F::zero(),
            grad: vec![F::zero(); n * dim],
            anchors,
        });
    }
    let inv_anchors = F::one() / F::from_usize(anchors).unwrap();

    let mut total = F::zero();
    // d loss / d s, zero on the diagonal
    let mut dsim = vec![F::zero(); n * n];
    for i in 0..n {
        let positives = counts[labels[i]] - 1;
        if positives == 0 {
            continue;
        }
        let row = &sim[i * n..(i + 1) * n];
        let max = row
            .iter()
            .enumerate()
            .filter(|&(a, _)| a != i)
            .map(|(_, &v)| v)
            .fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for (a, &v) in row.iter().enumerate() {
            if a != i {
                denom += (v - max).exp();
            }
        }
        let log_z = max + denom.ln();
        let inv_pos = F::one() / F::from_usize(positives).unwrap();
        let mut pos_sum = F::zero();
        let drow = &mut dsim[i * n..(i + 1) * n];
        for a in 0..n {
            if a == i {
                continue;
            }
            let p = (row[a] - log_z).exp();
            let mut g = p;
            if labels[a] == labels[i] {
                pos_sum += row[a];
                g -= inv_pos;
            }
            drow[a] = g * inv_anchors;
        }
        total += log_z - pos_sum * inv_pos;
    }
    let loss = total * inv_anchors;

    // du = (dS + dS^T) u / tau
    let mut sym = dsim.clone();
    for i in 0..n {
        for a in 0..n {
            sym[i * n + a] += dsim[a * n + i];
        }
    }
    let mut grad = vec![F::zero(); n * dim];
    gemm(n, n, dim, &sym, false, &u, false, F::zero(), &mut grad);
    grad.iter_mut().for_each(|g| *g /= tau);
    if normalize {
        for ((grow, urow), &norm) in grad.chunks_mut(dim).zip(u.chunks(dim)).zip(&norms) {
            let dot: F = grow.iter().zip(urow).map(|(&g, &v)| g * v).sum();
            for (g, &v) in grow.iter_mut().zip(urow) {
                *g = (*g - v * dot) / norm;
            }
        }
    }
    Ok(ContrastiveOutput { loss, grad, anchors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct double loop over anchors and positives, no shared code.
    fn brute_force(z: &[f64], n: usize, dim: usize, labels: &[usize], tau: f64, normalize: bool) -> f64 {
        let rows: Vec<Vec<f64>> = z
            .chunks(dim)
            .map(|r| {
                if normalize {
                    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                    r.iter().map(|v| v / norm).collect()
                } else {
                    r.to_vec()
                }
            })
            .collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        let mut contributing = 0;
        for i in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
            if pos.is_empty() {
                continue;
            }
            contributing += 1;
            let denom: f64 = (0..n)
                .filter(|&a| a != i)
                .map(|a| (dot(&rows[i], &rows[a]) / tau).exp())
                .sum();
            let mut term = 0.0;
            for &p in &pos {
                term += ((dot(&rows[i], &rows[p]) / tau).exp() / denom).ln();
            }
            total -= term / pos.len() as f64;
        }
        if contributing == 0 {
            0.0
        } else {
            total / contributing as f64
        }
    }

    #[test]
    fn two_items_same_label_is_zero() {
        let out = contrastive_loss(&[0.3f64, -1.0, 2.0, 0.5], 2, 2, &[4, 4], 0.07, true).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn unique_labels_are_zero() {
        let out = contrastive_loss(&[1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0], 3, 2, &[0, 1, 2], 0.5, true).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.anchors, 0);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn six_unit_vectors_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let z: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = [0, 0, 1, 1, 2, 2];
        let out = contrastive_loss(&z, 6, 4, &labels, 0.07, true).unwrap();
        let expected = brute_force(&z, 6, 4, &labels, 0.07, true);
        assert!((out.loss - expected).abs() < 1e-6, "{} vs {expected}", out.loss);
    }

    #[test]
    fn too_small_batch() {
        assert!(contrastive_loss(&[1.0f64], 1, 1, &[0], 1.0, true).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, dim) = (8, 5);
            let z: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            for normalize in [true, false] {
                let out = contrastive_loss(&z, n, dim, &labels, 0.5, normalize).unwrap();
                for j in 0..n * dim {
                    let mut zp = z.clone();
                    zp[j] += 1e-6;
                    let mut zm = z.clone();
                    zm[j] -= 1e-6;
                    let num = (brute_force(&zp, n, dim, &labels, 0.5, normalize)
                        - brute_force(&zm, n, dim, &labels, 0.5, normalize))
                        / 2e-6;
                    let denom = (out.grad[j].abs() + num.abs()).max(1e-8);
                    assert!((out.grad[j] - num).abs() / denom < 1e-5, "seed {seed} coord {j}");
                }
            }
        }
    }
}
