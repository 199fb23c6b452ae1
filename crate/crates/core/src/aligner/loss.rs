use crate::tensor::{Tensor, Var};

use super::{AlignerError, Result};

/// Masks a logit out of the softmax while staying finite.
const MASKED: f64 = -1e30;

/// Anchors and positives as row indices into the member matrix. Every
/// member other than the anchor itself is in the anchor's denominator.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContrastiveBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<Vec<usize>>,
}

/// InfoNCE over cosine similarities at temperature `tau`, averaged over
/// all (anchor, positive) pairs.
pub fn contrastive_loss<'t>(
    members: Var<'t>,
    batch: &ContrastiveBatch,
    tau: f64,
) -> Result<Var<'t>> {
    let m = members.rows();
    if m < 2 {
        return Err(AlignerError::BatchTooSmall(m));
    }
    if !(tau > 0.0) {
        return Err(AlignerError::InvalidConfig(format!(
            "tau must be > 0, got {tau}"
        )));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, (&a, pos)) in batch.anchors.iter().zip(&batch.positives).enumerate() {
        if pos.is_empty() {
            return Err(AlignerError::NoPositives(i));
        }
        for &p in pos {
            rows.push(a);
            targets.push(p);
        }
    }
    if batch.anchors.len() != batch.positives.len() || rows.is_empty() {
        return Err(AlignerError::InvalidConfig(
            "one positive list per anchor is required".into(),
        ));
    }
    let zn = members.l2_normalize_rows()?;
    let sims = zn.matmul_t(zn)?.scale(1.0 / tau)?;
    let mut mask = vec![0.0; rows.len() * m];
    for (r, &a) in rows.iter().enumerate() {
        mask[r * m + a] = MASKED;
    }
    let mask = members
        .tape()
        .constant(Tensor::matrix(rows.len(), m, mask)?);
    let logits = sims.gather_rows(&rows)?.add(mask)?;
    Ok(logits.cross_entropy(&targets)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::tensor::gradcheck::random_matrix;
    use crate::tensor::Tape;

    /// Direct double sum over anchors and positives with explicit
    /// denominators, independent of the tape.
    fn scalar_loop(z: &Tensor, batch: &ContrastiveBatch, tau: f64) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut total = 0.0;
        let mut count = 0;
        for (&i, pos) in batch.anchors.iter().zip(&batch.positives) {
            let denom: f64 = (0..z.rows())
                .filter(|&k| k != i)
                .map(|k| (cos(z.row(i), z.row(k)) / tau).exp())
                .sum();
            for &u in pos {
                let num = (cos(z.row(i), z.row(u)) / tau).exp();
                total += -(num / denom).ln();
                count += 1;
            }
        }
        total / count as f64
    }

    fn eval(z: &Tensor, batch: &ContrastiveBatch, tau: f64) -> f64 {
        let tape = Tape::new();
        contrastive_loss(tape.constant(z.clone()), batch, tau)
            .unwrap()
            .value()
            .item()
    }

    #[test]
    fn uniform_similarities_give_log_of_denominator() {
        // Identical rows: every cosine is 1.
        let m = 6;
        let z = Tensor::matrix(m, 3, [0.3, -1.2, 2.0].repeat(m)).unwrap();
        let batch = ContrastiveBatch {
            anchors: vec![0, 1],
            positives: vec![vec![2], vec![3, 4]],
        };
        let loss = eval(&z, &batch, 0.1);
        assert!((loss - ((m - 1) as f64).ln()).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn aligned_positive_with_opposed_negatives_vanishes() {
        let z = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![2.0, 0.0],
            vec![-1.0, 0.0],
            vec![-3.0, 0.0],
        ])
        .unwrap();
        let batch = ContrastiveBatch {
            anchors: vec![0],
            positives: vec![vec![1]],
        };
        assert!(eval(&z, &batch, 0.05) < 1e-10);
    }

    #[test]
    fn matches_scalar_loop_on_random_unit_vectors() {
        for seed in 0..5 {
            let mut rng = rng_from(seed, &[]);
            let z = random_matrix(&mut rng, 8, 5);
            let batch = ContrastiveBatch {
                anchors: vec![0, 1, 2, 3],
                positives: vec![vec![4], vec![5], vec![6], vec![7]],
            };
            let got = eval(&z, &batch, 0.2);
            let want = scalar_loop(&z, &batch, 0.2);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn scale_leaves_loss_unchanged() {
        let mut rng = rng_from(7, &[]);
        let z = random_matrix(&mut rng, 6, 4);
        let batch = ContrastiveBatch {
            anchors: vec![0, 1, 2],
            positives: vec![vec![3], vec![4, 5], vec![0]],
        };
        let scaled = Tensor::matrix(6, 4, z.data().iter().map(|x| x * 37.5).collect()).unwrap();
        assert!((eval(&z, &batch, 0.1) - eval(&scaled, &batch, 0.1)).abs() < 1e-12);
    }

    #[test]
    fn preconditions_are_enforced() {
        let tape = Tape::new();
        let z = tape.constant(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap(),
        );
        let no_pos = ContrastiveBatch {
            anchors: vec![0],
            positives: vec![vec![]],
        };
        assert!(matches!(
            contrastive_loss(z, &no_pos, 0.1),
            Err(AlignerError::NoPositives(0))
        ));
        let zero_row = ContrastiveBatch {
            anchors: vec![0],
            positives: vec![vec![1]],
        };
        assert!(matches!(
            contrastive_loss(z, &zero_row, 0.1),
            Err(AlignerError::Tensor(_))
        ));
        let one = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        assert!(matches!(
            contrastive_loss(one, &zero_row, 0.1),
            Err(AlignerError::BatchTooSmall(1))
        ));
    }
}
