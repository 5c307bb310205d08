//! Pairing of real and generated samples and their convex combination at
//! the input, feature, or loss level.
//!
//! All mixing is row-wise with one weight per pair:
//! `lam * real + (1 - lam) * generated`. A weight of exactly 1 or 0 copies the corresponding source
//! bit for bit.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// One draw from `Beta(beta, beta)`.
pub fn sample_lambda(rng: &mut Rng, beta: f64) -> Result<f64> {
    let dist = Beta::new(beta, beta)
        .map_err(|_| Error::config(format!("mix beta must be positive and finite, got {beta}")))?;
    let lam: f64 = dist.sample(rng);
    if lam.is_nan() {
        return Err(Error::NonFinite { op: "sample_lambda" });
    }
    Ok(lam.clamp(0.0, 1.0))
}

pub fn sample_lambdas(rng: &mut Rng, beta: f64, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| sample_lambda(rng, beta)).collect()
}

fn check_lambdas(lams: &[f64]) -> Result<()> {
    match lams.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        Some(l) => Err(Error::Domain(format!("mixing weight {l} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Row-wise `lams[b] * a[b] + (1 - lams[b]) * b[b]` over the leading axis.
pub fn lerp_rows<T: Element>(a: &Tensor<T>, b: &Tensor<T>, lams: &[f64]) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "cannot mix shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if lams.len() != a.batch() {
        return Err(Error::dim(format!("{} mixing weights for {} rows", lams.len(), a.batch())));
    }
    check_lambdas(lams)?;
    let width = a.len() / a.batch().max(1);
    let mut out = Vec::with_capacity(a.len());
    for (r, &lam) in lams.iter().enumerate() {
        let (ra, rb) = (&a.data()[r * width..(r + 1) * width], &b.data()[r * width..(r + 1) * width]);
        if lam == 1.0 {
            out.extend_from_slice(ra);
        } else if lam == 0.0 {
            out.extend_from_slice(rb);
        } else {
            out.extend(
                ra.iter()
                    .zip(rb)
                    .map(|(&x, &y)| T::of(lam * x.as_f64() + (1.0 - lam) * y.as_f64())),
            );
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// Mixed images and soft labels: `(x', p')`.
pub fn mix_inputs<T: Element>(
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    p1: &Tensor<T>,
    p2: &Tensor<T>,
    lams: &[f64],
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((lerp_rows(x1, x2, lams)?, lerp_rows(p1, p2, lams)?))
}

/// Mixed feature vectors and labels: `(f_mix, y_mix)`.
pub fn mix_representation<T: Element>(
    f_r: &Tensor<T>,
    f_g: &Tensor<T>,
    y_r: &Tensor<T>,
    y_g: &Tensor<T>,
    lams: &[f64],
) -> Result<(Tensor<T>, Tensor<T>)> {
    mix_inputs(f_r, f_g, y_r, y_g, lams)
}

/// Mixed logits and the batch objective: `z_mix` row-wise and the mean of
/// the per-pair `lam * L_r + (1 - lam) * L_g`.
pub fn mix_loss<T: Element>(
    z_r: &Tensor<T>,
    z_g: &Tensor<T>,
    l_r: &[f64],
    l_g: &[f64],
    lams: &[f64],
) -> Result<(Tensor<T>, f64)> {
    let z_mix = lerp_rows(z_r, z_g, lams)?;
    if l_r.len() != lams.len() || l_g.len() != lams.len() {
        return Err(Error::dim("one branch loss per pair required"));
    }
    let total: f64 = lams
        .iter()
        .zip(l_r.iter().zip(l_g))
        .map(|(&lam, (&a, &b))| mix_scalar(a, b, lam))
        .sum();
    Ok((z_mix, total / lams.len() as f64))
}

/// `lam * a + (1 - lam) * b` with exact endpoints.
pub fn mix_scalar(a: f64, b: f64, lam: f64) -> f64 {
    if lam == 1.0 {
        a
    } else if lam == 0.0 {
        b
    } else {
        lam * a + (1.0 - lam) * b
    }
}

/// One epoch of pairs: every real index once in shuffled order, each with a
/// generated partner drawn uniformly with replacement.
pub fn pair_batches(real: usize, synthetic: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    if synthetic == 0 {
        return Err(Error::config(
            "the synthetic pool is empty; run `generate` first and point `synthetic` at its output",
        ));
    }
    if real == 0 {
        return Err(Error::config("the real training set is empty"));
    }
    let mut order: Vec<usize> = (0..real).collect();
    order.shuffle(rng);
    Ok(order.into_iter().map(|r| (r, rng.random_range(0..synthetic))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn lambda_support_and_errors() {
        let mut r = rng::stream(0, "lam", 0);
        for _ in 0..1000 {
            let l = sample_lambda(&mut r, 0.3).unwrap();
            assert!((0.0..=1.0).contains(&l));
        }
        assert!(matches!(sample_lambda(&mut r, 0.0), Err(Error::Config(_))));
        assert!(matches!(sample_lambda(&mut r, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn half_mix_arithmetic() {
        let x1 = Tensor::<f64>::zeros(&[1, 4]);
        let x2 = Tensor::<f64>::full(&[1, 4], 2.0);
        let mut p1 = Tensor::<f64>::zeros(&[1, 28]);
        let mut p2 = Tensor::<f64>::zeros(&[1, 28]);
        p1.data_mut()[0] = 1.0;
        p2.data_mut()[1] = 1.0;
        let (x, p) = mix_inputs(&x1, &x2, &p1, &p2, &[0.5]).unwrap();
        assert!(x.data().iter().all(|&v| v == 1.0));
        assert_eq!(&p.data()[..3], &[0.5, 0.5, 0.0]);
        let (x, p) = mix_inputs(&x1, &x2, &p1, &p2, &[1.0]).unwrap();
        assert_eq!((x, p), (x1, p1));
    }

    #[test]
    fn mix_loss_arithmetic() {
        let z = Tensor::<f64>::zeros(&[1, 2]);
        let (_, l) = mix_loss(&z, &z, &[1.0], &[2.0], &[0.7]).unwrap();
        assert!((l - 1.3).abs() < 1e-15);
    }

    #[test]
    fn pairing() {
        let mut r = rng::stream(0, "pair", 0);
        let pairs = pair_batches(10, 1, &mut r).unwrap();
        assert_eq!(pairs.len(), 10);
        assert!(pairs.iter().all(|&(_, s)| s == 0));
        let mut reals: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        reals.sort_unstable();
        assert_eq!(reals, (0..10).collect::<Vec<_>>());
        let err = pair_batches(10, 0, &mut r).unwrap_err().to_string();
        assert!(err.contains("generate"), "{err}");
    }

    #[test]
    fn shape_and_domain_errors() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 4]);
        assert!(matches!(lerp_rows(&a, &b, &[0.5, 0.5]), Err(Error::Dimension(_))));
        assert!(matches!(lerp_rows(&a, &a, &[0.5]), Err(Error::Dimension(_))));
        assert!(matches!(lerp_rows(&a, &a, &[0.5, 1.5]), Err(Error::Domain(_))));
    }
}
