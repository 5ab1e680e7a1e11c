//! Chunk-shuffle negatives and the temperature-scaled contrastive loss that
//! pulls the projected text embedding towards the speaker embedding.

use std::collections::HashSet;

use ndarray::{Array1, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BlockRef, Parameters};
use crate::rng::stream;

pub const DEFAULT_NEGATIVES: usize = 10;
pub const DEFAULT_CHUNKS: usize = 8;
pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// `N` chunk-permuted copies of a source vector.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSet {
    pub negatives: Vec<Array1<f64>>,
    /// `permutations[i][j]` is the source chunk placed at chunk position `j`
    /// of negative `i`.
    pub permutations: Vec<Vec<usize>>,
    pub source: Array1<f64>,
    pub chunks: usize,
}

fn permute_chunks(v: ArrayView1<f64>, perm: &[usize]) -> Array1<f64> {
    let size = v.len() / perm.len();
    let mut out = Array1::zeros(v.len());
    for (dst, &src) in perm.iter().enumerate() {
        out.slice_mut(ndarray::s![dst * size..(dst + 1) * size])
            .assign(&v.slice(ndarray::s![src * size..(src + 1) * size]));
    }
    out
}

/// Inverse of [`permute_chunks`]: routes a gradient on a negative back to
/// the source positions.
fn unpermute_chunks(v: ArrayView1<f64>, perm: &[usize]) -> Array1<f64> {
    let size = v.len() / perm.len();
    let mut out = Array1::zeros(v.len());
    for (dst, &src) in perm.iter().enumerate() {
        out.slice_mut(ndarray::s![src * size..(src + 1) * size])
            .assign(&v.slice(ndarray::s![dst * size..(dst + 1) * size]));
    }
    out
}

fn factorial_saturating(k: usize) -> usize {
    (2..=k)
        .try_fold(1usize, |acc, i| acc.checked_mul(i))
        .unwrap_or(usize::MAX)
}

/// Draws `n` distinct non-identity permutations of the `k` chunks of `g`,
/// uniformly without replacement, from the seeded stream.
pub fn make_negatives(g: ArrayView1<f64>, k: usize, n: usize, seed: u64) -> Result<NegativeSet> {
    let mut rng = stream(seed, &[0x4E47]);
    make_negatives_with(g, k, n, &mut rng)
}

pub fn make_negatives_with<R: Rng>(g: ArrayView1<f64>, k: usize, n: usize, rng: &mut R) -> Result<NegativeSet> {
    if k < 2 {
        return Err(Error::input(format!("chunk count must be at least 2, got {k}")));
    }
    if !g.len().is_multiple_of(k) {
        return Err(Error::input(format!(
            "chunk count {k} does not divide dimension {}",
            g.len()
        )));
    }
    let available = factorial_saturating(k) - 1;
    if n > available {
        return Err(Error::input(format!(
            "{n} negatives requested but only {available} non-identity permutations of {k} chunks exist"
        )));
    }
    let identity: Vec<usize> = (0..k).collect();
    let mut seen = HashSet::new();
    let mut permutations = Vec::with_capacity(n);
    while permutations.len() < n {
        let mut p = identity.clone();
        p.shuffle(rng);
        if p != identity && seen.insert(p.clone()) {
            permutations.push(p);
        }
    }
    let negatives = permutations.iter().map(|p| permute_chunks(g, p)).collect();
    Ok(NegativeSet {
        negatives,
        permutations,
        source: g.to_owned(),
        chunks: k,
    })
}

/// Learnable softmax temperature, kept inside `[TAU_MIN, TAU_MAX]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    tau: f64,
}

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::input(format!("temperature must be positive, got {tau}")));
        }
        Ok(Temperature { tau })
    }

    pub fn value(&self) -> f64 {
        self.tau
    }

    pub fn clamp(&mut self) {
        self.tau = self.tau.clamp(TAU_MIN, TAU_MAX);
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature { tau: TAU_INIT }
    }
}

impl Parameters for Temperature {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        vec![BlockRef {
            name: "tau".into(),
            shape: vec![1],
            data: std::slice::from_ref(&self.tau),
        }]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![std::slice::from_mut(&mut self.tau)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// Cosines to `s`, positive first.
    pub cosines: Vec<f64>,
    pub dg: Array1<f64>,
    pub ds: Array1<f64>,
    pub dtau: f64,
}

/// Loss from cosines (positive first) plus the logits, their max and the
/// shifted partition sum.
fn softmax_terms(cosines: &[f64], tau: f64) -> (f64, Vec<f64>, f64, f64) {
    let logits: Vec<f64> = cosines.iter().map(|c| c / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let loss = if logits[0] >= max {
        // keeps precision when the positive dominates
        logits[1..].iter().map(|l| (l - max).exp()).sum::<f64>().ln_1p()
    } else {
        max + z.ln() - logits[0]
    };
    (loss.max(0.0), logits, max, z)
}

/// Negative log-softmax of the positive pair among the positive and its
/// negatives, with gradients w.r.t. `g`, `s` and `tau`. The gradient on `g`
/// flows through the positive and through every permuted copy.
pub fn contrastive_loss(
    g: ArrayView1<f64>,
    negatives: &NegativeSet,
    s: ArrayView1<f64>,
    tau: f64,
) -> Result<ContrastiveOutput> {
    if !(tau > 0.0) {
        return Err(Error::input(format!("temperature must be positive, got {tau}")));
    }
    if g.len() != s.len() || negatives.source.len() != g.len() {
        return Err(Error::input(format!(
            "dimension mismatch: g {} vs s {}",
            g.len(),
            s.len()
        )));
    }
    let ns = s.dot(&s).sqrt();
    let ng = g.dot(&g).sqrt();
    if ns == 0.0 || ng == 0.0 {
        return Err(Error::input("contrastive loss undefined for zero-norm vectors"));
    }
    let s_hat = &s / ns;
    // Chunk permutation preserves the norm, so every candidate shares |g|.
    let candidates: Vec<Array1<f64>> = std::iter::once(g.to_owned())
        .chain(negatives.permutations.iter().map(|p| permute_chunks(g, p)))
        .collect();
    let cosines: Vec<f64> = candidates.iter().map(|c| c.dot(&s_hat) / ng).collect();
    let (loss, logits, max, z) = softmax_terms(&cosines, tau);

    let mut dg = Array1::zeros(g.len());
    let mut ds = Array1::zeros(s.len());
    let mut dtau = 0.0;
    for (i, (cand, &cos)) in candidates.iter().zip(&cosines).enumerate() {
        let dlogit = (logits[i] - max).exp() / z - if i == 0 { 1.0 } else { 0.0 };
        dtau -= dlogit * cos / (tau * tau);
        let dcos = dlogit / tau;
        let c_hat = cand / ng;
        let dcand = (&s_hat - &(&c_hat * cos)) * (dcos / ng);
        ds.scaled_add(dcos / ns, &(&c_hat - &(&s_hat * cos)));
        if i == 0 {
            dg += &dcand;
        } else {
            dg += &unpermute_chunks(dcand.view(), &negatives.permutations[i - 1]);
        }
    }
    Ok(ContrastiveOutput {
        loss,
        cosines,
        dg,
        ds,
        dtau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_chunks_have_a_single_negative() {
        let g = array![1.0, 2.0, 3.0, 4.0];
        let neg = make_negatives(g.view(), 2, 1, 5).unwrap();
        assert_eq!(neg.negatives[0], array![3.0, 4.0, 1.0, 2.0]);
        assert!(make_negatives(g.view(), 2, 2, 5).is_err());
        assert!(make_negatives(g.view(), 3, 1, 5).is_err());
        assert!(make_negatives(g.view(), 1, 1, 5).is_err());
    }

    #[test]
    fn default_negatives_are_distinct_chunk_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Array1::from_shape_simple_fn(256, || rng.random_range(-1.0..1.0));
        let neg = make_negatives(g.view(), DEFAULT_CHUNKS, DEFAULT_NEGATIVES, 42).unwrap();
        let perms: HashSet<_> = neg.permutations.iter().cloned().collect();
        assert_eq!(perms.len(), DEFAULT_NEGATIVES);
        let chunks = |v: &Array1<f64>| {
            let mut c: Vec<Vec<u64>> = v
                .as_slice()
                .unwrap()
                .chunks(32)
                .map(|c| c.iter().map(|x| x.to_bits()).collect())
                .collect();
            c.sort();
            c
        };
        for (n, p) in neg.negatives.iter().zip(&neg.permutations) {
            assert_ne!(p, &(0..8).collect::<Vec<_>>());
            assert_eq!(chunks(n), chunks(&g));
        }
        assert_eq!(neg, make_negatives(g.view(), 8, 10, 42).unwrap());
    }

    #[test]
    fn constant_chunks_give_equal_negatives() {
        let g = Array1::from_shape_fn(256, |i| (i % 32) as f64);
        let neg = make_negatives(g.view(), 8, 10, 3).unwrap();
        for n in &neg.negatives {
            assert_eq!(n, &g);
        }
        let s = Array1::from_shape_fn(256, |i| ((i * 7) % 11) as f64 - 5.0);
        let out = contrastive_loss(g.view(), &neg, s.view(), 0.3).unwrap();
        assert!((out.loss - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn direct_softmax_values() {
        // g = [1, 0] against s = e1; its chunk swap [0, 1] is orthogonal.
        let g = array![1.0, 0.0];
        let neg = make_negatives(g.view(), 2, 1, 0).unwrap();
        let v = contrastive_loss(g.view(), &neg, g.view(), 1.0).unwrap().loss;
        assert!((v - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        // all negatives at cosine -1, tau 0.05
        let g = array![1.0, -1.0];
        let neg = make_negatives(g.view(), 2, 1, 0).unwrap();
        let out = contrastive_loss(g.view(), &neg, array![1.0, -1.0].view(), 0.05).unwrap();
        assert!(out.loss < 1e-10);
    }

    #[test]
    fn invalid_inputs() {
        let g = array![1.0, 2.0, 3.0, 4.0];
        let neg = make_negatives(g.view(), 2, 1, 0).unwrap();
        let z = Array1::zeros(4);
        assert!(contrastive_loss(g.view(), &neg, z.view(), 0.1).is_err());
        assert!(contrastive_loss(g.view(), &neg, g.view(), 0.0).is_err());
        assert!(contrastive_loss(g.view(), &neg, array![1.0].view(), 0.1).is_err());
        assert!(Temperature::new(-1.0).is_err());
        let mut t = Temperature::new(5.0).unwrap();
        t.clamp();
        assert_eq!(t.value(), TAU_MAX);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Array1::from_shape_simple_fn(24, || rng.random_range(-1.0..1.0));
        let s = Array1::from_shape_simple_fn(24, || rng.random_range(-1.0..1.0));
        let neg = make_negatives(g.view(), 4, 6, 9).unwrap();
        let tau = 0.2;
        let f =
            |g: &Array1<f64>, s: &Array1<f64>, tau: f64| contrastive_loss(g.view(), &neg, s.view(), tau).unwrap().loss;
        let out = contrastive_loss(g.view(), &neg, s.view(), tau).unwrap();
        let h = 1e-6;
        let rel = |fd: f64, a: f64| (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
        for i in 0..24 {
            let (mut gp, mut gm) = (g.clone(), g.clone());
            gp[i] += h;
            gm[i] -= h;
            let fd = (f(&gp, &s, tau) - f(&gm, &s, tau)) / (2.0 * h);
            assert!(rel(fd, out.dg[i]) < 1e-3, "dg[{i}] {fd} vs {}", out.dg[i]);
            let (mut sp, mut sm) = (s.clone(), s.clone());
            sp[i] += h;
            sm[i] -= h;
            let fd = (f(&g, &sp, tau) - f(&g, &sm, tau)) / (2.0 * h);
            assert!(rel(fd, out.ds[i]) < 1e-3, "ds[{i}] {fd} vs {}", out.ds[i]);
        }
        let fd = (f(&g, &s, tau + h) - f(&g, &s, tau - h)) / (2.0 * h);
        assert!(rel(fd, out.dtau) < 1e-3);
    }

    proptest! {
        #[test]
        fn loss_is_bounded_and_scale_invariant(
            seed in 0u64..1000,
            a in 0.1f64..10.0,
            b in 0.1f64..10.0,
            tau in 0.02f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Array1::from_shape_simple_fn(32, || rng.random_range(-1.0..1.0));
            let s = Array1::from_shape_simple_fn(32, || rng.random_range(-1.0..1.0));
            let neg = make_negatives(g.view(), 8, 10, seed).unwrap();
            let l = contrastive_loss(g.view(), &neg, s.view(), tau).unwrap().loss;
            prop_assert!(l >= 0.0);
            prop_assert!(l <= 11f64.ln() + 2.0 / tau + 1e-9);
            let scaled = contrastive_loss((&g * a).view(), &neg, (&s * b).view(), tau).unwrap().loss;
            prop_assert!((scaled - l).abs() < 1e-9 * l.max(1.0));
        }

        #[test]
        fn raising_positive_cosine_lowers_loss(
            negs in proptest::collection::vec(-1.0f64..1.0, 1..12),
            c1 in -1.0f64..0.9,
            delta in 0.01f64..0.1,
            tau in 0.05f64..1.0,
        ) {
            let mut a = vec![c1];
            a.extend(&negs);
            let mut b = vec![c1 + delta];
            b.extend(&negs);
            prop_assert!(softmax_terms(&b, tau).0 < softmax_terms(&a, tau).0);
        }
    }

    #[test]
    fn three_chunk_permutations_are_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let g = array![0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let mut counts = std::collections::BTreeMap::new();
        let draws = 10_000;
        for seed in 0..draws {
            let neg = make_negatives(g.view(), 3, 1, seed).unwrap();
            let p = neg.permutations[0].clone();
            assert_ne!(p, vec![0, 1, 2]);
            let mut sorted = neg.negatives[0].to_vec();
            sorted.sort_by(f64::total_cmp);
            assert_eq!(sorted, g.to_vec());
            *counts.entry(p).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 5);
        let expected = draws as f64 / 5.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(4.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2}, p {p}, counts {counts:?}");
    }
}
