//! Feature-statistics style mechanism.
//!
//! A feature map's per-channel mean and standard deviation carry style; the
//! normalized map carries content. Mixing replaces the statistics with a
//! convex combination of the sample's own and its providers' statistics.
//! The same arithmetic runs inside the autodiff graph as
//! [`Graph::style_mix`](crate::autodiff::Graph::style_mix).

use crate::error::{Error, Result};
use crate::explore::Alpha;
use crate::tensor::Tensor;

/// Variance floor: `sigma = sqrt(max(var, STD_EPS))`.
pub const STD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mu.len()
    }
}

/// Mean and floored unbiased standard deviation of one spatial plane.
///
/// The floor only engages for near-constant planes, so restyling a plane
/// with variance above `STD_EPS` realizes the target statistics exactly.
pub(crate) fn plane_stats(plane: &[f64]) -> (f64, f64) {
    let n = plane.len() as f64;
    let mean = plane.iter().sum::<f64>() / n;
    let ss: f64 = plane.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).max(STD_EPS).sqrt())
}

/// Whether [`plane_stats`] clamped this standard deviation to the floor.
pub(crate) fn is_floored(sigma: f64) -> bool {
    sigma <= STD_EPS.sqrt()
}

/// Statistics of a `[c,h,w]` feature map.
pub fn channel_stats(feature: &Tensor) -> Result<ChannelStats> {
    if feature.ndim() != 3 {
        return Err(Error::shape(
            "channel_stats",
            format!("expected [c,h,w], got {:?}", feature.shape()),
        ));
    }
    let area = feature.shape()[1] * feature.shape()[2];
    if area < 2 {
        return Err(Error::Size(format!(
            "channel_stats needs h*w >= 2, got {area}"
        )));
    }
    let (mu, sigma) = feature.data().chunks(area).map(plane_stats).unzip();
    Ok(ChannelStats { mu, sigma })
}

/// `alpha[0]` weights `self_stats`, `alpha[l]` weights `providers[l-1]`.
pub fn mix_stats(
    alpha: &Alpha,
    self_stats: &ChannelStats,
    providers: &[ChannelStats],
) -> Result<ChannelStats> {
    if alpha.len() != providers.len() + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} mixing weights for {} providers",
            alpha.len(),
            providers.len()
        )));
    }
    alpha.check()?;
    let c = self_stats.channels();
    if providers.iter().any(|p| p.channels() != c) {
        return Err(Error::shape("mix_stats", "provider channel counts differ"));
    }
    let w = alpha.weights();
    let mut mu: Vec<f64> = self_stats.mu.iter().map(|v| w[0] * v).collect();
    let mut sigma: Vec<f64> = self_stats.sigma.iter().map(|v| w[0] * v).collect();
    for (p, &a) in providers.iter().zip(&w[1..]) {
        for ch in 0..c {
            mu[ch] += a * p.mu[ch];
            sigma[ch] += a * p.sigma[ch];
        }
    }
    Ok(ChannelStats { mu, sigma })
}

/// Re-normalizes `feature` to `mixed` statistics and blends by `gamma`.
pub fn apply_stats(
    feature: &Tensor,
    self_stats: &ChannelStats,
    mixed: &ChannelStats,
    gamma: f64,
) -> Result<Tensor> {
    if feature.ndim() != 3
        || feature.shape()[0] != self_stats.channels()
        || mixed.channels() != self_stats.channels()
    {
        return Err(Error::shape(
            "apply_stats",
            format!(
                "feature {:?}, {} / {} channel stats",
                feature.shape(),
                self_stats.channels(),
                mixed.channels()
            ),
        ));
    }
    let area = feature.shape()[1] * feature.shape()[2];
    let mut out = feature.clone();
    for (ch, plane) in out.data_mut().chunks_mut(area).enumerate() {
        let (mu, sigma) = (self_stats.mu[ch], self_stats.sigma[ch]);
        let (mm, ms) = (mixed.mu[ch], mixed.sigma[ch]);
        for v in plane.iter_mut() {
            let restyled = mm + ms * (*v - mu) / sigma;
            *v = gamma * restyled + (1.0 - gamma) * *v;
        }
    }
    Ok(out)
}

/// Per-sample statistics of a `[n,c,h,w]` batch, as `([n,c], [n,c])` rows.
pub fn batch_stats(features: &Tensor) -> Result<Vec<ChannelStats>> {
    if features.ndim() != 4 {
        return Err(Error::shape(
            "batch_stats",
            format!("expected [n,c,h,w], got {:?}", features.shape()),
        ));
    }
    (0..features.shape()[0])
        .map(|i| channel_stats(&features.slice_outer(i)))
        .collect()
}

/// Packs each sample's provider statistics into `[n, m, c]` tensors.
pub fn gather_provider_stats(
    stats: &[ChannelStats],
    providers: &[Vec<usize>],
) -> Result<(Tensor, Tensor)> {
    let n = providers.len();
    let m = providers.first().map_or(0, Vec::len);
    let c = stats.first().map_or(0, ChannelStats::channels);
    let mut mu = Vec::with_capacity(n * m * c);
    let mut sigma = Vec::with_capacity(n * m * c);
    for row in providers {
        if row.len() != m {
            return Err(Error::InvalidArgument(
                "every sample needs the same provider count".into(),
            ));
        }
        for &p in row {
            let s = stats.get(p).ok_or_else(|| {
                Error::InvalidArgument(format!("provider index {p} out of range"))
            })?;
            mu.extend_from_slice(&s.mu);
            sigma.extend_from_slice(&s.sigma);
        }
    }
    Ok((
        Tensor::new(vec![n, m, c], mu)?,
        Tensor::new(vec![n, m, c], sigma)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_feature(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn constant_feature_hits_the_floor() {
        let f = Tensor::full(&[2, 3, 3], 0.7);
        let s = channel_stats(&f).unwrap();
        assert!((s.mu[0] - 0.7).abs() < 1e-15);
        assert!((s.sigma[1] - STD_EPS.sqrt()).abs() < 1e-15);
        assert!((s.sigma[0] - 3.1623e-3).abs() < 1e-7);
    }

    #[test]
    fn two_point_feature() {
        let f = Tensor::new(vec![1, 1, 2], vec![0.0, 2.0]).unwrap();
        let s = channel_stats(&f).unwrap();
        assert_eq!(s.mu[0], 1.0);
        // unbiased variance of {0,2} is 2, well above the floor
        assert!((s.sigma[0] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn single_pixel_rejected() {
        let f = Tensor::zeros(&[3, 1, 1]);
        assert!(matches!(channel_stats(&f), Err(Error::Size(_))));
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_feature(&mut rng, 3, 4, 4);
        let s = channel_stats(&f).unwrap();
        for ch in 0..3 {
            let plane = &f.data()[ch * 16..(ch + 1) * 16];
            // Kahan-compensated sums as the extended-precision reference.
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for &v in plane {
                let y = v - comp;
                let t = sum + y;
                comp = (t - sum) - y;
                sum = t;
            }
            let mean = sum / 16.0;
            let var: f64 = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 15.0;
            assert!((s.mu[ch] - mean).abs() < 1e-14);
            assert!((s.sigma[ch] - var.max(STD_EPS).sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn mixing_with_self_weight_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_feature(&mut rng, 2, 4, 4);
        let own = channel_stats(&f).unwrap();
        let prov = channel_stats(&random_feature(&mut rng, 2, 4, 4)).unwrap();
        let alpha = Alpha::new(vec![1.0, 0.0]).unwrap();
        let mixed = mix_stats(&alpha, &own, &[prov]).unwrap();
        assert_eq!(mixed, own);
        let out = apply_stats(&f, &own, &mixed, 0.8).unwrap();
        assert!(out.max_abs_diff(&f) < 1e-6);
    }

    #[test]
    fn half_half_mean() {
        let a = ChannelStats {
            mu: vec![0.0],
            sigma: vec![1.0],
        };
        let b = ChannelStats {
            mu: vec![2.0],
            sigma: vec![3.0],
        };
        let mixed = mix_stats(&Alpha::new(vec![0.5, 0.5]).unwrap(), &a, &[b]).unwrap();
        assert_eq!(mixed.mu, vec![1.0]);
        assert_eq!(mixed.sigma, vec![2.0]);
    }

    #[test]
    fn identical_providers_ignore_split() {
        let own = ChannelStats {
            mu: vec![0.3, -1.0],
            sigma: vec![0.5, 2.0],
        };
        let p = ChannelStats {
            mu: vec![1.0, 4.0],
            sigma: vec![0.1, 0.7],
        };
        let a = mix_stats(
            &Alpha::new(vec![0.2, 0.7, 0.1]).unwrap(),
            &own,
            &[p.clone(), p.clone()],
        )
        .unwrap();
        let b = mix_stats(
            &Alpha::new(vec![0.2, 0.1, 0.7]).unwrap(),
            &own,
            &[p.clone(), p],
        )
        .unwrap();
        for ch in 0..2 {
            assert!((a.mu[ch] - b.mu[ch]).abs() < 1e-15);
            assert!((a.sigma[ch] - b.sigma[ch]).abs() < 1e-15);
        }
    }

    #[test]
    fn off_simplex_rejected() {
        let own = ChannelStats {
            mu: vec![0.0],
            sigma: vec![1.0],
        };
        let bad = Alpha::new_unchecked(vec![0.7, 0.7]);
        assert!(matches!(
            mix_stats(&bad, &own, std::slice::from_ref(&own)),
            Err(Error::OffSimplex(_))
        ));
    }

    #[test]
    fn gamma_zero_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_feature(&mut rng, 3, 4, 4);
        let own = channel_stats(&f).unwrap();
        let other = channel_stats(&random_feature(&mut rng, 3, 4, 4)).unwrap();
        let out = apply_stats(&f, &own, &other, 0.0).unwrap();
        assert!(out.bit_eq(&f));
    }

    #[test]
    fn full_strength_realizes_mixed_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let f = random_feature(&mut rng, 3, 5, 5);
            let own = channel_stats(&f).unwrap();
            let provs: Vec<_> = (0..3)
                .map(|_| channel_stats(&random_feature(&mut rng, 3, 5, 5)).unwrap())
                .collect();
            let mut w: Vec<f64> = (0..4).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            let mixed = mix_stats(&Alpha::new(w).unwrap(), &own, &provs).unwrap();
            let out = apply_stats(&f, &own, &mixed, 1.0).unwrap();
            let again = channel_stats(&out).unwrap();
            for ch in 0..3 {
                assert!((again.mu[ch] - mixed.mu[ch]).abs() < 1e-12);
                assert!((again.sigma[ch] - mixed.sigma[ch]).abs() < 1e-12);
            }
        }
    }
}
