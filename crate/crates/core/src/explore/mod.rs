//! Per-sample worst-case exploration over style mixing weights.
//!
//! Every sample starts from uniform weights over itself and `M` style
//! providers, then takes `K` signed ascent steps on its own loss. Steps are
//! projected back onto the simplex by clamping negatives and renormalizing.

mod mechanism;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Cnn;
use crate::tensor::Tensor;

pub use mechanism::{
    Augmented, BatchEvaluation, FeatStatsMechanism, FourierMechanism, Mechanism, MechanismRegistry,
    PreparedBatch,
};

/// Tolerance for accepting caller-supplied weights as simplex points.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Mixing weights `[self, provider_1, .., provider_M]` on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct Alpha(Vec<f64>);

impl Alpha {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let a = Self(weights);
        a.check()?;
        Ok(a)
    }

    /// Wraps weights without validation; operations that need a simplex
    /// point re-check.
    pub fn new_unchecked(weights: Vec<f64>) -> Self {
        Self(weights)
    }

    /// All weight on the sample itself.
    pub fn identity(providers: usize) -> Self {
        let mut w = vec![0.0; providers + 1];
        w[0] = 1.0;
        Self(w)
    }

    pub fn check(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::OffSimplex("empty weight vector".into()));
        }
        if let Some(v) = self.0.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::OffSimplex(format!(
                "entry {v} is negative or not finite"
            )));
        }
        let s: f64 = self.0.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::OffSimplex(format!("weights sum to {s}")));
        }
        Ok(())
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn providers(&self) -> usize {
        self.0.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderPolicy {
    /// `M` distinct other samples of the minibatch.
    BatchUniform,
    /// One sample from each training domain; `M` is the domain count.
    OnePerDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExploreConfig {
    /// Inner ascent steps.
    pub k: usize,
    /// Ascent step size.
    pub mu: f64,
    /// Style providers per sample.
    pub m: usize,
    pub gamma: f64,
    /// Registered mechanism name, `fourier` or `featstats`.
    pub mechanism: String,
    pub provider_policy: ProviderPolicy,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        Self {
            k: 10,
            mu: 0.05,
            m: 3,
            gamma: 1.0,
            mechanism: "fourier".into(),
            provider_policy: ProviderPolicy::BatchUniform,
        }
    }
}

impl ExploreConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() || self.mu < 0.0 {
            return Err(Error::Config(format!(
                "step size must be >= 0, got {}",
                self.mu
            )));
        }
        if self.m == 0 {
            return Err(Error::Config("need at least one style provider".into()));
        }
        crate::fourier::check_gamma(self.gamma).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Loss and weights of one sample at every inner step `0..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExploreTrace {
    pub losses: Vec<f64>,
    pub alphas: Vec<Alpha>,
}

/// Uniform starting weights over self and `m` providers.
pub fn init_alpha(m: usize) -> Result<Alpha> {
    if m == 0 {
        return Err(Error::InvalidArgument(
            "need at least one style provider".into(),
        ));
    }
    Ok(Alpha(vec![1.0 / (m + 1) as f64; m + 1]))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One signed ascent step followed by clamp-and-renormalize.
///
/// Falls back to uniform weights if every entry clamps to zero.
pub fn alpha_update(alpha: &Alpha, grad: &[f64], mu: f64) -> Result<Alpha> {
    if grad.len() != alpha.len() {
        return Err(Error::shape(
            "alpha_update",
            format!("{} weights, {} gradient entries", alpha.len(), grad.len()),
        ));
    }
    let stepped: Vec<f64> = alpha
        .0
        .iter()
        .zip(grad)
        .map(|(a, g)| (a + mu * sign(*g)).max(0.0))
        .collect();
    let total: f64 = stepped.iter().sum();
    if total < 1e-12 {
        return init_alpha(alpha.providers());
    }
    Ok(Alpha(stepped.into_iter().map(|v| v / total).collect()))
}

/// Chooses style providers (batch positions) for every sample of a batch.
///
/// `domains` lists the training domains for [`ProviderPolicy::OnePerDomain`];
/// it is ignored otherwise.
pub fn select_providers<R: Rng + ?Sized>(
    batch_domains: &[u32],
    domains: &[u32],
    policy: ProviderPolicy,
    m: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let n = batch_domains.len();
    match policy {
        ProviderPolicy::BatchUniform => {
            if m == 0 || n <= m {
                return Err(Error::Config(format!(
                    "batch of {n} cannot supply {m} providers per sample"
                )));
            }
            Ok((0..n)
                .map(|i| {
                    sample(rng, n - 1, m)
                        .into_iter()
                        .map(|j| if j < i { j } else { j + 1 })
                        .collect()
                })
                .collect())
        }
        ProviderPolicy::OnePerDomain => {
            if domains.is_empty() {
                return Err(Error::Config("one_per_domain needs a domain list".into()));
            }
            let members: Vec<Vec<usize>> = domains
                .iter()
                .map(|d| (0..n).filter(|&i| batch_domains[i] == *d).collect())
                .collect();
            if let Some(pos) = members.iter().position(Vec::is_empty) {
                return Err(Error::Config(format!(
                    "domain {} has no sample in this batch",
                    domains[pos]
                )));
            }
            Ok((0..n)
                .map(|i| {
                    members
                        .iter()
                        .map(|pool| {
                            let others: Vec<usize> =
                                pool.iter().copied().filter(|&j| j != i).collect();
                            if others.is_empty() {
                                // Self is its domain's only member in the batch.
                                i
                            } else {
                                others[rng.gen_range(0..others.len())]
                            }
                        })
                        .collect()
                })
                .collect())
        }
    }
}

/// Inner maximization for one batch.
///
/// Providers are drawn once per batch from `rng`; model parameters are only
/// read. Returns the batch generated with the final weights and one trace
/// per sample.
#[allow(clippy::too_many_arguments)]
pub fn explore_batch<R: Rng + ?Sized>(
    model: &Cnn,
    batch: &Tensor,
    labels: &[usize],
    batch_domains: &[u32],
    domains: &[u32],
    config: &ExploreConfig,
    mechanism: &dyn Mechanism,
    rng: &mut R,
) -> Result<(Augmented, Vec<ExploreTrace>)> {
    config.validate()?;
    let n = labels.len();
    if batch.shape().first() != Some(&n) || batch_domains.len() != n {
        return Err(Error::shape(
            "explore_batch",
            format!(
                "batch {:?}, {} labels, {} domain ids",
                batch.shape(),
                n,
                batch_domains.len()
            ),
        ));
    }
    let m = match config.provider_policy {
        ProviderPolicy::BatchUniform => config.m,
        ProviderPolicy::OnePerDomain => domains.len(),
    };
    let providers = select_providers(batch_domains, domains, config.provider_policy, m, rng)?;
    let prepared = mechanism.prepare(model, batch, &providers, config.gamma)?;

    let mut alphas = vec![init_alpha(m)?; n];
    let mut traces: Vec<ExploreTrace> = (0..n)
        .map(|_| ExploreTrace {
            losses: Vec::with_capacity(config.k + 1),
            alphas: Vec::with_capacity(config.k + 1),
        })
        .collect();
    for step in 0..=config.k {
        let last = step == config.k;
        let (losses, grads) = prepared.evaluate(model, labels, &alphas, !last)?;
        for (i, t) in traces.iter_mut().enumerate() {
            t.losses.push(losses[i]);
            t.alphas.push(alphas[i].clone());
        }
        if last {
            break;
        }
        let grads =
            grads.ok_or_else(|| Error::InvalidArgument("mechanism returned no gradient".into()))?;
        for (a, g) in alphas.iter_mut().zip(&grads) {
            *a = alpha_update(a, g, config.mu)?;
        }
    }
    Ok((prepared.finish(&alphas)?, traces))
}
