use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::autodiff::{Graph, NodeId, Reduction};
use crate::error::{Error, Result};
use crate::featstyle;
use crate::fourier::{self, FourierBasis};
use crate::models::{Cnn, MixInput};
use crate::tensor::Tensor;

use super::Alpha;

/// A style-generating causal mechanism `G(alpha, x)` driven by mixing weights.
pub trait Mechanism: Send + Sync {
    fn name(&self) -> &'static str;

    /// Batch-level precomputation once providers are fixed.
    fn prepare(
        &self,
        model: &Cnn,
        batch: &Tensor,
        providers: &[Vec<usize>],
        gamma: f64,
    ) -> Result<Box<dyn PreparedBatch>>;
}

/// Per-sample losses, plus per-sample weight gradients when requested.
pub type BatchEvaluation = (Vec<f64>, Option<Vec<Vec<f64>>>);

pub trait PreparedBatch {
    /// Per-sample losses of the generated batch and, if requested, each
    /// sample's loss gradient with respect to its own weights.
    fn evaluate(
        &self,
        model: &Cnn,
        labels: &[usize],
        alphas: &[Alpha],
        with_grad: bool,
    ) -> Result<BatchEvaluation>;

    fn finish(self: Box<Self>, alphas: &[Alpha]) -> Result<Augmented>;
}

/// Worst-case samples produced by exploration.
#[derive(Debug, Clone)]
pub enum Augmented {
    /// Generated images, pixels clamped to `[0, 1]`.
    Images(Tensor),
    /// Statistics mixing to apply at the model's hook on the clean batch.
    FeatureMix {
        alpha: Tensor,
        prov_mu: Tensor,
        prov_sigma: Tensor,
        gamma: f64,
    },
}

impl Augmented {
    /// Logits of the augmented samples in `graph`, reusing bound parameters.
    pub fn logits(
        &self,
        graph: &mut Graph,
        model: &Cnn,
        params: &[NodeId],
        clean: &Tensor,
    ) -> Result<NodeId> {
        match self {
            Augmented::Images(x) => {
                let input = graph.constant(x.clone());
                model.forward(graph, input, params, None)
            }
            Augmented::FeatureMix {
                alpha,
                prov_mu,
                prov_sigma,
                gamma,
            } => {
                let input = graph.constant(clean.clone());
                let a = graph.constant(alpha.clone());
                let mix = MixInput {
                    alpha: a,
                    prov_mu,
                    prov_sigma,
                    gamma: *gamma,
                };
                model.forward(graph, input, params, Some(&mix))
            }
        }
    }
}

fn check_alphas(alphas: &[Alpha], n: usize, m: usize) -> Result<()> {
    if alphas.len() != n || alphas.iter().any(|a| a.len() != m + 1) {
        return Err(Error::InvalidArgument(format!(
            "expected {n} weight vectors of length {}",
            m + 1
        )));
    }
    Ok(())
}

/// Amplitude mixing in the Fourier domain, phase held fixed.
#[derive(Debug, Default, Clone, Copy)]
pub struct FourierMechanism;

struct FourierPrepared {
    bases: Vec<FourierBasis>,
    shape: Vec<usize>,
    providers: usize,
}

impl Mechanism for FourierMechanism {
    fn name(&self) -> &'static str {
        "fourier"
    }

    fn prepare(
        &self,
        _model: &Cnn,
        batch: &Tensor,
        providers: &[Vec<usize>],
        gamma: f64,
    ) -> Result<Box<dyn PreparedBatch>> {
        let n = batch.shape()[0];
        let polar: Vec<_> = (0..n)
            .map(|i| fourier::dft2(&batch.slice_outer(i)).map(|s| fourier::decompose(&s)))
            .collect::<Result<_>>()?;
        let mut bases = Vec::with_capacity(n);
        for (i, row) in providers.iter().enumerate() {
            let amps: Vec<&Tensor> = row.iter().map(|&p| &polar[p].amplitude).collect();
            bases.push(FourierBasis::new(
                gamma,
                &batch.slice_outer(i),
                &polar[i].phase,
                &amps,
            )?);
        }
        Ok(Box::new(FourierPrepared {
            bases,
            shape: batch.shape().to_vec(),
            providers: providers.first().map_or(0, Vec::len),
        }))
    }
}

impl FourierPrepared {
    fn generate(&self, alphas: &[Alpha]) -> Result<Tensor> {
        let images: Vec<Tensor> = self
            .bases
            .iter()
            .zip(alphas)
            .map(|(b, a)| b.generate(a))
            .collect();
        Tensor::stack(&images)
    }
}

impl PreparedBatch for FourierPrepared {
    fn evaluate(
        &self,
        model: &Cnn,
        labels: &[usize],
        alphas: &[Alpha],
        with_grad: bool,
    ) -> Result<BatchEvaluation> {
        check_alphas(alphas, self.bases.len(), self.providers)?;
        // The model sees the unclamped mixture so the weights stay on a
        // linear, differentiable path.
        let x = self.generate(alphas)?;
        let mut g = Graph::new();
        let params = model.bind(&mut g, false);
        let input = if with_grad { g.leaf(x) } else { g.constant(x) };
        let logits = model.forward(&mut g, input, &params, None)?;
        let loss = g.softmax_cross_entropy(logits, labels, Reduction::Sum)?;
        let losses = g.row_losses(loss)?.to_vec();
        if !with_grad {
            return Ok((losses, None));
        }
        let grads = g.backward(loss, &[input])?;
        let gx = grads.get(input).expect("input gradient requested");
        let per = gx.len() / self.bases.len();
        let alpha_grads = self
            .bases
            .iter()
            .enumerate()
            .map(|(i, b)| b.alpha_grad(&gx.data()[i * per..(i + 1) * per]))
            .collect();
        Ok((losses, Some(alpha_grads)))
    }

    fn finish(self: Box<Self>, alphas: &[Alpha]) -> Result<Augmented> {
        check_alphas(alphas, self.bases.len(), self.providers)?;
        let x = self.generate(alphas)?;
        debug_assert_eq!(x.shape(), self.shape.as_slice());
        Ok(Augmented::Images(x.map(|v| v.clamp(0.0, 1.0))))
    }
}

/// Channel mean/std mixing at the model's hook layer.
#[derive(Debug, Default, Clone, Copy)]
pub struct FeatStatsMechanism;

struct FeatStatsPrepared {
    features: Tensor,
    prov_mu: Tensor,
    prov_sigma: Tensor,
    gamma: f64,
    providers: usize,
}

impl Mechanism for FeatStatsMechanism {
    fn name(&self) -> &'static str {
        "featstats"
    }

    fn prepare(
        &self,
        model: &Cnn,
        batch: &Tensor,
        providers: &[Vec<usize>],
        gamma: f64,
    ) -> Result<Box<dyn PreparedBatch>> {
        fourier::check_gamma(gamma)?;
        let features = model.hook_features(batch)?;
        let stats = featstyle::batch_stats(&features)?;
        let (prov_mu, prov_sigma) = featstyle::gather_provider_stats(&stats, providers)?;
        Ok(Box::new(FeatStatsPrepared {
            features,
            prov_mu,
            prov_sigma,
            gamma,
            providers: providers.first().map_or(0, Vec::len),
        }))
    }
}

fn alpha_matrix(alphas: &[Alpha]) -> Result<Tensor> {
    let m1 = alphas.first().map_or(0, Alpha::len);
    Tensor::new(
        vec![alphas.len(), m1],
        alphas
            .iter()
            .flat_map(|a| a.weights().iter().copied())
            .collect(),
    )
}

impl PreparedBatch for FeatStatsPrepared {
    fn evaluate(
        &self,
        model: &Cnn,
        labels: &[usize],
        alphas: &[Alpha],
        with_grad: bool,
    ) -> Result<BatchEvaluation> {
        check_alphas(alphas, self.features.shape()[0], self.providers)?;
        let hook = model
            .config()
            .hook
            .ok_or_else(|| Error::Config("model has no mixing hook".into()))?;
        let mut g = Graph::new();
        let params = model.bind(&mut g, false);
        let feats = g.constant(self.features.clone());
        let a = alpha_matrix(alphas)?;
        let a = if with_grad { g.leaf(a) } else { g.constant(a) };
        let mix = MixInput {
            alpha: a,
            prov_mu: &self.prov_mu,
            prov_sigma: &self.prov_sigma,
            gamma: self.gamma,
        };
        let logits = model.forward_tail(&mut g, feats, &params, hook, Some(&mix))?;
        let loss = g.softmax_cross_entropy(logits, labels, Reduction::Sum)?;
        let losses = g.row_losses(loss)?.to_vec();
        if !with_grad {
            return Ok((losses, None));
        }
        let grads = g.backward(loss, &[a])?;
        let ga = grads.get(a).expect("alpha gradient requested");
        let m1 = self.providers + 1;
        Ok((
            losses,
            Some(ga.data().chunks(m1).map(<[f64]>::to_vec).collect()),
        ))
    }

    fn finish(self: Box<Self>, alphas: &[Alpha]) -> Result<Augmented> {
        check_alphas(alphas, self.features.shape()[0], self.providers)?;
        Ok(Augmented::FeatureMix {
            alpha: alpha_matrix(alphas)?,
            prov_mu: self.prov_mu,
            prov_sigma: self.prov_sigma,
            gamma: self.gamma,
        })
    }
}

/// Mechanisms addressable by name from configuration.
#[derive(Clone, Default)]
pub struct MechanismRegistry {
    entries: BTreeMap<String, Arc<dyn Mechanism>>,
}

impl fmt::Debug for MechanismRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.entries.keys()).finish()
    }
}

impl MechanismRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register(Arc::new(FourierMechanism));
        r.register(Arc::new(FeatStatsMechanism));
        r
    }

    /// Adds or replaces a mechanism under its own name.
    pub fn register(&mut self, mechanism: Arc<dyn Mechanism>) {
        self.entries.insert(mechanism.name().to_string(), mechanism);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Mechanism>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            Error::Config(format!(
                "unknown mechanism `{name}` (registered: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::models::ModelConfig;

    fn setup(seed: u64) -> (Cnn, Tensor, Vec<usize>, Vec<Vec<usize>>) {
        let model = Cnn::new(ModelConfig {
            channels: vec![4, 8],
            classes: 3,
            image_size: 8,
            seed,
            ..Default::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = Tensor::from_fn(&[4, 3, 8, 8], |_| rng.gen_range(0.0..1.0));
        let providers = (0..4)
            .map(|i| (0..4).filter(|&j| j != i).collect())
            .collect();
        (model, batch, vec![0, 1, 2, 1], providers)
    }

    fn random_alphas(rng: &mut ChaCha8Rng, n: usize, len: usize) -> Vec<Alpha> {
        (0..n)
            .map(|_| {
                let w: Vec<f64> = (0..len).map(|_| rng.gen_range(0.05..1.0)).collect();
                let s: f64 = w.iter().sum();
                Alpha::new(w.into_iter().map(|v| v / s).collect()).unwrap()
            })
            .collect()
    }

    #[test]
    fn registry_lookup() {
        let r = MechanismRegistry::with_builtins();
        assert_eq!(r.names(), vec!["featstats", "fourier"]);
        assert_eq!(r.get("fourier").unwrap().name(), "fourier");
        let err = r.get("pixel").err().unwrap().to_string();
        assert!(err.contains("featstats, fourier"), "{err}");
        assert!(MechanismRegistry::new().names().is_empty());
    }

    #[test]
    fn alpha_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mech in [&FourierMechanism as &dyn Mechanism, &FeatStatsMechanism] {
            for gamma in [1.0, 0.7] {
                let (model, batch, labels, providers) = setup(5);
                let prepared = mech.prepare(&model, &batch, &providers, gamma).unwrap();
                let alphas = random_alphas(&mut rng, 4, 4);
                let (_, grads) = prepared.evaluate(&model, &labels, &alphas, true).unwrap();
                let grads = grads.unwrap();
                let h = 1e-6;
                for i in 0..4 {
                    for j in 0..4 {
                        let shifted = |d: f64| {
                            let mut a = alphas.clone();
                            let mut w = a[i].weights().to_vec();
                            w[j] += d;
                            a[i] = Alpha::new_unchecked(w);
                            prepared.evaluate(&model, &labels, &a, false).unwrap().0[i]
                        };
                        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                        let an = grads[i][j];
                        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
                        assert!(
                            rel < 1e-4,
                            "{} sample {i} weight {j}: {an} vs {fd}",
                            mech.name()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn self_weight_reproduces_clean_losses() {
        let (model, batch, labels, providers) = setup(6);
        let mut g = Graph::new();
        let params = model.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let logits = model.forward(&mut g, x, &params, None).unwrap();
        let loss = g
            .softmax_cross_entropy(logits, &labels, Reduction::Sum)
            .unwrap();
        let clean = g.row_losses(loss).unwrap().to_vec();
        let identity = vec![Alpha::identity(3); 4];
        for mech in [&FourierMechanism as &dyn Mechanism, &FeatStatsMechanism] {
            let prepared = mech.prepare(&model, &batch, &providers, 1.0).unwrap();
            let (losses, _) = prepared
                .evaluate(&model, &labels, &identity, false)
                .unwrap();
            for (a, b) in losses.iter().zip(&clean) {
                assert!((a - b).abs() < 1e-6, "{}: {a} vs {b}", mech.name());
            }
        }
        let images = FourierMechanism
            .prepare(&model, &batch, &providers, 1.0)
            .unwrap()
            .finish(&identity)
            .unwrap();
        match images {
            Augmented::Images(x) => assert!(x.max_abs_diff(&batch) < 1e-9),
            other => panic!("expected images, got {other:?}"),
        }
    }

    #[test]
    fn zero_gamma_ignores_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (model, batch, labels, providers) = setup(7);
        for mech in [&FourierMechanism as &dyn Mechanism, &FeatStatsMechanism] {
            let prepared = mech.prepare(&model, &batch, &providers, 0.0).unwrap();
            let a = prepared
                .evaluate(&model, &labels, &random_alphas(&mut rng, 4, 4), false)
                .unwrap()
                .0;
            let b = prepared
                .evaluate(&model, &labels, &random_alphas(&mut rng, 4, 4), false)
                .unwrap()
                .0;
            assert_eq!(a, b, "{}", mech.name());
        }
    }

    #[test]
    fn weight_count_checked() {
        let (model, batch, labels, providers) = setup(8);
        for mech in [&FourierMechanism as &dyn Mechanism, &FeatStatsMechanism] {
            let prepared = mech.prepare(&model, &batch, &providers, 1.0).unwrap();
            assert!(prepared
                .evaluate(&model, &labels, &vec![Alpha::identity(2); 4], false)
                .is_err());
            assert!(prepared
                .evaluate(&model, &labels, &vec![Alpha::identity(3); 3], false)
                .is_err());
        }
    }
}
