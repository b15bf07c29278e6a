//! Small convolutional classifiers.
//!
//! Each block is `conv3x3(pad 1) + bias -> relu -> maxpool 2x2`, followed by a
//! dense head. There is no batch normalization, so every sample's logits
//! depend on that sample alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{checksum, Tensor};

const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    pub classes: usize,
    pub in_channels: usize,
    pub image_size: usize,
    /// Number of blocks run before feature statistics are mixed. `Some(1)`
    /// mixes right after the first block.
    pub hook: Option<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128],
            classes: 10,
            in_channels: 3,
            image_size: 32,
            hook: Some(1),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(
                "need at least one non-empty conv block".into(),
            ));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need >= 2 classes, got {}",
                self.classes
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        let shrink = 1usize << self.channels.len();
        if self.image_size < shrink || !self.image_size.is_multiple_of(shrink) {
            return Err(Error::Config(format!(
                "image size {} cannot be pooled {} times",
                self.image_size,
                self.channels.len()
            )));
        }
        if let Some(h) = self.hook {
            if h == 0 || h >= self.channels.len() {
                return Err(Error::Config(format!(
                    "hook must satisfy 1 <= hook < {} blocks, got {h}",
                    self.channels.len()
                )));
            }
        }
        Ok(())
    }

    /// Flattened width entering the dense head.
    pub fn head_inputs(&self) -> usize {
        let side = self.image_size >> self.channels.len();
        self.channels.last().copied().unwrap_or(0) * side * side
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut c_in = self.in_channels;
        for &c in &self.channels {
            total += c * c_in * KERNEL * KERNEL + c;
            c_in = c;
        }
        total + self.head_inputs() * self.classes + self.classes
    }
}

/// Feature-statistics mixing inserted at the configured hook.
pub struct MixInput<'a> {
    /// `[n, m+1]` mixing weights.
    pub alpha: NodeId,
    /// `[n, m, c]` provider means and standard deviations.
    pub prov_mu: &'a Tensor,
    pub prov_sigma: &'a Tensor,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cnn {
    config: ModelConfig,
    params: Vec<Tensor>,
}

impl Cnn {
    /// He-style fan-in uniform kernels, zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::with_capacity(2 * config.channels.len() + 2);
        let mut c_in = config.in_channels;
        for &c in &config.channels {
            let fan_in = c_in * KERNEL * KERNEL;
            params.push(he_uniform(&mut rng, &[c, c_in, KERNEL, KERNEL], fan_in));
            params.push(Tensor::zeros(&[c]));
            c_in = c;
        }
        let d = config.head_inputs();
        params.push(he_uniform(&mut rng, &[d, config.classes], d));
        params.push(Tensor::zeros(&[config.classes]));
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        let reference = Self::new(config.clone())?;
        if params.len() != reference.params.len()
            || params
                .iter()
                .zip(&reference.params)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Config(
                "parameter shapes do not match the model config".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.params.len());
        for b in 0..self.config.channels.len() {
            names.push(format!("block{b}.kernel"));
            names.push(format!("block{b}.bias"));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn checksum(&self) -> String {
        checksum(&self.params)
    }

    /// Inserts the parameters as graph leaves (or constants when frozen).
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    graph.leaf(p.clone())
                } else {
                    graph.constant(p.clone())
                }
            })
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4
            || shape[1] != c.in_channels
            || shape[2] != c.image_size
            || shape[3] != c.image_size
        {
            return Err(Error::shape(
                "forward",
                format!(
                    "expected [n, {}, {s}, {s}], got {shape:?}",
                    c.in_channels,
                    s = c.image_size
                ),
            ));
        }
        Ok(())
    }

    fn block(&self, graph: &mut Graph, x: NodeId, params: &[NodeId], b: usize) -> Result<NodeId> {
        let y = graph.conv2d(x, params[2 * b], 1, 1)?;
        let y = graph.channel_bias(y, params[2 * b + 1])?;
        let y = graph.relu(y)?;
        graph.maxpool2d(y, 2, 2)
    }

    /// Runs the first `blocks` conv blocks.
    pub fn forward_features(
        &self,
        graph: &mut Graph,
        input: NodeId,
        params: &[NodeId],
        blocks: usize,
    ) -> Result<NodeId> {
        self.check_input(graph.value(input)?.shape())?;
        let mut x = input;
        for b in 0..blocks.min(self.config.channels.len()) {
            x = self.block(graph, x, params, b)?;
        }
        Ok(x)
    }

    /// Logits `[n, classes]`; mixes feature statistics at the hook when `mix` is set.
    pub fn forward(
        &self,
        graph: &mut Graph,
        input: NodeId,
        params: &[NodeId],
        mix: Option<&MixInput>,
    ) -> Result<NodeId> {
        self.check_input(graph.value(input)?.shape())?;
        let hook = match (mix, self.config.hook) {
            (Some(_), None) => {
                return Err(Error::Config(
                    "feature mixing requested but no hook is configured".into(),
                ))
            }
            (_, h) => h,
        };
        match (mix, hook) {
            (Some(m), Some(h)) => {
                let x = self.forward_features(graph, input, params, h)?;
                self.forward_tail(graph, x, params, h, Some(m))
            }
            _ => self.forward_tail(graph, input, params, 0, None),
        }
    }

    /// Continues from the output of the first `start` blocks, mixing it first
    /// when `mix` is set.
    pub fn forward_tail(
        &self,
        graph: &mut Graph,
        features: NodeId,
        params: &[NodeId],
        start: usize,
        mix: Option<&MixInput>,
    ) -> Result<NodeId> {
        let mut x = features;
        if let Some(m) = mix {
            x = graph.style_mix(x, m.alpha, m.prov_mu, m.prov_sigma, m.gamma)?;
        }
        for b in start..self.config.channels.len() {
            x = self.block(graph, x, params, b)?;
        }
        let x = graph.flatten(x)?;
        let n = self.params.len();
        graph.dense(x, params[n - 2], params[n - 1])
    }

    /// Gradient-free logits for a batch.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let out = self.forward(&mut g, x, &params, None)?;
        Ok(g.value(out)?.clone())
    }

    /// Feature maps right where the hook mixes statistics.
    pub fn hook_features(&self, batch: &Tensor) -> Result<Tensor> {
        let hook = self
            .config
            .hook
            .ok_or_else(|| Error::Config("model has no mixing hook".into()))?;
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let out = self.forward_features(&mut g, x, &params, hook)?;
        Ok(g.value(out)?.clone())
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Reduction;

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: vec![3, 4],
            classes: 5,
            in_channels: 3,
            image_size: 8,
            hook: Some(1),
            seed: 9,
        }
    }

    fn batch(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 3, 8, 8], |_| rng.gen::<f64>())
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = Cnn::new(tiny()).unwrap();
        let b = Cnn::new(tiny()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = Cnn::new(ModelConfig { seed: 10, ..tiny() }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn param_count_matches_formula() {
        let m = Cnn::new(ModelConfig::default()).unwrap();
        // 3->32, 32->64, 64->128 kernels with biases, then 128*4*4 -> 10.
        let expected =
            (32 * 3 * 9 + 32) + (64 * 32 * 9 + 64) + (128 * 64 * 9 + 128) + 2048 * 10 + 10;
        assert_eq!(m.num_params(), expected);
        assert_eq!(m.config().param_count(), expected);
        let t = Cnn::new(tiny()).unwrap();
        assert_eq!(t.num_params(), t.config().param_count());
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            ModelConfig {
                channels: vec![],
                ..tiny()
            },
            ModelConfig {
                classes: 1,
                ..tiny()
            },
            ModelConfig {
                hook: Some(2),
                ..tiny()
            },
            ModelConfig {
                hook: Some(0),
                ..tiny()
            },
            ModelConfig {
                image_size: 6,
                ..tiny()
            },
        ] {
            assert!(Cnn::new(bad).is_err());
        }
    }

    #[test]
    fn zero_input_zero_head_gives_zero_logits() {
        let mut m = Cnn::new(tiny()).unwrap();
        let n = m.params().len();
        m.params_mut()[n - 2] = Tensor::zeros(m.params()[n - 2].shape());
        let out = m.logits(&Tensor::zeros(&[2, 3, 8, 8])).unwrap();
        assert_eq!(out.shape(), &[2, 5]);
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn logits_shape_and_shape_errors() {
        let m = Cnn::new(tiny()).unwrap();
        assert_eq!(m.logits(&batch(7, 1)).unwrap().shape(), &[7, 5]);
        assert!(m.logits(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
        assert!(m.logits(&Tensor::zeros(&[1, 1, 8, 8])).is_err());
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let m = Cnn::new(tiny()).unwrap();
        let x = batch(5, 2);
        let perm = [3, 0, 4, 1, 2];
        let a = m.logits(&x).unwrap();
        let b = m.logits(&x.gather_outer(&perm)).unwrap();
        assert!(a.gather_outer(&perm).bit_eq(&b));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = Cnn::new(tiny()).unwrap();
        let x = batch(4, 3);
        assert!(m.logits(&x).unwrap().bit_eq(&m.logits(&x).unwrap()));
    }

    fn mixed_logits(m: &Cnn, x: &Tensor, alpha: &Tensor, gamma: f64, provider_seed: u64) -> Tensor {
        let n = x.shape()[0];
        let feats = m.hook_features(&batch(n, provider_seed)).unwrap();
        let stats = crate::featstyle::batch_stats(&feats).unwrap();
        let providers: Vec<Vec<usize>> = (0..n).map(|i| vec![(i + 1) % n, (i + 2) % n]).collect();
        let (pm, ps) = crate::featstyle::gather_provider_stats(&stats, &providers).unwrap();
        let mut g = Graph::new();
        let params = m.bind(&mut g, false);
        let xin = g.constant(x.clone());
        let a = g.constant(alpha.clone());
        let out = m
            .forward(
                &mut g,
                xin,
                &params,
                Some(&MixInput {
                    alpha: a,
                    prov_mu: &pm,
                    prov_sigma: &ps,
                    gamma,
                }),
            )
            .unwrap();
        g.value(out).unwrap().clone()
    }

    #[test]
    fn self_weight_mix_matches_plain_forward() {
        let m = Cnn::new(tiny()).unwrap();
        let x = batch(3, 4);
        let e0 = Tensor::from_fn(&[3, 3], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let mixed = mixed_logits(&m, &x, &e0, 1.0, 5);
        assert!(mixed.max_abs_diff(&m.logits(&x).unwrap()) < 1e-5);
        let any = Tensor::from_fn(&[3, 3], |_| 1.0 / 3.0);
        let off = mixed_logits(&m, &x, &any, 0.0, 5);
        assert!(off.bit_eq(&m.logits(&x).unwrap()));
    }

    #[test]
    fn mix_without_hook_rejected() {
        let m = Cnn::new(ModelConfig {
            hook: None,
            ..tiny()
        })
        .unwrap();
        let mut g = Graph::new();
        let params = m.bind(&mut g, false);
        let x = g.constant(batch(1, 6));
        let a = g.constant(Tensor::full(&[1, 2], 0.5));
        let pm = Tensor::zeros(&[1, 1, 3]);
        let r = m.forward(
            &mut g,
            x,
            &params,
            Some(&MixInput {
                alpha: a,
                prov_mu: &pm,
                prov_sigma: &pm,
                gamma: 1.0,
            }),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn alpha_gradient_through_hook_matches_finite_differences() {
        let m = Cnn::new(tiny()).unwrap();
        let x = batch(2, 7);
        let labels = [1usize, 3];
        let feats = m.hook_features(&batch(2, 8)).unwrap();
        let stats = crate::featstyle::batch_stats(&feats).unwrap();
        let providers = vec![vec![1, 0], vec![0, 1]];
        let (pm, ps) = crate::featstyle::gather_provider_stats(&stats, &providers).unwrap();
        let loss_at = |alpha: &Tensor| -> (f64, Option<Tensor>) {
            let mut g = Graph::new();
            let params = m.bind(&mut g, false);
            let xin = g.constant(x.clone());
            let a = g.leaf(alpha.clone());
            let logits = m
                .forward(
                    &mut g,
                    xin,
                    &params,
                    Some(&MixInput {
                        alpha: a,
                        prov_mu: &pm,
                        prov_sigma: &ps,
                        gamma: 0.8,
                    }),
                )
                .unwrap();
            let loss = g
                .softmax_cross_entropy(logits, &labels, Reduction::Sum)
                .unwrap();
            let grads = g.backward(loss, &[a]).unwrap();
            (g.value(loss).unwrap().item(), grads.get(a).cloned())
        };
        let alpha = Tensor::new(vec![2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap();
        let (_, grad) = loss_at(&alpha);
        let grad = grad.unwrap();
        let h = 1e-6;
        for k in 0..alpha.len() {
            let mut plus = alpha.clone();
            plus.data_mut()[k] += h;
            let mut minus = alpha.clone();
            minus.data_mut()[k] -= h;
            let fd = (loss_at(&plus).0 - loss_at(&minus).0) / (2.0 * h);
            let an = grad.data()[k];
            assert!(
                (fd - an).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-3),
                "{k}: {an} vs {fd}"
            );
        }
    }
}
