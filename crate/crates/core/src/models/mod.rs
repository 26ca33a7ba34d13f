//! Trainable networks: a residual encoder/decoder generator, a strided patch
//! discriminator, and per-tap projection heads for patch embeddings.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names
//! (`generator.enc0.weight`, `discriminator.l3.bias`, `heads.2.fc1.weight`).
//! A forward pass first [binds](ParamStore::bind) the tensors it needs into a
//! [`Graph`], then composes graph operations.

mod discriminator;
mod generator;
mod heads;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::substrate::{Graph, NodeId, Tensor};
use crate::{Error, Result};

pub use discriminator::{discriminator_forward, discriminator_probabilities};
pub use generator::{encode, generator_forward, translate_image, GeneratorOutput};
pub use heads::{project, sample_locations, sample_patches, sample_tap_patches};

pub const GENERATOR: &str = "generator.";
pub const DISCRIMINATOR: &str = "discriminator.";
pub const HEADS: &str = "heads.";

/// Downsampling stages in the generator encoder (and upsampling stages in
/// the decoder).
pub const DOWNSAMPLING_STAGES: usize = 3;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channels after the first encoder stage; later stages double it.
    pub base_channels: usize,
    pub res_blocks: usize,
    /// Width of the projection heads and of the patch embeddings.
    pub embed_dim: usize,
    /// Encoder layer indices whose outputs feed the contrastive loss.
    /// Layers `0..3` are the downsampling stages, `3..3+res_blocks` the
    /// residual blocks.
    pub taps: Vec<usize>,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            res_blocks: 4,
            embed_dim: 64,
            taps: vec![0, 1, 2, 4],
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.embed_dim == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.taps.is_empty() {
            return Err(Error::Config("at least one encoder tap is required".into()));
        }
        let layers = self.encoder_layers();
        if let Some(&bad) = self.taps.iter().find(|&&t| t >= layers) {
            return Err(Error::Config(format!(
                "tap {bad} out of range for an encoder with {layers} layers"
            )));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("taps must be strictly increasing".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!(
                "init_std must be positive, got {}",
                self.init_std
            )));
        }
        Ok(())
    }

    pub fn encoder_layers(&self) -> usize {
        DOWNSAMPLING_STAGES + self.res_blocks
    }

    /// Channel count of encoder layer `layer`'s output.
    pub fn encoder_channels(&self, layer: usize) -> usize {
        self.base_channels << layer.min(DOWNSAMPLING_STAGES - 1)
    }

    /// Stable textual form used for checkpoint digests.
    pub fn canonical(&self) -> String {
        let taps: Vec<String> = self.taps.iter().map(usize::to_string).collect();
        format!(
            "base_channels={};res_blocks={};embed_dim={};taps={}",
            self.base_channels,
            self.res_blocks,
            self.embed_dim,
            taps.join(",")
        )
    }

    /// Every parameter with its shape, in initialization order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let b = self.base_channels;
        let top = 4 * b;
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));

        let enc = [3, b, 2 * b, top];
        for i in 0..DOWNSAMPLING_STAGES {
            push(
                format!("{GENERATOR}enc{i}.weight"),
                vec![enc[i + 1], enc[i], 3, 3],
            );
        }
        for r in 0..self.res_blocks {
            for conv in ["conv1", "conv2"] {
                push(
                    format!("{GENERATOR}res{r}.{conv}.weight"),
                    vec![top, top, 3, 3],
                );
            }
        }
        let dec = [top, 2 * b, b, 3];
        for i in 0..DOWNSAMPLING_STAGES {
            push(
                format!("{GENERATOR}dec{i}.weight"),
                vec![dec[i], dec[i + 1], 4, 4],
            );
        }
        push(
            format!("{GENERATOR}dec{}.bias", DOWNSAMPLING_STAGES - 1),
            vec![3],
        );

        let disc = [3, b, 2 * b, top, 1];
        for i in 0..4 {
            push(
                format!("{DISCRIMINATOR}l{i}.weight"),
                vec![disc[i + 1], disc[i], 4, 4],
            );
            if i == 0 || i == 3 {
                push(format!("{DISCRIMINATOR}l{i}.bias"), vec![disc[i + 1]]);
            }
        }

        let d = self.embed_dim;
        for (slot, &tap) in self.taps.iter().enumerate() {
            let c = self.encoder_channels(tap);
            push(format!("{HEADS}{slot}.fc1.weight"), vec![c, d]);
            push(format!("{HEADS}{slot}.fc1.bias"), vec![d]);
            push(format!("{HEADS}{slot}.fc2.weight"), vec![d, d]);
            push(format!("{HEADS}{slot}.fc2.bias"), vec![d]);
        }
        out
    }
}

/// Named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    /// Entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count, optionally restricted to names with `prefix`.
    pub fn num_scalars(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Check that names and shapes agree exactly with `cfg`'s layout.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = cfg.layout();
        if layout.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.len()
            )));
        }
        for (name, shape) in layout {
            match self.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "{name}: expected shape {shape:?}, found {:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        }
        Ok(())
    }

    /// Add every tensor whose name starts with one of `prefixes` to `g`.
    pub fn bind(&self, g: &mut Graph, prefixes: &[&str], trainable: bool) -> Result<Bound> {
        let mut ids = BTreeMap::new();
        for (name, value) in self.iter() {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                ids.insert(name.to_string(), g.leaf(value.clone(), trainable)?);
            }
        }
        Ok(Bound { ids })
    }
}

/// Parameter names mapped to their nodes in one graph.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Merge another binding (from the same graph) into this one.
    pub fn extend(&mut self, other: Bound) {
        self.ids.extend(other.ids);
    }
}

/// Fresh parameters: weights from `N(0, init_std)`, biases zero.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut store = ParamStore::new();
    for (name, shape) in cfg.layout() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".bias") {
            vec![0.0; n]
        } else {
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}
