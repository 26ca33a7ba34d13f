use super::{Bound, ModelConfig, ParamStore, DOWNSAMPLING_STAGES, GENERATOR};
use crate::substrate::{Graph, NodeId, Tensor};
use crate::{Error, Result};

/// Keeps the input skip finite where pixels sit at exactly 0 or 1.
const SKIP_EPS: f64 = 1e-3;

/// Translated image plus the encoder features at the configured taps.
#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub image: NodeId,
    pub features: Vec<NodeId>,
}

fn check_input(g: &Graph, image: NodeId, multiple: usize) -> Result<()> {
    match g.shape(image) {
        [_, 3, h, w] if h % multiple == 0 && w % multiple == 0 && *h > 0 && *w > 0 => Ok(()),
        s => Err(Error::Invalid(format!(
            "expected N x 3 x H x W with H, W positive multiples of {multiple}, got {s:?}"
        ))),
    }
}

fn encoder_layer(g: &mut Graph, p: &Bound, layer: usize, x: NodeId) -> Result<NodeId> {
    if layer < DOWNSAMPLING_STAGES {
        let w = p.get(&format!("{GENERATOR}enc{layer}.weight"))?;
        let h = g.conv2d(x, w, None, 2, 1)?;
        let h = g.instance_norm(h)?;
        return Ok(g.relu(h)?);
    }
    let r = layer - DOWNSAMPLING_STAGES;
    let w1 = p.get(&format!("{GENERATOR}res{r}.conv1.weight"))?;
    let w2 = p.get(&format!("{GENERATOR}res{r}.conv2.weight"))?;
    let h = g.conv2d(x, w1, None, 1, 1)?;
    let h = g.instance_norm(h)?;
    let h = g.relu(h)?;
    let h = g.conv2d(h, w2, None, 1, 1)?;
    let h = g.instance_norm(h)?;
    Ok(g.add(x, h)?)
}

/// Run the encoder far enough to produce every tap; returns the tap
/// features in tap order.
pub fn encode(g: &mut Graph, p: &Bound, cfg: &ModelConfig, image: NodeId) -> Result<Vec<NodeId>> {
    check_input(g, image, 1 << DOWNSAMPLING_STAGES)?;
    let last = *cfg
        .taps
        .last()
        .ok_or_else(|| Error::Config("no encoder taps".into()))?;
    let mut h = image;
    let mut features = Vec::with_capacity(cfg.taps.len());
    for layer in 0..=last {
        h = encoder_layer(g, p, layer, h)?;
        if cfg.taps.contains(&layer) {
            features.push(h);
        }
    }
    Ok(features)
}

/// `atanh(2x - 1)` built from graph primitives, so the output skip is
/// differentiable in the input as well.
fn logit_skip(g: &mut Graph, image: NodeId) -> Result<NodeId> {
    let x = g.clamp(image, SKIP_EPS, 1.0 - SKIP_EPS)?;
    let u = g.affine(x, 2.0, -1.0)?;
    let num = g.affine(u, 1.0, 1.0)?;
    let den = g.affine(u, -1.0, 1.0)?;
    let ratio = g.div(num, den)?;
    let log = g.log(ratio)?;
    Ok(g.scale(log, 0.5)?)
}

/// Translate an `N x 3 x H x W` batch in `[0, 1]`; H and W must be multiples
/// of 8. The decoder output is added to the input in tanh space, so a
/// decoder that emits zeros reproduces the input.
pub fn generator_forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    image: NodeId,
) -> Result<GeneratorOutput> {
    check_input(g, image, 1 << DOWNSAMPLING_STAGES)?;
    let mut h = image;
    let mut features = Vec::with_capacity(cfg.taps.len());
    for layer in 0..cfg.encoder_layers() {
        h = encoder_layer(g, p, layer, h)?;
        if cfg.taps.contains(&layer) {
            features.push(h);
        }
    }
    for i in 0..DOWNSAMPLING_STAGES {
        let w = p.get(&format!("{GENERATOR}dec{i}.weight"))?;
        if i + 1 < DOWNSAMPLING_STAGES {
            h = g.conv_transpose2d(h, w, None, 2, 1)?;
            h = g.instance_norm(h)?;
            h = g.relu(h)?;
        } else {
            let b = p.get(&format!("{GENERATOR}dec{i}.bias"))?;
            h = g.conv_transpose2d(h, w, Some(b), 2, 1)?;
        }
    }
    let skip = logit_skip(g, image)?;
    let pre = g.add(h, skip)?;
    let t = g.tanh(pre)?;
    let image = g.affine(t, 0.5, 0.5)?;
    Ok(GeneratorOutput { image, features })
}

/// Inference on a single `3 x H x W` image.
pub fn translate_image(store: &ParamStore, cfg: &ModelConfig, image: &Tensor) -> Result<Tensor> {
    let shape = image.shape().to_vec();
    let [c, h, w] = shape[..] else {
        return Err(Error::Invalid(format!(
            "expected a 3 x H x W image, got {shape:?}"
        )));
    };
    let mut g = Graph::new();
    let p = store.bind(&mut g, &[GENERATOR], false)?;
    let batched = image.clone().reshaped(&[1, c, h, w])?;
    let x = g.constant(batched)?;
    let out = generator_forward(&mut g, &p, cfg, x)?;
    Ok(g.value(out.image).clone().reshaped(&shape)?)
}
