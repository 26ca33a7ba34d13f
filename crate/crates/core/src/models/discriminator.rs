use super::{Bound, ParamStore, DISCRIMINATOR};
use crate::substrate::{Graph, NodeId, Tensor};
use crate::{Error, Result};

const SLOPE: f64 = 0.2;
const LAYERS: usize = 4;

/// Patch discriminator on an `N x 3 x H x W` batch (H, W multiples of 16).
/// Returns an `N x 1 x H/16 x W/16` map of probabilities.
pub fn discriminator_forward(g: &mut Graph, p: &Bound, image: NodeId) -> Result<NodeId> {
    match g.shape(image) {
        [_, 3, h, w] if *h > 0 && *w > 0 && h % 16 == 0 && w % 16 == 0 => {}
        s => {
            return Err(Error::Invalid(format!(
                "discriminator expects N x 3 x H x W with H, W positive multiples of 16, got {s:?}"
            )))
        }
    }
    let mut h = image;
    for i in 0..LAYERS {
        let w = p.get(&format!("{DISCRIMINATOR}l{i}.weight"))?;
        let b = if i == 0 || i == LAYERS - 1 {
            Some(p.get(&format!("{DISCRIMINATOR}l{i}.bias"))?)
        } else {
            None
        };
        h = g.conv2d(h, w, b, 2, 1)?;
        if i == LAYERS - 1 {
            break;
        }
        if i > 0 {
            h = g.instance_norm(h)?;
        }
        h = g.leaky_relu(h, SLOPE)?;
    }
    Ok(g.sigmoid(h)?)
}

/// Probability map for a single `3 x H x W` image, without gradients.
pub fn discriminator_probabilities(store: &ParamStore, image: &Tensor) -> Result<Tensor> {
    let shape = image.shape().to_vec();
    let [c, h, w] = shape[..] else {
        return Err(Error::Invalid(format!(
            "expected a 3 x H x W image, got {shape:?}"
        )));
    };
    let mut g = Graph::new();
    let p = store.bind(&mut g, &[DISCRIMINATOR], false)?;
    let x = g.constant(image.clone().reshaped(&[1, c, h, w])?)?;
    let out = discriminator_forward(&mut g, &p, x)?;
    Ok(g.value(out).clone())
}
