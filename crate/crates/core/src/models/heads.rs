use rand::Rng;

use super::{Bound, HEADS};
use crate::losses::PatchSet;
use crate::substrate::{Graph, NodeId};
use crate::{Error, Result};

/// Two-layer perceptron of head `slot` applied to `rows` (`n x C`),
/// followed by row-wise L2 normalization.
pub fn project(g: &mut Graph, p: &Bound, slot: usize, rows: NodeId) -> Result<NodeId> {
    let w1 = p.get(&format!("{HEADS}{slot}.fc1.weight"))?;
    let b1 = p.get(&format!("{HEADS}{slot}.fc1.bias"))?;
    let w2 = p.get(&format!("{HEADS}{slot}.fc2.weight"))?;
    let b2 = p.get(&format!("{HEADS}{slot}.fc2.bias"))?;
    let h = g.matmul(rows, w1)?;
    let h = g.add(h, b1)?;
    let h = g.relu(h)?;
    let h = g.matmul(h, w2)?;
    let h = g.add(h, b2)?;
    Ok(g.l2_normalize(h, 1)?)
}

/// `n` distinct flat locations out of `available`, drawn from `rng`.
pub fn sample_locations<R: Rng>(available: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n > available {
        return Err(Error::TooManyPatches {
            requested: n,
            available,
        });
    }
    Ok(rand::seq::index::sample(rng, available, n).into_vec())
}

/// `1 x C x H x W` feature map as `HW x C` rows.
fn feature_rows(g: &mut Graph, features: NodeId) -> Result<NodeId> {
    let &[1, c, h, w] = g.shape(features) else {
        return Err(Error::Invalid(format!(
            "patch sampling expects a single 1 x C x H x W feature map, got {:?}",
            g.shape(features)
        )));
    };
    let flat = g.reshape(features, &[c, h * w])?;
    Ok(g.transpose(flat)?)
}

/// Embed the same `locations` of the clear features (positives) and the
/// generated features (anchors) through head `slot`.
pub(super) fn embed_at(
    g: &mut Graph,
    p: &Bound,
    slot: usize,
    clear: NodeId,
    generated: NodeId,
    locations: &[usize],
) -> Result<PatchSet> {
    let rows_x = feature_rows(g, clear)?;
    let rows_z = feature_rows(g, generated)?;
    let picked_x = g.gather(rows_x, 0, locations)?;
    let picked_z = g.gather(rows_z, 0, locations)?;
    let positives = project(g, p, slot, picked_x)?;
    let anchors = project(g, p, slot, picked_z)?;
    PatchSet::new(g, anchors, positives)
}

/// Patch set for one tap: `n` locations without replacement, shared by
/// both feature maps so that `anchors[i]` and `positives[i]` align.
pub fn sample_tap_patches<R: Rng>(
    g: &mut Graph,
    p: &Bound,
    slot: usize,
    clear: NodeId,
    generated: NodeId,
    n: usize,
    rng: &mut R,
) -> Result<PatchSet> {
    if g.shape(clear) != g.shape(generated) {
        return Err(Error::Invalid(format!(
            "feature maps are not aligned: {:?} vs {:?}",
            g.shape(clear),
            g.shape(generated)
        )));
    }
    let available = g.shape(clear).iter().skip(2).product();
    let locations = sample_locations(available, n, rng)?;
    embed_at(g, p, slot, clear, generated, &locations)
}

/// One patch set per tap, each with exactly `n` locations.
pub fn sample_patches<R: Rng>(
    g: &mut Graph,
    p: &Bound,
    clear: &[NodeId],
    generated: &[NodeId],
    n: usize,
    rng: &mut R,
) -> Result<Vec<PatchSet>> {
    if clear.len() != generated.len() {
        return Err(Error::Invalid(format!(
            "{} clear taps vs {} generated taps",
            clear.len(),
            generated.len()
        )));
    }
    clear
        .iter()
        .zip(generated)
        .enumerate()
        .map(|(slot, (&x, &z))| sample_tap_patches(g, p, slot, x, z, n, rng))
        .collect()
}
