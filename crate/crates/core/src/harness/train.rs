use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::config::TrainConfig;
use super::optim::{learning_rate, Adam};
use crate::losses::{
    composite_objective, discriminator_loss, generator_adv_loss, geom_loss, nce_loss, LossParts,
    NceVariant,
};
use crate::metrics::{append_record, point_to_segment};
use crate::models::{
    discriminator_forward, encode, generator_forward, init_params, sample_tap_patches, Bound,
    GeneratorOutput, ParamStore, DISCRIMINATOR, GENERATOR, HEADS,
};
use crate::semantic::ScoreCache;
use crate::substrate::{Graph, NodeId, Tensor};
use crate::synthdata::{DatasetManifest, DomainItem, Split};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.tpsn";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.txt";

/// Independent random streams derived from the run seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    /// Pair order, rainy partner choice and crop offsets.
    Data = 1,
    /// Patch locations for the contrastive loss.
    Patches = 2,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Per-epoch means of every logged quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub iterations: usize,
    pub discriminator: f64,
    pub adversarial: f64,
    pub contrastive: f64,
    /// Zero when the configuration has no geometric term.
    pub geometric: f64,
    pub total: f64,
    pub point_to_segment: f64,
}

/// Both training domains with cached semantic scores.
pub struct TrainData {
    pub clear: Vec<DomainItem>,
    pub rainy: Vec<DomainItem>,
    pub scores: Option<ScoreCache>,
}

impl TrainData {
    /// Build from loaded items; semantic scores are cached only when
    /// `need_scores` is set, in which case every item must carry a map.
    pub fn new(clear: Vec<DomainItem>, rainy: Vec<DomainItem>, need_scores: bool) -> Result<Self> {
        if clear.is_empty() || rainy.is_empty() {
            return Err(Error::Invalid(
                "training needs at least one image per domain".into(),
            ));
        }
        let scores = if need_scores {
            let maps = |items: &[DomainItem]| {
                items
                    .iter()
                    .map(|i| {
                        i.segmap.clone().ok_or_else(|| {
                            Error::Invalid(format!("{} has no segmentation map", i.name))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            };
            Some(ScoreCache::new(maps(&clear)?, maps(&rainy)?))
        } else {
            None
        };
        Ok(Self {
            clear,
            rainy,
            scores,
        })
    }

    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let manifest = DatasetManifest::load(&cfg.manifest)?;
        Self::new(
            manifest.load_split(Split::TrainA)?,
            manifest.load_split(Split::TrainB)?,
            cfg.loss.nce_variant.needs_segmaps(),
        )
    }
}

/// Random `crop x crop` window of a `3 x H x W` image as `1 x 3 x crop x crop`.
pub fn random_crop<R: Rng>(image: &Tensor, crop: usize, rng: &mut R) -> Result<Tensor> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::Invalid(format!(
            "expected 3 x H x W, got {:?}",
            image.shape()
        )));
    };
    if h < crop || w < crop {
        return Err(Error::Invalid(format!(
            "{h}x{w} image is smaller than crop {crop}"
        )));
    }
    let top = rng.gen_range(0..=h - crop);
    let left = rng.gen_range(0..=w - crop);
    let d = image.data();
    let mut out = Vec::with_capacity(3 * crop * crop);
    for c in 0..3 {
        for y in top..top + crop {
            let row = (c * h + y) * w;
            out.extend_from_slice(&d[row + left..row + left + crop]);
        }
    }
    Ok(Tensor::new(vec![1, 3, crop, crop], out)?)
}

/// Generator forward on the clear batch, with generator and head
/// parameters bound as trainable.
pub struct GeneratorPass {
    pub params: Bound,
    pub clear: NodeId,
    pub output: GeneratorOutput,
}

pub fn generator_pass(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &TrainConfig,
    clear: &Tensor,
) -> Result<GeneratorPass> {
    let params = store.bind(g, &[GENERATOR, HEADS], true)?;
    let x = g.constant(clear.clone())?;
    let output = generator_forward(g, &params, &cfg.model, x)?;
    Ok(GeneratorPass {
        params,
        clear: x,
        output,
    })
}

/// Nodes of the generator objective.
pub struct ObjectiveTerms {
    pub total: NodeId,
    pub adversarial: NodeId,
    pub contrastive: NodeId,
    pub geometric: Option<NodeId>,
    pub d_clear: NodeId,
    pub d_rainy: NodeId,
    pub d_generated: NodeId,
}

/// Assemble the generator objective on top of `pass`, using the current
/// discriminator in `store` as a fixed function.
pub fn generator_objective<R: Rng>(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &TrainConfig,
    pass: &GeneratorPass,
    rainy: &Tensor,
    semantic: Option<f64>,
    rng: &mut R,
) -> Result<ObjectiveTerms> {
    let disc = store.bind(g, &[DISCRIMINATOR], false)?;
    let y = g.constant(rainy.clone())?;
    let z = pass.output.image;
    let d_generated = discriminator_forward(g, &disc, z)?;
    let d_clear = discriminator_forward(g, &disc, pass.clear)?;
    let d_rainy = discriminator_forward(g, &disc, y)?;
    let adversarial = generator_adv_loss(g, d_generated)?;

    let features_z = encode(g, &pass.params, &cfg.model, z)?;
    let mut per_tap = Vec::with_capacity(features_z.len());
    for (slot, (&fx, &fz)) in pass.output.features.iter().zip(&features_z).enumerate() {
        let available: usize = g.shape(fx).iter().skip(2).product();
        let ps = sample_tap_patches(
            g,
            &pass.params,
            slot,
            fx,
            fz,
            cfg.num_patches.min(available),
            rng,
        )?;
        per_tap.push(nce_loss(g, &ps, &cfg.loss, semantic)?);
    }
    let mut sum = per_tap[0];
    for &t in &per_tap[1..] {
        sum = g.add(sum, t)?;
    }
    let contrastive = g.scale(sum, 1.0 / per_tap.len() as f64)?;

    let geometric = geom_loss(g, &cfg.loss, d_clear, d_rainy, d_generated)?;
    let parts = LossParts {
        gan: Some(adversarial),
        nce: Some(contrastive),
        geom: geometric,
    };
    let total = composite_objective(g, &parts, &cfg.loss)?;
    Ok(ObjectiveTerms {
        total,
        adversarial,
        contrastive,
        geometric,
        d_clear,
        d_rainy,
        d_generated,
    })
}

/// Gradients of `output` for every bound parameter, keyed by name.
pub fn named_gradients(g: &Graph, params: &Bound, output: NodeId) -> Result<Vec<(String, Tensor)>> {
    let (names, ids): (Vec<&str>, Vec<NodeId>) = params.iter().unzip();
    let grads = g.gradients(output, &ids)?;
    Ok(names.into_iter().map(String::from).zip(grads).collect())
}

/// One discriminator update on a real rainy batch and a generated batch;
/// returns the loss before the update.
pub fn discriminator_step(
    store: &mut ParamStore,
    opt: &mut Adam,
    rainy: &Tensor,
    generated: &Tensor,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, &[DISCRIMINATOR], true)?;
    let y = g.constant(rainy.clone())?;
    let z = g.constant(generated.clone())?;
    let real = discriminator_forward(&mut g, &p, y)?;
    let fake = discriminator_forward(&mut g, &p, z)?;
    let loss = discriminator_loss(&mut g, real, fake)?;
    let value = g.scalar_value(loss)?;
    let grads = named_gradients(&g, &p, loss)?;
    opt.step(store, &grads, lr)?;
    Ok(value)
}

fn finite(term: &'static str, v: f64, epoch: usize, iteration: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss {
            term,
            epoch,
            iteration,
        })
    }
}

#[derive(Default)]
struct Sums {
    discriminator: f64,
    adversarial: f64,
    contrastive: f64,
    geometric: f64,
    total: f64,
    segment: f64,
}

/// Final parameters and the per-epoch log.
pub struct TrainOutcome {
    pub params: ParamStore,
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Train from a fresh initialization, writing the checkpoint, log and
/// config into `cfg.output_dir`. `on_epoch` sees each record as it is
/// written.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let needs_scores = cfg.loss.nce_variant.needs_segmaps();
    if needs_scores && data.scores.is_none() {
        return Err(Error::Invalid(format!(
            "{} needs segmentation maps for both domains",
            cfg.loss.nce_variant.name()
        )));
    }
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log = out.join(LOG_FILE);
    fs::write(&log, b"").map_err(|e| Error::io(&log, e))?;
    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, cfg.render()).map_err(|e| Error::io(&config_path, e))?;

    let mut store = init_params(&cfg.model, cfg.seed)?;
    let mut g_opt = Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut d_opt = Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut data_rng = stream_rng(cfg.seed, Stream::Data);
    let mut patch_rng = stream_rng(cfg.seed, Stream::Patches);
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg, epoch);
        let mut order: Vec<usize> = (0..data.clear.len()).collect();
        order.shuffle(&mut data_rng);
        let mut sums = Sums::default();
        for (iteration, &a) in order.iter().enumerate() {
            let b = data_rng.gen_range(0..data.rainy.len());
            let x = random_crop(&data.clear[a].image, cfg.crop_size, &mut data_rng)?;
            let y = random_crop(&data.rainy[b].image, cfg.crop_size, &mut data_rng)?;
            let semantic = match (cfg.loss.nce_variant, &data.scores) {
                (NceVariant::SenceMpa, Some(s)) => Some(s.get(a, b)?.mpa),
                (NceVariant::SenceMiou, Some(s)) => Some(s.get(a, b)?.miou),
                _ => None,
            };

            let mut g = Graph::new();
            let pass = generator_pass(&mut g, &store, cfg, &x)?;
            let z = g.value(pass.output.image).clone();
            let d_loss = discriminator_step(&mut store, &mut d_opt, &y, &z, lr)?;
            sums.discriminator += finite("discriminator", d_loss, epoch + 1, iteration)?;

            let terms =
                generator_objective(&mut g, &store, cfg, &pass, &y, semantic, &mut patch_rng)?;
            sums.adversarial += finite(
                "adversarial",
                g.scalar_value(terms.adversarial)?,
                epoch + 1,
                iteration,
            )?;
            sums.contrastive += finite(
                "contrastive",
                g.scalar_value(terms.contrastive)?,
                epoch + 1,
                iteration,
            )?;
            if let Some(geo) = terms.geometric {
                sums.geometric += finite("geometric", g.scalar_value(geo)?, epoch + 1, iteration)?;
            }
            sums.total += finite("total", g.scalar_value(terms.total)?, epoch + 1, iteration)?;
            sums.segment += point_to_segment(
                g.value(terms.d_clear).data(),
                g.value(terms.d_rainy).data(),
                g.value(terms.d_generated).data(),
            )?;

            let grads = named_gradients(&g, &pass.params, terms.total)?;
            g_opt.step(&mut store, &grads, lr)?;
        }
        let n = order.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            iterations: order.len(),
            discriminator: sums.discriminator / n,
            adversarial: sums.adversarial / n,
            contrastive: sums.contrastive / n,
            geometric: sums.geometric / n,
            total: sums.total / n,
            point_to_segment: sums.segment / n,
        };
        append_record(&log, &record)?;
        on_epoch(&record);
        records.push(record);
    }

    let checkpoint_path = out.join(CHECKPOINT_FILE);
    checkpoint::save(&checkpoint_path, &store, &cfg.model)?;
    Ok(TrainOutcome {
        params: store,
        epochs: records,
        checkpoint: checkpoint_path,
        log,
    })
}
