use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{TrainConfig, Variant};
use super::train::{train, EpochRecord, TrainData};
use crate::metrics::{domain_report, DomainReport, MapTriple};
use crate::models::{discriminator_probabilities, translate_image, ModelConfig, ParamStore};
use crate::substrate::Tensor;
use crate::synthdata::{load_image_folder, save_image, DatasetManifest, Split};
use crate::{Error, Result};

pub const REPORT_FILE: &str = "report.json";
pub const ABLATION_FILE: &str = "ablation.tsv";

/// Replicate edge pixels so both sides become multiples of `multiple`.
pub fn pad_to_multiple(image: &Tensor, multiple: usize) -> Result<Tensor> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::Invalid(format!(
            "expected 3 x H x W, got {:?}",
            image.shape()
        )));
    };
    if h == 0 || w == 0 {
        return Err(Error::Invalid("empty image".into()));
    }
    let (ph, pw) = (
        h.div_ceil(multiple) * multiple,
        w.div_ceil(multiple) * multiple,
    );
    if (ph, pw) == (h, w) {
        return Ok(image.clone());
    }
    let d = image.data();
    let mut out = Vec::with_capacity(3 * ph * pw);
    for c in 0..3 {
        for y in 0..ph {
            let sy = y.min(h - 1);
            for x in 0..pw {
                out.push(d[(c * h + sy) * w + x.min(w - 1)]);
            }
        }
    }
    Ok(Tensor::new(vec![3, ph, pw], out)?)
}

/// Top-left `h x w` window of a `3 x H x W` image.
fn crop_to(image: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let &[3, ih, iw] = image.shape() else {
        return Err(Error::Invalid(format!(
            "expected 3 x H x W, got {:?}",
            image.shape()
        )));
    };
    if (ih, iw) == (h, w) {
        return Ok(image.clone());
    }
    let d = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            let row = (c * ih + y) * iw;
            out.extend_from_slice(&d[row..row + w]);
        }
    }
    Ok(Tensor::new(vec![3, h, w], out)?)
}

/// Translate at native size: pad to a multiple of 8, run the generator,
/// crop back.
pub fn translate_native(store: &ParamStore, cfg: &ModelConfig, image: &Tensor) -> Result<Tensor> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::Invalid(format!(
            "expected 3 x H x W, got {:?}",
            image.shape()
        )));
    };
    let padded = pad_to_multiple(image, 8)?;
    crop_to(&translate_image(store, cfg, &padded)?, h, w)
}

/// Translate every PNG in `input` into `output` under the same file name;
/// returns the number of images written.
pub fn translate_folder(
    store: &ParamStore,
    cfg: &ModelConfig,
    input: &Path,
    output: &Path,
) -> Result<usize> {
    let items = load_image_folder(input, false)?;
    fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    for item in &items {
        let out = translate_native(store, cfg, &item.image)?;
        save_image(&output.join(&item.name), &out)?;
    }
    Ok(items.len())
}

/// Translate test split A and compare it against test split B.
pub fn evaluate(
    store: &ParamStore,
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
) -> Result<DomainReport> {
    let clear: Vec<Tensor> = manifest
        .load_split(Split::TestA)?
        .into_iter()
        .map(|i| i.image)
        .collect();
    let rainy: Vec<Tensor> = manifest
        .load_split(Split::TestB)?
        .into_iter()
        .map(|i| i.image)
        .collect();
    if clear.is_empty() || rainy.is_empty() {
        return Err(Error::Invalid(
            "evaluation needs non-empty testA and testB splits".into(),
        ));
    }
    let generated = clear
        .iter()
        .map(|x| translate_native(store, &cfg.model, x))
        .collect::<Result<Vec<_>>>()?;
    let mut maps = Vec::new();
    for i in 0..cfg.eval_triples.min(clear.len()) {
        let map = |t: &Tensor| -> Result<Vec<f64>> {
            Ok(discriminator_probabilities(store, &pad_to_multiple(t, 16)?)?.into_data())
        };
        maps.push(MapTriple {
            clear: map(&clear[i])?,
            rainy: map(&rainy[i % rainy.len()])?,
            generated: map(&generated[i])?,
        });
    }
    domain_report(&clear, &rainy, &generated, &maps)
}

pub fn write_report(path: &Path, report: &DomainReport) -> Result<()> {
    let text = report.to_json()? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<DomainReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DomainReport::from_json(text.trim())
}

/// One variant's result in an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub geom: String,
    pub nce: String,
    pub report: DomainReport,
    /// Geometric term of every logged epoch.
    pub geometric_log: Vec<f64>,
    pub final_total: f64,
}

/// Train and evaluate each variant from the same seed and initialization,
/// writing one table row per variant to `base.output_dir/ablation.tsv`.
pub fn ablate(
    base: &TrainConfig,
    variants: &[Variant],
    on_epoch: &mut dyn FnMut(Variant, &EpochRecord),
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::Config("no variants to ablate".into()));
    }
    let manifest = DatasetManifest::load(&base.manifest)?;
    let clear = manifest.load_split(Split::TrainA)?;
    let rainy = manifest.load_split(Split::TrainB)?;
    let data = TrainData::new(
        clear,
        rainy,
        variants.iter().any(|v| v.losses().1.needs_segmaps()),
    )?;
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut cfg = base.clone();
        cfg.apply_variant(v);
        cfg.output_dir = base.output_dir.join(v.name());
        let outcome = train(&cfg, &data, &mut |r| on_epoch(v, r))?;
        let report = evaluate(&outcome.params, &cfg, &manifest)?;
        write_report(&cfg.output_dir.join(REPORT_FILE), &report)?;
        let (geom, nce) = v.losses();
        rows.push(AblationRow {
            variant: v.name().into(),
            geom: geom.name().into(),
            nce: nce.name().into(),
            report,
            geometric_log: outcome.epochs.iter().map(|e| e.geometric).collect(),
            final_total: outcome.epochs.last().map_or(0.0, |e| e.total),
        });
    }
    let path = base.output_dir.join(ABLATION_FILE);
    fs::write(&path, render_table(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

pub const TABLE_HEADER: &str = "variant\tgeom\tnce\tmmd2\tenergy_distance\tbaseline_mmd2\tbaseline_energy_distance\tmean_segment_distance\tfinal_total";

pub fn render_table(rows: &[AblationRow]) -> String {
    let mut s = String::from(TABLE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.variant,
            r.geom,
            r.nce,
            r.report.mmd2,
            r.report.energy_distance,
            r.report.baseline_mmd2,
            r.report.baseline_energy_distance,
            r.report.mean_segment_distance,
            r.final_total
        );
    }
    s
}
