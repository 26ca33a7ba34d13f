//! Segmentation maps and the mPA / mIoU similarity scores.
//!
//! mPA is asymmetric: per-class accuracy is averaged over the classes
//! present in the reference (clear) map only.

use std::collections::HashMap;
use std::path::Path;
use std::sync::RwLock;

use image::GrayImage;

use crate::{Error, Result};

/// Per-pixel class indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMap {
    height: usize,
    width: usize,
    num_classes: usize,
    classes: Vec<u8>,
}

impl SegMap {
    pub fn new(height: usize, width: usize, num_classes: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::Invalid(format!(
                "segmap {height}x{width} needs {} indices, got {}",
                height * width,
                classes.len()
            )));
        }
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::Invalid(format!(
                "unsupported class count {num_classes}"
            )));
        }
        if let Some(&index) = classes.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::ClassOutOfRange { index, num_classes });
        }
        Ok(Self {
            height,
            width,
            num_classes,
            classes,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    /// Nearest-neighbour resize; class indices are never interpolated.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let mut classes = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = (y * self.height) / height.max(1);
            for x in 0..width {
                let sx = (x * self.width) / width.max(1);
                classes.push(self.get(sy, sx));
            }
        }
        Self {
            height,
            width,
            num_classes: self.num_classes,
            classes,
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Invalid(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let classes = (top..top + height)
            .flat_map(|y| {
                self.classes[y * self.width + left..y * self.width + left + width]
                    .iter()
                    .copied()
            })
            .collect();
        Ok(Self {
            height,
            width,
            num_classes: self.num_classes,
            classes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, self.classes.clone())
            .expect("buffer sized by construction");
        img.save(path).map_err(|e| Error::image(path, e))
    }
}

/// Read a single-channel 8-bit raster whose pixel values are class indices.
pub fn load_segmap(path: &Path, num_classes: usize) -> Result<SegMap> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Invalid(format!(
                "{}: expected 8-bit single-channel segmap, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    SegMap::new(h as usize, w as usize, num_classes, gray.into_raw())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SemanticScore {
    pub mpa: f64,
    pub miou: f64,
}

fn check_pair(sx: &SegMap, sy: &SegMap) -> Result<()> {
    if sx.height != sy.height || sx.width != sy.width {
        return Err(Error::SegMapSize(sx.height, sx.width, sy.height, sy.width));
    }
    if sx.num_classes != sy.num_classes {
        return Err(Error::ClassCount(sx.num_classes, sy.num_classes));
    }
    if sx.classes.is_empty() {
        return Err(Error::EmptySegMap);
    }
    Ok(())
}

/// Confusion counts: `(hits[c], ref_count[c], other_count[c])`.
fn class_counts(sx: &SegMap, sy: &SegMap) -> (Vec<u64>, Vec<u64>, Vec<u64>) {
    let c = sx.num_classes;
    let (mut hits, mut in_x, mut in_y) = (vec![0u64; c], vec![0u64; c], vec![0u64; c]);
    for (&a, &b) in sx.classes.iter().zip(&sy.classes) {
        in_x[a as usize] += 1;
        in_y[b as usize] += 1;
        if a == b {
            hits[a as usize] += 1;
        }
    }
    (hits, in_x, in_y)
}

/// Mean pixel accuracy of `sy` against the reference `sx`.
pub fn mpa(sx: &SegMap, sy: &SegMap) -> Result<f64> {
    check_pair(sx, sy)?;
    let (hits, in_x, _) = class_counts(sx, sy);
    let (mut total, mut present) = (0.0, 0usize);
    for (h, n) in hits.iter().zip(&in_x) {
        if *n > 0 {
            total += *h as f64 / *n as f64;
            present += 1;
        }
    }
    Ok(total / present as f64)
}

/// Mean intersection-over-union over classes present in either map.
pub fn miou(sx: &SegMap, sy: &SegMap) -> Result<f64> {
    check_pair(sx, sy)?;
    let (hits, in_x, in_y) = class_counts(sx, sy);
    let (mut total, mut present) = (0.0, 0usize);
    for c in 0..sx.num_classes {
        let union = in_x[c] + in_y[c] - hits[c];
        if union > 0 {
            total += hits[c] as f64 / union as f64;
            present += 1;
        }
    }
    Ok(total / present as f64)
}

pub fn score(sx: &SegMap, sy: &SegMap) -> Result<SemanticScore> {
    Ok(SemanticScore {
        mpa: mpa(sx, sy)?,
        miou: miou(sx, sy)?,
    })
}

/// Lazily filled table of scores keyed by (clear id, rainy id).
#[derive(Debug)]
pub struct ScoreCache {
    clear: Vec<SegMap>,
    rainy: Vec<SegMap>,
    scores: RwLock<HashMap<(usize, usize), SemanticScore>>,
}

impl ScoreCache {
    pub fn new(clear: Vec<SegMap>, rainy: Vec<SegMap>) -> Self {
        Self {
            clear,
            rainy,
            scores: RwLock::new(HashMap::new()),
        }
    }

    pub fn get(&self, clear_id: usize, rainy_id: usize) -> Result<SemanticScore> {
        let key = (clear_id, rainy_id);
        if let Some(s) = self.scores.read().expect("score cache poisoned").get(&key) {
            return Ok(*s);
        }
        let sx = self
            .clear
            .get(clear_id)
            .ok_or(Error::MissingPair(clear_id, rainy_id))?;
        let sy = self
            .rainy
            .get(rainy_id)
            .ok_or(Error::MissingPair(clear_id, rainy_id))?;
        let s = score(sx, sy)?;
        self.scores
            .write()
            .expect("score cache poisoned")
            .insert(key, s);
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.scores.read().expect("score cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;
    use proptest::prelude::*;

    fn map2(rows: [[u8; 2]; 2], c: usize) -> SegMap {
        SegMap::new(2, 2, c, rows.concat()).unwrap()
    }

    #[test]
    fn identical_maps_score_one() {
        let s = map2([[0, 1], [2, 1]], 3);
        assert_eq!(mpa(&s, &s).unwrap(), 1.0);
        assert_eq!(miou(&s, &s).unwrap(), 1.0);
    }

    #[test]
    fn worked_example() {
        let sx = map2([[0, 0], [1, 1]], 2);
        let sy = map2([[0, 1], [1, 1]], 2);
        assert!((mpa(&sx, &sy).unwrap() - 0.75).abs() < 1e-15);
        assert!((miou(&sx, &sy).unwrap() - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_labels_score_zero() {
        let sx = map2([[0, 0], [0, 0]], 2);
        let sy = map2([[1, 1], [1, 1]], 2);
        assert_eq!(mpa(&sx, &sy).unwrap(), 0.0);
        assert_eq!(miou(&sx, &sy).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        let a = map2([[0, 0], [0, 0]], 2);
        let b = SegMap::new(1, 4, 2, vec![0; 4]).unwrap();
        assert!(matches!(mpa(&a, &b), Err(Error::SegMapSize(..))));
        let c = map2([[0, 0], [0, 0]], 3);
        assert!(matches!(miou(&a, &c), Err(Error::ClassCount(2, 3))));
        let empty = SegMap::new(0, 0, 2, vec![]).unwrap();
        assert!(matches!(mpa(&empty, &empty), Err(Error::EmptySegMap)));
        assert!(matches!(
            SegMap::new(1, 1, 3, vec![5]),
            Err(Error::ClassOutOfRange { index: 5, .. })
        ));
    }

    #[test]
    fn segmap_files() {
        let dir = tempfile::tempdir().unwrap();
        let zero = dir.path().join("zero.png");
        SegMap::new(4, 4, 3, vec![0; 16])
            .unwrap()
            .save(&zero)
            .unwrap();
        let loaded = load_segmap(&zero, 3).unwrap();
        assert_eq!(loaded.classes(), &[0; 16]);

        let bad = dir.path().join("bad.png");
        let mut img = GrayImage::new(2, 2);
        img.put_pixel(1, 1, Luma([5]));
        img.save(&bad).unwrap();
        assert!(matches!(
            load_segmap(&bad, 3),
            Err(Error::ClassOutOfRange { index: 5, .. })
        ));
        assert!(load_segmap(&dir.path().join("missing.png"), 3).is_err());
    }

    #[test]
    fn nearest_resize_keeps_labels() {
        let s = map2([[0, 1], [2, 3]], 4);
        let r = s.resize_nearest(4, 4);
        assert_eq!(
            r.classes(),
            &[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]
        );
        assert_eq!(r.resize_nearest(2, 2), s);
        assert_eq!(r.crop(2, 2, 2, 2).unwrap().classes(), &[3; 4]);
    }

    #[test]
    fn cache_matches_direct_scores() {
        let maps: Vec<SegMap> = (0..4u8)
            .map(|i| map2([[i % 3, 0], [1, (i + 1) % 3]], 3))
            .collect();
        let cache = ScoreCache::new(maps.clone(), maps.clone());
        for a in 0..4 {
            for b in 0..4 {
                let first = cache.get(a, b).unwrap();
                assert_eq!(first.mpa, mpa(&maps[a], &maps[b]).unwrap());
                assert_eq!(cache.get(a, b).unwrap(), first);
            }
        }
        assert_eq!(cache.len(), 16);
        assert!(matches!(cache.get(9, 0), Err(Error::MissingPair(9, 0))));
    }

    fn arb_pair() -> impl Strategy<Value = (SegMap, SegMap)> {
        (1usize..6, 1usize..6, 1usize..5).prop_flat_map(|(h, w, c)| {
            let cells = proptest::collection::vec(0..c as u8, h * w);
            (cells.clone(), cells).prop_map(move |(a, b)| {
                (
                    SegMap::new(h, w, c, a).unwrap(),
                    SegMap::new(h, w, c, b).unwrap(),
                )
            })
        })
    }

    proptest! {
        #[test]
        fn scores_bounded_and_miou_symmetric((sx, sy) in arb_pair()) {
            let p = mpa(&sx, &sy).unwrap();
            let i = miou(&sx, &sy).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert_eq!(i, miou(&sy, &sx).unwrap());
            prop_assert_eq!(mpa(&sx, &sx).unwrap(), 1.0);
        }

        #[test]
        fn relabeling_is_invisible((sx, sy) in arb_pair(), rot in 0u8..4) {
            let c = sx.num_classes() as u8;
            let perm = |m: &SegMap| SegMap::new(
                m.height(), m.width(), m.num_classes(),
                m.classes().iter().map(|&v| (v + rot) % c).collect(),
            ).unwrap();
            prop_assert!((mpa(&perm(&sx), &perm(&sy)).unwrap() - mpa(&sx, &sy).unwrap()).abs() < 1e-15);
            prop_assert!((miou(&perm(&sx), &perm(&sy)).unwrap() - miou(&sx, &sy).unwrap()).abs() < 1e-15);
        }
    }
}
