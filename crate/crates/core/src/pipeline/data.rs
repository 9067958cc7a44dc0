//! Synthetic segmentation data painted from the teacher's token grid.
//!
//! Every image is split into four quadrants; each instance is a rectangle
//! inside its own quadrant. Pixel features are the teacher tokens followed
//! by four slot channels (one per quadrant, set on instance pixels) and a
//! constant channel.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::embeddings::{
    CategoryTable, ImageLayout, InstanceDescriptor, Rect, TeacherConfig, TeacherSpace,
};
use crate::error::{shape_err, Error, Result};
use crate::io::{put_u32, read_f32, read_u32, read_u64, Reader};
use crate::rng::{self, Substream};

const MAGIC: &[u8; 4] = b"RBT1";
const SLOTS: usize = 4;
const MIN_SIDE: usize = 3;

/// One training or validation image with its instance annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionBatch {
    pub image_id: u64,
    pub height: usize,
    pub width: usize,
    /// `(H*W) x D_f` pixel features, row-major over pixels.
    pub features: Array2<f64>,
    /// `N x (H*W)` binary instance masks.
    pub gt_masks: Array2<f64>,
    pub gt_labels: Vec<usize>,
    pub rects: Vec<Rect>,
    /// Canonical names of the categories present, in first-appearance order.
    pub caption_words: Vec<String>,
    pub instances: Vec<InstanceDescriptor>,
    /// Word supervising each instance; canonical unless diversified.
    pub train_words: Vec<String>,
}

impl RegionBatch {
    fn assemble(
        image_id: u64,
        height: usize,
        width: usize,
        features: Array2<f64>,
        instances: Vec<(InstanceDescriptor, Rect)>,
        table: &CategoryTable,
    ) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let p = height * width;
        if features.nrows() != p {
            return Err(shape_err(format!(
                "{} feature rows for a {height}x{width} image",
                features.nrows()
            )));
        }
        let mut gt_masks = Array2::zeros((instances.len(), p));
        for (i, (_, r)) in instances.iter().enumerate() {
            if r.top + r.height > height || r.left + r.width > width {
                return Err(shape_err(format!("instance {i} leaves the image")));
            }
            for y in r.top..r.top + r.height {
                for x in r.left..r.left + r.width {
                    if gt_masks.column(y * width + x).sum() > 0.0 {
                        return Err(Error::Domain(format!("instance {i} overlaps another")));
                    }
                    gt_masks[[i, y * width + x]] = 1.0;
                }
            }
        }
        let mut caption_words = Vec::new();
        let mut train_words = Vec::new();
        for (inst, _) in &instances {
            let name = &table.get(inst.category)?.canonical;
            if !caption_words.contains(name) {
                caption_words.push(name.clone());
            }
            train_words.push(name.clone());
        }
        Ok(Self {
            image_id,
            height,
            width,
            features,
            gt_masks,
            gt_labels: instances.iter().map(|(i, _)| i.category).collect(),
            rects: instances.iter().map(|(_, r)| *r).collect(),
            caption_words,
            instances: instances.into_iter().map(|(i, _)| i).collect(),
            train_words,
        })
    }

    pub fn len(&self) -> usize {
        self.gt_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn layout(&self) -> ImageLayout {
        ImageLayout {
            id: self.image_id,
            height: self.height,
            width: self.width,
            instances: self
                .instances
                .iter()
                .copied()
                .zip(self.rects.iter().copied())
                .collect(),
        }
    }
}

/// Parameters of the synthetic world.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub categories: usize,
    pub synonyms: usize,
    /// Category ids held out of training.
    pub unseen: Vec<usize>,
    pub teacher: TeacherConfig,
    pub height: usize,
    pub width: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub max_instances: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            categories: 12,
            synonyms: 4,
            unseen: vec![8, 9, 10, 11],
            teacher: TeacherConfig::default(),
            height: 16,
            width: 16,
            train_images: 32,
            val_images: 32,
            max_instances: 4,
        }
    }
}

impl WorldConfig {
    pub fn feature_dim(&self) -> usize {
        self.teacher.dim + SLOTS + 1
    }

    pub fn seen(&self) -> Vec<usize> {
        (0..self.categories)
            .filter(|c| !self.unseen.contains(c))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        if self.categories < 2 {
            return Err(Error::Config(format!(
                "need at least 2 categories, got {}",
                self.categories
            )));
        }
        let unseen: BTreeSet<usize> = self.unseen.iter().copied().collect();
        if unseen.len() != self.unseen.len() || unseen.iter().any(|&c| c >= self.categories) {
            return Err(Error::Config(format!(
                "unseen ids {:?} must be distinct and below {}",
                self.unseen, self.categories
            )));
        }
        if unseen.len() >= self.categories {
            return Err(Error::Config("at least one category must be seen".into()));
        }
        if self.synonyms == 0 {
            return Err(Error::Config(
                "every category needs at least one word".into(),
            ));
        }
        if self.height < 2 * MIN_SIDE || self.width < 2 * MIN_SIDE {
            return Err(Error::Config(format!(
                "images must be at least {0}x{0}",
                2 * MIN_SIDE
            )));
        }
        if !(1..=SLOTS).contains(&self.max_instances) {
            return Err(Error::Config(format!(
                "max_instances must lie in 1..={SLOTS}"
            )));
        }
        if self.train_images == 0 || self.val_images == 0 {
            return Err(Error::Config("both splits need at least one image".into()));
        }
        Ok(())
    }
}

/// A generated world: the teacher plus both splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: WorldConfig,
    pub seed: u64,
    pub table: CategoryTable,
    pub space: TeacherSpace,
    pub train: Vec<RegionBatch>,
    pub val: Vec<RegionBatch>,
}

fn span(rng: &mut impl Rng, start: usize, len: usize) -> (usize, usize) {
    let side = rng.gen_range(MIN_SIDE..=len);
    let off = rng.gen_range(0..=len - side);
    (start + off, side)
}

fn make_image(
    cfg: &WorldConfig,
    space: &TeacherSpace,
    table: &CategoryTable,
    seed: u64,
    image_id: u64,
    pool: &[usize],
) -> Result<RegionBatch> {
    let (h, w) = (cfg.height, cfg.width);
    let mut r = rng::stream(seed, Substream::Dataset, &[image_id]);
    let n = r.gen_range(1..=cfg.max_instances);
    let mut quads: Vec<usize> = (0..SLOTS).collect();
    quads.shuffle(&mut r);
    quads.truncate(n);
    quads.sort_unstable();
    let half_h = h / 2;
    let half_w = w / 2;
    let mut instances = Vec::with_capacity(n);
    for (k, &quad) in quads.iter().enumerate() {
        let category = pool[r.gen_range(0..pool.len())];
        let (y0, qh) = if quad < 2 {
            (0, half_h)
        } else {
            (half_h, h - half_h)
        };
        let (x0, qw) = if quad % 2 == 0 {
            (0, half_w)
        } else {
            (half_w, w - half_w)
        };
        let (top, height) = span(&mut r, y0, qh);
        let (left, width) = span(&mut r, x0, qw);
        instances.push((
            InstanceDescriptor {
                image: image_id,
                index: k as u32,
                category,
            },
            Rect {
                top,
                left,
                height,
                width,
            },
        ));
    }
    let layout = ImageLayout {
        id: image_id,
        height: h,
        width: w,
        instances: instances.clone(),
    };
    let tokens = space.token_grid(&layout)?;
    let d = space.dim();
    let mut features = Array2::zeros((h * w, cfg.feature_dim()));
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for k in 0..d {
                features[[p, k]] = f64::from(tokens[[y, x, k]] as f32);
            }
            if let Some(i) = layout.instance_at(y, x) {
                features[[p, d + quads[i]]] = 1.0;
            }
            features[[p, d + SLOTS]] = 1.0;
        }
    }
    RegionBatch::assemble(image_id, h, w, features, instances, table)
}

impl Dataset {
    /// Generates the teacher and both splits from `seed`. Training images
    /// draw categories from the seen set only; validation images from all
    /// categories. Features are rounded to `f32` so the dataset equals its
    /// reloaded files.
    pub fn generate(config: &WorldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let table = CategoryTable::synthetic(config.categories, config.synonyms);
        let space = TeacherSpace::build(&config.teacher, &table, seed)?;
        let seen = config.seen();
        let all: Vec<usize> = (0..config.categories).collect();
        let train = (0..config.train_images as u64)
            .map(|i| make_image(config, &space, &table, seed, i, &seen))
            .collect::<Result<Vec<_>>>()?;
        let offset = config.train_images as u64;
        let val = (0..config.val_images as u64)
            .map(|i| make_image(config, &space, &table, seed, offset + i, &all))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            seed,
            table,
            space,
            train,
            val,
        })
    }
}

/// Batch file: magic `RBT1`, `u32` image count, then per image `u64` id,
/// `u32` H, W, D_f, N, then N instances as `u32` (index, category, top,
/// left, height, width), then `H*W*D_f` `f32` features.
pub fn batches_to_bytes(batches: &[RegionBatch]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, batches.len() as u32);
    for b in batches {
        buf.extend_from_slice(&b.image_id.to_le_bytes());
        for v in [b.height, b.width, b.features.ncols(), b.len()] {
            put_u32(&mut buf, v as u32);
        }
        for (inst, r) in b.instances.iter().zip(&b.rects) {
            for v in [
                inst.index as usize,
                inst.category,
                r.top,
                r.left,
                r.height,
                r.width,
            ] {
                put_u32(&mut buf, v as u32);
            }
        }
        for &v in &b.features {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf
}

pub fn batches_from_bytes(bytes: &[u8], table: &CategoryTable) -> Result<Vec<RegionBatch>> {
    let mut rd = Reader::new(bytes);
    if rd.take(4)? != MAGIC {
        return Err(Error::Format("batch file: bad magic".into()));
    }
    let count = read_u32(&mut rd)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let id = read_u64(&mut rd)?;
        let mut next = || read_u32(&mut rd).map(|v| v as usize);
        let (h, w, df, n) = (next()?, next()?, next()?, next()?);
        let mut instances = Vec::with_capacity(n);
        for _ in 0..n {
            let mut v = [0usize; 6];
            for slot in &mut v {
                *slot = read_u32(&mut rd)? as usize;
            }
            table.get(v[1])?;
            instances.push((
                InstanceDescriptor {
                    image: id,
                    index: v[0] as u32,
                    category: v[1],
                },
                Rect {
                    top: v[2],
                    left: v[3],
                    height: v[4],
                    width: v[5],
                },
            ));
        }
        let values = (0..h * w * df)
            .map(|_| read_f32(&mut rd).map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        let features =
            Array2::from_shape_vec((h * w, df), values).map_err(|e| shape_err(e.to_string()))?;
        out.push(RegionBatch::assemble(id, h, w, features, instances, table)?);
    }
    rd.finish()?;
    Ok(out)
}

pub fn write_batches(path: &Path, batches: &[RegionBatch]) -> Result<()> {
    fs::write(path, batches_to_bytes(batches))?;
    Ok(())
}

pub fn read_batches(path: &Path, table: &CategoryTable) -> Result<Vec<RegionBatch>> {
    batches_from_bytes(&fs::read(path)?, table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            train_images: 6,
            val_images: 6,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let a = Dataset::generate(&small(), 3).unwrap();
        let b = Dataset::generate(&small(), 3).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        let c = Dataset::generate(&small(), 4).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn unseen_categories_stay_out_of_training() {
        let cfg = WorldConfig {
            train_images: 40,
            ..small()
        };
        let ds = Dataset::generate(&cfg, 5).unwrap();
        for b in &ds.train {
            assert!(b.gt_labels.iter().all(|c| !cfg.unseen.contains(c)));
        }
    }

    #[test]
    fn masks_are_disjoint_and_match_slot_channels() {
        let ds = Dataset::generate(&small(), 6).unwrap();
        let d = ds.space.dim();
        for b in ds.train.iter().chain(&ds.val) {
            for p in 0..b.pixels() {
                let cover = b.gt_masks.column(p).sum();
                assert!(cover <= 1.0);
                let slots: f64 = (0..SLOTS).map(|s| b.features[[p, d + s]]).sum();
                assert_eq!(slots, cover);
                assert_eq!(b.features[[p, d + SLOTS]], 1.0);
            }
            assert!(b.gt_masks.rows().into_iter().all(|m| m.sum() >= 9.0));
        }
    }

    #[test]
    fn batch_file_round_trip() {
        let ds = Dataset::generate(&small(), 7).unwrap();
        let bytes = batches_to_bytes(&ds.train);
        assert_eq!(batches_from_bytes(&bytes, &ds.table).unwrap(), ds.train);
        assert!(batches_from_bytes(&bytes[..bytes.len() - 2], &ds.table).is_err());
    }

    #[test]
    fn rejects_bad_world() {
        let bad = WorldConfig {
            unseen: vec![12],
            ..small()
        };
        assert!(Dataset::generate(&bad, 0).is_err());
        let bad = WorldConfig {
            height: 4,
            ..small()
        };
        assert!(Dataset::generate(&bad, 0).is_err());
    }
}
