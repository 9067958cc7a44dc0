use std::collections::HashMap;

use ndarray::Array3;

use super::{CategoryTable, Embedding};
use crate::error::{Error, Result};
use crate::rng::{self, Substream};

/// Parameters of the synthetic teacher space.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    /// Embedding dimension.
    pub dim: usize,
    /// Maximum angle (radians) between a synonym and its canonical word.
    pub cone_angle: f64,
    /// Visual-to-text fidelity in `[0, 1]`; 1 makes region embeddings equal
    /// the canonical text embedding.
    pub alignment: f64,
    /// Standard deviation of the per-instance Gaussian appearance noise.
    pub instance_noise: f64,
    /// Standard deviation of the per-pixel token noise.
    pub pixel_noise: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            cone_angle: 0.8,
            alignment: 0.95,
            instance_noise: 1.5,
            pixel_noise: 0.1,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!(
                "teacher dimension must be at least 2, got {}",
                self.dim
            )));
        }
        if !(0.0..=1.0).contains(&self.alignment) {
            return Err(Error::Config(format!(
                "alignment must lie in [0, 1], got {}",
                self.alignment
            )));
        }
        if !(self.cone_angle >= 0.0 && self.instance_noise >= 0.0 && self.pixel_noise >= 0.0) {
            return Err(Error::Config(
                "angles and noise scales must be non-negative".into(),
            ));
        }

        Ok(())
    }
}

/// Identifies one object instance for teacher queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct InstanceDescriptor {
    pub image: u64,
    pub index: u32,
    pub category: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Image descriptor: its id, size and the rectangles covered by instances.
/// Uncovered pixels are background.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageLayout {
    pub id: u64,
    pub height: usize,
    pub width: usize,
    pub instances: Vec<(InstanceDescriptor, Rect)>,
}

impl ImageLayout {
    /// Index of the instance covering `(y, x)`, if any.
    pub fn instance_at(&self, y: usize, x: usize) -> Option<usize> {
        self.instances.iter().position(|(_, r)| r.contains(y, x))
    }
}

/// Deterministic stand-in for a frozen text/image encoder pair.
#[derive(Clone, Debug)]
pub struct TeacherSpace {
    config: TeacherConfig,
    seed: u64,
    table: CategoryTable,
    // text[c][k] is the embedding of synonym k of category c; k = 0 is canonical.
    text: Vec<Vec<Embedding>>,
    index: HashMap<String, (usize, usize)>,
}

impl TeacherSpace {
    pub fn build(config: &TeacherConfig, table: &CategoryTable, seed: u64) -> Result<Self> {
        if table.len() < 2 {
            return Err(Error::Config(format!(
                "teacher needs at least 2 categories, got {}",
                table.len()
            )));
        }
        config.validate()?;

        let d = config.dim;
        let mut text = Vec::with_capacity(table.len());
        let mut index = HashMap::new();
        for entry in table.entries() {
            let c = entry.id;
            let mut r = rng::stream(seed, Substream::Teacher, &[0, c as u64]);
            let canonical = Embedding::new(rng::unit_vec(&mut r, d))?;
            let mut words = vec![canonical.clone()];
            for k in 1..entry.synonyms.len() {
                let mut r = rng::stream(seed, Substream::Teacher, &[1, c as u64, k as u64]);
                words.push(perturb_in_cone(&canonical, config.cone_angle, &mut r)?);
            }
            for (k, w) in entry.synonyms.iter().enumerate() {
                index.entry(w.clone()).or_insert((c, k));
            }
            text.push(words);
        }
        Ok(Self {
            config: config.clone(),
            seed,
            table: table.clone(),
            text,
            index,
        })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn table(&self) -> &CategoryTable {
        &self.table
    }

    /// Text embedding of a word, if the word belongs to the table.
    pub fn text(&self, word: &str) -> Option<&Embedding> {
        self.index.get(word).map(|&(c, k)| &self.text[c][k])
    }

    pub fn canonical(&self, category: usize) -> Result<&Embedding> {
        self.text
            .get(category)
            .map(|w| &w[0])
            .ok_or(Error::UnknownCategory(category))
    }

    /// Embeddings of every synonym of `category`, canonical first.
    pub fn synonyms(&self, category: usize) -> Result<&[Embedding]> {
        self.text
            .get(category)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownCategory(category))
    }

    /// `(word, embedding)` pairs in table order.
    pub fn text_records(&self) -> Vec<(String, Embedding)> {
        self.table
            .entries()
            .iter()
            .flat_map(|e| {
                e.synonyms
                    .iter()
                    .zip(&self.text[e.id])
                    .map(|(w, v)| (w.clone(), v.clone()))
            })
            .collect()
    }

    /// Region-level visual embedding of an instance:
    /// `normalize(alignment * text(c) + (1 - alignment) * noise(instance))`.
    pub fn region(&self, inst: &InstanceDescriptor) -> Result<Embedding> {
        let canonical = self.canonical(inst.category)?;
        let rho = self.config.alignment;
        if rho == 1.0 {
            return Ok(canonical.clone());
        }
        let mut r = rng::stream(
            self.seed,
            Substream::Teacher,
            &[2, inst.image, u64::from(inst.index)],
        );
        let noise = rng::gaussian_vec(&mut r, self.dim());
        let mixed = canonical
            .as_slice()
            .iter()
            .zip(&noise)
            .map(|(t, n)| rho * t + (1.0 - rho) * self.config.instance_noise * n)
            .collect();
        Embedding::normalized(mixed)
    }

    /// Unit-norm background embedding of an image.
    pub fn background(&self, image: u64) -> Embedding {
        let mut r = rng::stream(self.seed, Substream::Teacher, &[3, image]);
        Embedding::new(rng::unit_vec(&mut r, self.dim())).expect("dim checked at build")
    }

    /// `H x W x D` spatial tokens: each pixel carries the region embedding of
    /// the instance covering it (or the background embedding) plus Gaussian
    /// pixel noise.
    pub fn token_grid(&self, layout: &ImageLayout) -> Result<Array3<f64>> {
        let d = self.dim();
        let regions = layout
            .instances
            .iter()
            .map(|(inst, _)| self.region(inst))
            .collect::<Result<Vec<_>>>()?;
        let background = self.background(layout.id);
        let mut r = rng::stream(self.seed, Substream::Teacher, &[4, layout.id]);
        let noise = rng::gaussian_vec(&mut r, layout.height * layout.width * d);
        let sigma = self.config.pixel_noise;
        let mut grid = Array3::zeros((layout.height, layout.width, d));
        for y in 0..layout.height {
            for x in 0..layout.width {
                let base = match layout.instance_at(y, x) {
                    Some(i) => regions[i].as_slice(),
                    None => background.as_slice(),
                };
                let off = (y * layout.width + x) * d;
                for k in 0..d {
                    grid[[y, x, k]] = base[k] + sigma * noise[off + k];
                }
            }
        }
        Ok(grid)
    }
}

fn perturb_in_cone<R: rand::Rng>(
    center: &Embedding,
    max_angle: f64,
    r: &mut R,
) -> Result<Embedding> {
    let angle = max_angle * r.gen::<f64>();
    if angle == 0.0 {
        return Ok(center.clone());
    }
    let c = center.as_slice();
    // random direction orthogonal to the center
    let mut dir = loop {
        let mut v = rng::gaussian_vec(r, c.len());
        let proj = super::dot(&v, c);
        v.iter_mut().zip(c).for_each(|(x, y)| *x -= proj * y);
        if super::norm(&v) > 1e-9 {
            break v;
        }
    };
    let n = super::norm(&dir);
    dir.iter_mut().for_each(|x| *x /= n);
    let v = c
        .iter()
        .zip(&dir)
        .map(|(x, y)| angle.cos() * x + angle.sin() * y)
        .collect();
    Embedding::normalized(v)
}
