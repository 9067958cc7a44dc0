//! Label maps, IoU accumulation, seen/unseen split metrics and video
//! evaluation over stacked frames.

use std::fs;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::io::{put_u32, read_u16, read_u32, Reader};

pub const IGNORE: u16 = 0xFFFF;

const IMAGE_MAGIC: &[u8; 4] = b"LBL1";
const VIDEO_MAGIC: &[u8; 4] = b"LBV1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    /// Row-major class ids; [`IGNORE`] marks unlabeled pixels.
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_err(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u16) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    /// Checks every non-ignore label is below `classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != IGNORE && usize::from(l) >= classes)
        {
            Some(&l) => Err(Error::UnknownCategory(usize::from(l))),
            None => Ok(()),
        }
    }

    fn write_body(&self, buf: &mut Vec<u8>) {
        put_u32(buf, self.height as u32);
        put_u32(buf, self.width as u32);
        for l in &self.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }

    fn read_body(rd: &mut Reader<'_>) -> Result<Self> {
        let h = read_u32(rd)? as usize;
        let w = read_u32(rd)? as usize;
        let labels = (0..h * w)
            .map(|_| read_u16(rd))
            .collect::<Result<Vec<_>>>()?;
        Self::new(h, w, labels)
    }

    /// Magic `LBL1`, `u32` H, `u32` W, then `H*W` `u16` labels.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + 2 * self.labels.len());
        buf.extend_from_slice(IMAGE_MAGIC);
        self.write_body(&mut buf);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(bytes);
        if rd.take(4)? != IMAGE_MAGIC {
            return Err(Error::Format("label map: bad magic".into()));
        }
        let map = Self::read_body(&mut rd)?;
        rd.finish()?;
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Magic `LBV1`, `u32` T, then T frames each as `u32` H, `u32` W and labels.
pub fn video_to_bytes(frames: &[LabelMap]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(VIDEO_MAGIC);
    put_u32(&mut buf, frames.len() as u32);
    for f in frames {
        f.write_body(&mut buf);
    }
    buf
}

pub fn video_from_bytes(bytes: &[u8]) -> Result<Vec<LabelMap>> {
    let mut rd = Reader::new(bytes);
    if rd.take(4)? != VIDEO_MAGIC {
        return Err(Error::Format("video label file: bad magic".into()));
    }
    let t = read_u32(&mut rd)?;
    let frames = (0..t)
        .map(|_| LabelMap::read_body(&mut rd))
        .collect::<Result<Vec<_>>>()?;
    rd.finish()?;
    Ok(frames)
}

/// Per-class intersection and union pixel counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            intersection: vec![0; classes],
            union: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.intersection.len()
    }

    /// Tallies one prediction against its ground truth. Pixels whose ground
    /// truth is [`IGNORE`] are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(shape_err(format!(
                "prediction is {}x{}, ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let k = self.classes();
        gt.validate(k)?;
        pred.validate(k)?;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == IGNORE {
                continue;
            }
            let g = usize::from(g);
            self.union[g] += 1;
            if p == IGNORE {
                continue;
            }
            let p = usize::from(p);
            if p == g {
                self.intersection[g] += 1;
            } else {
                self.union[p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(shape_err("accumulators differ in class count"));
        }
        for c in 0..self.classes() {
            self.intersection[c] += other.intersection[c];
            self.union[c] += other.union[c];
        }
        Ok(())
    }
}

/// Per-class IoU (`None` for classes absent from both prediction and ground
/// truth) and their mean in percent.
pub fn miou(acc: &ConfusionAccumulator) -> Result<(Vec<Option<f64>>, f64)> {
    let per_class: Vec<Option<f64>> = acc
        .intersection
        .iter()
        .zip(&acc.union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Domain("no class was evaluated".into()));
    }
    Ok((
        per_class,
        100.0 * present.iter().sum::<f64>() / present.len() as f64,
    ))
}

/// Seen and unseen mIoU and their harmonic mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitMetrics {
    /// `None` when no seen class was evaluated.
    pub seen: Option<f64>,
    pub unseen: Option<f64>,
    pub harmonic: f64,
}

pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

fn percent_mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| 100.0 * v.iter().sum::<f64>() / v.len() as f64)
}

/// Splits per-class IoU (fractions) into seen and unseen means in percent.
pub fn split_metrics(per_class: &[Option<f64>], seen: &[usize]) -> Result<SplitMetrics> {
    if seen.is_empty() || seen.len() >= per_class.len() {
        return Err(Error::Domain(
            "seen set and its complement must be nonempty".into(),
        ));
    }
    if let Some(&bad) = seen.iter().find(|&&c| c >= per_class.len()) {
        return Err(Error::UnknownCategory(bad));
    }
    let is_seen = |c: usize| seen.contains(&c);
    let s = percent_mean(
        (0..per_class.len())
            .filter(|&c| is_seen(c))
            .filter_map(|c| per_class[c]),
    );
    let u = percent_mean(
        (0..per_class.len())
            .filter(|&c| !is_seen(c))
            .filter_map(|c| per_class[c]),
    );
    let harmonic = match (s, u) {
        (Some(s), Some(u)) => harmonic_mean(s, u),
        _ => 0.0,
    };
    Ok(SplitMetrics {
        seen: s,
        unseen: u,
        harmonic,
    })
}

/// Full evaluation result for a set of label maps.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub split: SplitMetrics,
}

pub fn evaluate(
    preds: &[LabelMap],
    gts: &[LabelMap],
    classes: usize,
    seen: &[usize],
) -> Result<EvalMetrics> {
    if preds.len() != gts.len() {
        return Err(shape_err(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut acc = ConfusionAccumulator::new(classes);
    for (p, g) in preds.iter().zip(gts) {
        acc.accumulate(p, g)?;
    }
    let (per_class, mean) = miou(&acc)?;
    let split = split_metrics(&per_class, seen)?;
    Ok(EvalMetrics {
        per_class,
        miou: mean,
        split,
    })
}

/// Treats the `T` frames as one spatio-temporal pixel volume.
pub fn video_eval(
    pred_frames: &[LabelMap],
    gt_frames: &[LabelMap],
    classes: usize,
    seen: &[usize],
) -> Result<EvalMetrics> {
    evaluate(pred_frames, gt_frames, classes, seen)
}
