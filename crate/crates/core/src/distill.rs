//! Distillation objectives between student query embeddings and a frozen
//! teacher, with analytic gradients.
//!
//! * vanilla: `(1/N) sum_i d(V_i, R_i)`
//! * text-guided: `(1/N) sum_i sum_j |d(V_i, R_j) - d(T_i, T_j)|`
//! * vision-guided: same pairwise form with target `d(R_i, R_j)`
//!
//! `d` is the smoothed L2 distance. The diagonal `i = j` is part of both
//! pairwise sums (its target is 0 in the text-guided case), and both are
//! normalized by `1/N`, not `1/N^2`.

use crate::embeddings::{smoothed_distance, smoothed_distance_grad, Embedding};
use crate::error::{Error, Result};
use crate::gradcheck::central_difference;

/// Below this magnitude an absolute-value term is treated as sitting on its
/// kink and contributes a zero subgradient.
pub const KINK_TOL: f64 = 1e-8;

/// `v / |v|`, or `v` unchanged when it is zero.
pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

/// Pulls a gradient taken at `unit(v)` back to `v`.
pub fn unit_backward(v: &[f64], grad: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return vec![0.0; v.len()];
    }
    let along: f64 = v.iter().zip(grad).map(|(a, g)| a * g).sum::<f64>() / n;
    v.iter()
        .zip(grad)
        .map(|(a, g)| (g - along * a / n) / n)
        .collect()
}

/// Matched student queries, teacher region embeddings and text embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillBatch {
    pub student: Vec<Embedding>,
    pub teacher_regions: Vec<Embedding>,
    pub text: Vec<Embedding>,
}

impl DistillBatch {
    pub fn new(
        student: Vec<Embedding>,
        teacher_regions: Vec<Embedding>,
        text: Vec<Embedding>,
    ) -> Result<Self> {
        if student.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = student.len();
        if teacher_regions.len() != n || text.len() != n {
            return Err(Error::Shape(format!(
                "batch lists have lengths {n}, {}, {}",
                teacher_regions.len(),
                text.len()
            )));
        }
        let d = student[0].dim();
        if student
            .iter()
            .chain(&teacher_regions)
            .chain(&text)
            .any(|e| e.dim() != d)
        {
            return Err(Error::Shape("batch embeddings differ in dimension".into()));
        }
        Ok(Self {
            student,
            teacher_regions,
            text,
        })
    }

    pub fn len(&self) -> usize {
        self.student.len()
    }

    pub fn is_empty(&self) -> bool {
        self.student.is_empty()
    }

    /// Copy of the batch with different student embeddings.
    pub fn with_student(&self, student: Vec<Embedding>) -> Result<Self> {
        Self::new(student, self.teacher_regions.clone(), self.text.clone())
    }
}

/// Which distillation objective a run uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DistillVariant {
    #[default]
    None,
    Vanilla,
    VisionGuided,
    TextGuided,
}

impl DistillVariant {
    pub const ALL: [DistillVariant; 4] = [
        DistillVariant::None,
        DistillVariant::Vanilla,
        DistillVariant::VisionGuided,
        DistillVariant::TextGuided,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistillVariant::None => "none",
            DistillVariant::Vanilla => "vanilla",
            DistillVariant::VisionGuided => "vision-guided",
            DistillVariant::TextGuided => "text-guided",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn loss(self, batch: &DistillBatch) -> f64 {
        self.loss_raw(&batch.student, &batch.teacher_regions, &batch.text)
    }

    pub fn grad(self, batch: &DistillBatch) -> Vec<Vec<f64>> {
        self.loss_and_grad_raw(&batch.student, &batch.teacher_regions, &batch.text)
            .1
    }

    pub(crate) fn loss_raw<A, B, C>(self, student: &[A], regions: &[B], text: &[C]) -> f64
    where
        A: AsRef<[f64]>,
        B: AsRef<[f64]>,
        C: AsRef<[f64]>,
    {
        match self {
            DistillVariant::None => 0.0,
            DistillVariant::Vanilla => vanilla_raw(student, regions, false).0,
            DistillVariant::VisionGuided => pairwise_raw(student, regions, regions, false).0,
            DistillVariant::TextGuided => pairwise_raw(student, regions, text, false).0,
        }
    }

    pub(crate) fn loss_and_grad_raw<A, B, C>(
        self,
        student: &[A],
        regions: &[B],
        text: &[C],
    ) -> (f64, Vec<Vec<f64>>)
    where
        A: AsRef<[f64]>,
        B: AsRef<[f64]>,
        C: AsRef<[f64]>,
    {
        match self {
            DistillVariant::None => (
                0.0,
                student
                    .iter()
                    .map(|s| vec![0.0; s.as_ref().len()])
                    .collect(),
            ),
            DistillVariant::Vanilla => vanilla_raw(student, regions, true),
            DistillVariant::VisionGuided => pairwise_raw(student, regions, regions, true),
            DistillVariant::TextGuided => pairwise_raw(student, regions, text, true),
        }
    }
}

fn vanilla_raw<A, B>(student: &[A], regions: &[B], want_grad: bool) -> (f64, Vec<Vec<f64>>)
where
    A: AsRef<[f64]>,
    B: AsRef<[f64]>,
{
    let n = student.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::new();
    for (v, r) in student.iter().zip(regions) {
        loss += smoothed_distance(v.as_ref(), r.as_ref());
        if want_grad {
            grads.push(
                smoothed_distance_grad(v.as_ref(), r.as_ref())
                    .into_iter()
                    .map(|g| g / n)
                    .collect(),
            );
        }
    }
    (loss / n, grads)
}

/// `(1/N) sum_ij |d(V_i, R_j) - d(G_i, G_j)|` where `G` supplies the targets.
fn pairwise_raw<A, B, C>(
    student: &[A],
    regions: &[B],
    guide: &[C],
    want_grad: bool,
) -> (f64, Vec<Vec<f64>>)
where
    A: AsRef<[f64]>,
    B: AsRef<[f64]>,
    C: AsRef<[f64]>,
{
    let n = student.len();
    let nf = n as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(if want_grad { n } else { 0 });
    for i in 0..n {
        let v = student[i].as_ref();
        let mut g = vec![0.0; if want_grad { v.len() } else { 0 }];
        for j in 0..n {
            let r = regions[j].as_ref();
            let target = smoothed_distance(guide[i].as_ref(), guide[j].as_ref());
            let inner = smoothed_distance(v, r) - target;
            loss += inner.abs();
            if want_grad && inner.abs() > KINK_TOL {
                let sign = inner.signum();
                for (a, b) in g.iter_mut().zip(smoothed_distance_grad(v, r)) {
                    *a += sign * b / nf;
                }
            }
        }
        if want_grad {
            grads.push(g);
        }
    }
    (loss / nf, grads)
}

pub fn vanilla_kd(batch: &DistillBatch) -> f64 {
    DistillVariant::Vanilla.loss(batch)
}

pub fn tgkd(batch: &DistillBatch) -> f64 {
    DistillVariant::TextGuided.loss(batch)
}

pub fn vision_guided_kd(batch: &DistillBatch) -> f64 {
    DistillVariant::VisionGuided.loss(batch)
}

/// Analytic gradient of [`tgkd`] with respect to each student embedding.
pub fn tgkd_grad(batch: &DistillBatch) -> Vec<Vec<f64>> {
    DistillVariant::TextGuided.grad(batch)
}

/// Central-difference gradient of `loss_fn` with respect to every student
/// coordinate; teacher and text embeddings are held fixed.
pub fn finite_diff_grad<F>(loss_fn: F, batch: &DistillBatch, h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&DistillBatch) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step must be positive, got {h}")));
    }
    let d = batch.student[0].dim();
    let flat: Vec<f64> = batch
        .student
        .iter()
        .flat_map(|e| e.as_slice().iter().copied())
        .collect();
    let fd = central_difference(
        |x| {
            let student: Vec<Vec<f64>> = x.chunks(d).map(<[f64]>::to_vec).collect();
            let probe = DistillBatch {
                student: student
                    .into_iter()
                    .map(|v| Embedding::new(v).expect("finite probe"))
                    .collect(),
                teacher_regions: batch.teacher_regions.clone(),
                text: batch.text.clone(),
            };
            loss_fn(&probe)
        },
        &flat,
        h,
    );
    Ok(fd.chunks(d).map(<[f64]>::to_vec).collect())
}
