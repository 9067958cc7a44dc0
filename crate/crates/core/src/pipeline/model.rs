use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::io::{put_u32, read_f32, read_u32, Reader};
use crate::rng::{self, Substream};

const MAGIC: &[u8; 4] = b"GKC1";
const POOL_EPS: f64 = 1e-9;

/// Shapes of a [`StudentModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Number of queries `M`.
    pub queries: usize,
    /// Query width `D_q`.
    pub query_dim: usize,
    /// Text-space width `D`.
    pub text_dim: usize,
    /// Per-pixel feature width `D_f`.
    pub feature_dim: usize,
}

/// Segment-then-classify student.
///
/// Each query `q` scores pixels with `k_q = queries[q] * mask_head` and
/// reads the image back through its own soft mask: the mask-pooled feature
/// is mapped by `pool_proj` and added to the query, giving the prior
/// embedding `V_q`. `V_q * projection` is the embedding compared with text.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentModel {
    pub queries: Array2<f64>,
    pub projection: Array2<f64>,
    pub mask_head: Array2<f64>,
    pub pool_proj: Array2<f64>,
    /// Logit of the no-object class.
    pub no_object: f64,
}

/// Activations of one forward pass over a `P x D_f` feature matrix.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `M x P` mask logits.
    pub logits: Array2<f64>,
    /// `M x P` soft masks.
    pub masks: Array2<f64>,
    /// `M x D_f` mask-pooled features.
    pub pooled: Array2<f64>,
    /// Per-query mask mass plus a small epsilon.
    pub mass: Vec<f64>,
    /// `M x D_q` student embeddings before projection.
    pub prior: Array2<f64>,
    /// `M x D` embeddings in text space.
    pub post: Array2<f64>,
}

/// Gradient of a scalar objective with respect to every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrad {
    pub queries: Array2<f64>,
    pub projection: Array2<f64>,
    pub mask_head: Array2<f64>,
    pub pool_proj: Array2<f64>,
    pub no_object: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl StudentModel {
    /// Seeded initialization: Gaussian queries and mask head scaled by the
    /// inverse square root of their fan-in, identity projection when
    /// `D_q = D`, zero no-object logit. The pooling projection copies the
    /// first `D_q` feature channels when `D_f >= D_q` and is Gaussian otherwise.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        let ModelDims {
            queries: m,
            query_dim: dq,
            text_dim: d,
            feature_dim: df,
        } = dims;
        if m == 0 || dq == 0 || d == 0 || df == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive: {dims:?}"
            )));
        }
        let mut r = rng::stream(seed, Substream::Init, &[]);
        let mut gauss = |rows: usize, cols: usize, scale: f64| {
            Array2::from_shape_simple_fn((rows, cols), || {
                let z: f64 = StandardNormal.sample(&mut r);
                z * scale
            })
        };
        let queries = gauss(m, dq, 1.0 / (dq as f64).sqrt());
        let mask_head = gauss(dq, df, 1.0 / (dq as f64).sqrt());
        let pool_proj = if df >= dq {
            let mut a = Array2::zeros((df, dq));
            for k in 0..dq {
                a[[k, k]] = 1.0;
            }
            a
        } else {
            gauss(df, dq, 1.0 / (df as f64).sqrt())
        };
        let projection = if dq == d {
            Array2::eye(d)
        } else {
            gauss(dq, d, 1.0 / (dq as f64).sqrt())
        };
        Ok(Self {
            queries,
            projection,
            mask_head,
            pool_proj,
            no_object: 0.0,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            queries: self.queries.nrows(),
            query_dim: self.queries.ncols(),
            text_dim: self.projection.ncols(),
            feature_dim: self.mask_head.ncols(),
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.dims();
        let ok = self.projection.nrows() == d.query_dim
            && self.mask_head.nrows() == d.query_dim
            && self.pool_proj.dim() == (d.feature_dim, d.query_dim);
        if ok {
            Ok(())
        } else {
            Err(shape_err(format!(
                "inconsistent parameter shapes for {d:?}"
            )))
        }
    }

    pub fn forward(&self, features: ArrayView2<f64>) -> Result<Forward> {
        let dims = self.dims();
        if features.ncols() != dims.feature_dim {
            return Err(shape_err(format!(
                "features have width {}, model expects {}",
                features.ncols(),
                dims.feature_dim
            )));
        }
        let keys = self.queries.dot(&self.mask_head);
        let logits = keys.dot(&features.t());
        let masks = logits.mapv(sigmoid);
        let mass: Vec<f64> = masks
            .sum_axis(Axis(1))
            .iter()
            .map(|s| s + POOL_EPS)
            .collect();
        let mut pooled = masks.dot(&features);
        for (mut row, s) in pooled.outer_iter_mut().zip(&mass) {
            row /= *s;
        }
        let prior = &self.queries + &pooled.dot(&self.pool_proj);
        let post = prior.dot(&self.projection);
        Ok(Forward {
            logits,
            masks,
            pooled,
            mass,
            prior,
            post,
        })
    }

    /// Backpropagates gradients on the forward outputs (`d_masks`: `M x P`,
    /// `d_prior`: `M x D_q`, `d_post`: `M x D`) into parameter gradients,
    /// accumulating into `grad`.
    pub fn backward(
        &self,
        features: ArrayView2<f64>,
        fwd: &Forward,
        d_masks: &Array2<f64>,
        d_prior: &Array2<f64>,
        d_post: &Array2<f64>,
        grad: &mut ModelGrad,
    ) {
        grad.projection += &fwd.prior.t().dot(d_post);
        let d_v = d_prior + &d_post.dot(&self.projection.t());
        grad.queries += &d_v;
        grad.pool_proj += &fwd.pooled.t().dot(&d_v);
        let d_pooled = d_v.dot(&self.pool_proj.t());
        // pooled_q = sum_p S_qp f_p / mass_q
        let proj = d_pooled.dot(&features.t());
        let mut d_s = d_masks.clone();
        for q in 0..d_s.nrows() {
            let offset: f64 = d_pooled.row(q).dot(&fwd.pooled.row(q));
            let inv = 1.0 / fwd.mass[q];
            for (ds, pr) in d_s.row_mut(q).iter_mut().zip(proj.row(q)) {
                *ds += (pr - offset) * inv;
            }
        }
        let d_z = &d_s * &fwd.masks.mapv(|s| s * (1.0 - s));
        let d_keys = d_z.dot(&features);
        grad.queries += &d_keys.dot(&self.mask_head.t());
        grad.mask_head += &self.queries.t().dot(&d_keys);
    }

    /// Applies `theta -= lr * grad`.
    pub fn apply(&mut self, grad: &ModelGrad, lr: f64) {
        self.queries.scaled_add(-lr, &grad.queries);
        self.projection.scaled_add(-lr, &grad.projection);
        self.mask_head.scaled_add(-lr, &grad.mask_head);
        self.pool_proj.scaled_add(-lr, &grad.pool_proj);
        self.no_object -= lr * grad.no_object;
    }

    /// Parameters flattened in checkpoint order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend(self.queries.iter());
        v.extend(self.projection.iter());
        v.extend(self.mask_head.iter());
        v.extend(self.pool_proj.iter());
        v.push(self.no_object);
        v
    }

    pub fn param_count(&self) -> usize {
        self.queries.len() + self.projection.len() + self.mask_head.len() + self.pool_proj.len() + 1
    }

    /// Inverse of [`to_flat`](Self::to_flat) for the given shapes.
    pub fn from_flat(dims: ModelDims, flat: &[f64]) -> Result<Self> {
        let ModelDims {
            queries: m,
            query_dim: dq,
            text_dim: d,
            feature_dim: df,
        } = dims;
        let sizes = [m * dq, dq * d, dq * df, df * dq];
        let total: usize = sizes.iter().sum::<usize>() + 1;
        if flat.len() != total {
            return Err(shape_err(format!(
                "expected {total} parameters, got {}",
                flat.len()
            )));
        }
        let mut at = 0;
        let mut next = |rows: usize, cols: usize| {
            let a = Array2::from_shape_vec((rows, cols), flat[at..at + rows * cols].to_vec())
                .expect("sizes computed above");
            at += rows * cols;
            a
        };
        let queries = next(m, dq);
        let projection = next(dq, d);
        let mask_head = next(dq, df);
        let pool_proj = next(df, dq);
        Ok(Self {
            queries,
            projection,
            mask_head,
            pool_proj,
            no_object: flat[total - 1],
        })
    }

    /// Checkpoint bytes: magic `GKC1`, `u32` M, D_q, D, D_f, then queries,
    /// projection, mask_head, pool_proj and the no-object logit as
    /// row-major `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dims();
        let mut buf = Vec::with_capacity(20 + 4 * self.param_count());
        buf.extend_from_slice(MAGIC);
        for v in [d.queries, d.query_dim, d.text_dim, d.feature_dim] {
            put_u32(&mut buf, v as u32);
        }
        for v in self.to_flat() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(bytes);
        if rd.take(4)? != MAGIC {
            return Err(Error::Format("checkpoint: bad magic".into()));
        }
        let mut dim = || read_u32(&mut rd).map(|v| v as usize);
        let dims = ModelDims {
            queries: dim()?,
            query_dim: dim()?,
            text_dim: dim()?,
            feature_dim: dim()?,
        };
        let total = dims.queries * dims.query_dim
            + dims.query_dim * dims.text_dim
            + 2 * dims.query_dim * dims.feature_dim
            + 1;
        let flat = (0..total)
            .map(|_| read_f32(&mut rd).map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        rd.finish()?;
        let model = Self::from_flat(dims, &flat)?;
        if model.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(
                "checkpoint holds non-finite parameters".into(),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m = Self::from_bytes(&fs::read(path)?)?;
        m.check_shapes()?;
        Ok(m)
    }

    /// Rounds every parameter to `f32` precision, so a model equals its
    /// reloaded checkpoint.
    pub fn quantized(&self) -> Self {
        let flat: Vec<f64> = self
            .to_flat()
            .into_iter()
            .map(|v| f64::from(v as f32))
            .collect();
        Self::from_flat(self.dims(), &flat).expect("same shapes")
    }
}

impl ModelGrad {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            queries: Array2::zeros((dims.queries, dims.query_dim)),
            projection: Array2::zeros((dims.query_dim, dims.text_dim)),
            mask_head: Array2::zeros((dims.query_dim, dims.feature_dim)),
            pool_proj: Array2::zeros((dims.feature_dim, dims.query_dim)),
            no_object: 0.0,
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend(self.queries.iter());
        v.extend(self.projection.iter());
        v.extend(self.mask_head.iter());
        v.extend(self.pool_proj.iter());
        v.push(self.no_object);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}
