//! Symmetric contrastive objective between neural and image embeddings.
//!
//! Both embedding sets are L2-normalized, compared through temperature-scaled
//! cosine logits, and scored against the identity pairing with a cross-entropy
//! taken once along rows and once along columns:
//!
//! ```text
//! logits = normalize(Z_i) · normalize(Z_j)ᵀ / τ
//! loss   = ½ (CE(logits, t) + CE(logitsᵀ, t)),   t = [0, 1, …, B−1]
//! ```
//!
//! Gradients are returned with respect to the raw, un-normalized embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{dot, softmax_cross_entropy, Tensor};

/// Rows with an L2 norm at or below this are rejected as degenerate.
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { temperature: 1.0 }
    }
}

impl ContrastiveConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        let config = Self { temperature };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Output of [`contrastive_loss`].
#[derive(Clone, Debug)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// Gradient with respect to the raw neural embeddings.
    pub d_neural: Tensor,
    /// Gradient with respect to the raw image embeddings.
    pub d_image: Tensor,
}

/// Divides every row of a `B×D` matrix by its Euclidean norm.
pub fn l2_normalize(rows: &Tensor) -> Result<Tensor> {
    Ok(normalize_with_norms(rows)?.0)
}

fn normalize_with_norms(rows: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (n, d) = rows.dims2()?;
    let mut out = Vec::with_capacity(n * d);
    let mut norms = Vec::with_capacity(n);
    for (row_idx, row) in rows.rows().take(n).enumerate() {
        let norm = dot(row, row).sqrt();
        if norm <= NORM_EPSILON {
            return Err(Error::DegenerateRow { row: row_idx, norm });
        }
        out.extend(row.iter().map(|v| v / norm));
        norms.push(norm);
    }
    Ok((Tensor::from_parts(vec![n, d], out), norms))
}

/// Normalizes a single vector.
pub fn l2_normalize_vector(v: &Tensor) -> Result<Tensor> {
    let row = v.reshape(&[1, v.numel()])?;
    l2_normalize(&row)?.reshape(v.shape())
}

/// `logits[a, b] = ⟨neural_a, image_b⟩ / τ` for unit-norm rows.
pub fn similarity_logits(neural: &Tensor, image: &Tensor, temperature: f64) -> Result<Tensor> {
    let (rows, d) = neural.dims2()?;
    let (cols, d_img) = image.dims2()?;
    if d != d_img {
        return Err(Error::shape(format!(
            "neural embeddings have width {d}, image embeddings {d_img}"
        )));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for a in neural.rows().take(rows) {
        for b in image.rows().take(cols) {
            out.push(dot(a, b) / temperature);
        }
    }
    Ok(Tensor::from_parts(vec![rows, cols], out))
}

/// Identity pairing `[0, 1, …, B−1]`.
pub fn make_targets(batch: usize) -> Result<Vec<usize>> {
    if batch == 0 {
        return Err(Error::Empty("contrastive targets for an empty batch".into()));
    }
    Ok((0..batch).collect())
}

/// Symmetric contrastive loss with analytic gradients through normalization.
pub fn contrastive_loss(neural: &Tensor, image: &Tensor, config: &ContrastiveConfig) -> Result<ContrastiveOutput> {
    config.validate()?;
    let (batch, d) = neural.dims2()?;
    if image.shape() != [batch, d] {
        return Err(Error::shape(format!(
            "neural batch {:?} and image batch {:?} must match",
            neural.shape(),
            image.shape()
        )));
    }
    let targets = make_targets(batch)?;
    let (zn, norms_n) = normalize_with_norms(neural)?;
    let (zi, norms_i) = normalize_with_norms(image)?;
    let tau = config.temperature;

    let logits = similarity_logits(&zn, &zi, tau)?;
    let (loss_rows, d_rows) = softmax_cross_entropy(&logits, &targets)?;
    let (loss_cols, d_cols) = softmax_cross_entropy(&logits.transpose2()?, &targets)?;
    let loss = 0.5 * (loss_rows + loss_cols);

    // dL/dlogits = ½ (d_rows + d_colsᵀ)
    let mut d_logits = vec![0.0; batch * batch];
    for a in 0..batch {
        for b in 0..batch {
            d_logits[a * batch + b] = 0.5 * (d_rows.data()[a * batch + b] + d_cols.data()[b * batch + a]);
        }
    }

    // dL/dzn = d_logits · zi / τ ; dL/dzi = d_logitsᵀ · zn / τ
    let mut d_zn = vec![0.0; batch * d];
    let mut d_zi = vec![0.0; batch * d];
    for a in 0..batch {
        for b in 0..batch {
            let g = d_logits[a * batch + b] / tau;
            let (row_n, row_i) = (zn.row(a), zi.row(b));
            for k in 0..d {
                d_zn[a * d + k] += g * row_i[k];
                d_zi[b * d + k] += g * row_n[k];
            }
        }
    }

    Ok(ContrastiveOutput {
        loss,
        d_neural: through_normalization(&zn, &norms_n, d_zn),
        d_image: through_normalization(&zi, &norms_i, d_zi),
    })
}

/// Chain rule through `u = z/‖z‖`: `dz = (du − u⟨u, du⟩) / ‖z‖`.
fn through_normalization(unit: &Tensor, norms: &[f64], mut d_unit: Vec<f64>) -> Tensor {
    let d = unit.shape()[1];
    for (r, norm) in norms.iter().enumerate() {
        let u = unit.row(r);
        let du = &mut d_unit[r * d..(r + 1) * d];
        let proj = dot(u, du);
        for (g, uk) in du.iter_mut().zip(u) {
            *g = (*g - uk * proj) / norm;
        }
    }
    Tensor::from_parts(unit.shape().to_vec(), d_unit)
}
