//! Residual-field application and masked least-squares scale alignment.

use crate::error::{Error, Result};
use crate::geom::{EditMask, PointMap};

/// Default stabilizer for the least-squares scale denominator.
pub const SCALE_EPS: f64 = 1e-8;

/// Dense per-view grid of 3D displacements, same layout as [`PointMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualField {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    delta: Vec<f64>,
}

impl ResidualField {
    pub fn new(views: usize, height: usize, width: usize, delta: Vec<f64>) -> Result<Self> {
        let expected = views * height * width * 3;
        if delta.len() != expected {
            return Err(Error::Shape(format!(
                "residual field expects {expected} values for {views}x{height}x{width}x3, got {}",
                delta.len()
            )));
        }
        if let Some(i) = delta.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "residual field value at flat index {i}"
            )));
        }
        Ok(Self {
            views,
            height,
            width,
            delta,
        })
    }

    pub fn zeros(views: usize, height: usize, width: usize) -> Self {
        Self {
            views,
            height,
            width,
            delta: vec![0.0; views * height * width * 3],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.delta
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.delta
    }

    pub fn same_shape(&self, p: &PointMap) -> bool {
        self.views == p.views && self.height == p.height && self.width == p.width
    }
}

/// Closed-form masked least-squares scale factor and its stabilizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleAlignment {
    pub s: f64,
    pub epsilon: f64,
}

/// Apply a residual field to a base point map.
///
/// `masked = true` gives `P_edit = P_base + delta (.) M` — pixels outside the
/// mask stay bit-identical to the base. `masked = false` adds the full field
/// (used only by the preservation objective).
pub fn apply_residual(
    base: &PointMap,
    delta: &ResidualField,
    m: &EditMask,
    masked: bool,
) -> Result<PointMap> {
    if !delta.same_shape(base) || !m.same_shape(base) {
        return Err(Error::Shape(format!(
            "apply_residual: base {} vs delta {}x{}x{} vs mask {}x{}x{}",
            base.shape_string(),
            delta.views,
            delta.height,
            delta.width,
            m.views,
            m.height,
            m.width
        )));
    }
    let mut out = base.clone();
    let dv = delta.values();
    let mv = m.values();
    let values = out.values_mut();
    for (i, &bit) in mv.iter().enumerate() {
        if bit == 1 || !masked {
            for c in 0..3 {
                values[i * 3 + c] += dv[i * 3 + c];
            }
        }
    }
    Ok(out)
}

/// Per-sample masked least-squares scale factor:
/// `s = sum((pred (.) M) . (gt (.) M)) / (sum |pred (.) M|^2 + eps)`,
/// summed over all masked pixels and channels.
pub fn masked_scale_factor(
    pred: &PointMap,
    gt: &PointMap,
    m: &EditMask,
    eps: f64,
) -> Result<ScaleAlignment> {
    if !pred.same_shape(gt) || !m.same_shape(pred) {
        return Err(Error::Shape(format!(
            "masked_scale_factor: {} vs {}",
            pred.shape_string(),
            gt.shape_string()
        )));
    }
    if m.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let pv = pred.values();
    let gv = gt.values();
    let mut num = 0.0;
    let mut den = eps;
    for (i, &bit) in m.values().iter().enumerate() {
        if bit == 1 {
            for c in 0..3 {
                let p = pv[i * 3 + c];
                num += p * gv[i * 3 + c];
                den += p * p;
            }
        }
    }
    let s = num / den;
    if !s.is_finite() {
        return Err(Error::NonFinite("scale factor".into()));
    }
    Ok(ScaleAlignment { s, epsilon: eps })
}

/// Multiply every coordinate of a point map by the alignment scale.
pub fn scale_align(pred: &PointMap, align: &ScaleAlignment) -> PointMap {
    let mut out = pred.clone();
    for v in out.values_mut() {
        *v *= align.s;
    }
    out
}
