//! Training objectives over point maps: edit reconstruction, preservation,
//! normal consistency, camera-frame consistency, residual regularization, and
//! their weighted total with an analytic gradient for the residual field.
//!
//! Empty-mask policy: the per-term functions return 0 with a warning flag so
//! batch training survives degenerate samples; the strict empty-mask error
//! lives at the geometry primitives.

use nalgebra::Vector3;

use crate::edit::{apply_residual, masked_scale_factor, scale_align, ResidualField, SCALE_EPS};
use crate::error::{Error, Result};
use crate::geom::{compute_normals, masked_l1, CameraView, EditMask, PointMap, Z_MIN};

/// Weights of the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub edit: f64,
    pub pres: f64,
    pub normal: f64,
    pub cam: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            edit: 1.0,
            pres: 1.0,
            normal: 0.1,
            cam: 0.1,
            delta: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("edit", self.edit),
            ("pres", self.pres),
            ("normal", self.normal),
            ("cam", self.cam),
            ("delta", self.delta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Degenerate-sample conditions hit while evaluating the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossWarning {
    EmptyEditMask,
    EmptyPreserveRegion,
    NoValidNormalCells,
    AllCamPixelsExcluded,
}

/// One evaluation of the total objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub edit: f64,
    pub pres: f64,
    pub normal: f64,
    pub cam: f64,
    pub delta: f64,
    pub total: f64,
    /// Pixels dropped from the camera-frame terms by the depth guard.
    pub excluded_pixels: usize,
    pub warnings: Vec<LossWarning>,
}

impl LossReport {
    /// Flat key-value record, one metric per line.
    pub fn to_kv(&self) -> String {
        format!(
            "edit {}\npres {}\nnormal {}\ncam {}\ndelta {}\ntotal {}\nexcluded_pixels {}\n",
            self.edit,
            self.pres,
            self.normal,
            self.cam,
            self.delta,
            self.total,
            self.excluded_pixels
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.edit,
            self.pres,
            self.normal,
            self.cam,
            self.delta,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Masked l1 between the aligned prediction and the target, inside the mask.
pub fn loss_edit(pred_aligned: &PointMap, gt: &PointMap, m: &EditMask) -> Result<(f64, bool)> {
    if m.count() == 0 {
        return Ok((0.0, true));
    }
    Ok((masked_l1(pred_aligned, gt, m)?, false))
}

/// Mean absolute residual outside the mask. The base map is frozen
/// (stop-gradient), so the term reduces to the field magnitude on 1-M.
pub fn loss_pres(base: &PointMap, delta: &ResidualField, m: &EditMask) -> Result<(f64, bool)> {
    if !delta.same_shape(base) || !m.same_shape(base) {
        return Err(Error::Shape("loss_pres operand shapes differ".into()));
    }
    let outside = base.pixels() - m.count();
    if outside == 0 {
        return Ok((0.0, true));
    }
    let mut acc = 0.0;
    let dv = delta.values();
    for (i, &bit) in m.values().iter().enumerate() {
        if bit == 0 {
            for c in 0..3 {
                acc += dv[i * 3 + c].abs();
            }
        }
    }
    Ok((acc / (3.0 * outside as f64), false))
}

/// Mean angular deviation `1 - <n_pred, n_gt>` over normal-grid cells that are
/// in-mask and have well-defined normals on both maps.
pub fn loss_normal(pred_aligned: &PointMap, gt: &PointMap, m: &EditMask) -> Result<(f64, bool)> {
    let np = compute_normals(pred_aligned)?;
    let ng = compute_normals(gt)?;
    let grid = m.normal_grid();
    let mut acc = 0.0;
    let mut count = 0usize;
    for n in 0..grid.views {
        for h in 0..grid.height {
            for w in 0..grid.width {
                if grid.get(n, h, w) == 1 && np.is_valid(n, h, w) && ng.is_valid(n, h, w) {
                    acc += 1.0 - np.normal(n, h, w).dot(&ng.normal(n, h, w));
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Ok((0.0, true));
    }
    Ok((acc / count as f64, false))
}

/// Camera-frame consistency: masked l1 on perspective rays (2 channels) plus
/// masked l1 on log-depth (1 channel). Pixels failing the depth guard in
/// either map are excluded from the effective mask.
///
/// Returns (value, excluded pixel count, warned).
pub fn loss_cam(
    pred_aligned: &PointMap,
    gt: &PointMap,
    m: &EditMask,
    cams: &[CameraView],
) -> Result<(f64, usize, bool)> {
    if !pred_aligned.same_shape(gt) || !m.same_shape(pred_aligned) {
        return Err(Error::Shape("loss_cam operand shapes differ".into()));
    }
    if pred_aligned.views != cams.len() {
        return Err(Error::Shape(format!(
            "loss_cam: {} views vs {} cameras",
            pred_aligned.views,
            cams.len()
        )));
    }
    let mut ray_acc = 0.0;
    let mut depth_acc = 0.0;
    let mut effective = 0usize;
    let mut excluded = 0usize;
    for n in 0..pred_aligned.views {
        let cam = &cams[n];
        for h in 0..pred_aligned.height {
            for w in 0..pred_aligned.width {
                if m.get(n, h, w) == 0 {
                    continue;
                }
                let x = cam.world_to_cam(&pred_aligned.point(n, h, w));
                let y = cam.world_to_cam(&gt.point(n, h, w));
                if x.z <= Z_MIN || y.z <= Z_MIN {
                    excluded += 1;
                    continue;
                }
                effective += 1;
                ray_acc += (x.x / x.z - y.x / y.z).abs() + (x.y / x.z - y.y / y.z).abs();
                depth_acc += (x.z.ln() - y.z.ln()).abs();
            }
        }
    }
    if effective == 0 {
        return Ok((0.0, excluded, true));
    }
    let value = ray_acc / (2.0 * effective as f64) + depth_acc / effective as f64;
    Ok((value, excluded, false))
}

/// Masked mean squared residual magnitude: `sum M |delta|^2 / (3 sum M)`.
pub fn loss_residual_reg(delta: &ResidualField, m: &EditMask) -> Result<(f64, bool)> {
    if delta.views != m.views || delta.height != m.height || delta.width != m.width {
        return Err(Error::Shape(
            "loss_residual_reg operand shapes differ".into(),
        ));
    }
    let count = m.count();
    if count == 0 {
        return Ok((0.0, true));
    }
    let mut acc = 0.0;
    let dv = delta.values();
    for (i, &bit) in m.values().iter().enumerate() {
        if bit == 1 {
            for c in 0..3 {
                let d = dv[i * 3 + c];
                acc += d * d;
            }
        }
    }
    Ok((acc / (3.0 * count as f64), false))
}

/// Full objective. Aligns the masked application with the least-squares scale
/// (whose gradient flows through the prediction) and returns the weighted sum.
pub fn loss_total(
    base: &PointMap,
    delta: &ResidualField,
    gt: &PointMap,
    m: &EditMask,
    cams: &[CameraView],
    weights: &LossWeights,
) -> Result<LossReport> {
    Ok(total_impl(base, delta, gt, m, cams, weights, None)?.0)
}

/// [`loss_total`] plus the analytic gradient of the total w.r.t. the residual
/// field. The base map is frozen: no gradient flows to it.
pub fn loss_total_with_grad(
    base: &PointMap,
    delta: &ResidualField,
    gt: &PointMap,
    m: &EditMask,
    cams: &[CameraView],
    weights: &LossWeights,
) -> Result<(LossReport, ResidualField)> {
    let mut grad = ResidualField::zeros(base.views, base.height, base.width);
    let (report, _) = total_impl(base, delta, gt, m, cams, weights, Some(&mut grad))?;
    Ok((report, grad))
}

fn total_impl(
    base: &PointMap,
    delta: &ResidualField,
    gt: &PointMap,
    m: &EditMask,
    cams: &[CameraView],
    weights: &LossWeights,
    grad_out: Option<&mut ResidualField>,
) -> Result<(LossReport, ())> {
    if !base.same_shape(gt) || !delta.same_shape(base) || !m.same_shape(base) {
        return Err(Error::Shape("loss_total operand shapes differ".into()));
    }
    if base.views != cams.len() {
        return Err(Error::Shape(format!(
            "loss_total: {} views vs {} cameras",
            base.views,
            cams.len()
        )));
    }
    weights.validate()?;

    let mask_count = m.count();
    let edited = apply_residual(base, delta, m, true)?;
    let (align, aligned) = if mask_count > 0 {
        let align = masked_scale_factor(&edited, gt, m, SCALE_EPS)?;
        let aligned = scale_align(&edited, &align);
        (align, aligned)
    } else {
        (
            crate::edit::ScaleAlignment {
                s: 1.0,
                epsilon: SCALE_EPS,
            },
            edited.clone(),
        )
    };

    let mut warnings = Vec::new();
    let (edit, warn_e) = loss_edit(&aligned, gt, m)?;
    if warn_e {
        warnings.push(LossWarning::EmptyEditMask);
    }
    let (pres, warn_p) = loss_pres(base, delta, m)?;
    if warn_p {
        warnings.push(LossWarning::EmptyPreserveRegion);
    }
    let (normal, warn_n) = loss_normal(&aligned, gt, m)?;
    if warn_n {
        warnings.push(LossWarning::NoValidNormalCells);
    }
    let (cam, excluded_pixels, warn_c) = loss_cam(&aligned, gt, m, cams)?;
    if warn_c {
        warnings.push(LossWarning::AllCamPixelsExcluded);
    }
    let (dreg, _warn_d) = loss_residual_reg(delta, m)?;

    let total = weights.edit * edit
        + weights.pres * pres
        + weights.normal * normal
        + weights.cam * cam
        + weights.delta * dreg;

    if let Some(grad) = grad_out {
        backward(
            base, delta, gt, m, cams, weights, &edited, align.s, &aligned, grad,
        )?;
    }

    Ok((
        LossReport {
            edit,
            pres,
            normal,
            cam,
            delta: dreg,
            total,
            excluded_pixels,
            warnings,
        },
        (),
    ))
}

/// Reverse pass of [`loss_total`] w.r.t. the residual field.
#[allow(clippy::too_many_arguments)]
fn backward(
    base: &PointMap,
    delta: &ResidualField,
    gt: &PointMap,
    m: &EditMask,
    cams: &[CameraView],
    weights: &LossWeights,
    edited: &PointMap,
    s: f64,
    aligned: &PointMap,
    grad: &mut ResidualField,
) -> Result<()> {
    let pixels = base.pixels();
    let mask_count = m.count();
    let mv = m.values();
    let mut g_aligned = vec![0.0f64; pixels * 3];

    // L_edit: d/dP^ of M |P^ - gt| / (3 sum M).
    if mask_count > 0 && weights.edit != 0.0 {
        let coef = weights.edit / (3.0 * mask_count as f64);
        let av = aligned.values();
        let gv = gt.values();
        for (i, &bit) in mv.iter().enumerate() {
            if bit == 1 {
                for c in 0..3 {
                    let d = av[i * 3 + c] - gv[i * 3 + c];
                    g_aligned[i * 3 + c] += coef * sign(d);
                }
            }
        }
    }

    // L_normal: backprop through cross products and normalization on the
    // aligned map's finite-difference stencils.
    if weights.normal != 0.0 {
        let np = compute_normals(aligned)?;
        let ngm = compute_normals(gt)?;
        let grid = m.normal_grid();
        let mut count = 0usize;
        for n in 0..grid.views {
            for h in 0..grid.height {
                for w in 0..grid.width {
                    if grid.get(n, h, w) == 1 && np.is_valid(n, h, w) && ngm.is_valid(n, h, w) {
                        count += 1;
                    }
                }
            }
        }
        if count > 0 {
            let coef = weights.normal / count as f64;
            for n in 0..grid.views {
                for h in 0..grid.height {
                    for w in 0..grid.width {
                        if grid.get(n, h, w) != 1 || !np.is_valid(n, h, w) || !ngm.is_valid(n, h, w)
                        {
                            continue;
                        }
                        let p0 = aligned.point(n, h, w);
                        let tu = aligned.point(n, h, w + 1) - p0;
                        let tv = aligned.point(n, h + 1, w) - p0;
                        let cross = tu.cross(&tv);
                        let cn = cross.norm();
                        let unit = cross / cn;
                        let n_gt = ngm.normal(n, h, w);
                        // contribution: coef * (1 - unit . n_gt)
                        let g_n = -coef * n_gt;
                        let g_c = (g_n - unit * g_n.dot(&unit)) / cn;
                        let g_tu = tv.cross(&g_c);
                        let g_tv = g_c.cross(&tu);
                        add3(&mut g_aligned, aligned.idx(n, h, w + 1), &g_tu);
                        add3(&mut g_aligned, aligned.idx(n, h + 1, w), &g_tv);
                        let neg = -(g_tu + g_tv);
                        add3(&mut g_aligned, aligned.idx(n, h, w), &neg);
                    }
                }
            }
        }
    }

    // L_cam: rays and log-depth per effective pixel, mapped back through the
    // world-to-camera rotation.
    if weights.cam != 0.0 {
        let mut effective = 0usize;
        for n in 0..base.views {
            let cam = &cams[n];
            for h in 0..base.height {
                for w in 0..base.width {
                    if m.get(n, h, w) == 0 {
                        continue;
                    }
                    let x = cam.world_to_cam(&aligned.point(n, h, w));
                    let y = cam.world_to_cam(&gt.point(n, h, w));
                    if x.z > Z_MIN && y.z > Z_MIN {
                        effective += 1;
                    }
                }
            }
        }
        if effective > 0 {
            let coef_ray = weights.cam / (2.0 * effective as f64);
            let coef_depth = weights.cam / effective as f64;
            for n in 0..base.views {
                let cam = &cams[n];
                let rt = cam.rotation.transpose();
                for h in 0..base.height {
                    for w in 0..base.width {
                        if m.get(n, h, w) == 0 {
                            continue;
                        }
                        let x = cam.world_to_cam(&aligned.point(n, h, w));
                        let y = cam.world_to_cam(&gt.point(n, h, w));
                        if x.z <= Z_MIN || y.z <= Z_MIN {
                            continue;
                        }
                        let sr_x = sign(x.x / x.z - y.x / y.z);
                        let sr_y = sign(x.y / x.z - y.y / y.z);
                        let sd = sign(x.z.ln() - y.z.ln());
                        let mut g_cam = Vector3::new(
                            coef_ray * sr_x / x.z,
                            coef_ray * sr_y / x.z,
                            -coef_ray * (sr_x * x.x + sr_y * x.y) / (x.z * x.z),
                        );
                        g_cam.z += coef_depth * sd / x.z;
                        let g_world = rt * g_cam;
                        add3(&mut g_aligned, aligned.idx(n, h, w), &g_world);
                    }
                }
            }
        }
    }

    // aligned = s * edited, with s = num / (sum M |edited|^2 + eps) flowing
    // through the prediction.
    let ev = edited.values();
    let gv = gt.values();
    let grad_values = grad.values_mut();
    if mask_count > 0 {
        let mut den = SCALE_EPS;
        for (i, &bit) in mv.iter().enumerate() {
            if bit == 1 {
                for c in 0..3 {
                    let e = ev[i * 3 + c];
                    den += e * e;
                }
            }
        }
        let mut g_s = 0.0;
        for i in 0..pixels * 3 {
            g_s += g_aligned[i] * ev[i];
        }
        // g_edited = s * g_aligned + g_s * ds/d(edited)
        for (i, &bit) in mv.iter().enumerate() {
            for c in 0..3 {
                let j = i * 3 + c;
                let mut g = s * g_aligned[j];
                if bit == 1 {
                    g += g_s * (gv[j] - 2.0 * s * ev[j]) / den;
                }
                // edited = base + delta (.) M
                if bit == 1 {
                    grad_values[j] += g;
                }
            }
        }
    }

    // L_delta: 2 M delta / (3 sum M).
    if mask_count > 0 && weights.delta != 0.0 {
        let coef = 2.0 * weights.delta / (3.0 * mask_count as f64);
        let dv = delta.values();
        for (i, &bit) in mv.iter().enumerate() {
            if bit == 1 {
                for c in 0..3 {
                    grad_values[i * 3 + c] += coef * dv[i * 3 + c];
                }
            }
        }
    }

    // L_pres: (1-M) sign(delta) / (3 sum(1-M)).
    let outside = pixels - mask_count;
    if outside > 0 && weights.pres != 0.0 {
        let coef = weights.pres / (3.0 * outside as f64);
        let dv = delta.values();
        for (i, &bit) in mv.iter().enumerate() {
            if bit == 0 {
                for c in 0..3 {
                    grad_values[i * 3 + c] += coef * sign(dv[i * 3 + c]);
                }
            }
        }
    }

    Ok(())
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn add3(buf: &mut [f64], idx: usize, v: &Vector3<f64>) {
    buf[idx] += v.x;
    buf[idx + 1] += v.y;
    buf[idx + 2] += v.z;
}
