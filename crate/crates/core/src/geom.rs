//! Camera/point-map geometry and masked reductions.
//!
//! Everything downstream (losses, consensus filtering, the model) is built on
//! the types here: dense per-view point maps, pinhole cameras, binary edit
//! masks, and finite-difference normal maps. All arithmetic is f64.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Depth guard for all perspective operations (scene units).
pub const Z_MIN: f64 = 1e-6;

/// Orthonormality tolerance for camera rotations.
pub const ROTATION_TOL: f64 = 1e-9;

/// Cross products below this norm mark a normal cell invalid.
pub const NORMAL_DEGENERACY_EPS: f64 = 1e-12;

/// Coordinate frame tag carried by a [`PointMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    World,
    Camera,
}

/// Dense grid of 3D points, one (H, W) grid per view, indexed (n, h, w).
///
/// Storage is row-major with the channel fastest:
/// `points[((n*H + h)*W + w)*3 + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub frame: Frame,
    points: Vec<f64>,
}

impl PointMap {
    pub fn new(
        views: usize,
        height: usize,
        width: usize,
        frame: Frame,
        points: Vec<f64>,
    ) -> Result<Self> {
        let expected = views * height * width * 3;
        if points.len() != expected {
            return Err(Error::Shape(format!(
                "point map expects {expected} values for {views}x{height}x{width}x3, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "point map value at flat index {i}"
            )));
        }
        Ok(Self {
            views,
            height,
            width,
            frame,
            points,
        })
    }

    pub fn zeros(views: usize, height: usize, width: usize, frame: Frame) -> Self {
        Self {
            views,
            height,
            width,
            frame,
            points: vec![0.0; views * height * width * 3],
        }
    }

    #[inline]
    pub fn idx(&self, n: usize, h: usize, w: usize) -> usize {
        ((n * self.height + h) * self.width + w) * 3
    }

    #[inline]
    pub fn point(&self, n: usize, h: usize, w: usize) -> Vector3<f64> {
        let i = self.idx(n, h, w);
        Vector3::new(self.points[i], self.points[i + 1], self.points[i + 2])
    }

    #[inline]
    pub fn set_point(&mut self, n: usize, h: usize, w: usize, p: Vector3<f64>) {
        let i = self.idx(n, h, w);
        self.points[i] = p.x;
        self.points[i + 1] = p.y;
        self.points[i + 2] = p.z;
    }

    pub fn values(&self) -> &[f64] {
        &self.points
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.points
    }

    pub fn pixels(&self) -> usize {
        self.views * self.height * self.width
    }

    pub fn same_shape(&self, other: &PointMap) -> bool {
        self.views == other.views && self.height == other.height && self.width == other.width
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}x3", self.views, self.height, self.width)
    }
}

/// Rigid world-to-camera transform plus pinhole intrinsics for one view.
///
/// `x_cam = rotation * x_world + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: usize,
    pub width: usize,
}

impl CameraView {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let rtr = rotation.transpose() * rotation;
        let mut max_dev: f64 = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                let target = if r == c { 1.0 } else { 0.0 };
                max_dev = max_dev.max((rtr[(r, c)] - target).abs());
            }
        }
        if max_dev > ROTATION_TOL {
            return Err(Error::Domain(format!(
                "rotation not orthonormal (max |R'R - I| = {max_dev:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::Domain(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Domain(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if !(0.0..(width as f64)).contains(&cx) || !(0.0..(height as f64)).contains(&cy) {
            return Err(Error::Domain(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("camera translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
            fx,
            fy,
            cx,
            cy,
            height,
            width,
        })
    }

    /// Camera with a look-at pose: positioned at `center`, optical axis toward
    /// `target`, image "up" derived from `up`. Pixel convention: (u, v) = (w, h),
    /// v grows downward.
    pub fn look_at(
        center: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let forward = target - center;
        let norm = forward.norm();
        if norm < 1e-12 {
            return Err(Error::Domain(
                "look_at target coincides with camera center".into(),
            ));
        }
        let f = forward / norm;
        let mut right = up.cross(&f);
        if right.norm() < 1e-9 {
            // Optical axis parallel to `up`; pick another reference.
            right = Vector3::new(1.0, 0.0, 0.0).cross(&f);
            if right.norm() < 1e-9 {
                right = Vector3::new(0.0, 1.0, 0.0).cross(&f);
            }
        }
        let r = right.normalize();
        let d = f.cross(&r); // image-down axis, completes a right-handed frame
        let rotation = Matrix3::from_rows(&[r.transpose(), d.transpose(), f.transpose()]);
        let translation = -rotation * center;
        Self::new(rotation, translation, fx, fy, cx, cy, height, width)
    }

    /// Camera center in world coordinates: `-R' t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Optical axis (camera +z) in world coordinates: third row of `R`.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.transpose() * Vector3::new(0.0, 0.0, 1.0)
    }

    #[inline]
    pub fn world_to_cam(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn cam_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }
}

/// Binary per-pixel selector, same (N, H, W) grid as its paired point map.
#[derive(Debug, Clone, PartialEq)]
pub struct EditMask {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    values: Vec<u8>,
}

impl EditMask {
    pub fn new(views: usize, height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        let expected = views * height * width;
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "mask expects {expected} values for {views}x{height}x{width}, got {}",
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Domain("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            views,
            height,
            width,
            values,
        })
    }

    pub fn zeros(views: usize, height: usize, width: usize) -> Self {
        Self {
            views,
            height,
            width,
            values: vec![0; views * height * width],
        }
    }

    #[inline]
    pub fn idx(&self, n: usize, h: usize, w: usize) -> usize {
        (n * self.height + h) * self.width + w
    }

    #[inline]
    pub fn get(&self, n: usize, h: usize, w: usize) -> u8 {
        self.values[self.idx(n, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, h: usize, w: usize, v: u8) {
        let i = self.idx(n, h, w);
        self.values[i] = v;
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [u8] {
        &mut self.values
    }

    /// Single-view slice of length H*W.
    pub fn view(&self, n: usize) -> &[u8] {
        let stride = self.height * self.width;
        &self.values[n * stride..(n + 1) * stride]
    }

    pub fn view_mut(&mut self, n: usize) -> &mut [u8] {
        let stride = self.height * self.width;
        &mut self.values[n * stride..(n + 1) * stride]
    }

    /// Number of set pixels over all views.
    pub fn count(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    /// Complement mask (1 - M).
    pub fn complement(&self) -> EditMask {
        EditMask {
            views: self.views,
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// Mask on the (H-1, W-1) normal grid: a cell is set iff all three points
    /// of its finite-difference stencil are in-mask,
    /// `M'(h,w) = M(h,w) * M(h,w+1) * M(h+1,w)`.
    pub fn normal_grid(&self) -> EditMask {
        let (nh, nw) = (self.height - 1, self.width - 1);
        let mut values = vec![0u8; self.views * nh * nw];
        for n in 0..self.views {
            for h in 0..nh {
                for w in 0..nw {
                    let v = self.get(n, h, w) & self.get(n, h, w + 1) & self.get(n, h + 1, w);
                    values[(n * nh + h) * nw + w] = v;
                }
            }
        }
        EditMask {
            views: self.views,
            height: nh,
            width: nw,
            values,
        }
    }

    pub fn same_shape(&self, p: &PointMap) -> bool {
        self.views == p.views && self.height == p.height && self.width == p.width
    }
}

/// Per-cell unit normals on the (H-1, W-1) finite-difference grid.
#[derive(Debug, Clone)]
pub struct NormalMap {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    normals: Vec<f64>,
    valid: Vec<u8>,
}

impl NormalMap {
    #[inline]
    pub fn idx(&self, n: usize, h: usize, w: usize) -> usize {
        (n * self.height + h) * self.width + w
    }

    #[inline]
    pub fn normal(&self, n: usize, h: usize, w: usize) -> Vector3<f64> {
        let i = self.idx(n, h, w) * 3;
        Vector3::new(self.normals[i], self.normals[i + 1], self.normals[i + 2])
    }

    #[inline]
    pub fn is_valid(&self, n: usize, h: usize, w: usize) -> bool {
        self.valid[self.idx(n, h, w)] == 1
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().map(|&v| v as usize).sum()
    }
}

/// Transform a world-frame point map into per-view camera frames.
pub fn world_to_camera(p: &PointMap, cams: &[CameraView]) -> Result<PointMap> {
    if p.views != cams.len() {
        return Err(Error::Shape(format!(
            "point map has {} views but {} cameras given",
            p.views,
            cams.len()
        )));
    }
    let mut out = p.clone();
    out.frame = Frame::Camera;
    for n in 0..p.views {
        let cam = &cams[n];
        for h in 0..p.height {
            for w in 0..p.width {
                out.set_point(n, h, w, cam.world_to_cam(&p.point(n, h, w)));
            }
        }
    }
    Ok(out)
}

/// Inverse of [`world_to_camera`].
pub fn camera_to_world(p: &PointMap, cams: &[CameraView]) -> Result<PointMap> {
    if p.views != cams.len() {
        return Err(Error::Shape(format!(
            "point map has {} views but {} cameras given",
            p.views,
            cams.len()
        )));
    }
    let mut out = p.clone();
    out.frame = Frame::World;
    for n in 0..p.views {
        let cam = &cams[n];
        for h in 0..p.height {
            for w in 0..p.width {
                out.set_point(n, h, w, cam.cam_to_world(&p.point(n, h, w)));
            }
        }
    }
    Ok(out)
}

/// Pinhole projection of a camera-frame point. Returns `(u, v, z)` or `None`
/// when the point is behind the depth guard or lands outside `[0,W)x[0,H)`.
pub fn project(point_cam: &Vector3<f64>, cam: &CameraView) -> Option<(f64, f64, f64)> {
    let z = point_cam.z;
    if z <= Z_MIN {
        return None;
    }
    let u = cam.fx * point_cam.x / z + cam.cx;
    let v = cam.fy * point_cam.y / z + cam.cy;
    if u < 0.0 || u >= cam.width as f64 || v < 0.0 || v >= cam.height as f64 {
        return None;
    }
    Some((u, v, z))
}

/// Invert [`project`] and map back to the world frame.
pub fn unproject(u: f64, v: f64, z: f64, cam: &CameraView) -> Result<Vector3<f64>> {
    if z <= Z_MIN {
        return Err(Error::Domain(format!("unproject depth {z} <= {Z_MIN}")));
    }
    let x = (u - cam.cx) / cam.fx * z;
    let y = (v - cam.cy) / cam.fy * z;
    Ok(cam.cam_to_world(&Vector3::new(x, y, z)))
}

/// Perspective ray `(x/z, y/z)` of a camera-frame point; `None` when the
/// depth guard fails (callers mask the pixel out).
#[inline]
pub fn perspective_ray(point_cam: &Vector3<f64>) -> Option<[f64; 2]> {
    if point_cam.z <= Z_MIN {
        return None;
    }
    Some([point_cam.x / point_cam.z, point_cam.y / point_cam.z])
}

/// Natural log-depth of a camera-frame point; `None` when the depth guard fails.
#[inline]
pub fn log_depth(point_cam: &Vector3<f64>) -> Option<f64> {
    if point_cam.z <= Z_MIN {
        return None;
    }
    Some(point_cam.z.ln())
}

/// Finite-difference surface normals on the (H-1, W-1) grid.
///
/// Per cell: `t_u = P(h,w+1) - P(h,w)`, `t_v = P(h+1,w) - P(h,w)`,
/// `n = (t_u x t_v) / |t_u x t_v|`; cells with a near-zero cross product are
/// marked invalid.
pub fn compute_normals(p: &PointMap) -> Result<NormalMap> {
    if p.height < 2 || p.width < 2 {
        return Err(Error::Shape(format!(
            "normals need H,W >= 2, got {}x{}",
            p.height, p.width
        )));
    }
    let (nh, nw) = (p.height - 1, p.width - 1);
    let cells = p.views * nh * nw;
    let mut normals = vec![0.0; cells * 3];
    let mut valid = vec![0u8; cells];
    for n in 0..p.views {
        for h in 0..nh {
            for w in 0..nw {
                let p0 = p.point(n, h, w);
                let tu = p.point(n, h, w + 1) - p0;
                let tv = p.point(n, h + 1, w) - p0;
                let cross = tu.cross(&tv);
                let norm = cross.norm();
                let i = (n * nh + h) * nw + w;
                if norm >= NORMAL_DEGENERACY_EPS {
                    let unit = cross / norm;
                    normals[i * 3] = unit.x;
                    normals[i * 3 + 1] = unit.y;
                    normals[i * 3 + 2] = unit.z;
                    valid[i] = 1;
                }
            }
        }
    }
    Ok(NormalMap {
        views: p.views,
        height: nh,
        width: nw,
        normals,
        valid,
    })
}

/// Masked mean absolute difference over flat channel data:
/// `sum_i m_i * sum_c |a - b| / (channels * sum m)`.
///
/// `a` and `b` have `mask.len() * channels` values. Errors on an empty mask.
pub fn masked_l1_flat(a: &[f64], b: &[f64], mask: &[u8], channels: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != mask.len() * channels {
        return Err(Error::Shape(format!(
            "masked_l1: {} vs {} values over {} mask pixels x {} channels",
            a.len(),
            b.len(),
            mask.len(),
            channels
        )));
    }
    let count: usize = mask.iter().map(|&m| m as usize).sum();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mut acc = 0.0;
    for (i, &m) in mask.iter().enumerate() {
        if m == 1 {
            for c in 0..channels {
                acc += (a[i * channels + c] - b[i * channels + c]).abs();
            }
        }
    }
    Ok(acc / (channels as f64 * count as f64))
}

/// Masked l1 distance between two point maps (3 channels).
pub fn masked_l1(a: &PointMap, b: &PointMap, m: &EditMask) -> Result<f64> {
    if !a.same_shape(b) || !m.same_shape(a) {
        return Err(Error::Shape(format!(
            "masked_l1: {} vs {} with {}x{}x{} mask",
            a.shape_string(),
            b.shape_string(),
            m.views,
            m.height,
            m.width
        )));
    }
    masked_l1_flat(a.values(), b.values(), m.values(), 3)
}

/// Intersection-over-union of two single-view mask slices. Two empty masks
/// count as full agreement (1.0).
pub fn mask_iou(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "mask_iou: {} vs {} pixels",
            a.len(),
            b.len()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}
