//! Data-pipeline geometry: consensus volumes from multi-view masks, mask
//! validity gating, round-trip re-projection fidelity, and view selection.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::{mask_iou, project, CameraView, EditMask, PointMap};

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_RHO: f64 = 0.5;
pub const DEFAULT_GRID_RESOLUTION: usize = 64;

/// Axis-aligned voxel lattice: origin corner, cubic voxel edge, counts.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn new(origin: Vector3<f64>, voxel_size: f64, dims: [usize; 3]) -> Result<Self> {
        if voxel_size <= 0.0 {
            return Err(Error::Domain(format!(
                "voxel size must be positive, got {voxel_size}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Domain("grid dims must be positive".into()));
        }
        Ok(Self {
            origin,
            voxel_size,
            dims,
        })
    }

    /// Bounding box of all masked points expanded by 5%, with the voxel edge
    /// set by the longest extent over `resolution`.
    pub fn fit(points: &PointMap, mask: &EditMask, resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::Domain("grid resolution must be positive".into()));
        }
        if !mask.same_shape(points) {
            return Err(Error::Shape("grid fit: mask/point shapes differ".into()));
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        let mut any = false;
        for (i, &bit) in mask.values().iter().enumerate() {
            if bit == 1 {
                any = true;
                for c in 0..3 {
                    let v = points.values()[i * 3 + c];
                    lo[c] = lo[c].min(v);
                    hi[c] = hi[c].max(v);
                }
            }
        }
        if !any {
            return Err(Error::EmptyMask);
        }
        let center = (lo + hi) / 2.0;
        let mut half = (hi - lo) / 2.0 * 1.05;
        for c in 0..3 {
            half[c] = half[c].max(1e-6);
        }
        let longest = half.iter().cloned().fold(0.0, f64::max) * 2.0;
        let voxel_size = longest / resolution as f64;
        let mut dims = [0usize; 3];
        for c in 0..3 {
            dims[c] = ((2.0 * half[c] / voxel_size).ceil() as usize).clamp(1, resolution);
        }
        let origin = center - half;
        Self::new(origin, voxel_size, dims)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn flat(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    /// Voxel containing a point, or `None` outside the lattice.
    pub fn voxel_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for c in 0..3 {
            let rel = (p[c] - self.origin[c]) / self.voxel_size;
            if rel < 0.0 {
                return None;
            }
            let i = rel.floor() as usize;
            if i >= self.dims[c] {
                return None;
            }
            idx[c] = i;
        }
        Some(idx)
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> Vector3<f64> {
        Vector3::new(
            self.origin.x + (idx[0] as f64 + 0.5) * self.voxel_size,
            self.origin.y + (idx[1] as f64 + 0.5) * self.voxel_size,
            self.origin.z + (idx[2] as f64 + 0.5) * self.voxel_size,
        )
    }
}

/// Voxel votes and (after consensus) occupancy over a [`GridSpec`].
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    pub votes: Vec<u32>,
    pub occupancy: Vec<bool>,
    /// Masked points that fell outside the lattice (tallied, not dropped).
    pub out_of_bounds: usize,
}

fn vote_one_view(
    points: &PointMap,
    mask: &EditMask,
    view: usize,
    spec: &GridSpec,
    votes: &mut [u32],
    visited: &mut [bool],
    out_of_bounds: &mut usize,
) {
    visited.iter_mut().for_each(|v| *v = false);
    for h in 0..points.height {
        for w in 0..points.width {
            if mask.get(view, h, w) != 1 {
                continue;
            }
            match spec.voxel_of(&points.point(view, h, w)) {
                Some(idx) => {
                    let flat = spec.flat(idx);
                    // A view votes each voxel at most once.
                    if !visited[flat] {
                        visited[flat] = true;
                        votes[flat] += 1;
                    }
                }
                None => *out_of_bounds += 1,
            }
        }
    }
}

/// Accumulate per-view votes: each masked pixel's 3D point increments its
/// containing voxel at most once per view.
pub fn voxelize_masked_points(
    points: &PointMap,
    mask: &EditMask,
    spec: &GridSpec,
) -> Result<VoxelGrid> {
    if !mask.same_shape(points) {
        return Err(Error::Shape("voxelize: mask/point shapes differ".into()));
    }
    let mut votes = vec![0u32; spec.len()];
    let mut visited = vec![false; spec.len()];
    let mut out_of_bounds = 0usize;
    for n in 0..points.views {
        vote_one_view(
            points,
            mask,
            n,
            spec,
            &mut votes,
            &mut visited,
            &mut out_of_bounds,
        );
    }
    Ok(VoxelGrid {
        spec: spec.clone(),
        votes,
        occupancy: vec![false; spec.len()],
        out_of_bounds,
    })
}

/// Threshold votes at `ceil(rho * n_views)`.
pub fn consensus_volume(votes: &VoxelGrid, n_views: usize, rho: f64) -> Result<VoxelGrid> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Domain(format!("rho must be in (0, 1], got {rho}")));
    }
    let threshold = (rho * n_views as f64).ceil() as u32;
    let occupancy = votes.votes.iter().map(|&v| v >= threshold).collect();
    Ok(VoxelGrid {
        spec: votes.spec.clone(),
        votes: votes.votes.clone(),
        occupancy,
        out_of_bounds: votes.out_of_bounds,
    })
}

/// Project occupied voxel centers into one view. Each in-frustum center sets
/// its nearest pixel, dilated by a square of radius
/// `ceil(voxel_size * mean focal / (2 * depth))` (per-voxel footprint).
pub fn reproject_volume(vol: &VoxelGrid, cam: &CameraView) -> EditMask {
    let mut out = EditMask::zeros(1, cam.height, cam.width);
    let f_mean = (cam.fx + cam.fy) / 2.0;
    for i0 in 0..vol.spec.dims[0] {
        for i1 in 0..vol.spec.dims[1] {
            for i2 in 0..vol.spec.dims[2] {
                let flat = vol.spec.flat([i0, i1, i2]);
                if !vol.occupancy[flat] {
                    continue;
                }
                let center = vol.spec.voxel_center([i0, i1, i2]);
                let cam_pt = cam.world_to_cam(&center);
                let Some((u, v, z)) = project(&cam_pt, cam) else {
                    continue;
                };
                let pu = u.round() as i64;
                let pv = v.round() as i64;
                let r = (vol.spec.voxel_size * f_mean / (2.0 * z)).ceil() as i64;
                for dv in -r..=r {
                    for du in -r..=r {
                        let (x, y) = (pu + du, pv + dv);
                        if x >= 0 && (x as usize) < cam.width && y >= 0 && (y as usize) < cam.height
                        {
                            out.set(0, y as usize, x as usize, 1);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Strict IoU gate against the consensus re-projection.
pub fn validate_mask(mask_view: &[u8], refined_view: &[u8], tau: f64) -> Result<bool> {
    Ok(mask_iou(mask_view, refined_view)? > tau)
}

/// Single-view round trip: voxelize this view's masked points (any vote
/// occupies), re-project to the same view.
pub fn roundtrip_mask(
    points: &PointMap,
    mask: &EditMask,
    view: usize,
    cam: &CameraView,
    spec: &GridSpec,
) -> Result<EditMask> {
    if !mask.same_shape(points) {
        return Err(Error::Shape("roundtrip: mask/point shapes differ".into()));
    }
    let mut votes = vec![0u32; spec.len()];
    let mut visited = vec![false; spec.len()];
    let mut oob = 0usize;
    vote_one_view(points, mask, view, spec, &mut votes, &mut visited, &mut oob);
    let occupancy = votes.iter().map(|&v| v >= 1).collect();
    let vol = VoxelGrid {
        spec: spec.clone(),
        votes,
        occupancy,
        out_of_bounds: oob,
    };
    Ok(reproject_volume(&vol, cam))
}

/// Angle in [0, pi] between the camera's optical axis and the direction from
/// the camera center to the target centroid.
pub fn view_angle(cam: &CameraView, centroid: &Vector3<f64>) -> Result<f64> {
    if !centroid.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("view centroid".into()));
    }
    let to_target = centroid - cam.center();
    let norm = to_target.norm();
    if norm < 1e-12 {
        return Err(Error::Domain(
            "centroid coincides with camera center".into(),
        ));
    }
    let cosine = cam.optical_axis().dot(&to_target) / norm;
    Ok(cosine.clamp(-1.0, 1.0).acos())
}

/// Re-projection fidelity: `IoU(M, M~) * max(0, cos theta)`, in [0, 1].
pub fn rf_score(mask_view: &[u8], roundtrip_view: &[u8], theta: f64) -> Result<f64> {
    let iou = mask_iou(mask_view, roundtrip_view)?;
    Ok(iou * theta.cos().max(0.0))
}

/// Per-view gating and fidelity record.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewScore {
    pub view: usize,
    /// IoU against the consensus re-projection (the gate quantity).
    pub iou_gate: f64,
    pub valid: bool,
    /// IoU of the single-view round trip (the fidelity quantity).
    pub iou_roundtrip: f64,
    pub theta: f64,
    pub rf: f64,
}

/// Keep valid views with `rf >= min_rf`, best-first, ties broken by ascending
/// view index, truncated to `max_views`.
pub fn select_views(scores: &[ViewScore], min_rf: f64, max_views: usize) -> Vec<usize> {
    let mut kept: Vec<&ViewScore> = scores
        .iter()
        .filter(|s| s.valid && s.rf >= min_rf)
        .collect();
    kept.sort_by(|a, b| {
        b.rf.partial_cmp(&a.rf)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.view.cmp(&b.view))
    });
    kept.into_iter().map(|s| s.view).take(max_views).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineParams {
    pub tau: f64,
    pub rho: f64,
    pub grid_resolution: usize,
    pub min_rf: f64,
    pub max_views: usize,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            rho: DEFAULT_RHO,
            grid_resolution: DEFAULT_GRID_RESOLUTION,
            min_rf: 0.0,
            max_views: usize::MAX,
        }
    }
}

/// Full per-pair pipeline output.
#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub scores: Vec<ViewScore>,
    /// Consensus re-projections, one view per slice (M-hat).
    pub refined: EditMask,
    pub selected: Vec<usize>,
    pub out_of_bounds: usize,
}

/// Consensus filtering + fidelity scoring over one pair's base geometry.
pub fn run_pipeline(
    points: &PointMap,
    mask: &EditMask,
    cams: &[CameraView],
    params: &PipelineParams,
) -> Result<PipelineReport> {
    if points.views != cams.len() {
        return Err(Error::Shape(format!(
            "pipeline: {} views vs {} cameras",
            points.views,
            cams.len()
        )));
    }
    let spec = GridSpec::fit(points, mask, params.grid_resolution)?;
    let votes = voxelize_masked_points(points, mask, &spec)?;
    let consensus = consensus_volume(&votes, points.views, params.rho)?;

    // Centroid of all masked points, shared by every view's angle.
    let mut centroid = Vector3::zeros();
    let mut count = 0usize;
    for (i, &bit) in mask.values().iter().enumerate() {
        if bit == 1 {
            centroid += Vector3::new(
                points.values()[i * 3],
                points.values()[i * 3 + 1],
                points.values()[i * 3 + 2],
            );
            count += 1;
        }
    }
    centroid /= count as f64;

    let mut refined = EditMask::zeros(points.views, points.height, points.width);
    let mut scores = Vec::with_capacity(points.views);
    for (n, cam) in cams.iter().enumerate() {
        let m_hat = reproject_volume(&consensus, cam);
        refined.view_mut(n).copy_from_slice(m_hat.view(0));
        let iou_gate = mask_iou(mask.view(n), m_hat.view(0))?;
        let valid = iou_gate > params.tau;
        let m_tilde = roundtrip_mask(points, mask, n, cam, &spec)?;
        let iou_roundtrip = mask_iou(mask.view(n), m_tilde.view(0))?;
        let theta = view_angle(cam, &centroid)?;
        let rf = rf_score(mask.view(n), m_tilde.view(0), theta)?;
        scores.push(ViewScore {
            view: n,
            iou_gate,
            valid,
            iou_roundtrip,
            theta,
            rf,
        });
    }
    let selected = select_views(&scores, params.min_rf, params.max_views);
    Ok(PipelineReport {
        scores,
        refined,
        selected,
        out_of_bounds: votes.out_of_bounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Frame;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_grid(dims: [usize; 3]) -> GridSpec {
        GridSpec::new(Vector3::zeros(), 1.0, dims).unwrap()
    }

    #[test]
    fn empty_mask_votes_nothing() {
        let p = PointMap::zeros(2, 2, 2, Frame::World);
        let m = EditMask::zeros(2, 2, 2);
        let g = voxelize_masked_points(&p, &m, &unit_grid([2, 2, 2])).unwrap();
        assert!(g.votes.iter().all(|&v| v == 0));
    }

    #[test]
    fn single_point_votes_once() {
        let mut p = PointMap::zeros(1, 2, 2, Frame::World);
        p.set_point(0, 0, 0, Vector3::new(1.5, 1.5, 1.5));
        let mut m = EditMask::zeros(1, 2, 2);
        m.set(0, 0, 0, 1);
        let spec = unit_grid([4, 4, 4]);
        let g = voxelize_masked_points(&p, &m, &spec).unwrap();
        assert_eq!(g.votes.iter().sum::<u32>(), 1);
        assert_eq!(g.votes[spec.flat([1, 1, 1])], 1);
    }

    #[test]
    fn two_views_same_voxel_vote_two() {
        let mut p = PointMap::zeros(2, 1, 2, Frame::World);
        // Both views put masked points into voxel (0,0,0); the second pixel of
        // view 0 lands in the same voxel and must be deduplicated.
        p.set_point(0, 0, 0, Vector3::new(0.2, 0.2, 0.2));
        p.set_point(0, 0, 1, Vector3::new(0.8, 0.8, 0.8));
        p.set_point(1, 0, 0, Vector3::new(0.5, 0.5, 0.5));
        let m = EditMask::new(2, 1, 2, vec![1, 1, 1, 0]).unwrap();
        let spec = unit_grid([4, 4, 4]);
        let g = voxelize_masked_points(&p, &m, &spec).unwrap();
        assert_eq!(g.votes[spec.flat([0, 0, 0])], 2);
        assert_eq!(g.votes.iter().sum::<u32>(), 2);
    }

    /// Brute-force oracle: a view votes a voxel iff any of its masked pixels
    /// maps into it.
    fn brute_force_votes(p: &PointMap, m: &EditMask, spec: &GridSpec) -> Vec<u32> {
        let mut votes = vec![0u32; spec.len()];
        for flat in 0..spec.len() {
            for n in 0..p.views {
                let mut hit = false;
                for h in 0..p.height {
                    for w in 0..p.width {
                        if m.get(n, h, w) == 1 {
                            if let Some(idx) = spec.voxel_of(&p.point(n, h, w)) {
                                if spec.flat(idx) == flat {
                                    hit = true;
                                }
                            }
                        }
                    }
                }
                if hit {
                    votes[flat] += 1;
                }
            }
        }
        votes
    }

    #[test]
    fn votes_match_bruteforce_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..50 {
            let views = rng.gen_range(1..=4);
            let h = rng.gen_range(2..=8);
            let w = rng.gen_range(2..=8);
            let points: Vec<f64> = (0..views * h * w * 3)
                .map(|_| rng.gen_range(-1.0..9.0))
                .collect();
            let p = PointMap::new(views, h, w, Frame::World, points).unwrap();
            let m = EditMask::new(
                views,
                h,
                w,
                (0..views * h * w).map(|_| rng.gen_range(0..=1)).collect(),
            )
            .unwrap();
            let dims = [
                rng.gen_range(1..=8usize),
                rng.gen_range(1..=8usize),
                rng.gen_range(1..=8usize),
            ];
            let spec = unit_grid(dims);
            let g = voxelize_masked_points(&p, &m, &spec).unwrap();
            assert_eq!(g.votes, brute_force_votes(&p, &m, &spec));
            assert!(g.votes.iter().all(|&v| v as usize <= views));
        }
    }

    #[test]
    fn consensus_threshold_arithmetic() {
        let spec = unit_grid([3, 1, 1]);
        let votes = VoxelGrid {
            spec: spec.clone(),
            votes: vec![0, 1, 2],
            occupancy: vec![false; 3],
            out_of_bounds: 0,
        };
        // rho=0.5, N=2: ceil(1.0) = 1, occupied iff votes >= 1.
        let c = consensus_volume(&votes, 2, 0.5).unwrap();
        assert_eq!(c.occupancy, vec![false, true, true]);
        // rho=1: unanimity.
        let c = consensus_volume(&votes, 2, 1.0).unwrap();
        assert_eq!(c.occupancy, vec![false, false, true]);
        // all votes zero -> empty.
        let empty = VoxelGrid {
            spec,
            votes: vec![0, 0, 0],
            occupancy: vec![false; 3],
            out_of_bounds: 0,
        };
        let c = consensus_volume(&empty, 2, 0.5).unwrap();
        assert!(c.occupancy.iter().all(|&o| !o));
        assert!(consensus_volume(&empty, 2, 0.0).is_err());
    }

    #[test]
    fn consensus_monotone_in_rho() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let spec = unit_grid([4, 4, 4]);
        let votes = VoxelGrid {
            spec,
            votes: (0..64).map(|_| rng.gen_range(0..=4)).collect(),
            occupancy: vec![false; 64],
            out_of_bounds: 0,
        };
        let low = consensus_volume(&votes, 4, 0.3).unwrap();
        let high = consensus_volume(&votes, 4, 0.8).unwrap();
        for i in 0..64 {
            if high.occupancy[i] {
                assert!(low.occupancy[i], "lowering rho must not remove voxels");
            }
        }
    }

    fn forward_cam(h: usize, w: usize) -> CameraView {
        // Looking down +z from the origin.
        CameraView::new(
            Matrix3::identity(),
            Vector3::zeros(),
            (w as f64) * 1.2,
            (w as f64) * 1.2,
            (w as f64 - 1.0) / 2.0,
            (h as f64 - 1.0) / 2.0,
            h,
            w,
        )
        .unwrap()
    }

    #[test]
    fn reproject_empty_volume_gives_empty_mask() {
        let spec = unit_grid([2, 2, 2]);
        let vol = VoxelGrid {
            spec,
            votes: vec![0; 8],
            occupancy: vec![false; 8],
            out_of_bounds: 0,
        };
        let cam = forward_cam(16, 16);
        assert_eq!(reproject_volume(&vol, &cam).count(), 0);
    }

    #[test]
    fn reproject_single_voxel_footprint_oracle() {
        // One occupied voxel straight ahead; every set pixel must be within
        // the dilation radius of the projected center (Chebyshev), and the
        // projected center pixel itself must be set.
        let spec = GridSpec::new(Vector3::new(-0.05, -0.05, 2.0), 0.1, [1, 1, 1]).unwrap();
        let vol = VoxelGrid {
            spec: spec.clone(),
            votes: vec![1],
            occupancy: vec![true],
            out_of_bounds: 0,
        };
        let cam = forward_cam(32, 32);
        let m = reproject_volume(&vol, &cam);
        assert!(m.count() > 0);
        let center = spec.voxel_center([0, 0, 0]);
        let (u, v, z) = project(&cam.world_to_cam(&center), &cam).unwrap();
        let (pu, pv) = (u.round() as i64, v.round() as i64);
        let r = (spec.voxel_size * cam.fx / (2.0 * z)).ceil() as i64;
        assert_eq!(m.get(0, pv as usize, pu as usize), 1);
        for h in 0..32 {
            for w in 0..32 {
                if m.get(0, h, w) == 1 {
                    assert!((h as i64 - pv).abs() <= r && (w as i64 - pu).abs() <= r);
                }
            }
        }
    }

    #[test]
    fn reproject_ignores_voxels_behind_camera() {
        let spec = GridSpec::new(Vector3::new(0.0, 0.0, -5.0), 0.5, [1, 1, 1]).unwrap();
        let vol = VoxelGrid {
            spec,
            votes: vec![1],
            occupancy: vec![true],
            out_of_bounds: 0,
        };
        let cam = forward_cam(16, 16);
        assert_eq!(reproject_volume(&vol, &cam).count(), 0);
    }

    #[test]
    fn validate_mask_gate() {
        let a = vec![1u8, 1, 1, 1, 0, 0];
        assert!(validate_mask(&a, &a, 0.5).unwrap());
        let disjoint = vec![0u8, 0, 0, 0, 1, 1];
        // Strict inequality: IoU 0 is not > 0.
        assert!(!validate_mask(&a, &disjoint, 0.0).unwrap());
        let b = vec![1u8, 1, 0, 0, 1, 1];
        // IoU = 2/6 > 0.3.
        assert!(validate_mask(&a, &b, 0.3).unwrap());
        assert!(!validate_mask(&a, &b, 0.34).unwrap());
    }

    #[test]
    fn view_angle_cases() {
        let cam = forward_cam(8, 8);
        // Straight ahead.
        assert!(view_angle(&cam, &Vector3::new(0.0, 0.0, 5.0)).unwrap() < 1e-12);
        // Directly behind.
        let behind = view_angle(&cam, &Vector3::new(0.0, 0.0, -5.0)).unwrap();
        assert!((behind - std::f64::consts::PI).abs() < 1e-12);
        // 45 degrees off-axis.
        let diag = view_angle(&cam, &Vector3::new(3.0, 0.0, 3.0)).unwrap();
        assert!((diag - std::f64::consts::FRAC_PI_4).abs() < 1e-9);
        // Degenerate centroid.
        assert!(view_angle(&cam, &Vector3::zeros()).is_err());
    }

    #[test]
    fn rf_score_cases() {
        let m = vec![1u8, 1, 0, 0];
        assert_eq!(rf_score(&m, &m, 0.0).unwrap(), 1.0);
        let half = vec![1u8, 0, 1, 0];
        // IoU(m, half) = 1/3.
        let s = rf_score(&m, &half, std::f64::consts::FRAC_PI_3).unwrap();
        assert!((s - (1.0 / 3.0) * 0.5).abs() < 1e-12);
        // IoU 1/2 at 60 degrees: 0.5 * 0.5 = 0.25.
        let a = vec![1u8, 1];
        let b = vec![1u8, 0];
        let s25 = rf_score(&a, &b, std::f64::consts::FRAC_PI_3).unwrap();
        assert!((s25 - 0.25).abs() < 1e-12);
        // Orthogonal view clamps to zero.
        let s90 = rf_score(&m, &m, std::f64::consts::FRAC_PI_2).unwrap();
        assert!(s90.abs() < 1e-12);
        // Beyond 90 degrees stays clamped at zero.
        assert_eq!(rf_score(&m, &m, 2.5).unwrap(), 0.0);
    }

    #[test]
    fn validate_mask_monotone_in_tau() {
        // Raising tau never turns an invalid mask valid.
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        for _ in 0..200 {
            let a: Vec<u8> = (0..16).map(|_| rng.gen_range(0..=1)).collect();
            let b: Vec<u8> = (0..16).map(|_| rng.gen_range(0..=1)).collect();
            let t1 = rng.gen_range(0.0..1.0);
            let t2 = rng.gen_range(t1..1.0);
            let v1 = validate_mask(&a, &b, t1).unwrap();
            let v2 = validate_mask(&a, &b, t2).unwrap();
            if v2 {
                assert!(v1);
            }
        }
    }

    #[test]
    fn pipeline_scores_satisfy_rf_identity() {
        // rf == iou_roundtrip * max(0, cos theta) on every emitted score.
        use crate::synth::{self, EditOp};
        let (spec, _) = synth::random_pair(9, 3, 16, 16, 0.0).unwrap();
        let pair = synth::apply_edit(&spec, &EditOp::Delete { id: 2 }).unwrap();
        let report = run_pipeline(
            &pair.base,
            &pair.mask,
            &pair.cams,
            &PipelineParams::default(),
        )
        .unwrap();
        assert_eq!(report.scores.len(), 3);
        for s in &report.scores {
            let expect = s.iou_roundtrip * s.theta.cos().max(0.0);
            assert!((s.rf - expect).abs() < 1e-12);
            assert_eq!(s.valid, s.iou_gate > DEFAULT_TAU);
        }
    }

    #[test]
    fn rf_bounds_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        for _ in 0..1000 {
            let iou = rng.gen_range(0.0..=1.0);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let rf = iou * theta.cos().max(0.0);
            assert!((0.0..=1.0).contains(&rf));
            // Monotone in IoU with theta fixed.
            let rf2 = (iou * 0.5) * theta.cos().max(0.0);
            assert!(rf2 <= rf + 1e-15);
            // Monotone in cos(theta) with IoU fixed.
            let theta2 = (theta + 0.3).min(std::f64::consts::PI);
            let rf3 = iou * theta2.cos().max(0.0);
            assert!(rf3 <= rf + 1e-15);
        }
    }

    fn score(view: usize, rf: f64, valid: bool) -> ViewScore {
        ViewScore {
            view,
            iou_gate: 1.0,
            valid,
            iou_roundtrip: rf,
            theta: 0.0,
            rf,
        }
    }

    #[test]
    fn select_views_filter_sort_truncate() {
        let scores = vec![
            score(0, 0.9, true),
            score(1, 0.2, true),
            score(2, 0.7, true),
        ];
        assert_eq!(select_views(&scores, 0.5, 2), vec![0, 2]);
        assert_eq!(select_views(&scores, 0.0, 99), vec![0, 2, 1]);
        // Equal scores: ascending index order.
        let equal = vec![
            score(0, 0.5, true),
            score(1, 0.5, true),
            score(2, 0.5, true),
        ];
        assert_eq!(select_views(&equal, 0.0, 2), vec![0, 1]);
        // Invalid views never selected.
        let gated = vec![score(0, 0.9, false), score(1, 0.8, true)];
        assert_eq!(select_views(&gated, 0.0, 99), vec![1]);
        // Determinism across repeated calls.
        assert_eq!(
            select_views(&scores, 0.0, 99),
            select_views(&scores, 0.0, 99)
        );
    }

    #[test]
    fn roundtrip_mask_empty_and_coarse() {
        let p = PointMap::zeros(1, 4, 4, Frame::World);
        let empty = EditMask::zeros(1, 4, 4);
        let cam = forward_cam(4, 4);
        let spec = unit_grid([2, 2, 2]);
        let m = roundtrip_mask(&p, &empty, 0, &cam, &spec).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn roundtrip_fine_grid_recovers_convex_blob() {
        // A sphere footprint on a 128x128 view round-trips with IoU >= 0.9
        // when voxels are at most a pixel footprint.
        use crate::synth::{self, Primitive, PrimitiveShape, SceneSpec};
        let spec = SceneSpec {
            seed: 3,
            n_views: 2,
            height: 128,
            width: 128,
            primitives: vec![Primitive {
                shape: PrimitiveShape::Sphere,
                center: Vector3::new(0.0, 0.0, 0.6),
                size: 0.6,
                id: 2,
            }],
            floor: false,
            ring_radius: 2.2,
            ring_elevation: 0.4,
            noise_sigma: 0.0,
        };
        let scene = synth::generate_scene(&spec).unwrap();
        let mut mask = EditMask::zeros(2, 128, 128);
        for n in 0..2 {
            for h in 0..128 {
                for w in 0..128 {
                    if scene.object_ids[(n * 128 + h) * 128 + w] == 2 {
                        mask.set(n, h, w, 1);
                    }
                }
            }
        }
        assert!(mask.count() > 500);
        let grid = GridSpec::fit(&scene.points, &mask, 256).unwrap();
        let m_tilde = roundtrip_mask(&scene.points, &mask, 0, &scene.cams[0], &grid).unwrap();
        let iou = mask_iou(mask.view(0), m_tilde.view(0)).unwrap();
        assert!(iou >= 0.9, "roundtrip IoU {iou}");

        // Degenerate single-voxel grid: one dilated blob covering the
        // projection of the (huge) voxel.
        let coarse = GridSpec::new(grid.origin, grid.voxel_size * 256.0, [1, 1, 1]).unwrap();
        let blob = roundtrip_mask(&scene.points, &mask, 0, &scene.cams[0], &coarse).unwrap();
        assert!(blob.count() > 0);
    }

    #[test]
    fn grid_fit_covers_all_masked_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let points: Vec<f64> = (0..2 * 4 * 4 * 3)
            .map(|_| rng.gen_range(-4.0..4.0))
            .collect();
        let p = PointMap::new(2, 4, 4, Frame::World, points).unwrap();
        let mut m = EditMask::zeros(2, 4, 4);
        for i in 0..8 {
            m.values_mut()[i * 3 % 32] = 1;
        }
        let spec = GridSpec::fit(&p, &m, 16).unwrap();
        let g = voxelize_masked_points(&p, &m, &spec).unwrap();
        assert_eq!(g.out_of_bounds, 0);
        assert!(GridSpec::fit(&p, &EditMask::zeros(2, 4, 4), 16).is_err());
    }
}
