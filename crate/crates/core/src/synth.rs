//! Deterministic procedural generator of multi-view editing pairs.
//!
//! Scenes are analytic primitives (spheres, axis-aligned cube boxes) over an
//! optional floor plane, ray-cast from a ring of cameras. Because the point
//! maps come from exact intersections, the ground-truth mask and residual
//! field of every edit are exact, which makes every downstream loss and
//! pipeline operation oracle-checkable.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::edit::ResidualField;
use crate::error::{Error, Result};
use crate::geom::{CameraView, EditMask, Frame, PointMap};
use crate::io::{self, ManifestEntry};

/// Rays that miss everything land at this camera depth, object id 0.
pub const FAR_PLANE_DEPTH: f64 = 10.0;
pub const BACKGROUND_ID: u32 = 0;
pub const FLOOR_ID: u32 = 1;

/// Focal length as a multiple of the larger image dimension.
const FOCAL_SCALE: f64 = 1.2;

/// Minimum ray parameter for a valid hit.
const RAY_EPS: f64 = 1e-6;

/// Instruction vocabulary (64 entries shared with the model).
pub mod vocab {
    pub const SIZE: usize = 64;

    pub const ADD: u16 = 1;
    pub const DELETE: u16 = 2;
    pub const MODIFY: u16 = 3;
    pub const MOVE: u16 = 4;
    pub const SCALE: u16 = 5;
    pub const SPHERE: u16 = 6;
    pub const BOX: u16 = 7;

    pub const POS_X: u16 = 8;
    pub const NEG_X: u16 = 9;
    pub const POS_Y: u16 = 10;
    pub const NEG_Y: u16 = 11;
    pub const POS_Z: u16 = 12;
    pub const NEG_Z: u16 = 13;
    pub const GROW: u16 = 14;
    pub const SHRINK: u16 = 15;

    const OBJECT_BASE: u16 = 16;

    pub fn object_word(id: u32) -> u16 {
        OBJECT_BASE + (id % 32) as u16
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveShape {
    Sphere,
    Box,
}

/// Analytic scene element. `size` is the sphere radius or the cube half-extent.
#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: PrimitiveShape,
    pub center: Vector3<f64>,
    pub size: f64,
    pub id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_views: usize,
    pub height: usize,
    pub width: usize,
    pub primitives: Vec<Primitive>,
    pub floor: bool,
    pub ring_radius: f64,
    pub ring_elevation: f64,
    pub noise_sigma: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_views < 2 {
            return Err(Error::Domain(format!(
                "scene needs at least 2 views, got {}",
                self.n_views
            )));
        }
        if self.primitives.is_empty() {
            return Err(Error::Domain("scene needs at least one primitive".into()));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::Domain("resolution must be at least 2x2".into()));
        }
        if self.ring_radius <= 0.0 {
            return Err(Error::Domain("ring radius must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Domain("noise sigma must be nonnegative".into()));
        }
        let mut ids: Vec<u32> = self.primitives.iter().map(|p| p.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.primitives.len() {
            return Err(Error::Domain("primitive ids must be unique".into()));
        }
        if self.primitives.iter().any(|p| p.id <= FLOOR_ID) {
            return Err(Error::Domain(
                "primitive ids 0 and 1 are reserved for background and floor".into(),
            ));
        }
        if self.primitives.iter().any(|p| p.size <= 0.0) {
            return Err(Error::Domain("primitive sizes must be positive".into()));
        }
        Ok(())
    }
}

/// A rendered scene: dense point map plus per-pixel object ids and confidence.
#[derive(Debug, Clone)]
pub struct SceneRender {
    pub points: PointMap,
    pub cams: Vec<CameraView>,
    pub object_ids: Vec<u32>,
    pub confidence: Vec<f64>,
}

/// Atomic editing operations over a scene's primitive list.
#[derive(Debug, Clone, PartialEq)]
pub enum EditOp {
    Add(Primitive),
    Delete { id: u32 },
    Modify { id: u32, size_factor: f64 },
    Move { id: u32, offset: Vector3<f64> },
    Scale { id: u32, factor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOpTag {
    Add,
    Delete,
    Modify,
    Move,
    Scale,
}

impl EditOpTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            EditOpTag::Add => "add",
            EditOpTag::Delete => "delete",
            EditOpTag::Modify => "modify",
            EditOpTag::Move => "move",
            EditOpTag::Scale => "scale",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(EditOpTag::Add),
            "delete" => Ok(EditOpTag::Delete),
            "modify" => Ok(EditOpTag::Modify),
            "move" => Ok(EditOpTag::Move),
            "scale" => Ok(EditOpTag::Scale),
            other => Err(Error::Format(format!("unknown edit op tag {other:?}"))),
        }
    }
}

impl EditOp {
    pub fn tag(&self) -> EditOpTag {
        match self {
            EditOp::Add(_) => EditOpTag::Add,
            EditOp::Delete { .. } => EditOpTag::Delete,
            EditOp::Modify { .. } => EditOpTag::Modify,
            EditOp::Move { .. } => EditOpTag::Move,
            EditOp::Scale { .. } => EditOpTag::Scale,
        }
    }
}

/// One training sample: base/target geometry, exact mask and residual,
/// cameras, confidence, and instruction tokens.
#[derive(Debug, Clone)]
pub struct EditPair {
    pub base: PointMap,
    pub gt: PointMap,
    pub mask: EditMask,
    pub gt_delta: ResidualField,
    pub cams: Vec<CameraView>,
    pub confidence: Vec<f64>,
    pub tokens: Vec<u16>,
    pub op: EditOpTag,
}

fn ray_sphere(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    center: &Vector3<f64>,
    radius: f64,
) -> Option<f64> {
    let oc = origin - center;
    let a = dir.dot(dir);
    let b = 2.0 * dir.dot(&oc);
    let c = oc.dot(&oc) - radius * radius;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq) / (2.0 * a);
    if t0 > RAY_EPS {
        return Some(t0);
    }
    let t1 = (-b + sq) / (2.0 * a);
    if t1 > RAY_EPS {
        return Some(t1);
    }
    None
}

fn ray_box(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    center: &Vector3<f64>,
    half: f64,
) -> Option<f64> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for axis in 0..3 {
        let lo = center[axis] - half;
        let hi = center[axis] + half;
        let d = dir[axis];
        let o = origin[axis];
        if d.abs() < 1e-15 {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let mut t0 = (lo - o) / d;
        let mut t1 = (hi - o) / d;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_enter = t_enter.max(t0);
        t_exit = t_exit.min(t1);
        if t_enter > t_exit {
            return None;
        }
    }
    if t_enter > RAY_EPS {
        Some(t_enter)
    } else if t_exit > RAY_EPS {
        Some(t_exit)
    } else {
        None
    }
}

fn intersect(prim: &Primitive, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    match prim.shape {
        PrimitiveShape::Sphere => ray_sphere(origin, dir, &prim.center, prim.size),
        PrimitiveShape::Box => ray_box(origin, dir, &prim.center, prim.size),
    }
}

/// Ring cameras evenly spaced around the look-at target.
fn ring_cameras(spec: &SceneSpec, target: Vector3<f64>) -> Result<Vec<CameraView>> {
    let f = FOCAL_SCALE * spec.height.max(spec.width) as f64;
    let cx = (spec.width as f64 - 1.0) / 2.0;
    let cy = (spec.height as f64 - 1.0) / 2.0;
    (0..spec.n_views)
        .map(|i| {
            // Half-spacing offset keeps axis-aligned faces visible from two
            // cameras instead of one.
            let phi = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / spec.n_views as f64;
            let center = target
                + Vector3::new(
                    spec.ring_radius * phi.cos(),
                    spec.ring_radius * phi.sin(),
                    spec.ring_elevation,
                );
            CameraView::look_at(
                center,
                target,
                Vector3::new(0.0, 0.0, 1.0),
                f,
                f,
                cx,
                cy,
                spec.height,
                spec.width,
            )
        })
        .collect()
}

/// Per-pixel depth noise sampled once per scene seed, so that both renders of
/// an edit pair share it and unedited pixels stay bit-identical.
fn noise_grid(spec: &SceneSpec) -> Vec<f64> {
    let count = spec.n_views * spec.height * spec.width;
    if spec.noise_sigma == 0.0 {
        return vec![0.0; count];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    (0..count).map(|_| normal.sample(&mut rng)).collect()
}

fn render(
    primitives: &[Primitive],
    floor: bool,
    cams: &[CameraView],
    height: usize,
    width: usize,
    noise: &[f64],
    noise_cap: f64,
) -> (PointMap, Vec<u32>, Vec<f64>) {
    let n_views = cams.len();
    let mut points = PointMap::zeros(n_views, height, width, Frame::World);
    let mut ids = vec![BACKGROUND_ID; n_views * height * width];
    let mut confidence = vec![1.0; n_views * height * width];
    for (n, cam) in cams.iter().enumerate() {
        let origin = cam.center();
        let rt = cam.rotation.transpose();
        for h in 0..height {
            for w in 0..width {
                // dir has camera z = 1, so the ray parameter equals camera depth.
                let dir_cam = Vector3::new(
                    (w as f64 - cam.cx) / cam.fx,
                    (h as f64 - cam.cy) / cam.fy,
                    1.0,
                );
                let dir = rt * dir_cam;
                let mut best = FAR_PLANE_DEPTH;
                let mut best_id = BACKGROUND_ID;
                for prim in primitives {
                    if let Some(t) = intersect(prim, &origin, &dir) {
                        if t < best {
                            best = t;
                            best_id = prim.id;
                        }
                    }
                }
                if floor && dir.z.abs() > 1e-15 {
                    let t = -origin.z / dir.z;
                    if t > RAY_EPS && t < best {
                        best = t;
                        best_id = FLOOR_ID;
                    }
                }
                let pix = (n * height + h) * width + w;
                let eta = noise[pix];
                let depth = (best + eta).max(1e-3);
                points.set_point(n, h, w, origin + depth * dir);
                ids[pix] = best_id;
                confidence[pix] = (1.0 - eta.abs() / noise_cap).clamp(0.0, 1.0);
            }
        }
    }
    (points, ids, confidence)
}

fn primitive_centroid(primitives: &[Primitive]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for p in primitives {
        c += p.center;
    }
    c / primitives.len() as f64
}

/// Ray-cast the scene from its ring of cameras.
pub fn generate_scene(spec: &SceneSpec) -> Result<SceneRender> {
    spec.validate()?;
    let target = primitive_centroid(&spec.primitives);
    let cams = ring_cameras(spec, target)?;
    let noise = noise_grid(spec);
    let cap = (3.0 * spec.noise_sigma).max(1e-12);
    let (points, object_ids, confidence) = render(
        &spec.primitives,
        spec.floor,
        &cams,
        spec.height,
        spec.width,
        &noise,
        cap,
    );
    Ok(SceneRender {
        points,
        cams,
        object_ids,
        confidence,
    })
}

fn edited_primitives(spec: &SceneSpec, op: &EditOp) -> Result<Vec<Primitive>> {
    let mut prims = spec.primitives.clone();
    let find = |prims: &[Primitive], id: u32| -> Result<usize> {
        prims
            .iter()
            .position(|p| p.id == id)
            .ok_or_else(|| Error::Domain(format!("no primitive with id {id}")))
    };
    match op {
        EditOp::Add(p) => {
            if p.id <= FLOOR_ID || prims.iter().any(|q| q.id == p.id) {
                return Err(Error::Domain(format!("add: id {} unavailable", p.id)));
            }
            if p.size <= 0.0 {
                return Err(Error::Domain("add: size must be positive".into()));
            }
            prims.push(p.clone());
        }
        EditOp::Delete { id } => {
            let i = find(&prims, *id)?;
            prims.remove(i);
        }
        EditOp::Modify { id, size_factor } => {
            let i = find(&prims, *id)?;
            if *size_factor <= 0.0 {
                return Err(Error::Domain("modify: size factor must be positive".into()));
            }
            prims[i].size *= size_factor;
        }
        EditOp::Move { id, offset } => {
            let i = find(&prims, *id)?;
            prims[i].center += offset;
        }
        EditOp::Scale { id, factor } => {
            let i = find(&prims, *id)?;
            if *factor <= 0.0 {
                return Err(Error::Domain("scale: factor must be positive".into()));
            }
            prims[i].size *= factor;
        }
    }
    Ok(prims)
}

fn dominant_direction(offset: &Vector3<f64>) -> u16 {
    let ax = offset.x.abs();
    let ay = offset.y.abs();
    let az = offset.z.abs();
    if ax >= ay && ax >= az {
        if offset.x >= 0.0 {
            vocab::POS_X
        } else {
            vocab::NEG_X
        }
    } else if ay >= az {
        if offset.y >= 0.0 {
            vocab::POS_Y
        } else {
            vocab::NEG_Y
        }
    } else if offset.z >= 0.0 {
        vocab::POS_Z
    } else {
        vocab::NEG_Z
    }
}

/// Instruction token ids for an edit, composed from the fixed vocabulary.
pub fn instruction_tokens(op: &EditOp) -> Vec<u16> {
    match op {
        EditOp::Add(p) => {
            let shape = match p.shape {
                PrimitiveShape::Sphere => vocab::SPHERE,
                PrimitiveShape::Box => vocab::BOX,
            };
            vec![vocab::ADD, shape, vocab::object_word(p.id)]
        }
        EditOp::Delete { id } => vec![vocab::DELETE, vocab::object_word(*id)],
        EditOp::Modify { id, size_factor } => {
            let dir = if *size_factor >= 1.0 {
                vocab::GROW
            } else {
                vocab::SHRINK
            };
            vec![vocab::MODIFY, vocab::object_word(*id), dir]
        }
        EditOp::Move { id, offset } => {
            vec![
                vocab::MOVE,
                vocab::object_word(*id),
                dominant_direction(offset),
            ]
        }
        EditOp::Scale { id, factor } => {
            let dir = if *factor >= 1.0 {
                vocab::GROW
            } else {
                vocab::SHRINK
            };
            vec![vocab::SCALE, vocab::object_word(*id), dir]
        }
    }
}

/// Render the base and edited scenes with shared cameras and noise, and build
/// the exact mask and residual field between them.
pub fn apply_edit(spec: &SceneSpec, op: &EditOp) -> Result<EditPair> {
    spec.validate()?;
    let edited = edited_primitives(spec, op)?;
    let target = primitive_centroid(&spec.primitives);
    let cams = ring_cameras(spec, target)?;
    let noise = noise_grid(spec);
    let cap = (3.0 * spec.noise_sigma).max(1e-12);
    let (base, base_ids, confidence) = render(
        &spec.primitives,
        spec.floor,
        &cams,
        spec.height,
        spec.width,
        &noise,
        cap,
    );
    let (gt, gt_ids, _) = render(
        &edited,
        spec.floor,
        &cams,
        spec.height,
        spec.width,
        &noise,
        cap,
    );

    let pixels = spec.n_views * spec.height * spec.width;
    let mut mask_values = vec![0u8; pixels];
    let mut delta = vec![0.0f64; pixels * 3];
    for i in 0..pixels {
        let ids_differ = base_ids[i] != gt_ids[i];
        let mut points_differ = false;
        for c in 0..3 {
            if base.values()[i * 3 + c] != gt.values()[i * 3 + c] {
                points_differ = true;
            }
        }
        if ids_differ || points_differ {
            mask_values[i] = 1;
            for c in 0..3 {
                delta[i * 3 + c] = gt.values()[i * 3 + c] - base.values()[i * 3 + c];
            }
        }
    }
    let mask = EditMask::new(spec.n_views, spec.height, spec.width, mask_values)?;
    let gt_delta = ResidualField::new(spec.n_views, spec.height, spec.width, delta)?;
    Ok(EditPair {
        base,
        gt,
        mask,
        gt_delta,
        cams,
        confidence,
        tokens: instruction_tokens(op),
        op: op.tag(),
    })
}

/// A randomized scene plus edit, fully determined by `seed`. Retries
/// deterministically until the edit produces a visible (nonempty) mask.
pub fn random_pair(
    seed: u64,
    n_views: usize,
    height: usize,
    width: usize,
    noise_sigma: f64,
) -> Result<(SceneSpec, EditOp)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _attempt in 0..16 {
        let n_prims = rng.gen_range(1..=2usize);
        let mut primitives = Vec::with_capacity(n_prims);
        for i in 0..n_prims {
            let shape = if rng.gen_bool(0.5) {
                PrimitiveShape::Sphere
            } else {
                PrimitiveShape::Box
            };
            let size = rng.gen_range(0.25..0.5);
            let center = Vector3::new(
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
                size, // resting on the floor plane z = 0
            );
            primitives.push(Primitive {
                shape,
                center,
                size,
                id: 2 + i as u32,
            });
        }
        let target_idx = rng.gen_range(0..primitives.len());
        let target_id = primitives[target_idx].id;
        let op = match rng.gen_range(0..5u32) {
            0 => {
                let size = rng.gen_range(0.2..0.35);
                EditOp::Add(Primitive {
                    shape: if rng.gen_bool(0.5) {
                        PrimitiveShape::Sphere
                    } else {
                        PrimitiveShape::Box
                    },
                    center: Vector3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), size),
                    size,
                    id: 2 + n_prims as u32,
                })
            }
            1 => EditOp::Delete { id: target_id },
            2 => EditOp::Modify {
                id: target_id,
                size_factor: if rng.gen_bool(0.5) {
                    rng.gen_range(1.05..1.15)
                } else {
                    rng.gen_range(0.85..0.95)
                },
            },
            3 => {
                let axis = rng.gen_range(0..3u32);
                let mag: f64 =
                    rng.gen_range(0.25..0.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let mut offset = Vector3::zeros();
                match axis {
                    0 => offset.x = mag,
                    1 => offset.y = mag,
                    // Keep z moves upward so objects stay above the floor.
                    _ => offset.z = mag.abs(),
                }
                EditOp::Move {
                    id: target_id,
                    offset,
                }
            }
            _ => EditOp::Scale {
                id: target_id,
                factor: if rng.gen_bool(0.5) {
                    rng.gen_range(1.2..1.4)
                } else {
                    rng.gen_range(0.65..0.8)
                },
            },
        };
        let spec = SceneSpec {
            seed,
            n_views,
            height,
            width,
            primitives,
            floor: true,
            ring_radius: 3.0,
            ring_elevation: 1.5,
            noise_sigma,
        };
        let pair = apply_edit(&spec, &op)?;
        if pair.mask.count() >= 4 {
            return Ok((spec, op));
        }
    }
    Err(Error::Domain(format!(
        "seed {seed}: no visible edit found after 16 attempts"
    )))
}

/// Write every pair (PMAP/MASK/CAMS/CGRD files plus token ids) and a manifest
/// listing the entries with their seeds.
pub fn make_dataset(
    pairs: &[(SceneSpec, EditOp)],
    out_dir: impl AsRef<Path>,
) -> Result<(PathBuf, Vec<ManifestEntry>)> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, (spec, op)) in pairs.iter().enumerate() {
        let pair = apply_edit(spec, op)?;
        let id = format!("{i:04}");
        let files = vec![
            format!("{id}_base.pmap"),
            format!("{id}_gt.pmap"),
            format!("{id}_mask.mask"),
            format!("{id}_cams.cams"),
            format!("{id}_conf.cgrd"),
            format!("{id}_tokens.txt"),
        ];
        io::write_pointmap(out_dir.join(&files[0]), &pair.base)?;
        io::write_pointmap(out_dir.join(&files[1]), &pair.gt)?;
        io::write_mask(out_dir.join(&files[2]), &pair.mask)?;
        io::write_cameras(out_dir.join(&files[3]), &pair.cams)?;
        io::write_scalar_grid(
            out_dir.join(&files[4]),
            spec.n_views,
            spec.height,
            spec.width,
            &pair.confidence,
        )?;
        io::write_tokens(out_dir.join(&files[5]), &pair.tokens)?;
        entries.push(ManifestEntry {
            pair_id: id,
            seed: spec.seed,
            op_tag: op.tag().as_str().to_string(),
            files,
        });
    }
    let manifest_path = out_dir.join("manifest.txt");
    io::write_manifest(&manifest_path, &entries)?;
    Ok((manifest_path, entries))
}

/// Load one manifest entry back into an [`EditPair`]. The residual field is
/// reconstructed exactly as `(gt - base) (.) mask`.
pub fn load_pair(manifest_path: &Path, entry: &ManifestEntry) -> Result<EditPair> {
    let find = |suffix: &str| -> Result<PathBuf> {
        entry
            .files
            .iter()
            .find(|f| f.ends_with(suffix))
            .map(|f| io::sibling(manifest_path, f))
            .ok_or_else(|| {
                Error::Format(format!(
                    "pair {}: no file ending with {suffix} in manifest",
                    entry.pair_id
                ))
            })
    };
    let base = io::read_pointmap(find("_base.pmap")?)?;
    let gt = io::read_pointmap(find("_gt.pmap")?)?;
    let mask = io::read_mask(find("_mask.mask")?)?;
    let cams = io::read_cameras(find("_cams.cams")?)?;
    let (cn, ch, cw, confidence) = io::read_scalar_grid(find("_conf.cgrd")?)?;
    let tokens = io::read_tokens(find("_tokens.txt")?)?;
    if !base.same_shape(&gt) || !mask.same_shape(&base) || cams.len() != base.views {
        return Err(Error::Shape(format!(
            "pair {}: inconsistent shapes",
            entry.pair_id
        )));
    }
    if (cn, ch, cw) != (base.views, base.height, base.width) {
        return Err(Error::Shape(format!(
            "pair {}: confidence grid shape mismatch",
            entry.pair_id
        )));
    }
    let mut delta = vec![0.0f64; base.pixels() * 3];
    for (i, &bit) in mask.values().iter().enumerate() {
        if bit == 1 {
            for c in 0..3 {
                delta[i * 3 + c] = gt.values()[i * 3 + c] - base.values()[i * 3 + c];
            }
        }
    }
    let gt_delta = ResidualField::new(base.views, base.height, base.width, delta)?;
    Ok(EditPair {
        base,
        gt,
        mask,
        gt_delta,
        cams,
        confidence,
        tokens,
        op: EditOpTag::parse(&entry.op_tag)?,
    })
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Vec<EditPair>> {
    let manifest_path = manifest_path.as_ref();
    let entries = io::read_manifest(manifest_path)?;
    entries
        .iter()
        .map(|e| load_pair(manifest_path, e))
        .collect()
}
