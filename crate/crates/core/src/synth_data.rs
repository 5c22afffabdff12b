//! Procedural toy objects and their multi-view renders.
//!
//! Each object is 1-4 spheres or axis-aligned cubes inside the unit sphere.
//! Views are ray-cast analytically and shaded Lambertian under a point light
//! at the camera, over a white background. Every object gets 16 random views
//! and the 16 evenly spaced fixed views.

use std::fs;
use std::path::{Path, PathBuf};

use lift3d_autograd::Array;
use nalgebra::Vector3;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::camera::{fixed_view_set, generate_rays, sample_random_pose, CameraPose, PoseRecord, ViewFrame};
use crate::error::{ensure, Error, Result};
use crate::seeding::{substream, Rng};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const VIEWS_PER_SET: usize = 16;
pub const ALLOWED_RESOLUTIONS: [usize; 3] = [32, 64, 128];
/// Ambient floor of the headlight shading model, shared with the radiance-field renderer.
pub const SHADING_AMBIENT: f64 = 0.35;
pub const MANIFEST_FILE: &str = "dataset_manifest.json";
pub const OBJECT_META_FILE: &str = "meta.json";

const MAX_OBJECT_RADIUS: f64 = 0.98;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sphere,
    Box,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub half_extent: f64,
    pub albedo: [f64; 3],
}

impl Primitive {
    /// Distance from the origin to the farthest point of the primitive.
    pub fn bounding_radius(&self) -> f64 {
        let c = Vector3::from(self.center).norm();
        match self.shape {
            Shape::Sphere => c + self.half_extent,
            Shape::Box => c + 3f64.sqrt() * self.half_extent,
        }
    }

    /// Nearest positive hit distance and outward normal.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let c = Vector3::from(self.center);
        let h = self.half_extent;
        match self.shape {
            Shape::Sphere => {
                let oc = origin - c;
                let b = oc.dot(dir);
                let cc = oc.norm_squared() - h * h;
                let disc = b * b - cc;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > 1e-9 { -b - sq } else { -b + sq };
                if t <= 1e-9 {
                    return None;
                }
                let p = origin + t * dir;
                Some((t, (p - c) / h))
            }
            Shape::Box => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut near_axis = 0;
                for k in 0..3 {
                    let lo = c[k] - h;
                    let hi = c[k] + h;
                    if dir[k].abs() < 1e-15 {
                        if origin[k] < lo || origin[k] > hi {
                            return None;
                        }
                        continue;
                    }
                    let mut t0 = (lo - origin[k]) / dir[k];
                    let mut t1 = (hi - origin[k]) / dir[k];
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_near {
                        t_near = t0;
                        near_axis = k;
                    }
                    t_far = t_far.min(t1);
                }
                if t_near > t_far || t_near <= 1e-9 {
                    return None;
                }
                let mut n = Vector3::zeros();
                n[near_axis] = -dir[near_axis].signum();
                Some((t_near, n))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyObject {
    pub object_id: String,
    pub primitives: Vec<Primitive>,
}

impl ToyObject {
    pub fn bounding_radius(&self) -> f64 {
        self.primitives
            .iter()
            .map(Primitive::bounding_radius)
            .fold(0.0, f64::max)
    }

    /// A single sphere at the origin.
    pub fn centered_sphere(radius: f64, albedo: [f64; 3]) -> Self {
        Self {
            object_id: "sphere".into(),
            primitives: vec![Primitive {
                shape: Shape::Sphere,
                center: [0.0; 3],
                half_extent: radius,
                albedo,
            }],
        }
    }
}

/// `[H, W, 3]` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub image: Array,
    pub pose: CameraPose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectRecord {
    pub object: ToyObject,
    pub seed: u64,
    pub random_views: Vec<RenderedView>,
    pub fixed_views: Vec<RenderedView>,
}

pub fn make_toy_object(rng: &mut Rng, object_id: impl Into<String>) -> ToyObject {
    let count = rng.random_range(1..=4);
    let primitives = (0..count)
        .map(|_| {
            let shape = if rng.random_bool(0.5) { Shape::Sphere } else { Shape::Box };
            let center = [
                rng.random_range(-0.4..=0.4),
                rng.random_range(-0.4..=0.4),
                rng.random_range(-0.4..=0.4),
            ];
            let mut half_extent: f64 = rng.random_range(0.1..=0.3);
            let c = Vector3::from(center).norm();
            let reach = match shape {
                Shape::Sphere => 1.0,
                Shape::Box => 3f64.sqrt(),
            };
            half_extent = half_extent.min((MAX_OBJECT_RADIUS - c) / reach);
            let albedo = [
                rng.random_range(0.05..=0.9),
                rng.random_range(0.05..=0.9),
                rng.random_range(0.05..=0.9),
            ];
            Primitive {
                shape,
                center,
                half_extent,
                albedo,
            }
        })
        .collect();
    ToyObject {
        object_id: object_id.into(),
        primitives,
    }
}

/// Nearest primitive hit along a ray: `(t, normal, albedo)`.
pub fn trace(object: &ToyObject, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>, [f64; 3])> {
    object
        .primitives
        .iter()
        .filter_map(|p| p.intersect(origin, dir).map(|(t, n)| (t, n, p.albedo)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

/// Headlight Lambertian shading factor at a surface point.
pub fn headlight_shade(normal: &Vector3<f64>, to_light: &Vector3<f64>) -> f64 {
    SHADING_AMBIENT + (1.0 - SHADING_AMBIENT) * normal.dot(to_light).max(0.0)
}

pub fn rasterize_view(object: &ToyObject, pose: &CameraPose, resolution: usize) -> Result<RenderedView> {
    ensure!(
        ALLOWED_RESOLUTIONS.contains(&resolution),
        "resolution {resolution} not in {ALLOWED_RESOLUTIONS:?}"
    );
    let frame = ViewFrame::square(*pose, resolution)?;
    Ok(RenderedView {
        image: rasterize_frame(object, &frame),
        pose: *pose,
    })
}

pub fn rasterize_frame(object: &ToyObject, frame: &ViewFrame) -> Array {
    let rays = generate_rays(frame);
    let mut data = Vec::with_capacity(rays.directions.len() * 3);
    for dir in &rays.directions {
        match trace(object, &rays.origin, dir) {
            Some((t, n, albedo)) => {
                let p = rays.origin + t * dir;
                let to_light = (rays.origin - p).normalize();
                let s = headlight_shade(&n, &to_light);
                data.extend(albedo.iter().map(|a| (a * s).clamp(0.0, 1.0)));
            }
            None => data.extend([1.0, 1.0, 1.0]),
        }
    }
    Array::new(&[frame.height, frame.width, 3], data)
}

/// Per-pixel mask of rays that hit the object.
pub fn silhouette_mask(object: &ToyObject, frame: &ViewFrame) -> Vec<bool> {
    let rays = generate_rays(frame);
    rays.directions
        .iter()
        .map(|d| trace(object, &rays.origin, d).is_some())
        .collect()
}

pub fn render_object(object: ToyObject, seed: u64, rng: &mut Rng, resolution: usize) -> Result<ObjectRecord> {
    let mut random_views = Vec::with_capacity(VIEWS_PER_SET);
    for _ in 0..VIEWS_PER_SET {
        // Render from the pose exactly as it will read back from disk.
        let pose = sample_random_pose(rng).canonical();
        random_views.push(rasterize_view(&object, &pose, resolution)?);
    }
    let mut fixed_views = Vec::with_capacity(VIEWS_PER_SET);
    for pose in fixed_view_set(VIEWS_PER_SET)? {
        fixed_views.push(rasterize_view(&object, &pose.canonical(), resolution)?);
    }
    Ok(ObjectRecord {
        object,
        seed,
        random_views,
        fixed_views,
    })
}

/// Per-object seed, a pure function of the master seed and the object index.
pub fn object_seed(master_seed: u64, index: usize) -> u64 {
    use rand::RngCore;
    substream(master_seed, "dataset", index as u64).next_u64()
}

pub fn object_id(index: usize) -> String {
    format!("obj_{index:05}")
}

/// Builds record `index` of the dataset `(master_seed, resolution)` in memory.
pub fn generate_record(master_seed: u64, index: usize, resolution: usize) -> Result<ObjectRecord> {
    let seed = object_seed(master_seed, index);
    let mut rng = substream(seed, "object", 0);
    let object = make_toy_object(&mut rng, object_id(index));
    render_object(object, seed, &mut rng, resolution)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub object_id: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub n_objects: usize,
    pub seed: u64,
    pub resolution: usize,
    pub fov_y_deg: f64,
    pub views_per_set: usize,
    pub objects: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectMeta {
    pub schema_version: u32,
    pub object: ToyObject,
    pub seed: u64,
    pub random_poses: Vec<PoseRecord>,
    pub fixed_poses: Vec<PoseRecord>,
}

pub fn build_dataset(n_objects: usize, seed: u64, resolution: usize, out_path: &Path) -> Result<DatasetManifest> {
    ensure!(
        ALLOWED_RESOLUTIONS.contains(&resolution),
        "resolution {resolution} not in {ALLOWED_RESOLUTIONS:?}"
    );
    fs::create_dir_all(out_path).map_err(|e| Error::io(out_path, e))?;
    let mut objects = Vec::with_capacity(n_objects);
    for index in 0..n_objects {
        let record = generate_record(seed, index, resolution)?;
        write_record(&record, &out_path.join(&record.object.object_id))?;
        objects.push(ManifestEntry {
            object_id: record.object.object_id.clone(),
            seed: record.seed,
        });
    }
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        n_objects,
        seed,
        resolution,
        fov_y_deg: crate::camera::DEFAULT_FOV_Y_DEG,
        views_per_set: VIEWS_PER_SET,
        objects,
    };
    write_json(&out_path.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn view_file(kind: &str, i: usize) -> String {
    format!("{kind}_{i:02}.png")
}

fn write_record(record: &ObjectRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (kind, views) in [("random", &record.random_views), ("fixed", &record.fixed_views)] {
        for (i, v) in views.iter().enumerate() {
            save_png(&v.image, &dir.join(view_file(kind, i)))?;
        }
    }
    let meta = ObjectMeta {
        schema_version: DATASET_SCHEMA_VERSION,
        object: record.object.clone(),
        seed: record.seed,
        random_poses: record.random_views.iter().map(|v| v.pose.to_record()).collect(),
        fixed_poses: record.fixed_views.iter().map(|v| v.pose.to_record()).collect(),
    };
    write_json(&dir.join(OBJECT_META_FILE), &meta)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an `[H, W, 3]` image in `[0, 1]` as 8-bit RGB PNG.
pub fn save_png(image: &Array, path: &Path) -> Result<()> {
    let s = image.shape();
    ensure!(s.len() == 3 && s[2] == 3, "expected [H, W, 3] image, got {s:?}");
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    let img = image::RgbImage::from_raw(s[1] as u32, s[0] as u32, bytes)
        .expect("buffer length matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

pub fn load_png(path: &Path) -> Result<Array> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(Array::new(&[h as usize, w as usize, 3], data))
}

/// Streaming reader over an on-disk dataset.
pub struct DatasetReader {
    root: PathBuf,
    manifest: DatasetManifest,
    next: usize,
}

pub fn load_dataset(path: &Path) -> Result<DatasetReader> {
    let manifest_path = path.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::io(
            &manifest_path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset manifest not found"),
        ));
    }
    let manifest: DatasetManifest = read_json(&manifest_path)?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            path: manifest_path,
            expected: DATASET_SCHEMA_VERSION,
            found: manifest.schema_version,
        });
    }
    Ok(DatasetReader {
        root: path.to_path_buf(),
        manifest,
        next: 0,
    })
}

impl DatasetReader {
    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn read_record(&self, index: usize) -> Result<ObjectRecord> {
        let entry = self
            .manifest
            .objects
            .get(index)
            .ok_or_else(|| Error::Contract(format!("record {index} out of range")))?;
        let dir = self.root.join(&entry.object_id);
        let meta_path = dir.join(OBJECT_META_FILE);
        let meta: ObjectMeta = read_json(&meta_path)?;
        if meta.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                path: meta_path,
                expected: DATASET_SCHEMA_VERSION,
                found: meta.schema_version,
            });
        }
        let res = self.manifest.resolution;
        let load_set = |kind: &str, poses: &[PoseRecord]| -> Result<Vec<RenderedView>> {
            if poses.len() != self.manifest.views_per_set {
                return Err(Error::format(&meta_path, format!("{kind} view count {}", poses.len())));
            }
            poses
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let path = dir.join(view_file(kind, i));
                    let image = load_png(&path)?;
                    if image.shape() != [res, res, 3] {
                        return Err(Error::Image {
                            path,
                            message: format!("expected {res}x{res}, found {:?}", image.shape()),
                        });
                    }
                    Ok(RenderedView {
                        image,
                        pose: p.to_pose()?,
                    })
                })
                .collect()
        };
        Ok(ObjectRecord {
            random_views: load_set("random", &meta.random_poses)?,
            fixed_views: load_set("fixed", &meta.fixed_poses)?,
            object: meta.object,
            seed: meta.seed,
        })
    }
}

impl Iterator for DatasetReader {
    type Item = Result<ObjectRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.manifest.objects.len() {
            return None;
        }
        let r = self.read_record(self.next);
        self.next += 1;
        Some(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn toy_objects_are_seeded_and_bounded() {
        let a = make_toy_object(&mut substream(5, "t", 0), "a");
        let b = make_toy_object(&mut substream(5, "t", 0), "a");
        assert_eq!(a, b);
        let mut counts = [0usize; 5];
        for i in 0..1000 {
            let o = make_toy_object(&mut substream(11, "t", i), "x");
            assert!(o.bounding_radius() <= 1.0, "object {i} radius {}", o.bounding_radius());
            assert!((1..=4).contains(&o.primitives.len()));
            for p in &o.primitives {
                assert!(p.half_extent > 0.0 && p.half_extent <= 0.3);
                assert!(p.center.iter().all(|c| c.abs() <= 0.4));
            }
            counts[o.primitives.len()] += 1;
        }
        assert!(counts[1..].iter().all(|&c| c > 0), "histogram {counts:?}");
    }

    #[test]
    fn background_pixels_are_white() {
        let o = ToyObject::centered_sphere(0.2, [0.3, 0.5, 0.7]);
        let pose = CameraPose::from_degrees(10.0, 30.0, 1.5).unwrap();
        let v = rasterize_view(&o, &pose, 32).unwrap();
        let frame = ViewFrame::square(pose, 32).unwrap();
        let mask = silhouette_mask(&o, &frame);
        for (i, px) in v.image.data().chunks(3).enumerate() {
            if mask[i] {
                assert!(px.iter().any(|&c| c < 1.0));
            } else {
                assert_eq!(px, &[1.0, 1.0, 1.0]);
            }
        }
        assert!(rasterize_view(&o, &pose, 48).is_err());
    }

    #[test]
    fn centered_sphere_is_azimuth_invariant() {
        let o = ToyObject::centered_sphere(0.4, [0.8, 0.2, 0.4]);
        let base = rasterize_view(&o, &CameraPose::from_degrees(25.0, 0.0, 1.5).unwrap(), 64).unwrap();
        for az in [37.0, 90.0, 181.0, 300.0] {
            let v = rasterize_view(&o, &CameraPose::from_degrees(25.0, az, 1.5).unwrap(), 64).unwrap();
            assert!(v.image.max_abs_diff(&base.image) < 1e-9, "azimuth {az}");
        }
    }

    #[test]
    fn sphere_silhouette_matches_projected_disc() {
        let r = 0.5;
        let o = ToyObject::centered_sphere(r, [0.5; 3]);
        let pose = CameraPose::from_degrees(30.0, 45.0, 1.5).unwrap();
        let frame = ViewFrame::square(pose, 128).unwrap();
        let covered = silhouette_mask(&o, &frame).iter().filter(|&&m| m).count() as f64;
        // A sphere subtends a cone of half-angle asin(r/d); on the unit-focal
        // image plane that is a disc of radius tan(asin(r/d)).
        let plane_radius = (r / 1.5f64).asin().tan();
        let px_per_unit = 128.0 / (2.0 * (frame.fov_y / 2.0).tan());
        let disc = PI * (plane_radius * px_per_unit).powi(2);
        assert!((covered - disc).abs() / disc < 0.02, "covered {covered} vs disc {disc}");
    }

    #[test]
    fn box_faces_shade_toward_camera() {
        let o = ToyObject {
            object_id: "box".into(),
            primitives: vec![Primitive {
                shape: Shape::Box,
                center: [0.0; 3],
                half_extent: 0.3,
                albedo: [1.0, 1.0, 1.0],
            }],
        };
        let pose = CameraPose::from_degrees(0.0, 0.0, 1.5).unwrap();
        let v = rasterize_view(&o, &pose, 32).unwrap();
        // Looking straight at the +x face: center pixel is lit head-on.
        let c = v.image.at(&[16, 16, 0]);
        assert!(c > 0.99, "center shade {c}");
    }
}
