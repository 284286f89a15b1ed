//! Deterministic software rasterizer for box-composed parts, ground-truth
//! change masks, ROI cropping and paired augmentation.
//!
//! Coverage is tested at pixel centers with inclusive edge functions and no
//! antialiasing, so every pixel carries exactly one part label. Depth comes
//! from the triangle's own vertices only, which makes a pixel's label
//! independent of which other parts are present. Ties go to the lower part ID.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{AssemblyState, PartCatalog, PartDiff, PartId};
use crate::geometry::{CameraPose, Vec3};
use crate::image::{BinaryMask, InstanceMap, RgbImage};

/// Vertices closer than this to the image plane abort the render.
pub const NEAR_PLANE: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("camera is inside part {0}")]
    CameraInside(PartId),
    #[error("part {0} crosses the camera's near plane")]
    NearPlane(PartId),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("crop error: {0}")]
    Crop(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Background {
    Flat([u8; 3]),
    /// Value noise over an 8-pixel lattice, tinted by `tint`.
    Noise { seed: u64, tint: [u8; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub size: usize,
    /// Unit direction pointing towards the light, world frame.
    pub light_dir: Vec3,
    pub ambient: f64,
    pub background: Background,
}

impl RenderParams {
    pub fn new(size: usize) -> Self {
        RenderParams {
            size,
            light_dir: Vec3::new(0.3, 0.2, 1.0).normalized(),
            ambient: 0.35,
            background: Background::Flat([128, 128, 128]),
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if self.size < 32 || !self.size.is_power_of_two() {
            return Err(RenderError::InvalidArgument(format!(
                "image size {} must be a power of two >= 32",
                self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.ambient) {
            return Err(RenderError::InvalidArgument(format!("ambient {} outside [0, 1]", self.ambient)));
        }
        if (self.light_dir.norm() - 1.0).abs() > 1e-6 {
            return Err(RenderError::InvalidArgument("light direction must be unit length".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub rgb: RgbImage,
    pub instance: InstanceMap,
    /// Camera-frame depth per pixel; `f64::INFINITY` on background.
    pub depth: Vec<f64>,
    pub pose: CameraPose,
    pub state: AssemblyState,
}

struct Face {
    corners: [usize; 4],
    normal: Vec3,
}

// local box faces as corner indices (bit 0 = +x, bit 1 = +y, bit 2 = +z)
const FACES: [([usize; 4], [f64; 3]); 6] = [
    ([0, 2, 6, 4], [-1.0, 0.0, 0.0]),
    ([1, 5, 7, 3], [1.0, 0.0, 0.0]),
    ([0, 4, 5, 1], [0.0, -1.0, 0.0]),
    ([2, 3, 7, 6], [0.0, 1.0, 0.0]),
    ([0, 1, 3, 2], [0.0, 0.0, -1.0]),
    ([4, 6, 7, 5], [0.0, 0.0, 1.0]),
];

fn box_faces() -> impl Iterator<Item = Face> {
    FACES.iter().map(|&(corners, n)| Face { corners, normal: Vec3::from_array(n) })
}

/// World-frame corners of a box; index bits select the max side per axis.
pub fn box_corners(part: &crate::assembly::PartDef, b: &crate::assembly::BoxGeom) -> [Vec3; 8] {
    let mut out = [Vec3::default(); 8];
    for (i, c) in out.iter_mut().enumerate() {
        let sel = |axis: usize| if i >> axis & 1 == 1 { 0.5 } else { -0.5 };
        let local = Vec3::new(
            b.center[0] + sel(0) * b.size[0],
            b.center[1] + sel(1) * b.size[1],
            b.center[2] + sel(2) * b.size[2],
        );
        *c = part.place(local);
    }
    out
}

fn background_pixel(bg: &Background, size: usize, x: usize, y: usize, lattice: &[f64]) -> [u8; 3] {
    match *bg {
        Background::Flat(c) => c,
        Background::Noise { tint, .. } => {
            let cells = size / 8 + 2;
            let fx = (x as f64 + 0.5) / 8.0;
            let fy = (y as f64 + 0.5) / 8.0;
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let g = |i: usize, j: usize| lattice[j * cells + i];
            let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
            let bottom = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
            let v = 0.55 + 0.45 * (top * (1.0 - ty) + bottom * ty);
            [0, 1, 2].map(|c| (tint[c] as f64 * v).round().clamp(0.0, 255.0) as u8)
        }
    }
}

fn noise_lattice(bg: &Background, size: usize) -> Vec<f64> {
    match *bg {
        Background::Flat(_) => Vec::new(),
        Background::Noise { seed, .. } => {
            use rand::SeedableRng;
            let cells = size / 8 + 2;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            (0..cells * cells).map(|_| rng.gen::<f64>()).collect()
        }
    }
}

/// Renders the present parts of `state` from `pose`.
pub fn rasterize(
    catalog: &PartCatalog,
    state: &AssemblyState,
    pose: &CameraPose,
    params: &RenderParams,
) -> Result<RenderedView, RenderError> {
    params.validate()?;
    pose.validate().map_err(|e| RenderError::InvalidArgument(e.to_string()))?;
    if pose.intrinsics.width != params.size || pose.intrinsics.height != params.size {
        return Err(RenderError::InvalidArgument(format!(
            "pose intrinsics {}x{} do not match render size {}",
            pose.intrinsics.width, pose.intrinsics.height, params.size
        )));
    }
    if !catalog.is_valid_state(state) {
        return Err(RenderError::InvalidArgument("state is not valid for this catalog".into()));
    }
    let size = params.size;
    let npx = size * size;
    let mut depth = vec![f64::INFINITY; npx];
    let mut instance = InstanceMap::new(size, size);
    let mut shade = vec![[0u8; 3]; npx];

    for id in state.parts() {
        let part = catalog.part(id);
        let rot = part.rotation();
        for b in &part.boxes {
            // camera inside this box?
            let local_cam = rot.conjugate().rotate(pose.position - Vec3::from_array(part.translation));
            if (0..3).all(|a| (local_cam.to_array()[a] - b.center[a]).abs() < 0.5 * b.size[a]) {
                return Err(RenderError::CameraInside(id));
            }
            let world = box_corners(part, b);
            let cam: Vec<Vec3> = world.iter().map(|&p| pose.to_camera(p)).collect();
            if cam.iter().any(|c| c.z <= NEAR_PLANE) {
                return Err(RenderError::NearPlane(id));
            }
            let screen: Vec<(f64, f64)> = cam.iter().map(|&c| pose.project_camera(c)).collect();
            for face in box_faces() {
                let n = rot.rotate(face.normal);
                let on_face = world[face.corners[0]];
                if (pose.position - on_face).dot(n) <= 0.0 {
                    continue;
                }
                let lambert = n.dot(params.light_dir).max(0.0) + params.ambient;
                let color = part.color.map(|c| (c as f64 * lambert).round().clamp(0.0, 255.0) as u8);
                let [a, b1, c, d] = face.corners;
                for tri in [[a, b1, c], [a, c, d]] {
                    raster_triangle(
                        tri.map(|i| screen[i]),
                        tri.map(|i| cam[i].z),
                        size,
                        |px, z| {
                            let cur = depth[px];
                            let cur_id = instance.data[px];
                            if z < cur || (z == cur && id < cur_id) {
                                depth[px] = z;
                                instance.data[px] = id;
                                shade[px] = color;
                            }
                        },
                    );
                }
            }
        }
    }

    let lattice = noise_lattice(&params.background, size);
    let mut rgb = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let px = y * size + x;
            let c = if instance.data[px] == 0 {
                background_pixel(&params.background, size, x, y, &lattice)
            } else {
                shade[px]
            };
            rgb.set(x, y, c);
        }
    }
    Ok(RenderedView { rgb, instance, depth, pose: *pose, state: *state })
}

/// Visits every pixel whose center lies inside the triangle, passing the
/// perspective-correct depth.
fn raster_triangle(v: [(f64, f64); 3], z: [f64; 3], size: usize, mut visit: impl FnMut(usize, f64)) {
    let area = (v[1].0 - v[0].0) * (v[2].1 - v[0].1) - (v[1].1 - v[0].1) * (v[2].0 - v[0].0);
    if area.abs() < 1e-12 {
        return;
    }
    let min_x = v.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_x = v.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = v.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_y = v.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let x0 = (min_x - 0.5).ceil().max(0.0) as usize;
    let y0 = (min_y - 0.5).ceil().max(0.0) as usize;
    let x1 = ((max_x - 0.5).floor()).min(size as f64 - 1.0);
    let y1 = ((max_y - 0.5).floor()).min(size as f64 - 1.0);
    if x1 < 0.0 || y1 < 0.0 {
        return;
    }
    let (x1, y1) = (x1 as usize, y1 as usize);
    let inv_z = z.map(|d| 1.0 / d);
    let edge = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let w0 = edge(v[1], v[2], p) / area;
            let w1 = edge(v[2], v[0], p) / area;
            let w2 = edge(v[0], v[1], p) / area;
            if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                continue;
            }
            let iz = w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2];
            visit(y * size + x, 1.0 / iz);
        }
    }
}

/// Pixels whose instance labels differ between the anchor render and the
/// sample's state rendered at the anchor pose.
pub fn change_mask(anchor: &RenderedView, sample_at_anchor_pose: &RenderedView) -> Result<BinaryMask, RenderError> {
    if !anchor.pose.same_pose(&sample_at_anchor_pose.pose) {
        return Err(RenderError::InvalidArgument("views were rendered from different poses".into()));
    }
    instance_change_mask(&anchor.instance, &sample_at_anchor_pose.instance)
}

/// Pixelwise label inequality of two instance maps.
pub fn instance_change_mask(a: &InstanceMap, b: &InstanceMap) -> Result<BinaryMask, RenderError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(RenderError::InvalidArgument(format!(
            "instance maps differ in size: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(BinaryMask {
        width: a.width,
        height: a.height,
        data: a.data.iter().zip(&b.data).map(|(x, y)| (x != y) as u8).collect(),
    })
}

/// Pixels where either label belongs to the part difference.
pub fn diff_set_mask(a: &InstanceMap, b: &InstanceMap, diff: &PartDiff) -> BinaryMask {
    BinaryMask {
        width: a.width,
        height: a.height,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| (diff.contains(x) || diff.contains(y)) as u8).collect(),
    }
}

/// The rasters of one training pair, all in the anchor's frame except the
/// sample image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRasters {
    pub anchor_rgb: RgbImage,
    pub sample_rgb: RgbImage,
    pub anchor_instance: InstanceMap,
    /// Sample state rendered at the anchor pose.
    pub aligned_instance: InstanceMap,
    pub mask: BinaryMask,
}

impl PairRasters {
    pub fn size(&self) -> (usize, usize) {
        (self.mask.width, self.mask.height)
    }
}

/// Crop window in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Tight bounds `[x0, x1) × [y0, y1)` of nonzero labels in either map.
pub fn object_bounds(maps: &[&InstanceMap]) -> Option<(usize, usize, usize, usize)> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for m in maps {
        for y in 0..m.height {
            for x in 0..m.width {
                if m.get(x, y) != 0 {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
    }
    (x0 != usize::MAX).then_some((x0, y0, x1, y1))
}

/// Window holding the object bounds grown by `margin_frac`, with the object
/// placed at a random offset inside when `translate` is set.
pub fn crop_window<R: Rng + ?Sized>(
    bounds: (usize, usize, usize, usize),
    image: (usize, usize),
    margin_frac: f64,
    translate: bool,
    rng: &mut R,
) -> CropWindow {
    let (x0, y0, x1, y1) = bounds;
    let axis = |lo: usize, hi: usize, limit: usize, rng: &mut R| {
        let (lo, hi, limit) = (lo as f64, hi as f64, limit as f64);
        let side = ((hi - lo) * (1.0 + margin_frac)).min(limit);
        // window start keeping [lo, hi) inside and the window inside the image
        let start_min = (hi - side).max(0.0);
        let start_max = lo.min(limit - side);
        let centered = (lo - (side - (hi - lo)) * 0.5).clamp(start_min, start_max);
        let start = if translate && start_max > start_min {
            start_min + rng.gen::<f64>() * (start_max - start_min)
        } else {
            centered
        };
        (start, side)
    };
    let (x, w) = axis(x0, x1, image.0, rng);
    let (y, h) = axis(y0, y1, image.1, rng);
    CropWindow { x, y, w, h }
}

fn nearest_index(start: f64, extent: f64, out: usize, i: usize, limit: usize) -> usize {
    let s = start + (i as f64 + 0.5) * extent / out as f64;
    (s.floor().max(0.0) as usize).min(limit - 1)
}

pub fn resample_nearest<T: Copy>(src: &[T], width: usize, height: usize, win: CropWindow, out: usize) -> Vec<T> {
    let xs: Vec<usize> = (0..out).map(|i| nearest_index(win.x, win.w, out, i, width)).collect();
    let ys: Vec<usize> = (0..out).map(|j| nearest_index(win.y, win.h, out, j, height)).collect();
    let mut dst = Vec::with_capacity(out * out);
    for &sy in &ys {
        for &sx in &xs {
            dst.push(src[sy * width + sx]);
        }
    }
    dst
}

pub fn resample_bilinear(src: &RgbImage, win: CropWindow, out: usize) -> RgbImage {
    let mut dst = RgbImage::new(out, out);
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for j in 0..out {
        let sy = win.y + (j as f64 + 0.5) * win.h / out as f64 - 0.5;
        let y0 = sy.floor();
        let ty = sy - y0;
        for i in 0..out {
            let sx = win.x + (i as f64 + 0.5) * win.w / out as f64 - 0.5;
            let x0 = sx.floor();
            let tx = sx - x0;
            let (xa, xb) = (clampi(x0 as isize, src.width), clampi(x0 as isize + 1, src.width));
            let (ya, yb) = (clampi(y0 as isize, src.height), clampi(y0 as isize + 1, src.height));
            let px = [0, 1, 2].map(|c| {
                let g = |x, y| src.get(x, y)[c] as f64;
                let v = (g(xa, ya) * (1.0 - tx) + g(xb, ya) * tx) * (1.0 - ty)
                    + (g(xa, yb) * (1.0 - tx) + g(xb, yb) * tx) * ty;
                v.round().clamp(0.0, 255.0) as u8
            });
            dst.set(i, j, px);
        }
    }
    dst
}

/// Crops all rasters with one window around the object and resamples them to
/// `out × out`: nearest for labels and mask, bilinear for color.
pub fn roi_crop<R: Rng + ?Sized>(
    pair: &PairRasters,
    margin_frac: f64,
    translate: bool,
    out: usize,
    rng: &mut R,
) -> Result<(PairRasters, CropWindow), RenderError> {
    if !(margin_frac >= 0.0) {
        return Err(RenderError::Crop(format!("margin {margin_frac} must be non-negative")));
    }
    let (w, h) = pair.size();
    let bounds = object_bounds(&[&pair.anchor_instance, &pair.aligned_instance])
        .ok_or_else(|| RenderError::Crop("no object pixels in the anchor view".into()))?;
    let win = crop_window(bounds, (w, h), margin_frac, translate, rng);
    let inst = |m: &InstanceMap| InstanceMap { width: out, height: out, data: resample_nearest(&m.data, w, h, win, out) };
    Ok((
        PairRasters {
            anchor_rgb: resample_bilinear(&pair.anchor_rgb, win, out),
            sample_rgb: resample_bilinear(&pair.sample_rgb, win, out),
            anchor_instance: inst(&pair.anchor_instance),
            aligned_instance: inst(&pair.aligned_instance),
            mask: BinaryMask { width: out, height: out, data: resample_nearest(&pair.mask.data, w, h, win, out) },
        },
        win,
    ))
}

/// Amplitudes of the training-time augmentations. Zero disables each one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Maximum hue rotation, degrees.
    pub hue: f64,
    /// Maximum relative brightness change.
    pub brightness: f64,
    /// Maximum relative contrast change.
    pub contrast: f64,
    /// Random multiples of 90 degrees.
    pub rotate90: bool,
    /// Maximum continuous rotation, degrees.
    pub rotation_deg: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub blur_sigma_max: f64,
}

impl AugmentConfig {
    pub const NONE: AugmentConfig = AugmentConfig {
        hue: 0.0,
        brightness: 0.0,
        contrast: 0.0,
        rotate90: false,
        rotation_deg: 0.0,
        hflip_prob: 0.0,
        vflip_prob: 0.0,
        blur_sigma_max: 0.0,
    };

    pub fn standard() -> Self {
        AugmentConfig {
            hue: 10.0,
            brightness: 0.2,
            contrast: 0.2,
            rotate90: true,
            rotation_deg: 10.0,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            blur_sigma_max: 1.0,
        }
    }
}

impl AugmentConfig {
    /// Colour jitter and blur only; no geometric transform.
    pub fn photometric() -> Self {
        AugmentConfig { rotate90: false, rotation_deg: 0.0, hflip_prob: 0.0, vflip_prob: 0.0, ..Self::standard() }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::photometric()
    }
}

/// Geometric transform shared by all rasters of a pair: output pixel
/// center -> source coordinates.
#[derive(Debug, Clone, Copy)]
struct Warp {
    quarter_turns: u8,
    angle: f64,
    hflip: bool,
    vflip: bool,
}

impl Warp {
    fn is_identity(&self) -> bool {
        self.quarter_turns == 0 && self.angle == 0.0 && !self.hflip && !self.vflip
    }

    /// Source coordinates (continuous) for output pixel `(i, j)`.
    fn source(&self, i: usize, j: usize, n: usize) -> (f64, f64) {
        let c = n as f64 * 0.5;
        let (mut x, mut y) = (i as f64 + 0.5 - c, j as f64 + 0.5 - c);
        if self.hflip {
            x = -x;
        }
        if self.vflip {
            y = -y;
        }
        for _ in 0..self.quarter_turns {
            (x, y) = (y, -x);
        }
        if self.angle != 0.0 {
            let (s, co) = self.angle.sin_cos();
            (x, y) = (co * x + s * y, -s * x + co * y);
        }
        (x + c, y + c)
    }

    fn nearest<T: Copy + Default>(&self, src: &[T], n: usize) -> Vec<T> {
        let mut out = vec![T::default(); n * n];
        for j in 0..n {
            for i in 0..n {
                let (sx, sy) = self.source(i, j, n);
                if sx >= 0.0 && sy >= 0.0 && sx < n as f64 && sy < n as f64 {
                    out[j * n + i] = src[sy.floor() as usize * n + sx.floor() as usize];
                }
            }
        }
        out
    }

    fn bilinear(&self, src: &RgbImage) -> RgbImage {
        let n = src.width;
        let mut out = RgbImage::new(n, n);
        let clampi = |v: f64| (v as isize).clamp(0, n as isize - 1) as usize;
        for j in 0..n {
            for i in 0..n {
                let (sx, sy) = self.source(i, j, n);
                let (fx, fy) = (sx - 0.5, sy - 0.5);
                let (x0, y0) = (fx.floor(), fy.floor());
                let (tx, ty) = (fx - x0, fy - y0);
                let (xa, xb, ya, yb) = (clampi(x0), clampi(x0 + 1.0), clampi(y0), clampi(y0 + 1.0));
                let px = [0, 1, 2].map(|c| {
                    let g = |x, y| src.get(x, y)[c] as f64;
                    let v = (g(xa, ya) * (1.0 - tx) + g(xb, ya) * tx) * (1.0 - ty)
                        + (g(xa, yb) * (1.0 - tx) + g(xb, yb) * tx) * ty;
                    v.round().clamp(0.0, 255.0) as u8
                });
                out.set(i, j, px);
            }
        }
        out
    }
}

fn rgb_to_hsv(c: [f64; 3]) -> [f64; 3] {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == c[0] {
        60.0 * ((c[1] - c[2]) / d).rem_euclid(6.0)
    } else if max == c[1] {
        60.0 * ((c[2] - c[0]) / d + 2.0)
    } else {
        60.0 * ((c[0] - c[1]) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn photometric<R: Rng + ?Sized>(img: &RgbImage, cfg: &AugmentConfig, rng: &mut R) -> RgbImage {
    let mut px: Vec<[f64; 3]> =
        img.data.chunks_exact(3).map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]).collect();
    let mut touched = false;
    if cfg.hue > 0.0 {
        let shift = rng.gen_range(-cfg.hue..=cfg.hue);
        for p in &mut px {
            let [h, s, v] = rgb_to_hsv(*p);
            *p = hsv_to_rgb(h + shift, s, v);
        }
        touched = true;
    }
    if cfg.brightness > 0.0 {
        let f = 1.0 + rng.gen_range(-cfg.brightness..=cfg.brightness);
        for p in &mut px {
            *p = p.map(|v| v * f);
        }
        touched = true;
    }
    if cfg.contrast > 0.0 {
        let f = 1.0 + rng.gen_range(-cfg.contrast..=cfg.contrast);
        let mean = px.iter().map(|p| (p[0] + p[1] + p[2]) / 3.0).sum::<f64>() / px.len() as f64;
        for p in &mut px {
            *p = p.map(|v| (v - mean) * f + mean);
        }
        touched = true;
    }
    if cfg.blur_sigma_max > 0.0 {
        let sigma = rng.gen_range(0.0..=cfg.blur_sigma_max);
        if sigma >= 0.1 {
            px = gaussian_blur(&px, img.width, img.height, sigma);
            touched = true;
        }
    }
    if !touched {
        return img.clone();
    }
    RgbImage {
        width: img.width,
        height: img.height,
        data: px.iter().flat_map(|p| p.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)).collect(),
    }
}

fn gaussian_blur(px: &[[f64; 3]], w: usize, h: usize, sigma: f64) -> Vec<[f64; 3]> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[[f64; 3]], horizontal: bool| {
        let mut out = vec![[0.0; 3]; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (k, wgt) in kernel.iter().enumerate() {
                    let d = k as isize - r;
                    let (sx, sy) = if horizontal {
                        ((x as isize + d).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + d).clamp(0, h as isize - 1) as usize)
                    };
                    let s = src[sy * w + sx];
                    for c in 0..3 {
                        acc[c] += wgt * s[c];
                    }
                }
                out[y * w + x] = acc.map(|v| v / norm);
            }
        }
        out
    };
    pass(&pass(px, true), false)
}

/// Shared geometric transform on every raster, independent photometric
/// jitter and blur per image.
pub fn augment_pair<R: Rng + ?Sized>(pair: &PairRasters, cfg: &AugmentConfig, rng: &mut R) -> PairRasters {
    let (n, h) = pair.size();
    assert_eq!(n, h, "augmentation expects square rasters");
    let warp = Warp {
        quarter_turns: if cfg.rotate90 { rng.gen_range(0..4) } else { 0 },
        angle: if cfg.rotation_deg > 0.0 {
            rng.gen_range(-cfg.rotation_deg..=cfg.rotation_deg).to_radians()
        } else {
            0.0
        },
        hflip: cfg.hflip_prob > 0.0 && rng.gen::<f64>() < cfg.hflip_prob,
        vflip: cfg.vflip_prob > 0.0 && rng.gen::<f64>() < cfg.vflip_prob,
    };
    let mut out = pair.clone();
    if !warp.is_identity() {
        out.anchor_rgb = warp.bilinear(&pair.anchor_rgb);
        out.sample_rgb = warp.bilinear(&pair.sample_rgb);
        out.anchor_instance.data = warp.nearest(&pair.anchor_instance.data, n);
        out.aligned_instance.data = warp.nearest(&pair.aligned_instance.data, n);
        out.mask.data = warp.nearest(&pair.mask.data, n);
    }
    out.anchor_rgb = photometric(&out.anchor_rgb, cfg, rng);
    out.sample_rgb = photometric(&out.sample_rgb, cfg, rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{bit, part_diff, sample_state_pair, StateConstraints};
    use crate::geometry::{sample_pose, Intrinsics, PoseParams, PoseRange};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cat() -> PartCatalog {
        PartCatalog::default_catalog()
    }

    fn pose(size: usize, el: f64, az: f64) -> CameraPose {
        PoseParams { elevation_deg: el, azimuth_deg: az, distance: 4.0, roll_deg: 0.0 }
            .to_pose(Intrinsics::from_fov(size, 50.0))
    }

    #[test]
    fn base_only_from_above() {
        let c = cat();
        let s = c.state(bit(c.base_part()));
        let v = rasterize(&c, &s, &pose(64, 89.0, 0.0), &RenderParams::new(64)).unwrap();
        let labels: std::collections::BTreeSet<u16> = v.instance.data.iter().copied().collect();
        assert_eq!(labels, [0, c.base_part()].into_iter().collect());
    }

    #[test]
    fn labels_and_depth_consistent() {
        let c = cat();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (a, _) = sample_state_pair(&c, 1, 6, &StateConstraints::default(), &mut rng).unwrap();
            let p = sample_pose(&PoseRange::training(), Intrinsics::from_fov(64, 50.0), &mut rng).unwrap();
            let v = rasterize(&c, &a, &p, &RenderParams::new(64)).unwrap();
            for (i, &id) in v.instance.data.iter().enumerate() {
                assert!(id == 0 || a.contains(id));
                assert_eq!(id != 0, v.depth[i].is_finite());
            }
        }
    }

    #[test]
    fn deterministic() {
        let c = cat();
        let p = pose(128, 45.0, 20.0);
        let mut params = RenderParams::new(128);
        params.background = Background::Noise { seed: 5, tint: [100, 140, 180] };
        let a = rasterize(&c, &c.full_state(), &p, &params).unwrap();
        let b = rasterize(&c, &c.full_state(), &p, &params).unwrap();
        assert_eq!(a.rgb.data, b.rgb.data);
        assert_eq!(a.instance.data, b.instance.data);
        assert_eq!(a.depth.iter().map(|d| d.to_bits()).collect::<Vec<_>>(), b.depth.iter().map(|d| d.to_bits()).collect::<Vec<_>>());
    }

    fn cube_catalog() -> PartCatalog {
        PartCatalog::from_toml(
            r#"
base_part = "cube"
adjacency = []
[[parts]]
id = 1
name = "cube"
color = [200, 100, 50]
boxes = [{ center = [0.0, 0.0, 0.0], size = [1.0, 1.0, 1.0] }]
"#,
        )
        .unwrap()
    }

    fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
        let mut lower: Vec<(f64, f64)> = Vec::new();
        for &p in &pts {
            while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
                lower.pop();
            }
            lower.push(p);
        }
        let mut upper: Vec<(f64, f64)> = Vec::new();
        for &p in pts.iter().rev() {
            while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
                upper.pop();
            }
            upper.push(p);
        }
        lower.pop();
        upper.pop();
        lower.extend(upper);
        lower
    }

    /// Signed distance to a counter-clockwise convex polygon (negative inside).
    fn hull_distance(hull: &[(f64, f64)], p: (f64, f64)) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..hull.len() {
            let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
            let (ex, ey) = (b.0 - a.0, b.1 - a.1);
            let len = (ex * ex + ey * ey).sqrt();
            // outward normal for CCW order in a y-down frame is (ey, -ex)
            let d = ((p.0 - a.0) * ey - (p.1 - a.1) * ex) / len;
            worst = worst.max(d);
        }
        worst
    }

    #[test]
    fn cube_matches_analytic_projection() {
        let c = cube_catalog();
        for (el, az) in [(40.0, 10.0), (60.0, -35.0), (20.0, 80.0)] {
            let p = pose(128, el, az);
            let v = rasterize(&c, &c.full_state(), &p, &RenderParams::new(128)).unwrap();
            let corners: Vec<(f64, f64)> = (0..8)
                .map(|i| {
                    let s = |a: usize| if i >> a & 1 == 1 { 0.5 } else { -0.5 };
                    p.project_camera(p.to_camera(Vec3::new(s(0), s(1), s(2))))
                })
                .collect();
            let mut hull = convex_hull(corners);
            // orient so that interior distances are negative
            let probe = (64.0, 64.0);
            if hull_distance(&hull, probe) > 0.0 {
                hull.reverse();
            }
            for y in 0..128 {
                for x in 0..128 {
                    let d = hull_distance(&hull, (x as f64 + 0.5, y as f64 + 0.5));
                    let covered = v.instance.get(x, y) == 1;
                    if d < -1.0 {
                        assert!(covered, "pixel ({x},{y}) well inside hull not covered");
                    }
                    if d > 1.0 {
                        assert!(!covered, "pixel ({x},{y}) well outside hull covered");
                    }
                }
            }
        }
    }

    #[test]
    fn camera_inside_geometry_errors() {
        let c = cube_catalog();
        let mut p = pose(64, 40.0, 0.0);
        p.position = Vec3::new(0.1, 0.0, 0.0);
        assert_eq!(rasterize(&c, &c.full_state(), &p, &RenderParams::new(64)), Err(RenderError::CameraInside(1)));
    }

    #[test]
    fn render_params_validated() {
        let c = cat();
        assert!(rasterize(&c, &c.full_state(), &pose(48, 40.0, 0.0), &RenderParams::new(48)).is_err());
        assert!(rasterize(&c, &c.full_state(), &pose(64, 40.0, 0.0), &RenderParams::new(128)).is_err());
    }

    fn views(seed: u64, size: usize) -> (RenderedView, RenderedView, PartDiff) {
        let c = cat();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = sample_state_pair(&c, 1, 6, &StateConstraints::default(), &mut rng).unwrap();
        let p = sample_pose(&PoseRange::training(), Intrinsics::from_fov(size, 50.0), &mut rng).unwrap();
        let params = RenderParams::new(size);
        (rasterize(&c, &a, &p, &params).unwrap(), rasterize(&c, &b, &p, &params).unwrap(), part_diff(&a, &b).unwrap())
    }

    #[test]
    fn mask_rules_agree() {
        for seed in 0..120 {
            let (va, vb, diff) = views(seed, 64);
            let m = change_mask(&va, &vb).unwrap();
            assert_eq!(m, diff_set_mask(&va.instance, &vb.instance, &diff), "seed {seed}");
            assert_eq!(m, change_mask(&vb, &va).unwrap());
            assert_eq!(change_mask(&va, &va).unwrap().count(), 0);
        }
    }

    #[test]
    fn single_wheel_mask_is_its_footprint() {
        let c = cat();
        let w = c.id_of("wheel_1").unwrap();
        let p = pose(128, 35.0, 30.0);
        let params = RenderParams::new(128);
        let full = rasterize(&c, &c.full_state(), &p, &params).unwrap();
        let minus = rasterize(&c, &c.state(c.full_mask() & !bit(w)), &p, &params).unwrap();
        let m = change_mask(&full, &minus).unwrap();
        let footprint = BinaryMask {
            width: 128,
            height: 128,
            data: full.instance.data.iter().map(|&id| (id == w) as u8).collect(),
        };
        assert!(footprint.count() > 0);
        assert_eq!(m, footprint);
    }

    #[test]
    fn mask_requires_same_pose() {
        let (va, mut vb, _) = views(1, 64);
        vb.pose.position = vb.pose.position + Vec3::new(0.0, 0.0, 1e-3);
        assert!(change_mask(&va, &vb).is_err());
    }

    fn rasters(seed: u64) -> PairRasters {
        let (va, vb, _) = views(seed, 128);
        PairRasters {
            anchor_rgb: va.rgb.clone(),
            sample_rgb: vb.rgb.clone(),
            mask: change_mask(&va, &vb).unwrap(),
            anchor_instance: va.instance,
            aligned_instance: vb.instance,
        }
    }

    #[test]
    fn crop_tight_without_margin() {
        let r = rasters(4);
        let bounds = object_bounds(&[&r.anchor_instance, &r.aligned_instance]).unwrap();
        let win = crop_window(bounds, (128, 128), 0.0, false, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(win.x, bounds.0 as f64);
        assert_eq!(win.y, bounds.1 as f64);
        assert_eq!(win.w, (bounds.2 - bounds.0) as f64);
        assert_eq!(win.h, (bounds.3 - bounds.1) as f64);
    }

    #[test]
    fn crop_margin_and_binary_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..30 {
            let r = rasters(seed);
            let (x0, y0, x1, y1) = object_bounds(&[&r.anchor_instance, &r.aligned_instance]).unwrap();
            let (out, win) = roi_crop(&r, 0.1, true, 64, &mut rng).unwrap();
            let want_w = ((x1 - x0) as f64 * 1.1).min(128.0);
            let want_h = ((y1 - y0) as f64 * 1.1).min(128.0);
            assert!(win.w >= want_w - 1e-9 && win.h >= want_h - 1e-9);
            assert!(win.x <= x0 as f64 && win.x + win.w >= x1 as f64);
            assert!(win.y <= y0 as f64 && win.y + win.h >= y1 as f64);
            assert!(win.x >= 0.0 && win.x + win.w <= 128.0 + 1e-9);
            assert!(out.mask.is_binary());
            assert_eq!(out.mask, instance_change_mask(&out.anchor_instance, &out.aligned_instance).unwrap());
        }
    }

    #[test]
    fn crop_empty_object_errors() {
        let mut r = rasters(0);
        r.anchor_instance.data.fill(0);
        r.aligned_instance.data.fill(0);
        assert!(matches!(roi_crop(&r, 0.1, true, 64, &mut ChaCha8Rng::seed_from_u64(0)), Err(RenderError::Crop(_))));
    }

    fn cropped(seed: u64) -> PairRasters {
        roi_crop(&rasters(seed), 0.1, true, 64, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().0
    }

    #[test]
    fn zero_augmentation_is_identity() {
        let r = cropped(2);
        assert_eq!(augment_pair(&r, &AugmentConfig::NONE, &mut ChaCha8Rng::seed_from_u64(9)), r);
    }

    #[test]
    fn horizontal_flip_only() {
        let r = cropped(3);
        let cfg = AugmentConfig { hflip_prob: 1.0, ..AugmentConfig::NONE };
        let out = augment_pair(&r, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let flipped = BinaryMask::from_fn(64, 64, |x, y| r.mask.get(63 - x, y));
        assert_eq!(out.mask, flipped);
        assert_eq!(out.anchor_rgb.get(0, 5), r.anchor_rgb.get(63, 5));
    }

    #[test]
    fn quarter_turn_is_exact() {
        let r = cropped(5);
        let cfg = AugmentConfig { rotate90: true, ..AugmentConfig::NONE };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..8 {
            let out = augment_pair(&r, &cfg, &mut rng);
            assert_eq!(out.mask.count(), r.mask.count());
        }
    }

    #[test]
    fn augmentation_preserves_mask_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for seed in 0..10 {
            let r = cropped(seed);
            let out = augment_pair(&r, &AugmentConfig::standard(), &mut rng);
            assert!(out.mask.is_binary());
            assert_eq!(out.mask, instance_change_mask(&out.anchor_instance, &out.aligned_instance).unwrap());
        }
    }

    #[test]
    fn hsv_roundtrip() {
        for c in [[0.2, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.9, 0.8, 0.1]] {
            let [h, s, v] = rgb_to_hsv(c);
            let back = hsv_to_rgb(h, s, v);
            for i in 0..3 {
                assert!((back[i] - c[i]).abs() < 1e-12);
            }
        }
    }
}
