//! Procedural egocentric video world.
//!
//! A world is a set of scenes, each a plane of coloured parametric objects
//! over a textured background. The camera visits one scene at a time for an
//! exponentially distributed dwell, fixating one object and drifting
//! smoothly around it. Every frame is a pure function of `(spec, t)`: the
//! per-frame noise is hashed from the seed and the timestamp, never drawn
//! from a shared stream.

use std::collections::BTreeSet;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::seed;

/// Distinct object silhouettes; class id `c` uses shape `c % SHAPES`.
pub const SHAPES: usize = 6;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world spec: {}", .0.join("; "))]
    InvalidSpec(Vec<String>),
    #[error(
        "stream window must satisfy t1 > t0 >= 0 and fps > 0 (got t0={t0}, t1={t1}, fps={fps})"
    )]
    BadWindow { t0: f64, t1: f64, fps: f64 },
    #[error("frame index {index} out of range for stream of {len}")]
    OutOfRange { index: usize, len: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub num_scenes: usize,
    pub objects_per_scene: usize,
    /// Camera displacement scale in view-widths per second.
    pub camera_drift: f64,
    /// Mean seconds per scene visit.
    pub scene_dwell_s: f64,
    /// `(height, width)` in pixels.
    pub frame_size: (usize, usize),
    pub palette_size: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            seed: 0,
            num_classes: 16,
            num_scenes: 12,
            objects_per_scene: 4,
            camera_drift: 0.05,
            scene_dwell_s: 6.0,
            frame_size: (64, 64),
            palette_size: 4,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), WorldError> {
        let mut v = Vec::new();
        if self.num_classes < 2 {
            v.push(format!(
                "num_classes must be >= 2 (got {})",
                self.num_classes
            ));
        }
        if self.num_scenes == 0 {
            v.push("num_scenes must be positive".into());
        }
        if self.objects_per_scene == 0 {
            v.push("objects_per_scene must be positive".into());
        }
        if !(self.scene_dwell_s > 0.0 && self.scene_dwell_s.is_finite()) {
            v.push(format!(
                "scene_dwell_s must be > 0 (got {})",
                self.scene_dwell_s
            ));
        }
        if !(self.camera_drift >= 0.0 && self.camera_drift.is_finite()) {
            v.push(format!(
                "camera_drift must be >= 0 (got {})",
                self.camera_drift
            ));
        }
        if self.frame_size.0 == 0 || self.frame_size.1 == 0 {
            v.push(format!(
                "frame_size must be positive (got {:?})",
                self.frame_size
            ));
        }
        if self.palette_size == 0 {
            v.push("palette_size must be positive".into());
        } else if self.num_classes > SHAPES * self.palette_size {
            v.push(format!(
                "num_classes {} exceeds the {} distinct shape/colour combinations of a {}-colour palette",
                self.num_classes,
                SHAPES * self.palette_size,
                self.palette_size
            ));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(WorldError::InvalidSpec(v))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub timestamp_s: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub visible_class_ids: BTreeSet<usize>,
    pub scene_id: usize,
    pub dominant_class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Disc,
    Square,
    Triangle,
    Ring,
    Cross,
    Striped,
}

impl Shape {
    fn of_class(c: usize) -> Shape {
        match c % SHAPES {
            0 => Shape::Disc,
            1 => Shape::Square,
            2 => Shape::Triangle,
            3 => Shape::Ring,
            4 => Shape::Cross,
            _ => Shape::Striped,
        }
    }

    /// Point test in object-local coordinates scaled by the radius.
    fn contains(self, dx: f64, dy: f64) -> bool {
        let r2 = dx * dx + dy * dy;
        match self {
            Shape::Disc => r2 <= 1.0,
            Shape::Square => dx.abs().max(dy.abs()) <= 0.85,
            Shape::Triangle => (-1.0..=0.6).contains(&dy) && dx.abs() <= 0.95 * (dy + 1.0) / 1.6,
            Shape::Ring => (0.3..=1.0).contains(&r2),
            Shape::Cross => {
                (dx.abs() <= 0.3 && dy.abs() <= 1.0) || (dy.abs() <= 0.3 && dx.abs() <= 1.0)
            }
            Shape::Striped => r2 <= 1.0 && ((dx + 1.0) * 2.5).floor() as i64 % 2 == 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Object {
    class_id: usize,
    x: f64,
    y: f64,
    radius: f64,
}

#[derive(Clone, Debug)]
struct Scene {
    bg_a: [f32; 3],
    bg_b: [f32; 3],
    bg_dir: (f64, f64),
    bg_freq: f64,
    objects: Vec<Object>,
}

#[derive(Clone, Copy, Debug)]
struct Visit {
    start: f64,
    end: f64,
    scene: usize,
    focus: usize,
    zoom: f64,
    phase: [f64; 4],
    omega: [f64; 4],
}

/// Immutable world state; frames are rendered on demand.
#[derive(Debug)]
pub struct World {
    spec: WorldSpec,
    palette: Vec<[f32; 3]>,
    scenes: Vec<Scene>,
    visits: RwLock<Vec<Visit>>,
}

const T_SCENE: u64 = 1;
const T_OBJECT: u64 = 2;
const T_VISIT: u64 = 3;
const T_NOISE: u64 = 4;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32;
    let f = h6 - i as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// Builds a world from a validated spec. No frames are rendered here.
pub fn build_world(spec: &WorldSpec) -> Result<World, WorldError> {
    spec.validate()?;
    let s = spec.seed;
    let palette = (0..spec.palette_size)
        .map(|i| hsv_to_rgb(i as f64 / spec.palette_size as f64 + 0.03, 0.9, 0.95))
        .collect();
    let scenes = (0..spec.num_scenes as u64)
        .map(|k| {
            let u = |j: u64| seed::unit(&[s, T_SCENE, k, j]);
            let hue = u(0);
            let bg_a = hsv_to_rgb(hue, 0.15 + 0.15 * u(1), 0.35 + 0.3 * u(2));
            let bg_b = hsv_to_rgb(hue + 0.1 + 0.2 * u(3), 0.1 + 0.2 * u(4), 0.3 + 0.35 * u(5));
            let ang = u(6) * std::f64::consts::TAU;
            let objects = (0..spec.objects_per_scene as u64)
                .map(|j| {
                    let o = |q: u64| seed::unit(&[s, T_OBJECT, k, j, q]);
                    Object {
                        class_id: (seed::hash(&[s, T_OBJECT, k, j, 99]) % spec.num_classes as u64)
                            as usize,
                        x: (o(0) - 0.5) * 1.4,
                        y: (o(1) - 0.5) * 1.4,
                        radius: 0.12 + 0.1 * o(2),
                    }
                })
                .collect();
            Scene {
                bg_a,
                bg_b,
                bg_dir: (ang.cos(), ang.sin()),
                bg_freq: 2.0 + 6.0 * u(7),
                objects,
            }
        })
        .collect();
    Ok(World {
        spec: spec.clone(),
        palette,
        scenes,
        visits: RwLock::new(Vec::new()),
    })
}

impl World {
    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    /// Appearance colour of a class (shape is `class % SHAPES`).
    pub fn class_color(&self, class_id: usize) -> [f32; 3] {
        self.palette[(class_id / SHAPES) % self.palette.len()]
    }

    fn make_visit(&self, index: u64, start: f64, prev_scene: Option<usize>) -> Visit {
        let s = self.spec.seed;
        let u = |j: u64| seed::unit(&[s, T_VISIT, index, j]);
        let dwell = -self.spec.scene_dwell_s * (1.0 - u(0)).ln();
        let n = self.spec.num_scenes;
        let scene = match prev_scene {
            None => (seed::hash(&[s, T_VISIT, index, 1]) % n as u64) as usize,
            Some(_) if n == 1 => 0,
            Some(p) => {
                (p + 1 + (seed::hash(&[s, T_VISIT, index, 1]) % (n as u64 - 1)) as usize) % n
            }
        };
        let focus =
            (seed::hash(&[s, T_VISIT, index, 2]) % self.spec.objects_per_scene as u64) as usize;
        Visit {
            start,
            end: start + dwell.max(1e-3),
            scene,
            focus,
            zoom: 0.85 + 0.3 * u(3),
            phase: [u(4), u(5), u(6), u(7)].map(|p| p * std::f64::consts::TAU),
            omega: [u(8), u(9), u(10), u(11)].map(|w| 0.3 + 0.9 * w),
        }
    }

    fn visit_at(&self, t: f64) -> Visit {
        {
            let visits = self.visits.read().expect("visit cache poisoned");
            if let Some(last) = visits.last() {
                if t < last.end {
                    let i = visits.partition_point(|v| v.end <= t);
                    return visits[i];
                }
            }
        }
        let mut visits = self.visits.write().expect("visit cache poisoned");
        while visits.last().is_none_or(|v| v.end <= t) {
            let (start, prev) = visits
                .last()
                .map_or((0.0, None), |v| (v.end, Some(v.scene)));
            let next = self.make_visit(visits.len() as u64, start, prev);
            visits.push(next);
        }
        let i = visits.partition_point(|v| v.end <= t);
        visits[i]
    }

    /// Scene visit boundaries in `[0, horizon)`.
    pub fn scene_boundaries(&self, horizon: f64) -> Vec<f64> {
        self.visit_at(horizon);
        let visits = self.visits.read().expect("visit cache poisoned");
        visits
            .iter()
            .map(|v| v.end)
            .take_while(|&e| e < horizon)
            .collect()
    }

    fn camera(&self, v: &Visit, t: f64) -> (f64, f64) {
        let obj = &self.scenes[v.scene].objects[v.focus];
        let amp = (self.spec.camera_drift / 0.5).min(0.3);
        let dt = t - v.start;
        let ox =
            0.6 * (v.omega[0] * dt + v.phase[0]).sin() + 0.4 * (v.omega[1] * dt + v.phase[1]).sin();
        let oy =
            0.6 * (v.omega[2] * dt + v.phase[2]).sin() + 0.4 * (v.omega[3] * dt + v.phase[3]).sin();
        (obj.x + amp * ox, obj.y + amp * oy)
    }

    /// Renders the frame at `t` seconds. Pure in `(self.spec, t)`.
    pub fn render_frame(&self, t: f64) -> (Frame, FrameAnnotation) {
        let t = t.max(0.0);
        let v = self.visit_at(t);
        let scene = &self.scenes[v.scene];
        let (cx, cy) = self.camera(&v, t);
        let (h, w) = self.spec.frame_size;
        let plane = h * w;
        let aspect = w as f64 / h as f64;
        let light = 0.92 + 0.08 * (t * 0.05 + self.spec.seed as f64).sin();
        let tbits = t.to_bits();
        let mut data = vec![0.0f32; 3 * plane];
        let mut coverage = vec![0usize; scene.objects.len()];
        for py in 0..h {
            let wy = cy + v.zoom * ((py as f64 + 0.5) / h as f64 - 0.5);
            for px in 0..w {
                let wx = cx + v.zoom * aspect * ((px as f64 + 0.5) / w as f64 - 0.5);
                let proj = wx * scene.bg_dir.0 + wy * scene.bg_dir.1;
                let m = (0.5 + 0.5 * (proj * scene.bg_freq).sin()) as f32;
                let mut rgb: [f32; 3] =
                    std::array::from_fn(|c| scene.bg_a[c] * (1.0 - m) + scene.bg_b[c] * m);
                let mut top = None;
                for (k, obj) in scene.objects.iter().enumerate() {
                    let dx = (wx - obj.x) / obj.radius;
                    let dy = (wy - obj.y) / obj.radius;
                    if dx.abs() > 1.0 || dy.abs() > 1.0 {
                        continue;
                    }
                    if Shape::of_class(obj.class_id).contains(dx, dy) {
                        let shade =
                            (0.8 + 0.2 * (1.0 - (dx * dx + dy * dy).sqrt().min(1.0))) as f32;
                        let col = self.class_color(obj.class_id);
                        for c in 0..3 {
                            rgb[c] = col[c] * shade;
                        }
                        top = Some(k);
                    }
                }
                // painter's order: only the top-most object owns the pixel
                if let Some(k) = top {
                    coverage[k] += 1;
                }
                let i = py * w + px;
                for c in 0..3 {
                    let noise =
                        (seed::unit(&[self.spec.seed, T_NOISE, tbits, (c * plane + i) as u64])
                            - 0.5)
                            * 0.04;
                    data[c * plane + i] = ((rgb[c] as f64 * light + noise) as f32).clamp(0.0, 1.0);
                }
            }
        }
        let annotation = self.annotate(scene, &v, &coverage);
        (
            Frame {
                image: Image::new(h, w, data),
                timestamp_s: t,
            },
            annotation,
        )
    }

    fn annotate(&self, scene: &Scene, v: &Visit, coverage: &[usize]) -> FrameAnnotation {
        let mut per_class = std::collections::BTreeMap::new();
        for (obj, &cov) in scene.objects.iter().zip(coverage) {
            if cov > 0 {
                *per_class.entry(obj.class_id).or_insert(0usize) += cov;
            }
        }
        let focus_class = scene.objects[v.focus].class_id;
        let dominant_class = per_class
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map_or(focus_class, |(&c, _)| c);
        let mut visible_class_ids: BTreeSet<usize> = per_class.keys().copied().collect();
        // sub-pixel focus objects still count as present in view
        visible_class_ids.insert(dominant_class);
        FrameAnnotation {
            visible_class_ids,
            scene_id: v.scene,
            dominant_class,
        }
    }

    /// Lazily evaluated frames at `t0 + k / fps` for `k < floor((t1 - t0) * fps)`.
    pub fn generate_stream(
        &self,
        t0: f64,
        t1: f64,
        fps: f64,
    ) -> Result<FrameStream<'_>, WorldError> {
        if !(t1 > t0 && t0 >= 0.0 && fps > 0.0 && fps.is_finite() && t1.is_finite()) {
            return Err(WorldError::BadWindow { t0, t1, fps });
        }
        Ok(FrameStream {
            world: self,
            t0,
            fps,
            len: floor_count(t1 - t0, fps),
        })
    }
}

/// `floor(duration * fps)`, tolerant of representation error just below an integer.
pub fn floor_count(duration: f64, fps: f64) -> usize {
    let x = duration * fps;
    (x + x.abs() * 1e-12 + 1e-9).floor().max(0.0) as usize
}

#[derive(Clone, Copy, Debug)]
pub struct FrameStream<'w> {
    world: &'w World,
    t0: f64,
    fps: f64,
    len: usize,
}

impl<'w> FrameStream<'w> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn timestamp(&self, index: usize) -> f64 {
        self.t0 + index as f64 / self.fps
    }

    pub fn get(&self, index: usize) -> Result<(Frame, FrameAnnotation), WorldError> {
        if index >= self.len {
            return Err(WorldError::OutOfRange {
                index,
                len: self.len,
            });
        }
        Ok(self.world.render_frame(self.timestamp(index)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Frame, FrameAnnotation)> + 'w {
        let s = *self;
        (0..s.len).map(move |k| s.world.render_frame(s.timestamp(k)))
    }
}
