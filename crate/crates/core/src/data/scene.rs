//! Ray-cast rooms: a floor, a back wall and a few boxes seen through a
//! pinhole camera. Depth is the exact first hit along each pixel ray.

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::ndcore::Rng;
use crate::raster::{DepthMap, Image, LabelMap};

use super::Sample;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Points with `normal · p = offset`.
    Plane { normal: [f64; 3], offset: f64 },
    /// Axis-aligned box.
    Box { min: [f64; 3], max: [f64; 3] },
}

impl Shape {
    /// Ray parameter of the first hit of `o + t·d` with `t > 0`, and the
    /// surface normal there.
    fn hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
        match *self {
            Shape::Plane { normal, offset } => {
                let den = dot(normal, d);
                if den.abs() < 1e-12 {
                    return None;
                }
                let t = (offset - dot(normal, o)) / den;
                (t > 0.0).then_some((t, normal))
            }
            Shape::Box { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (p, q) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                    let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
                    if lo > t0 {
                        t0 = lo;
                        axis = a;
                    }
                    t1 = t1.min(hi);
                }
                if t0 > t1 || t0 <= 0.0 {
                    return None;
                }
                let mut n = [0.0; 3];
                n[axis] = -d[axis].signum();
                Some((t0, n))
            }
        }
    }

    /// Distance from `p` to the surface.
    pub fn residual(&self, p: [f64; 3]) -> f64 {
        match *self {
            Shape::Plane { normal, offset } => (dot(normal, p) - offset).abs() / dot(normal, normal).sqrt(),
            Shape::Box { min, max } => {
                let q: Vec<f64> = (0..3)
                    .map(|a| {
                        let c = 0.5 * (min[a] + max[a]);
                        (p[a] - c).abs() - 0.5 * (max[a] - min[a])
                    })
                    .collect();
                let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                let inside = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max).min(0.0);
                (outside + inside).abs()
            }
        }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub color: [f64; 3],
}

/// Scene layout ranges. Camera space: x right, y down, z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub boxes: (usize, usize),
    /// Range of box center depths.
    pub box_depth: (f64, f64),
    /// Footprint edge length range.
    pub box_size: (f64, f64),
    pub box_height: (f64, f64),
    pub floor: bool,
    pub wall: bool,
    pub camera_height: f64,
    pub wall_depth: (f64, f64),
    /// Direction toward the light; normalized on use.
    pub light: [f64; 3],
    pub ambient: f64,
    /// Per-frame camera translation is uniform in `±frame_jitter` on each axis.
    pub frame_jitter: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            boxes: (2, 6),
            box_depth: (2.0, 5.5),
            box_size: (0.4, 1.2),
            box_height: (0.5, 2.2),
            floor: true,
            wall: true,
            camera_height: 1.2,
            wall_depth: (6.5, 8.0),
            light: [-0.4, -1.0, -0.6],
            ambient: 0.3,
            frame_jitter: 0.15,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.boxes.0 <= self.boxes.1
            && 0.0 < self.box_depth.0
            && self.box_depth.0 <= self.box_depth.1
            && 0.0 < self.box_size.0
            && self.box_size.0 <= self.box_size.1
            && 0.0 < self.box_height.0
            && self.box_height.0 <= self.box_height.1
            && self.camera_height > 0.0
            && 0.0 < self.wall_depth.0
            && self.wall_depth.0 <= self.wall_depth.1
            && self.frame_jitter >= 0.0
            && dot(self.light, self.light) > 0.0;
        if !ok {
            return Err(Error::Config("degenerate scene spec".into()));
        }
        Ok(())
    }
}

/// Layout of one scene, shared by all of its frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Floor and wall first when present, then boxes.
    pub primitives: Vec<Primitive>,
    pub light: [f64; 3],
    pub ambient: f64,
}

fn random_color(rng: &mut Rng) -> [f64; 3] {
    [rng.uniform(0.15, 0.95), rng.uniform(0.15, 0.95), rng.uniform(0.15, 0.95)]
}

pub fn layout(seed: u64, spec: &SceneSpec, k: &Intrinsics, width: usize) -> Result<Scene> {
    spec.validate()?;
    let mut rng = Rng::new(seed).child("layout");
    let mut primitives = Vec::new();
    if spec.floor {
        primitives.push(Primitive {
            shape: Shape::Plane {
                normal: [0.0, -1.0, 0.0],
                offset: -spec.camera_height,
            },
            color: random_color(&mut rng),
        });
    }
    if spec.wall {
        primitives.push(Primitive {
            shape: Shape::Plane {
                normal: [0.0, 0.0, -1.0],
                offset: -rng.uniform(spec.wall_depth.0, spec.wall_depth.1),
            },
            color: random_color(&mut rng),
        });
    }
    let n = spec.boxes.0 + rng.below(spec.boxes.1 - spec.boxes.0 + 1);
    let half_fov = (width as f64 / 2.0) / k.fx;
    for _ in 0..n {
        let z = rng.uniform(spec.box_depth.0, spec.box_depth.1);
        let sx = rng.uniform(spec.box_size.0, spec.box_size.1);
        let sy = rng.uniform(spec.box_height.0, spec.box_height.1);
        let sz = rng.uniform(spec.box_size.0, spec.box_size.1);
        let x = rng.uniform(-0.7, 0.7) * half_fov * z;
        let bottom = spec.camera_height;
        primitives.push(Primitive {
            shape: Shape::Box {
                min: [x - sx / 2.0, bottom - sy, z - sz / 2.0],
                max: [x + sx / 2.0, bottom, z + sz / 2.0],
            },
            color: random_color(&mut rng),
        });
    }
    let ln = dot(spec.light, spec.light).sqrt();
    Ok(Scene {
        primitives,
        light: spec.light.map(|v| v / ln),
        ambient: spec.ambient,
    })
}

/// Rendered frame plus the primitive index behind each instance id.
#[derive(Debug, Clone, PartialEq)]
pub struct Render {
    pub sample: Sample,
    /// `instance_primitive[id]` indexes `Scene::primitives`.
    pub instance_primitive: Vec<usize>,
    pub camera: [f64; 3],
}

/// Ray-casts `scene` from a camera at `camera` (translation only).
pub fn render(scene: &Scene, camera: [f64; 3], height: usize, width: usize, k: &Intrinsics) -> Result<Render> {
    let mut depth = vec![0f32; height * width];
    let mut winner = vec![0usize; height * width];
    let mut image = Image::new(height, width);
    for v in 0..height {
        for u in 0..width {
            let d = k.ray(u as f64, v as f64);
            let mut best: Option<(f64, usize, [f64; 3])> = None;
            for (pi, p) in scene.primitives.iter().enumerate() {
                if let Some((t, n)) = p.shape.hit(camera, d) {
                    if best.is_none_or(|b| t < b.0) {
                        best = Some((t, pi, n));
                    }
                }
            }
            let (t, pi, n) = best.ok_or_else(|| Error::Config(format!("pixel ({v}, {u}) sees no surface")))?;
            let i = v * width + u;
            // ray z component is 1, so t is the depth
            depth[i] = t as f32;
            winner[i] = pi;
            let shade = scene.ambient + (1.0 - scene.ambient) * dot(n, scene.light).max(0.0);
            let c = scene.primitives[pi].color;
            image.set_pixel(v, u, [0, 1, 2].map(|a| (c[a] * shade) as f32));
        }
    }
    image.quantize();
    let mut id_of = vec![u32::MAX; scene.primitives.len()];
    let mut instance_primitive = Vec::new();
    for pi in 0..scene.primitives.len() {
        if winner.contains(&pi) {
            id_of[pi] = instance_primitive.len() as u32;
            instance_primitive.push(pi);
        }
    }
    let labels = winner.iter().map(|&pi| id_of[pi]).collect();
    Ok(Render {
        sample: Sample {
            image,
            depth: DepthMap::new(height, width, depth)?,
            instances: LabelMap::new(height, width, labels)?,
            scene_id: 0,
            frame_id: 0,
        },
        instance_primitive,
        camera,
    })
}

/// Frame `frame` of scene `seed`: the shared layout seen from a jittered camera.
pub fn generate_frame(
    seed: u64,
    frame: u32,
    spec: &SceneSpec,
    height: usize,
    width: usize,
    k: &Intrinsics,
) -> Result<Render> {
    let scene = layout(seed, spec, k, width)?;
    let mut rng = Rng::new(seed).child_indexed("frame", frame as u64);
    let j = spec.frame_jitter;
    let camera = if frame == 0 {
        [0.0; 3]
    } else {
        [rng.uniform(-j, j), rng.uniform(-j, j), rng.uniform(-j, j)]
    };
    let mut r = render(&scene, camera, height, width, k)?;
    r.sample.frame_id = frame;
    Ok(r)
}

/// First frame of scene `seed`.
pub fn generate_scene(seed: u64, spec: &SceneSpec, height: usize, width: usize, k: &Intrinsics) -> Result<Sample> {
    Ok(generate_frame(seed, 0, spec, height, width, k)?.sample)
}
