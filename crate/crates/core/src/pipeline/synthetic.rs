//! Moving-shape scenes rendered as event streams with per-slice boxes.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::detection::{BBox, GroundTruth};
use crate::error::{param_err, Result};
use crate::event_io::Event;
use crate::pipeline::config::PipelineConfig;

const STEP_US: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disc,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Disc, Shape::Triangle];

    pub fn class_id(self) -> usize {
        self as usize
    }
}

/// One shape whose bounding box is `size × size` around `center`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticObject {
    pub shape: Shape,
    /// Pixels at `t = 0`.
    pub center: [f64; 2],
    pub size: f64,
    /// Pixels per second.
    pub velocity: [f64; 2],
}

impl SyntheticObject {
    pub fn center_at(&self, t_us: f64) -> [f64; 2] {
        let s = t_us * 1e-6;
        [
            self.center[0] + self.velocity[0] * s,
            self.center[1] + self.velocity[1] * s,
        ]
    }

    fn is_moving(&self) -> bool {
        self.velocity[0] != 0.0 || self.velocity[1] != 0.0
    }

    fn perimeter(&self) -> f64 {
        let s = self.size;
        match self.shape {
            Shape::Square => 4.0 * s,
            Shape::Disc => PI * s,
            Shape::Triangle => s * (1.0 + 5f64.sqrt()),
        }
    }

    fn area(&self) -> f64 {
        let s = self.size;
        match self.shape {
            Shape::Square => s * s,
            Shape::Disc => PI * s * s / 4.0,
            Shape::Triangle => s * s / 2.0,
        }
    }

    fn triangle(&self, c: [f64; 2]) -> [[f64; 2]; 3] {
        let h = self.size / 2.0;
        [[c[0], c[1] - h], [c[0] + h, c[1] + h], [c[0] - h, c[1] + h]]
    }

    /// Point at arc length `u` along the outline with its outward normal.
    fn contour_point(&self, c: [f64; 2], u: f64) -> ([f64; 2], [f64; 2]) {
        let s = self.size;
        let h = s / 2.0;
        match self.shape {
            Shape::Square => {
                let side = (u / s).floor().min(3.0) as usize;
                let a = u - side as f64 * s - h;
                match side {
                    0 => ([c[0] + a, c[1] - h], [0.0, -1.0]),
                    1 => ([c[0] + h, c[1] + a], [1.0, 0.0]),
                    2 => ([c[0] - a, c[1] + h], [0.0, 1.0]),
                    _ => ([c[0] - h, c[1] - a], [-1.0, 0.0]),
                }
            }
            Shape::Disc => {
                let th = u / h;
                let n = [th.cos(), th.sin()];
                ([c[0] + h * n[0], c[1] + h * n[1]], n)
            }
            Shape::Triangle => {
                let v = self.triangle(c);
                let mut rest = u;
                for i in 0..3 {
                    let (a, b) = (v[i], v[(i + 1) % 3]);
                    let d = [b[0] - a[0], b[1] - a[1]];
                    let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
                    if rest <= len || i == 2 {
                        let f = (rest / len).min(1.0);
                        // vertices run clockwise in image coordinates
                        let n = [d[1] / len, -d[0] / len];
                        return ([a[0] + f * d[0], a[1] + f * d[1]], n);
                    }
                    rest -= len;
                }
                unreachable!()
            }
        }
    }

    fn contains(&self, c: [f64; 2], p: [f64; 2]) -> bool {
        let h = self.size / 2.0;
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        match self.shape {
            Shape::Square => dx.abs() <= h && dy.abs() <= h,
            Shape::Disc => dx * dx + dy * dy <= h * h,
            Shape::Triangle => dy.abs() <= h && dx.abs() <= (dy + h) / 2.0,
        }
    }

    /// Box clipped to the sensor, normalized; `None` when fully outside.
    pub fn ground_truth(&self, t_us: f64, width: usize, height: usize) -> Option<GroundTruth> {
        let c = self.center_at(t_us);
        let h = self.size / 2.0;
        let (w, hh) = (width as f64, height as f64);
        let x1 = (c[0] - h).clamp(0.0, w);
        let x2 = (c[0] + h).clamp(0.0, w);
        let y1 = (c[1] - h).clamp(0.0, hh);
        let y2 = (c[1] + h).clamp(0.0, hh);
        (x2 > x1 && y2 > y1).then(|| GroundTruth {
            class: self.shape.class_id(),
            bbox: BBox::from_corners(x1 / w, y1 / hh, x2 / w, y2 / hh),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<SyntheticObject>,
    /// Events per pixel of outline per millisecond, moving objects only.
    pub contour_rate: f64,
    /// Events per pixel of area per millisecond, moving objects only.
    pub interior_rate: f64,
    /// Uniform background events per pixel per millisecond.
    pub noise_rate: f64,
    /// Centres of small event bursts that are not objects.
    pub clutter: Vec<[f64; 2]>,
}

/// Events of a scene plus the boxes visible in every slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticStream {
    pub events: Vec<Event>,
    pub slice_interval_us: u64,
    /// Boxes at the middle of each slice.
    pub ground_truth: Vec<Vec<GroundTruth>>,
}

const CLUTTER_RADIUS: f64 = 3.0;
const CLUTTER_EVENTS_PER_MS: f64 = 6.0;

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map_or(0, |d| d.sample(rng) as usize)
}

fn polarity(rng: &mut ChaCha8Rng) -> i8 {
    if rng.gen_bool(0.5) {
        1
    } else {
        -1
    }
}

/// Renders `duration_us` of the scene. Events outside the sensor are
/// dropped; output is sorted by time and fully determined by `seed`.
pub fn generate_synthetic(
    scene: &SyntheticScene,
    duration_us: u64,
    slice_interval_us: u64,
    seed: u64,
) -> Result<SyntheticStream> {
    if scene.width == 0 || scene.height == 0 {
        return param_err("scene needs a positive sensor size");
    }
    if slice_interval_us == 0 {
        return param_err("slice interval must be positive");
    }
    if scene.objects.iter().any(|o| !(o.size > 0.0)) {
        return param_err("object sizes must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (scene.width as f64, scene.height as f64);
    let mut events = Vec::new();
    let push = |x: f64, y: f64, t: u64, p: i8, events: &mut Vec<Event>| {
        let (xi, yi) = (x.floor(), y.floor());
        if xi >= 0.0 && yi >= 0.0 && xi < w && yi < h {
            events.push(Event {
                x: xi as u32,
                y: yi as u32,
                t,
                p,
            });
        }
    };
    let mut t0 = 0;
    while t0 < duration_us {
        let dt_us = STEP_US.min(duration_us - t0);
        let dt_ms = dt_us as f64 / 1000.0;
        for obj in scene.objects.iter().filter(|o| o.is_moving()) {
            let n = poisson(&mut rng, scene.contour_rate * obj.perimeter() * dt_ms);
            for _ in 0..n {
                let t = t0 + rng.gen_range(0..dt_us);
                let c = obj.center_at(t as f64);
                let u = rng.gen_range(0.0..obj.perimeter());
                let (p, normal) = obj.contour_point(c, u);
                let jx = rng.gen_range(-1.0..1.0);
                let jy = rng.gen_range(-1.0..1.0);
                let lead = normal[0] * obj.velocity[0] + normal[1] * obj.velocity[1];
                let pol = if lead >= 0.0 { 1 } else { -1 };
                push(p[0] + jx, p[1] + jy, t, pol, &mut events);
            }
            let n = poisson(&mut rng, scene.interior_rate * obj.area() * dt_ms);
            let half = obj.size / 2.0;
            for _ in 0..n {
                let t = t0 + rng.gen_range(0..dt_us);
                let c = obj.center_at(t as f64);
                // rejection sample inside the outline
                for _ in 0..16 {
                    let p = [
                        c[0] + rng.gen_range(-half..half),
                        c[1] + rng.gen_range(-half..half),
                    ];
                    if obj.contains(c, p) {
                        let pol = polarity(&mut rng);
                        push(p[0], p[1], t, pol, &mut events);
                        break;
                    }
                }
            }
        }
        for c in &scene.clutter {
            let n = poisson(&mut rng, CLUTTER_EVENTS_PER_MS * dt_ms);
            for _ in 0..n {
                let t = t0 + rng.gen_range(0..dt_us);
                let x = c[0] + rng.gen_range(-CLUTTER_RADIUS..CLUTTER_RADIUS);
                let y = c[1] + rng.gen_range(-CLUTTER_RADIUS..CLUTTER_RADIUS);
                let pol = polarity(&mut rng);
                push(x, y, t, pol, &mut events);
            }
        }
        let n = poisson(&mut rng, scene.noise_rate * w * h * dt_ms);
        for _ in 0..n {
            let t = t0 + rng.gen_range(0..dt_us);
            let x = rng.gen_range(0.0..w);
            let y = rng.gen_range(0.0..h);
            let pol = polarity(&mut rng);
            push(x, y, t, pol, &mut events);
        }
        t0 += dt_us;
    }
    events.sort_by_key(|e| e.t);

    let n_slices = duration_us.div_ceil(slice_interval_us) as usize;
    let ground_truth = (0..n_slices)
        .map(|i| {
            let mid = (i as f64 + 0.5) * slice_interval_us as f64;
            scene
                .objects
                .iter()
                .filter_map(|o| o.ground_truth(mid, scene.width, scene.height))
                .collect()
        })
        .collect();
    Ok(SyntheticStream {
        events,
        slice_interval_us,
        ground_truth,
    })
}

/// Mixes a base seed with a stream tag and an index.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random scene drawn from the configured distribution. Objects start
/// inside the frame and rarely overlap.
pub fn random_scene(cfg: &PipelineConfig, seed: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = cfg.resolution as f64;
    let count = rng.gen_range(1..=cfg.max_objects.max(1));
    let travel = (cfg.speed_max * cfg.scene_duration_us as f64 * 1e-6).min(res / 4.0);
    let mut objects: Vec<SyntheticObject> = Vec::with_capacity(count);
    while objects.len() < count {
        let mut placed = None;
        for _ in 0..32 {
            let size = rng.gen_range(cfg.object_size_min..=cfg.object_size_max) * res;
            let margin = size / 2.0 + travel;
            if 2.0 * margin >= res {
                break;
            }
            let center = [rng.gen_range(margin..res - margin), rng.gen_range(margin..res - margin)];
            let far = objects.iter().all(|o| {
                let d = ((o.center[0] - center[0]).powi(2) + (o.center[1] - center[1]).powi(2)).sqrt();
                d > 0.6 * (o.size + size)
            });
            if far {
                placed = Some((center, size));
                break;
            }
        }
        let Some((center, size)) = placed else { break };
        let speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
        let angle = rng.gen_range(0.0..2.0 * PI);
        let shape = Shape::ALL[rng.gen_range(0..3)];
        objects.push(SyntheticObject {
            shape,
            center,
            size,
            velocity: [speed * angle.cos(), speed * angle.sin()],
        });
    }
    let clutter = (0..cfg.clutter)
        .map(|_| [rng.gen_range(0.0..res), rng.gen_range(0.0..res)])
        .collect();
    SyntheticScene {
        width: cfg.resolution,
        height: cfg.resolution,
        objects,
        contour_rate: cfg.contour_rate,
        interior_rate: cfg.interior_rate,
        noise_rate: cfg.noise_rate,
        clutter,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(objects: Vec<SyntheticObject>, noise: f64) -> SyntheticScene {
        SyntheticScene {
            width: 64,
            height: 64,
            objects,
            contour_rate: 1.0,
            interior_rate: 0.05,
            noise_rate: noise,
            clutter: Vec::new(),
        }
    }

    fn square(velocity: [f64; 2]) -> SyntheticObject {
        SyntheticObject {
            shape: Shape::Square,
            center: [32.0, 32.0],
            size: 16.0,
            velocity,
        }
    }

    #[test]
    fn empty_scene_is_silent() {
        let s = generate_synthetic(&scene(Vec::new(), 0.0), 20_000, 10_000, 1).unwrap();
        assert!(s.events.is_empty());
        assert_eq!(s.ground_truth, vec![Vec::new(), Vec::new()]);
    }

    #[test]
    fn static_object_only_noise() {
        let quiet = generate_synthetic(&scene(vec![square([0.0, 0.0])], 0.0), 10_000, 10_000, 2).unwrap();
        assert!(quiet.events.is_empty());
        assert_eq!(quiet.ground_truth[0].len(), 1);
        let noisy = generate_synthetic(&scene(vec![square([0.0, 0.0])], 0.01), 10_000, 10_000, 2).unwrap();
        let noise_only = generate_synthetic(&scene(Vec::new(), 0.01), 10_000, 10_000, 2).unwrap();
        assert_eq!(noisy.events, noise_only.events);
    }

    #[test]
    fn events_hug_the_outline() {
        let s = generate_synthetic(&scene(vec![square([500.0, 0.0])], 0.0), 10_000, 10_000, 3).unwrap();
        assert!(s.events.len() > 300);
        assert!(s.events.windows(2).all(|w| w[0].t <= w[1].t));
        // square spans x 24..40 at t=0 and drifts 5 px right by the end
        let near_edge = s
            .events
            .iter()
            .filter(|e| {
                let x = e.x as f64 + 0.5 - 32.0 - 500.0 * e.t as f64 * 1e-6;
                let y = e.y as f64 + 0.5 - 32.0;
                (x.abs() - 8.0).abs() < 2.0 || (y.abs() - 8.0).abs() < 2.0
            })
            .count();
        assert!(near_edge as f64 > 0.8 * s.events.len() as f64);
        let gt = s.ground_truth[0][0];
        assert!((gt.bbox.cx - (32.0 + 2.5) / 64.0).abs() < 1e-12);
        assert_eq!(gt.class, 0);
    }

    #[test]
    fn deterministic_per_seed() {
        let sc = scene(vec![square([300.0, -200.0])], 0.005);
        let a = generate_synthetic(&sc, 30_000, 10_000, 9).unwrap();
        let b = generate_synthetic(&sc, 30_000, 10_000, 9).unwrap();
        let c = generate_synthetic(&sc, 30_000, 10_000, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn outlines_are_closed() {
        for shape in Shape::ALL {
            let o = SyntheticObject {
                shape,
                center: [0.0, 0.0],
                size: 10.0,
                velocity: [1.0, 0.0],
            };
            let (start, _) = o.contour_point([0.0, 0.0], 0.0);
            let (end, _) = o.contour_point([0.0, 0.0], o.perimeter());
            assert!((start[0] - end[0]).abs() < 1e-9 && (start[1] - end[1]).abs() < 1e-9, "{shape:?}");
            for k in 0..50 {
                // offset keeps samples off the corners
                let (p, n) = o.contour_point([0.0, 0.0], o.perimeter() * (k as f64 + 0.37) / 50.0);
                assert!(p[0].abs() <= 5.0 + 1e-9 && p[1].abs() <= 5.0 + 1e-9);
                // outward normals point away from the centre region
                let inside = [p[0] - 1e-3 * n[0], p[1] - 1e-3 * n[1]];
                let outside = [p[0] + 1e-3 * n[0], p[1] + 1e-3 * n[1]];
                assert!(o.contains([0.0, 0.0], inside) && !o.contains([0.0, 0.0], outside), "{shape:?} at {k}");
            }
        }
    }

    #[test]
    fn random_scenes_fit() {
        let mut cfg = PipelineConfig::default();
        cfg.resolution = 128;
        for i in 0..20 {
            let s = random_scene(&cfg, derive_seed(1, 2, i));
            assert!(!s.objects.is_empty() && s.objects.len() <= 3);
            for o in &s.objects {
                let g = o.ground_truth(10_000.0, 128, 128).unwrap();
                let [x1, y1, x2, y2] = g.bbox.corners();
                assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0);
            }
        }
    }
}
