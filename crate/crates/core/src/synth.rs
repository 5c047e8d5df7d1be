//! Seeded synthetic ALS scenes with labels that are exact by construction.
//!
//! The square scene is split into cells of at most [`CELL`] meters. Every
//! cell holds one kind of object (a building, a few trees or a row of cars),
//! dealt round-robin over the requested classes in shuffled order. Ground
//! covers everything outside building and car footprints; power lines span
//! the whole scene above everything else. Each surface receives
//! `area × density` points, so class counts follow the analytic areas.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::PointRecord;

/// Upper bound on the edge of one layout cell.
pub const CELL: f64 = 16.0;
const POWERLINE_HEIGHT: f64 = 14.0;
/// Equivalent width used to turn a point density per m² into points per meter of wire.
const WIRE_WIDTH: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneClass {
    Ground,
    Roof,
    Facade,
    Tree,
    Car,
    Powerline,
}

impl SceneClass {
    pub const ALL: [SceneClass; 6] = [
        SceneClass::Ground,
        SceneClass::Roof,
        SceneClass::Facade,
        SceneClass::Tree,
        SceneClass::Car,
        SceneClass::Powerline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SceneClass::Ground => "ground",
            SceneClass::Roof => "roof",
            SceneClass::Facade => "facade",
            SceneClass::Tree => "tree",
            SceneClass::Car => "car",
            SceneClass::Powerline => "powerline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name().eq_ignore_ascii_case(s.trim()))
    }

    /// Mean intensity and `(return_number, num_returns)` choices.
    fn signature(self) -> (f64, &'static [(u32, u32)]) {
        match self {
            SceneClass::Ground => (0.30, &[(1, 1)]),
            SceneClass::Roof => (0.60, &[(1, 1)]),
            SceneClass::Facade => (0.45, &[(1, 1)]),
            SceneClass::Tree => (0.20, &[(1, 2), (2, 2), (1, 3), (2, 3), (3, 3)]),
            SceneClass::Car => (0.80, &[(1, 1)]),
            SceneClass::Powerline => (0.10, &[(1, 2)]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Edge length of the square scene in meters.
    pub extent: f64,
    pub classes: Vec<SceneClass>,
    /// Points per square meter of surface.
    pub density: f64,
    /// Standard deviation of the surface-normal jitter in meters, clamped at 3σ.
    pub noise: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn perimeter(&self) -> f64 {
        2.0 * ((self.x1 - self.x0) + (self.y1 - self.y0))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Building {
    pub footprint: Rect,
    pub height: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tree {
    pub x: f64,
    pub y: f64,
    /// Height of the crown's lowest point.
    pub trunk: f64,
    pub radius: f64,
    pub half_height: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Car {
    pub footprint: Rect,
    pub height: f64,
}

/// Object placement of a scene.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Layout {
    pub buildings: Vec<Building>,
    pub trees: Vec<Tree>,
    pub cars: Vec<Car>,
    /// Wire y positions; wires run along x over the whole scene.
    pub wires: Vec<f64>,
}

impl Layout {
    /// Bare ground area: the scene minus building and car footprints.
    pub fn ground_area(&self, extent: f64) -> f64 {
        extent * extent
            - self.buildings.iter().map(|b| b.footprint.area()).sum::<f64>()
            - self.cars.iter().map(|c| c.footprint.area()).sum::<f64>()
    }

    pub fn roof_area(&self) -> f64 {
        self.buildings.iter().map(|b| b.footprint.area()).sum()
    }

    fn covered(&self, x: f64, y: f64) -> bool {
        self.buildings.iter().any(|b| b.footprint.contains(x, y))
            || self.cars.iter().any(|c| c.footprint.contains(x, y))
    }
}

pub struct Scene {
    pub records: Vec<PointRecord>,
    /// Label `i` is `class_names[i]`.
    pub class_names: Vec<String>,
    pub layout: Layout,
}

#[derive(Clone, Copy, PartialEq)]
enum CellKind {
    Building,
    Trees,
    Cars,
}

struct Emitter<'a> {
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    sigma: f64,
    density: f64,
    classes: &'a [SceneClass],
    records: Vec<PointRecord>,
}

impl Emitter<'_> {
    fn jitter(&mut self) -> f64 {
        let limit = 3.0 * self.sigma;
        self.noise.sample(&mut self.rng).clamp(-limit, limit)
    }

    fn count(&self, area: f64) -> usize {
        (area * self.density).round() as usize
    }

    fn label(&self, class: SceneClass) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    fn push(&mut self, class: SceneClass, x: f64, y: f64, z: f64) {
        let Some(label) = self.label(class) else { return };
        let (mean, returns) = class.signature();
        let intensity = (mean + 0.05 * self.rng.random_range(-1.0..1.0)).clamp(0.0, 1.0);
        let (return_number, num_returns) = returns[self.rng.random_range(0..returns.len())];
        self.records.push(PointRecord {
            x,
            y,
            z,
            intensity,
            return_number,
            num_returns,
            label: Some(label),
        });
    }

    /// Points on a horizontal rectangle at height `z`.
    fn plane(&mut self, class: SceneClass, r: Rect, z: f64) {
        for _ in 0..self.count(r.area()) {
            let x = self.rng.random_range(r.x0..=r.x1);
            let y = self.rng.random_range(r.y0..=r.y1);
            let dz = self.jitter();
            self.push(class, x, y, z + dz);
        }
    }

    /// Points on the four vertical sides of `r` between `z0` and `z1`.
    fn walls(&mut self, class: SceneClass, r: Rect, z0: f64, z1: f64) {
        let (w, d) = (r.x1 - r.x0, r.y1 - r.y0);
        for _ in 0..self.count(r.perimeter() * (z1 - z0)) {
            let t = self.rng.random_range(0.0..r.perimeter());
            let z = self.rng.random_range(z0..z1);
            let out = self.jitter().abs();
            let (x, y) = if t < w {
                (r.x0 + t, r.y0 - out)
            } else if t < w + d {
                (r.x1 + out, r.y0 + (t - w))
            } else if t < 2.0 * w + d {
                (r.x1 - (t - w - d), r.y1 + out)
            } else {
                (r.x0 - out, r.y1 - (t - 2.0 * w - d))
            };
            self.push(class, x, y, z);
        }
    }
}

/// Knud Thomsen's approximation of a spheroid's surface area.
fn spheroid_area(a: f64, c: f64) -> f64 {
    let p = 1.6075;
    let ap = a.powf(p);
    let cp = c.powf(p);
    4.0 * PI * ((ap * ap + 2.0 * ap * cp) / 3.0).powf(1.0 / p)
}

fn plan_layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Layout {
    let has = |c: SceneClass| spec.classes.contains(&c);
    let mut kinds = Vec::new();
    if has(SceneClass::Roof) || has(SceneClass::Facade) {
        kinds.push(CellKind::Building);
    }
    if has(SceneClass::Tree) {
        kinds.push(CellKind::Trees);
    }
    if has(SceneClass::Car) {
        kinds.push(CellKind::Cars);
    }
    let mut layout = Layout::default();
    if has(SceneClass::Powerline) {
        let count = ((spec.extent / CELL).floor() as usize).max(1);
        layout.wires = (0..count)
            .map(|i| (i as f64 + 0.5) * spec.extent / count as f64)
            .collect();
    }
    if kinds.is_empty() {
        return layout;
    }
    kinds.shuffle(rng);
    let per_side = (spec.extent / CELL).ceil().max(1.0) as usize;
    let cell = spec.extent / per_side as f64;
    for cy in 0..per_side {
        for cx in 0..per_side {
            let (ox, oy) = (cx as f64 * cell, cy as f64 * cell);
            match kinds[(cy * per_side + cx) % kinds.len()] {
                CellKind::Building => {
                    let w = cell * rng.random_range(0.4..0.65);
                    let d = cell * rng.random_range(0.4..0.65);
                    let x0 = ox + rng.random_range(0.1 * cell..0.9 * cell - w);
                    let y0 = oy + rng.random_range(0.1 * cell..0.9 * cell - d);
                    layout.buildings.push(Building {
                        footprint: Rect {
                            x0,
                            y0,
                            x1: x0 + w,
                            y1: y0 + d,
                        },
                        height: rng.random_range(4.0..8.0),
                    });
                }
                CellKind::Trees => {
                    for k in 0..3 {
                        let radius = (cell * 0.12).min(rng.random_range(1.5..2.5));
                        let slot = cell / 3.0;
                        layout.trees.push(Tree {
                            x: ox + slot * (k as f64 + 0.5),
                            y: oy + cell * rng.random_range(0.3..0.7),
                            trunk: rng.random_range(1.5..3.0),
                            radius,
                            half_height: radius * rng.random_range(0.9..1.3),
                        });
                    }
                }
                CellKind::Cars => {
                    let (len, wid) = (4.5f64.min(cell * 0.25), 1.8f64.min(cell * 0.1));
                    let y0 = oy + cell * rng.random_range(0.3..0.6);
                    for k in 0..3 {
                        let x0 = ox + cell * (0.05 + 0.32 * k as f64);
                        layout.cars.push(Car {
                            footprint: Rect {
                                x0,
                                y0,
                                x1: x0 + len,
                                y1: y0 + wid,
                            },
                            height: 1.5,
                        });
                    }
                }
            }
        }
    }
    layout
}

/// Builds a scene. Labels index `spec.classes` after sorting into the
/// canonical order of [`SceneClass::ALL`].
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    if spec.classes.is_empty() {
        return Err(Error::InvalidArgument("scene needs at least one class".into()));
    }
    if !(spec.extent > 0.0) || !(spec.density > 0.0) || !(spec.noise >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "extent and density must be positive and noise non-negative, got {}, {}, {}",
            spec.extent, spec.density, spec.noise
        )));
    }
    let mut classes = spec.classes.clone();
    classes.sort();
    classes.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = plan_layout(spec, &mut rng);
    let mut em = Emitter {
        rng,
        noise: Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?,
        sigma: spec.noise,
        density: spec.density,
        classes: &classes,
        records: Vec::new(),
    };

    if classes.contains(&SceneClass::Ground) {
        let target = em.count(layout.ground_area(spec.extent));
        let mut placed = 0;
        while placed < target {
            let x = em.rng.random_range(0.0..=spec.extent);
            let y = em.rng.random_range(0.0..=spec.extent);
            if layout.covered(x, y) {
                continue;
            }
            let z = em.jitter();
            em.push(SceneClass::Ground, x, y, z);
            placed += 1;
        }
    }
    for b in &layout.buildings {
        em.plane(SceneClass::Roof, b.footprint, b.height);
        if classes.contains(&SceneClass::Facade) {
            em.walls(SceneClass::Facade, b.footprint, 0.0, b.height);
        }
    }
    for t in &layout.trees {
        let n = em.count(spheroid_area(t.radius, t.half_height));
        let cz = t.trunk + t.half_height;
        for _ in 0..n {
            let u: f64 = em.rng.random_range(-1.0..1.0);
            let phi = em.rng.random_range(0.0..2.0 * PI);
            let s = (1.0 - u * u).sqrt();
            let r = 1.0 + em.jitter() / t.radius;
            em.push(
                SceneClass::Tree,
                t.x + t.radius * r * s * phi.cos(),
                t.y + t.radius * r * s * phi.sin(),
                cz + t.half_height * r * u,
            );
        }
        for _ in 0..em.count(0.3 * t.trunk) {
            let z = em.rng.random_range(0.0..t.trunk);
            let (dx, dy) = (em.jitter(), em.jitter());
            em.push(SceneClass::Tree, t.x + dx, t.y + dy, z);
        }
    }
    for c in &layout.cars {
        em.plane(SceneClass::Car, c.footprint, c.height);
        em.walls(SceneClass::Car, c.footprint, 0.0, c.height);
    }
    for &y in &layout.wires {
        let n = em.count(spec.extent * WIRE_WIDTH);
        for _ in 0..n {
            let x = em.rng.random_range(0.0..=spec.extent);
            let t = x / spec.extent - 0.5;
            let sag = 1.5 * (1.0 - 4.0 * t * t);
            let dz = em.jitter();
            em.push(SceneClass::Powerline, x, y, POWERLINE_HEIGHT - sag + dz);
        }
    }
    Ok(Scene {
        records: em.records,
        class_names: classes.iter().map(|c| c.name().to_string()).collect(),
        layout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{format_pts, parse_pts};
    use std::path::Path;

    fn spec(extent: f64, classes: &[SceneClass], seed: u64) -> SceneSpec {
        SceneSpec {
            extent,
            classes: classes.to_vec(),
            density: 4.0,
            noise: 0.05,
            seed,
        }
    }

    #[test]
    fn ground_only_scene() {
        let s = generate(&spec(10.0, &[SceneClass::Ground], 1)).unwrap();
        assert_eq!(s.records.len(), 400);
        assert_eq!(s.class_names, ["ground"]);
        assert!(s.records.iter().all(|r| r.label == Some(0) && r.z.abs() <= 3.0 * 0.05));
    }

    #[test]
    fn empty_class_set_rejected() {
        assert!(generate(&spec(10.0, &[], 1)).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let classes = SceneClass::ALL;
        let a = generate(&spec(40.0, &classes, 7)).unwrap();
        let b = generate(&spec(40.0, &classes, 7)).unwrap();
        let names = a.class_names.clone();
        assert_eq!(
            format_pts(&a.records, Some(&names), &[]),
            format_pts(&b.records, Some(&names), &[])
        );
        let c = generate(&spec(40.0, &classes, 8)).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn roof_ground_counts_follow_areas() {
        for seed in 0..5 {
            let s = generate(&spec(48.0, &[SceneClass::Ground, SceneClass::Roof], seed)).unwrap();
            let roof = s.records.iter().filter(|r| r.label == Some(1)).count() as f64;
            let ground = s.records.iter().filter(|r| r.label == Some(0)).count() as f64;
            let expected = s.layout.roof_area() / s.layout.ground_area(48.0);
            let ratio = roof / ground;
            assert!((ratio - expected).abs() <= 0.1 * expected, "{ratio} vs {expected}");
        }
    }

    #[test]
    fn roofs_sit_above_ground() {
        let s = generate(&spec(32.0, &[SceneClass::Ground, SceneClass::Roof], 3)).unwrap();
        let max_ground = s
            .records
            .iter()
            .filter(|r| r.label == Some(0))
            .map(|r| r.z)
            .fold(f64::MIN, f64::max);
        for b in &s.layout.buildings {
            let fp = b.footprint;
            assert!(s
                .records
                .iter()
                .filter(|r| r.label == Some(0))
                .all(|r| !fp.contains(r.x, r.y)));
        }
        assert!(s
            .records
            .iter()
            .filter(|r| r.label == Some(1))
            .all(|r| r.z > max_ground));
    }

    #[test]
    fn labels_follow_canonical_order() {
        let s = generate(&spec(32.0, &[SceneClass::Tree, SceneClass::Ground, SceneClass::Car], 2)).unwrap();
        assert_eq!(s.class_names, ["ground", "tree", "car"]);
        for l in 0..3 {
            assert!(s.records.iter().any(|r| r.label == Some(l)), "class {l} missing");
        }
    }

    #[test]
    fn text_round_trip_is_lossless() {
        let s = generate(&spec(20.0, &SceneClass::ALL, 4)).unwrap();
        let text = format_pts(&s.records, Some(&s.class_names), &[]);
        let back = parse_pts(&text, Path::new("scene.pts")).unwrap();
        assert_eq!(back.records, s.records);
        assert_eq!(back.class_names.as_deref(), Some(&s.class_names[..]));
    }
}
