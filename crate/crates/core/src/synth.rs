//! Scripted human-object scenes with ground-truth switch labels.
//!
//! Humans walk in straight lines with a rigid 18-joint rig. During an
//! episode a human turns toward a movable object, reaches it, carries it
//! for a while and puts it down, then keeps walking. The switch label is
//! 1 from just after the turn until the human has walked away from the
//! released object.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{EntityClass, Point3, HUMAN_JOINTS};
use crate::scene::{Scene, SceneEntity};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub num_scenes: usize,
    pub steps: usize,
    pub dt: f64,
    pub humans_min: usize,
    pub humans_max: usize,
    /// Object counts include the stationary table.
    pub objects_min: usize,
    pub objects_max: usize,
    /// Probability that a human has an episode.
    pub episode_rate: f64,
    /// Range of the step at which the human turns toward its target.
    pub episode_start_min: usize,
    pub episode_start_max: usize,
    /// Steps from the turn to the grasp.
    pub approach_steps_min: usize,
    pub approach_steps_max: usize,
    pub carry_steps_min: usize,
    pub carry_steps_max: usize,
    /// Labels turn on this many steps after the turn.
    pub label_onset_offset: usize,
    pub arena_mm: f64,
    /// Walking speed range, mm per step.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Manipulation radius the labels are consistent with.
    pub rho_out_mm: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_scenes: 250,
            steps: 30,
            dt: 0.1,
            humans_min: 1,
            humans_max: 2,
            objects_min: 3,
            objects_max: 5,
            episode_rate: 0.75,
            episode_start_min: 3,
            episode_start_max: 10,
            approach_steps_min: 2,
            approach_steps_max: 4,
            carry_steps_min: 10,
            carry_steps_max: 12,
            label_onset_offset: 1,
            arena_mm: 5000.0,
            speed_min: 60.0,
            speed_max: 120.0,
            rho_out_mm: 100.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps == 0 || !(self.dt > 0.0) {
            return bad("scene_steps and dt must be positive");
        }
        if self.humans_min == 0 || self.humans_min > self.humans_max {
            return bad("need 1 <= humans_min <= humans_max");
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return bad("need 1 <= objects_min <= objects_max");
        }
        if !(0.0..=1.0).contains(&self.episode_rate) {
            return bad("episode_rate must lie in [0, 1]");
        }
        if self.episode_start_min > self.episode_start_max
            || self.approach_steps_min == 0
            || self.approach_steps_min > self.approach_steps_max
            || self.carry_steps_min == 0
            || self.carry_steps_min > self.carry_steps_max
        {
            return bad("episode ranges must be non-empty with positive approach and carry lengths");
        }
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max) {
            return bad("need 0 < speed_min <= speed_max");
        }
        if !(self.arena_mm > 0.0 && self.rho_out_mm >= 0.0) {
            return bad("arena_mm must be positive and gen_rho_out_mm non-negative");
        }
        let reach = self.approach_steps_min as f64 * self.speed_min;
        if reach <= self.rho_out_mm {
            return bad("the shortest approach must start outside gen_rho_out_mm");
        }
        Ok(())
    }
}

/// Height of a standing human's joint centroid (mm).
pub const HUMAN_CENTROID_Z: f64 = 900.0;
/// Centroid of a held object relative to the carrier's centroid (mm).
/// Movable objects rest at this height too, so a reach is a straight walk.
pub const HOLD_OFFSET: Point3 = [0.0, 0.0, 40.0];
/// Index of the carrying hand in the rig.
pub const HAND_JOINT: usize = 17;

const TABLE_SIZE: Point3 = [1200.0, 800.0, 740.0];
const MOVABLE: [(&str, Point3); 5] = [
    ("box", [300.0, 250.0, 200.0]),
    ("cup", [80.0, 80.0, 110.0]),
    ("bottle", [70.0, 70.0, 250.0]),
    ("bowl", [160.0, 160.0, 70.0]),
    ("bag", [350.0, 150.0, 300.0]),
];
/// Minimum horizontal distance of uninvolved objects from any human path.
const PATH_CLEARANCE: f64 = 300.0;
const OBJECT_SPACING: f64 = 400.0;
const HUMAN_SPACING: f64 = 500.0;
const MAX_ATTEMPTS: u64 = 200;

/// Joint offsets from the centroid of a standing human facing +x.
pub fn human_rig() -> [Point3; HUMAN_JOINTS] {
    let raw: [Point3; HUMAN_JOINTS] = [
        [0.0, 0.0, 1700.0],     // head
        [0.0, 0.0, 1500.0],     // neck
        [0.0, 0.0, 1350.0],     // chest
        [0.0, 0.0, 1150.0],     // spine
        [0.0, 0.0, 950.0],      // pelvis
        [0.0, 200.0, 1450.0],   // shoulders
        [0.0, -200.0, 1450.0],
        [30.0, 260.0, 1180.0],  // elbows
        [30.0, -260.0, 1180.0],
        [60.0, 250.0, 930.0],   // wrists
        [60.0, -250.0, 930.0],
        [0.0, 110.0, 930.0],    // hips
        [0.0, -110.0, 930.0],
        [20.0, 110.0, 500.0],   // knees
        [20.0, -110.0, 500.0],
        [0.0, 110.0, 80.0],     // ankles
        [0.0, -110.0, 80.0],
        [250.0, 0.0, 1000.0],   // carrying hand, in front of the body
    ];
    let mut c = [0.0; 3];
    for p in &raw {
        for k in 0..3 {
            c[k] += p[k] / HUMAN_JOINTS as f64;
        }
    }
    raw.map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
}

fn human_flat(rig: &[Point3; HUMAN_JOINTS], c: Point3) -> Vec<f64> {
    rig.iter().flat_map(|p| [c[0] + p[0], c[1] + p[1], c[2] + p[2]]).collect()
}

/// Corners of an axis-aligned box around `c`.
pub fn box_corners(c: Point3, size: Point3) -> Vec<f64> {
    let mut v = Vec::with_capacity(24);
    for sx in [-0.5, 0.5] {
        for sy in [-0.5, 0.5] {
            for sz in [-0.5, 0.5] {
                v.extend_from_slice(&[c[0] + sx * size[0], c[1] + sy * size[1], c[2] + sz * size[2]]);
            }
        }
    }
    v
}

fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn dist(a: Point3, b: Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn dist_xy(a: Point3, b: Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn scene_seed(seed: u64, index: usize, attempt: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed
        .wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(attempt.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Episode {
    start: usize,
    grasp: usize,
    release: usize,
    target: usize,
}

struct Draft {
    /// Per human, per step centroid.
    paths: Vec<Vec<Point3>>,
    /// Per object (table first), per step centroid.
    objects: Vec<Vec<Point3>>,
    sizes: Vec<Point3>,
    labels: Vec<String>,
    episodes: Vec<Option<Episode>>,
}

fn try_scene(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Option<Draft> {
    let steps = cfg.steps;
    let n_h = rng.gen_range(cfg.humans_min..=cfg.humans_max);
    let n_o = rng.gen_range(cfg.objects_min..=cfg.objects_max);
    let margin = (cfg.arena_mm * 0.2).min(1000.0);
    let in_arena = |rng: &mut ChaCha8Rng| -> Point3 {
        [
            rng.gen_range(margin..=cfg.arena_mm - margin),
            rng.gen_range(margin..=cfg.arena_mm - margin),
            HUMAN_CENTROID_Z,
        ]
    };
    let unit = |a: f64| [a.cos(), a.sin(), 0.0];

    let mut paths = Vec::with_capacity(n_h);
    let mut plans = Vec::with_capacity(n_h);
    let mut n_targets = 0;
    for _ in 0..n_h {
        let speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
        let h0 = rng.gen_range(0.0..std::f64::consts::TAU);
        // Only humans that have a spare movable object get an episode.
        let wants = rng.gen_bool(cfg.episode_rate) && n_targets + 1 < n_o;
        if wants {
            let s0 = rng.gen_range(cfg.episode_start_min..=cfg.episode_start_max);
            let k = rng.gen_range(cfg.approach_steps_min..=cfg.approach_steps_max);
            let c = rng.gen_range(cfg.carry_steps_min..=cfg.carry_steps_max);
            let turn = rng.gen_range(std::f64::consts::FRAC_PI_4..=3.0 * std::f64::consts::FRAC_PI_4);
            let h1 = if rng.gen_bool(0.5) { h0 + turn } else { h0 - turn };
            let at_turn = in_arena(rng);
            let (d0, d1) = (unit(h0), unit(h1));
            let path: Vec<Point3> = (0..steps)
                .map(|t| {
                    let (d, s) = if t <= s0 {
                        (d0, t as f64 - s0 as f64)
                    } else {
                        (d1, (t - s0) as f64)
                    };
                    [at_turn[0] + d[0] * speed * s, at_turn[1] + d[1] * speed * s, HUMAN_CENTROID_Z]
                })
                .collect();
            let target_at = [
                at_turn[0] + d1[0] * speed * k as f64,
                at_turn[1] + d1[1] * speed * k as f64,
                HUMAN_CENTROID_Z,
            ];
            paths.push(path);
            plans.push(Some((s0, s0 + k, s0 + k + c, add(target_at, HOLD_OFFSET))));
            n_targets += 1;
        } else {
            let mid = in_arena(rng);
            let d = unit(h0);
            let half = steps as f64 / 2.0;
            paths.push(
                (0..steps)
                    .map(|t| {
                        let s = t as f64 - half;
                        [mid[0] + d[0] * speed * s, mid[1] + d[1] * speed * s, HUMAN_CENTROID_Z]
                    })
                    .collect(),
            );
            plans.push(None);
        }
    }

    // humans keep their distance from each other
    for a in 0..n_h {
        for b in a + 1..n_h {
            if (0..steps).any(|t| dist(paths[a][t], paths[b][t]) < HUMAN_SPACING) {
                return None;
            }
        }
    }

    let mut objects: Vec<Vec<Point3>> = Vec::with_capacity(n_o);
    let mut sizes = Vec::with_capacity(n_o);
    let mut labels = Vec::with_capacity(n_o);
    let mut episodes = Vec::with_capacity(n_h);
    let mut rest: Vec<Point3> = Vec::new();

    let table_c = {
        let p = in_arena(rng);
        [p[0], p[1], TABLE_SIZE[2] / 2.0]
    };
    objects.push(vec![table_c; steps]);
    sizes.push(TABLE_SIZE);
    labels.push("table".to_string());
    rest.push(table_c);

    let pick_kind = |rng: &mut ChaCha8Rng| MOVABLE[rng.gen_range(0..MOVABLE.len())];

    for (h, plan) in plans.iter().enumerate() {
        let Some((start, grasp, release, at)) = *plan else {
            episodes.push(None);
            continue;
        };
        let traj: Vec<Point3> = (0..steps)
            .map(|t| {
                if t < grasp {
                    at
                } else if t < release {
                    add(paths[h][t], HOLD_OFFSET)
                } else {
                    add(paths[h][release - 1], HOLD_OFFSET)
                }
            })
            .collect();
        let (name, size) = pick_kind(rng);
        episodes.push(Some(Episode {
            start,
            grasp,
            release,
            target: objects.len(),
        }));
        rest.push(at);
        objects.push(traj);
        sizes.push(size);
        labels.push(name.to_string());
    }

    while objects.len() < n_o {
        let mut placed = false;
        for _ in 0..50 {
            let p = in_arena(rng);
            let c = add([p[0], p[1], 0.0], HOLD_OFFSET);
            let clear_paths = paths.iter().all(|path| path.iter().all(|&q| dist_xy(q, c) > PATH_CLEARANCE));
            let clear_objects = objects.iter().all(|o| o.iter().all(|&q| dist_xy(q, c) > OBJECT_SPACING));
            if clear_paths && clear_objects {
                let (name, size) = pick_kind(rng);
                objects.push(vec![c; steps]);
                sizes.push(size);
                labels.push(name.to_string());
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    // carried objects must not start or end on top of another object
    for (a, oa) in objects.iter().enumerate() {
        for ob in objects.iter().skip(a + 1) {
            if dist_xy(oa[0], ob[0]) <= OBJECT_SPACING || dist_xy(oa[steps - 1], ob[steps - 1]) <= OBJECT_SPACING {
                return None;
            }
        }
    }
    Some(Draft {
        paths,
        objects,
        sizes,
        labels,
        episodes,
    })
}

/// Label sequence of one human: 1 from the onset after the turn until the
/// human has left the released object behind.
fn episode_labels(cfg: &GenConfig, d: &Draft, h: usize) -> Vec<u8> {
    let steps = cfg.steps;
    let mut bits = vec![0u8; steps];
    let Some(ep) = &d.episodes[h] else {
        return bits;
    };
    let obj = &d.objects[ep.target];
    let leave = cfg.rho_out_mm + 50.0;
    let mut end = ep.release.max(ep.grasp);
    while end < steps && dist(d.paths[h][end], obj[end]) <= leave {
        end += 1;
    }
    for b in bits.iter_mut().take(end.min(steps)).skip(ep.start + cfg.label_onset_offset) {
        *b = 1;
    }
    bits
}

/// Every labeled-0 step keeps the human farther than the manipulation
/// radius from every object.
fn labels_consistent(cfg: &GenConfig, d: &Draft, labels: &[Vec<u8>]) -> bool {
    for (h, path) in d.paths.iter().enumerate() {
        for t in 0..cfg.steps {
            if labels[h][t] == 0 && d.objects.iter().any(|o| dist(path[t], o[t]) <= cfg.rho_out_mm) {
                return false;
            }
        }
    }
    true
}

pub fn generate_scene(cfg: &GenConfig, index: usize) -> Result<Scene> {
    cfg.validate()?;
    if cfg.arena_mm < 4.0 * OBJECT_SPACING {
        return Err(Error::Generator(format!(
            "arena of {} mm is too small for the requested entities",
            cfg.arena_mm
        )));
    }
    let rig = human_rig();
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, index, attempt));
        let Some(d) = try_scene(cfg, &mut rng) else { continue };
        let labels: Vec<Vec<u8>> = (0..d.paths.len()).map(|h| episode_labels(cfg, &d, h)).collect();
        if !labels_consistent(cfg, &d, &labels) {
            continue;
        }
        let n_h = d.paths.len();
        let mut entities = Vec::with_capacity(n_h + d.objects.len());
        for (h, path) in d.paths.iter().enumerate() {
            entities.push(SceneEntity {
                id: h,
                class: EntityClass::Human,
                class_label: "human".into(),
                features: path.iter().map(|&c| human_flat(&rig, c)).collect(),
            });
        }
        for (o, traj) in d.objects.iter().enumerate() {
            entities.push(SceneEntity {
                id: n_h + o,
                class: EntityClass::Object,
                class_label: d.labels[o].clone(),
                features: traj.iter().map(|&c| box_corners(c, d.sizes[o])).collect(),
            });
        }
        let switch_labels: BTreeMap<usize, Vec<u8>> = labels.into_iter().enumerate().collect();
        let scene = Scene {
            scene_id: format!("scene_{index:04}"),
            dt: cfg.dt,
            entities,
            switch_labels,
        };
        scene.check()?;
        return Ok(scene);
    }
    Err(Error::Generator(format!(
        "scene {index}: no valid layout after {MAX_ATTEMPTS} attempts; the arena is too small for the requested entities"
    )))
}

pub fn generate_dataset(cfg: &GenConfig) -> Result<Vec<Scene>> {
    (0..cfg.num_scenes).map(|i| generate_scene(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::centroid_flat;

    #[test]
    fn rig_is_centered() {
        let rig = human_rig();
        let flat = human_flat(&rig, [10.0, 20.0, HUMAN_CENTROID_Z]);
        let c = centroid_flat(&flat);
        assert!(dist(c, [10.0, 20.0, HUMAN_CENTROID_Z]) < 1e-9);
    }

    #[test]
    fn no_episodes_means_static_objects_and_zero_labels() {
        let cfg = GenConfig {
            episode_rate: 0.0,
            num_scenes: 10,
            ..GenConfig::default()
        };
        for s in generate_dataset(&cfg).unwrap() {
            assert!(!s.has_interaction());
            for e in s.entities.iter().filter(|e| e.class == EntityClass::Object) {
                assert!(e.features.iter().all(|f| f == &e.features[0]));
            }
        }
    }

    #[test]
    fn tiny_arena_is_rejected() {
        let cfg = GenConfig {
            arena_mm: 500.0,
            ..GenConfig::default()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Generator(_))));
    }
}
