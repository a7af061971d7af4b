//! Scene files, synthetic scene generation, condition-stratified splits and
//! per-class bookkeeping.
//!
//! A scene lives in its own directory holding `scene.json` and `image.png`:
//!
//! ```json
//! {
//!   "scene_id": "scene-00000",
//!   "condition": "day",
//!   "degraded": false,
//!   "camera": {"model": "pinhole", "fx": 200.0, ...},
//!   "cycles": [{"timestamp": 0.0, "ego_pose": {...}, "sensor_pose": {...},
//!               "detections": [{"azimuth": 0.1, "distance": 12.3, "rcs": 9.5}]}],
//!   "boxes": [{"center": [12.0, 1.0, 0.75], "size": [4.5, 1.8, 1.5], "yaw": 0.0, "class": "car"}]
//! }
//! ```
//!
//! Poses are `{"rotation": [row-major 3×3], "translation": [x, y, z]}`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::boxes::{Box2D, Box3D};
use crate::class::{ObjectClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::filters::{point_in_box3d, project_box3d_to_2d};
use crate::geometry::{forward_camera_extrinsic, relative_pose, Camera, PinholeCamera, Point3, Pose};
use crate::radar::{accumulate_cycles, detection_to_frame, AccumulatedPoint, RadarCycle, RadarDetection, DEFAULT_CYCLES};

pub const SCENE_FILE: &str = "scene.json";
pub const IMAGE_FILE: &str = "image.png";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Day,
    Rain,
    Night,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Day, Condition::Rain, Condition::Night];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Day => "day",
            Condition::Rain => "rain",
            Condition::Night => "night",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub condition: Condition,
    /// Camera data deliberately destroyed (synthetic camera failure).
    pub degraded: bool,
    pub image: RgbImage,
    pub camera: Camera,
    /// Oldest first; the last cycle defines the current vehicle frame.
    pub cycles: Vec<RadarCycle>,
    /// Ground truth in the current vehicle frame.
    pub boxes: Vec<Box3D>,
}

#[derive(Serialize, Deserialize)]
struct SceneDoc {
    scene_id: String,
    condition: Condition,
    #[serde(default)]
    degraded: bool,
    camera: Camera,
    cycles: Vec<RadarCycle>,
    boxes: Vec<Box3D>,
}

impl Scene {
    pub fn current_pose(&self) -> &Pose {
        &self.cycles.last().expect("validated scene has cycles").ego_pose
    }

    /// Radar points of the newest `n` cycles in the current vehicle frame.
    pub fn accumulated_points(&self, n: usize) -> Vec<AccumulatedPoint> {
        accumulate_cycles(&self.cycles, self.current_pose(), n)
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.image.height() as usize, self.image.width() as usize)
    }

    /// 2D ground truth: every box that is visible in the camera.
    pub fn boxes_2d(&self, boxes: &[Box3D]) -> Vec<Box2D> {
        boxes.iter().filter_map(|b| project_box3d_to_2d(b, &self.camera)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::Scene {
            scene: self.scene_id.clone(),
            reason,
        };
        self.camera.validate()?;
        if self.cycles.is_empty() {
            return Err(fail("no radar cycles".into()));
        }
        if (self.image.width(), self.image.height()) != (self.camera.width(), self.camera.height()) {
            return Err(fail(format!(
                "image is {}×{} but the camera model is {}×{}",
                self.image.width(),
                self.image.height(),
                self.camera.width(),
                self.camera.height()
            )));
        }
        if self.cycles.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
            return Err(fail("cycle timestamps decrease".into()));
        }
        for (i, c) in self.cycles.iter().enumerate() {
            if let Some(d) = c.detections.iter().find(|d| !d.is_valid()) {
                return Err(fail(format!("cycle {i}: invalid detection {d:?}")));
            }
        }
        if let Some(b) = self.boxes.iter().find(|b| !b.is_valid()) {
            return Err(fail(format!("invalid box {b:?}")));
        }
        Ok(())
    }

    /// Writes `<root>/<scene_id>/{scene.json,image.png}`.
    pub fn save(&self, root: &Path) -> Result<PathBuf> {
        let dir = root.join(&self.scene_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let doc = SceneDoc {
            scene_id: self.scene_id.clone(),
            condition: self.condition,
            degraded: self.degraded,
            camera: self.camera.clone(),
            cycles: self.cycles.clone(),
            boxes: self.boxes.clone(),
        };
        let json = dir.join(SCENE_FILE);
        let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::json(&json, e))?;
        fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let png = dir.join(IMAGE_FILE);
        self.image.save(&png).map_err(|source| Error::Image { path: png, source })?;
        Ok(dir)
    }

    pub fn load(dir: &Path) -> Result<Scene> {
        let json = dir.join(SCENE_FILE);
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let doc: SceneDoc = serde_json::from_str(&text).map_err(|e| Error::json(&json, e))?;
        let png = dir.join(IMAGE_FILE);
        let image = image::open(&png).map_err(|source| Error::Image { path: png, source })?.to_rgb8();
        let scene = Scene {
            scene_id: doc.scene_id,
            condition: doc.condition,
            degraded: doc.degraded,
            image,
            camera: doc.camera,
            cycles: doc.cycles,
            boxes: doc.boxes,
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// Loads every scene directory under `root`, ordered by directory name.
pub fn load_scenes(root: &Path) -> Result<Vec<Scene>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join(SCENE_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    dirs.iter().map(|d| Scene::load(d)).collect()
}

/// Per-class object counts in the fixed class order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    pub counts: [u64; NUM_CLASSES],
}

/// Object counts of the public driving dataset used for the reference
/// configuration.
pub const NUSCENES_COUNTS: ClassTable = ClassTable {
    counts: [22591, 1332, 729, 5015, 1783, 616, 10026],
};

/// Object counts of the fish-eye test-vehicle dataset.
pub const TUM_COUNTS: ClassTable = ClassTable {
    counts: [4020, 109, 10, 14, 45, 438, 678],
};

impl ClassTable {
    pub fn get(&self, class: ObjectClass) -> u64 {
        self.counts[class.index()]
    }

    pub fn add(&mut self, class: ObjectClass) {
        self.counts[class.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merged(&self, other: &ClassTable) -> ClassTable {
        let mut out = *self;
        for (a, b) in out.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        out
    }
}

/// Counts the 2D-visible annotations over a set of scenes.
pub fn count_classes(scenes: &[Scene]) -> ClassTable {
    let mut table = ClassTable::default();
    for s in scenes {
        for b in s.boxes_2d(&s.boxes) {
            table.add(b.class_label);
        }
    }
    table
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.6, 0.2, 0.2];

/// Integer shares of `n` proportional to `ratios`: floors first, then the
/// leftover units go to the largest fractional parts (earlier index on ties).
pub fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut out: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

fn check_ratios(ratios: &[f64]) -> Result<()> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    Ok(())
}

/// Index split, stratified by condition. Each stratum is shuffled with the
/// seed and cut by [`largest_remainder`]; indices within a split ascend.
pub fn split_indices(conditions: &[Condition], ratios: [f64; 3], seed: u64) -> Result<Split<usize>> {
    check_ratios(&ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for cond in Condition::ALL {
        let mut stratum: Vec<usize> = (0..conditions.len()).filter(|&i| conditions[i] == cond).collect();
        stratum.shuffle(&mut rng);
        let sizes = largest_remainder(stratum.len(), &ratios);
        let mut rest = stratum.as_slice();
        for (part, size) in parts.iter_mut().zip(sizes) {
            let (head, tail) = rest.split_at(size);
            part.extend_from_slice(head);
            rest = tail;
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    let [train, val, test] = parts;
    Ok(Split { train, val, test })
}

pub fn split_dataset(scenes: Vec<Scene>, ratios: [f64; 3], seed: u64) -> Result<Split<Scene>> {
    let conds: Vec<Condition> = scenes.iter().map(|s| s.condition).collect();
    let idx = split_indices(&conds, ratios, seed)?;
    let mut slots: Vec<Option<Scene>> = scenes.into_iter().map(Some).collect();
    let mut take = |ids: &[usize]| ids.iter().map(|&i| slots[i].take().expect("indices are disjoint")).collect();
    Ok(Split {
        train: take(&idx.train),
        val: take(&idx.val),
        test: take(&idx.test),
    })
}

/// Parameters of the synthetic scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
    pub focal_px: f64,
    pub camera_height_m: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Longitudinal range of object centres, metres.
    pub distance_range: [f64; 2],
    /// Lateral offset limit as a fraction of the longitudinal distance.
    pub lateral_fraction: f64,
    pub max_yaw: f64,
    /// Mean number of clutter detections per radar cycle.
    pub clutter_rate: f64,
    pub degrade_probability: f64,
    /// Chance that an object yields no radar return at all.
    pub radar_miss_probability: f64,
    /// Per-cycle detection chance of an object seen by the radar.
    pub detection_probability: f64,
    pub ego_speed_range: [f64; 2],
    pub cycles: usize,
    pub cycle_period_s: f64,
    pub range_sigma_m: f64,
    pub azimuth_sigma_deg: f64,
    pub rcs_sigma_db: f64,
    pub radar_fov_deg: f64,
    pub radar_max_range_m: f64,
    /// Relative frequency of day, rain and night scenes.
    pub condition_mix: [f64; 3],
    /// Relative frequency of each class, fixed class order.
    pub class_mix: [f64; NUM_CLASSES],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 160,
            height: 96,
            focal_px: 200.0,
            camera_height_m: 1.5,
            min_objects: 1,
            max_objects: 4,
            distance_range: [7.0, 16.0],
            lateral_fraction: 0.3,
            max_yaw: 0.15,
            clutter_rate: 4.0,
            degrade_probability: 0.0,
            radar_miss_probability: 0.1,
            detection_probability: 0.9,
            ego_speed_range: [0.0, 8.0],
            cycles: DEFAULT_CYCLES,
            cycle_period_s: 0.077,
            range_sigma_m: 0.3,
            azimuth_sigma_deg: 0.5,
            rcs_sigma_db: 1.5,
            radar_fov_deg: 120.0,
            radar_max_range_m: 50.0,
            condition_mix: [1.0 / 3.0; 3],
            class_mix: [4.0, 1.0, 1.0, 2.0, 1.0, 1.0, 3.0],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic generator: {m}")));
        if self.width < 8 || self.height < 8 {
            return bad("image must be at least 8×8");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if !(0.0 < self.distance_range[0] && self.distance_range[0] <= self.distance_range[1]) {
            return bad("distance_range must be positive and ordered");
        }
        if !(self.ego_speed_range[0] <= self.ego_speed_range[1]) {
            return bad("ego_speed_range must be ordered");
        }
        for (name, p) in [
            ("degrade_probability", self.degrade_probability),
            ("radar_miss_probability", self.radar_miss_probability),
            ("detection_probability", self.detection_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.clutter_rate >= 0.0 && self.range_sigma_m >= 0.0 && self.azimuth_sigma_deg >= 0.0 && self.rcs_sigma_db >= 0.0) {
            return bad("rates and noise levels must be non-negative");
        }
        if self.cycles == 0 {
            return bad("at least one radar cycle is required");
        }
        if self.condition_mix.iter().any(|v| *v < 0.0) || self.condition_mix.iter().sum::<f64>() <= 0.0 {
            return bad("condition_mix needs a positive entry and no negative ones");
        }
        if self.class_mix.iter().any(|v| *v < 0.0) || self.class_mix.iter().sum::<f64>() <= 0.0 {
            return bad("class_mix needs a positive entry and no negative ones");
        }
        Ok(())
    }

    pub fn camera(&self) -> Result<Camera> {
        let cam = PinholeCamera::new(
            self.focal_px,
            self.focal_px,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
            forward_camera_extrinsic(self.camera_height_m),
        )?;
        Ok(cam.into())
    }
}

/// Fill value of every pixel of a degraded camera image.
pub const DEGRADED_PIXEL: Rgb<u8> = Rgb([12, 12, 12]);

/// Nominal (length, width, height) in metres.
pub fn nominal_size(class: ObjectClass) -> [f64; 3] {
    match class {
        ObjectClass::Car => [4.5, 1.8, 1.5],
        ObjectClass::Bus => [10.0, 2.8, 3.2],
        ObjectClass::Motorcycle => [2.0, 0.8, 1.4],
        ObjectClass::Truck => [7.0, 2.5, 3.0],
        ObjectClass::Trailer => [8.0, 2.5, 2.6],
        ObjectClass::Bicycle => [1.7, 0.6, 1.2],
        ObjectClass::Human => [0.6, 0.6, 1.75],
    }
}

/// Mean radar cross section, dBsm.
pub fn mean_rcs(class: ObjectClass) -> f64 {
    match class {
        ObjectClass::Car => 10.0,
        ObjectClass::Bus => 18.0,
        ObjectClass::Motorcycle => 3.0,
        ObjectClass::Truck => 22.0,
        ObjectClass::Trailer => 15.0,
        ObjectClass::Bicycle => 0.0,
        ObjectClass::Human => -5.0,
    }
}

fn class_color(class: ObjectClass) -> [f64; 3] {
    match class {
        ObjectClass::Car => [200.0, 40.0, 40.0],
        ObjectClass::Bus => [240.0, 200.0, 30.0],
        ObjectClass::Motorcycle => [40.0, 170.0, 220.0],
        ObjectClass::Truck => [40.0, 60.0, 200.0],
        ObjectClass::Trailer => [150.0, 90.0, 40.0],
        ObjectClass::Bicycle => [40.0, 200.0, 90.0],
        ObjectClass::Human => [230.0, 120.0, 200.0],
    }
}

fn is_round(class: ObjectClass) -> bool {
    matches!(class, ObjectClass::Motorcycle | ObjectClass::Bicycle | ObjectClass::Human)
}

struct Lighting {
    sky: [f64; 3],
    road: [f64; 3],
    gain: f64,
    noise: f64,
}

fn lighting(c: Condition) -> Lighting {
    match c {
        Condition::Day => Lighting {
            sky: [170.0, 190.0, 215.0],
            road: [110.0, 110.0, 110.0],
            gain: 1.0,
            noise: 6.0,
        },
        Condition::Rain => Lighting {
            sky: [120.0, 125.0, 135.0],
            road: [85.0, 88.0, 92.0],
            gain: 0.75,
            noise: 14.0,
        },
        Condition::Night => Lighting {
            sky: [15.0, 15.0, 28.0],
            road: [32.0, 32.0, 36.0],
            gain: 0.45,
            noise: 8.0,
        },
    }
}

/// What the generator placed and emitted for one scene.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneStats {
    pub classes: ClassTable,
    pub radar_missed: usize,
    pub object_detections: usize,
    pub clutter_detections: usize,
}

/// Maximum share of the smaller 2D box that another object may cover.
const MAX_OVERLAP: f64 = 0.3;
const MIN_BOX_PX: f64 = 4.0;
const PLACEMENT_TRIES: usize = 50;
const NOISE_TRIES: usize = 100;

/// Renders one synthetic scene.
///
/// Objects are static cuboids on the ground in front of the vehicle. The
/// ego vehicle drives along +x; each of the radar cycles sees every
/// radar-visible object at its ground centre with range and azimuth noise
/// (resampled until the point stays inside the object's box), plus Poisson
/// clutter spread uniformly over the radar field of view.
pub fn generate_synthetic_scene<R: Rng>(config: &SynthConfig, rng: &mut R, scene_id: &str, condition: Condition) -> Result<(Scene, SceneStats)> {
    config.validate()?;
    let camera = config.camera()?;
    let mut stats = SceneStats::default();

    let n_objects = rng.random_range(config.min_objects..=config.max_objects);
    let class_total: f64 = config.class_mix.iter().sum();
    let mut placed: Vec<(Box3D, Box2D)> = Vec::new();
    for _ in 0..n_objects {
        for _ in 0..PLACEMENT_TRIES {
            let mut pick = rng.random::<f64>() * class_total;
            let mut class = ObjectClass::Car;
            for c in ObjectClass::ALL {
                if pick < config.class_mix[c.index()] {
                    class = c;
                    break;
                }
                pick -= config.class_mix[c.index()];
            }
            let size = nominal_size(class).map(|s| s * rng.random_range(0.9..=1.1));
            let x = rng.random_range(config.distance_range[0]..=config.distance_range[1]);
            let y = rng.random_range(-1.0..=1.0) * config.lateral_fraction * x;
            let yaw = rng.random_range(-config.max_yaw..=config.max_yaw);
            let b3 = Box3D {
                center: Point3::new(x, y, size[2] / 2.0),
                size,
                yaw,
                class_label: class,
            };
            let Some(b2) = project_box3d_to_2d(&b3, &camera) else { continue };
            if b2.width() < MIN_BOX_PX || b2.height() < MIN_BOX_PX {
                continue;
            }
            let clash = placed.iter().any(|(o3, o2)| {
                let inter = b2.intersection_area(o2);
                inter > MAX_OVERLAP * b2.area().min(o2.area()) || footprints_touch(&b3, o3)
            });
            if !clash {
                placed.push((b3, b2));
                break;
            }
        }
    }

    let light = lighting(condition);
    let degraded = rng.random::<f64>() < config.degrade_probability;
    let mut image = render_background(config, &light, condition, rng);
    placed.sort_by(|a, b| b.0.center.x.total_cmp(&a.0.center.x));
    for (b3, b2) in &placed {
        draw_object(&mut image, b2, b3.class_label, &light, rng);
    }
    if degraded {
        for px in image.pixels_mut() {
            *px = DEGRADED_PIXEL;
        }
    }

    let speed = rng.random_range(config.ego_speed_range[0]..=config.ego_speed_range[1]);
    let last = (config.cycles - 1) as f64 * config.cycle_period_s;
    let current = Pose::from_translation(speed * last, 0.0, 0.0);
    let mut cycles: Vec<RadarCycle> = (0..config.cycles)
        .map(|i| {
            let t = i as f64 * config.cycle_period_s;
            RadarCycle {
                timestamp: t,
                ego_pose: Pose::from_translation(speed * t, 0.0, 0.0),
                sensor_pose: Pose::identity(),
                detections: Vec::new(),
            }
        })
        .collect();

    let range_noise = Normal::new(0.0, config.range_sigma_m).expect("validated sigma");
    let az_noise = Normal::new(0.0, config.azimuth_sigma_deg.to_radians()).expect("validated sigma");
    let rcs_noise = Normal::new(0.0, config.rcs_sigma_db).expect("validated sigma");
    let half_fov = config.radar_fov_deg.to_radians() / 2.0;
    for (b3, _) in &placed {
        if rng.random::<f64>() < config.radar_miss_probability {
            stats.radar_missed += 1;
            continue;
        }
        let ground_world = current.transform_point(&Point3::new(b3.center.x, b3.center.y, 0.0));
        for cycle in &mut cycles {
            if rng.random::<f64>() >= config.detection_probability {
                continue;
            }
            let world_from_sensor = cycle.ego_pose.compose(&cycle.sensor_pose);
            let to_current = relative_pose(&world_from_sensor, &current);
            let local = world_from_sensor.inverse().transform_point(&ground_world);
            let (r0, az0) = (local.x.hypot(local.y), local.y.atan2(local.x));
            let mut det = RadarDetection {
                azimuth: az0,
                distance: r0,
                rcs: mean_rcs(b3.class_label) + rcs_noise.sample(rng),
                sensor_id: 0,
                timestamp: cycle.timestamp,
            };
            for _ in 0..NOISE_TRIES {
                let trial = RadarDetection {
                    azimuth: az0 + az_noise.sample(rng),
                    distance: r0 + range_noise.sample(rng),
                    ..det.clone()
                };
                if trial.distance > 0.0 && point_in_box3d(&detection_to_frame(&trial, &to_current).position, b3) {
                    det = trial;
                    break;
                }
            }
            if det.azimuth.abs() <= half_fov && det.distance <= config.radar_max_range_m {
                cycle.detections.push(det);
                stats.object_detections += 1;
            }
        }
    }
    if config.clutter_rate > 0.0 {
        let poisson = Poisson::new(config.clutter_rate).expect("validated rate");
        for cycle in &mut cycles {
            let k = poisson.sample(rng) as usize;
            for _ in 0..k {
                cycle.detections.push(RadarDetection {
                    azimuth: rng.random_range(-half_fov..=half_fov),
                    distance: rng.random_range(1.0..=config.radar_max_range_m),
                    rcs: rng.random_range(-15.0..=20.0),
                    sensor_id: 0,
                    timestamp: cycle.timestamp,
                });
            }
            stats.clutter_detections += k;
        }
    }

    let boxes: Vec<Box3D> = placed.into_iter().map(|(b3, _)| b3).collect();
    for b in &boxes {
        stats.classes.add(b.class_label);
    }
    let scene = Scene {
        scene_id: scene_id.to_string(),
        condition,
        degraded,
        image,
        camera,
        cycles,
        boxes,
    };
    Ok((scene, stats))
}

/// Ground footprints closer than their bounding circles allow.
fn footprints_touch(a: &Box3D, b: &Box3D) -> bool {
    let ra = a.size[0].hypot(a.size[1]) / 2.0;
    let rb = b.size[0].hypot(b.size[1]) / 2.0;
    (a.center.x - b.center.x).hypot(a.center.y - b.center.y) < ra + rb
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn render_background<R: Rng>(config: &SynthConfig, light: &Lighting, condition: Condition, rng: &mut R) -> RgbImage {
    let horizon = config.height / 2;
    let noise = Normal::new(0.0, light.noise).expect("positive noise");
    let mut img = RgbImage::from_fn(config.width, config.height, |_, y| {
        let base = if y < horizon { light.sky } else { light.road };
        Rgb(base.map(to_u8))
    });
    for px in img.pixels_mut() {
        let n = noise.sample(rng);
        *px = Rgb(px.0.map(|c| to_u8(c as f64 + n)));
    }
    if condition == Condition::Rain {
        let streaks = rng.random_range(20..40);
        for _ in 0..streaks {
            let x = rng.random_range(0..config.width);
            let y0 = rng.random_range(0..config.height);
            let len = rng.random_range(3..8);
            for y in y0..(y0 + len).min(config.height) {
                let px = img.get_pixel_mut(x, y);
                *px = Rgb(px.0.map(|c| to_u8(c as f64 + 45.0)));
            }
        }
    }
    img
}

fn draw_object<R: Rng>(img: &mut RgbImage, b: &Box2D, class: ObjectClass, light: &Lighting, rng: &mut R) {
    let jitter = rng.random_range(-15.0..=15.0);
    let color = Rgb(class_color(class).map(|c| to_u8((c + jitter) * light.gain)));
    let (cx, cy) = b.center();
    let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
    let round = is_round(class);
    let (x0, x1) = (b.x_min.floor().max(0.0) as u32, (b.x_max.ceil() as u32).min(img.width()));
    let (y0, y1) = (b.y_min.floor().max(0.0) as u32, (b.y_max.ceil() as u32).min(img.height()));
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = if round {
                ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0
            } else {
                px >= b.x_min && px <= b.x_max && py >= b.y_min && py <= b.y_max
            };
            if inside {
                img.put_pixel(x, y, color);
            }
        }
    }
}

/// Per-scene RNG: one ChaCha stream per scene index under a common seed.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn scene_id(index: usize) -> String {
    format!("scene-{index:05}")
}

/// Conditions for `n` scenes: exact counts by largest remainder over
/// `mix`, in a seeded random order.
pub fn assign_conditions(n: usize, mix: [f64; 3], seed: u64) -> Vec<Condition> {
    let total: f64 = mix.iter().sum();
    let counts = largest_remainder(n, &mix.map(|m| m / total));
    let mut out: Vec<Condition> = Condition::ALL.iter().zip(counts).flat_map(|(&c, k)| std::iter::repeat_n(c, k)).collect();
    out.shuffle(&mut scene_rng(seed, u64::MAX));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub condition: Condition,
    pub degraded: bool,
    pub stats: SceneStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub classes: ClassTable,
    pub scenes: Vec<ManifestEntry>,
}

/// Generates `n` scenes; scene `i` depends only on `(seed, i)`.
pub fn generate_dataset(config: &SynthConfig, n: usize, seed: u64) -> Result<(Vec<Scene>, Manifest)> {
    let conditions = assign_conditions(n, config.condition_mix, seed);
    let mut scenes = Vec::with_capacity(n);
    let mut entries = Vec::with_capacity(n);
    let mut classes = ClassTable::default();
    for (i, &cond) in conditions.iter().enumerate() {
        let id = scene_id(i);
        let (scene, stats) = generate_synthetic_scene(config, &mut scene_rng(seed, i as u64), &id, cond)?;
        classes = classes.merged(&stats.classes);
        entries.push(ManifestEntry {
            scene_id: id,
            condition: cond,
            degraded: scene.degraded,
            stats,
        });
        scenes.push(scene);
    }
    let manifest = Manifest {
        seed,
        config: config.clone(),
        classes,
        scenes: entries,
    };
    Ok((scenes, manifest))
}

pub fn write_dataset(root: &Path, scenes: &[Scene], manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for s in scenes {
        s.save(root)?;
    }
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
