//! Radar preprocessing: multi-cycle accumulation with ego-motion
//! compensation, pillar rasterisation into image-plane channels, and
//! composition of the augmented network input.

use std::fs;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{relative_pose, Camera, Point3, Pose};

/// Number of most recent radar cycles fused into one frame.
pub const DEFAULT_CYCLES: usize = 13;
/// Assumed vertical extent of every radar return, metres.
pub const PILLAR_HEIGHT_M: f64 = 3.0;
/// Value of a radar channel where no detection projects.
pub const NO_DETECTION: f32 = 0.0;
/// Offset added to RCS (dBsm) so that genuine returns never encode as 0.
pub const RCS_OFFSET_DBSM: f64 = 64.0;
pub const RCS_FLOOR: f64 = 1e-3;
/// Camera values after scaling lie in `[-CAMERA_HALF_RANGE, CAMERA_HALF_RANGE]`.
pub const CAMERA_HALF_RANGE: f32 = 127.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarDetection {
    /// Radians in the sensor frame, 0 along boresight, positive to the left.
    pub azimuth: f64,
    pub distance: f64,
    /// Radar cross section, dBsm.
    pub rcs: f64,
    #[serde(default)]
    pub sensor_id: u32,
    #[serde(default)]
    pub timestamp: f64,
}

impl RadarDetection {
    pub fn is_valid(&self) -> bool {
        self.distance > 0.0 && self.azimuth.is_finite() && self.distance.is_finite() && self.rcs.is_finite() && self.timestamp.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarCycle {
    pub timestamp: f64,
    /// Vehicle pose in the world frame at cycle time.
    pub ego_pose: Pose,
    /// Sensor pose in the vehicle frame.
    pub sensor_pose: Pose,
    pub detections: Vec<RadarDetection>,
}

/// A detection re-expressed in the current vehicle frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AccumulatedPoint {
    pub position: Point3,
    pub rcs: f64,
    /// Planar range from the current vehicle origin, metres.
    pub distance: f64,
}

/// Fuses the newest `n` cycles into the frame of `current_pose`.
///
/// Detections are placed on the sensor's ground plane, lifted to the world
/// through each cycle's own sensor and ego poses, then expressed relative to
/// the current ego pose. Target motion is not compensated. Cycles from
/// several sensors may be mixed; each carries its own `sensor_pose`.
pub fn accumulate_cycles(cycles: &[RadarCycle], current_pose: &Pose, n: usize) -> Vec<AccumulatedPoint> {
    let start = cycles.len().saturating_sub(n);
    let mut out = Vec::new();
    for cycle in &cycles[start..] {
        let world_from_sensor = cycle.ego_pose.compose(&cycle.sensor_pose);
        let to_current = relative_pose(&world_from_sensor, current_pose);
        out.extend(cycle.detections.iter().map(|d| detection_to_frame(d, &to_current)));
    }
    out
}

/// Places one detection on the sensor ground plane and maps it through
/// `frame_from_sensor`.
pub fn detection_to_frame(det: &RadarDetection, frame_from_sensor: &Pose) -> AccumulatedPoint {
    let (s, c) = det.azimuth.sin_cos();
    let p = frame_from_sensor.transform_point(&Point3::new(det.distance * c, det.distance * s, 0.0));
    AccumulatedPoint {
        position: p,
        rcs: det.rcs,
        distance: p.x.hypot(p.y),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadarChannel {
    Distance,
    Rcs,
    Existence,
}

impl RadarChannel {
    pub fn name(self) -> &'static str {
        match self {
            RadarChannel::Distance => "distance",
            RadarChannel::Rcs => "rcs",
            RadarChannel::Existence => "existence",
        }
    }

    /// Encoded channel value for a detection.
    pub fn encode(self, p: &AccumulatedPoint) -> f32 {
        match self {
            RadarChannel::Distance => p.distance as f32,
            RadarChannel::Rcs => (p.rcs + RCS_OFFSET_DBSM).max(RCS_FLOOR) as f32,
            RadarChannel::Existence => 1.0,
        }
    }
}

/// Ordered, duplicate-free list of radar channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<RadarChannel>", into = "Vec<RadarChannel>")]
pub struct ChannelSpec(Vec<RadarChannel>);

impl ChannelSpec {
    pub fn new(channels: Vec<RadarChannel>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Config("radar channel list is empty".into()));
        }
        for (i, c) in channels.iter().enumerate() {
            if channels[..i].contains(c) {
                return Err(Error::Config(format!("radar channel `{}` listed twice", c.name())));
            }
        }
        Ok(ChannelSpec(channels))
    }

    /// Distance and RCS, the default fusion input.
    pub fn full() -> Self {
        ChannelSpec(vec![RadarChannel::Distance, RadarChannel::Rcs])
    }

    /// A single binary existence channel (no radar meta data).
    pub fn existence_only() -> Self {
        ChannelSpec(vec![RadarChannel::Existence])
    }

    pub fn channels(&self) -> &[RadarChannel] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<RadarChannel>> for ChannelSpec {
    type Error = Error;

    fn try_from(v: Vec<RadarChannel>) -> Result<Self> {
        ChannelSpec::new(v)
    }
}

impl From<ChannelSpec> for Vec<RadarChannel> {
    fn from(s: ChannelSpec) -> Self {
        s.0
    }
}

/// H×W×R radar channels, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarStack {
    pub height: usize,
    pub width: usize,
    pub spec: ChannelSpec,
    pub data: Vec<f32>,
}

impl RadarStack {
    pub fn zeros(height: usize, width: usize, spec: ChannelSpec) -> Self {
        let n = height * width * spec.len();
        RadarStack {
            height,
            width,
            spec,
            data: vec![NO_DETECTION; n],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> &[f32] {
        let r = self.spec.len();
        let i = (row * self.width + col) * r;
        &self.data[i..i + r]
    }

    pub fn is_occupied(&self, row: usize, col: usize) -> bool {
        self.at(row, col).iter().any(|&v| v != NO_DETECTION)
    }
}

/// Image pixels covered by one detection's pillar, as `(row, col)`.
///
/// The pillar from the ground point up to `pillar_height` is sampled densely
/// in 3D so that curved (fish-eye) projections are followed; each sample is
/// widened to `pixel_width` columns centred on its projection.
pub fn pillar_pixels(p: &AccumulatedPoint, cam: &Camera, image_size: (usize, usize), pillar_height: f64, pixel_width: usize) -> Vec<(usize, usize)> {
    let (h, w) = image_size;
    let base = Point3::new(p.position.x, p.position.y, 0.0);
    let top = Point3::new(p.position.x, p.position.y, pillar_height);
    let (Ok(b), Ok(t)) = (cam.project(&base), cam.project(&top)) else {
        return sample_partial(&base, pillar_height, cam, image_size, pixel_width);
    };
    let span = (b.u - t.u).abs().max((b.v - t.v).abs());
    if !span.is_finite() {
        return Vec::new();
    }
    let steps = (2.0 * span).ceil().max(1.0) as usize;
    let mut out = Vec::new();
    let mut push = |u: f64, v: f64| {
        let (col, row) = (u.floor(), v.floor());
        if row < 0.0 || row >= h as f64 {
            return;
        }
        let left = col - ((pixel_width.max(1) - 1) / 2) as f64;
        for k in 0..pixel_width.max(1) {
            let c = left + k as f64;
            if c >= 0.0 && c < w as f64 {
                let px = (row as usize, c as usize);
                if out.last() != Some(&px) && !out.contains(&px) {
                    out.push(px);
                }
            }
        }
    };
    for i in 0..=steps {
        let z = pillar_height * i as f64 / steps as f64;
        if let Ok(px) = cam.project(&Point3::new(base.x, base.y, z)) {
            push(px.u, px.v);
        }
    }
    out
}

/// Handles pillars whose base or top does not project, keeping whatever
/// part of the pillar is visible.
fn sample_partial(base: &Point3, pillar_height: f64, cam: &Camera, image_size: (usize, usize), pixel_width: usize) -> Vec<(usize, usize)> {
    const SAMPLES: usize = 64;
    let (h, w) = image_size;
    let mut out = Vec::new();
    for i in 0..=SAMPLES {
        let z = pillar_height * i as f64 / SAMPLES as f64;
        if let Ok(px) = cam.project(&Point3::new(base.x, base.y, z)) {
            let (col, row) = (px.u.floor(), px.v.floor());
            if row < 0.0 || row >= h as f64 {
                continue;
            }
            let left = col - ((pixel_width.max(1) - 1) / 2) as f64;
            for k in 0..pixel_width.max(1) {
                let c = left + k as f64;
                if c >= 0.0 && c < w as f64 && !out.contains(&(row as usize, c as usize)) {
                    out.push((row as usize, c as usize));
                }
            }
        }
    }
    out
}

/// Draws every point as a vertical pillar into an H×W×|spec| stack.
///
/// Where pillars overlap, the detection with the smaller distance owns the
/// pixel and supplies all of its channels. Unprojectable points are dropped.
pub fn rasterize_pillars(
    points: &[AccumulatedPoint],
    cam: &Camera,
    image_size: (usize, usize),
    spec: &ChannelSpec,
    pillar_height: f64,
    pixel_width: usize,
) -> RadarStack {
    let (h, w) = image_size;
    let mut stack = RadarStack::zeros(h, w, spec.clone());
    let mut depth = vec![f64::INFINITY; h * w];
    let r = spec.len();
    for p in points {
        for (row, col) in pillar_pixels(p, cam, image_size, pillar_height, pixel_width) {
            let idx = row * w + col;
            if p.distance < depth[idx] {
                depth[idx] = p.distance;
                for (k, ch) in spec.channels().iter().enumerate() {
                    stack.data[idx * r + k] = ch.encode(p);
                }
            }
        }
    }
    stack
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Red,
    Green,
    Blue,
    Radar(RadarChannel),
}

impl ChannelKind {
    pub fn name(self) -> &'static str {
        match self {
            ChannelKind::Red => "red",
            ChannelKind::Green => "green",
            ChannelKind::Blue => "blue",
            ChannelKind::Radar(c) => c.name(),
        }
    }
}

/// Network input: scaled camera channels followed by raw radar channels,
/// stored H×W×C row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedImage {
    pub height: usize,
    pub width: usize,
    pub radar: Option<ChannelSpec>,
    pub scene_id: String,
    pub data: Vec<f32>,
}

pub const CAMERA_CHANNELS: usize = 3;

impl AugmentedImage {
    pub fn channels(&self) -> usize {
        CAMERA_CHANNELS + self.radar_channels()
    }

    pub fn radar_channels(&self) -> usize {
        self.radar.as_ref().map_or(0, ChannelSpec::len)
    }

    pub fn channel_kinds(&self) -> Vec<ChannelKind> {
        let mut kinds = vec![ChannelKind::Red, ChannelKind::Green, ChannelKind::Blue];
        if let Some(spec) = &self.radar {
            kinds.extend(spec.channels().iter().map(|&c| ChannelKind::Radar(c)));
        }
        kinds
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels() + channel]
    }

    /// Writes `<stem>.bin` (f32 little-endian, H then W then C) and a
    /// `<stem>.json` descriptor.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut raw = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        let bin = dir.join(format!("{stem}.bin"));
        fs::write(&bin, raw).map_err(|e| Error::io(&bin, e))?;
        let desc = TensorDescriptor {
            shape: [self.height, self.width, self.channels()],
            dtype: "f32le".into(),
            layout: "hwc".into(),
            channels: self.channel_kinds().iter().map(|k| k.name().to_string()).collect(),
            radar: self.radar.clone(),
            scene_id: self.scene_id.clone(),
        };
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&desc).map_err(|e| Error::json(&json, e))?;
        fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let json = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let desc: TensorDescriptor = serde_json::from_str(&text).map_err(|e| Error::json(&json, e))?;
        let bin = dir.join(format!("{stem}.bin"));
        let raw = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let [h, w, c] = desc.shape;
        let expected_c = CAMERA_CHANNELS + desc.radar.as_ref().map_or(0, ChannelSpec::len);
        if raw.len() != h * w * c * 4 || c != expected_c {
            return Err(Error::Shape {
                what: "augmented image file",
                expected: format!("{h}×{w}×{expected_c} f32 values"),
                got: format!("{} bytes, {c} channels", raw.len()),
            });
        }
        Ok(AugmentedImage {
            height: h,
            width: w,
            radar: desc.radar,
            scene_id: desc.scene_id,
            data: raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TensorDescriptor {
    shape: [usize; 3],
    dtype: String,
    layout: String,
    channels: Vec<String>,
    radar: Option<ChannelSpec>,
    scene_id: String,
}

/// Maps camera bytes linearly onto `[-127.5, 127.5]` and appends the radar
/// channels unchanged.
pub fn compose_augmented_image(camera: &RgbImage, radar: Option<&RadarStack>, scene_id: &str) -> Result<AugmentedImage> {
    let (w, h) = (camera.width() as usize, camera.height() as usize);
    if let Some(r) = radar {
        if (r.height, r.width) != (h, w) {
            return Err(Error::Shape {
                what: "radar stack",
                expected: format!("{h}×{w}"),
                got: format!("{}×{}", r.height, r.width),
            });
        }
    }
    let rc = radar.map_or(0, |r| r.spec.len());
    let c = CAMERA_CHANNELS + rc;
    let mut data = Vec::with_capacity(h * w * c);
    for (i, px) in camera.pixels().enumerate() {
        data.extend(px.0.iter().map(|&b| scale_camera(b as f32)));
        if let Some(r) = radar {
            data.extend_from_slice(&r.data[i * rc..(i + 1) * rc]);
        }
    }
    Ok(AugmentedImage {
        height: h,
        width: w,
        radar: radar.map(|r| r.spec.clone()),
        scene_id: scene_id.to_string(),
        data,
    })
}

/// Camera byte value (0..=255) to network scale.
pub fn scale_camera(v: f32) -> f32 {
    v - CAMERA_HALF_RANGE
}
