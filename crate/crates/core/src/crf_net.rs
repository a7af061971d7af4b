//! The fusion detector: a VGG-style backbone that receives the radar
//! channels again before every block, a feature pyramid whose levels are
//! also concatenated with radar, and RetinaNet-style anchor heads.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crfnet_nn::{he_normal, Graph, NodeId, Padding, ParamId, ParamStore, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::Box2D;
use crate::class::{ObjectClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::evaluation::iou;
use crate::radar::{AugmentedImage, ChannelSpec, RadarChannel, CAMERA_CHANNELS, CAMERA_HALF_RANGE};

pub const NUM_BLOCKS: usize = 5;
/// Pyramid levels carrying detection heads.
pub const HEAD_LEVELS: [usize; 5] = [3, 4, 5, 6, 7];
/// Radar pyramid depth: full resolution down to 1/128.
pub const RADAR_LEVELS: usize = 8;
pub const ANCHOR_RATIOS: [f64; 3] = [0.5, 1.0, 2.0];
pub const ANCHORS_PER_LOCATION: usize = 9;
/// Base anchor edge at P3; doubles per level.
pub const BASE_ANCHOR_SIZE: f64 = 32.0;
/// Box deltas are predicted in units of these standard deviations.
pub const DELTA_STD: [f64; 4] = [0.1, 0.1, 0.2, 0.2];
/// Prior foreground probability encoded in the classification bias.
pub const PRIOR_PROBABILITY: f64 = 0.01;
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

pub fn anchor_scales() -> [f64; 3] {
    [1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// (H, W) of the network input.
    pub input_size: [usize; 2],
    /// Radar channels fed to the network; `None`, also when absent, is the
    /// camera-only baseline.
    #[serde(default)]
    pub radar: Option<ChannelSpec>,
    pub block_widths: [usize; NUM_BLOCKS],
    pub fpn_channels: usize,
    pub head_channels: usize,
    /// 3×3 conv+relu layers in each head before the output conv.
    pub head_depth: usize,
    pub anchor_scale_factor: f64,
    pub num_classes: usize,
    pub anchors_per_location: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: [96, 160],
            radar: Some(ChannelSpec::full()),
            block_widths: [16, 32, 64, 128, 128],
            fpn_channels: 64,
            head_channels: 64,
            head_depth: 4,
            anchor_scale_factor: 1.0,
            num_classes: NUM_CLASSES,
            anchors_per_location: ANCHORS_PER_LOCATION,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("network: {m}")));
        if self.input_size.contains(&0) {
            return bad(format!("input size {:?} has a zero extent", self.input_size));
        }
        if self.block_widths.contains(&0) || self.fpn_channels == 0 || self.head_channels == 0 {
            return bad("layer widths must be positive".into());
        }
        if self.anchor_scale_factor != 1.0 && self.anchor_scale_factor != 0.5 {
            return bad(format!("anchor_scale_factor must be 1.0 or 0.5, got {}", self.anchor_scale_factor));
        }
        if self.num_classes != NUM_CLASSES {
            return bad(format!("num_classes must be {NUM_CLASSES}"));
        }
        if self.anchors_per_location != ANCHORS_PER_LOCATION {
            return bad(format!("anchors_per_location must be {ANCHORS_PER_LOCATION}"));
        }
        Ok(())
    }

    pub fn radar_channels(&self) -> usize {
        self.radar.as_ref().map_or(0, ChannelSpec::len)
    }

    pub fn input_channels(&self) -> usize {
        CAMERA_CHANNELS + self.radar_channels()
    }

    pub fn class_outputs(&self) -> usize {
        self.anchors_per_location * self.num_classes
    }

    pub fn box_outputs(&self) -> usize {
        self.anchors_per_location * 4
    }

    /// Spatial size of pyramid level `k` (stride 2^k, ceil rounding).
    pub fn level_size(&self, k: usize) -> (usize, usize) {
        let [mut h, mut w] = self.input_size;
        for _ in 0..k {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }
}

/// Fixed input scaling applied inside the network. Camera values arrive in
/// [-127.5, 127.5]; radar channels arrive unscaled.
pub fn input_scale(channel: RadarChannel) -> f64 {
    match channel {
        RadarChannel::Distance => 1.0 / 32.0,
        RadarChannel::Rcs => 1.0 / 64.0,
        RadarChannel::Existence => 1.0,
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

/// Conv layers that read radar channels, with the index of their first
/// radar input channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RadarInput {
    pub weight: String,
    pub first_channel: usize,
}

#[derive(Clone, Debug)]
pub struct CrfNet<T: Real> {
    config: NetworkConfig,
    params: ParamStore<T>,
    blocks: Vec<[Conv; 2]>,
    lateral: [Conv; 3],
    smooth: [Conv; 3],
    p6: Conv,
    p7: Conv,
    class_head: Vec<Conv>,
    box_head: Vec<Conv>,
    radar_inputs: Vec<RadarInput>,
}

/// Head outputs for one pyramid level: class logits 1×(A·K)×h×w and box
/// deltas 1×(A·4)×h×w.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelOutput {
    pub level: usize,
    pub class: NodeId,
    pub boxes: NodeId,
    pub height: usize,
    pub width: usize,
}

impl<T: Real> CrfNet<T> {
    /// Builds the network with He-normal weights drawn from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut radar_inputs = Vec::new();
        let r = config.radar_channels();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize, stride: usize, bias: f64| -> Result<Conv> {
            let weight = params.add(format!("{name}.weight"), he_normal(&[cout, cin, k, k], cin * k * k, &mut rng))?;
            let bias = params.add(format!("{name}.bias"), Tensor::full(&[cout], T::of(bias)))?;
            Ok(Conv { weight, bias, stride })
        };

        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut prev = CAMERA_CHANNELS;
        for (i, &width) in config.block_widths.iter().enumerate() {
            let name = format!("block{}", i + 1);
            if r > 0 {
                radar_inputs.push(RadarInput {
                    weight: format!("{name}.conv1.weight"),
                    first_channel: prev,
                });
            }
            let c1 = conv(format!("{name}.conv1"), prev + r, width, 3, 1, 0.0)?;
            let c2 = conv(format!("{name}.conv2"), width, width, 3, 1, 0.0)?;
            blocks.push([c1, c2]);
            prev = width;
        }
        let f = config.fpn_channels;
        let bw = config.block_widths;
        let lateral = [
            conv("fpn.lateral3".into(), bw[2], f, 1, 1, 0.0)?,
            conv("fpn.lateral4".into(), bw[3], f, 1, 1, 0.0)?,
            conv("fpn.lateral5".into(), bw[4], f, 1, 1, 0.0)?,
        ];
        let smooth = [
            conv("fpn.smooth3".into(), f, f, 3, 1, 0.0)?,
            conv("fpn.smooth4".into(), f, f, 3, 1, 0.0)?,
            conv("fpn.smooth5".into(), f, f, 3, 1, 0.0)?,
        ];
        let p6 = conv("fpn.p6".into(), f, f, 3, 2, 0.0)?;
        let p7 = conv("fpn.p7".into(), f, f, 3, 2, 0.0)?;

        let prior_bias = -((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY).ln();
        let mut head = |name: &str, outputs: usize, out_bias: f64| -> Result<Vec<Conv>> {
            let mut layers = Vec::new();
            let mut cin = f + r;
            for j in 0..config.head_depth {
                layers.push(conv(format!("{name}.conv{}", j + 1), cin, config.head_channels, 3, 1, 0.0)?);
                cin = config.head_channels;
            }
            layers.push(conv(format!("{name}.out"), cin, outputs, 3, 1, out_bias)?);
            Ok(layers)
        };
        let class_head = head("class_head", config.class_outputs(), prior_bias)?;
        let box_head = head("box_head", config.box_outputs(), 0.0)?;
        if r > 0 {
            for name in ["class_head", "box_head"] {
                let first = if config.head_depth > 0 { format!("{name}.conv1") } else { format!("{name}.out") };
                radar_inputs.push(RadarInput {
                    weight: format!("{first}.weight"),
                    first_channel: f,
                });
            }
        }
        Ok(CrfNet {
            config,
            params,
            blocks,
            lateral,
            smooth,
            p6,
            p7,
            class_head,
            box_head,
            radar_inputs,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Weights whose trailing input channels are radar.
    pub fn radar_inputs(&self) -> &[RadarInput] {
        &self.radar_inputs
    }

    /// Scalars in the radar slices of all radar-reading convs.
    pub fn radar_weight_count(&self) -> usize {
        let r = self.config.radar_channels();
        self.radar_inputs
            .iter()
            .map(|ri| {
                let s = self.params.by_name(&ri.weight).expect("registered").value.shape();
                s[0] * r * s[2] * s[3]
            })
            .sum()
    }

    /// Sets every weight that reads a radar channel to zero.
    pub fn zero_radar_weights(&mut self) {
        let r = self.config.radar_channels();
        for ri in self.radar_inputs.clone() {
            let id = self.params.id(&ri.weight).expect("registered");
            let p = self.params.get_mut(id);
            let [cout, cin, kh, kw] = shape4(p.value.shape());
            let data = p.value.data_mut();
            for o in 0..cout {
                for c in ri.first_channel..ri.first_channel + r {
                    let start = ((o * cin) + c) * kh * kw;
                    data[start..start + kh * kw].iter_mut().for_each(|v| *v = T::zero());
                }
            }
        }
    }

    /// The camera-only network sharing this network's camera-path weights.
    pub fn image_only_counterpart(&self) -> Result<CrfNet<T>> {
        let config = NetworkConfig {
            radar: None,
            ..self.config.clone()
        };
        let r = self.config.radar_channels();
        let mut out = CrfNet::new(config, 0)?;
        for (_, p) in self.params.iter() {
            let dst_id = out.params.id(&p.name).expect("same layer names");
            let dst = &mut out.params.get_mut(dst_id).value;
            match self.radar_inputs.iter().find(|ri| ri.weight == p.name) {
                None => *dst = p.value.clone(),
                Some(ri) => {
                    let [cout, cin, kh, kw] = shape4(p.value.shape());
                    let k = kh * kw;
                    let mut data = Vec::with_capacity(cout * (cin - r) * k);
                    for o in 0..cout {
                        for c in (0..cin).filter(|c| !(ri.first_channel..ri.first_channel + r).contains(c)) {
                            let start = (o * cin + c) * k;
                            data.extend_from_slice(&p.value.data()[start..start + k]);
                        }
                    }
                    *dst = Tensor::from_vec(&[cout, cin - r, kh, kw], data)?;
                }
            }
        }
        Ok(out)
    }

    /// Splits an augmented image into NCHW camera and radar tensors.
    pub fn input_tensors(&self, aug: &AugmentedImage) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let [h, w] = self.config.input_size;
        if (aug.height, aug.width) != (h, w) {
            return Err(Error::Shape {
                what: "network input",
                expected: format!("{h}×{w}"),
                got: format!("{}×{}", aug.height, aug.width),
            });
        }
        if aug.radar != self.config.radar {
            return Err(Error::Shape {
                what: "network input channels",
                expected: format!("{:?}", self.config.radar),
                got: format!("{:?}", aug.radar),
            });
        }
        let c = aug.channels();
        let plane = h * w;
        let mut cam = vec![T::zero(); CAMERA_CHANNELS * plane];
        let r = self.config.radar_channels();
        let mut radar = vec![T::zero(); r * plane];
        for (i, px) in aug.data.chunks_exact(c).enumerate() {
            for ch in 0..CAMERA_CHANNELS {
                cam[ch * plane + i] = T::of(px[ch] as f64);
            }
            for ch in 0..r {
                radar[ch * plane + i] = T::of(px[CAMERA_CHANNELS + ch] as f64);
            }
        }
        let cam = Tensor::from_vec(&[1, CAMERA_CHANNELS, h, w], cam)?;
        let radar = if r > 0 { Some(Tensor::from_vec(&[1, r, h, w], radar)?) } else { None };
        Ok((cam, radar))
    }

    pub fn forward_augmented(&self, g: &mut Graph<T>, aug: &AugmentedImage) -> Result<Vec<LevelOutput>> {
        let (cam, radar) = self.input_tensors(aug)?;
        self.forward(g, cam, radar)
    }

    /// Records the forward pass on `g`. `camera` is 1×3×H×W, `radar`
    /// 1×R×H×W, both in augmented-image units.
    pub fn forward(&self, g: &mut Graph<T>, camera: Tensor<T>, radar: Option<Tensor<T>>) -> Result<Vec<LevelOutput>> {
        let [h, w] = self.config.input_size;
        let r = self.config.radar_channels();
        let expect = |t: &Tensor<T>, c: usize, what: &'static str| -> Result<()> {
            if t.shape() != [1, c, h, w] {
                return Err(Error::Shape {
                    what,
                    expected: format!("{:?}", [1, c, h, w]),
                    got: format!("{:?}", t.shape()),
                });
            }
            Ok(())
        };
        expect(&camera, CAMERA_CHANNELS, "camera tensor")?;
        match (&radar, &self.config.radar) {
            (Some(t), Some(_)) => expect(t, r, "radar tensor")?,
            (None, None) => {}
            _ => {
                return Err(Error::Shape {
                    what: "radar tensor",
                    expected: format!("{r} radar channels"),
                    got: format!("{} radar channels", radar.as_ref().map_or(0, |t| t.shape()[1])),
                })
            }
        }

        let cam = g.input(camera)?;
        let cam = g.scale_channels(cam, &[T::of(1.0 / CAMERA_HALF_RANGE as f64); CAMERA_CHANNELS])?;
        let pyramid = match (radar, &self.config.radar) {
            (Some(t), Some(spec)) => {
                let node = g.input(t)?;
                let scales: Vec<T> = spec.channels().iter().map(|&c| T::of(input_scale(c))).collect();
                let scaled = g.scale_channels(node, &scales)?;
                Some(build_radar_pyramid(g, scaled, RADAR_LEVELS)?)
            }
            _ => None,
        };
        let fuse = |g: &mut Graph<T>, x: NodeId, level: usize| -> Result<NodeId> {
            Ok(match &pyramid {
                Some(p) => g.concat_channels(x, p[level])?,
                None => x,
            })
        };

        let mut x = cam;
        let mut c = Vec::with_capacity(NUM_BLOCKS);
        for (i, [c1, c2]) in self.blocks.iter().enumerate() {
            let input = if i == 0 { fuse(g, x, 0)? } else { fuse(g, x, i)? };
            let y = self.conv(g, input, c1)?;
            let y = g.relu(y)?;
            let y = self.conv(g, y, c2)?;
            let y = g.relu(y)?;
            x = g.maxpool2d(y)?;
            c.push(x);
        }

        let l5 = self.conv(g, c[4], &self.lateral[2])?;
        let l4 = self.conv(g, c[3], &self.lateral[1])?;
        let (h4, w4) = self.config.level_size(4);
        let up5 = g.upsample_nearest_to(l5, h4, w4)?;
        let l4 = g.add(l4, up5)?;
        let l3 = self.conv(g, c[2], &self.lateral[0])?;
        let (h3, w3) = self.config.level_size(3);
        let up4 = g.upsample_nearest_to(l4, h3, w3)?;
        let l3 = g.add(l3, up4)?;
        let p3 = self.conv(g, l3, &self.smooth[0])?;
        let p4 = self.conv(g, l4, &self.smooth[1])?;
        let p5 = self.conv(g, l5, &self.smooth[2])?;
        let p6 = self.conv(g, p5, &self.p6)?;
        let p6r = g.relu(p6)?;
        let p7 = self.conv(g, p6r, &self.p7)?;

        let mut out = Vec::with_capacity(HEAD_LEVELS.len());
        for (level, p) in HEAD_LEVELS.into_iter().zip([p3, p4, p5, p6, p7]) {
            let feature = fuse(g, p, level)?;
            let class = self.head(g, feature, &self.class_head)?;
            let boxes = self.head(g, feature, &self.box_head)?;
            let s = g.shape(class);
            out.push(LevelOutput {
                level,
                class,
                boxes,
                height: s[2],
                width: s[3],
            });
        }
        Ok(out)
    }

    fn conv(&self, g: &mut Graph<T>, x: NodeId, c: &Conv) -> Result<NodeId> {
        let w = g.param(&self.params, c.weight)?;
        let b = g.param(&self.params, c.bias)?;
        Ok(g.conv2d(x, w, Some(b), c.stride, Padding::Same)?)
    }

    fn head(&self, g: &mut Graph<T>, x: NodeId, layers: &[Conv]) -> Result<NodeId> {
        let mut y = x;
        let (last, hidden) = layers.split_last().expect("head has an output conv");
        for c in hidden {
            y = self.conv(g, y, c)?;
            y = g.relu(y)?;
        }
        self.conv(g, y, last)
    }

    /// Writes `<path>` (parameters) and `<path>.json` (network config).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.params.write_checkpoint(BufWriter::new(file)).map_err(|e| match e {
            crfnet_nn::NnError::Io(io) => Error::io(path, io),
            other => other.into(),
        })?;
        let cfg = config_path(path);
        let text = serde_json::to_string_pretty(&self.config).map_err(|e| Error::json(&cfg, e))?;
        fs::write(&cfg, text).map_err(|e| Error::io(&cfg, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = config_path(path);
        let text = fs::read_to_string(&cfg).map_err(|e| Error::io(&cfg, e))?;
        let config: NetworkConfig = serde_json::from_str(&text).map_err(|e| Error::json(&cfg, e))?;
        let mut net = CrfNet::new(config, 0)?;
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        net.params.read_checkpoint(BufReader::new(file)).map_err(|e| match e {
            crfnet_nn::NnError::Io(io) => Error::io(path, io),
            other => other.into(),
        })?;
        Ok(net)
    }

    pub fn cast<U: Real>(&self) -> CrfNet<U> {
        CrfNet {
            config: self.config.clone(),
            params: self.params.cast(),
            blocks: self.blocks.clone(),
            lateral: self.lateral,
            smooth: self.smooth,
            p6: self.p6,
            p7: self.p7,
            class_head: self.class_head.clone(),
            box_head: self.box_head.clone(),
            radar_inputs: self.radar_inputs.clone(),
        }
    }
}

pub fn config_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn shape4(s: &[usize]) -> [usize; 4] {
    [s[0], s[1], s[2], s[3]]
}

/// Repeated 2×2 max pooling: level k is the input reduced by 2^k.
pub fn build_radar_pyramid<T: Real>(g: &mut Graph<T>, radar: NodeId, levels: usize) -> Result<Vec<NodeId>> {
    let mut out = vec![radar];
    for _ in 1..levels {
        let next = g.maxpool2d(*out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}

/// Radar pyramid of an H×W×R stack as 1×R×h×w tensors.
pub fn radar_pyramid(stack: &crate::radar::RadarStack) -> Result<Vec<Tensor<f32>>> {
    let (h, w, r) = (stack.height, stack.width, stack.spec.len());
    let mut nchw = vec![0.0f32; r * h * w];
    for (i, px) in stack.data.chunks_exact(r).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            nchw[c * h * w + i] = v;
        }
    }
    let mut g = Graph::inference();
    let x = g.input(Tensor::from_vec(&[1, r, h, w], nchw)?)?;
    let levels = build_radar_pyramid(&mut g, x, RADAR_LEVELS)?;
    Ok(levels.into_iter().map(|id| g.value(id).clone()).collect())
}

/// Corner form (x1, y1, x2, y2).
pub type Rect = [f64; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorLevel {
    pub level: usize,
    pub stride: f64,
    pub height: usize,
    pub width: usize,
    pub base_size: f64,
    /// Index of the level's first anchor in [`AnchorSet::boxes`].
    pub offset: usize,
}

/// All anchors, ordered by level, then row, then column, then the 9 shapes
/// (ratio-major, scale-minor).
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub levels: Vec<AnchorLevel>,
    pub boxes: Vec<Rect>,
}

impl AnchorSet {
    pub fn new(config: &NetworkConfig) -> Self {
        let mut levels = Vec::new();
        let mut boxes = Vec::new();
        for (i, level) in HEAD_LEVELS.into_iter().enumerate() {
            let (h, w) = config.level_size(level);
            let stride = (1usize << level) as f64;
            let base = BASE_ANCHOR_SIZE * (1usize << i) as f64;
            levels.push(AnchorLevel {
                level,
                stride,
                height: h,
                width: w,
                base_size: base * config.anchor_scale_factor,
                offset: boxes.len(),
            });
            let shapes = anchor_shapes(base, config.anchor_scale_factor);
            for y in 0..h {
                for x in 0..w {
                    let (cx, cy) = ((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
                    for (aw, ah) in shapes {
                        boxes.push([cx - aw / 2.0, cy - ah / 2.0, cx + aw / 2.0, cy + ah / 2.0]);
                    }
                }
            }
        }
        AnchorSet { levels, boxes }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// (width, height) of the 9 anchor shapes: ratio h/w in {0.5, 1, 2}, each at
/// three scales. The scale factor is applied last so that halving is exact.
pub fn anchor_shapes(base: f64, factor: f64) -> [(f64, f64); ANCHORS_PER_LOCATION] {
    let mut out = [(0.0, 0.0); ANCHORS_PER_LOCATION];
    for (ri, ratio) in ANCHOR_RATIOS.iter().enumerate() {
        for (si, scale) in anchor_scales().iter().enumerate() {
            let area = (base * scale).powi(2);
            let w = (area / ratio).sqrt();
            let h = w * ratio;
            out[ri * 3 + si] = (w * factor, h * factor);
        }
    }
    out
}

/// Regression target of `gt` relative to `anchor`, in units of [`DELTA_STD`].
pub fn encode_deltas(anchor: &Rect, gt: &Rect) -> [f64; 4] {
    let (aw, ah) = (anchor[2] - anchor[0], anchor[3] - anchor[1]);
    let (ax, ay) = (anchor[0] + aw / 2.0, anchor[1] + ah / 2.0);
    let (gw, gh) = (gt[2] - gt[0], gt[3] - gt[1]);
    let (gx, gy) = (gt[0] + gw / 2.0, gt[1] + gh / 2.0);
    [
        (gx - ax) / aw / DELTA_STD[0],
        (gy - ay) / ah / DELTA_STD[1],
        (gw / aw).ln() / DELTA_STD[2],
        (gh / ah).ln() / DELTA_STD[3],
    ]
}

pub fn decode_deltas(anchor: &Rect, d: &[f64; 4]) -> Rect {
    let (aw, ah) = (anchor[2] - anchor[0], anchor[3] - anchor[1]);
    let (ax, ay) = (anchor[0] + aw / 2.0, anchor[1] + ah / 2.0);
    let x = ax + d[0] * DELTA_STD[0] * aw;
    let y = ay + d[1] * DELTA_STD[1] * ah;
    let w = aw * (d[2] * DELTA_STD[2]).min(MAX_LOG_SCALE).exp();
    let h = ah * (d[3] * DELTA_STD[3]).min(MAX_LOG_SCALE).exp();
    [x - w / 2.0, y - h / 2.0, x + w / 2.0, y + h / 2.0]
}

/// Channel of class `c` of anchor shape `a` in the class head output.
pub fn class_channel(a: usize, c: usize) -> usize {
    a * NUM_CLASSES + c
}

/// Channel of delta `j` of anchor shape `a` in the box head output.
pub fn box_channel(a: usize, j: usize) -> usize {
    a * 4 + j
}

/// Head values flattened to anchor order: logits `[anchor][class]` and
/// deltas `[anchor][4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatOutputs {
    pub logits: Vec<f64>,
    pub deltas: Vec<f64>,
}

pub fn flatten_outputs<T: Real>(g: &Graph<T>, levels: &[LevelOutput]) -> FlatOutputs {
    let mut logits = Vec::new();
    let mut deltas = Vec::new();
    for l in levels {
        let (cv, bv) = (g.value(l.class).data(), g.value(l.boxes).data());
        let plane = l.height * l.width;
        for p in 0..plane {
            for a in 0..ANCHORS_PER_LOCATION {
                logits.extend((0..NUM_CLASSES).map(|c| cv[class_channel(a, c) * plane + p].as_f64()));
                deltas.extend((0..4).map(|j| bv[box_channel(a, j) * plane + p].as_f64()));
            }
        }
    }
    FlatOutputs { logits, deltas }
}

/// Scatters per-anchor gradients back to the head tensors' layout.
pub fn unflatten_gradients<T: Real>(levels: &[LevelOutput], d_logits: &[f64], d_deltas: &[f64]) -> Vec<(Vec<T>, Vec<T>)> {
    let mut out = Vec::with_capacity(levels.len());
    let mut anchor = 0;
    for l in levels {
        let plane = l.height * l.width;
        let mut gc = vec![T::zero(); ANCHORS_PER_LOCATION * NUM_CLASSES * plane];
        let mut gb = vec![T::zero(); ANCHORS_PER_LOCATION * 4 * plane];
        for p in 0..plane {
            for a in 0..ANCHORS_PER_LOCATION {
                for c in 0..NUM_CLASSES {
                    gc[class_channel(a, c) * plane + p] = T::of(d_logits[anchor * NUM_CLASSES + c]);
                }
                for j in 0..4 {
                    gb[box_channel(a, j) * plane + p] = T::of(d_deltas[anchor * 4 + j]);
                }
                anchor += 1;
            }
        }
        out.push((gc, gb));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            score_threshold: 0.05,
            nms_threshold: 0.5,
            max_detections: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box2D,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
}

/// Decodes all anchors, keeps scores above the threshold, runs per-class
/// greedy NMS and returns the best `max_detections` by score. Boxes are
/// clipped to the `(H, W)` image.
pub fn decode_and_nms(flat: &FlatOutputs, anchors: &AnchorSet, image_size: [usize; 2], cfg: &InferenceConfig) -> DetectionSet {
    let [h, w] = image_size.map(|v| v as f64);
    let mut per_class: Vec<Vec<Detection>> = vec![Vec::new(); NUM_CLASSES];
    for (i, anchor) in anchors.boxes.iter().enumerate() {
        let mut decoded = None;
        for c in 0..NUM_CLASSES {
            let score = crfnet_nn::sigmoid(flat.logits[i * NUM_CLASSES + c]);
            if score <= cfg.score_threshold {
                continue;
            }
            let r = *decoded.get_or_insert_with(|| {
                let d = [0, 1, 2, 3].map(|j| flat.deltas[i * 4 + j]);
                let r = decode_deltas(anchor, &d);
                [r[0].clamp(0.0, w), r[1].clamp(0.0, h), r[2].clamp(0.0, w), r[3].clamp(0.0, h)]
            });
            let bbox = Box2D::new(r[0], r[1], r[2], r[3], ObjectClass::from_index(c).expect("class index"));
            if bbox.is_valid() {
                per_class[c].push(Detection { bbox, score });
            }
        }
    }
    let mut kept = Vec::new();
    for dets in per_class {
        kept.extend(nms(dets, cfg.nms_threshold));
    }
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    kept.truncate(cfg.max_detections);
    DetectionSet { detections: kept }
}

/// Greedy non-maximum suppression within one class. Equal scores keep
/// their input order.
pub fn nms(mut dets: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Runs the network on one augmented image and decodes its detections.
pub fn detect(net: &CrfNet<f32>, aug: &AugmentedImage, anchors: &AnchorSet, cfg: &InferenceConfig) -> Result<DetectionSet> {
    let mut g = Graph::inference();
    let levels = net.forward_augmented(&mut g, aug)?;
    let flat = flatten_outputs(&g, &levels);
    Ok(decode_and_nms(&flat, anchors, net.config().input_size, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        NetworkConfig {
            input_size: [20, 36],
            block_widths: [2, 3, 4, 4, 4],
            fpn_channels: 3,
            head_channels: 3,
            head_depth: 1,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn level_shapes_for_reference_input() {
        let cfg = NetworkConfig {
            input_size: [360, 640],
            ..NetworkConfig::default()
        };
        assert_eq!(cfg.level_size(3), (45, 80));
        assert_eq!(cfg.level_size(7), (3, 5));
        let cfg = NetworkConfig {
            input_size: [720, 1280],
            ..NetworkConfig::default()
        };
        assert_eq!(cfg.level_size(3), (90, 160));
        assert_eq!(cfg.level_size(7), (6, 10));
    }

    #[test]
    fn head_output_channels() {
        let cfg = NetworkConfig::default();
        assert_eq!(cfg.class_outputs(), 63);
        assert_eq!(cfg.box_outputs(), 36);
    }

    #[test]
    fn forward_shapes_match_anchor_grid() {
        let net = CrfNet::<f32>::new(small(), 1).unwrap();
        let mut g = Graph::inference();
        let cam = Tensor::zeros(&[1, 3, 20, 36]);
        let radar = Some(Tensor::zeros(&[1, 2, 20, 36]));
        let out = net.forward(&mut g, cam, radar).unwrap();
        let anchors = AnchorSet::new(net.config());
        for (l, a) in out.iter().zip(&anchors.levels) {
            assert_eq!(g.shape(l.class), &[1, 63, a.height, a.width]);
            assert_eq!(g.shape(l.boxes), &[1, 36, a.height, a.width]);
        }
        let sizes: Vec<_> = out.iter().map(|l| (l.height, l.width)).collect();
        assert_eq!(sizes, vec![(3, 5), (2, 3), (1, 2), (1, 1), (1, 1)]);
        let total: usize = anchors.levels.iter().map(|a| a.height * a.width * 9).sum();
        assert_eq!(anchors.len(), total);
    }

    #[test]
    fn wrong_input_is_rejected() {
        let net = CrfNet::<f32>::new(small(), 1).unwrap();
        let mut g = Graph::inference();
        assert!(net.forward(&mut g, Tensor::zeros(&[1, 3, 20, 36]), None).is_err());
        assert!(net.forward(&mut g, Tensor::zeros(&[1, 3, 22, 36]), Some(Tensor::zeros(&[1, 2, 22, 36]))).is_err());
    }

    #[test]
    fn zero_deltas_decode_to_anchor() {
        let a = [10.0, 20.0, 42.0, 36.0];
        let d = decode_deltas(&a, &[0.0; 4]);
        assert_eq!(d, a);
        let gt = [12.0, 18.0, 50.0, 40.0];
        let back = decode_deltas(&a, &encode_deltas(&a, &gt));
        for k in 0..4 {
            assert!((back[k] - gt[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn anchor_geometry() {
        let shapes = anchor_shapes(32.0, 1.0);
        // ratio 1, scale 1 is a 32×32 square
        assert!((shapes[3].0 - 32.0).abs() < 1e-12 && (shapes[3].1 - 32.0).abs() < 1e-12);
        // ratio 2 is twice as tall as wide
        assert!((shapes[6].1 / shapes[6].0 - 2.0).abs() < 1e-12);
        let half = anchor_shapes(32.0, 0.5);
        for (f, h) in shapes.iter().zip(half) {
            assert_eq!(f.0 * 0.5, h.0);
            assert_eq!(f.1 * 0.5, h.1);
        }
        let set = AnchorSet::new(&NetworkConfig::default());
        let first = set.boxes[3];
        assert_eq!([(first[0] + first[2]) / 2.0, (first[1] + first[3]) / 2.0], [4.0, 4.0]);
    }

    #[test]
    fn low_logits_give_no_detections() {
        let cfg = small();
        let anchors = AnchorSet::new(&cfg);
        let flat = FlatOutputs {
            logits: vec![-10.0; anchors.len() * NUM_CLASSES],
            deltas: vec![0.0; anchors.len() * 4],
        };
        assert!(decode_and_nms(&flat, &anchors, cfg.input_size, &InferenceConfig::default()).detections.is_empty());
    }

    #[test]
    fn nms_keeps_the_stronger_duplicate() {
        let b = Box2D::new(0.0, 0.0, 10.0, 10.0, ObjectClass::Car);
        let out = nms(
            vec![Detection { bbox: b, score: 0.8 }, Detection { bbox: b, score: 0.9 }],
            0.5,
        );
        assert_eq!(out, vec![Detection { bbox: b, score: 0.9 }]);
    }

    #[test]
    fn flatten_roundtrip() {
        let net = CrfNet::<f64>::new(small(), 3).unwrap();
        let mut g = Graph::inference();
        let out = net.forward(&mut g, Tensor::full(&[1, 3, 20, 36], 10.0), Some(Tensor::full(&[1, 2, 20, 36], 5.0))).unwrap();
        let flat = flatten_outputs(&g, &out);
        let back = unflatten_gradients::<f64>(&out, &flat.logits, &flat.deltas);
        for (l, (c, b)) in out.iter().zip(back) {
            assert_eq!(g.value(l.class).data(), c.as_slice());
            assert_eq!(g.value(l.boxes).data(), b.as_slice());
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = CrfNet::<f32>::new(small(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        net.save(&path).unwrap();
        let back = CrfNet::<f32>::load(&path).unwrap();
        assert_eq!(back.config(), net.config());
        for ((_, a), (_, b)) in net.params().iter().zip(back.params().iter()) {
            assert_eq!(a.value, b.value);
        }
        assert!(CrfNet::<f32>::load(&dir.path().join("missing.ckpt")).is_err());
    }
}
