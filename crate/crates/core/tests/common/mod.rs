#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crfnet::crf_net::NetworkConfig;
use crfnet::radar::{AugmentedImage, ChannelSpec};
use crfnet::{Box2D, ObjectClass};

pub fn micro_config(radar: Option<ChannelSpec>) -> NetworkConfig {
    NetworkConfig {
        input_size: [32, 48],
        radar,
        block_widths: [3, 4, 4, 5, 5],
        fpn_channels: 4,
        head_channels: 4,
        head_depth: 1,
        anchor_scale_factor: 0.5,
        ..NetworkConfig::default()
    }
}

/// Camera values uniform on the scaled interval and radar values typical
/// of encoded distance/RCS, with about a third of the radar pixels empty.
pub fn random_input(h: usize, w: usize, radar: Option<ChannelSpec>, rng: &mut ChaCha8Rng) -> AugmentedImage {
    let r = radar.as_ref().map_or(0, ChannelSpec::len);
    let mut data = Vec::with_capacity(h * w * (3 + r));
    for _ in 0..h * w {
        for _ in 0..3 {
            data.push(rng.random_range(-127.5f32..127.5));
        }
        let hit = rng.random_bool(0.66);
        for _ in 0..r {
            data.push(if hit { rng.random_range(1.0f32..60.0) } else { 0.0 });
        }
    }
    AugmentedImage {
        height: h,
        width: w,
        radar,
        scene_id: "random".into(),
        data,
    }
}

/// Radar-free input: random camera, all radar channels zero.
pub fn radar_free(h: usize, w: usize, radar: Option<ChannelSpec>, rng: &mut ChaCha8Rng) -> AugmentedImage {
    let mut aug = random_input(h, w, radar, rng);
    let c = aug.channels();
    for px in aug.data.chunks_exact_mut(c) {
        px[3..].iter_mut().for_each(|v| *v = 0.0);
    }
    aug
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn boxes(spec: &[(f64, f64, f64, f64, ObjectClass)]) -> Vec<Box2D> {
    spec.iter().map(|&(a, b, c, d, k)| Box2D::new(a, b, c, d, k)).collect()
}
