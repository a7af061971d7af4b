//! Overlays for inspection: radar pillars coloured by distance and
//! detection boxes with class and score labels.

use image::{Rgb, RgbImage};

use crate::class::ObjectClass;
use crate::crf_net::Detection;
use crate::dataset::Scene;
use crate::filters::ground_truth_radar_filter;
use crate::radar::{rasterize_pillars, ChannelSpec, RadarChannel, RadarStack, DEFAULT_CYCLES, PILLAR_HEIGHT_M};
use crate::training::Filters;

/// Distance at which the overlay colour reaches pure red, metres.
pub const OVERLAY_MAX_DISTANCE: f64 = 50.0;

/// Yellow for the nearest returns shifting to red with distance.
pub fn distance_color(distance: f64) -> Rgb<u8> {
    let t = (distance / OVERLAY_MAX_DISTANCE).clamp(0.0, 1.0);
    Rgb([255, (255.0 * (1.0 - t)).round() as u8, 0])
}

/// Paints every occupied radar pixel over `image`. Without a distance
/// channel pixels are drawn yellow.
pub fn radar_overlay(image: &RgbImage, stack: &RadarStack) -> RgbImage {
    let mut out = image.clone();
    let dist = stack.spec.channels().iter().position(|&c| c == RadarChannel::Distance);
    for row in 0..stack.height {
        for col in 0..stack.width {
            if stack.is_occupied(row, col) {
                let d = dist.map_or(0.0, |k| stack.at(row, col)[k] as f64);
                out.put_pixel(col as u32, row as u32, distance_color(d));
            }
        }
    }
    out
}

/// Camera image with the accumulated radar projected on top; with
/// `Filters::AfGrf` only points inside ground-truth boxes are shown.
pub fn visualize_scene(scene: &Scene, filters: Filters) -> RgbImage {
    let mut points = scene.accumulated_points(DEFAULT_CYCLES);
    if filters == Filters::AfGrf {
        points = ground_truth_radar_filter(&points, &scene.boxes);
    }
    let spec = ChannelSpec::new(vec![RadarChannel::Distance]).expect("single channel");
    let stack = rasterize_pillars(&points, &scene.camera, scene.image_size(), &spec, PILLAR_HEIGHT_M, 1);
    radar_overlay(&scene.image, &stack)
}

pub fn class_color(class: ObjectClass) -> Rgb<u8> {
    match class {
        ObjectClass::Car => Rgb([0, 255, 255]),
        ObjectClass::Bus => Rgb([255, 128, 0]),
        ObjectClass::Motorcycle => Rgb([255, 0, 255]),
        ObjectClass::Truck => Rgb([0, 255, 0]),
        ObjectClass::Trailer => Rgb([128, 128, 255]),
        ObjectClass::Bicycle => Rgb([255, 255, 0]),
        ObjectClass::Human => Rgb([255, 255, 255]),
    }
}

/// Box outlines with a `class score` label above each box.
pub fn draw_detections(image: &RgbImage, detections: &[Detection]) -> RgbImage {
    let mut out = image.clone();
    for d in detections {
        let color = class_color(d.bbox.class_label);
        let (w, h) = (out.width() as i64, out.height() as i64);
        let x0 = (d.bbox.x_min.floor() as i64).clamp(0, w - 1);
        let x1 = (d.bbox.x_max.ceil() as i64 - 1).clamp(0, w - 1);
        let y0 = (d.bbox.y_min.floor() as i64).clamp(0, h - 1);
        let y1 = (d.bbox.y_max.ceil() as i64 - 1).clamp(0, h - 1);
        for x in x0..=x1 {
            out.put_pixel(x as u32, y0 as u32, color);
            out.put_pixel(x as u32, y1 as u32, color);
        }
        for y in y0..=y1 {
            out.put_pixel(x0 as u32, y as u32, color);
            out.put_pixel(x1 as u32, y as u32, color);
        }
        let label = format!("{} {:.2}", d.bbox.class_label.name(), d.score);
        let ty = if y0 > GLYPH_H as i64 { y0 - GLYPH_H as i64 - 1 } else { y1 + 2 };
        draw_text(&mut out, x0, ty, &label, color);
    }
    out
}

/// `left` and `right` next to each other, separated by a dark gap.
pub fn side_by_side(left: &RgbImage, right: &RgbImage) -> RgbImage {
    const GAP: u32 = 4;
    let h = left.height().max(right.height());
    let mut out = RgbImage::from_pixel(left.width() + GAP + right.width(), h, Rgb([0, 0, 0]));
    image::imageops::replace(&mut out, left, 0, 0);
    image::imageops::replace(&mut out, right, (left.width() + GAP) as i64, 0);
    out
}

const GLYPH_W: u32 = 3;
const GLYPH_H: u32 = 5;

/// 3×5 bitmap rows, most significant of the low three bits is the left column.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        'a' => [0, 7, 1, 7, 7],
        'b' => [4, 4, 7, 5, 7],
        'c' => [0, 7, 4, 4, 7],
        'e' => [0, 7, 7, 4, 7],
        'h' => [4, 4, 7, 5, 5],
        'i' => [2, 0, 2, 2, 2],
        'k' => [4, 5, 6, 5, 5],
        'l' => [6, 2, 2, 2, 7],
        'm' => [0, 7, 7, 5, 5],
        'n' => [0, 6, 5, 5, 5],
        'o' => [0, 7, 5, 5, 7],
        'r' => [0, 7, 4, 4, 4],
        's' => [0, 7, 6, 1, 7],
        't' => [4, 7, 4, 4, 3],
        'u' => [0, 5, 5, 5, 7],
        'y' => [5, 5, 7, 1, 7],
        _ => [0; 5],
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    for (i, c) in text.chars().enumerate() {
        let gx = x + i as i64 * (GLYPH_W as i64 + 1);
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                    let (px, py) = (gx + col as i64, y + row as i64);
                    if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                        img.put_pixel(px as u32, py as u32, color);
                    }
                }
            }
        }
    }
}
