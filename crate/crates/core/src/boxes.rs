use serde::{Deserialize, Serialize};

use crate::class::ObjectClass;
use crate::geometry::Point3;

/// Ground-truth cuboid in the vehicle frame. `size` is (length, width,
/// height) along the box's own x, y, z axes; `yaw` rotates the box about +z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    #[serde(with = "point_array")]
    pub center: Point3,
    pub size: [f64; 3],
    pub yaw: f64,
    #[serde(rename = "class")]
    pub class_label: ObjectClass,
}

impl Box3D {
    pub fn is_valid(&self) -> bool {
        self.size.iter().all(|&s| s > 0.0 && s.is_finite())
            && self.center.coords.iter().all(|v| v.is_finite())
            && self.yaw.is_finite()
    }

    /// `p` expressed in the box frame (origin at the centre, axes along the box).
    pub fn to_local(&self, p: &Point3) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let d = p - self.center;
        [c * d.x + s * d.y, -s * d.x + c * d.y, d.z]
    }

    pub fn corners(&self) -> [Point3; 8] {
        let (s, c) = self.yaw.sin_cos();
        let [l, w, h] = self.size.map(|v| v / 2.0);
        let mut out = [Point3::origin(); 8];
        let mut i = 0;
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    let (lx, ly) = (sx * l, sy * w);
                    out[i] = Point3::new(
                        self.center.x + c * lx - s * ly,
                        self.center.y + s * lx + c * ly,
                        self.center.z + sz * h,
                    );
                    i += 1;
                }
            }
        }
        out
    }
}

/// Axis-aligned image-plane box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    #[serde(rename = "class")]
    pub class_label: ObjectClass,
}

impl Box2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, class_label: ObjectClass) -> Self {
        Box2D {
            x_min,
            y_min,
            x_max,
            y_max,
            class_label,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn intersection_area(&self, other: &Box2D) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        w.max(0.0) * h.max(0.0)
    }

    /// Mirror about the vertical image axis of an image `width` pixels wide.
    pub fn flipped(&self, width: f64) -> Box2D {
        Box2D {
            x_min: width - self.x_max,
            x_max: width - self.x_min,
            ..*self
        }
    }
}

pub(crate) mod point_array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::geometry::Point3;

    pub fn serialize<S: Serializer>(p: &Point3, s: S) -> Result<S::Ok, S::Error> {
        [p.x, p.y, p.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Point3, D::Error> {
        let [x, y, z] = <[f64; 3]>::deserialize(d)?;
        Ok(Point3::new(x, y, z))
    }
}
