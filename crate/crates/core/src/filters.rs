//! Ground-truth based cleaning of labels and radar points, and the 3D→2D
//! box projection used to build image-plane targets.
//!
//! Boxes are closed: a point on a face counts as inside.

use crate::boxes::{Box2D, Box3D};
use crate::geometry::{Camera, Point3};
use crate::radar::AccumulatedPoint;

pub fn point_in_box3d(p: &Point3, b: &Box3D) -> bool {
    let local = b.to_local(p);
    local.iter().zip(b.size).all(|(v, s)| v.abs() <= s / 2.0)
}

/// Annotation filter: keeps the boxes that contain at least one radar point.
pub fn annotation_filter(boxes: &[Box3D], points: &[AccumulatedPoint]) -> Vec<Box3D> {
    boxes
        .iter()
        .filter(|b| points.iter().any(|p| point_in_box3d(&p.position, b)))
        .cloned()
        .collect()
}

/// Ground-truth radar filter: keeps the radar points lying inside at least one box.
pub fn ground_truth_radar_filter(points: &[AccumulatedPoint], boxes: &[Box3D]) -> Vec<AccumulatedPoint> {
    points
        .iter()
        .filter(|p| boxes.iter().any(|b| point_in_box3d(&p.position, b)))
        .cloned()
        .collect()
}

/// Projects the eight corners and returns the hull of the visible ones,
/// clipped to the image. `None` when nothing projects or the clipped hull
/// is degenerate.
pub fn project_box3d_to_2d(b: &Box3D, cam: &Camera) -> Option<Box2D> {
    let (w, h) = (cam.width() as f64, cam.height() as f64);
    let mut hull: Option<(f64, f64, f64, f64)> = None;
    for c in b.corners() {
        if let Ok(px) = cam.project(&c) {
            hull = Some(match hull {
                None => (px.u, px.v, px.u, px.v),
                Some((x0, y0, x1, y1)) => (x0.min(px.u), y0.min(px.v), x1.max(px.u), y1.max(px.v)),
            });
        }
    }
    let (x0, y0, x1, y1) = hull?;
    let clipped = Box2D::new(x0.clamp(0.0, w), y0.clamp(0.0, h), x1.clamp(0.0, w), y1.clamp(0.0, h), b.class_label);
    clipped.is_valid().then_some(clipped)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use super::*;
    use crate::class::ObjectClass;
    use crate::geometry::{forward_camera_extrinsic, PinholeCamera, Pose};

    fn bx(center: [f64; 3], size: [f64; 3], yaw: f64) -> Box3D {
        Box3D {
            center: Point3::from(center),
            size,
            yaw,
            class_label: ObjectClass::Car,
        }
    }

    fn pt(x: f64, y: f64, z: f64) -> AccumulatedPoint {
        AccumulatedPoint {
            position: Point3::new(x, y, z),
            rcs: 5.0,
            distance: x.hypot(y),
        }
    }

    #[test]
    fn point_in_box_examples() {
        let b = bx([10.0, 2.0, 0.75], [4.0, 2.0, 1.5], 0.0);
        assert!(point_in_box3d(&b.center, &b));
        assert!(point_in_box3d(&Point3::new(12.0, 2.0, 0.75), &b));
        let r = bx([0.0, 0.0, 0.0], [4.0, 2.0, 2.0], FRAC_PI_2);
        assert!(point_in_box3d(&Point3::new(0.9, 1.9, 0.0), &r));
        assert!(!point_in_box3d(&Point3::new(1.9, 0.9, 0.0), &r));
    }

    #[test]
    fn filter_examples() {
        let a = bx([10.0, 0.0, 0.75], [4.0, 2.0, 1.5], 0.0);
        let b = bx([20.0, 5.0, 0.75], [4.0, 2.0, 1.5], 0.0);
        assert!(annotation_filter(&[a.clone(), b.clone()], &[]).is_empty());
        assert_eq!(annotation_filter(&[a.clone(), b.clone()], &[pt(10.5, 0.2, 0.0)]), vec![a.clone()]);

        assert!(ground_truth_radar_filter(&[pt(10.0, 0.0, 0.0)], &[]).is_empty());
        let inside = pt(11.9, 0.0, 0.0);
        let outside = pt(12.1, 0.0, 0.0);
        let kept = ground_truth_radar_filter(&[inside.clone(), outside], &[a]);
        assert_eq!(kept, vec![inside]);
    }

    fn camera() -> Camera {
        PinholeCamera::new(100.0, 100.0, 80.0, 48.0, 160, 96, forward_camera_extrinsic(1.5))
            .unwrap()
            .into()
    }

    #[test]
    fn projection_behind_camera_is_not_visible() {
        let b = bx([-10.0, 0.0, 0.75], [4.0, 2.0, 1.5], 0.0);
        assert_eq!(project_box3d_to_2d(&b, &camera()), None);
    }

    #[test]
    fn centred_box_projects_symmetrically() {
        let b = bx([12.0, 0.0, 0.75], [4.0, 2.0, 1.5], 0.0);
        let p = project_box3d_to_2d(&b, &camera()).unwrap();
        // oracle: hand projection of the nearest face at x = 10
        assert!((p.x_min - (80.0 - 100.0 * 1.0 / 10.0)).abs() < 1e-9);
        assert!((p.x_max - (80.0 + 100.0 * 1.0 / 10.0)).abs() < 1e-9);
        assert!(((p.x_min + p.x_max) / 2.0 - 80.0).abs() < 1e-9);
        assert!((p.y_max - (48.0 + 100.0 * 1.5 / 10.0)).abs() < 1e-9);
    }

    #[test]
    fn box_across_left_edge_is_clipped() {
        // camera x = -vehicle y, so a large +y offset moves the box left
        let b = bx([10.0, 9.0, 0.75], [4.0, 2.0, 1.5], 0.0);
        let p = project_box3d_to_2d(&b, &camera()).unwrap();
        assert_eq!(p.x_min, 0.0);
        assert!(p.x_max > 0.0 && p.x_max < 80.0);
    }

    #[test]
    fn fully_outside_image_is_not_visible() {
        let b = bx([10.0, 40.0, 0.75], [4.0, 2.0, 1.5], 0.0);
        assert_eq!(project_box3d_to_2d(&b, &camera()), None);
        let _ = Pose::identity();
    }
}
