use nalgebra::Point3;

use crfnet::dataset::{count_classes, generate_dataset, load_scenes, write_dataset, SynthConfig};
use crfnet::filters::{annotation_filter, ground_truth_radar_filter, project_box3d_to_2d};
use crfnet::radar::{rasterize_pillars, ChannelSpec, DEFAULT_CYCLES, PILLAR_HEIGHT_M};
use crfnet::Box3D;

/// The box stretched vertically so it also encloses a pillar standing on
/// the ground inside its footprint.
fn pillar_hull(b: &Box3D) -> Box3D {
    let bottom = (b.center.z - b.size[2] / 2.0).min(0.0);
    let top = (b.center.z + b.size[2] / 2.0).max(PILLAR_HEIGHT_M);
    Box3D {
        center: Point3::new(b.center.x, b.center.y, (bottom + top) / 2.0),
        size: [b.size[0], b.size[1], top - bottom],
        ..b.clone()
    }
}

#[test]
fn clutter_free_radar_stays_inside_projected_objects() {
    let cfg = SynthConfig {
        clutter_rate: 0.0,
        ego_speed_range: [0.0, 0.0],
        ..SynthConfig::default()
    };
    let (scenes, _) = generate_dataset(&cfg, 30, 12).unwrap();
    let mut occupied = 0;
    for s in &scenes {
        let points = s.accumulated_points(DEFAULT_CYCLES);
        let stack = rasterize_pillars(&points, &s.camera, s.image_size(), &ChannelSpec::full(), PILLAR_HEIGHT_M, 1);
        let hulls: Vec<_> = s.boxes.iter().filter_map(|b| project_box3d_to_2d(&pillar_hull(b), &s.camera)).collect();
        for row in 0..stack.height {
            for col in 0..stack.width {
                if !stack.is_occupied(row, col) {
                    continue;
                }
                occupied += 1;
                let (x, y) = (col as f64, row as f64);
                let inside = hulls.iter().any(|h| x + 1.0 >= h.x_min - 1.0 && x <= h.x_max + 1.0 && y + 1.0 >= h.y_min - 1.0 && y <= h.y_max + 1.0);
                assert!(inside, "{}: radar pixel ({row}, {col}) outside every object", s.scene_id);
            }
        }
    }
    assert!(occupied > 1000);
}

#[test]
fn filters_on_synthetic_scenes_match_brute_force() {
    let (scenes, _) = generate_dataset(&SynthConfig::default(), 40, 8).unwrap();
    let mut removed = 0;
    for s in &scenes {
        let points = s.accumulated_points(DEFAULT_CYCLES);
        let inside = |p: &Point3<f64>, b: &Box3D| {
            let (sn, cs) = b.yaw.sin_cos();
            let d = p - b.center;
            let local = [cs * d.x + sn * d.y, -sn * d.x + cs * d.y, d.z];
            (0..3).all(|k| local[k].abs() <= b.size[k] / 2.0)
        };
        let mut keep = Vec::new();
        for p in &points {
            let mut hit = false;
            for b in &s.boxes {
                hit |= inside(&p.position, b);
            }
            if hit {
                keep.push(p.clone());
            }
        }
        removed += points.len() - keep.len();
        assert_eq!(ground_truth_radar_filter(&points, &s.boxes), keep);
        let boxes: Vec<Box3D> = s.boxes.iter().filter(|b| points.iter().any(|p| inside(&p.position, b))).cloned().collect();
        assert_eq!(annotation_filter(&s.boxes, &points), boxes);
    }
    assert!(removed > 0, "clutter should be removed somewhere");
}

#[test]
fn dataset_round_trips_through_disk() {
    let (scenes, manifest) = generate_dataset(&SynthConfig::default(), 5, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &scenes, &manifest).unwrap();
    let back = load_scenes(dir.path()).unwrap();
    assert_eq!(back.len(), scenes.len());
    for (a, b) in scenes.iter().zip(&back) {
        assert_eq!(a.scene_id, b.scene_id);
        assert_eq!(a.image, b.image);
        assert_eq!(a.boxes, b.boxes);
        assert_eq!(a.cycles, b.cycles);
    }
    assert_eq!(count_classes(&back), count_classes(&scenes));
}
