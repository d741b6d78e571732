use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{geometry, rasterize_floor, wrap_angle, Scene};

/// Rigid scene augmentation about the vertical axis through the origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op", content = "angle")]
pub enum Augmentation {
    /// Rotation by the given angle (radians) about +y.
    Rotate(f64),
    /// Reflection `x -> -x`.
    MirrorX,
    /// Reflection `z -> -z`.
    MirrorZ,
}

impl Augmentation {
    pub fn inverse(&self) -> Augmentation {
        match *self {
            Augmentation::Rotate(a) => Augmentation::Rotate(-a),
            m => m,
        }
    }
}

fn rotate_xz([x, z]: [f64; 2], sin: f64, cos: f64) -> [f64; 2] {
    [cos * x + sin * z, -sin * x + cos * z]
}

/// Applies `op` to the floor outline and every instance, then re-rasterizes the mask.
///
/// Sizes are object-frame half extents and are left untouched. Mirroring keeps
/// furniture facing the way its reflected surroundings imply: `MirrorX` maps yaw
/// to `-yaw`, `MirrorZ` maps it to `pi - yaw`, assuming left/right symmetric
/// assets (the asset mesh itself is never reflected).
pub fn augment_scene(scene: &Scene, op: Augmentation) -> Scene {
    let mut out = scene.clone();
    match op {
        Augmentation::Rotate(theta) => {
            let (s, c) = theta.sin_cos();
            for p in &mut out.floor.polygon {
                *p = rotate_xz(*p, s, c);
            }
            for inst in &mut out.instances {
                let t = &mut inst.transform;
                let [x, z] = rotate_xz([t.translation[0], t.translation[2]], s, c);
                t.translation[0] = x;
                t.translation[2] = z;
                t.yaw = wrap_angle(t.yaw + theta);
            }
        }
        Augmentation::MirrorX | Augmentation::MirrorZ => {
            let axis = if op == Augmentation::MirrorX { 0 } else { 1 };
            for p in &mut out.floor.polygon {
                p[axis] = -p[axis];
            }
            // reflection flips winding
            if geometry::signed_area(&out.floor.polygon) < 0.0 {
                out.floor.polygon.reverse();
            }
            for inst in &mut out.instances {
                let t = &mut inst.transform;
                let k = if axis == 0 { 0 } else { 2 };
                t.translation[k] = -t.translation[k];
                t.yaw = if axis == 0 {
                    wrap_angle(-t.yaw)
                } else {
                    wrap_angle(PI - t.yaw)
                };
            }
        }
    }
    match rasterize_floor(&out.floor.polygon, out.floor.mask.resolution, out.floor.extent) {
        Ok(mask) => out.floor.mask = mask,
        Err(e) => log::warn!("augmented floor could not be rasterized: {e}"),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{FloorPlan, FurnitureInstance, RoomType, Transform7};
    use proptest::prelude::*;

    fn sample_scene() -> Scene {
        let floor = FloorPlan::from_polygon(
            vec![[-2.0, -1.5], [2.5, -1.5], [2.5, 1.0], [0.5, 2.0], [-2.0, 2.0]],
            32,
            6.4,
        )
        .unwrap();
        let mut s = Scene::new("s0", RoomType::Bedroom, floor);
        s.instances.push(FurnitureInstance::new(
            "a",
            "bed",
            Transform7::new([0.3, 0.4, -0.7], [1.0, 0.4, 0.9], 0.2),
        ));
        s.instances.push(FurnitureInstance::new(
            "b",
            "lamp",
            Transform7::new([-1.2, 0.2, 1.1], [0.2, 0.2, 0.2], -3.1),
        ));
        s.instances.push(FurnitureInstance::new(
            "c",
            "lamp",
            Transform7::new([1.7, 0.2, 0.4], [0.2, 0.2, 0.2], -PI),
        ));
        s
    }

    #[test]
    fn rotate_zero_is_identity() {
        let s = sample_scene();
        assert_eq!(augment_scene(&s, Augmentation::Rotate(0.0)), s);
    }

    #[test]
    fn mirrors_are_involutions() {
        let s = sample_scene();
        for op in [Augmentation::MirrorX, Augmentation::MirrorZ] {
            let twice = augment_scene(&augment_scene(&s, op), op);
            assert!(twice.approx_eq(&s, 1e-6), "{op:?}");
            assert_eq!(twice.floor.mask, s.floor.mask);
        }
    }

    #[test]
    fn four_quarter_turns_compose_to_identity() {
        let s = sample_scene();
        let mut r = s.clone();
        for _ in 0..4 {
            r = augment_scene(&r, Augmentation::Rotate(PI / 2.0));
        }
        assert!(r.approx_eq(&s, 1e-6));
    }

    #[test]
    fn sizes_survive_rotation() {
        let s = sample_scene();
        let r = augment_scene(&s, Augmentation::Rotate(1.1));
        for (a, b) in s.instances.iter().zip(&r.instances) {
            assert_eq!(a.transform.size, b.transform.size);
        }
        assert_eq!(r.floor.mask.resolution, 32);
    }

    proptest! {
        #[test]
        fn op_then_inverse_is_identity(theta in 0.0f64..(2.0 * PI), which in 0usize..3) {
            let s = sample_scene();
            let op = match which {
                0 => Augmentation::Rotate(theta),
                1 => Augmentation::MirrorX,
                _ => Augmentation::MirrorZ,
            };
            let back = augment_scene(&augment_scene(&s, op), op.inverse());
            prop_assert!(back.approx_eq(&s, 1e-6));
        }
    }
}
