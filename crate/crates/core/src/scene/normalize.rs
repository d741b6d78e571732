use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{wrap_angle, Scene, Transform7};
use crate::error::{Error, Result};

pub const ATTRIBUTE_NAMES: [&str; 7] = ["tx", "ty", "tz", "sx", "sy", "sz", "yaw"];

/// Transform with every component mapped linearly into `[0, 1]`.
/// Component order matches [`Transform7::to_array`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedTransform7 {
    pub values: [f64; 7],
}

impl NormalizedTransform7 {
    pub fn new(values: [f64; 7]) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::OutOfRange(format!(
                "normalized {} = {} outside [0, 1]",
                ATTRIBUTE_NAMES[i], values[i]
            )));
        }
        Ok(NormalizedTransform7 { values })
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.values[0], self.values[1], self.values[2]]
    }

    pub fn size(&self) -> [f64; 3] {
        [self.values[3], self.values[4], self.values[5]]
    }

    pub fn yaw(&self) -> f64 {
        self.values[6]
    }
}

/// Per-component `(min, max)` used for linear normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationBounds {
    pub min: [f64; 7],
    pub max: [f64; 7],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalizeMode {
    /// Out-of-bounds components are an error.
    Training,
    /// Out-of-bounds components are clamped with a warning.
    Inference,
}

impl NormalizationBounds {
    pub fn new(min: [f64; 7], max: [f64; 7]) -> Result<Self> {
        if let Some(i) = (0..7).find(|&i| !(max[i] > min[i])) {
            return Err(Error::InvalidArgument(format!(
                "bounds for {} need max > min (got {} .. {})",
                ATTRIBUTE_NAMES[i], min[i], max[i]
            )));
        }
        Ok(NormalizationBounds { min, max })
    }

    /// Bounds from training scenes, padded so rotated or mirrored copies stay inside.
    ///
    /// Floor-plane translation bounds become `[-r, r]` where `r` is the largest
    /// distance of any instance center from the vertical axis; height and size
    /// use raw extrema; yaw spans the full circle. Every range gets a 5% margin.
    pub fn from_scenes<'a>(scenes: impl IntoIterator<Item = &'a Scene>) -> Result<Self> {
        let mut lo = [f64::INFINITY; 7];
        let mut hi = [f64::NEG_INFINITY; 7];
        let mut radius: f64 = 0.0;
        let mut count = 0usize;
        for scene in scenes {
            for inst in &scene.instances {
                let v = inst.transform.to_array();
                for k in 0..7 {
                    lo[k] = lo[k].min(v[k]);
                    hi[k] = hi[k].max(v[k]);
                }
                radius = radius.max(v[0].hypot(v[2]));
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::InvalidArgument(
                "cannot compute bounds from scenes without instances".into(),
            ));
        }
        lo[0] = -radius;
        hi[0] = radius;
        lo[2] = -radius;
        hi[2] = radius;
        lo[6] = -PI;
        hi[6] = PI;
        for k in 0..6 {
            let pad = 0.05 * (hi[k] - lo[k]) + 1e-3;
            let floor_lo = if (3..6).contains(&k) { 0.5 * lo[k] } else { f64::NEG_INFINITY };
            lo[k] = (lo[k] - pad).max(floor_lo);
            hi[k] += pad;
        }
        NormalizationBounds::new(lo, hi)
    }

    pub fn contains(&self, t: &Transform7) -> bool {
        let v = t.to_array();
        (0..7).all(|k| v[k] >= self.min[k] && v[k] <= self.max[k])
    }
}

/// Maps a transform linearly into `[0, 1]^7`.
pub fn normalize_transform(
    t: &Transform7,
    b: &NormalizationBounds,
    mode: NormalizeMode,
) -> Result<NormalizedTransform7> {
    let mut raw = t.to_array();
    raw[6] = wrap_angle(raw[6]);
    let mut values = [0.0; 7];
    for k in 0..7 {
        let (lo, hi) = (b.min[k], b.max[k]);
        let mut x = raw[k];
        if x < lo || x > hi {
            match mode {
                NormalizeMode::Training => {
                    return Err(Error::OutOfRange(format!(
                        "{} = {x} outside bounds [{lo}, {hi}]",
                        ATTRIBUTE_NAMES[k]
                    )))
                }
                NormalizeMode::Inference => {
                    log::warn!(
                        "{} = {x} outside bounds [{lo}, {hi}], clamping",
                        ATTRIBUTE_NAMES[k]
                    );
                    x = x.clamp(lo, hi);
                }
            }
        }
        values[k] = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    }
    Ok(NormalizedTransform7 { values })
}

pub fn denormalize_transform(v: &NormalizedTransform7, b: &NormalizationBounds) -> Transform7 {
    let mut raw = [0.0; 7];
    for k in 0..7 {
        raw[k] = b.min[k] + v.values[k] * (b.max[k] - b.min[k]);
    }
    raw[6] = wrap_angle(raw[6]);
    Transform7::from_array(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bounds() -> NormalizationBounds {
        NormalizationBounds::new(
            [-3.0, 0.0, -3.0, 0.05, 0.05, 0.05, -PI],
            [3.0, 2.0, 3.0, 1.5, 1.2, 1.5, PI],
        )
        .unwrap()
    }

    #[test]
    fn lower_bound_maps_to_zero() {
        let b = bounds();
        let t = Transform7::from_array(b.min);
        let v = normalize_transform(&t, &b, NormalizeMode::Training).unwrap();
        assert!(v.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn midpoint_maps_to_half() {
        let b = bounds();
        let mid: [f64; 7] = std::array::from_fn(|k| 0.5 * (b.min[k] + b.max[k]));
        let v = normalize_transform(&Transform7::from_array(mid), &b, NormalizeMode::Training)
            .unwrap();
        for x in v.values {
            assert!((x - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn roundtrip_random() {
        let b = bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let raw: [f64; 7] = std::array::from_fn(|k| rng.random_range(b.min[k]..b.max[k]));
            let t = Transform7::from_array(raw);
            let v = normalize_transform(&t, &b, NormalizeMode::Training).unwrap();
            let back = denormalize_transform(&v, &b).to_array();
            for k in 0..6 {
                assert!((back[k] - raw[k]).abs() <= 1e-6);
            }
            assert!(super::super::angle_diff(back[6], raw[6]) <= 1e-6);
        }
    }

    #[test]
    fn out_of_bounds_modes() {
        let b = bounds();
        let t = Transform7::new([5.0, 1.0, 0.0], [0.5, 0.5, 0.5], 0.0);
        assert!(matches!(
            normalize_transform(&t, &b, NormalizeMode::Training),
            Err(Error::OutOfRange(_))
        ));
        let v = normalize_transform(&t, &b, NormalizeMode::Inference).unwrap();
        assert_eq!(v.values[0], 1.0);
    }

    #[test]
    fn monotone_per_component() {
        let b = bounds();
        let base = Transform7::new([0.0, 1.0, 0.0], [0.5, 0.5, 0.5], 0.0).to_array();
        for k in 0..7 {
            let mut lo = base;
            let mut hi = base;
            lo[k] -= 0.01;
            hi[k] += 0.01;
            let a = normalize_transform(&Transform7::from_array(lo), &b, NormalizeMode::Training)
                .unwrap();
            let c = normalize_transform(&Transform7::from_array(hi), &b, NormalizeMode::Training)
                .unwrap();
            assert!(a.values[k] < c.values[k]);
        }
    }

    #[test]
    fn degenerate_bounds_rejected() {
        assert!(NormalizationBounds::new([0.0; 7], [0.0; 7]).is_err());
    }
}
