use serde::{Deserialize, Serialize};

use crate::geometry::wrap_angle;

/// 3D box in an ego frame, laid out as `[x, y, z, w, l, h, θ, vx, vy]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox3D {
    pub center: [f64; 3],
    /// Width, length, height in meters.
    pub size: [f64; 3],
    /// Wrapped to (−π, π].
    pub heading: f64,
    pub velocity: [f64; 2],
    pub score: f64,
    pub class_id: usize,
}

impl BoundingBox3D {
    pub fn to_array(&self) -> [f64; 9] {
        let [x, y, z] = self.center;
        let [w, l, h] = self.size;
        let [vx, vy] = self.velocity;
        [x, y, z, w, l, h, self.heading, vx, vy]
    }

    pub fn from_array(a: [f64; 9], score: f64, class_id: usize) -> Self {
        Self {
            center: [a[0], a[1], a[2]],
            size: [a[3], a[4], a[5]],
            heading: wrap_angle(a[6]),
            velocity: [a[7], a[8]],
            score,
            class_id,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
            && self.size.iter().all(|s| *s > 0.0)
            && (0.0..=1.0).contains(&self.score)
    }

    pub fn center_distance_2d(&self, other: &BoundingBox3D) -> f64 {
        (self.center[0] - other.center[0]).hypot(self.center[1] - other.center[1])
    }
}
