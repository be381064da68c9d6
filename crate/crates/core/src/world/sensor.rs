use nalgebra::{Point2, Point3};
use rand::{seq::index, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{PointCloud, SensorModel, WorldState};

/// Depth-camera view of the current surface on a regular xy lattice.
///
/// Noise and outliers are drawn from a stream seeded by `seed` only; when a
/// press is active every point within the occlusion radius of the probe
/// axis is dropped.
pub fn observe(world: &WorldState, sensor: &SensorModel, seed: u64) -> PointCloud {
    let ws = world.scenario().workspace;
    let s = sensor.spacing;
    let nx = (ws.width() / s + 1e-9).floor() as usize + 1;
    let ny = (ws.height() / s + 1e-9).floor() as usize + 1;
    let mut points: Vec<Point3<f64>> = (0..ny)
        .flat_map(|r| (0..nx).map(move |c| (r, c)))
        .map(|(r, c)| {
            let xy = Point2::new(ws.min[0] + c as f64 * s, ws.min[1] + r as f64 * s);
            Point3::new(xy.x, xy.y, world.height_at(&xy))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if sensor.noise_std > 0.0 {
        let normal = Normal::new(0.0, sensor.noise_std).expect("validated noise");
        for p in &mut points {
            p.z += normal.sample(&mut rng);
        }
    }
    let n_out = (sensor.outlier_fraction * points.len() as f64).round() as usize;
    if n_out > 0 {
        for i in index::sample(&mut rng, points.len(), n_out) {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            points[i].z += sign * sensor.outlier_amplitude;
        }
    }
    if let Some(press) = world.press() {
        let axis = press.contact.xy();
        points.retain(|p| (p.xy() - axis).norm() > sensor.occlusion_radius);
    }
    PointCloud::new(points)
}
