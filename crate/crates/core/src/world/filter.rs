use super::{PointCloud, Result, WorldError};
use crate::spatial::PointIndex;

/// Drop points whose mean distance to their `k` nearest neighbours exceeds
/// the cloud-wide mean of that statistic by more than `std_ratio` standard
/// deviations. Survivors keep their input order.
pub fn statistical_outlier_filter(cloud: &PointCloud, k: usize, std_ratio: f64) -> Result<PointCloud> {
    if k == 0 || cloud.len() <= k {
        return Err(WorldError::TooFewPoints { k, len: cloud.len() });
    }
    let index = PointIndex::new(&cloud.points);
    let stat: Vec<f64> = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = index.k_nearest(p, k, Some(i));
            nn.iter().map(|(d, _)| d).sum::<f64>() / nn.len() as f64
        })
        .collect();
    let n = stat.len() as f64;
    let mean = stat.iter().sum::<f64>() / n;
    let std = (stat.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
    let limit = mean + std_ratio * std;
    Ok(PointCloud::new(
        cloud
            .points
            .iter()
            .zip(&stat)
            .filter(|(_, &d)| d <= limit)
            .map(|(p, _)| *p)
            .collect(),
    ))
}
