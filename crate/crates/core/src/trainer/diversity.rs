//! Mode-collapse diagnostic: spread of generated outputs relative to real data.

use crate::error::{Error, Result};
use crate::imgcore::RasterImage;

/// Pairs closer than this mean absolute difference count as duplicates.
pub const DUPLICATE_DISTANCE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct DiversityReport {
    /// `mean_generated / mean_real`, clipped to `[0, 1]`; near 0 flags collapse.
    pub score: f64,
    /// Unclipped ratio.
    pub ratio: f64,
    pub mean_generated: f64,
    pub mean_real: f64,
    /// Groups of generated indices linked by near-duplicate pairs, largest first.
    pub clusters: Vec<Vec<usize>>,
}

fn distance(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    if a.data().len() != b.data().len() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.data().len() as f64)
}

/// Mean absolute-difference distance over all unordered pairs.
pub fn mean_pairwise_distance(images: &[RasterImage]) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::DataEmpty("pairwise distance needs at least two images".into()));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            sum += distance(&images[i], &images[j])?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

pub fn diversity_diagnostic(generated: &[RasterImage], real: &[RasterImage]) -> Result<DiversityReport> {
    let mean_generated = mean_pairwise_distance(generated)?;
    let mean_real = mean_pairwise_distance(real)?;
    let ratio = if mean_real > 0.0 {
        mean_generated / mean_real
    } else if mean_generated > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };

    let n = generated.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if distance(&generated[i], &generated[j])? < DUPLICATE_DISTANCE {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let r = find(&mut parent, i);
        groups[r].push(i);
    }
    let mut clusters: Vec<Vec<usize>> = groups.into_iter().filter(|g| g.len() > 1).collect();
    clusters.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));

    Ok(DiversityReport {
        score: ratio.clamp(0.0, 1.0),
        ratio,
        mean_generated,
        mean_real,
        clusters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::ColorSpace;

    fn img(v: f64) -> RasterImage {
        RasterImage::filled(3, 2, ColorSpace::Rgb, v).unwrap()
    }

    #[test]
    fn identical_outputs_collapse_to_zero() {
        let real = vec![img(0.0), img(0.5), img(1.0)];
        let r = diversity_diagnostic(&[img(0.3), img(0.3), img(0.3)], &real).unwrap();
        assert_eq!(r.score, 0.0);
        assert_eq!(r.clusters, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn real_set_scores_one() {
        let real = vec![img(0.0), img(0.5), img(1.0)];
        let r = diversity_diagnostic(&real, &real).unwrap();
        assert_eq!(r.score, 1.0);
        assert!(r.clusters.is_empty());
    }

    #[test]
    fn repeated_pair_matches_brute_force() {
        let k = 3;
        let mut generated = vec![];
        for _ in 0..k {
            generated.push(img(0.2));
            generated.push(img(0.6));
        }
        let real = vec![img(0.0), img(1.0)];
        // k² cross pairs at distance 0.4 among C(2k, 2) pairs.
        let pairs = (2 * k * (2 * k - 1) / 2) as f64;
        let expected = (k * k) as f64 * 0.4 / pairs;
        let r = diversity_diagnostic(&generated, &real).unwrap();
        assert!((r.mean_generated - expected).abs() < 1e-12);
        assert!((r.score - expected).abs() < 1e-12);
        assert_eq!(r.clusters, vec![vec![0, 2, 4], vec![1, 3, 5]]);
    }
}
