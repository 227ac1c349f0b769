// SPDX-License-Identifier: MIT OR Apache-2.0

//! SMOTE oversampling and Tomek-link cleaning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest rows to `rows[i]` (excluding `i`), nearest
/// first; ties resolve to the lower index.
pub fn k_nearest(rows: &[Vec<f64>], i: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = rows
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, r)| (squared_distance(&rows[i], r), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, j)| j).collect()
}

/// A synthetic row and where it came from: `base + gap * (neighbor - base)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRow {
    pub values: Vec<f64>,
    pub base: usize,
    pub neighbor: usize,
    pub gap: f64,
}

/// Generates `n_synthetic` minority rows by interpolating each randomly
/// chosen minority row towards one of its `k_neighbors` nearest minority rows.
pub fn smote_oversample(minority: &[Vec<f64>], k_neighbors: usize, n_synthetic: usize, seed: u64) -> Result<Vec<SyntheticRow>> {
    if n_synthetic == 0 {
        return Ok(Vec::new());
    }
    if k_neighbors == 0 {
        return Err(Error::InvalidArgument("k_neighbors must be positive".into()));
    }
    if minority.len() <= k_neighbors {
        return Err(Error::Classifier(format!(
            "SMOTE needs more than k_neighbors={k_neighbors} minority rows, got {}",
            minority.len()
        )));
    }
    let neighbors: Vec<Vec<usize>> = (0..minority.len()).map(|i| k_nearest(minority, i, k_neighbors)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_synthetic);
    for _ in 0..n_synthetic {
        let base = rng.gen_range(0..minority.len());
        let neighbor = neighbors[base][rng.gen_range(0..k_neighbors)];
        let gap: f64 = rng.gen();
        let values = minority[base]
            .iter()
            .zip(&minority[neighbor])
            .map(|(x, n)| x + gap * (n - x))
            .collect();
        out.push(SyntheticRow {
            values,
            base,
            neighbor,
            gap,
        });
    }
    Ok(out)
}

/// All cross-class mutual nearest-neighbour pairs `(i, j)` with `i < j`.
pub fn tomek_links(x: &[Vec<f64>], y: &[bool]) -> Vec<(usize, usize)> {
    let nn: Vec<Option<usize>> = (0..x.len()).map(|i| k_nearest(x, i, 1).first().copied()).collect();
    let mut links = Vec::new();
    for (i, &ni) in nn.iter().enumerate() {
        if let Some(j) = ni {
            if i < j && nn[j] == Some(i) && y[i] != y[j] {
                links.push((i, j));
            }
        }
    }
    links
}

/// Removes the `remove_class` member of every Tomek link. Returns sorted indices.
pub fn tomek_filter_class(x: &[Vec<f64>], y: &[bool], remove_class: bool) -> Result<Vec<usize>> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if !y.iter().any(|&v| v) || y.iter().all(|&v| v) {
        return Err(Error::Classifier("Tomek cleaning needs both classes".into()));
    }
    let mut removed: Vec<usize> = tomek_links(x, y)
        .into_iter()
        .map(|(i, j)| if y[i] == remove_class { i } else { j })
        .collect();
    removed.sort_unstable();
    Ok(removed)
}

/// Tomek cleaning that removes the majority-class member of each link.
/// On an exact tie the `false` class counts as the majority.
pub fn tomek_filter(x: &[Vec<f64>], y: &[bool]) -> Result<Vec<usize>> {
    let positives = y.iter().filter(|&&v| v).count();
    let majority = positives > y.len() - positives;
    tomek_filter_class(x, y, majority)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_synthetic_is_empty() {
        assert!(smote_oversample(&[vec![0.0]], 5, 0, 1).unwrap().is_empty());
    }

    #[test]
    fn too_few_minority_rows() {
        assert!(smote_oversample(&[vec![0.0], vec![1.0]], 2, 3, 1).is_err());
    }

    #[test]
    fn two_points_stay_on_the_segment() {
        let a = vec![0.0, 1.0, -2.0];
        let b = vec![3.0, -1.0, 4.0];
        let out = smote_oversample(&[a.clone(), b.clone()], 1, 200, 9).unwrap();
        for s in out {
            // Distance to a + distance to b equals |ab| for points on the segment.
            let dab = squared_distance(&a, &b).sqrt();
            let da = squared_distance(&a, &s.values).sqrt();
            let db = squared_distance(&b, &s.values).sqrt();
            assert!((da + db - dab).abs() < 1e-6);
        }
    }

    #[test]
    fn smote_is_seeded() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64]).collect();
        assert_eq!(smote_oversample(&rows, 3, 20, 4).unwrap(), smote_oversample(&rows, 3, 20, 4).unwrap());
    }

    #[test]
    fn hand_checked_tomek_link() {
        // majority {0.0, 0.9} (false), minority {1.0, 5.0} (true)
        let x = vec![vec![0.0], vec![0.9], vec![1.0], vec![5.0]];
        let y = vec![false, false, true, true];
        assert_eq!(tomek_links(&x, &y), vec![(1, 2)]);
        assert_eq!(tomek_filter(&x, &y).unwrap(), vec![1]);
    }

    #[test]
    fn separated_clusters_have_no_links() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..5 {
            x.push(vec![i as f64 * 0.1]);
            y.push(false);
            x.push(vec![100.0 + i as f64 * 0.1]);
            y.push(true);
        }
        assert!(tomek_filter(&x, &y).unwrap().is_empty());
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(tomek_filter(&[vec![0.0], vec![1.0]], &[true, true]).is_err());
    }
}
