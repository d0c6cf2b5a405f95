//! Ward-linkage agglomerative clustering on Euclidean distances.
//!
//! Linkage updates use the Lance–Williams recurrence on squared distances.
//! Each active cluster caches its nearest neighbour among higher-indexed
//! clusters, so a merge only rescans rows whose cached neighbour was one of
//! the merged pair. Clusters are identified by their slot, which is always
//! the smallest leaf index they contain; ties on distance go to the lowest
//! `(slot_a, slot_b)` pair.

use crate::embedding::EmbeddingVector;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum HacError {
    #[error("cannot cluster an empty input")]
    Empty,
    #[error("vector {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("vector {0} has a non-finite entry")]
    NonFinite(usize),
    #[error("distance threshold must be positive, got {0}")]
    BadThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    /// Slot of the surviving cluster (smallest leaf index of the pair).
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub size: usize,
}

/// Merges in greedy order. Distances are not guaranteed monotone.
#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    pub merges: Vec<Merge>,
    pub leaf_count: usize,
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

struct Condensed {
    n: usize,
    data: Vec<f64>,
}

impl Condensed {
    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * self.n - i * (i + 1) / 2 + (j - i - 1)
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx(i, j)]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] = v;
    }
}

fn validate<V: AsRef<[f64]>>(points: &[V]) -> Result<usize, HacError> {
    let first = points.first().ok_or(HacError::Empty)?;
    let d = first.as_ref().len();
    for (index, p) in points.iter().enumerate() {
        let p = p.as_ref();
        if p.len() != d {
            return Err(HacError::DimensionMismatch {
                index,
                expected: d,
                found: p.len(),
            });
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(HacError::NonFinite(index));
        }
    }
    Ok(d)
}

/// Runs Ward clustering to completion (`n - 1` merges).
pub fn ward_linkage<V: AsRef<[f64]>>(points: &[V]) -> Result<Dendrogram, HacError> {
    validate(points)?;
    let n = points.len();
    let mut dist = Condensed {
        n,
        data: Vec::with_capacity(n * n.saturating_sub(1) / 2),
    };
    for i in 0..n {
        let pi = points[i].as_ref();
        for pj in &points[i + 1..] {
            dist.data.push(
                pi.iter()
                    .zip(pj.as_ref())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum(),
            );
        }
    }

    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut nn = vec![usize::MAX; n];
    let mut nn_d2 = vec![f64::INFINITY; n];

    let rescan =
        |i: usize, active: &[bool], dist: &Condensed, nn: &mut [usize], nn_d2: &mut [f64]| {
            nn[i] = usize::MAX;
            nn_d2[i] = f64::INFINITY;
            for (j, &live) in active.iter().enumerate().skip(i + 1) {
                if live {
                    let d = dist.get(i, j);
                    if d < nn_d2[i] {
                        nn_d2[i] = d;
                        nn[i] = j;
                    }
                }
            }
        };
    for i in 0..n {
        rescan(i, &active, &dist, &mut nn, &mut nn_d2);
    }

    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for _ in 1..n {
        let mut a = usize::MAX;
        for i in 0..n {
            if active[i] && nn[i] != usize::MAX && (a == usize::MAX || nn_d2[i] < nn_d2[a]) {
                a = i;
            }
        }
        let b = nn[a];
        let d_ab = nn_d2[a];
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for k in 0..n {
            if !active[k] || k == a || k == b {
                continue;
            }
            let nk = size[k] as f64;
            let updated = ((na + nk) * dist.get(a, k) + (nb + nk) * dist.get(b, k) - nk * d_ab)
                / (na + nb + nk);
            dist.set(a, k, updated.max(0.0));
        }
        active[b] = false;
        size[a] += size[b];
        merges.push(Merge {
            a,
            b,
            distance: d_ab.sqrt(),
            size: size[a],
        });

        rescan(a, &active, &dist, &mut nn, &mut nn_d2);
        for i in 0..b {
            if !active[i] || i == a {
                continue;
            }
            if nn[i] == a || nn[i] == b {
                rescan(i, &active, &dist, &mut nn, &mut nn_d2);
            } else if i < a {
                let d = dist.get(i, a);
                if d < nn_d2[i] || (d == nn_d2[i] && a < nn[i]) {
                    nn[i] = a;
                    nn_d2[i] = d;
                }
            }
        }
    }
    Ok(Dendrogram {
        merges,
        leaf_count: n,
    })
}

impl Dendrogram {
    /// Applies merges in order until the first one above `threshold`.
    /// Labels are numbered by first appearance over the leaves.
    pub fn cut(&self, threshold: f64) -> Vec<usize> {
        let mut parent: Vec<usize> = (0..self.leaf_count).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for m in &self.merges {
            if m.distance > threshold {
                break;
            }
            let (ra, rb) = (find(&mut parent, m.a), find(&mut parent, m.b));
            parent[rb] = ra;
        }
        let mut label_of_root = vec![usize::MAX; self.leaf_count];
        let mut next = 0;
        (0..self.leaf_count)
            .map(|i| {
                let r = find(&mut parent, i);
                if label_of_root[r] == usize::MAX {
                    label_of_root[r] = next;
                    next += 1;
                }
                label_of_root[r]
            })
            .collect()
    }
}

/// Flat cluster labels for `points` at `threshold`.
pub fn hac_ward<V: AsRef<[f64]>>(points: &[V], threshold: f64) -> Result<Vec<usize>, HacError> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(HacError::BadThreshold(threshold));
    }
    Ok(ward_linkage(points)?.cut(threshold))
}

/// Groups indices by label, in label order.
pub fn groups(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut out = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        out[l].push(i);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(deg: f64) -> Vec<f64> {
        let r = deg.to_radians();
        vec![r.cos(), r.sin()]
    }

    #[test]
    fn single_and_identical() {
        assert_eq!(hac_ward(&[vec![1.0, 0.0]], 1.5).unwrap(), vec![0]);
        let d = ward_linkage(&[vec![0.6, 0.8], vec![0.6, 0.8]]).unwrap();
        assert_eq!(d.merges[0].distance, 0.0);
        assert_eq!(d.cut(1.5), vec![0, 0]);
    }

    #[test]
    fn three_angles() {
        let pts = [unit(0.0), unit(5.0), unit(90.0)];
        let d = ward_linkage(&pts).unwrap();
        assert_eq!((d.merges[0].a, d.merges[0].b), (0, 1));
        assert!((d.merges[0].distance - 0.087_238_774_730_672).abs() < 1e-12);
        assert!((d.merges[1].distance - 1.596_221_207_017_045_2).abs() < 1e-12);
        assert_eq!(d.merges[1].size, 3);
        assert_eq!(d.cut(1.5), vec![0, 0, 1]);
    }

    #[test]
    fn errors() {
        let empty: [Vec<f64>; 0] = [];
        assert_eq!(hac_ward(&empty, 1.5), Err(HacError::Empty));
        assert!(matches!(
            hac_ward(&[vec![1.0, 0.0], vec![1.0]], 1.5),
            Err(HacError::DimensionMismatch { index: 1, .. })
        ));
        assert_eq!(
            hac_ward(&[vec![1.0]], -1.0),
            Err(HacError::BadThreshold(-1.0))
        );
        assert_eq!(
            hac_ward(&[vec![f64::NAN]], 1.0),
            Err(HacError::NonFinite(0))
        );
    }

    #[test]
    fn ties_go_to_lowest_pair() {
        // four corners of a square: all sides equal
        let pts = [
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
        ];
        let d = ward_linkage(&pts).unwrap();
        assert_eq!((d.merges[0].a, d.merges[0].b), (0, 1));
        assert_eq!((d.merges[1].a, d.merges[1].b), (2, 3));
    }

    #[test]
    fn label_groups() {
        assert_eq!(groups(&[0, 1, 0, 2]), vec![vec![0, 2], vec![1], vec![3]]);
    }
}
