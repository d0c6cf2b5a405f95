//! Brute-force Ward clustering from first principles: every step recomputes
//! all pairwise merge costs from cluster centroids,
//! `sqrt(2 |A| |B| / (|A| + |B|)) * ||mean(A) - mean(B)||`.
//! O(n^3) per run; independent of the recurrence used by the library.

pub struct OracleMerge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

fn centroid(points: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    let d = points[0].len();
    let mut c = vec![0.0; d];
    for &m in members {
        for (ci, x) in c.iter_mut().zip(&points[m]) {
            *ci += x;
        }
    }
    c.iter_mut().for_each(|x| *x /= members.len() as f64);
    c
}

pub fn ward_cost(points: &[Vec<f64>], a: &[usize], b: &[usize]) -> f64 {
    let (ca, cb) = (centroid(points, a), centroid(points, b));
    let dist: f64 = ca
        .iter()
        .zip(&cb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let (na, nb) = (a.len() as f64, b.len() as f64);
    (2.0 * na * nb / (na + nb)).sqrt() * dist
}

/// Full greedy merge sequence. Clusters are named by their smallest member;
/// ties break to the lowest (a, b).
pub fn merges(points: &[Vec<f64>]) -> Vec<OracleMerge> {
    let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    let mut out = Vec::new();
    while clusters.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let c = ward_cost(points, &clusters[i], &clusters[j]);
                let key = (
                    clusters[i][0].min(clusters[j][0]),
                    clusters[i][0].max(clusters[j][0]),
                );
                let better = match best {
                    None => true,
                    Some((bc, bi, bj)) => {
                        let bkey = (
                            clusters[bi][0].min(clusters[bj][0]),
                            clusters[bi][0].max(clusters[bj][0]),
                        );
                        c < bc || (c == bc && key < bkey)
                    }
                };
                if better {
                    best = Some((c, i, j));
                }
            }
        }
        let (c, i, j) = best.unwrap();
        let mut merged = clusters[i].clone();
        merged.extend(&clusters[j]);
        merged.sort();
        let (a, b) = (
            clusters[i][0].min(clusters[j][0]),
            clusters[i][0].max(clusters[j][0]),
        );
        out.push(OracleMerge { a, b, distance: c });
        clusters.remove(j);
        clusters[i] = merged;
    }
    out
}

/// Partition (as sorted sets) after applying merges up to the first above threshold.
pub fn partition(points: &[Vec<f64>], threshold: f64) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    for m in merges(points) {
        if m.distance > threshold {
            break;
        }
        let ia = clusters.iter().position(|c| c[0] == m.a).unwrap();
        let ib = clusters.iter().position(|c| c[0] == m.b).unwrap();
        let taken = clusters[ib].clone();
        clusters[ia].extend(taken);
        clusters[ia].sort();
        clusters.remove(ib);
    }
    clusters.sort();
    clusters
}
