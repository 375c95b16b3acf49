//! Agglomerative clustering with average linkage (UPGMA).
//!
//! Uses the nearest-neighbour-chain algorithm, which is exact for reducible
//! linkages such as the average, in O(n^2) time and memory.

use ndarray::Array2;

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Cluster the rows of `points` into `k` groups. Labels are numbered in
/// order of first appearance so the output is deterministic.
pub fn average_linkage(points: &Array2<f64>, k: usize) -> Vec<usize> {
    let n = points.nrows();
    if n == 0 {
        return Vec::new();
    }
    let k = k.clamp(1, n);

    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = points
                .row(i)
                .iter()
                .zip(points.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut merges: Vec<(usize, usize, f64)> = Vec::with_capacity(n - 1);
    let mut chain: Vec<usize> = Vec::new();
    let mut remaining = n;

    while remaining > 1 {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).unwrap());
        }
        let a = *chain.last().unwrap();
        let prev = if chain.len() >= 2 { Some(chain[chain.len() - 2]) } else { None };
        // Prefer the previous chain element on ties so the chain terminates.
        let mut best = prev.unwrap_or(usize::MAX);
        let mut best_d = prev.map_or(f64::INFINITY, |p| dist[a * n + p]);
        for c in 0..n {
            if c == a || !active[c] {
                continue;
            }
            let d = dist[a * n + c];
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        if Some(best) == prev {
            chain.pop();
            chain.pop();
            let (keep, gone) = if a < best { (a, best) } else { (best, a) };
            merges.push((keep, gone, best_d));
            let (nk, ng) = (size[keep] as f64, size[gone] as f64);
            for c in 0..n {
                if active[c] && c != keep && c != gone {
                    let d = (nk * dist[keep * n + c] + ng * dist[gone * n + c]) / (nk + ng);
                    dist[keep * n + c] = d;
                    dist[c * n + keep] = d;
                }
            }
            size[keep] += size[gone];
            active[gone] = false;
            remaining -= 1;
        } else {
            chain.push(best);
        }
    }

    // Merge heights are monotone for average linkage, so applying the
    // n - k lowest merges yields the k-cluster cut.
    let mut order: Vec<usize> = (0..merges.len()).collect();
    order.sort_by(|&x, &y| merges[x].2.total_cmp(&merges[y].2).then(x.cmp(&y)));
    let mut parent: Vec<usize> = (0..n).collect();
    for &m in order.iter().take(n - k) {
        let (a, b, _) = merges[m];
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }

    let mut label_of_root = vec![usize::MAX; n];
    let mut next = 0;
    (0..n)
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
