//! Classification, correlation and clustering metrics.
//!
//! Per-class F1 and recall are 0 when their denominator is 0, and every class
//! in `0..C` takes part in the macro averages, including classes that never
//! occur in gold or predictions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Counts indexed `[gold][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(gold: &[usize], pred: &[usize], classes: usize) -> Result<Self> {
        if gold.len() != pred.len() {
            return Err(Error::Dimension(format!(
                "gold has {} labels, pred has {}",
                gold.len(),
                pred.len()
            )));
        }
        if gold.is_empty() {
            return Err(Error::Contract("metric of an empty label sequence".into()));
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&g, &p) in gold.iter().zip(pred) {
            for label in [g, p] {
                if label >= classes {
                    return Err(Error::LabelOutOfRange { label, classes });
                }
            }
            counts[g][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn true_pos(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    fn gold_count(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn pred_count(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn precision(&self, c: usize) -> f64 {
        ratio(self.true_pos(c), self.pred_count(c))
    }

    pub fn recall(&self, c: usize) -> f64 {
        ratio(self.true_pos(c), self.gold_count(c))
    }

    pub fn f1(&self, c: usize) -> f64 {
        // 2TP / (2TP + FP + FN), which equals 2PR/(P+R) whenever P+R > 0
        ratio(2 * self.true_pos(c), self.gold_count(c) + self.pred_count(c))
    }

    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..self.classes()).map(|c| self.true_pos(c)).sum();
        ratio(diag, self.total())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn macro_f1(gold: &[usize], pred: &[usize], classes: usize) -> Result<f64> {
    let cm = ConfusionMatrix::new(gold, pred, classes)?;
    Ok((0..classes).map(|c| cm.f1(c)).sum::<f64>() / classes as f64)
}

pub fn f1_of_class(gold: &[usize], pred: &[usize], class: usize, classes: usize) -> Result<f64> {
    if class >= classes {
        return Err(Error::LabelOutOfRange {
            label: class,
            classes,
        });
    }
    Ok(ConfusionMatrix::new(gold, pred, classes)?.f1(class))
}

pub fn macro_recall(gold: &[usize], pred: &[usize], classes: usize) -> Result<f64> {
    let cm = ConfusionMatrix::new(gold, pred, classes)?;
    Ok((0..classes).map(|c| cm.recall(c)).sum::<f64>() / classes as f64)
}

pub fn accuracy(gold: &[usize], pred: &[usize], classes: usize) -> Result<f64> {
    Ok(ConfusionMatrix::new(gold, pred, classes)?.accuracy())
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "correlation of sequences of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Contract("correlation needs at least 2 points".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Domain("correlation of non-finite values".into()));
    }
    Ok(())
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based fractional ranks; tied values share the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson(&average_ranks(a), &average_ranks(b))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Tensor,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

impl KMeans {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

/// Lloyd iterations from a k-means++ start. A cluster that loses all its
/// points is moved onto the point farthest from its current centroid.
pub fn kmeans(points: &Tensor, k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    let (n, d) = points.dims2()?;
    if k == 0 || k > n {
        return Err(Error::Config(format!("k-means with k = {k} on {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<Vec<f64>> = vec![points.row(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            if nearest[pick] == 0.0 {
                // rounding walked past the last positive weight
                pick = (0..n).rev().find(|&i| nearest[i] > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = points.row(next).to_vec();
        for (i, w) in nearest.iter_mut().enumerate() {
            *w = w.min(sq_dist(points.row(i), &c));
        }
        centroids.push(c);
    }

    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, slot) in assignments.iter_mut().enumerate() {
            let p = points.row(i);
            let (best, dist) = centroids
                .iter()
                .enumerate()
                .map(|(c, m)| (c, sq_dist(p, m)))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            if *slot != best {
                *slot = best;
                changed = true;
            }
            inertia += dist;
        }
        history.push(inertia);
        if !changed && history.len() > 1 {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .map(|i| (i, sq_dist(points.row(i), &centroids[assignments[i]])))
                    .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc })
                    .0;
                centroids[c] = points.row(far).to_vec();
                counts[c] = 1;
                assignments[far] = c;
            }
        }
    }
    let centroids = Tensor::from_rows(&centroids)?;
    Ok(KMeans {
        assignments,
        centroids,
        inertia_history: history,
    })
}

/// Mean silhouette over all points with Euclidean distance. Points in a
/// singleton cluster score 0.
pub fn silhouette(points: &Tensor, assignments: &[usize]) -> Result<f64> {
    let (n, _) = points.dims2()?;
    if assignments.len() != n {
        return Err(Error::Dimension(format!(
            "{n} points but {} assignments",
            assignments.len()
        )));
    }
    let k = assignments.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Contract("silhouette needs at least 2 non-empty clusters".into()));
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        let own = assignments[i];
        if sizes[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[assignments[j]] += sq_dist(points.row(i), points.row(j)).sqrt();
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

fn comb2(x: u64) -> f64 {
    (x as f64) * (x.saturating_sub(1) as f64) / 2.0
}

/// Chance-corrected pair agreement between two partitions. When the
/// correction leaves a zero denominator (both partitions all-singletons or
/// both a single cluster) the partitions coincide and the result is 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "partitions of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as u64;
    let ka = a.iter().copied().max().map_or(0, |m| m + 1);
    let kb = b.iter().copied().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let index: f64 = table.iter().flatten().map(|&c| comb2(c)).sum();
    let sum_a: f64 = table.iter().map(|r| comb2(r.iter().sum())).sum();
    let sum_b: f64 = (0..kb)
        .map(|j| comb2(table.iter().map(|r| r[j]).sum()))
        .sum();
    let pairs = comb2(n);
    let expected = if pairs > 0.0 { sum_a * sum_b / pairs } else { 0.0 };
    let max = (sum_a + sum_b) / 2.0;
    let den = max - expected;
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / den)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn f1_examples() {
        close(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0, 1e-15);
        close(macro_f1(&[0, 0, 1, 1], &[0, 1, 0, 1], 2).unwrap(), 0.5, 1e-15);
        close(macro_f1(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap(), 1.0 / 3.0, 1e-15);
        close(f1_of_class(&[0, 1], &[0, 1], 1, 2).unwrap(), 1.0, 1e-15);
        close(f1_of_class(&[0, 0], &[0, 0], 1, 2).unwrap(), 0.0, 1e-15);
        // P = 1, R = 0.5
        close(f1_of_class(&[1, 1, 0], &[1, 0, 0], 1, 2).unwrap(), 2.0 / 3.0, 1e-15);
        assert!(f1_of_class(&[0], &[0], 2, 2).is_err());
        assert!(macro_f1(&[], &[], 2).is_err());
        assert!(macro_f1(&[0, 3], &[0, 0], 2).is_err());
    }

    #[test]
    fn recall_examples() {
        close(macro_recall(&[0, 1, 1], &[0, 1, 1], 2).unwrap(), 1.0, 1e-15);
        // class 0 fully recalled, classes 1 and 2 never occur in gold
        close(macro_recall(&[0, 0], &[0, 0], 3).unwrap(), 1.0 / 3.0, 1e-15);
    }

    #[test]
    fn random_predictor_recall_is_about_one_over_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 4;
        let gold: Vec<usize> = (0..40_000).map(|i| i % c).collect();
        let pred: Vec<usize> = gold.iter().map(|_| rng.random_range(0..c)).collect();
        close(macro_recall(&gold, &pred, c).unwrap(), 0.25, 0.01);
    }

    #[test]
    fn correlation_examples() {
        let a = [1.0, 2.0, 3.0, 5.0];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        close(pearson(&a, &a).unwrap(), 1.0, 1e-12);
        close(spearman(&a, &a).unwrap(), 1.0, 1e-12);
        close(pearson(&a, &neg).unwrap(), -1.0, 1e-12);
        close(spearman(&a, &neg).unwrap(), -1.0, 1e-12);
        // Σdxdy = 8, Σdx² = 2, Σdy² = 294/9, so r = 24/√588
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 4.0, 9.0]).unwrap();
        close(r, 24.0 / 588.0f64.sqrt(), 1e-12);
        close(r, 0.9897433186, 1e-9);
        close(spearman(&[1.0, 2.0, 3.0], &[1.0, 4.0, 9.0]).unwrap(), 1.0, 1e-12);
        assert!(matches!(
            pearson(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(spearman(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn kmeans_examples() {
        let pts = Tensor::from_rows(&[[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.0, 10.1]]).unwrap();
        let km = kmeans(&pts, 2, 0, 50).unwrap();
        assert_eq!(km.assignments[0], km.assignments[1]);
        assert_eq!(km.assignments[2], km.assignments[3]);
        assert_ne!(km.assignments[0], km.assignments[2]);

        let km = kmeans(&pts, 4, 3, 50).unwrap();
        let mut a = km.assignments.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3]);
        assert_eq!(km.inertia(), 0.0);
        assert!(kmeans(&pts, 5, 0, 10).is_err());
    }

    #[test]
    fn kmeans_inertia_never_increases_and_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..3).map(|_| rng.random::<f64>()).collect())
            .collect();
        let pts = Tensor::from_rows(&rows).unwrap();
        for seed in 0..5 {
            let km = kmeans(&pts, 6, seed, 100).unwrap();
            for w in km.inertia_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", km.inertia_history);
            }
            assert_eq!(km, kmeans(&pts, 6, seed, 100).unwrap());
        }
    }

    #[test]
    fn silhouette_examples() {
        let pts = Tensor::from_rows(&[[0.0, 0.0], [0.0, 0.1], [50.0, 50.0], [50.1, 50.0]]).unwrap();
        assert!(silhouette(&pts, &[0, 0, 1, 1]).unwrap() > 0.9);
        close(
            silhouette(&pts, &[0, 0, 1, 1]).unwrap(),
            silhouette(&pts, &[1, 1, 0, 0]).unwrap(),
            1e-15,
        );
        assert!(silhouette(&pts, &[0, 0, 0, 0]).is_err());
        // singleton cluster contributes 0
        let s = silhouette(&pts, &[0, 0, 0, 1]).unwrap();
        assert!(s.is_finite());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..400)
            .map(|_| (0..2).map(|_| rng.sample(rand_distr::StandardNormal)).collect())
            .collect();
        let blob = Tensor::from_rows(&rows).unwrap();
        let assign: Vec<usize> = (0..400).map(|_| rng.random_range(0..3)).collect();
        assert!(silhouette(&blob, &assign).unwrap().abs() < 0.1);
    }

    #[test]
    fn ari_examples() {
        close(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0, 1e-15);
        close(adjusted_rand_index(&[0, 0, 1, 1, 2], &[0; 5]).unwrap(), 0.0, 1e-15);
        // [[2,0],[0,2]] with one pair swapped: pair counts a = 0, b = c = d = 2,
        // so 2(ad − bc)/((a+b)(b+d)+(a+c)(c+d)) = -0.5
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        close(v, -0.5, 1e-15);
        assert!(adjusted_rand_index(&[0], &[0, 1]).is_err());
    }
}
