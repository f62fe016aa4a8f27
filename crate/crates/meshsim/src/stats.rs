//! Statistical kernel for selfish-node classification: per-row homogeneity
//! tests on transition matrices, similarity/dissimilarity scores,
//! single-linkage clustering, cooperation scores, and a permutation ANOVA
//! gate tying it all together.

use crate::engine::NodeId;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Number of FSM states, hence dimension of every transition matrix.
pub const FSM_STATES: usize = 8;

pub type TransitionCounts = [[u32; FSM_STATES]; FSM_STATES];

/// Outcome of one Pearson row test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowTest {
    /// Both rows empty; nothing to compare.
    NoSample,
    Tested { statistic: f64, critical: f64, reject: bool },
}

impl RowTest {
    pub fn rejects(&self) -> bool {
        matches!(
            self,
            RowTest::Tested { reject: true, .. }
        )
    }
}

/// Standard-normal quantile (Acklam's rational approximation, |rel err| < 1.2e-9).
fn normal_quantile(p: f64) -> f64 {
    assert!((0.0..1.0).contains(&p) && p > 0.0, "p in (0,1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Upper-alpha chi-square quantile via the Wilson-Hilferty cube
/// approximation.
pub fn chi2_quantile(df: usize, alpha: f64) -> f64 {
    let df = df as f64;
    let z = normal_quantile(1.0 - alpha);
    let term = 1.0 - 2.0 / (9.0 * df) + z * (2.0 / (9.0 * df)).sqrt();
    df * term * term * term
}

/// Pearson homogeneity test of two count rows with pooled expected counts.
/// Degrees of freedom are m-1 with m the full matrix dimension.
pub fn chi2_row_test(row_r: &[u32], row_s: &[u32], alpha: f64) -> RowTest {
    assert_eq!(row_r.len(), row_s.len());
    let m = row_r.len();
    let total_r: u64 = row_r.iter().map(|&c| c as u64).sum();
    let total_s: u64 = row_s.iter().map(|&c| c as u64).sum();
    if total_r == 0 && total_s == 0 {
        return RowTest::NoSample;
    }
    let pooled = (total_r + total_s) as f64;
    let mut statistic = 0.0;
    for j in 0..m {
        let col = (row_r[j] as u64 + row_s[j] as u64) as f64;
        if col == 0.0 {
            continue;
        }
        for (row, total) in [(row_r, total_r), (row_s, total_s)] {
            let expected = total as f64 * col / pooled;
            if expected > 0.0 {
                let diff = row[j] as f64 - expected;
                statistic += diff * diff / expected;
            }
        }
    }
    let critical = chi2_quantile(m - 1, alpha);
    RowTest::Tested {
        statistic,
        critical,
        reject: statistic > critical,
    }
}

/// Similarity of two transition matrices: alpha raised to the number of
/// rows on which the homogeneity hypothesis is rejected.
pub fn similarity(t_r: &TransitionCounts, t_s: &TransitionCounts, alpha: f64) -> (f64, usize) {
    let rejections = (0..FSM_STATES)
        .filter(|&i| chi2_row_test(&t_r[i], &t_s[i], alpha).rejects())
        .count();
    (alpha.powi(rejections as i32), rejections)
}

/// Symmetric similarity matrix over the analysed node set, unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub nodes: Vec<NodeId>,
    pub l: Vec<Vec<f64>>,
}

pub fn similarity_matrix(
    matrices: &BTreeMap<NodeId, TransitionCounts>,
    alpha: f64,
) -> SimilarityMatrix {
    let nodes: Vec<NodeId> = matrices.keys().copied().collect();
    let n = nodes.len();
    let mut l = vec![vec![1.0; n]; n];
    for r in 0..n {
        for s in (r + 1)..n {
            let (v, _) = similarity(&matrices[&nodes[r]], &matrices[&nodes[s]], alpha);
            l[r][s] = v;
            l[s][r] = v;
        }
    }
    SimilarityMatrix { nodes, l }
}

/// Consistency-based dissimilarity of r and s judged through all third
/// parties. A vanishing denominator (a node with all-zero similarities)
/// maps to maximal dissimilarity.
pub fn dissimilarity(l: &[Vec<f64>], r: usize, s: usize) -> f64 {
    let n = l.len();
    let mut n_rs = 0.0;
    let mut n_r = 0.0;
    let mut n_s = 0.0;
    for t in 0..n {
        if t == r || t == s {
            continue;
        }
        n_rs += l[r][t].min(l[s][t]);
        n_r += l[r][t];
        n_s += l[s][t];
    }
    if n_r <= 0.0 || n_s <= 0.0 {
        return 1.0;
    }
    (1.0 - (n_rs * n_rs) / (n_r * n_s)).clamp(0.0, 1.0)
}

pub fn dissimilarity_matrix(l: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = l.len();
    let mut d = vec![vec![0.0; n]; n];
    for r in 0..n {
        for s in (r + 1)..n {
            let v = dissimilarity(l, r, s);
            d[r][s] = v;
            d[s][r] = v;
        }
    }
    d
}

/// Agglomerative single-linkage clustering down to k clusters. Merge ties
/// break toward the lexicographically smallest pair of smallest member ids.
pub fn single_linkage_cluster(d: &[Vec<f64>], k: usize) -> Result<Vec<Vec<usize>>, String> {
    let n = d.len();
    if k == 0 || k > n {
        return Err(format!("cannot form {k} clusters from {n} nodes"));
    }
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    while clusters.len() > k {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let mut min_d = f64::INFINITY;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        min_d = min_d.min(d[i][j]);
                    }
                }
                let key = (clusters[a][0], clusters[b][0]);
                let better = match best {
                    None => true,
                    Some((bd, bi, bj)) => {
                        min_d < bd
                            || (min_d == bd && key < (clusters[bi][0], clusters[bj][0]))
                    }
                };
                if better {
                    best = Some((min_d, a, b));
                }
            }
        }
        let (_, a, b) = best.unwrap();
        let merged = clusters.remove(b);
        clusters[a].extend(merged);
        clusters[a].sort_unstable();
        clusters.sort_by_key(|c| c[0]);
    }
    Ok(clusters)
}

/// Cooperation score: mean similarity to the cooperative seed minus mean
/// similarity to the selfish seed.
pub fn cooperation_scores(
    l: &[Vec<f64>],
    g_seed: &[usize],
    b_seed: &[usize],
) -> Result<Vec<f64>, String> {
    if g_seed.is_empty() || b_seed.is_empty() {
        return Err("seed sets must be non-empty".into());
    }
    let n = l.len();
    let mut scores = Vec::with_capacity(n);
    for r in 0..n {
        let g: f64 = g_seed.iter().map(|&t| l[r][t]).sum::<f64>() / g_seed.len() as f64;
        let b: f64 = b_seed.iter().map(|&t| l[r][t]).sum::<f64>() / b_seed.len() as f64;
        scores.push(g - b);
    }
    Ok(scores)
}

fn between_cluster_stat(scores: &[f64], sizes: &[usize]) -> f64 {
    let n = scores.len() as f64;
    let grand: f64 = scores.iter().sum::<f64>() / n;
    let mut stat = 0.0;
    let mut offset = 0;
    for &size in sizes {
        let mean: f64 = scores[offset..offset + size].iter().sum::<f64>() / size as f64;
        stat += size as f64 * (mean - grand) * (mean - grand);
        offset += size;
    }
    stat
}

fn multinomial_count(sizes: &[usize], cap: u64) -> Option<u64> {
    // Number of distinct labelings: n! / prod(n_c!), computed incrementally
    // as a product of binomials; bails out above cap.
    let mut total: u64 = sizes.iter().sum::<usize>() as u64;
    let mut count: u64 = 1;
    for &size in &sizes[..sizes.len() - 1] {
        for i in 0..size as u64 {
            count = count.checked_mul(total - i)?;
            count /= i + 1;
            if count > cap.saturating_mul(1_000_000) {
                return None;
            }
        }
        // divide by size! incrementally above; binomial already exact
        total -= size as u64;
        if count > cap {
            return None;
        }
    }
    Some(count)
}

fn enumerate_assignments(
    scores: &[f64],
    sizes: &[usize],
    observed: f64,
    eps: f64,
) -> (u64, u64, u64) {
    // Recursively assign score indices to clusters in order; count
    // (greater, equal, total) of the between-cluster statistic.
    fn rec(
        scores: &[f64],
        sizes: &[usize],
        cluster: usize,
        remaining: &mut Vec<usize>,
        picked: &mut Vec<f64>,
        observed: f64,
        eps: f64,
        acc: &mut (u64, u64, u64),
    ) {
        if cluster == sizes.len() {
            let stat = between_cluster_stat(picked, sizes);
            acc.2 += 1;
            if stat > observed + eps {
                acc.0 += 1;
            } else if (stat - observed).abs() <= eps {
                acc.1 += 1;
            }
            return;
        }
        let size = sizes[cluster];
        if cluster == sizes.len() - 1 {
            for &idx in remaining.iter() {
                picked.push(scores[idx]);
            }
            rec(scores, sizes, cluster + 1, &mut vec![], picked, observed, eps, acc);
            for _ in 0..size {
                picked.pop();
            }
            return;
        }
        // choose `size` indices out of `remaining`
        let m = remaining.len();
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            let mut rest = Vec::with_capacity(m - size);
            let mut ci = 0;
            for (pos, &idx) in remaining.iter().enumerate() {
                if ci < size && combo[ci] == pos {
                    picked.push(scores[idx]);
                    ci += 1;
                } else {
                    rest.push(idx);
                }
            }
            rec(scores, sizes, cluster + 1, &mut rest, picked, observed, eps, acc);
            for _ in 0..size {
                picked.pop();
            }
            // next combination
            let mut i = size;
            loop {
                if i == 0 {
                    return;
                }
                i -= 1;
                if combo[i] != i + m - size {
                    combo[i] += 1;
                    for j in i + 1..size {
                        combo[j] = combo[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }
    let mut acc = (0, 0, 0);
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    rec(scores, sizes, 0, &mut remaining, &mut Vec::new(), observed, eps, &mut acc);
    acc
}

/// Permutation-test p-value (mid-p) of the between-cluster variance of the
/// grouped scores. Exact enumeration when the labeling space is small,
/// otherwise 10^4 seeded resamples.
pub fn anova_p(clusters: &[Vec<f64>], seed: u64) -> Result<f64, String> {
    if clusters.len() < 2 || clusters.iter().any(|c| c.is_empty()) {
        return Err("need at least two non-empty clusters".into());
    }
    let sizes: Vec<usize> = clusters.iter().map(|c| c.len()).collect();
    let scores: Vec<f64> = clusters.iter().flatten().copied().collect();
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return Ok(1.0);
    }
    let observed = between_cluster_stat(&scores, &sizes);
    let eps = 1e-9 * observed.abs().max(1e-12);

    const EXACT_CAP: u64 = 20_000;
    if let Some(total) = multinomial_count(&sizes, EXACT_CAP) {
        if total <= EXACT_CAP {
            let (greater, equal, count) = enumerate_assignments(&scores, &sizes, observed, eps);
            debug_assert_eq!(count, total);
            return Ok((greater as f64 + 0.5 * equal as f64) / count as f64);
        }
    }

    const RESAMPLES: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = scores.clone();
    let mut greater = 0u64;
    let mut equal = 0u64;
    for _ in 0..RESAMPLES {
        // Fisher-Yates
        for i in (1..shuffled.len()).rev() {
            let j = rng.gen_range(0..=i);
            shuffled.swap(i, j);
        }
        let stat = between_cluster_stat(&shuffled, &sizes);
        if stat > observed + eps {
            greater += 1;
        } else if (stat - observed).abs() <= eps {
            equal += 1;
        }
    }
    Ok((greater as f64 + 0.5 * equal as f64) / RESAMPLES as f64)
}

/// Regularized incomplete beta function by continued fraction; standard
/// Lentz evaluation, accurate to ~1e-12 over the F-tail range used here.
fn betai(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    fn ln_gamma(z: f64) -> f64 {
        // Lanczos g=7, n=9.
        const C: [f64; 9] = [
            0.999_999_999_999_809_93,
            676.520_368_121_885_1,
            -1_259.139_216_722_402_8,
            771.323_428_777_653_13,
            -176.615_029_162_140_6,
            12.507_343_278_686_905,
            -0.138_571_095_265_720_12,
            9.984_369_578_019_572e-6,
            1.505_632_735_149_311_6e-7,
        ];
        if z < 0.5 {
            let pi = std::f64::consts::PI;
            return (pi / (pi * z).sin()).ln() - ln_gamma(1.0 - z);
        }
        let z = z - 1.0;
        let mut x = C[0];
        for (i, &c) in C.iter().enumerate().skip(1) {
            x += c / (z + i as f64);
        }
        let t = z + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + x.ln()
    }
    fn betacf(a: f64, b: f64, x: f64) -> f64 {
        const MAX_ITER: usize = 300;
        const EPS: f64 = 3e-14;
        const FPMIN: f64 = 1e-300;
        let qab = a + b;
        let qap = a + 1.0;
        let qam = a - 1.0;
        let mut c = 1.0;
        let mut d = 1.0 - qab * x / qap;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        d = 1.0 / d;
        let mut h = d;
        for m in 1..=MAX_ITER {
            let m = m as f64;
            let m2 = 2.0 * m;
            let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
            d = 1.0 + aa * d;
            if d.abs() < FPMIN {
                d = FPMIN;
            }
            c = 1.0 + aa / c;
            if c.abs() < FPMIN {
                c = FPMIN;
            }
            d = 1.0 / d;
            h *= d * c;
            let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
            d = 1.0 + aa * d;
            if d.abs() < FPMIN {
                d = FPMIN;
            }
            c = 1.0 + aa / c;
            if c.abs() < FPMIN {
                c = FPMIN;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < EPS {
                break;
            }
        }
        h
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * betacf(a, b, x) / a
    } else {
        1.0 - front * betacf(b, a, 1.0 - x) / b
    }
}

/// Classical one-way ANOVA tail probability of the grouped scores: the
/// continuous-gate alternative to [`anova_p`]. A permutation p-value cannot
/// drop below half the reciprocal labeling count, which blocks singleton
/// clusters at realistic neighbour counts; the F tail has no such floor.
pub fn anova_f_p(clusters: &[Vec<f64>]) -> Result<f64, String> {
    if clusters.len() < 2 || clusters.iter().any(|c| c.is_empty()) {
        return Err("need at least two non-empty clusters".into());
    }
    let scores: Vec<f64> = clusters.iter().flatten().copied().collect();
    let n = scores.len();
    let k = clusters.len();
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return Ok(1.0);
    }
    if n <= k {
        // No residual degrees of freedom.
        return Ok(1.0);
    }
    let grand = scores.iter().sum::<f64>() / n as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for c in clusters {
        let mean = c.iter().sum::<f64>() / c.len() as f64;
        ss_between += c.len() as f64 * (mean - grand) * (mean - grand);
        for s in c {
            ss_within += (s - mean) * (s - mean);
        }
    }
    let d1 = (k - 1) as f64;
    let d2 = (n - k) as f64;
    if ss_within <= 1e-300 {
        return Ok(if ss_between > 0.0 { 0.0 } else { 1.0 });
    }
    let f = (ss_between / d1) / (ss_within / d2);
    // P(F > f) = I_{d2/(d2 + d1 f)}(d2/2, d1/2)
    let x = d2 / (d2 + d1 * f);
    Ok(betai(d2 / 2.0, d1 / 2.0, x).clamp(0.0, 1.0))
}

/// Per-node verdict of one classification round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Cooperative,
    Selfish,
    Unknown,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Cooperative => "cooperative",
            Label::Selfish => "selfish",
            Label::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Classification {
    pub labels: BTreeMap<NodeId, Label>,
    pub scores: BTreeMap<NodeId, f64>,
    pub chosen_k: Option<usize>,
    pub p_k: Option<f64>,
    pub insufficient_data: bool,
}

/// Which significance machinery gates cluster acceptance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnovaGate {
    /// Classical F tail; continuous p-values with no combinatorial floor.
    #[default]
    FTest,
    /// Label-permutation mid-p of the between-cluster variance.
    Permutation,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifyParams {
    pub alpha: f64,
    pub beta: f64,
    pub k_max: usize,
    pub gate: AnovaGate,
}

/// Full classification loop: similarity and dissimilarity matrices, then an
/// ascending-k clustering sweep gated by the permutation ANOVA.
pub fn classify(
    matrices: &BTreeMap<NodeId, TransitionCounts>,
    params: ClassifyParams,
    anova_seed: u64,
) -> Classification {
    let nodes: Vec<NodeId> = matrices.keys().copied().collect();
    if nodes.len() < 3 {
        return Classification {
            labels: nodes.iter().map(|&n| (n, Label::Unknown)).collect(),
            scores: BTreeMap::new(),
            chosen_k: None,
            p_k: None,
            insufficient_data: true,
        };
    }
    let sim = similarity_matrix(matrices, params.alpha);
    let l = &sim.l;
    let d = dissimilarity_matrix(l);
    let n = nodes.len();

    // Mean similarity to everyone else ranks clusters before any
    // cooperation score exists.
    let base_sim: Vec<f64> = (0..n)
        .map(|r| {
            (0..n)
                .filter(|&t| t != r)
                .map(|t| l[r][t])
                .sum::<f64>()
                / (n - 1) as f64
        })
        .collect();

    let mut prev_p: Option<f64> = None;
    for k in 2..=params.k_max.min(n) {
        let clusters = match single_linkage_cluster(&d, k) {
            Ok(c) => c,
            Err(_) => break,
        };
        let cluster_base: Vec<f64> = clusters
            .iter()
            .map(|c| c.iter().map(|&i| base_sim[i]).sum::<f64>() / c.len() as f64)
            .collect();
        let g_idx = cluster_base
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        let b_idx = cluster_base
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        if g_idx == b_idx {
            continue;
        }
        let scores =
            cooperation_scores(l, &clusters[g_idx], &clusters[b_idx]).expect("non-empty seeds");
        let grouped: Vec<Vec<f64>> = clusters
            .iter()
            .map(|c| c.iter().map(|&i| scores[i]).collect())
            .collect();
        let p = match params.gate {
            AnovaGate::FTest => anova_f_p(&grouped),
            AnovaGate::Permutation => anova_p(&grouped, anova_seed),
        };
        let p = match p {
            Ok(p) => p,
            Err(_) => continue,
        };
        if p < params.beta {
            let cluster_mean: Vec<f64> = grouped
                .iter()
                .map(|g| g.iter().sum::<f64>() / g.len() as f64)
                .collect();
            let selfish = cluster_mean
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            let coop = cluster_mean
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            // Consistency guard: the score ranking must agree with the raw
            // similarity ranking that seeded it, otherwise the split is
            // noise structure rather than behaviour.
            if selfish != b_idx || coop != g_idx {
                prev_p = Some(p);
                continue;
            }
            let mut labels = BTreeMap::new();
            for (ci, members) in clusters.iter().enumerate() {
                let label = if ci == selfish {
                    Label::Selfish
                } else if ci == coop {
                    Label::Cooperative
                } else {
                    Label::Unknown
                };
                for &m in members {
                    labels.insert(nodes[m], label);
                }
            }
            return Classification {
                labels,
                scores: nodes.iter().copied().zip(scores).collect(),
                chosen_k: Some(k),
                p_k: Some(p),
                insufficient_data: false,
            };
        }
        if let Some(prev) = prev_p {
            if p > prev {
                break;
            }
        }
        prev_p = Some(p);
    }
    Classification {
        labels: nodes.iter().map(|&n| (n, Label::Cooperative)).collect(),
        scores: BTreeMap::new(),
        chosen_k: None,
        p_k: prev_p,
        insufficient_data: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_rows_give_zero_statistic() {
        let r = [10, 5, 3, 0, 0, 0, 0, 2];
        match chi2_row_test(&r, &r, 0.05) {
            RowTest::Tested { statistic, reject, .. } => {
                assert!(statistic.abs() < 1e-12);
                assert!(!reject);
            }
            RowTest::NoSample => panic!("expected a test"),
        }
    }

    #[test]
    fn disjoint_two_cell_rows_score_twenty() {
        // Hand evaluation with pooled expected counts: every expected cell is
        // 5, each observed is 10 or 0, so chi2 = 4 * 25/5 = 20.
        let r = [10, 0];
        let s = [0, 10];
        match chi2_row_test(&r, &s, 0.01) {
            RowTest::Tested { statistic, reject, .. } => {
                assert!((statistic - 20.0).abs() < 1e-9);
                assert!(reject);
            }
            RowTest::NoSample => panic!(),
        }
    }

    #[test]
    fn empty_rows_are_no_sample() {
        let z = [0u32; 8];
        assert_eq!(chi2_row_test(&z, &z, 0.05), RowTest::NoSample);
        assert!(!chi2_row_test(&z, &z, 0.05).rejects());
    }

    #[test]
    fn one_empty_row_never_rejects() {
        let r = [10, 5, 3, 0, 0, 0, 0, 2];
        let z = [0u32; 8];
        assert!(!chi2_row_test(&r, &z, 0.05).rejects());
    }

    #[test]
    fn doubling_counts_doubles_statistic() {
        let r = [12, 4, 9, 1, 0, 3, 7, 2];
        let s = [5, 8, 2, 4, 1, 0, 9, 3];
        let r2 = r.map(|c| c * 2);
        let s2 = s.map(|c| c * 2);
        let (RowTest::Tested { statistic: a, .. }, RowTest::Tested { statistic: b, .. }) =
            (chi2_row_test(&r, &s, 0.05), chi2_row_test(&r2, &s2, 0.05))
        else {
            panic!()
        };
        assert!((2.0 * a - b).abs() < 1e-9);
    }

    #[test]
    fn similarity_is_alpha_to_rejections() {
        let mut t_r = [[0u32; 8]; 8];
        let mut t_s = [[0u32; 8]; 8];
        // Two rows in violent disagreement, the rest identical.
        t_r[0] = [50, 0, 0, 0, 0, 0, 0, 0];
        t_s[0] = [0, 50, 0, 0, 0, 0, 0, 0];
        t_r[2] = [0, 0, 40, 0, 0, 0, 0, 0];
        t_s[2] = [0, 0, 0, 40, 0, 0, 0, 0];
        t_r[5] = [1, 2, 3, 4, 0, 0, 0, 0];
        t_s[5] = [1, 2, 3, 4, 0, 0, 0, 0];
        let (l, s) = similarity(&t_r, &t_s, 0.01);
        assert_eq!(s, 2);
        assert!((l - 1e-4).abs() < 1e-12);
        let (l0, s0) = similarity(&t_r, &t_r, 0.01);
        assert_eq!(s0, 0);
        assert_eq!(l0, 1.0);
    }

    #[test]
    fn state_relabeling_preserves_similarity() {
        let mut t_r = [[0u32; 8]; 8];
        let mut t_s = [[0u32; 8]; 8];
        let mut v = 1u32;
        for i in 0..8 {
            for j in 0..8 {
                t_r[i][j] = (v * 7) % 13;
                t_s[i][j] = (v * 5) % 11;
                v += 1;
            }
        }
        let perm = [3usize, 0, 6, 1, 7, 2, 5, 4];
        let relabel = |t: &TransitionCounts| {
            let mut out = [[0u32; 8]; 8];
            for i in 0..8 {
                for j in 0..8 {
                    out[perm[i]][perm[j]] = t[i][j];
                }
            }
            out
        };
        let (l, s) = similarity(&t_r, &t_s, 0.05);
        let (lp, sp) = similarity(&relabel(&t_r), &relabel(&t_s), 0.05);
        assert_eq!(s, sp);
        assert_eq!(l, lp);
    }

    #[test]
    fn dissimilarity_agreement_and_extremes() {
        // Identical similarity profiles: zero dissimilarity.
        let n = 5;
        let mut l = vec![vec![0.7; n]; n];
        for (i, row) in l.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        assert!(dissimilarity(&l, 0, 1) < 1e-12);

        // One node similar to everyone, the other barely: d = 1 - eps.
        let eps = 0.01;
        let k = 4;
        let mut l = vec![vec![0.0; k + 2]; k + 2];
        for t in 2..k + 2 {
            l[0][t] = 1.0;
            l[t][0] = 1.0;
            l[1][t] = eps;
            l[t][1] = eps;
        }
        let d = dissimilarity(&l, 0, 1);
        assert!((d - (1.0 - eps)).abs() < 1e-9, "d = {d}");

        // All-zero similarities: maximal dissimilarity by policy.
        let l = vec![vec![0.0; 4]; 4];
        assert_eq!(dissimilarity(&l, 0, 1), 1.0);
    }

    #[test]
    fn single_linkage_extremes_and_blobs() {
        let n = 6;
        // Two well-separated blobs {0,1,2} and {3,4,5}.
        let mut d = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    d[i][j] = if (i < 3) == (j < 3) { 0.1 } else { 0.9 };
                }
            }
        }
        assert_eq!(single_linkage_cluster(&d, n).unwrap().len(), n);
        assert_eq!(single_linkage_cluster(&d, 1).unwrap().len(), 1);
        let two = single_linkage_cluster(&d, 2).unwrap();
        assert_eq!(two, vec![vec![0, 1, 2], vec![3, 4, 5]]);
        assert!(single_linkage_cluster(&d, 7).is_err());
    }

    #[test]
    fn cooperation_score_extremes() {
        let n = 6;
        let mut l = vec![vec![0.5; n]; n];
        for (i, row) in l.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        // Node 0 fully similar to {1,2}, fully dissimilar to {3,4}.
        l[0][1] = 1.0;
        l[0][2] = 1.0;
        l[0][3] = 0.0;
        l[0][4] = 0.0;
        let scores = cooperation_scores(&l, &[1, 2], &[3, 4]).unwrap();
        assert!((scores[0] - 1.0).abs() < 1e-12);
        let scores = cooperation_scores(&l, &[3, 4], &[1, 2]).unwrap();
        assert!((scores[0] + 1.0).abs() < 1e-12);
        // Uniform similarities: zero everywhere (off-diagonal seeds).
        let l = vec![vec![0.3; n]; n];
        let scores = cooperation_scores(&l, &[1, 2], &[3, 4]).unwrap();
        assert!(scores.iter().all(|s| s.abs() < 1e-12));
        assert!(cooperation_scores(&l, &[], &[1]).is_err());
    }

    #[test]
    fn anova_separated_clusters_significant() {
        // Exact enumeration over C(6,3)=20 labelings. Mid-p: no labeling
        // strictly exceeds the observed statistic, two tie with it.
        let p = anova_p(&[vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0]], 1).unwrap();
        assert!((p - 0.05).abs() < 1e-12, "p = {p}");
    }

    #[test]
    fn anova_identical_scores_p_one() {
        let p = anova_p(&[vec![0.4, 0.4], vec![0.4, 0.4, 0.4]], 1).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn anova_single_cluster_rejected() {
        assert!(anova_p(&[vec![1.0, 2.0]], 1).is_err());
        assert!(anova_p(&[vec![1.0], vec![]], 1).is_err());
    }

    #[test]
    fn anova_matches_exact_enumeration_convention() {
        // A generic 3v3 instance: observed split is the extreme one; exact
        // enumeration gives mid-p = (0 + 0.5*2)/20.
        let p = anova_p(&[vec![0.1, 0.2, 0.15], vec![0.9, 1.1, 1.05]], 7).unwrap();
        assert!((p - 0.05).abs() < 1e-12);
    }

    #[test]
    fn classify_insufficient_neighbors() {
        let mut m = BTreeMap::new();
        m.insert(NodeId(1), [[0u32; 8]; 8]);
        m.insert(NodeId(2), [[0u32; 8]; 8]);
        let c = classify(
            &m,
            ClassifyParams { alpha: 0.01, beta: 0.05, k_max: 4, gate: AnovaGate::FTest },
            9,
        );
        assert!(c.insufficient_data);
        assert!(c.labels.values().all(|&l| l == Label::Unknown));
    }

    #[test]
    fn classify_flags_deviant_row_profile() {
        // Five nodes share a transition profile; one concentrates row 2 mass
        // on the timeout column instead.
        let mut honest = [[0u32; 8]; 8];
        honest[0] = [0, 0, 30, 20, 0, 0, 0, 0];
        honest[2] = [0, 0, 0, 40, 2, 0, 6, 0];
        honest[3] = [0, 0, 0, 10, 4, 20, 8, 0];
        let mut selfish = [[0u32; 8]; 8];
        selfish[0] = [0, 0, 50, 0, 0, 0, 0, 0];
        selfish[2] = [0, 0, 0, 0, 48, 0, 0, 0];
        let mut m = BTreeMap::new();
        for id in 0..5u16 {
            m.insert(NodeId(id), honest);
        }
        m.insert(NodeId(5), selfish);
        let c = classify(
            &m,
            ClassifyParams { alpha: 0.01, beta: 0.05, k_max: 4, gate: AnovaGate::FTest },
            11,
        );
        assert_eq!(c.labels[&NodeId(5)], Label::Selfish);
        for id in 0..5u16 {
            assert_eq!(c.labels[&NodeId(id)], Label::Cooperative, "node {id}");
        }
    }

    #[test]
    fn classify_all_homogeneous_nodes_cooperative() {
        let mut profile = [[0u32; 8]; 8];
        profile[0] = [0, 0, 25, 25, 0, 0, 0, 0];
        profile[2] = [0, 0, 0, 40, 2, 4, 4, 0];
        let mut m = BTreeMap::new();
        for id in 0..6u16 {
            m.insert(NodeId(id), profile);
        }
        let c = classify(
            &m,
            ClassifyParams { alpha: 0.01, beta: 0.05, k_max: 4, gate: AnovaGate::FTest },
            13,
        );
        assert!(c.chosen_k.is_none());
        assert!(c.labels.values().all(|&l| l == Label::Cooperative));
    }

    #[test]
    fn f_gate_matches_reference_distribution() {
        use statrs::distribution::{ContinuousCDF, FisherSnedecor};
        // Spot-check the incomplete-beta tail against statrs.
        for (k, sizes, scores) in [
            (2usize, vec![3usize, 3], vec![0.1, 0.2, 0.3, 0.5, 0.6, 0.9]),
            (3, vec![2, 2, 2], vec![0.0, 0.1, 0.4, 0.45, 0.8, 1.0]),
            (2, vec![4, 2], vec![0.0, 0.05, 0.1, 0.12, 0.6, 0.7]),
        ] {
            let mut clusters = Vec::new();
            let mut offset = 0;
            for s in &sizes {
                clusters.push(scores[offset..offset + s].to_vec());
                offset += s;
            }
            let n = scores.len();
            let grand = scores.iter().sum::<f64>() / n as f64;
            let mut ssb = 0.0;
            let mut ssw = 0.0;
            for c in &clusters {
                let m = c.iter().sum::<f64>() / c.len() as f64;
                ssb += c.len() as f64 * (m - grand) * (m - grand);
                for s in c {
                    ssw += (s - m) * (s - m);
                }
            }
            let d1 = (k - 1) as f64;
            let d2 = (n - k) as f64;
            let f = (ssb / d1) / (ssw / d2);
            let dist = FisherSnedecor::new(d1, d2).unwrap();
            let expected = 1.0 - dist.cdf(f);
            let got = anova_f_p(&clusters).unwrap();
            assert!(
                (got - expected).abs() < 1e-9,
                "k={k}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn f_gate_extremes() {
        // Perfectly separated, zero within-variance: certainty.
        assert_eq!(
            anova_f_p(&[vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0]]).unwrap(),
            0.0
        );
        // Identical scores: no structure.
        assert_eq!(anova_f_p(&[vec![0.4, 0.4], vec![0.4, 0.4]]).unwrap(), 1.0);
        assert!(anova_f_p(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn f_gate_calibration_on_iid_scores() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let beta = 0.05;
        let reps = 1000;
        let mut rejects = 0;
        for _ in 0..reps {
            // Gaussian-ish i.i.d. scores via CLT of uniforms.
            let draw = |rng: &mut ChaCha8Rng| -> f64 {
                (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0
            };
            let a: Vec<f64> = (0..4).map(|_| draw(&mut rng)).collect();
            let b: Vec<f64> = (0..4).map(|_| draw(&mut rng)).collect();
            if anova_f_p(&[a, b]).unwrap() < beta {
                rejects += 1;
            }
        }
        let rate = rejects as f64 / reps as f64;
        assert!((0.02..=0.09).contains(&rate), "rejection rate {rate}");
    }

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn wilson_hilferty_close_to_exact() {
        // Reference quantiles (R qchisq): df=7 a=0.05 -> 14.0671;
        // df=1 a=0.01 -> 6.6349; df=7 a=0.01 -> 18.4753.
        for (df, alpha, exact) in [(7, 0.05, 14.0671), (1, 0.01, 6.6349), (7, 0.01, 18.4753)] {
            let wh = chi2_quantile(df, alpha);
            assert!(
                (wh - exact).abs() / exact < 0.02,
                "df={df} alpha={alpha}: {wh} vs {exact}"
            );
        }
    }
}
