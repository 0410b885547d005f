use std::collections::{BTreeMap, HashSet};

use super::HarnessError;
use crate::sampler::SubsetSelection;

/// Mean over architectures of `1 - acc_subset / acc_full`.
pub fn rar(subset: &BTreeMap<String, f64>, full: &BTreeMap<String, f64>) -> Result<f64, HarnessError> {
    if subset.is_empty() {
        return Err(HarnessError::Metric("no architectures to average".into()));
    }
    if subset.len() != full.len() {
        return Err(HarnessError::Metric(format!(
            "{} subset accuracies but {} full accuracies",
            subset.len(),
            full.len()
        )));
    }
    let mut total = 0.0;
    for (arch, acc) in subset {
        let f = *full
            .get(arch)
            .ok_or_else(|| HarnessError::Metric(format!("no full accuracy for {arch}")))?;
        if !(f > 0.0) {
            return Err(HarnessError::Metric(format!("full accuracy of {arch} is {f}")));
        }
        total += 1.0 - acc / f;
    }
    Ok(total / subset.len() as f64)
}

/// `t_full / (mean selection time + mean subset training time)`.
pub fn speedup(t_full: f64, t_select: &[f64], t_train: &[f64]) -> Result<f64, HarnessError> {
    if !(t_full > 0.0) {
        return Err(HarnessError::Metric(format!(
            "full training time {t_full} is not positive"
        )));
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let denom = mean(t_select) + mean(t_train);
    if !(denom > 0.0) {
        return Err(HarnessError::Metric(
            "selection plus training time is zero".into(),
        ));
    }
    Ok(t_full / denom)
}

/// Architecture ids sorted by accuracy, best first; equal accuracies are
/// ordered by id.
pub fn ranking(acc: &BTreeMap<String, f64>) -> Vec<String> {
    let mut ids: Vec<&String> = acc.keys().collect();
    ids.sort_by(|a, b| acc[*b].total_cmp(&acc[*a]).then_with(|| a.cmp(b)));
    ids.into_iter().cloned().collect()
}

pub fn jaccard<T: Eq + std::hash::Hash>(a: &[T], b: &[T]) -> f64 {
    let sa: HashSet<&T> = a.iter().collect();
    let sb: HashSet<&T> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankingMetrics {
    pub kendall_tau: f64,
    pub jaccard: f64,
    pub k: usize,
}

/// Jaccard of the two top-`k` sets and Kendall tau of the two rankings
/// restricted to the union of those sets.
pub fn ranking_metrics(
    full: &BTreeMap<String, f64>,
    subset: &BTreeMap<String, f64>,
    k: usize,
) -> Result<RankingMetrics, HarnessError> {
    if full.len() != subset.len() || full.keys().any(|a| !subset.contains_key(a)) {
        return Err(HarnessError::Metric(
            "rankings cover different architectures".into(),
        ));
    }
    if k == 0 || k > full.len() {
        return Err(HarnessError::Metric(format!(
            "k = {k} is outside 1..={}",
            full.len()
        )));
    }
    let rf = ranking(full);
    let rs = ranking(subset);
    let top_f = &rf[..k];
    let top_s = &rs[..k];
    let union: Vec<&String> = {
        let mut seen = HashSet::new();
        top_f.iter().chain(top_s).filter(|a| seen.insert(*a)).collect()
    };
    let pos = |r: &[String]| -> BTreeMap<String, usize> {
        r.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect()
    };
    let (pf, ps) = (pos(&rf), pos(&rs));
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..union.len() {
        for j in i + 1..union.len() {
            let (a, b) = (union[i], union[j]);
            let df = pf[a] < pf[b];
            let ds = ps[a] < ps[b];
            if df == ds {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let pairs = concordant + discordant;
    let kendall_tau = if pairs == 0 {
        1.0
    } else {
        (concordant - discordant) as f64 / pairs as f64
    };
    Ok(RankingMetrics {
        kendall_tau,
        jaccard: jaccard(top_f, top_s),
        k,
    })
}

/// Pairwise Jaccard of the chosen index sets.
pub fn subset_overlap(selections: &[SubsetSelection]) -> Result<Vec<Vec<f64>>, HarnessError> {
    if let Some(first) = selections.first() {
        if let Some(s) = selections.iter().find(|s| s.b != first.b) {
            return Err(HarnessError::Metric(format!(
                "selection for {} has b = {}, expected {}",
                s.arch_id, s.b, first.b
            )));
        }
    }
    let n = selections.len();
    let mut m = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = jaccard(&selections[i].indices, &selections[j].indices);
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Ok(m)
}

/// Mean of the off-diagonal entries; `None` for fewer than two selections.
pub fn mean_off_diagonal(m: &[Vec<f64>]) -> Option<f64> {
    let n = m.len();
    if n < 2 {
        return None;
    }
    let mut total = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                total += v;
            }
        }
    }
    Some(total / (n * (n - 1)) as f64)
}

pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SignTest {
    /// Pairs where the first value is strictly smaller.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`.
    pub p_value: f64,
}

/// Paired one-sided sign test of `a < b`; ties are dropped.
pub fn sign_test(a: &[f64], b: &[f64]) -> Result<SignTest, HarnessError> {
    if a.len() != b.len() {
        return Err(HarnessError::Metric(format!(
            "sign test needs paired values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let ties = a.len() - wins - losses;
    let n = wins + losses;
    let mut p = 0.0;
    for k in wins..=n {
        p += binomial(n, k) * 0.5f64.powi(n as i32);
    }
    Ok(SignTest {
        wins,
        losses,
        ties,
        p_value: p.min(1.0),
    })
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn accs(v: &[(&str, f64)]) -> BTreeMap<String, f64> {
        v.iter().map(|(a, x)| (a.to_string(), *x)).collect()
    }

    #[test]
    fn rar_examples() {
        let full = accs(&[("a", 0.8), ("b", 0.5)]);
        assert_eq!(rar(&full, &full).unwrap(), 0.0);
        let half = accs(&[("a", 0.4), ("b", 0.25)]);
        assert!((rar(&half, &full).unwrap() - 0.5).abs() < 1e-12);
        let mixed = accs(&[("a", 0.72), ("b", 0.35)]);
        assert!((rar(&mixed, &full).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn rar_errors() {
        let full = accs(&[("a", 0.8), ("b", 0.0)]);
        assert!(rar(&accs(&[("a", 0.8), ("c", 0.1)]), &full).is_err());
        assert!(rar(&accs(&[("a", 0.8), ("b", 0.1)]), &full).is_err());
        assert!(rar(&accs(&[("a", 0.8)]), &full).is_err());
    }

    #[test]
    fn speedup_examples() {
        assert!((speedup(10.0, &[4.0], &[6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((speedup(10.0, &[0.0, 0.0], &[1.0, 1.0]).unwrap() - 10.0).abs() < 1e-12);
        let base = speedup(10.0, &[1.0], &[2.0]).unwrap();
        assert!(speedup(10.0, &[2.0], &[2.0]).unwrap() < base);
        assert!(speedup(10.0, &[0.0], &[0.0]).is_err());
        assert!(speedup(0.0, &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ranking_examples() {
        let full = accs(&[("a", 0.9), ("b", 0.8), ("c", 0.7), ("d", 0.6)]);
        let m = ranking_metrics(&full, &full, 4).unwrap();
        assert_eq!((m.kendall_tau, m.jaccard), (1.0, 1.0));
        let swapped = accs(&[("a", 0.8), ("b", 0.9), ("c", 0.7), ("d", 0.6)]);
        let m = ranking_metrics(&full, &swapped, 4).unwrap();
        assert!((m.kendall_tau - 2.0 / 3.0).abs() < 1e-12);
        let reversed = accs(&[("a", 0.1), ("b", 0.2), ("c", 0.7), ("d", 0.6)]);
        assert_eq!(ranking_metrics(&full, &reversed, 2).unwrap().jaccard, 0.0);
        assert!(ranking_metrics(&full, &full, 5).is_err());
    }

    #[test]
    fn ties_break_by_id() {
        let acc = accs(&[("c", 0.5), ("a", 0.5), ("b", 0.9)]);
        assert_eq!(ranking(&acc), vec!["b", "a", "c"]);
    }

    fn sel(arch: &str, idx: &[usize]) -> SubsetSelection {
        SubsetSelection {
            arch_id: arch.into(),
            method: "x".into(),
            b: idx.len(),
            seed: 0,
            indices: idx.to_vec(),
            pi_digest: String::new(),
            config_digest: String::new(),
        }
    }

    #[test]
    fn overlap_examples() {
        let m = subset_overlap(&[sel("a", &[0, 1, 2, 3]), sel("b", &[0, 1, 2, 3])]).unwrap();
        assert_eq!(m, vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
        let m = subset_overlap(&[sel("a", &[0, 1]), sel("b", &[2, 3])]).unwrap();
        assert_eq!(m[0][1], 0.0);
        let m = subset_overlap(&[sel("a", &[0, 1, 2, 3]), sel("b", &[2, 3, 4, 5])]).unwrap();
        assert!((m[0][1] - 1.0 / 3.0).abs() < 1e-12);
        assert!(subset_overlap(&[sel("a", &[0]), sel("b", &[1, 2])]).is_err());
    }

    #[test]
    fn sign_test_matches_binomial_tail() {
        let a = vec![0.0; 20];
        let mut b = vec![1.0; 14];
        b.extend(vec![-1.0; 6]);
        let t = sign_test(&a, &b).unwrap();
        assert_eq!((t.wins, t.losses, t.ties), (14, 6, 0));
        // Tail of Binomial(20, 1/2) at 14: 60460 / 2^20.
        assert!((t.p_value - 60460.0 / 1048576.0).abs() < 1e-12);
        let t = sign_test(&[1.0, 1.0], &[1.0, 2.0]).unwrap();
        assert_eq!((t.wins, t.ties, t.p_value), (1, 1, 0.5));
    }

    proptest! {
        #[test]
        fn overlap_symmetric_unit_diagonal(
            sets in proptest::collection::vec(proptest::sample::subsequence((0..30usize).collect::<Vec<_>>(), 5), 1..6)
        ) {
            let sels: Vec<_> = sets.iter().enumerate().map(|(i, s)| sel(&i.to_string(), s)).collect();
            let m = subset_overlap(&sels).unwrap();
            for i in 0..m.len() {
                prop_assert_eq!(m[i][i], 1.0);
                for j in 0..m.len() {
                    prop_assert_eq!(m[i][j], m[j][i]);
                    prop_assert!((0.0..=1.0).contains(&m[i][j]));
                }
            }
        }

        #[test]
        fn tau_and_jaccard_bounded(v in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..12), k in 1usize..12) {
            let full: BTreeMap<String, f64> = v.iter().enumerate().map(|(i, p)| (format!("m{i:02}"), p.0)).collect();
            let sub: BTreeMap<String, f64> = v.iter().enumerate().map(|(i, p)| (format!("m{i:02}"), p.1)).collect();
            let k = k.min(v.len());
            let m = ranking_metrics(&full, &sub, k).unwrap();
            prop_assert!((-1.0..=1.0).contains(&m.kendall_tau));
            prop_assert!((0.0..=1.0).contains(&m.jaccard));
        }
    }
}
