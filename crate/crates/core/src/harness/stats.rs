//! Exact two-sided Wilcoxon signed-rank test.

/// Two-sided p-value for paired differences.
///
/// Zero differences are dropped and tied magnitudes get midranks; the null
/// distribution of `W+` is enumerated exactly. Returns `None` for fewer than
/// two pairs (not applicable) and `Some(1.0)` when every difference is zero.
pub fn wilcoxon_signed_rank(deltas: &[f64]) -> Option<f64> {
    if deltas.len() < 2 {
        return None;
    }
    let nonzero: Vec<f64> = deltas.iter().copied().filter(|d| *d != 0.0).collect();
    if nonzero.is_empty() {
        return Some(1.0);
    }
    let ranks = doubled_midranks(&nonzero);
    let observed: usize = nonzero.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let dist = null_distribution(&ranks);
    let lower: f64 = dist[..=observed].iter().sum();
    let upper: f64 = dist[observed..].iter().sum();
    Some((2.0 * lower.min(upper)).min(1.0))
}

/// Ranks of `|x|` (1-based, ties averaged), multiplied by two to stay integral.
fn doubled_midranks(x: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].abs().total_cmp(&x[b].abs()));
    let mut ranks = vec![0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]].abs() == x[order[i]].abs() {
            j += 1;
        }
        // positions i..=j share rank (i+1 + j+1)/2
        for &k in &order[i..=j] {
            ranks[k] = i + j + 2;
        }
        i = j + 1;
    }
    ranks
}

/// `P(W+ = w)` for `w` in doubled-rank units under independent fair signs.
fn null_distribution(ranks: &[usize]) -> Vec<f64> {
    let total: usize = ranks.iter().sum();
    let mut p = vec![0.0; total + 1];
    p[0] = 1.0;
    let mut reach = 0;
    for &r in ranks {
        for w in (0..=reach).rev() {
            let here = p[w] * 0.5;
            p[w] = here;
            p[w + r] += here;
        }
        reach += r;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_inputs() {
        assert_eq!(wilcoxon_signed_rank(&[]), None);
        assert_eq!(wilcoxon_signed_rank(&[0.3]), None);
        assert_eq!(wilcoxon_signed_rank(&[0.0; 15]), Some(1.0));
    }

    #[test]
    fn all_positive_fifteen() {
        let p = wilcoxon_signed_rank(&[1.0; 15]).unwrap();
        assert!((p - 2.0 / 32768.0).abs() < 1e-15);
        assert!(p < 0.05);
    }

    #[test]
    fn midranks() {
        assert_eq!(doubled_midranks(&[3.0, -1.0, 1.0, 2.0]), [8, 3, 3, 6]);
    }
}
