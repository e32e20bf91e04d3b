//! Inter-node comparison: timestamp alignment of two series, maximum absolute
//! difference, and plot-ready CSV export.

use super::{StoreError, StoreRow};
use crate::node::format_value;
use crate::Millis;

/// One sample of one variable from one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesPoint {
    pub t: Millis,
    pub value: f64,
}

/// Two nodes' values aligned at (approximately) one instant; `t` comes from
/// series a.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairPoint {
    pub t: Millis,
    pub value_a: f64,
    pub value_b: f64,
}

/// Projects query results onto (t, value).
pub fn series_points(rows: &[StoreRow]) -> Vec<SeriesPoint> {
    rows.iter().map(|r| SeriesPoint { t: r.captured_at, value: r.value }).collect()
}

/// Greedy nearest-timestamp pairing of two sorted series. A pair is kept when
/// |ta - tb| <= tolerance_ms; each sample is used at most once; unpaired
/// samples are dropped.
pub fn align(a: &[SeriesPoint], b: &[SeriesPoint], tolerance_ms: Millis) -> Vec<PairPoint> {
    let mut pairs = Vec::new();
    let mut j = 0usize;
    for pa in a {
        // Walk b forward while the next unused sample is strictly nearer.
        while j + 1 < b.len() && (b[j + 1].t - pa.t).abs() < (b[j].t - pa.t).abs() {
            j += 1;
        }
        if j < b.len() && (b[j].t - pa.t).abs() <= tolerance_ms {
            pairs.push(PairPoint { t: pa.t, value_a: pa.value, value_b: b[j].value });
            j += 1;
        }
        if j >= b.len() {
            break;
        }
    }
    pairs
}

/// Largest |value_a - value_b| over the pairs and the time it occurred
/// (earliest on ties).
pub fn max_abs_diff(pairs: &[PairPoint]) -> Result<(f64, Millis), StoreError> {
    let mut best: Option<(f64, Millis)> = None;
    for p in pairs {
        let diff = (p.value_a - p.value_b).abs();
        if best.is_none_or(|(b, _)| diff > b) {
            best = Some((diff, p.t));
        }
    }
    best.ok_or(StoreError::EmptyPair)
}

/// CSV for query results: `t,node,name,value`.
pub fn export_rows_csv(rows: &[StoreRow]) -> String {
    let mut out = String::from("t,node,name,value\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.captured_at, r.node_id, r.name, format_value(r.value)));
    }
    out
}

/// CSV for aligned pairs: `t,value_a,value_b,diff`.
pub fn export_pairs_csv(pairs: &[PairPoint]) -> String {
    let mut out = String::from("t,value_a,value_b,diff\n");
    for p in pairs {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.t,
            format_value(p.value_a),
            format_value(p.value_b),
            format_value(p.value_a - p.value_b)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(t0: Millis, step: Millis, values: &[f64]) -> Vec<SeriesPoint> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| SeriesPoint { t: t0 + i as Millis * step, value: v })
            .collect()
    }

    /// Exact maximum-cardinality matching by dynamic programming; the oracle
    /// align is checked against.
    fn optimal_pairs(a: &[SeriesPoint], b: &[SeriesPoint], tol: Millis) -> usize {
        let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in (0..a.len()).rev() {
            for j in (0..b.len()).rev() {
                let mut best = dp[i + 1][j].max(dp[i][j + 1]);
                if (a[i].t - b[j].t).abs() <= tol {
                    best = best.max(1 + dp[i + 1][j + 1]);
                }
                dp[i][j] = best;
            }
        }
        dp[0][0]
    }

    #[test]
    fn identical_grids_pair_fully() {
        let a = grid(0, 12_000, &[1.0, 2.0, 3.0]);
        let b = grid(0, 12_000, &[1.5, 2.5, 3.5]);
        let pairs = align(&a, &b, 2_000);
        assert_eq!(pairs.len(), 3);
        assert!(pairs.iter().all(|p| (p.value_b - p.value_a - 0.5).abs() < 1e-12));
    }

    #[test]
    fn shift_beyond_tolerance_pairs_nothing() {
        let a = grid(0, 12_000, &[1.0, 2.0, 3.0]);
        let b = grid(2_001, 12_000, &[1.0, 2.0, 3.0]);
        assert!(align(&a, &b, 2_000).is_empty());
    }

    #[test]
    fn half_tolerance_offset_pairs_fully_with_a_timestamps() {
        let a = grid(0, 12_000, &[1.0, 2.0, 3.0, 4.0]);
        let b = grid(1_000, 12_000, &[1.0, 2.0, 3.0, 4.0]);
        let pairs = align(&a, &b, 2_000);
        assert_eq!(pairs.len(), 4);
        assert_eq!(pairs[0].t, 0);
        assert_eq!(pairs[3].t, 36_000);
    }

    #[test]
    fn greedy_matches_optimal_cardinality_on_randomized_grids() {
        let mut state = 0xFACEu64;
        let mut rand = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as i64
        };
        for case in 0..200 {
            let step = 10_000 + rand().rem_euclid(5) * 1000;
            let offset = rand().rem_euclid(4_001) - 2_000;
            let tol = 2_000;
            // Random grids with random holes.
            let mut a = Vec::new();
            let mut b = Vec::new();
            for i in 0..40 {
                if rand().rem_euclid(5) != 0 {
                    a.push(SeriesPoint { t: i * step, value: rand() as f64 });
                }
                if rand().rem_euclid(5) != 0 {
                    b.push(SeriesPoint { t: i * step + offset, value: rand() as f64 });
                }
            }
            let greedy = align(&a, &b, tol).len();
            let optimal = optimal_pairs(&a, &b, tol);
            assert_eq!(greedy, optimal, "case {case}");
            // Cardinality symmetry.
            assert_eq!(align(&b, &a, tol).len(), greedy, "case {case} swap");
        }
    }

    #[test]
    fn max_abs_diff_identical_series_is_zero_at_first_t() {
        let a = grid(100, 1_000, &[5.0, 6.0, 7.0]);
        let pairs = align(&a, &a, 0);
        assert_eq!(max_abs_diff(&pairs).unwrap(), (0.0, 100));
    }

    #[test]
    fn max_abs_diff_matches_brute_force_and_breaks_ties_early() {
        let pairs = vec![
            PairPoint { t: 0, value_a: 1.0, value_b: 2.0 },
            PairPoint { t: 10, value_a: 5.0, value_b: 2.0 },
            PairPoint { t: 20, value_a: 0.0, value_b: 3.0 },
            PairPoint { t: 30, value_a: 2.0, value_b: 1.0 },
        ];
        let (value, at) = max_abs_diff(&pairs).unwrap();
        // Brute force: diffs are 1, 3, 3, 1; max 3 first at t=10.
        let brute = pairs.iter().map(|p| (p.value_a - p.value_b).abs()).fold(0.0f64, f64::max);
        assert_eq!(value, brute);
        assert_eq!(at, 10);
        assert!(matches!(max_abs_diff(&[]), Err(StoreError::EmptyPair)));
    }

    #[test]
    fn csv_shapes() {
        assert_eq!(export_rows_csv(&[]), "t,node,name,value\n");
        let pairs = vec![PairPoint { t: 0, value_a: 27.7, value_b: 27.5 }];
        let csv = export_pairs_csv(&pairs);
        assert_eq!(csv, "t,value_a,value_b,diff\n0,27.7,27.5,0.2\n");
    }

    #[test]
    fn csv_reparse_reproduces_values_exactly() {
        use crate::node::quantize_value;
        let a: Vec<SeriesPoint> = (0..36)
            .map(|i| SeriesPoint { t: i * 12_000, value: quantize_value(20.0 + (i as f64) * 0.137) })
            .collect();
        let b: Vec<SeriesPoint> = (0..36)
            .map(|i| SeriesPoint { t: i * 12_000, value: quantize_value(20.1 + (i as f64) * 0.137) })
            .collect();
        let pairs = align(&a, &b, 2_000);
        let csv = export_pairs_csv(&pairs);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 37); // header + 36
        for (line, pair) in lines[1..].iter().zip(&pairs) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[0].parse::<Millis>().unwrap(), pair.t);
            assert_eq!(cols[1].parse::<f64>().unwrap(), pair.value_a);
            assert_eq!(cols[2].parse::<f64>().unwrap(), pair.value_b);
        }
    }
}
