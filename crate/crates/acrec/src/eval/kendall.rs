//! Tie-corrected Kendall rank correlation (tau-b).

/// tau_b = (C - D) / sqrt((C + D + Tx)(C + D + Ty)) where Tx/Ty count pairs
/// tied only in x / only in y. Computed in O(n log n): discordant pairs via
/// merge-sort inversion counting after sorting by x. Returns `None` when a
/// variable is constant (denominator zero) or fewer than two points exist.
pub fn tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "tau_b needs paired samples");
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        x[a].partial_cmp(&x[b])
            .unwrap()
            .then(y[a].partial_cmp(&y[b]).unwrap())
    });

    // Tie counts in x and joint ties, scanning runs of equal x.
    let mut ties_x: u64 = 0;
    let mut ties_xy: u64 = 0;
    {
        let mut run_start = 0;
        for i in 1..=n {
            if i == n || x[idx[i]] != x[idx[run_start]] {
                let run = &idx[run_start..i];
                ties_x += pairs(run.len() as u64);
                let mut joint_start = 0;
                for j in 1..=run.len() {
                    if j == run.len() || y[run[j]] != y[run[joint_start]] {
                        ties_xy += pairs((j - joint_start) as u64);
                        joint_start = j;
                    }
                }
                run_start = i;
            }
        }
    }

    // Discordant pairs: inversions of y in x-order. Pairs tied in x were
    // pre-sorted by y above, so they contribute no inversions.
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let discordant = count_inversions(&mut ys);

    let mut ties_y: u64 = 0;
    {
        // ys is now sorted.
        let mut run_start = 0;
        for i in 1..=n {
            if i == n || ys[i] != ys[run_start] {
                ties_y += pairs((i - run_start) as u64);
                run_start = i;
            }
        }
    }

    let n0 = pairs(n as u64);
    let tied_either = ties_x + ties_y - ties_xy;
    let cd = n0 - tied_either; // concordant + discordant
    let concordant = cd - discordant;
    let tx_only = ties_x - ties_xy;
    let ty_only = ties_y - ties_xy;
    let denom_a = (concordant + discordant + tx_only) as f64;
    let denom_b = (concordant + discordant + ty_only) as f64;
    if denom_a == 0.0 || denom_b == 0.0 {
        return None;
    }
    Some((concordant as f64 - discordant as f64) / (denom_a * denom_b).sqrt())
}

fn pairs(k: u64) -> u64 {
    k * k.saturating_sub(1) / 2
}

/// Strict inversions via bottom-up merge sort; equal elements do not count.
fn count_inversions(v: &mut [f64]) -> u64 {
    let n = v.len();
    let mut buf = vec![0.0; n];
    let mut count = 0u64;
    let mut width = 1;
    while width < n {
        let mut lo = 0;
        while lo + width < n {
            let mid = lo + width;
            let hi = (mid + width).min(n);
            let (mut i, mut j, mut k) = (lo, mid, lo);
            while i < mid && j < hi {
                if v[j] < v[i] {
                    count += (mid - i) as u64;
                    buf[k] = v[j];
                    j += 1;
                } else {
                    buf[k] = v[i];
                    i += 1;
                }
                k += 1;
            }
            buf[k..k + (mid - i)].copy_from_slice(&v[i..mid]);
            let k2 = k + (mid - i);
            buf[k2..k2 + (hi - j)].copy_from_slice(&v[j..hi]);
            v[lo..hi].copy_from_slice(&buf[lo..hi]);
            lo = hi;
        }
        width *= 2;
    }
    count
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// O(n^2) pair-enumeration oracle using the same final formula.
    pub fn tau_b_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
        let n = x.len();
        if n < 2 {
            return None;
        }
        let (mut c, mut d, mut tx, mut ty) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..n {
            for j in i + 1..n {
                let dx = x[i].partial_cmp(&x[j]).unwrap();
                let dy = y[i].partial_cmp(&y[j]).unwrap();
                use std::cmp::Ordering::*;
                match (dx, dy) {
                    (Equal, Equal) => {}
                    (Equal, _) => tx += 1,
                    (_, Equal) => ty += 1,
                    (a, b) if a == b => c += 1,
                    _ => d += 1,
                }
            }
        }
        let denom_a = (c + d + tx) as f64;
        let denom_b = (c + d + ty) as f64;
        if denom_a == 0.0 || denom_b == 0.0 {
            return None;
        }
        Some((c as f64 - d as f64) / (denom_a * denom_b).sqrt())
    }

    #[test]
    fn perfect_agreement_is_one() {
        let x = [0.1, 0.4, 0.2, 0.9];
        let y = [1.0, 4.0, 2.0, 9.0];
        assert_eq!(tau_b(&x, &y), Some(1.0));
    }

    #[test]
    fn exact_reversal_is_minus_one() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [9.0, 7.0, 5.0, 3.0];
        assert_eq!(tau_b(&x, &y), Some(-1.0));
    }

    #[test]
    fn one_discordant_pair_matches_oracle() {
        // Hand case from the pair-enumeration oracle: 4 elements, a single
        // discordant pair, no ties -> (5 - 1) / 6.
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.0, 2.0, 4.0, 3.0];
        let got = tau_b(&x, &y).unwrap();
        let want = tau_b_oracle(&x, &y).unwrap();
        assert_eq!(got, want);
        assert!((got - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn constant_input_is_undefined() {
        assert_eq!(tau_b(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        assert_eq!(tau_b(&[0.5], &[0.1]), None);
    }

    #[test]
    fn matches_oracle_with_ties_on_random_rows() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for trial in 0..300 {
            let n = rng.gen_range(2..=50);
            // Coarse grid provokes plenty of ties.
            let x: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..6) as f64) / 3.0).collect();
            let y: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..6) as f64) / 3.0).collect();
            let got = tau_b(&x, &y);
            let want = tau_b_oracle(&x, &y);
            match (got, want) {
                (Some(a), Some(b)) => {
                    assert_eq!(a, b, "trial {trial}: production {a} vs oracle {b}")
                }
                (a, b) => assert_eq!(a, b, "trial {trial}"),
            }
        }
    }
}
