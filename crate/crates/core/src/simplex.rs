//! Minimal dense two-phase simplex, used by the calibration feasibility test.
//!
//! Solves max c'x subject to A x = b, x >= 0. The feasibility LP has k + 1
//! rows for k auxiliary columns, so the tableau stays tiny even when the
//! number of variables runs into the thousands. Bland's rule keeps the pivot
//! sequence finite on degenerate problems.

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum LpOutcome {
    Infeasible,
    Unbounded,
    Optimal { x: Vec<f64>, value: f64 },
}

const EPS: f64 = 1e-9;

/// Maximize c'x subject to A x = b, x >= 0.
pub(crate) fn simplex_max(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> LpOutcome {
    let n = c.len();
    debug_assert!(a.iter().all(|row| row.len() == n));
    debug_assert_eq!(a.len(), b.len());

    // Normalize rows, drop vacuous ones, and orient right-hand sides >= 0.
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for (row, &bi) in a.iter().zip(b.iter()) {
        let scale = row
            .iter()
            .chain(std::iter::once(&bi))
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            continue;
        }
        let mut r: Vec<f64> = row.iter().map(|v| v / scale).collect();
        let mut bb = bi / scale;
        if r.iter().all(|v| v.abs() <= EPS) {
            if bb.abs() > EPS {
                return LpOutcome::Infeasible;
            }
            continue;
        }
        if bb < 0.0 {
            for v in &mut r {
                *v = -*v;
            }
            bb = -bb;
        }
        rows.push(r);
        rhs.push(bb);
    }
    let m = rows.len();
    if m == 0 {
        // Only x = 0 is distinguished; with no constraints the LP is unbounded
        // unless no objective coefficient is positive.
        if c.iter().any(|&v| v > EPS) {
            return LpOutcome::Unbounded;
        }
        return LpOutcome::Optimal {
            x: vec![0.0; n],
            value: 0.0,
        };
    }

    // Tableau columns: n structural + m artificial + rhs.
    let width = n + m + 1;
    let mut t: Vec<Vec<f64>> = Vec::with_capacity(m);
    for (i, row) in rows.iter().enumerate() {
        let mut r = vec![0.0; width];
        r[..n].copy_from_slice(row);
        r[n + i] = 1.0;
        r[width - 1] = rhs[i];
        t.push(r);
    }
    let mut basis: Vec<usize> = (n..n + m).collect();

    // Phase 1: minimize the sum of artificials.
    let mut obj = vec![0.0; width];
    for r in &t {
        for (o, v) in obj.iter_mut().zip(r.iter()) {
            *o += v;
        }
    }
    // Structural columns only may enter.
    if !run_simplex(&mut t, &mut obj, &mut basis, n) {
        // Phase 1 of a bounded-below objective cannot be unbounded.
        unreachable!("phase 1 cannot be unbounded");
    }
    if obj[width - 1] > 1e-7 {
        return LpOutcome::Infeasible;
    }

    // Phase 2: maximize c'x, artificials barred from entering. Any artificial
    // still basic sits at value zero and is displaced by degenerate pivots if
    // its row is ever touched. The objective row tracks -c'x so the shared
    // minimizing loop maximizes c'x.
    let mut obj2 = vec![0.0; width];
    for (j, &cj) in c.iter().enumerate() {
        obj2[j] = cj;
    }
    // Restore reduced costs for the current basis.
    for (i, &bv) in basis.iter().enumerate() {
        if obj2[bv].abs() > 0.0 {
            let factor = obj2[bv];
            let row = t[i].clone();
            for (o, v) in obj2.iter_mut().zip(row.iter()) {
                *o -= factor * v;
            }
        }
    }
    if !run_simplex(&mut t, &mut obj2, &mut basis, n) {
        return LpOutcome::Unbounded;
    }

    let mut x = vec![0.0; n];
    for (i, &bv) in basis.iter().enumerate() {
        if bv < n {
            x[bv] = t[i][width - 1];
        }
    }
    let value = x.iter().zip(c.iter()).map(|(xi, ci)| xi * ci).sum();
    LpOutcome::Optimal { x, value }
}

/// Run the simplex on a tableau whose objective row holds reduced costs for a
/// minimization written as `obj - sum(reduced_cost_j x_j)`; a column may enter
/// while its reduced cost is positive. Entering candidates are restricted to
/// the first `enter_limit` columns. Returns false on unboundedness.
fn run_simplex(
    t: &mut [Vec<f64>],
    obj: &mut [f64],
    basis: &mut [usize],
    enter_limit: usize,
) -> bool {
    let m = t.len();
    let width = obj.len();
    loop {
        // Bland's rule: smallest-index improving column.
        let mut enter = None;
        for (j, &oj) in obj.iter().enumerate().take(enter_limit) {
            if oj > EPS {
                enter = Some(j);
                break;
            }
        }
        let enter = match enter {
            Some(j) => j,
            None => return true,
        };
        // Ratio test, ties broken by smallest basis index.
        let mut leave: Option<usize> = None;
        let mut best = f64::INFINITY;
        for (i, row) in t.iter().enumerate().take(m) {
            if row[enter] > EPS {
                let ratio = row[width - 1] / row[enter];
                if ratio < best - EPS
                    || (ratio < best + EPS
                        && leave.map_or(true, |l| basis[i] < basis[l]))
                {
                    best = ratio;
                    leave = Some(i);
                }
            }
        }
        let leave = match leave {
            Some(i) => i,
            None => return false,
        };
        pivot(t, obj, leave, enter);
        basis[leave] = enter;
    }
}

fn pivot(t: &mut [Vec<f64>], obj: &mut [f64], row: usize, col: usize) {
    let width = obj.len();
    let p = t[row][col];
    for v in t[row].iter_mut() {
        *v /= p;
    }
    let pivot_row = t[row].clone();
    for (i, r) in t.iter_mut().enumerate() {
        if i != row && r[col].abs() > 0.0 {
            let f = r[col];
            for (v, pv) in r.iter_mut().zip(pivot_row.iter()) {
                *v -= f * pv;
            }
            r[col] = 0.0;
        }
    }
    if obj[col].abs() > 0.0 {
        let f = obj[col];
        for (v, pv) in obj.iter_mut().zip(pivot_row.iter()).take(width) {
            *v -= f * pv;
        }
        obj[col] = 0.0;
    }
}
