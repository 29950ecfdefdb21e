//! Box geometry and optimal prediction-to-target assignment.
//!
//! Boxes are center-size `(cx, cy, w, h)`. The overlap score is the
//! intersection-over-union minus the fraction of the tightest enclosing box
//! not covered by the union, so disjoint boxes still produce a useful
//! gradient. Assignment minimizes total pair cost with a shortest augmenting
//! path search; among co-optimal solutions the lexicographically smallest
//! pair list wins, so results are fully deterministic.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Axis-aligned box in center-size form, coordinates in scene units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl CenterBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> CenterBox {
        CenterBox { cx, cy, w, h }
    }

    /// `(x1, y1, x2, y2)` corners.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x1, y1, x2, y2) = self.corners();
        x >= x1 && x <= x2 && y >= y1 && y <= y2
    }
}

/// Plain intersection-over-union; 0 when the union has zero area.
pub fn iou(a: &CenterBox, b: &CenterBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized overlap score in `[-1, 1]`:
/// `iou(a, b) - |C \ (A ∪ B)| / |C|` where `C` is the tightest box
/// enclosing both. Equal boxes give 1, far-apart boxes approach -1.
pub fn giou(a: &CenterBox, b: &CenterBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let enclose = cw * ch;
    let iou_term = if union <= 0.0 { 0.0 } else { inter / union };
    if enclose <= 0.0 {
        return iou_term;
    }
    iou_term - (enclose - union) / enclose
}

/// Gradients of [`giou`] w.r.t. both boxes' `(cx, cy, w, h)`.
///
/// Piecewise-smooth: min/max branches follow the forward selections, so the
/// result is the one-sided derivative on boundary configurations.
pub fn giou_backward(a: &CenterBox, b: &CenterBox) -> ([f64; 4], [f64; 4]) {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();

    // Corner order inside the derivative vectors: [ax1, ay1, ax2, ay2, bx1, ...].
    let mut d_inter = [0.0_f64; 8];
    let mut d_union;
    let mut d_enclose = [0.0_f64; 8];

    let ix2 = ax2.min(bx2);
    let ix1 = ax1.max(bx1);
    let iy2 = ay2.min(by2);
    let iy1 = ay1.max(by1);
    let iw = (ix2 - ix1).max(0.0);
    let ih = (iy2 - iy1).max(0.0);
    let inter = iw * ih;

    if iw > 0.0 && ih > 0.0 {
        // d inter / d corner through the active min/max branches.
        if ax2 <= bx2 {
            d_inter[2] += ih;
        } else {
            d_inter[6] += ih;
        }
        if ax1 >= bx1 {
            d_inter[0] -= ih;
        } else {
            d_inter[4] -= ih;
        }
        if ay2 <= by2 {
            d_inter[3] += iw;
        } else {
            d_inter[7] += iw;
        }
        if ay1 >= by1 {
            d_inter[1] -= iw;
        } else {
            d_inter[5] -= iw;
        }
    }

    // Areas: dA_a/dax1 = -(ay2-ay1) etc.
    let aw = ax2 - ax1;
    let ah = ay2 - ay1;
    let bw = bx2 - bx1;
    let bh = by2 - by1;
    let d_area = [
        -ah, -aw, ah, aw, // box a corners
        -bh, -bw, bh, bw, // box b corners
    ];
    d_union = d_area;
    for i in 0..8 {
        d_union[i] -= d_inter[i];
    }

    let cx2 = ax2.max(bx2);
    let cx1 = ax1.min(bx1);
    let cy2 = ay2.max(by2);
    let cy1 = ay1.min(by1);
    let cw = cx2 - cx1;
    let ch = cy2 - cy1;
    let enclose = cw * ch;
    if ax2 >= bx2 {
        d_enclose[2] += ch;
    } else {
        d_enclose[6] += ch;
    }
    if ax1 <= bx1 {
        d_enclose[0] -= ch;
    } else {
        d_enclose[4] -= ch;
    }
    if ay2 >= by2 {
        d_enclose[3] += cw;
    } else {
        d_enclose[7] += cw;
    }
    if ay1 <= by1 {
        d_enclose[1] -= cw;
    } else {
        d_enclose[5] -= cw;
    }

    let union = a.area() + b.area() - inter;
    let mut d_corner = [0.0_f64; 8];
    if union > 0.0 {
        let u2 = union * union;
        for i in 0..8 {
            d_corner[i] += (d_inter[i] * union - inter * d_union[i]) / u2;
        }
    }
    if enclose > 0.0 {
        let c2 = enclose * enclose;
        for i in 0..8 {
            // d of -(C - U)/C = (dU * C - U * dC) / C^2
            d_corner[i] += (d_union[i] * enclose - union * d_enclose[i]) / c2;
        }
    }

    // Chain corners back to center-size: x1 = cx - w/2, x2 = cx + w/2.
    let to_center_size = |d: &[f64]| -> [f64; 4] {
        [
            d[0] + d[2],
            d[1] + d[3],
            0.5 * (d[2] - d[0]),
            0.5 * (d[3] - d[1]),
        ]
    };
    (
        to_center_size(&d_corner[0..4]),
        to_center_size(&d_corner[4..8]),
    )
}

/// Sum of absolute coordinate differences in center-size form.
pub fn l1_box_loss(a: &CenterBox, b: &CenterBox) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// Gradient of [`l1_box_loss`] w.r.t. the first box.
pub fn l1_box_backward(a: &CenterBox, b: &CenterBox) -> [f64; 4] {
    let sg = |x: f64, y: f64| {
        if x > y {
            1.0
        } else if x < y {
            -1.0
        } else {
            0.0
        }
    };
    [sg(a.cx, b.cx), sg(a.cy, b.cy), sg(a.w, b.w), sg(a.h, b.h)]
}

// ---------------------------------------------------------------------------
// Assignment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum MatchError {
    /// More targets than predictions: no injective assignment exists.
    CapacityExceeded { predictions: usize, targets: usize },
    /// A cost entry was NaN or infinite.
    NonFiniteCost { row: usize, col: usize },
}

impl fmt::Display for MatchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchError::CapacityExceeded {
                predictions,
                targets,
            } => write!(
                f,
                "{targets} targets cannot be assigned to {predictions} predictions"
            ),
            MatchError::NonFiniteCost { row, col } => {
                write!(f, "non-finite cost at ({row}, {col})")
            }
        }
    }
}

impl std::error::Error for MatchError {}

/// Result of [`hungarian_match`]: `(prediction, target)` pairs sorted by
/// prediction index, the predictions left without a target, and the summed
/// cost of the pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchAssignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
    pub total_cost: f64,
}

fn unmatched_rows(pairs: &[(usize, usize)], n_pred: usize) -> Vec<usize> {
    let mut hit = vec![false; n_pred];
    for &(r, _) in pairs {
        hit[r] = true;
    }
    (0..n_pred).filter(|&r| !hit[r]).collect()
}

/// Shortest-augmenting-path solution of the square assignment problem.
/// Returns (row assigned to each column, row potentials, column potentials),
/// all 1-indexed with 0 as the virtual start.
fn square_assignment(
    n: usize,
    cost: &dyn Fn(usize, usize) -> f64,
) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (p, u, v)
}

/// Optimal total cost of assigning each listed column to a distinct listed
/// row. Pads with zero-cost dummy columns to reach a square problem.
fn optimal_cost(costs: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if cols.is_empty() {
        return 0.0;
    }
    let n = rows.len();
    let cost = |r: usize, c: usize| {
        if c < cols.len() {
            costs[rows[r]][cols[c]]
        } else {
            0.0
        }
    };
    let (p, _, _) = square_assignment(n, &cost);
    // Sum over real columns in ascending column order.
    let mut total = 0.0;
    for (j, &col) in cols.iter().enumerate() {
        let row = rows[p[j + 1] - 1];
        total += costs[row][col];
    }
    total
}

/// Minimum-total-cost assignment of every target (column) to a distinct
/// prediction (row). `costs` is indexed `costs[prediction][target]`; the
/// number of targets must not exceed the number of predictions.
///
/// Among co-optimal assignments the lexicographically smallest pair list is
/// returned, so crafted tie cases are reproducible. Pairs are fixed greedily
/// in lexicographic order; a pair survives if the optimal completion of the
/// reduced problem still reaches the global optimum.
pub fn hungarian_match(costs: &[Vec<f64>]) -> Result<MatchAssignment, MatchError> {
    let n_pred = costs.len();
    let n_tgt = costs.first().map_or(0, Vec::len);
    if n_tgt == 0 {
        return Ok(MatchAssignment {
            pairs: vec![],
            unmatched: (0..n_pred).collect(),
            total_cost: 0.0,
        });
    }
    if n_tgt > n_pred {
        return Err(MatchError::CapacityExceeded {
            predictions: n_pred,
            targets: n_tgt,
        });
    }
    let mut scale: f64 = 1.0;
    for (r, row) in costs.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(MatchError::NonFiniteCost { row: r, col: c });
            }
            scale = scale.max(v.abs());
        }
    }

    let all_rows: Vec<usize> = (0..n_pred).collect();
    let all_cols: Vec<usize> = (0..n_tgt).collect();
    let z_star = optimal_cost(costs, &all_rows, &all_cols);
    let tol = 1e-9 * scale;

    let mut avail_rows = all_rows;
    let mut avail_cols = all_cols;
    let mut fixed_sum = 0.0;
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(n_tgt);
    for r in 0..n_pred {
        if avail_cols.is_empty() {
            break;
        }
        let mut fixed = false;
        for idx in 0..avail_cols.len() {
            let c = avail_cols[idx];
            let sub_rows: Vec<usize> = avail_rows.iter().copied().filter(|&x| x != r).collect();
            let sub_cols: Vec<usize> = avail_cols.iter().copied().filter(|&x| x != c).collect();
            let z_sub = optimal_cost(costs, &sub_rows, &sub_cols);
            if (fixed_sum + costs[r][c] + z_sub - z_star).abs() <= tol {
                pairs.push((r, c));
                fixed_sum += costs[r][c];
                avail_rows = sub_rows;
                avail_cols = sub_cols;
                fixed = true;
                break;
            }
        }
        if !fixed {
            // Row r is unused in the lexicographically smallest optimum.
            avail_rows.retain(|&x| x != r);
        }
    }

    if pairs.len() != n_tgt {
        // Degenerate numeric fallback: take the raw optimal assignment.
        let rows: Vec<usize> = (0..n_pred).collect();
        let cost = |r: usize, c: usize| if c < n_tgt { costs[r][c] } else { 0.0 };
        let (p, _, _) = square_assignment(n_pred, &cost);
        pairs = (0..n_tgt).map(|j| (p[j + 1] - 1, j)).collect();
        pairs.sort_unstable();
        let _ = rows;
    }

    let mut total = 0.0;
    for &(r, c) in &pairs {
        total += costs[r][c];
    }
    let unmatched = unmatched_rows(&pairs, n_pred);
    Ok(MatchAssignment {
        pairs,
        unmatched,
        total_cost: total,
    })
}

/// Reference implementation: tries every injective target-to-prediction map.
/// Exponential; intended for tests and small oracle comparisons.
pub fn brute_force_match(costs: &[Vec<f64>]) -> Result<MatchAssignment, MatchError> {
    let n_pred = costs.len();
    let n_tgt = costs.first().map_or(0, Vec::len);
    if n_tgt == 0 {
        return Ok(MatchAssignment {
            pairs: vec![],
            unmatched: (0..n_pred).collect(),
            total_cost: 0.0,
        });
    }
    if n_tgt > n_pred {
        return Err(MatchError::CapacityExceeded {
            predictions: n_pred,
            targets: n_tgt,
        });
    }
    for (r, row) in costs.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(MatchError::NonFiniteCost { row: r, col: c });
            }
        }
    }

    let mut best: Option<MatchAssignment> = None;
    let mut rows = vec![usize::MAX; n_tgt]; // rows[t] = prediction for target t
    fn recurse(
        t: usize,
        n_pred: usize,
        costs: &[Vec<f64>],
        rows: &mut Vec<usize>,
        used: &mut Vec<bool>,
        best: &mut Option<MatchAssignment>,
    ) {
        let n_tgt = rows.len();
        if t == n_tgt {
            let mut pairs: Vec<(usize, usize)> = (0..n_tgt).map(|tt| (rows[tt], tt)).collect();
            pairs.sort_unstable();
            let mut total = 0.0;
            for &(r, c) in &pairs {
                total += costs[r][c];
            }
            let better = match best {
                None => true,
                Some(b) => total < b.total_cost || (total == b.total_cost && pairs < b.pairs),
            };
            if better {
                let unmatched = unmatched_rows(&pairs, n_pred);
                *best = Some(MatchAssignment {
                    pairs,
                    unmatched,
                    total_cost: total,
                });
            }
            return;
        }
        for r in 0..n_pred {
            if !used[r] {
                used[r] = true;
                rows[t] = r;
                recurse(t + 1, n_pred, costs, rows, used, best);
                used[r] = false;
            }
        }
    }
    let mut used = vec![false; n_pred];
    recurse(0, n_pred, costs, &mut rows, &mut used, &mut best);
    Ok(best.expect("at least one assignment exists"))
}
