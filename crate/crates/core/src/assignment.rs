//! Set-based label assignment: matching costs, the Hungarian solver and the
//! per-stage detection losses.

use serde::{Deserialize, Serialize};

use crate::autograd::{focal_term, Graph, Var, PROB_EPS};
use crate::geometry::{decode_box, encode_box, rotated_iou_bev, Box3D, BOX_CODE};
use crate::tensor::Tensor;

/// Weights of the classification, regression and IoU terms, used both in
/// the matching cost and in the loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub cls: f64,
    pub reg: f64,
    pub iou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            reg: 0.25,
            iou: 0.25,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> crate::Result<()> {
        let all = [self.cls, self.reg, self.iou];
        if all.iter().any(|&v| v < 0.0 || !v.is_finite()) || all.iter().all(|&v| v == 0.0) {
            return Err(crate::Error::Config(
                "cost weights must be non-negative and not all zero".into(),
            ));
        }
        Ok(())
    }
}

/// Focal loss of a probability against a binary target, with `p` clamped
/// to `[1e-7, 1 − 1e-7]`.
pub fn focal_loss(p: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    focal_term(p.clamp(PROB_EPS, 1.0 - PROB_EPS), target, alpha, gamma).0
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `cost[i][j]` between prediction `i` (class probabilities and box code)
/// and ground-truth box `j`.
pub fn pairwise_cost(probs: &[Vec<f64>], codes: &[[f64; BOX_CODE]], gts: &[Box3D], w: &CostWeights) -> Vec<Vec<f64>> {
    let gt_codes: Vec<[f64; BOX_CODE]> = gts.iter().map(encode_box).collect();
    probs
        .iter()
        .zip(codes)
        .map(|(p, code)| {
            let pred = decode_box(code, 0, 1.0);
            gts.iter()
                .zip(&gt_codes)
                .map(|(gt, gc)| {
                    let cls = focal_loss(p[gt.class_id], true, w.focal_alpha, w.focal_gamma);
                    let l1: f64 = code.iter().zip(gc).map(|(a, b)| (a - b).abs()).sum();
                    let iou = rotated_iou_bev(&pred, gt).unwrap_or(0.0);
                    w.cls * cls + w.reg * l1 + w.iou * (1.0 - iou)
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(prediction, ground truth)` pairs sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
    pub total_cost: f64,
}

/// Minimum-cost assignment on a square matrix (shortest augmenting paths
/// with potentials). Returns the column of every row and the dual
/// potentials of rows and columns.
fn solve_square(c: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = c.len();
    let inf = f64::INFINITY;
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut col_of = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    (col_of, u[1..].to_vec(), v[1..].to_vec())
}

/// Tries to re-route the matching so that `row` takes `col`, using only
/// allowed edges and leaving rows below `row` untouched.
fn force_edge(allowed: &[Vec<bool>], col_of: &mut [usize], row_of: &mut [usize], row: usize, col: usize) -> bool {
    let n = col_of.len();
    let freed = col_of[row];
    let displaced = row_of[col];
    // Find an alternating path from `displaced` to `freed` over rows > row.
    let mut prev_row = vec![usize::MAX; n];
    let mut seen_col = vec![false; n];
    let mut stack = vec![displaced];
    let mut found = false;
    seen_col[col] = true;
    let mut via = vec![usize::MAX; n];
    while let Some(r) = stack.pop() {
        for c in 0..n {
            if !allowed[r][c] || seen_col[c] {
                continue;
            }
            seen_col[c] = true;
            via[c] = r;
            if c == freed {
                found = true;
                break;
            }
            let nr = row_of[c];
            if nr > row && prev_row[nr] == usize::MAX {
                prev_row[nr] = c;
                stack.push(nr);
            }
        }
        if found {
            break;
        }
    }
    if !found {
        return false;
    }
    // Walk back from `freed`, shifting each row onto the column it reached.
    let mut c = freed;
    loop {
        let r = via[c];
        let old = col_of[r];
        col_of[r] = c;
        row_of[c] = r;
        if r == displaced {
            break;
        }
        c = old;
    }
    col_of[row] = col;
    row_of[col] = row;
    true
}

/// Minimum-total-cost assignment of a rectangular matrix. Among optimal
/// assignments the lexicographically smallest `(row, col)` sequence wins.
pub fn hungarian(cost: &[Vec<f64>]) -> MatchResult {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return MatchResult {
            pairs: Vec::new(),
            unmatched: (0..rows).collect(),
            total_cost: 0.0,
        };
    }
    let n = rows.max(cols);
    let square: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i < rows && j < cols { cost[i][j] } else { 0.0 })
                .collect()
        })
        .collect();
    let (mut col_of, u, v) = solve_square(&square);
    let total = |col_of: &[usize]| -> f64 {
        (0..rows)
            .filter(|&i| col_of[i] < cols)
            .map(|i| cost[i][col_of[i]])
            .sum()
    };
    let optimum = total(&col_of);

    let scale = square.iter().flatten().fold(1.0_f64, |m, x| m.max(x.abs()));
    let tol = 1e-12 * scale;
    let allowed: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| (square[i][j] - u[i] - v[j]).abs() <= tol).collect())
        .collect();
    let consistent = (0..n).all(|i| allowed[i][col_of[i]]);
    if consistent {
        let mut lex = col_of.clone();
        let mut row_of = vec![0; n];
        for (i, &j) in lex.iter().enumerate() {
            row_of[j] = i;
        }
        for r in 0..n {
            for c in 0..n {
                if c == lex[r] {
                    break;
                }
                if allowed[r][c] && row_of[c] > r && force_edge(&allowed, &mut lex, &mut row_of, r, c) {
                    break;
                }
            }
        }
        if (total(&lex) - optimum).abs() <= 1e-12 * scale * n as f64 {
            col_of = lex;
        }
    }

    let pairs: Vec<(usize, usize)> = (0..rows)
        .filter(|&i| col_of[i] < cols)
        .map(|i| (i, col_of[i]))
        .collect();
    let unmatched = (0..rows).filter(|&i| col_of[i] >= cols).collect();
    let total_cost = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    MatchResult {
        pairs,
        unmatched,
        total_cost,
    }
}

/// One supervised set of predictions: `[N × classes]` logits and
/// `[N × 8]` box codes.
#[derive(Clone, Copy, Debug)]
pub struct StagePrediction {
    pub logits: Var,
    pub boxes: Var,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub iou: f64,
    pub total: f64,
    pub matched: usize,
}

/// Matches one stage against the ground truth and returns its weighted loss.
pub fn stage_loss(g: &mut Graph, stage: &StagePrediction, gts: &[Box3D], w: &CostWeights) -> (Var, LossBreakdown) {
    let logits = g.value(stage.logits).clone();
    let codes_t = g.value(stage.boxes).clone();
    let (n, classes) = logits.shape();
    let probs: Vec<Vec<f64>> = (0..n)
        .map(|i| logits.row(i).iter().map(|&x| sigmoid(x)).collect())
        .collect();
    let codes: Vec<[f64; BOX_CODE]> = (0..n).map(|i| std::array::from_fn(|k| codes_t.get(i, k))).collect();
    let m = hungarian(&pairwise_cost(&probs, &codes, gts, w));
    for &(i, j) in &m.pairs {
        g.note_branch(((i as u64) << 32) | j as u64);
    }
    let norm = 1.0 / gts.len().max(1) as f64;

    let mut targets = Tensor::zeros(n, classes);
    for &(i, j) in &m.pairs {
        targets.set(i, gts[j].class_id, 1.0);
    }
    let cls = g.sigmoid_focal(stage.logits, &targets, w.focal_alpha, w.focal_gamma);
    let cls = g.scale(cls, norm);
    let mut breakdown = LossBreakdown {
        cls: g.scalar(cls),
        matched: m.pairs.len(),
        ..LossBreakdown::default()
    };
    let mut terms = vec![g.scale(cls, w.cls)];
    if !m.pairs.is_empty() {
        let rows: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
        let gt_codes: Vec<f64> = m.pairs.iter().flat_map(|&(_, j)| encode_box(&gts[j])).collect();
        let target = g.constant(Tensor::from_vec(rows.len(), BOX_CODE, gt_codes));
        let pred = g.gather_rows(stage.boxes, &rows);
        let diff = g.sub(pred, target);
        let ad = g.abs(diff);
        let reg = g.sum_all(ad);
        let reg = g.scale(reg, norm);
        breakdown.reg = g.scalar(reg);
        terms.push(g.scale(reg, w.reg));

        let bev = bev_params(g, pred);
        let gt_bev: Vec<[f64; 5]> = m.pairs.iter().map(|&(_, j)| gts[j].bev_params()).collect();
        let iou = g.bev_iou(bev, &gt_bev);
        let s = g.sum_all(iou);
        let s = g.scale(s, -norm);
        let k = g.constant(Tensor::scalar(rows.len() as f64 * norm));
        let iou_loss = g.add(k, s);
        breakdown.iou = g.scalar(iou_loss);
        terms.push(g.scale(iou_loss, w.iou));
    }
    let total = g.add_n(&terms);
    breakdown.total = g.scalar(total);
    (total, breakdown)
}

/// `[k × 8]` box codes to `[k × 5]` BEV rectangles `[x, y, w, l, yaw]`.
pub fn bev_params(g: &mut Graph, codes: Var) -> Var {
    let xy = g.slice_cols(codes, 0, 2);
    let logs = g.slice_cols(codes, 3, 2);
    let wl = g.exp(logs);
    let s = g.slice_cols(codes, 6, 1);
    let c = g.slice_cols(codes, 7, 1);
    let yaw = g.atan2(s, c);
    g.concat_cols(&[xy, wl, yaw])
}

/// Mean of the stage losses plus the per-stage breakdown.
pub fn total_loss(
    g: &mut Graph,
    stages: &[StagePrediction],
    gts: &[Box3D],
    w: &CostWeights,
) -> (Var, Vec<LossBreakdown>) {
    assert!(!stages.is_empty(), "at least one prediction stage is required");
    let (vars, parts): (Vec<Var>, Vec<LossBreakdown>) = stages.iter().map(|s| stage_loss(g, s, gts, w)).unzip();
    let sum = g.add_n(&vars);
    (g.scale(sum, 1.0 / stages.len() as f64), parts)
}
