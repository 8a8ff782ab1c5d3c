//! Objective weights from a preference-constrained min-norm problem.
//!
//! Given per-objective gradients `g_1..g_M`, find simplex weights `ω`
//! minimizing `‖Σ ω_i g_i‖²` subject to `h_qᵀω ≥ β_q`. The combined direction
//! is then non-decreasing for every objective whenever the preference
//! constraints are slack.
//!
//! The solver runs accelerated projected gradient on the Gram form. With
//! one-hot floors the projection is exact and an active-set pass recovers the
//! exact optimum; general half-spaces are handled by Dykstra's alternating
//! projections.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Squared norm below which the combined gradient counts as stationary.
pub const STATIONARY_TOL: f64 = 1e-10;

const MAX_ITERS: usize = 1000;
const DYKSTRA_ROUNDS: usize = 5000;
const FEAS_TOL: f64 = 1e-9;
const ENUMERATE_MAX_M: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum ParetoError {
    #[error("no gradients given")]
    Empty,
    #[error("gradient {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("gradient {0} has a non-finite entry")]
    NonFinite(usize),
    #[error("constraint {index}: {reason}")]
    BadConstraint { index: usize, reason: String },
    #[error("preference constraints {violated:?} cannot hold together on the simplex: {detail}")]
    Infeasible { violated: Vec<usize>, detail: String },
}

/// Half-space `hᵀω ≥ beta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceConstraint {
    pub h: Vec<f64>,
    pub beta: f64,
}

impl PreferenceConstraint {
    /// Floor `ω_m ≥ beta` on every objective.
    pub fn one_hot_floors(m: usize, beta: f64) -> Vec<PreferenceConstraint> {
        (0..m)
            .map(|i| {
                let mut h = vec![0.0; m];
                h[i] = 1.0;
                PreferenceConstraint { h, beta }
            })
            .collect()
    }

    fn one_hot(&self) -> Option<usize> {
        let mut hot = None;
        for (i, &x) in self.h.iter().enumerate() {
            if x == 1.0 && hot.is_none() {
                hot = Some(i);
            } else if x != 0.0 {
                return None;
            }
        }
        hot
    }

    fn slack(&self, w: &[f64]) -> f64 {
        dot(&self.h, w) - self.beta
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Certificate {
    Stationary {
        norm_sq: f64,
    },
    /// Inner products `gᵀg_m`. When `constrained` is false each is at least
    /// `‖g‖²` up to solver tolerance.
    DescentDirection {
        inner_products: Vec<f64>,
        constrained: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoSolution {
    pub weights: Vec<f64>,
    pub combined: Vec<f64>,
    /// `‖combined‖²`.
    pub objective: f64,
    pub certificate: Certificate,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gram matrix `G_ij = g_iᵀ g_j`.
pub fn gram(grads: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = grads.len();
    let mut g = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i..m {
            let v = dot(&grads[i], &grads[j]);
            g[i][j] = v;
            g[j][i] = v;
        }
    }
    g
}

fn quad(g: &[Vec<f64>], w: &[f64]) -> f64 {
    g.iter().zip(w).map(|(row, wi)| wi * dot(row, w)).sum()
}

fn validate_constraints(m: usize, constraints: &[PreferenceConstraint]) -> Result<(), ParetoError> {
    for (index, c) in constraints.iter().enumerate() {
        let bad = |reason: String| Err(ParetoError::BadConstraint { index, reason });
        if c.h.len() != m {
            return bad(format!("h has length {}, expected {m}", c.h.len()));
        }
        if c.h.iter().any(|x| !x.is_finite() || *x < 0.0) || !c.beta.is_finite() {
            return bad("h must be finite and non-negative, beta finite".into());
        }
        let s: f64 = c.h.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return bad(format!("h sums to {s}, expected 1"));
        }
    }
    Ok(())
}

/// Solves the weight problem for explicit gradients.
pub fn solve_weights(grads: &[Vec<f64>], constraints: &[PreferenceConstraint]) -> Result<ParetoSolution, ParetoError> {
    let m = grads.len();
    if m == 0 {
        return Err(ParetoError::Empty);
    }
    let p = grads[0].len();
    for (index, g) in grads.iter().enumerate() {
        if g.len() != p {
            return Err(ParetoError::DimensionMismatch {
                index,
                expected: p,
                got: g.len(),
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(ParetoError::NonFinite(index));
        }
    }
    let weights = solve_gram(&gram(grads), constraints)?;
    let mut combined = vec![0.0; p];
    for (w, g) in weights.iter().zip(grads) {
        combined.iter_mut().zip(g).for_each(|(c, x)| *c += w * x);
    }
    let certificate = certify(&weights, &combined, grads, constraints);
    Ok(ParetoSolution {
        objective: dot(&combined, &combined),
        weights,
        combined,
        certificate,
    })
}

/// Classifies a solution: stationary when `‖g‖² ≤ 1e-10`, otherwise the
/// per-objective inner products.
pub fn certify(
    weights: &[f64],
    combined: &[f64],
    grads: &[Vec<f64>],
    constraints: &[PreferenceConstraint],
) -> Certificate {
    let norm_sq = dot(combined, combined);
    if norm_sq <= STATIONARY_TOL {
        return Certificate::Stationary { norm_sq };
    }
    Certificate::DescentDirection {
        inner_products: grads.iter().map(|g| dot(combined, g)).collect(),
        constrained: constraints.iter().any(|c| c.slack(weights) <= FEAS_TOL),
    }
}

/// Solves the weight problem given the Gram matrix of the gradients.
pub fn solve_gram(g: &[Vec<f64>], constraints: &[PreferenceConstraint]) -> Result<Vec<f64>, ParetoError> {
    let m = g.len();
    if m == 0 {
        return Err(ParetoError::Empty);
    }
    validate_constraints(m, constraints)?;
    let region = Region::new(m, constraints)?;
    if m == 1 {
        return Ok(vec![1.0]);
    }

    let start = region.project(&vec![1.0 / m as f64; m]);
    let lip = 2.0
        * g.iter()
            .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max);
    let mut best = start.clone();
    if lip > 0.0 {
        best = fista(g, &region, start, lip);
    }
    if let Region::Floors(floors) = &region {
        if m <= ENUMERATE_MAX_M {
            let mut exact: Option<(f64, Vec<f64>)> = None;
            for cand in active_set_candidates(g, floors) {
                let v = quad(g, &cand);
                if exact.as_ref().is_none_or(|(e, _)| v < *e) {
                    exact = Some((v, cand));
                }
            }
            // Prefer the closed-form point unless iteration found a clearly
            // lower objective.
            if let Some((v, cand)) = exact {
                let fv = quad(g, &best);
                if v <= fv + 1e-14 * fv.abs().max(1.0) {
                    best = cand;
                }
            }
        }
    }
    Ok(best)
}

fn fista(g: &[Vec<f64>], region: &Region, start: Vec<f64>, lip: f64) -> Vec<f64> {
    let m = g.len();
    let mut w = start.clone();
    let mut y = start;
    let mut t = 1.0f64;
    let mut fw = quad(g, &w);
    for _ in 0..MAX_ITERS {
        let step: Vec<f64> = (0..m).map(|i| y[i] - 2.0 * dot(&g[i], &y) / lip).collect();
        let next = region.project(&step);
        let fnext = quad(g, &next);
        // Gradient-mapping norm at y.
        let gm = lip * next.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if fnext > fw {
            // Restart momentum when the objective goes up.
            t = 1.0;
            y = w.clone();
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        y = (0..m).map(|i| next[i] + beta * (next[i] - w[i])).collect();
        w = next;
        fw = fnext;
        t = t_next;
        if gm <= STATIONARY_TOL {
            break;
        }
    }
    w
}

/// Candidate optima from each choice of free coordinates, with the rest held
/// at their floors.
fn active_set_candidates(g: &[Vec<f64>], floors: &[f64]) -> Vec<Vec<f64>> {
    let m = g.len();
    let slack = 1.0 - floors.iter().sum::<f64>();
    let gf: Vec<f64> = (0..m).map(|i| dot(&g[i], floors)).collect();
    let mut out = Vec::new();
    for mask in 1u32..(1 << m) {
        let free: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = free.len();
        // [2 G_FF  -1] [z]   [-2 (G f)_F]
        // [ 1ᵀ      0] [λ] = [ slack     ]
        let mut a = vec![vec![0.0; k + 2]; k + 1];
        for (r, &i) in free.iter().enumerate() {
            for (c, &j) in free.iter().enumerate() {
                a[r][c] = 2.0 * g[i][j];
            }
            a[r][k] = -1.0;
            a[r][k + 1] = -2.0 * gf[i];
        }
        a[k][..k].fill(1.0);
        a[k][k + 1] = slack;
        let Some(sol) = gauss_solve(a) else { continue };
        let mut z = vec![0.0; m];
        for (r, &i) in free.iter().enumerate() {
            if sol[r] < -1e-12 {
                z.clear();
                break;
            }
            z[i] = sol[r].max(0.0);
        }
        if z.is_empty() {
            continue;
        }
        let total: f64 = z.iter().sum();
        if total > 0.0 {
            z.iter_mut().for_each(|x| *x *= slack / total);
        }
        out.push(z.iter().zip(floors).map(|(a, f)| a + f).collect());
    }
    out
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn gauss_solve(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = a.len();
    let scale = a.iter().flat_map(|r| r[..n].iter()).fold(0.0f64, |s, x| s.max(x.abs()));
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * scale.max(1.0) {
            return None;
        }
        a.swap(col, piv);
        let pivot = a[col].clone();
        for (r, row) in a.iter_mut().enumerate() {
            if r != col {
                let f = row[col] / pivot[col];
                if f != 0.0 {
                    for (x, p) in row[col..].iter_mut().zip(&pivot[col..]) {
                        *x -= f * p;
                    }
                }
            }
        }
    }
    Some((0..n).map(|i| a[i][n] / a[i][i]).collect())
}

/// The feasible set: simplex with optional floors, or simplex plus general
/// half-spaces.
enum Region {
    Floors(Vec<f64>),
    General(Vec<PreferenceConstraint>),
}

impl Region {
    fn new(m: usize, constraints: &[PreferenceConstraint]) -> Result<Region, ParetoError> {
        if constraints.iter().all(|c| c.one_hot().is_some()) {
            let mut floors = vec![0.0f64; m];
            for c in constraints {
                let i = c.one_hot().unwrap();
                floors[i] = floors[i].max(c.beta);
            }
            let total: f64 = floors.iter().sum();
            if total > 1.0 + 1e-12 {
                let violated = (0..constraints.len()).filter(|&q| constraints[q].beta > 0.0).collect();
                return Err(ParetoError::Infeasible {
                    violated,
                    detail: format!("floors sum to {total} > 1"),
                });
            }
            return Ok(Region::Floors(floors));
        }
        let region = Region::General(constraints.to_vec());
        let probe = region.project(&vec![1.0 / m as f64; m]);
        let violated: Vec<usize> = constraints
            .iter()
            .enumerate()
            .filter(|(_, c)| c.slack(&probe) < -FEAS_TOL)
            .map(|(q, _)| q)
            .collect();
        if !violated.is_empty() {
            return Err(ParetoError::Infeasible {
                violated,
                detail: "alternating projections did not reach a feasible point".into(),
            });
        }
        Ok(region)
    }

    fn project(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Region::Floors(f) => project_floored_simplex(x, f),
            Region::General(cs) => dykstra(x, cs),
        }
    }
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(x: &[f64], radius: f64) -> Vec<f64> {
    let mut u = x.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - radius) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    x.iter().map(|&v| (v - theta).max(0.0)).collect()
}

fn project_floored_simplex(x: &[f64], floors: &[f64]) -> Vec<f64> {
    let slack = 1.0 - floors.iter().sum::<f64>();
    let shifted: Vec<f64> = x.iter().zip(floors).map(|(a, f)| a - f).collect();
    project_simplex(&shifted, slack.max(0.0))
        .iter()
        .zip(floors)
        .map(|(z, f)| z + f)
        .collect()
}

fn dykstra(x: &[f64], cs: &[PreferenceConstraint]) -> Vec<f64> {
    let m = x.len();
    let sets = cs.len() + 1;
    let mut incr = vec![vec![0.0; m]; sets];
    let mut cur = x.to_vec();
    for _ in 0..DYKSTRA_ROUNDS {
        let before = cur.clone();
        for (s, inc) in incr.iter_mut().enumerate() {
            let y: Vec<f64> = cur.iter().zip(inc.iter()).map(|(a, b)| a + b).collect();
            let p = if s == 0 {
                project_simplex(&y, 1.0)
            } else {
                let c = &cs[s - 1];
                let slack = c.slack(&y);
                if slack >= 0.0 {
                    y.clone()
                } else {
                    let hh = dot(&c.h, &c.h);
                    y.iter().zip(&c.h).map(|(v, h)| v - slack * h / hh).collect()
                }
            };
            *inc = y.iter().zip(&p).map(|(a, b)| a - b).collect();
            cur = p;
        }
        let moved = cur.iter().zip(&before).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if moved <= 1e-15 {
            break;
        }
    }
    // Finish on the simplex so the weights sum to one.
    project_simplex(&cur, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn floors() -> Vec<PreferenceConstraint> {
        PreferenceConstraint::one_hot_floors(2, 0.2)
    }

    #[test]
    fn symmetric_pair() {
        let s = solve_weights(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[]).unwrap();
        assert_abs_diff_eq!(s.weights[0], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(s.weights[1], 0.5, epsilon = 1e-9);
        match s.certificate {
            Certificate::DescentDirection {
                inner_products,
                constrained,
            } => {
                assert!(!constrained);
                assert_abs_diff_eq!(inner_products[0], 0.5, epsilon = 1e-9);
                assert_abs_diff_eq!(inner_products[1], 0.5, epsilon = 1e-9);
            }
            c => panic!("{c:?}"),
        }
        assert_abs_diff_eq!(s.objective, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn closed_form_pair() {
        // 8w - 2(1 - w) = 0 gives w = 0.2.
        let s = solve_weights(&[vec![2.0, 0.0], vec![0.0, 1.0]], &[]).unwrap();
        assert_abs_diff_eq!(s.weights[0], 0.2, epsilon = 1e-9);
        assert_abs_diff_eq!(s.weights[1], 0.8, epsilon = 1e-9);
    }

    #[test]
    fn floor_binds() {
        let s = solve_weights(&[vec![10.0, 0.0], vec![0.0, 1.0]], &floors()).unwrap();
        assert_abs_diff_eq!(s.weights[0], 0.2, epsilon = 1e-9);
        assert_abs_diff_eq!(s.weights[1], 0.8, epsilon = 1e-9);
        assert!(matches!(
            s.certificate,
            Certificate::DescentDirection { constrained: true, .. }
        ));
        // 0.001-grid oracle over the feasible segment.
        let f = |w: f64| 100.0 * w * w + (1.0 - w) * (1.0 - w);
        let grid = (200..=800).map(|k| f(k as f64 / 1000.0)).fold(f64::INFINITY, f64::min);
        assert!(s.objective <= grid + 1e-9);
    }

    #[test]
    fn opposing_is_stationary() {
        for c in [vec![], floors()] {
            let s = solve_weights(&[vec![1.0, 0.0], vec![-1.0, 0.0]], &c).unwrap();
            match s.certificate {
                Certificate::Stationary { norm_sq } => assert!(norm_sq <= STATIONARY_TOL),
                c => panic!("{c:?}"),
            }
            assert_abs_diff_eq!(s.weights[0], 0.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn single_objective() {
        let s = solve_weights(&[vec![3.0, 4.0]], &PreferenceConstraint::one_hot_floors(1, 0.2)).unwrap();
        assert_eq!(s.weights, vec![1.0]);
        assert_abs_diff_eq!(s.objective, 25.0);
    }

    #[test]
    fn infeasible_floors() {
        let e = solve_weights(&[vec![1.0], vec![2.0]], &PreferenceConstraint::one_hot_floors(2, 0.6)).unwrap_err();
        assert!(matches!(e, ParetoError::Infeasible { .. }));
        let general = vec![
            PreferenceConstraint {
                h: vec![0.5, 0.5, 0.0],
                beta: 0.9,
            },
            PreferenceConstraint {
                h: vec![0.0, 0.0, 1.0],
                beta: 0.5,
            },
        ];
        let e = solve_weights(&[vec![1.0], vec![2.0], vec![3.0]], &general).unwrap_err();
        assert!(matches!(e, ParetoError::Infeasible { .. }), "{e:?}");
    }

    #[test]
    fn input_validation() {
        assert_eq!(solve_weights(&[], &[]).unwrap_err(), ParetoError::Empty);
        assert!(matches!(
            solve_weights(&[vec![1.0], vec![1.0, 2.0]], &[]),
            Err(ParetoError::DimensionMismatch { index: 1, .. })
        ));
        assert!(matches!(
            solve_weights(&[vec![f64::NAN], vec![1.0]], &[]),
            Err(ParetoError::NonFinite(0))
        ));
        let bad = [PreferenceConstraint {
            h: vec![0.7, 0.7],
            beta: 0.1,
        }];
        assert!(matches!(
            solve_weights(&[vec![1.0], vec![2.0]], &bad),
            Err(ParetoError::BadConstraint { index: 0, .. })
        ));
    }

    #[test]
    fn general_halfspace() {
        // Mixed constraint 0.5 w1 + 0.5 w2 >= 0.4 on three objectives; the
        // third gradient is tiny so the unconstrained optimum sits at e3.
        let grads = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 0.01]];
        let c = vec![PreferenceConstraint {
            h: vec![0.5, 0.5, 0.0],
            beta: 0.4,
        }];
        let s = solve_weights(&grads, &c).unwrap();
        assert!(c[0].slack(&s.weights) >= -1e-8);
        assert_abs_diff_eq!(s.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-8);
        // By symmetry w1 = w2, and w3 takes all the room the constraint leaves.
        assert_abs_diff_eq!(s.weights[2], 0.2, epsilon = 1e-6);
        let grid = grid_min(&grads, &c, 100);
        assert!(s.objective <= grid + 1e-6, "{} vs {grid}", s.objective);
    }

    #[test]
    fn simplex_projection() {
        assert_eq!(project_simplex(&[0.2, 0.8], 1.0), vec![0.2, 0.8]);
        let p = project_simplex(&[2.0, 0.0, -1.0], 1.0);
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
        let p = project_simplex(&[0.5, 0.5, 0.5], 1.0);
        for x in p {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    /// Objective minimum over a simplex grid with `steps` divisions.
    fn grid_min(grads: &[Vec<f64>], cs: &[PreferenceConstraint], steps: usize) -> f64 {
        let g = gram(grads);
        let m = grads.len();
        let mut best = f64::INFINITY;
        let mut visit = |w: &[f64]| {
            if cs.iter().all(|c| c.slack(w) >= -1e-12) {
                best = best.min(quad(&g, w));
            }
        };
        let s = steps as f64;
        match m {
            2 => (0..=steps).for_each(|a| visit(&[a as f64 / s, 1.0 - a as f64 / s])),
            3 => {
                for a in 0..=steps {
                    for b in 0..=steps - a {
                        visit(&[a as f64 / s, b as f64 / s, (steps - a - b) as f64 / s]);
                    }
                }
            }
            _ => unreachable!(),
        }
        best
    }

    fn instance(m: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 8), m)
    }

    proptest! {
        #[test]
        fn feasible_and_grid_optimal(grads in (2usize..=3).prop_flat_map(instance), floored in any::<bool>()) {
            let cs = if floored { PreferenceConstraint::one_hot_floors(grads.len(), 0.2) } else { vec![] };
            let s = solve_weights(&grads, &cs).unwrap();
            prop_assert!((s.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-8);
            prop_assert!(s.weights.iter().all(|&w| w >= -1e-10));
            for c in &cs {
                prop_assert!(c.slack(&s.weights) >= -1e-8);
            }
            prop_assert!(s.objective <= grid_min(&grads, &cs, 100) + 1e-6);
        }

        #[test]
        fn min_norm_inequality(grads in instance(3)) {
            let s = solve_weights(&grads, &[]).unwrap();
            for g in &grads {
                prop_assert!(dot(&s.combined, g) >= s.objective - 1e-6);
            }
        }

        #[test]
        fn scale_covariant(grads in instance(3), c in 0.1f64..10.0) {
            let a = solve_weights(&grads, &[]).unwrap();
            let scaled: Vec<Vec<f64>> = grads.iter().map(|g| g.iter().map(|x| x * c).collect()).collect();
            let b = solve_weights(&scaled, &[]).unwrap();
            for (x, y) in a.weights.iter().zip(&b.weights) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }
    }
}
