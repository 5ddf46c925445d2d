//! Bounded-variable revised simplex for dense linear programs.
//!
//! Solves `min c'x` subject to `Ax = b` and `l <= x <= u`, where bounds may
//! be infinite (free variables use `-inf`/`+inf`). Phase 1 minimises the sum
//! of artificial variables from an all-at-bounds starting point; phase 2
//! optimises the true objective with artificials pinned at zero. The basis
//! inverse is kept explicitly (row counts here are small) with periodic
//! refactorisation, Dantzig pricing, and a Bland fallback against cycling.

use crate::error::{Error, Result};

/// Dense LP in computational standard form. `cols` is column-major
/// (`n_rows * n_cols`), which keeps pricing cache-friendly when columns far
/// outnumber rows.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub n_rows: usize,
    pub n_cols: usize,
    pub cols: Vec<f64>,
    pub objective: Vec<f64>,
    pub rhs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Row multipliers `y = c_B' B^{-1}` at optimality.
    pub duals: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum VarStatus {
    Basic,
    AtLower,
    AtUpper,
    /// Free nonbasic variable parked at zero.
    FreeZero,
}

const DUAL_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-11;
const FEAS_TOL: f64 = 1e-7;
const REFACTOR_EVERY: usize = 64;

pub fn solve(lp: &LinearProgram) -> Result<LpSolution> {
    validate(lp)?;
    let mut s = Simplex::new(lp);
    s.run_phase1()?;
    s.run_phase2()?;
    Ok(s.extract(lp))
}

fn validate(lp: &LinearProgram) -> Result<()> {
    let (m, n) = (lp.n_rows, lp.n_cols);
    if m == 0 || n == 0 {
        return Err(Error::Config("empty linear program".into()));
    }
    if lp.cols.len() != m * n
        || lp.objective.len() != n
        || lp.rhs.len() != m
        || lp.lower.len() != n
        || lp.upper.len() != n
    {
        return Err(Error::Shape {
            op: "simplex",
            detail: "inconsistent problem dimensions".into(),
        });
    }
    for j in 0..n {
        if lp.lower[j] > lp.upper[j] {
            return Err(Error::Infeasible(format!(
                "variable {j} has lower bound above upper bound"
            )));
        }
        if lp.lower[j].is_nan() || lp.upper[j].is_nan() {
            return Err(Error::Numerical {
                context: "simplex",
                detail: format!("NaN bound on variable {j}"),
            });
        }
    }
    if lp
        .cols
        .iter()
        .chain(&lp.objective)
        .chain(&lp.rhs)
        .any(|v| !v.is_finite())
    {
        return Err(Error::Numerical {
            context: "simplex",
            detail: "non-finite coefficient".into(),
        });
    }
    Ok(())
}

struct Simplex {
    m: usize,
    n_struct: usize,
    n_total: usize,
    /// Column-major structural columns; artificial column `j >= n_struct`
    /// is `sign[j - n_struct] * e_{j - n_struct}` and is stored implicitly.
    cols: Vec<f64>,
    art_sign: Vec<f64>,
    rhs: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    costs: Vec<f64>,
    phase2_costs: Vec<f64>,
    status: Vec<VarStatus>,
    basis: Vec<usize>,
    x: Vec<f64>,
    binv: Vec<f64>,
    iterations: usize,
    pivots_since_refactor: usize,
    phase2: bool,
}

impl Simplex {
    fn new(lp: &LinearProgram) -> Self {
        let m = lp.n_rows;
        let n = lp.n_cols;
        let n_total = n + m;

        let mut status = Vec::with_capacity(n_total);
        let mut x = Vec::with_capacity(n_total);
        for j in 0..n {
            if lp.lower[j].is_finite() {
                status.push(VarStatus::AtLower);
                x.push(lp.lower[j]);
            } else if lp.upper[j].is_finite() {
                status.push(VarStatus::AtUpper);
                x.push(lp.upper[j]);
            } else {
                status.push(VarStatus::FreeZero);
                x.push(0.0);
            }
        }

        // Residual the artificials must cover.
        let mut resid = lp.rhs.clone();
        for j in 0..n {
            if x[j] != 0.0 {
                for i in 0..m {
                    resid[i] -= lp.cols[j * m + i] * x[j];
                }
            }
        }
        let mut art_sign = Vec::with_capacity(m);
        let mut basis = Vec::with_capacity(m);
        let mut binv = vec![0.0; m * m];
        for i in 0..m {
            let sign = if resid[i] < 0.0 { -1.0 } else { 1.0 };
            art_sign.push(sign);
            basis.push(n + i);
            status.push(VarStatus::Basic);
            x.push(resid[i].abs());
            // B = diag(sign) is its own inverse.
            binv[i * m + i] = sign;
        }

        let mut lower = lp.lower.clone();
        let mut upper = lp.upper.clone();
        lower.extend(std::iter::repeat(0.0).take(m));
        upper.extend(std::iter::repeat(f64::INFINITY).take(m));

        let mut costs = vec![0.0; n_total];
        for c in costs.iter_mut().skip(n) {
            *c = 1.0;
        }
        let mut phase2_costs = lp.objective.clone();
        phase2_costs.extend(std::iter::repeat(0.0).take(m));

        Simplex {
            m,
            n_struct: n,
            n_total,
            cols: lp.cols.clone(),
            art_sign,
            rhs: lp.rhs.clone(),
            lower,
            upper,
            costs,
            phase2_costs,
            status,
            basis,
            x,
            binv,
            iterations: 0,
            pivots_since_refactor: 0,
            phase2: false,
        }
    }

    fn column(&self, j: usize, out: &mut [f64]) {
        if j < self.n_struct {
            out.copy_from_slice(&self.cols[j * self.m..(j + 1) * self.m]);
        } else {
            out.iter_mut().for_each(|v| *v = 0.0);
            out[j - self.n_struct] = self.art_sign[j - self.n_struct];
        }
    }

    fn col_dot(&self, j: usize, y: &[f64]) -> f64 {
        if j < self.n_struct {
            let col = &self.cols[j * self.m..(j + 1) * self.m];
            col.iter().zip(y).map(|(a, b)| a * b).sum()
        } else {
            self.art_sign[j - self.n_struct] * y[j - self.n_struct]
        }
    }

    fn duals(&self) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for (slot, &bj) in self.basis.iter().enumerate() {
            let cb = self.costs[bj];
            if cb != 0.0 {
                let row = &self.binv[slot * m..(slot + 1) * m];
                for i in 0..m {
                    y[i] += cb * row[i];
                }
            }
        }
        y
    }

    fn run_phase1(&mut self) -> Result<()> {
        self.optimize()?;
        let art_value: f64 = (self.n_struct..self.n_total)
            .map(|j| self.x[j].abs())
            .sum();
        let scale = 1.0 + self.rhs.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if art_value > FEAS_TOL * scale {
            return Err(Error::Infeasible(format!(
                "phase-1 residual {art_value:.3e}"
            )));
        }
        // Pin artificials to zero for phase 2; basic artificials may remain
        // at value zero.
        for j in self.n_struct..self.n_total {
            self.upper[j] = 0.0;
            if self.status[j] != VarStatus::Basic {
                self.status[j] = VarStatus::AtLower;
                self.x[j] = 0.0;
            }
        }
        self.costs = self.phase2_costs.clone();
        self.phase2 = true;
        self.refactor()?;
        Ok(())
    }

    fn run_phase2(&mut self) -> Result<()> {
        self.optimize()
    }

    fn optimize(&mut self) -> Result<()> {
        let cap = 20_000 + 50 * (self.n_total + self.m);
        let bland_after = 2_000 + 5 * (self.n_total + self.m);
        let mut local_iter = 0usize;
        loop {
            if local_iter > cap {
                return Err(Error::Numerical {
                    context: "simplex",
                    detail: format!("iteration cap {cap} exceeded"),
                });
            }
            let bland = local_iter > bland_after;
            local_iter += 1;
            self.iterations += 1;

            let y = self.duals();
            let mut entering: Option<(usize, f64, f64)> = None; // (col, |d|, dir)
            for j in 0..self.n_total {
                if self.status[j] == VarStatus::Basic {
                    continue;
                }
                if self.phase2 && j >= self.n_struct {
                    continue;
                }
                let d = self.costs[j] - self.col_dot(j, &y);
                let dir = match self.status[j] {
                    VarStatus::AtLower if d < -DUAL_TOL => 1.0,
                    VarStatus::AtUpper if d > DUAL_TOL => -1.0,
                    VarStatus::FreeZero if d < -DUAL_TOL => 1.0,
                    VarStatus::FreeZero if d > DUAL_TOL => -1.0,
                    _ => continue,
                };
                if bland {
                    entering = Some((j, d.abs(), dir));
                    break;
                }
                match entering {
                    Some((_, best, _)) if d.abs() <= best => {}
                    _ => entering = Some((j, d.abs(), dir)),
                }
            }
            let (j_in, _, dir) = match entering {
                Some(e) => e,
                None => return Ok(()),
            };

            // Direction through the basis: w = B^{-1} a_j.
            let mut a_j = vec![0.0; self.m];
            self.column(j_in, &mut a_j);
            let mut w = vec![0.0; self.m];
            for i in 0..self.m {
                let row = &self.binv[i * self.m..(i + 1) * self.m];
                w[i] = row.iter().zip(&a_j).map(|(a, b)| a * b).sum();
            }

            // Ratio test: basic variables move as x_B(t) = x_B - t * dir * w.
            let span = self.upper[j_in] - self.lower[j_in]; // may be inf
            let mut t_limit = span;
            let mut leaving: Option<(usize, f64, bool)> = None; // (slot, |w|, hits_upper)
            for (slot, &bj) in self.basis.iter().enumerate() {
                let rate = dir * w[slot];
                if rate > PIVOT_TOL {
                    if self.lower[bj].is_finite() {
                        let t = (self.x[bj] - self.lower[bj]) / rate;
                        if t < t_limit - PIVOT_TOL
                            || (t < t_limit + PIVOT_TOL
                                && leaving.map_or(true, |(_, bw, _)| rate.abs() > bw))
                        {
                            t_limit = t.max(0.0);
                            leaving = Some((slot, rate.abs(), false));
                        }
                    }
                } else if rate < -PIVOT_TOL && self.upper[bj].is_finite() {
                    let t = (self.upper[bj] - self.x[bj]) / (-rate);
                    if t < t_limit - PIVOT_TOL
                        || (t < t_limit + PIVOT_TOL
                            && leaving.map_or(true, |(_, bw, _)| rate.abs() > bw))
                    {
                        t_limit = t.max(0.0);
                        leaving = Some((slot, rate.abs(), true));
                    }
                }
            }

            if t_limit.is_infinite() {
                return Err(Error::Unbounded("simplex ray detected".into()));
            }

            // Move the entering variable and the basis.
            let t = t_limit.max(0.0);
            self.x[j_in] += dir * t;
            for (slot, &bj) in self.basis.iter().enumerate() {
                self.x[bj] -= t * dir * w[slot];
            }

            match leaving {
                None => {
                    // Bound-to-bound flip.
                    self.status[j_in] = match self.status[j_in] {
                        VarStatus::AtLower => VarStatus::AtUpper,
                        VarStatus::AtUpper => VarStatus::AtLower,
                        other => other,
                    };
                    self.x[j_in] = if self.status[j_in] == VarStatus::AtUpper {
                        self.upper[j_in]
                    } else {
                        self.lower[j_in]
                    };
                }
                Some((slot, _, hits_upper)) => {
                    let leaving_var = self.basis[slot];
                    self.status[leaving_var] = if hits_upper {
                        VarStatus::AtUpper
                    } else {
                        VarStatus::AtLower
                    };
                    self.x[leaving_var] = if hits_upper {
                        self.upper[leaving_var]
                    } else {
                        self.lower[leaving_var]
                    };
                    self.basis[slot] = j_in;
                    self.status[j_in] = VarStatus::Basic;
                    self.pivot_update(slot, &w)?;
                }
            }
        }
    }

    /// Product-form update of `B^{-1}` after replacing basis slot `r`.
    fn pivot_update(&mut self, r: usize, w: &[f64]) -> Result<()> {
        let m = self.m;
        let pivot = w[r];
        if pivot.abs() < PIVOT_TOL {
            return Err(Error::Numerical {
                context: "simplex",
                detail: "vanishing pivot".into(),
            });
        }
        let inv_pivot = 1.0 / pivot;
        for k in 0..m {
            self.binv[r * m + k] *= inv_pivot;
        }
        for i in 0..m {
            if i == r {
                continue;
            }
            let f = w[i];
            if f == 0.0 {
                continue;
            }
            for k in 0..m {
                self.binv[i * m + k] -= f * self.binv[r * m + k];
            }
        }
        self.pivots_since_refactor += 1;
        if self.pivots_since_refactor >= REFACTOR_EVERY {
            self.refactor()?;
        }
        Ok(())
    }

    /// Rebuilds `B^{-1}` by Gauss-Jordan with partial pivoting and recomputes
    /// the basic solution from the nonbasic values.
    fn refactor(&mut self) -> Result<()> {
        let m = self.m;
        let mut aug = vec![0.0; m * 2 * m];
        let mut col = vec![0.0; m];
        for (slot, &bj) in self.basis.iter().enumerate() {
            self.column(bj, &mut col);
            for i in 0..m {
                aug[i * 2 * m + slot] = col[i];
            }
        }
        for i in 0..m {
            aug[i * 2 * m + m + i] = 1.0;
        }
        for p in 0..m {
            let mut best = p;
            for i in p + 1..m {
                if aug[i * 2 * m + p].abs() > aug[best * 2 * m + p].abs() {
                    best = i;
                }
            }
            if aug[best * 2 * m + p].abs() < 1e-12 {
                return Err(Error::Numerical {
                    context: "simplex",
                    detail: "singular basis during refactorisation".into(),
                });
            }
            if best != p {
                for k in 0..2 * m {
                    aug.swap(p * 2 * m + k, best * 2 * m + k);
                }
            }
            let inv = 1.0 / aug[p * 2 * m + p];
            for k in 0..2 * m {
                aug[p * 2 * m + k] *= inv;
            }
            for i in 0..m {
                if i == p {
                    continue;
                }
                let f = aug[i * 2 * m + p];
                if f == 0.0 {
                    continue;
                }
                for k in 0..2 * m {
                    aug[i * 2 * m + k] -= f * aug[p * 2 * m + k];
                }
            }
        }
        for i in 0..m {
            for k in 0..m {
                self.binv[i * m + k] = aug[i * 2 * m + m + k];
            }
        }
        self.pivots_since_refactor = 0;

        // x_B = B^{-1} (b - sum over nonbasic columns at nonzero values).
        let mut resid = self.rhs.clone();
        let mut colbuf = vec![0.0; m];
        for j in 0..self.n_total {
            if self.status[j] != VarStatus::Basic && self.x[j] != 0.0 {
                self.column(j, &mut colbuf);
                for i in 0..m {
                    resid[i] -= colbuf[i] * self.x[j];
                }
            }
        }
        for slot in 0..m {
            let row = &self.binv[slot * m..(slot + 1) * m];
            let v: f64 = row.iter().zip(&resid).map(|(a, b)| a * b).sum();
            self.x[self.basis[slot]] = v;
        }
        Ok(())
    }

    fn extract(&mut self, lp: &LinearProgram) -> LpSolution {
        let objective = (0..self.n_struct)
            .map(|j| lp.objective[j] * self.x[j])
            .sum();
        LpSolution {
            x: self.x[..self.n_struct].to_vec(),
            objective,
            duals: self.duals(),
            iterations: self.iterations,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const INF: f64 = f64::INFINITY;

    /// Column-major helper from row-major input.
    fn lp(
        rows: usize,
        cols: usize,
        a_rowmajor: &[f64],
        c: &[f64],
        b: &[f64],
        lo: &[f64],
        hi: &[f64],
    ) -> LinearProgram {
        let mut colmajor = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                colmajor[j * rows + i] = a_rowmajor[i * cols + j];
            }
        }
        LinearProgram {
            n_rows: rows,
            n_cols: cols,
            cols: colmajor,
            objective: c.to_vec(),
            rhs: b.to_vec(),
            lower: lo.to_vec(),
            upper: hi.to_vec(),
        }
    }

    /// Optimality certificate: primal feasibility plus reduced-cost signs.
    fn assert_optimal(p: &LinearProgram, s: &LpSolution) {
        for i in 0..p.n_rows {
            let mut ax = 0.0;
            for j in 0..p.n_cols {
                ax += p.cols[j * p.n_rows + i] * s.x[j];
            }
            assert!((ax - p.rhs[i]).abs() < 1e-7, "row {i}: {ax} vs {}", p.rhs[i]);
        }
        for j in 0..p.n_cols {
            assert!(s.x[j] >= p.lower[j] - 1e-7);
            assert!(s.x[j] <= p.upper[j] + 1e-7);
            let mut d = p.objective[j];
            for i in 0..p.n_rows {
                d -= p.cols[j * p.n_rows + i] * s.duals[i];
            }
            let at_lower = (s.x[j] - p.lower[j]).abs() < 1e-7;
            let at_upper = (s.x[j] - p.upper[j]).abs() < 1e-7;
            if at_lower && at_upper {
                continue;
            } else if at_lower {
                assert!(d > -1e-6, "var {j} at lower with d={d}");
            } else if at_upper {
                assert!(d < 1e-6, "var {j} at upper with d={d}");
            } else {
                assert!(d.abs() < 1e-6, "interior var {j} with d={d}");
            }
        }
    }

    #[test]
    fn bounded_two_variable() {
        // min -x s.t. x + y = 1, x,y in [0, 0.6] -> x = 0.6
        let p = lp(
            1,
            2,
            &[1.0, 1.0],
            &[-1.0, 0.0],
            &[1.0],
            &[0.0, 0.0],
            &[0.6, 0.6],
        );
        let s = solve(&p).unwrap();
        assert!((s.x[0] - 0.6).abs() < 1e-9);
        assert!((s.x[1] - 0.4).abs() < 1e-9);
        assert!((s.objective + 0.6).abs() < 1e-9);
        assert_optimal(&p, &s);
    }

    #[test]
    fn detects_infeasible() {
        let p = lp(
            1,
            2,
            &[1.0, 1.0],
            &[1.0, 1.0],
            &[3.0],
            &[0.0, 0.0],
            &[1.0, 1.0],
        );
        assert!(matches!(solve(&p), Err(Error::Infeasible(_))));
    }

    #[test]
    fn detects_unbounded() {
        // min -x s.t. x - y = 0, x,y >= 0
        let p = lp(
            1,
            2,
            &[1.0, -1.0],
            &[-1.0, 0.0],
            &[0.0],
            &[0.0, 0.0],
            &[INF, INF],
        );
        assert!(matches!(solve(&p), Err(Error::Unbounded(_))));
    }

    #[test]
    fn free_variable_absorbs_slack() {
        // min x s.t. x + f = 2, x in [0, 10], f free -> x = 0, f = 2
        let p = lp(
            1,
            2,
            &[1.0, 1.0],
            &[1.0, 0.0],
            &[2.0],
            &[0.0, -INF],
            &[10.0, INF],
        );
        let s = solve(&p).unwrap();
        assert!(s.x[0].abs() < 1e-9);
        assert!((s.x[1] - 2.0).abs() < 1e-9);
        assert_optimal(&p, &s);
    }

    #[test]
    fn negative_rhs_and_mixed_signs() {
        // min x1 + 2 x2 s.t. -x1 + x2 = -1; x1 - 3 x2 + x3 = 2; x >= 0
        let p = lp(
            2,
            3,
            &[-1.0, 1.0, 0.0, 1.0, -3.0, 1.0],
            &[1.0, 2.0, 0.0],
            &[-1.0, 2.0],
            &[0.0, 0.0, 0.0],
            &[INF, INF, INF],
        );
        let s = solve(&p).unwrap();
        assert!((s.objective - 1.0).abs() < 1e-9, "obj={}", s.objective);
        assert_optimal(&p, &s);
    }

    #[test]
    fn classic_dantzig_example() {
        // max 3x + 2y + z, x + y + z <= 10, x - y >= 2, x,y,z >= 0
        // as min with slacks: -3x - 2y - z; x+y+z+s1 = 10; x-y-s2 = 2.
        let p = lp(
            2,
            5,
            &[
                1.0, 1.0, 1.0, 1.0, 0.0, //
                1.0, -1.0, 0.0, 0.0, -1.0,
            ],
            &[-3.0, -2.0, -1.0, 0.0, 0.0],
            &[10.0, 2.0],
            &[0.0; 5],
            &[INF; 5],
        );
        let s = solve(&p).unwrap();
        // optimum: x = 10, y = z = 0 -> obj = -30
        assert!((s.objective + 30.0).abs() < 1e-8, "obj={}", s.objective);
        assert!((s.x[0] - 10.0).abs() < 1e-8);
        assert_optimal(&p, &s);
    }

    #[test]
    fn degenerate_vertices_terminate() {
        // Multiple constraints meeting at the same vertex.
        let p = lp(
            3,
            6,
            &[
                1.0, 1.0, 0.0, 1.0, 0.0, 0.0, //
                1.0, 0.0, 1.0, 0.0, 1.0, 0.0, //
                1.0, 1.0, 1.0, 0.0, 0.0, 1.0,
            ],
            &[-1.0, -1.0, -1.0, 0.0, 0.0, 0.0],
            &[1.0, 1.0, 1.0],
            &[0.0; 6],
            &[INF; 6],
        );
        let s = solve(&p).unwrap();
        assert_optimal(&p, &s);
    }

    #[test]
    fn random_instances_satisfy_certificate() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        let mut solved = 0;
        for trial in 0..200 {
            let m = rng.gen_range(1..=4);
            let n = rng.gen_range(m..=m + 6);
            let a: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lo: Vec<f64> = (0..n)
                .map(|_| if rng.gen_bool(0.8) { 0.0 } else { -INF })
                .collect();
            let hi: Vec<f64> = lo
                .iter()
                .map(|&l| {
                    if l.is_finite() && rng.gen_bool(0.5) {
                        rng.gen_range(0.5..3.0)
                    } else {
                        INF
                    }
                })
                .collect();
            // Build a feasible rhs from a random interior-ish point.
            let x0: Vec<f64> = (0..n)
                .map(|j| {
                    let l = if lo[j].is_finite() { lo[j] } else { -1.0 };
                    let h = if hi[j].is_finite() { hi[j] } else { l + 2.0 };
                    rng.gen_range(l..=h)
                })
                .collect();
            let mut b = vec![0.0; m];
            for i in 0..m {
                for j in 0..n {
                    b[i] += a[i * n + j] * x0[j];
                }
            }
            let p = lp(m, n, &a, &c, &b, &lo, &hi);
            match solve(&p) {
                Ok(s) => {
                    assert_optimal(&p, &s);
                    // objective must not exceed the known feasible point's
                    let obj0: f64 = c.iter().zip(&x0).map(|(a, b)| a * b).sum();
                    assert!(s.objective <= obj0 + 1e-7, "trial {trial}");
                    solved += 1;
                }
                Err(Error::Unbounded(_)) => {}
                Err(e) => panic!("trial {trial}: unexpected {e:?}"),
            }
        }
        assert!(solved > 100, "only {solved} bounded instances");
    }
}
