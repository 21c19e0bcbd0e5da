//! Stage-structured convex QP solved by a primal-dual interior-point method.
//!
//! ```text
//! min  sum_k 1/2 [x;u]' [Q S'; S R] [x;u] + q'x + r'u  +  1/2 x_N' Q_N x_N + q_N' x_N
//!      + sum_e (1/2 w_e s_e^2 + l_e s_e)
//! s.t. x_{k+1} = A_k x_k + B_k u_k + c_k,   x_0 fixed
//!      gx' x_k + gu' u_k <= rhs              (linear rows)
//!      gx' x_k - s_e <= rhs,  s_e >= lower   (elastic rows)
//! ```
//!
//! Each Newton system is an unconstrained LQ problem; elastic variables are
//! eliminated per stage and the rest is solved with a Riccati recursion, so
//! the cost per iteration is linear in the horizon.

use nalgebra::{SMatrix, SVector};

#[derive(Debug, Clone)]
pub struct LinearRow<const NX: usize, const NU: usize> {
    pub gx: SVector<f64, NX>,
    pub gu: SVector<f64, NU>,
    pub rhs: f64,
}

/// Row `gx' x - s <= rhs` with its own elastic variable `s >= lower`.
#[derive(Debug, Clone)]
pub struct ElasticRow<const NX: usize> {
    pub gx: SVector<f64, NX>,
    pub rhs: f64,
    pub lower: f64,
    /// Quadratic weight on `s` (the cost is `weight/2 * s^2`).
    pub weight: f64,
    pub linear: f64,
}

#[derive(Debug, Clone)]
pub struct QpStage<const NX: usize, const NU: usize> {
    pub q: SMatrix<f64, NX, NX>,
    pub s: SMatrix<f64, NU, NX>,
    pub r: SMatrix<f64, NU, NU>,
    pub qv: SVector<f64, NX>,
    pub rv: SVector<f64, NU>,
    pub a: SMatrix<f64, NX, NX>,
    pub b: SMatrix<f64, NX, NU>,
    pub c: SVector<f64, NX>,
    pub rows: Vec<LinearRow<NX, NU>>,
    pub elastic: Vec<ElasticRow<NX>>,
}

impl<const NX: usize, const NU: usize> QpStage<NX, NU> {
    pub fn zeros() -> Self {
        Self {
            q: SMatrix::zeros(),
            s: SMatrix::zeros(),
            r: SMatrix::zeros(),
            qv: SVector::zeros(),
            rv: SVector::zeros(),
            a: SMatrix::zeros(),
            b: SMatrix::zeros(),
            c: SVector::zeros(),
            rows: Vec::new(),
            elastic: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpTerminal<const NX: usize> {
    pub q: SMatrix<f64, NX, NX>,
    pub qv: SVector<f64, NX>,
    pub rows: Vec<(SVector<f64, NX>, f64)>,
    pub elastic: Vec<ElasticRow<NX>>,
}

#[derive(Debug, Clone)]
pub struct OcpQp<const NX: usize, const NU: usize> {
    pub x0: SVector<f64, NX>,
    pub stages: Vec<QpStage<NX, NU>>,
    pub terminal: QpTerminal<NX>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub step_fraction: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { max_iter: 80, tol: 1e-9, step_fraction: 0.995 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIter,
    Failed,
}

#[derive(Debug, Clone)]
pub struct QpSolution<const NX: usize, const NU: usize> {
    pub xs: Vec<SVector<f64, NX>>,
    pub us: Vec<SVector<f64, NU>>,
    /// Elastic variables per stage (terminal last).
    pub elastic: Vec<Vec<f64>>,
    /// Multiplier of `x_{k+1} = A x_k + B u_k + c`, stored at index `k`.
    pub costates: Vec<SVector<f64, NX>>,
    /// Multipliers of the linear rows per stage (terminal last).
    pub row_duals: Vec<Vec<f64>>,
    /// Multipliers `(coupling row, lower bound)` per elastic variable.
    pub elastic_duals: Vec<Vec<(f64, f64)>>,
    pub iterations: usize,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

/// Slack and dual pairs of one stage's inequality rows.
#[derive(Debug, Clone, Default)]
struct StageDuals {
    t: Vec<f64>,
    z: Vec<f64>,
    tc: Vec<f64>,
    zc: Vec<f64>,
    tb: Vec<f64>,
    zb: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Iterate<const NX: usize, const NU: usize> {
    xs: Vec<SVector<f64, NX>>,
    us: Vec<SVector<f64, NU>>,
    es: Vec<Vec<f64>>,
    duals: Vec<StageDuals>,
}

/// Per-row primal residuals `g'y + t - rhs`.
#[derive(Debug, Clone, Default)]
struct StageResiduals {
    rho: Vec<f64>,
    rho_c: Vec<f64>,
    rho_b: Vec<f64>,
}

/// Complementarity right-hand sides.
#[derive(Debug, Clone, Default)]
struct StageComp {
    rc: Vec<f64>,
    rc_c: Vec<f64>,
    rc_b: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Direction<const NX: usize, const NU: usize> {
    dx: Vec<SVector<f64, NX>>,
    du: Vec<SVector<f64, NU>>,
    de: Vec<Vec<f64>>,
    duals: Vec<StageDuals>,
}

struct Factor<const NX: usize, const NU: usize> {
    k: Vec<SMatrix<f64, NU, NX>>,
    qux: Vec<SMatrix<f64, NU, NX>>,
    quu_inv: Vec<SMatrix<f64, NU, NU>>,
    /// Reduced elastic Hessians per stage.
    hs: Vec<Vec<f64>>,
}

impl<const NX: usize, const NU: usize> OcpQp<NX, NU> {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    fn stage_rows(&self, k: usize) -> usize {
        if k < self.horizon() {
            self.stages[k].rows.len()
        } else {
            self.terminal.rows.len()
        }
    }

    fn stage_elastic(&self, k: usize) -> &[ElasticRow<NX>] {
        if k < self.horizon() {
            &self.stages[k].elastic
        } else {
            &self.terminal.elastic
        }
    }

    fn row(&self, k: usize, i: usize) -> (SVector<f64, NX>, SVector<f64, NU>, f64) {
        if k < self.horizon() {
            let r = &self.stages[k].rows[i];
            (r.gx, r.gu, r.rhs)
        } else {
            let (gx, rhs) = &self.terminal.rows[i];
            (*gx, SVector::zeros(), *rhs)
        }
    }

    fn row_count(&self) -> usize {
        (0..=self.horizon())
            .map(|k| self.stage_rows(k) + 2 * self.stage_elastic(k).len())
            .sum()
    }

    fn initial_iterate(&self) -> Iterate<NX, NU> {
        let n = self.horizon();
        let mut xs = Vec::with_capacity(n + 1);
        xs.push(self.x0);
        for st in &self.stages {
            let last = *xs.last().unwrap();
            xs.push(st.a * last + st.c);
        }
        let us = vec![SVector::zeros(); n];
        let mut es = Vec::with_capacity(n + 1);
        let mut duals = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let x = &xs[k];
            let u = if k < n { us[k] } else { SVector::zeros() };
            let mut d = StageDuals::default();
            for i in 0..self.stage_rows(k) {
                let (gx, gu, rhs) = self.row(k, i);
                let v = gx.dot(x) + gu.dot(&u);
                d.t.push((rhs - v).max(1.0));
                d.z.push(1.0);
            }
            let mut e = Vec::new();
            for row in self.stage_elastic(k) {
                let v = row.gx.dot(x) - row.rhs;
                let s = v.max(row.lower) + 1.0;
                e.push(s);
                d.tc.push((row.rhs - (row.gx.dot(x) - s)).max(1.0));
                d.zc.push(1.0);
                d.tb.push((s - row.lower).max(1.0));
                d.zb.push(1.0);
            }
            es.push(e);
            duals.push(d);
        }
        Iterate { xs, us, es, duals }
    }

    fn control(&self, it: &Iterate<NX, NU>, k: usize) -> SVector<f64, NU> {
        if k < self.horizon() {
            it.us[k]
        } else {
            SVector::zeros()
        }
    }

    fn primal_residuals(&self, it: &Iterate<NX, NU>) -> Vec<StageResiduals> {
        (0..=self.horizon())
            .map(|k| {
                let x = &it.xs[k];
                let u = self.control(it, k);
                let d = &it.duals[k];
                let mut r = StageResiduals::default();
                for i in 0..self.stage_rows(k) {
                    let (gx, gu, rhs) = self.row(k, i);
                    r.rho.push(gx.dot(x) + gu.dot(&u) + d.t[i] - rhs);
                }
                for (j, row) in self.stage_elastic(k).iter().enumerate() {
                    let s = it.es[k][j];
                    r.rho_c.push(row.gx.dot(x) - s + d.tc[j] - row.rhs);
                    r.rho_b.push(-s + d.tb[j] + row.lower);
                }
                r
            })
            .collect()
    }

    /// Stationarity of the Lagrangian with costates recovered by a backward
    /// pass; returns the infinity norm of the remaining control and elastic
    /// components together with those costates.
    fn dual_residual(&self, it: &Iterate<NX, NU>) -> (f64, Vec<SVector<f64, NX>>) {
        let n = self.horizon();
        let mut lam_next: SVector<f64, NX> = SVector::zeros();
        let mut costates = vec![SVector::zeros(); n];
        let mut worst: f64 = 0.0;
        for k in (0..=n).rev() {
            let x = &it.xs[k];
            let d = &it.duals[k];
            let mut gx_acc: SVector<f64, NX>;
            let mut gu_acc: SVector<f64, NU> = SVector::zeros();
            if k < n {
                let st = &self.stages[k];
                let u = &it.us[k];
                gx_acc = st.q * x + st.s.transpose() * u + st.qv;
                gu_acc = st.r * u + st.s * x + st.rv;
                for (i, row) in st.rows.iter().enumerate() {
                    gx_acc += row.gx * d.z[i];
                    gu_acc += row.gu * d.z[i];
                }
                gx_acc += st.a.transpose() * lam_next;
                gu_acc += st.b.transpose() * lam_next;
            } else {
                gx_acc = self.terminal.q * x + self.terminal.qv;
                for (i, (gx, _)) in self.terminal.rows.iter().enumerate() {
                    gx_acc += gx * d.z[i];
                }
            }
            for (j, row) in self.stage_elastic(k).iter().enumerate() {
                gx_acc += row.gx * d.zc[j];
                let gs = row.weight * it.es[k][j] + row.linear - d.zc[j] - d.zb[j];
                worst = worst.max(gs.abs());
            }
            if k < n {
                worst = worst.max(gu_acc.amax());
            }
            if k >= 1 {
                costates[k - 1] = gx_acc;
                lam_next = gx_acc;
            }
        }
        (worst, costates)
    }

    fn mu(&self, it: &Iterate<NX, NU>, m: usize) -> f64 {
        let mut acc = 0.0;
        for d in &it.duals {
            acc += d.t.iter().zip(&d.z).map(|(a, b)| a * b).sum::<f64>();
            acc += d.tc.iter().zip(&d.zc).map(|(a, b)| a * b).sum::<f64>();
            acc += d.tb.iter().zip(&d.zb).map(|(a, b)| a * b).sum::<f64>();
        }
        if m == 0 {
            0.0
        } else {
            acc / m as f64
        }
    }

    fn factorize(&self, it: &Iterate<NX, NU>) -> Option<Factor<NX, NU>> {
        let n = self.horizon();
        let mut hs = Vec::with_capacity(n + 1);
        let mut qt = Vec::with_capacity(n + 1);
        let mut st_mats = Vec::with_capacity(n);
        let mut rt = Vec::with_capacity(n);
        for k in 0..=n {
            let d = &it.duals[k];
            let mut q = if k < n { self.stages[k].q } else { self.terminal.q };
            let mut hk = Vec::new();
            if k < n {
                let st = &self.stages[k];
                let mut s = st.s;
                let mut r = st.r;
                for (i, row) in st.rows.iter().enumerate() {
                    let w = d.z[i] / d.t[i];
                    q += row.gx * row.gx.transpose() * w;
                    s += row.gu * row.gx.transpose() * w;
                    r += row.gu * row.gu.transpose() * w;
                }
                st_mats.push(s);
                rt.push(r);
            } else {
                for (i, (gx, _)) in self.terminal.rows.iter().enumerate() {
                    let w = d.z[i] / d.t[i];
                    q += gx * gx.transpose() * w;
                }
            }
            for (j, row) in self.stage_elastic(k).iter().enumerate() {
                let wc = d.zc[j] / d.tc[j];
                let wb = d.zb[j] / d.tb[j];
                let h = row.weight + wc + wb;
                q += row.gx * row.gx.transpose() * (wc * (1.0 - wc / h));
                hk.push(h);
            }
            hs.push(hk);
            qt.push(q);
        }

        let mut p = vec![SMatrix::<f64, NX, NX>::zeros(); n + 1];
        let mut kmat = vec![SMatrix::<f64, NU, NX>::zeros(); n];
        let mut qux_all = vec![SMatrix::<f64, NU, NX>::zeros(); n];
        let mut quu_inv = vec![SMatrix::<f64, NU, NU>::zeros(); n];
        p[n] = qt[n];
        for k in (0..n).rev() {
            let st = &self.stages[k];
            let pn = &p[k + 1];
            let bp = st.b.transpose() * pn;
            let mut quu = rt[k] + bp * st.b;
            quu = (quu + quu.transpose()) * 0.5;
            let qux = st_mats[k] + bp * st.a;
            let chol = match quu.cholesky() {
                Some(c) => c,
                None => {
                    let reg = quu + SMatrix::<f64, NU, NU>::identity() * 1e-8 * (1.0 + quu.amax());
                    reg.cholesky()?
                }
            };
            let inv = chol.inverse();
            let kk = -(inv * qux);
            let pk = qt[k] + st.a.transpose() * pn * st.a + qux.transpose() * kk;
            p[k] = (pk + pk.transpose()) * 0.5;
            kmat[k] = kk;
            qux_all[k] = qux;
            quu_inv[k] = inv;
        }
        Some(Factor { k: kmat, qux: qux_all, quu_inv, hs })
    }

    /// Solve one Newton system given primal residuals and complementarity terms.
    fn newton(
        &self,
        it: &Iterate<NX, NU>,
        f: &Factor<NX, NU>,
        res: &[StageResiduals],
        comp: &[StageComp],
    ) -> Direction<NX, NU> {
        let n = self.horizon();
        // Linear terms of the reduced LQ problem and elastic data for recovery.
        let mut qlin = Vec::with_capacity(n + 1);
        let mut rlin = Vec::with_capacity(n);
        let mut ls_all: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let x = &it.xs[k];
            let d = &it.duals[k];
            let (rs, cp) = (&res[k], &comp[k]);
            let mut ql;
            if k < n {
                let st = &self.stages[k];
                let u = &it.us[k];
                ql = st.q * x + st.s.transpose() * u + st.qv;
                let mut rl = st.r * u + st.s * x + st.rv;
                for (i, row) in st.rows.iter().enumerate() {
                    let w = d.z[i] / d.t[i];
                    let phi = d.z[i] + w * rs.rho[i] - cp.rc[i] / d.t[i];
                    ql += row.gx * phi;
                    rl += row.gu * phi;
                }
                rlin.push(rl);
            } else {
                ql = self.terminal.q * x + self.terminal.qv;
                for (i, (gx, _)) in self.terminal.rows.iter().enumerate() {
                    let w = d.z[i] / d.t[i];
                    let phi = d.z[i] + w * rs.rho[i] - cp.rc[i] / d.t[i];
                    ql += gx * phi;
                }
            }
            let mut ls = Vec::new();
            for (j, row) in self.stage_elastic(k).iter().enumerate() {
                let wc = d.zc[j] / d.tc[j];
                let wb = d.zb[j] / d.tb[j];
                let phic = d.zc[j] + wc * rs.rho_c[j] - cp.rc_c[j] / d.tc[j];
                let phib = d.zb[j] + wb * rs.rho_b[j] - cp.rc_b[j] / d.tb[j];
                let l = row.weight * it.es[k][j] + row.linear - phic - phib;
                ql += row.gx * (phic + wc * l / f.hs[k][j]);
                ls.push(l);
            }
            ls_all.push(ls);
            qlin.push(ql);
        }

        let mut pv = vec![SVector::<f64, NX>::zeros(); n + 1];
        let mut kff = vec![SVector::<f64, NU>::zeros(); n];
        pv[n] = qlin[n];
        for k in (0..n).rev() {
            let st = &self.stages[k];
            let qu = rlin[k] + st.b.transpose() * pv[k + 1];
            let kf = -(f.quu_inv[k] * qu);
            pv[k] = qlin[k] + st.a.transpose() * pv[k + 1] + f.qux[k].transpose() * kf;
            kff[k] = kf;
        }

        let mut dx = vec![SVector::<f64, NX>::zeros(); n + 1];
        let mut du = vec![SVector::<f64, NU>::zeros(); n];
        for k in 0..n {
            let st = &self.stages[k];
            du[k] = f.k[k] * dx[k] + kff[k];
            dx[k + 1] = st.a * dx[k] + st.b * du[k];
        }

        let mut de = Vec::with_capacity(n + 1);
        let mut duals = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let d = &it.duals[k];
            let (rs, cp) = (&res[k], &comp[k]);
            let dxk = &dx[k];
            let duk = if k < n { du[k] } else { SVector::zeros() };
            let mut dd = StageDuals::default();
            for i in 0..self.stage_rows(k) {
                let (gx, gu, _) = self.row(k, i);
                let gdy = gx.dot(dxk) + gu.dot(&duk);
                let w = d.z[i] / d.t[i];
                dd.z.push(w * (gdy + rs.rho[i]) - cp.rc[i] / d.t[i]);
                dd.t.push(-rs.rho[i] - gdy);
            }
            let mut dek = Vec::new();
            for (j, row) in self.stage_elastic(k).iter().enumerate() {
                let wc = d.zc[j] / d.tc[j];
                let wb = d.zb[j] / d.tb[j];
                let gdx = row.gx.dot(dxk);
                let ds = -(ls_all[k][j] - wc * gdx) / f.hs[k][j];
                dek.push(ds);
                let gc = gdx - ds;
                dd.zc.push(wc * (gc + rs.rho_c[j]) - cp.rc_c[j] / d.tc[j]);
                dd.tc.push(-rs.rho_c[j] - gc);
                let gb = -ds;
                dd.zb.push(wb * (gb + rs.rho_b[j]) - cp.rc_b[j] / d.tb[j]);
                dd.tb.push(-rs.rho_b[j] - gb);
            }
            de.push(dek);
            duals.push(dd);
        }
        Direction { dx, du, de, duals }
    }

    fn max_step(it: &Iterate<NX, NU>, dir: &Direction<NX, NU>) -> f64 {
        let mut alpha: f64 = 1.0;
        let mut check = |v: &[f64], dv: &[f64]| {
            for (a, b) in v.iter().zip(dv) {
                if *b < 0.0 {
                    alpha = alpha.min(-a / b);
                }
            }
        };
        for (d, dd) in it.duals.iter().zip(&dir.duals) {
            check(&d.t, &dd.t);
            check(&d.z, &dd.z);
            check(&d.tc, &dd.tc);
            check(&d.zc, &dd.zc);
            check(&d.tb, &dd.tb);
            check(&d.zb, &dd.zb);
        }
        alpha
    }

    fn step_mu(it: &Iterate<NX, NU>, dir: &Direction<NX, NU>, alpha: f64, m: usize) -> f64 {
        let mut acc = 0.0;
        let pair = |t: &[f64], z: &[f64], dt: &[f64], dz: &[f64]| -> f64 {
            (0..t.len()).map(|i| (t[i] + alpha * dt[i]) * (z[i] + alpha * dz[i])).sum()
        };
        for (d, dd) in it.duals.iter().zip(&dir.duals) {
            acc += pair(&d.t, &d.z, &dd.t, &dd.z);
            acc += pair(&d.tc, &d.zc, &dd.tc, &dd.zc);
            acc += pair(&d.tb, &d.zb, &dd.tb, &dd.zb);
        }
        if m == 0 {
            0.0
        } else {
            acc / m as f64
        }
    }

    fn apply(it: &mut Iterate<NX, NU>, dir: &Direction<NX, NU>, alpha: f64) {
        for (x, dx) in it.xs.iter_mut().zip(&dir.dx) {
            *x += dx * alpha;
        }
        for (u, du) in it.us.iter_mut().zip(&dir.du) {
            *u += du * alpha;
        }
        for (e, de) in it.es.iter_mut().zip(&dir.de) {
            for (a, b) in e.iter_mut().zip(de) {
                *a += alpha * b;
            }
        }
        let upd = |v: &mut Vec<f64>, dv: &Vec<f64>| {
            for (a, b) in v.iter_mut().zip(dv) {
                *a += alpha * b;
            }
        };
        for (d, dd) in it.duals.iter_mut().zip(&dir.duals) {
            upd(&mut d.t, &dd.t);
            upd(&mut d.z, &dd.z);
            upd(&mut d.tc, &dd.tc);
            upd(&mut d.zc, &dd.zc);
            upd(&mut d.tb, &dd.tb);
            upd(&mut d.zb, &dd.zb);
        }
    }

    fn scale(&self) -> f64 {
        let mut s: f64 = 1.0;
        for st in &self.stages {
            s = s.max(st.qv.amax()).max(st.rv.amax());
            for e in &st.elastic {
                s = s.max(e.linear.abs());
            }
        }
        s.max(self.terminal.qv.amax())
    }

    /// Run the interior-point iteration to convergence.
    pub fn solve(&self, opts: &QpOptions) -> QpSolution<NX, NU> {
        let m = self.row_count();
        let mut it = self.initial_iterate();
        let scale = self.scale();
        let mut status = QpStatus::MaxIter;
        let mut iterations = 0;
        let (mut p_inf, mut d_inf);
        loop {
            let res = self.primal_residuals(&it);
            p_inf = res
                .iter()
                .flat_map(|r| r.rho.iter().chain(&r.rho_c).chain(&r.rho_b))
                .fold(0.0f64, |a, b| a.max(b.abs()));
            d_inf = self.dual_residual(&it).0;
            let mu = self.mu(&it, m);
            if p_inf <= opts.tol * 10.0 && d_inf <= opts.tol * scale && mu <= opts.tol {
                status = QpStatus::Solved;
                break;
            }
            if iterations >= opts.max_iter {
                break;
            }
            iterations += 1;

            let Some(fac) = self.factorize(&it) else {
                status = QpStatus::Failed;
                break;
            };

            // Predictor.
            let comp_aff: Vec<StageComp> = it
                .duals
                .iter()
                .map(|d| StageComp {
                    rc: d.t.iter().zip(&d.z).map(|(a, b)| a * b).collect(),
                    rc_c: d.tc.iter().zip(&d.zc).map(|(a, b)| a * b).collect(),
                    rc_b: d.tb.iter().zip(&d.zb).map(|(a, b)| a * b).collect(),
                })
                .collect();
            let aff = self.newton(&it, &fac, &res, &comp_aff);
            let a_aff = Self::max_step(&it, &aff);
            let mu_aff = Self::step_mu(&it, &aff, a_aff, m);
            let sigma = if mu > 0.0 { (mu_aff / mu).powi(3).clamp(0.0, 1.0) } else { 0.0 };

            // Corrector.
            let target = sigma * mu;
            let comp: Vec<StageComp> = it
                .duals
                .iter()
                .zip(&aff.duals)
                .map(|(d, a)| {
                    let f = |t: &[f64], z: &[f64], dt: &[f64], dz: &[f64]| -> Vec<f64> {
                        (0..t.len()).map(|i| t[i] * z[i] + dt[i] * dz[i] - target).collect()
                    };
                    StageComp {
                        rc: f(&d.t, &d.z, &a.t, &a.z),
                        rc_c: f(&d.tc, &d.zc, &a.tc, &a.zc),
                        rc_b: f(&d.tb, &d.zb, &a.tb, &a.zb),
                    }
                })
                .collect();
            let dir = self.newton(&it, &fac, &res, &comp);
            let alpha = (opts.step_fraction * Self::max_step(&it, &dir)).min(1.0);
            if !alpha.is_finite() || alpha <= 0.0 {
                status = QpStatus::Failed;
                break;
            }
            Self::apply(&mut it, &dir, alpha);
        }

        let (_, costates) = self.dual_residual(&it);
        let n = self.horizon();
        QpSolution {
            row_duals: (0..=n).map(|k| it.duals[k].z.clone()).collect(),
            elastic_duals: (0..=n)
                .map(|k| {
                    let d = &it.duals[k];
                    d.zc.iter().copied().zip(d.zb.iter().copied()).collect()
                })
                .collect(),
            xs: it.xs,
            us: it.us,
            elastic: it.es,
            costates,
            iterations,
            status,
            primal_residual: p_inf,
            dual_residual: d_inf,
        }
    }
}
