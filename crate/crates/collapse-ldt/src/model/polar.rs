//! Polar AC power-flow model assembled from a [`NetworkDescription`].
//!
//! State ordering: angles at all non-slack buses (bus order), then voltage
//! magnitudes at PQ buses (bus order). Residual ordering: active-power
//! mismatch at non-slack buses, then reactive-power mismatch at PQ buses.
//! Each residual is `spec − calc`, with uncertain injections entering the
//! specification as `−λ` (loads consume).

use nalgebra::{DMatrix, DVector};

use super::network::{BusType, InjectionKind, NetworkDescription, NetworkError};
use super::{HessianKind, PowerFlowModel};

#[derive(Debug, Clone)]
pub struct PolarAcModel {
    net: NetworkDescription,
    g: DMatrix<f64>,
    b: DMatrix<f64>,
    /// Buses with an angle state / P residual.
    ang_buses: Vec<usize>,
    /// Buses with a magnitude state / Q residual.
    vm_buses: Vec<usize>,
    /// state index of θ_b, or usize::MAX when fixed
    theta_idx: Vec<usize>,
    /// state index of V_b, or usize::MAX when fixed
    vm_idx: Vec<usize>,
}

const FIXED: usize = usize::MAX;

pub fn build_polar_ac(net: &NetworkDescription) -> Result<PolarAcModel, NetworkError> {
    net.validate()?;
    let nb = net.bus_count();
    let mut g = DMatrix::zeros(nb, nb);
    let mut b = DMatrix::zeros(nb, nb);
    for i in 0..nb {
        for j in 0..nb {
            let y = net.admittance(i, j);
            g[(i, j)] = y.re;
            b[(i, j)] = y.im;
        }
    }
    let ang_buses: Vec<usize> = (0..nb)
        .filter(|&i| net.buses[i].bus_type != BusType::Slack)
        .collect();
    let vm_buses: Vec<usize> = (0..nb)
        .filter(|&i| net.buses[i].bus_type == BusType::Pq)
        .collect();
    let mut theta_idx = vec![FIXED; nb];
    let mut vm_idx = vec![FIXED; nb];
    for (k, &bus) in ang_buses.iter().enumerate() {
        theta_idx[bus] = k;
    }
    for (k, &bus) in vm_buses.iter().enumerate() {
        vm_idx[bus] = ang_buses.len() + k;
    }
    Ok(PolarAcModel {
        net: net.clone(),
        g,
        b,
        ang_buses,
        vm_buses,
        theta_idx,
        vm_idx,
    })
}

impl PolarAcModel {
    pub fn network(&self) -> &NetworkDescription {
        &self.net
    }

    /// Flat start: setpoint magnitudes, zero angles.
    pub fn flat_start(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.state_dim());
        for (k, &bus) in self.vm_buses.iter().enumerate() {
            x[self.ang_buses.len() + k] = self.net.buses[bus].vset;
        }
        x
    }

    fn unpack(&self, x: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let nb = self.net.bus_count();
        let mut vm = vec![0.0; nb];
        let mut th = vec![0.0; nb];
        for bus in 0..nb {
            vm[bus] = if self.vm_idx[bus] == FIXED {
                self.net.buses[bus].vset
            } else {
                x[self.vm_idx[bus]]
            };
            th[bus] = if self.theta_idx[bus] == FIXED {
                0.0
            } else {
                x[self.theta_idx[bus]]
            };
        }
        (vm, th)
    }

    fn calc_pq(&self, vm: &[f64], th: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nb = self.net.bus_count();
        let mut p = vec![0.0; nb];
        let mut q = vec![0.0; nb];
        for i in 0..nb {
            for j in 0..nb {
                let (gij, bij) = (self.g[(i, j)], self.b[(i, j)]);
                if gij == 0.0 && bij == 0.0 {
                    continue;
                }
                let (s, c) = (th[i] - th[j]).sin_cos();
                p[i] += vm[i] * vm[j] * (gij * c + bij * s);
                q[i] += vm[i] * vm[j] * (gij * s - bij * c);
            }
        }
        (p, q)
    }

    /// Specified injections at (λ-mapped slots get `nominal − λ`).
    fn spec_injections(&self, lam: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let mut sp = self.net.nominal_injections.p.clone();
        let mut sq = self.net.nominal_injections.q.clone();
        for (k, slot) in self.net.lambda_map.iter().enumerate() {
            match slot.kind {
                InjectionKind::P => sp[slot.bus] -= lam[k],
                InjectionKind::Q => sq[slot.bus] -= lam[k],
            }
        }
        (sp, sq)
    }
}

impl PowerFlowModel for PolarAcModel {
    fn state_dim(&self) -> usize {
        self.ang_buses.len() + self.vm_buses.len()
    }

    fn param_dim(&self) -> usize {
        self.net.lambda_map.len()
    }

    fn initial_state(&self) -> DVector<f64> {
        self.flat_start()
    }

    fn eval_f(&self, x: &DVector<f64>, lam: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.state_dim(), "polar state length");
        assert_eq!(lam.len(), self.param_dim(), "polar parameter length");
        let (vm, th) = self.unpack(x);
        let (p, q) = self.calc_pq(&vm, &th);
        let (sp, sq) = self.spec_injections(lam);
        let mut f = DVector::zeros(self.state_dim());
        let np = self.ang_buses.len();
        for (r, &bus) in self.ang_buses.iter().enumerate() {
            f[r] = sp[bus] - p[bus];
        }
        for (r, &bus) in self.vm_buses.iter().enumerate() {
            f[np + r] = sq[bus] - q[bus];
        }
        f
    }

    fn eval_fx(&self, x: &DVector<f64>, _lam: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(x.len(), self.state_dim(), "polar state length");
        let (vm, th) = self.unpack(x);
        let (p, q) = self.calc_pq(&vm, &th);
        let n = self.state_dim();
        let nb = self.net.bus_count();
        let mut jac = DMatrix::zeros(n, n);
        let np = self.ang_buses.len();

        // Row r: −∂P_i/∂x (P rows), −∂Q_i/∂x (Q rows).
        for (r, &i) in self.ang_buses.iter().enumerate() {
            for j in 0..nb {
                let (gij, bij) = (self.g[(i, j)], self.b[(i, j)]);
                if (gij == 0.0 && bij == 0.0) || j == i {
                    continue;
                }
                let (s, c) = (th[i] - th[j]).sin_cos();
                if self.theta_idx[j] != FIXED {
                    jac[(r, self.theta_idx[j])] -= vm[i] * vm[j] * (gij * s - bij * c);
                }
                if self.vm_idx[j] != FIXED {
                    jac[(r, self.vm_idx[j])] -= vm[i] * (gij * c + bij * s);
                }
            }
            if self.theta_idx[i] != FIXED {
                jac[(r, self.theta_idx[i])] -= -q[i] - self.b[(i, i)] * vm[i] * vm[i];
            }
            if self.vm_idx[i] != FIXED {
                jac[(r, self.vm_idx[i])] -= p[i] / vm[i] + self.g[(i, i)] * vm[i];
            }
        }
        for (r0, &i) in self.vm_buses.iter().enumerate() {
            let r = np + r0;
            for j in 0..nb {
                let (gij, bij) = (self.g[(i, j)], self.b[(i, j)]);
                if (gij == 0.0 && bij == 0.0) || j == i {
                    continue;
                }
                let (s, c) = (th[i] - th[j]).sin_cos();
                if self.theta_idx[j] != FIXED {
                    jac[(r, self.theta_idx[j])] -= -vm[i] * vm[j] * (gij * c + bij * s);
                }
                if self.vm_idx[j] != FIXED {
                    jac[(r, self.vm_idx[j])] -= vm[i] * (gij * s - bij * c);
                }
            }
            if self.theta_idx[i] != FIXED {
                jac[(r, self.theta_idx[i])] -= p[i] - self.g[(i, i)] * vm[i] * vm[i];
            }
            if self.vm_idx[i] != FIXED {
                jac[(r, self.vm_idx[i])] -= q[i] / vm[i] - self.b[(i, i)] * vm[i];
            }
        }
        jac
    }

    fn eval_flambda(&self, _x: &DVector<f64>, _lam: &DVector<f64>) -> DMatrix<f64> {
        let n = self.state_dim();
        let np = self.ang_buses.len();
        let mut fl = DMatrix::zeros(n, self.param_dim());
        for (k, slot) in self.net.lambda_map.iter().enumerate() {
            let row = match slot.kind {
                InjectionKind::P => self.ang_buses.iter().position(|&b| b == slot.bus).unwrap(),
                InjectionKind::Q => np + self.vm_buses.iter().position(|&b| b == slot.bus).unwrap(),
            };
            fl[(row, k)] = -1.0;
        }
        fl
    }

    fn fxx_action(
        &self,
        x: &DVector<f64>,
        _lam: &DVector<f64>,
        dir: &DVector<f64>,
    ) -> DMatrix<f64> {
        assert_eq!(x.len(), self.state_dim(), "polar state length");
        assert_eq!(dir.len(), self.state_dim(), "polar direction length");
        let (vm, th) = self.unpack(x);
        let n = self.state_dim();
        let nb = self.net.bus_count();
        let np = self.ang_buses.len();
        let mut out = DMatrix::zeros(n, n);

        // Per-pair terms: P_i += V_i V_j a1, Q_i += V_i V_j a2 with
        // a1 = G c + B s, a2 = G s − B c, θ = θ_i − θ_j. The local Hessian of
        // each term is accumulated against the direction; residual rows are
        // spec − calc, hence the negation.
        let dir_at = |idx: usize| if idx == FIXED { 0.0 } else { dir[idx] };
        let mut add = |row: usize, col: usize, val: f64| {
            if col != FIXED {
                out[(row, col)] -= val;
            }
        };

        for (r, &i) in self.ang_buses.iter().enumerate() {
            // P row of bus i
            let (ti, vi) = (self.theta_idx[i], self.vm_idx[i]);
            for j in 0..nb {
                let (gij, bij) = (self.g[(i, j)], self.b[(i, j)]);
                if gij == 0.0 && bij == 0.0 {
                    continue;
                }
                if j == i {
                    // G_ii V_i^2 term: d2/dV^2 = 2 G_ii
                    if vi != FIXED {
                        add(r, vi, 2.0 * gij * dir_at(vi));
                    }
                    continue;
                }
                let (tj, vj) = (self.theta_idx[j], self.vm_idx[j]);
                let (s, c) = (th[i] - th[j]).sin_cos();
                let a1 = gij * c + bij * s;
                let a2 = gij * s - bij * c;
                let (dti, dtj, dvi, dvj) = (dir_at(ti), dir_at(tj), dir_at(vi), dir_at(vj));
                // Hessian of V_i V_j a1 against direction:
                let hv_ti = -vm[i] * vm[j] * a1 * (dti - dtj) - vm[j] * a2 * dvi - vm[i] * a2 * dvj;
                let hv_tj = vm[i] * vm[j] * a1 * (dti - dtj) + vm[j] * a2 * dvi + vm[i] * a2 * dvj;
                let hv_vi = a1 * dvj - vm[j] * a2 * (dti - dtj);
                let hv_vj = a1 * dvi - vm[i] * a2 * (dti - dtj);
                add(r, ti, hv_ti);
                add(r, tj, hv_tj);
                add(r, vi, hv_vi);
                add(r, vj, hv_vj);
            }
        }
        for (r0, &i) in self.vm_buses.iter().enumerate() {
            // Q row of bus i
            let r = np + r0;
            let (ti, vi) = (self.theta_idx[i], self.vm_idx[i]);
            for j in 0..nb {
                let (gij, bij) = (self.g[(i, j)], self.b[(i, j)]);
                if gij == 0.0 && bij == 0.0 {
                    continue;
                }
                if j == i {
                    // −B_ii V_i^2 term: d2/dV^2 = −2 B_ii
                    if vi != FIXED {
                        add(r, vi, -2.0 * bij * dir_at(vi));
                    }
                    continue;
                }
                let (tj, vj) = (self.theta_idx[j], self.vm_idx[j]);
                let (s, c) = (th[i] - th[j]).sin_cos();
                let a1 = gij * c + bij * s;
                let a2 = gij * s - bij * c;
                let (dti, dtj, dvi, dvj) = (dir_at(ti), dir_at(tj), dir_at(vi), dir_at(vj));
                // Hessian of V_i V_j a2 against direction:
                let hv_ti = -vm[i] * vm[j] * a2 * (dti - dtj) + vm[j] * a1 * dvi + vm[i] * a1 * dvj;
                let hv_tj = vm[i] * vm[j] * a2 * (dti - dtj) - vm[j] * a1 * dvi - vm[i] * a1 * dvj;
                let hv_vi = a2 * dvj + vm[j] * a1 * (dti - dtj);
                let hv_vj = a2 * dvi + vm[i] * a1 * (dti - dtj);
                add(r, ti, hv_ti);
                add(r, tj, hv_tj);
                add(r, vi, hv_vi);
                add(r, vj, hv_vj);
            }
        }
        out
    }

    fn hessian_kind(&self) -> HessianKind {
        HessianKind::Analytic
    }

    fn state_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .ang_buses
            .iter()
            .map(|b| format!("theta_{}", b + 1))
            .collect();
        names.extend(self.vm_buses.iter().map(|b| format!("V_{}", b + 1)));
        names
    }

    fn param_names(&self) -> Vec<String> {
        self.net
            .lambda_map
            .iter()
            .map(|slot| {
                let kind = match slot.kind {
                    InjectionKind::P => "P",
                    InjectionKind::Q => "Q",
                };
                format!("{}{}", kind, slot.bus + 1)
            })
            .collect()
    }
}
