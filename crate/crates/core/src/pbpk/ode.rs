//! Well-stirred compartment dynamics and a fixed-step RK4 integrator.

use super::{DataError, DrugDescriptor, OrganGraph, OrganRole};

/// Directed transfer of `coef · C[from]` (mg/h/kg) from one compartment to
/// another.
#[derive(Clone, Debug, PartialEq)]
pub struct Transfer {
    pub from: usize,
    pub to: usize,
    pub coef: f64,
}

/// A linear network of well-stirred compartments.
///
/// `V_i·dC_i/dt = Σ_in coef·C_from − Σ_out coef·C_i − elim_i·C_i`. Every
/// transfer removes exactly what it adds, so without elimination the total
/// amount `Σ V_i·C_i` is invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct CompartmentSystem {
    pub volumes: Vec<f64>,
    pub transfers: Vec<Transfer>,
    /// First-order elimination coefficient per compartment, L/h/kg.
    pub elimination: Vec<f64>,
}

impl CompartmentSystem {
    /// Compiles the PBPK flow model for one drug.
    ///
    /// Tissues take up `Q_i·C_art` (doubled for transporter substrates in
    /// organs flagged for active uptake) and release `Q_i·C_i/Kp_i`; venous
    /// blood passes through the lung into arterial blood. Elimination in
    /// organ `i` is `share_i·CL·fu·C_i/Kp_i`.
    pub fn pbpk(drug: &DrugDescriptor, graph: &OrganGraph) -> Self {
        let organs = graph.organs();
        let q_total = graph.cardiac_output();
        let (art, ven, lung) = (graph.arterial(), graph.venous(), graph.lung());
        let kp: Vec<f64> = organs.iter().map(|o| drug.kp(o)).collect();

        let mut transfers = vec![
            Transfer {
                from: ven,
                to: lung,
                coef: q_total,
            },
            Transfer {
                from: lung,
                to: art,
                coef: q_total / kp[lung],
            },
        ];
        let mut elimination = vec![0.0; organs.len()];
        for i in graph.tissues() {
            let o = &organs[i];
            let uptake = if drug.transporter && o.transporter_uptake { 2.0 } else { 1.0 };
            transfers.push(Transfer {
                from: art,
                to: i,
                coef: uptake * o.q,
            });
            transfers.push(Transfer {
                from: i,
                to: ven,
                coef: o.q / kp[i],
            });
            elimination[i] = o.elimination_share * drug.cl * drug.fu / kp[i];
        }
        debug_assert!(organs
            .iter()
            .all(|o| o.role == OrganRole::Tissue || o.elimination_share == 0.0));
        Self {
            volumes: organs.iter().map(|o| o.v).collect(),
            transfers,
            elimination,
        }
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn without_elimination(mut self) -> Self {
        self.elimination.iter_mut().for_each(|e| *e = 0.0);
        self
    }

    /// Writes `dC/dt` for `state` into `out`.
    pub fn rhs(&self, state: &[f64], out: &mut [f64]) {
        // amounts per hour first, then divide by volume
        for (o, (c, e)) in out.iter_mut().zip(state.iter().zip(&self.elimination)) {
            *o = -e * c;
        }
        for t in &self.transfers {
            let flux = t.coef * state[t.from];
            out[t.from] -= flux;
            out[t.to] += flux;
        }
        for (o, v) in out.iter_mut().zip(&self.volumes) {
            *o /= v;
        }
    }

    /// Total drug amount `Σ V_i·C_i`, mg/kg.
    pub fn amount(&self, state: &[f64]) -> f64 {
        state.iter().zip(&self.volumes).map(|(c, v)| c * v).sum()
    }
}

/// `d(concentration)/dt` for every organ of `graph`.
pub fn ode_rhs(state: &[f64], drug: &DrugDescriptor, graph: &OrganGraph) -> Result<Vec<f64>, DataError> {
    if state.len() != graph.len() {
        return Err(DataError::StateLength {
            expected: graph.len(),
            got: state.len(),
        });
    }
    let sys = CompartmentSystem::pbpk(drug, graph);
    let mut out = vec![0.0; state.len()];
    sys.rhs(state, &mut out);
    Ok(out)
}

/// Classic fourth-order Runge–Kutta for autonomous systems.
///
/// Integrates from `y0` with step `dt`, recording the state after every
/// `steps_per_sample` steps. The first sample is `y0` itself; `n_samples`
/// rows are returned.
pub fn rk4<F>(f: F, y0: &[f64], dt: f64, steps_per_sample: usize, n_samples: usize) -> Result<Vec<Vec<f64>>, DataError>
where
    F: Fn(&[f64], &mut [f64]),
{
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DataError::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    if steps_per_sample == 0 {
        return Err(DataError::InvalidConfig("steps_per_sample must be ≥ 1".into()));
    }
    let n = y0.len();
    let mut y = y0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut out = Vec::with_capacity(n_samples);
    if n_samples == 0 {
        return Ok(out);
    }
    out.push(y.clone());
    let mut step = 0usize;
    while out.len() < n_samples {
        for _ in 0..steps_per_sample {
            f(&y, &mut k1);
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * dt * k1[i];
            }
            f(&tmp, &mut k2);
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * dt * k2[i];
            }
            f(&tmp, &mut k3);
            for i in 0..n {
                tmp[i] = y[i] + dt * k3[i];
            }
            f(&tmp, &mut k4);
            for i in 0..n {
                y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            step += 1;
            if y.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFiniteState { step });
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

/// Simulates an IV bolus of `dose` mg/kg into venous blood and samples the
/// organ concentrations every `grid_dt` hours, `n_samples` times starting at
/// t = 0. The internal step is the largest `grid_dt / k` not above `dt`.
/// Roundoff negatives in the samples are clamped to zero.
pub fn rk4_integrate(
    system: &CompartmentSystem,
    venous: usize,
    dose: f64,
    grid_dt: f64,
    n_samples: usize,
    dt: f64,
) -> Result<Vec<Vec<f64>>, DataError> {
    if !(dose >= 0.0) {
        return Err(DataError::InvalidConfig(format!("dose must be ≥ 0, got {dose}")));
    }
    if !(dt > 0.0 && grid_dt > 0.0) {
        return Err(DataError::InvalidConfig(format!(
            "step sizes must be positive (dt {dt}, grid {grid_dt})"
        )));
    }
    let steps = steps_per_interval(grid_dt, dt);
    let mut y0 = vec![0.0; system.len()];
    y0[venous] = dose / system.volumes[venous];
    let mut traj = rk4(|y, dy| system.rhs(y, dy), &y0, grid_dt / steps as f64, steps, n_samples)?;
    for row in &mut traj {
        row.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Ok(traj)
}

/// Smallest integer `k` with `grid_dt / k ≤ dt`.
pub fn steps_per_interval(grid_dt: f64, dt: f64) -> usize {
    ((grid_dt / dt) - 1e-9).ceil().max(1.0) as usize
}
