use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Organ, OrganGraph};

pub const MW_RANGE: (f64, f64) = (150.0, 800.0);
pub const LOGP_RANGE: (f64, f64) = (-1.0, 5.0);
pub const FU_RANGE: (f64, f64) = (0.01, 0.95);
pub const CL_RANGE: (f64, f64) = (0.1, 10.0);
pub const VD_RANGE: (f64, f64) = (5.0, 20.0);
pub const TRANSPORTER_PROBABILITY: f64 = 0.3;

/// Number of descriptor features fed to the models.
pub const DESCRIPTOR_LEN: usize = 6;

const KP_RANGE: (f64, f64) = (0.05, 200.0);

/// Molecular and pharmacokinetic descriptors of one compound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrugDescriptor {
    /// Molecular weight, Da.
    pub mw: f64,
    pub logp: f64,
    /// Unbound plasma fraction.
    pub fu: f64,
    /// Clearance, L/h/kg.
    pub cl: f64,
    /// Volume of distribution, L/kg.
    pub vd: f64,
    pub transporter: bool,
}

impl DrugDescriptor {
    /// Draws every field uniformly over its range.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            mw: rng.gen_range(MW_RANGE.0..=MW_RANGE.1),
            logp: rng.gen_range(LOGP_RANGE.0..=LOGP_RANGE.1),
            fu: rng.gen_range(FU_RANGE.0..=FU_RANGE.1),
            cl: rng.gen_range(CL_RANGE.0..=CL_RANGE.1),
            vd: rng.gen_range(VD_RANGE.0..=VD_RANGE.1),
            transporter: rng.gen_bool(TRANSPORTER_PROBABILITY),
        }
    }

    pub fn in_range(&self) -> bool {
        let within = |x: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&x);
        within(self.mw, MW_RANGE)
            && within(self.logp, LOGP_RANGE)
            && within(self.fu, FU_RANGE)
            && within(self.cl, CL_RANGE)
            && within(self.vd, VD_RANGE)
    }

    pub fn features(&self) -> [f64; DESCRIPTOR_LEN] {
        [
            self.mw,
            self.logp,
            self.fu,
            self.cl,
            self.vd,
            if self.transporter { 1.0 } else { 0.0 },
        ]
    }

    /// Tissue:blood partition coefficient for one organ.
    pub fn kp(&self, organ: &Organ) -> f64 {
        let logp = self.logp.clamp(LOGP_RANGE.0, LOGP_RANGE.1);
        (1.0 + organ.lipid_fraction * 10f64.powf(logp) * self.fu).clamp(KP_RANGE.0, KP_RANGE.1)
    }
}

/// Partition coefficient of `drug` in the organ called `organ`.
pub fn partition_coefficient(drug: &DrugDescriptor, graph: &OrganGraph, organ: &str) -> Result<f64, DataError> {
    let idx = graph
        .index_of(organ)
        .ok_or_else(|| DataError::UnknownOrgan(organ.to_string()))?;
    Ok(drug.kp(&graph.organs()[idx]))
}
