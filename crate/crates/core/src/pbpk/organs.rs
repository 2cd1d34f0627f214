//! Organ table and circulatory topology.

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrganRole {
    ArterialBlood,
    VenousBlood,
    Lung,
    Tissue,
}

/// One well-stirred compartment. Flows in L/h/kg, volumes in L/kg.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Organ {
    pub name: String,
    pub role: OrganRole,
    pub q: f64,
    pub v: f64,
    pub lipid_fraction: f64,
    /// Share of total clearance eliminated here (liver 0.7, kidney 0.3).
    #[serde(default)]
    pub elimination_share: f64,
    /// Whether active transport boosts arterial uptake into this organ.
    #[serde(default)]
    pub transporter_uptake: bool,
}

/// Organs plus directed edges of blood flow.
///
/// Tissues are fed from arterial blood and drain into venous blood; the lung
/// sits between venous and arterial blood.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganGraph {
    organs: Vec<Organ>,
    edges: Vec<(usize, usize)>,
    cardiac_output: f64,
    arterial: usize,
    venous: usize,
    lung: usize,
}

/// Fraction of cardiac output, volume (L/kg), tissue lipid fraction.
const DEFAULT_TISSUES: [(&str, f64, f64, f64); 7] = [
    ("heart", 0.05, 0.0047, 0.014),
    ("liver", 0.25, 0.0257, 0.035),
    ("gut", 0.17, 0.0171, 0.041),
    ("kidney", 0.19, 0.0044, 0.021),
    ("muscle", 0.17, 0.4000, 0.010),
    ("adipose", 0.05, 0.2142, 0.790),
    ("brain", 0.12, 0.0200, 0.105),
];

/// Cardiac output, L/h/kg.
pub const DEFAULT_CARDIAC_OUTPUT: f64 = 4.8;

impl Default for OrganGraph {
    fn default() -> Self {
        let co = DEFAULT_CARDIAC_OUTPUT;
        let blood = |name: &str, role, v| Organ {
            name: name.to_string(),
            role,
            q: co,
            v,
            lipid_fraction: 0.0045,
            elimination_share: 0.0,
            transporter_uptake: false,
        };
        let mut organs = vec![
            blood("arterial_blood", OrganRole::ArterialBlood, 0.0257),
            blood("venous_blood", OrganRole::VenousBlood, 0.0514),
            Organ {
                name: "lung".into(),
                role: OrganRole::Lung,
                q: co,
                v: 0.0076,
                lipid_fraction: 0.030,
                elimination_share: 0.0,
                transporter_uptake: false,
            },
        ];
        for (name, frac, v, lipid) in DEFAULT_TISSUES {
            organs.push(Organ {
                name: name.into(),
                role: OrganRole::Tissue,
                q: frac * co,
                v,
                lipid_fraction: lipid,
                elimination_share: match name {
                    "liver" => 0.7,
                    "kidney" => 0.3,
                    _ => 0.0,
                },
                transporter_uptake: name == "liver",
            });
        }
        Self::new(organs).expect("built-in organ table is valid")
    }
}

impl OrganGraph {
    /// Builds the topology from organ roles and validates the table.
    pub fn new(organs: Vec<Organ>) -> Result<Self, DataError> {
        let find = |role: OrganRole| -> Result<usize, DataError> {
            let hits: Vec<usize> = organs
                .iter()
                .enumerate()
                .filter(|(_, o)| o.role == role)
                .map(|(i, _)| i)
                .collect();
            match hits.as_slice() {
                [i] => Ok(*i),
                _ => Err(DataError::InvalidGraph(format!(
                    "expected exactly one {role:?} compartment, found {}",
                    hits.len()
                ))),
            }
        };
        let arterial = find(OrganRole::ArterialBlood)?;
        let venous = find(OrganRole::VenousBlood)?;
        let lung = find(OrganRole::Lung)?;

        for o in &organs {
            if !(o.q > 0.0 && o.v > 0.0 && o.lipid_fraction > 0.0) {
                return Err(DataError::InvalidGraph(format!(
                    "organ {} needs positive q, v and lipid_fraction",
                    o.name
                )));
            }
            if o.elimination_share < 0.0 || (o.role != OrganRole::Tissue && o.elimination_share != 0.0) {
                return Err(DataError::InvalidGraph(format!(
                    "organ {} has an invalid elimination share",
                    o.name
                )));
            }
        }
        let mut names: Vec<&str> = organs.iter().map(|o| o.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(DataError::InvalidGraph("duplicate organ names".into()));
        }

        let tissues: Vec<usize> = (0..organs.len())
            .filter(|&i| organs[i].role == OrganRole::Tissue)
            .collect();
        if tissues.is_empty() {
            return Err(DataError::InvalidGraph("no tissue compartments".into()));
        }
        let cardiac_output: f64 = tissues.iter().map(|&i| organs[i].q).sum();
        for &i in &[arterial, venous, lung] {
            if ((organs[i].q - cardiac_output) / cardiac_output).abs() > 1e-9 {
                return Err(DataError::InvalidGraph(format!(
                    "{} flow {} differs from summed tissue flow {}",
                    organs[i].name, organs[i].q, cardiac_output
                )));
            }
        }
        let shares: f64 = organs.iter().map(|o| o.elimination_share).sum();
        if (shares - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidGraph(format!(
                "elimination shares sum to {shares}, expected 1"
            )));
        }

        let mut edges = vec![(venous, lung), (lung, arterial)];
        for &i in &tissues {
            edges.push((arterial, i));
            edges.push((i, venous));
        }
        Ok(Self {
            organs,
            edges,
            cardiac_output,
            arterial,
            venous,
            lung,
        })
    }

    pub fn organs(&self) -> &[Organ] {
        &self.organs
    }

    pub fn len(&self) -> usize {
        self.organs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.organs.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.organs.iter().map(|o| o.name.clone()).collect()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn cardiac_output(&self) -> f64 {
        self.cardiac_output
    }

    pub fn arterial(&self) -> usize {
        self.arterial
    }

    pub fn venous(&self) -> usize {
        self.venous
    }

    pub fn lung(&self) -> usize {
        self.lung
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.organs.iter().position(|o| o.name == name)
    }

    pub fn tissues(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.organs.len()).filter(move |&i| self.organs[i].role == OrganRole::Tissue)
    }

    /// Row-major `O×O` adjacency: `adj[i*O + j]` is true when node `i`
    /// aggregates from `j`. Edges are treated as undirected and every node
    /// has a self-loop.
    pub fn adjacency(&self) -> Vec<bool> {
        let n = self.organs.len();
        let mut adj = vec![false; n * n];
        for i in 0..n {
            adj[i * n + i] = true;
        }
        for &(a, b) in &self.edges {
            adj[a * n + b] = true;
            adj[b * n + a] = true;
        }
        adj
    }
}
