//! JSON network file.
//!
//! ```json
//! {
//!   "base": {"s_mva": 1.0, "v_kv": 4.16},
//!   "v0_pu": 1.0,
//!   "buses": [{"id": 0, "v_lower_pu": 0.95, "v_upper_pu": 1.05}, ...],
//!   "lines": [{"from": 0, "to": 1, "r_pu": 0.04, "x_pu": 0.05}, ...],
//!   "controlled": [2, 7, 9]
//! }
//! ```
//!
//! Voltage quantities (`v0_pu`, band limits) are in the model's state units:
//! squared magnitude, per-unit. Three-phase lines replace `r_pu`/`x_pu` with
//! `z_matrix`, a 3x3 array of `{"re", "im"}` objects.

use std::path::Path;

use nalgebra::Matrix3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{Base, BusId, BusLimits, GridError, Impedance, Line, RadialNetwork};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseFile {
    pub s_mva: f64,
    pub v_kv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusFile {
    pub id: usize,
    pub v_lower_pu: f64,
    pub v_upper_pu: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexFile {
    pub re: f64,
    pub im: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineFile {
    pub from: usize,
    pub to: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_pu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_pu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_matrix: Option<[[ComplexFile; 3]; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub base: BaseFile,
    #[serde(default = "default_v0")]
    pub v0_pu: f64,
    pub buses: Vec<BusFile>,
    pub lines: Vec<LineFile>,
    #[serde(default)]
    pub controlled: Vec<usize>,
}

fn default_v0() -> f64 {
    1.0
}

fn field(path: impl Into<String>, msg: impl Into<String>) -> GridError {
    GridError::Field {
        path: path.into(),
        msg: msg.into(),
    }
}

impl NetworkFile {
    pub fn from_json(text: &str) -> Result<Self, GridError> {
        serde_json::from_str(text).map_err(|e| {
            GridError::Schema(format!("line {} column {}: {e}", e.line(), e.column()))
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| GridError::Schema(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network file serializes")
    }

    /// Field-level validation followed by the structural checks of
    /// [`RadialNetwork::with_base`].
    pub fn to_network(&self) -> Result<RadialNetwork, GridError> {
        if !(self.base.s_mva > 0.0 && self.base.s_mva.is_finite()) {
            return Err(field("base.s_mva", "must be positive"));
        }
        if !(self.base.v_kv > 0.0 && self.base.v_kv.is_finite()) {
            return Err(field("base.v_kv", "must be positive"));
        }
        if !(self.v0_pu > 0.0 && self.v0_pu.is_finite()) {
            return Err(field("v0_pu", "must be positive"));
        }
        let n = self.buses.len();
        if n < 2 {
            return Err(field("buses", "need the substation and at least one bus"));
        }
        let mut limits = vec![None; n];
        for (k, b) in self.buses.iter().enumerate() {
            if b.id >= n {
                return Err(field(
                    format!("buses[{k}].id"),
                    format!("bus ids must be 0..={}", n - 1),
                ));
            }
            if limits[b.id].is_some() {
                return Err(GridError::DuplicateBus(BusId(b.id)));
            }
            if !(b.v_lower_pu < b.v_upper_pu) {
                return Err(field(
                    format!("buses[{k}]"),
                    "v_lower_pu must be below v_upper_pu",
                ));
            }
            limits[b.id] = Some(BusLimits::new(b.v_lower_pu, b.v_upper_pu));
        }
        let limits: Vec<BusLimits> = limits
            .into_iter()
            .enumerate()
            .map(|(b, l)| {
                l.ok_or(GridError::MissingBus {
                    missing: BusId(b),
                    max: n - 1,
                })
            })
            .collect::<Result<_, _>>()?;

        let mut lines = Vec::with_capacity(self.lines.len());
        let mut three = None;
        for (k, l) in self.lines.iter().enumerate() {
            let imp = match (l.r_pu, l.x_pu, &l.z_matrix) {
                (Some(r), Some(x), None) => Impedance::Single { r, x },
                (None, None, Some(zm)) => {
                    Impedance::Three(Matrix3::from_fn(|i, j| Complex64::new(zm[i][j].re, zm[i][j].im)))
                }
                (None, Some(_), None) => return Err(field(format!("lines[{k}].r_pu"), "missing")),
                (Some(_), None, None) => return Err(field(format!("lines[{k}].x_pu"), "missing")),
                _ => {
                    return Err(field(
                        format!("lines[{k}]"),
                        "expected either r_pu/x_pu or z_matrix",
                    ))
                }
            };
            let is_three = matches!(imp, Impedance::Three(_));
            if *three.get_or_insert(is_three) != is_three {
                return Err(field(
                    format!("lines[{k}]"),
                    "all lines must use the same phase model",
                ));
            }
            lines.push(Line {
                from: BusId(l.from),
                to: BusId(l.to),
                impedance: imp,
            });
        }
        let controlled = self.controlled.iter().map(|&b| BusId(b)).collect();
        RadialNetwork::with_base(
            n,
            lines,
            self.v0_pu,
            limits,
            controlled,
            Base {
                s_mva: self.base.s_mva,
                v_kv: self.base.v_kv,
            },
        )
    }

    pub fn from_network(net: &RadialNetwork) -> Self {
        let buses = net
            .buses()
            .map(|b| {
                let l = net.limits(b);
                BusFile {
                    id: b.0,
                    v_lower_pu: l.lower,
                    v_upper_pu: l.upper,
                }
            })
            .collect();
        let lines = net
            .lines()
            .iter()
            .map(|l| match &l.impedance {
                Impedance::Single { r, x } => LineFile {
                    from: l.from.0,
                    to: l.to.0,
                    r_pu: Some(*r),
                    x_pu: Some(*x),
                    z_matrix: None,
                },
                Impedance::Three(z) => LineFile {
                    from: l.from.0,
                    to: l.to.0,
                    r_pu: None,
                    x_pu: None,
                    z_matrix: Some(std::array::from_fn(|i| {
                        std::array::from_fn(|j| ComplexFile {
                            re: z[(i, j)].re,
                            im: z[(i, j)].im,
                        })
                    })),
                },
            })
            .collect();
        let base = net.base();
        NetworkFile {
            name: None,
            base: BaseFile {
                s_mva: base.s_mva,
                v_kv: base.v_kv,
            },
            v0_pu: net.v0(),
            buses,
            lines,
            controlled: net.controlled().iter().map(|b| b.0).collect(),
        }
    }
}

pub fn load_network(path: impl AsRef<Path>) -> Result<RadialNetwork, GridError> {
    NetworkFile::load(path)?.to_network()
}
