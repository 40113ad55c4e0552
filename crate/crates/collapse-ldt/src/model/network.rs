//! Network description and its JSON schema.

use nalgebra::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusType {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Bus {
    pub id: usize,
    #[serde(rename = "type")]
    pub bus_type: BusType,
    /// Voltage setpoint; used for slack and PV buses and as the flat-start
    /// magnitude for PQ buses.
    pub vset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InjectionKind {
    P,
    Q,
}

/// One uncertain parameter: the (bus, P|Q) injection slot it loads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LambdaSlot {
    pub bus: usize,
    pub kind: InjectionKind,
}

/// How the off-diagonal entries of `ybus` are recorded.
///
/// `Standard` is the usual bus-admittance convention. `ConjugateCoupling`
/// marks tables whose off-diagonal entries are the complex conjugates of the
/// standard ones (coupling printed as `−g − jb` with `b` the susceptance
/// magnitude); the polar assembly conjugates them back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum YbusConvention {
    #[default]
    Standard,
    ConjugateCoupling,
}

/// Bus list, admittance matrix, the λ → injection mapping, and nominal
/// injections at slots not covered by λ.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetworkDescription {
    pub buses: Vec<Bus>,
    /// Dense admittance matrix, row-major, entries as `[re, im]` pairs.
    pub ybus: Vec<Vec<[f64; 2]>>,
    pub lambda_map: Vec<LambdaSlot>,
    pub nominal_injections: NominalInjections,
    #[serde(default)]
    pub ybus_convention: YbusConvention,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NominalInjections {
    /// Active-power injection per bus (generation positive, load negative).
    pub p: Vec<f64>,
    /// Reactive-power injection per bus.
    pub q: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },
}

impl NetworkDescription {
    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    /// Admittance entry in the standard convention.
    pub fn admittance(&self, i: usize, j: usize) -> Complex<f64> {
        let [re, im] = self.ybus[i][j];
        let y = Complex::new(re, im);
        match self.ybus_convention {
            YbusConvention::Standard => y,
            YbusConvention::ConjugateCoupling => {
                if i == j {
                    y
                } else {
                    y.conj()
                }
            }
        }
    }

    /// Checks the structural invariants: square symmetric-shaped Y, exactly
    /// one slack bus, consecutive bus ids, and a collision-free λ-map whose
    /// slots refer to buses that actually carry that mismatch equation.
    pub fn validate(&self) -> Result<(), NetworkError> {
        let nb = self.buses.len();
        if nb == 0 {
            return Err(NetworkError::Invalid("no buses".into()));
        }
        for (i, bus) in self.buses.iter().enumerate() {
            if bus.id != i {
                return Err(NetworkError::Invalid(format!(
                    "bus ids must be consecutive from 0; bus {} has id {}",
                    i, bus.id
                )));
            }
        }
        if self.ybus.len() != nb || self.ybus.iter().any(|row| row.len() != nb) {
            return Err(NetworkError::Invalid(format!(
                "ybus must be {nb}x{nb} to match the bus count"
            )));
        }
        let slack_count = self
            .buses
            .iter()
            .filter(|b| b.bus_type == BusType::Slack)
            .count();
        if slack_count != 1 {
            return Err(NetworkError::Invalid(format!(
                "exactly one slack bus required, found {slack_count}"
            )));
        }
        if self.nominal_injections.p.len() != nb || self.nominal_injections.q.len() != nb {
            return Err(NetworkError::Invalid(
                "nominal_injections.p/q must have one entry per bus".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for slot in &self.lambda_map {
            if slot.bus >= nb {
                return Err(NetworkError::Invalid(format!(
                    "lambda_map slot references bus {} out of range",
                    slot.bus
                )));
            }
            if !seen.insert((slot.bus, slot.kind)) {
                return Err(NetworkError::Invalid(format!(
                    "lambda_map maps two components to bus {} {:?}",
                    slot.bus, slot.kind
                )));
            }
            let bt = self.buses[slot.bus].bus_type;
            match slot.kind {
                InjectionKind::P if bt == BusType::Slack => {
                    return Err(NetworkError::Invalid(format!(
                        "P slot on slack bus {} has no mismatch equation",
                        slot.bus
                    )))
                }
                InjectionKind::Q if bt != BusType::Pq => {
                    return Err(NetworkError::Invalid(format!(
                        "Q slot on non-PQ bus {} has no mismatch equation",
                        slot.bus
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        let net: NetworkDescription =
            serde_json::from_str(text).map_err(|e| NetworkError::Parse {
                path: format!("line {} column {}", e.line(), e.column()),
                message: e.to_string(),
            })?;
        net.validate()?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net() -> NetworkDescription {
        NetworkDescription {
            buses: vec![
                Bus {
                    id: 0,
                    bus_type: BusType::Slack,
                    vset: 1.0,
                },
                Bus {
                    id: 1,
                    bus_type: BusType::Pq,
                    vset: 1.0,
                },
            ],
            ybus: vec![vec![[0.0, -4.0], [0.0, 4.0]], vec![[0.0, 4.0], [0.0, -4.0]]],
            lambda_map: vec![
                LambdaSlot {
                    bus: 1,
                    kind: InjectionKind::P,
                },
                LambdaSlot {
                    bus: 1,
                    kind: InjectionKind::Q,
                },
            ],
            nominal_injections: NominalInjections {
                p: vec![0.0, 0.0],
                q: vec![0.0, 0.0],
            },
            ybus_convention: YbusConvention::Standard,
        }
    }

    #[test]
    fn valid_network_passes() {
        tiny_net().validate().unwrap();
    }

    #[test]
    fn missing_slack_rejected() {
        let mut net = tiny_net();
        net.buses[0].bus_type = BusType::Pq;
        let err = net.validate().unwrap_err();
        assert!(err.to_string().contains("slack"));
    }

    #[test]
    fn duplicate_lambda_slot_rejected() {
        let mut net = tiny_net();
        net.lambda_map[1] = net.lambda_map[0];
        let err = net.validate().unwrap_err();
        assert!(err.to_string().contains("two components"));
    }

    #[test]
    fn json_round_trip() {
        let net = tiny_net();
        let json = net.to_json();
        let back = NetworkDescription::from_json(&json).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn malformed_complex_entry_reports_field_path() {
        let json = r#"{
            "buses": [{"id": 0, "type": "slack", "vset": 1.0}],
            "ybus": [[[1.0]]],
            "lambda_map": [],
            "nominal_injections": {"p": [0.0], "q": [0.0]}
        }"#;
        let err = NetworkDescription::from_json(json).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("parse error"), "{msg}");
    }

    #[test]
    fn malformed_entry_reports_location() {
        let json = r#"{"buses": [{"id": 0, "type": "slack", "vset": "oops"}]}"#;
        let err = NetworkDescription::from_json(json).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("parse error"), "{msg}");
        assert!(msg.contains("line"), "{msg}");
    }
}
