//! Built-in test systems and experiment definitions.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{DistributionError, UncertaintyModel, UncertaintySpec};
use crate::model::{
    build_polar_ac, Bus, BusType, InjectionKind, LambdaSlot, NetworkDescription, NetworkError,
    NominalInjections, PowerFlowModel, TwoBusModel, YbusConvention,
};

/// Analytic 2-bus boundary residual λ₁² + 4λ₂ − 4; positive means collapsed.
pub fn two_bus_boundary_residual(lam: &DVector<f64>) -> f64 {
    lam[0] * lam[0] + 4.0 * lam[1] - 4.0
}

/// 5-bus admittance table, entries as printed (conjugate-coupling
/// convention: off-diagonals carry the opposite susceptance sign from the
/// standard bus-admittance form).
pub const FIVE_BUS_YBUS: [[(f64, f64); 5]; 5] = [
    [
        (3.241, -13.085),
        (-1.401, -5.602),
        (0.0, 0.0),
        (0.0, 0.0),
        (-1.841, -7.484),
    ],
    [
        (-1.401, -5.602),
        (3.242, -12.486),
        (-1.841, -7.484),
        (0.0, 0.0),
        (0.0, 0.0),
    ],
    [
        (0.0, 0.0),
        (-1.841, -7.484),
        (3.671, -14.762),
        (-0.700, -2.801),
        (-1.130, -4.477),
    ],
    [
        (0.0, 0.0),
        (0.0, 0.0),
        (-0.700, -2.801),
        (1.634, -6.236),
        (-0.934, -3.435),
    ],
    [
        (-1.841, -7.484),
        (0.0, 0.0),
        (-1.130, -4.477),
        (-0.934, -3.435),
        (3.905, -15.396),
    ],
];

/// Nominal 5-bus loads μ = (P₂, Q₂, P₄, Q₄, P₅, Q₅).
pub const FIVE_BUS_MEAN: [f64; 6] = [1.15, 0.6, 0.7, 0.3, 0.7, 0.4];

/// Second mixture mean for the 5-bus experiment.
pub const FIVE_BUS_MEAN_2: [f64; 6] = [1.33, 0.66, 0.86, 0.35, 0.85, 0.46];

/// First 5-bus mixture covariance (diagonal, as given).
pub const FIVE_BUS_SIGMA_1: [f64; 6] = [1.0, 0.8, 0.3, 1.0, 1.0, 1.0];

/// 5-bus network: bus 1 slack (V = 1, α = 0), bus 3 PV (V = 1), buses
/// 2, 4, 5 PQ; uncertain loads (P₂, Q₂, P₄, Q₄, P₅, Q₅); zero nominal
/// injections; admittance stored exactly as tabulated.
pub fn build_five_bus() -> NetworkDescription {
    let bus = |id, bus_type| Bus {
        id,
        bus_type,
        vset: 1.0,
    };
    let slot = |bus, kind| LambdaSlot { bus, kind };
    NetworkDescription {
        buses: vec![
            bus(0, BusType::Slack),
            bus(1, BusType::Pq),
            bus(2, BusType::Pv),
            bus(3, BusType::Pq),
            bus(4, BusType::Pq),
        ],
        ybus: FIVE_BUS_YBUS
            .iter()
            .map(|row| row.iter().map(|&(re, im)| [re, im]).collect())
            .collect(),
        lambda_map: vec![
            slot(1, InjectionKind::P),
            slot(1, InjectionKind::Q),
            slot(3, InjectionKind::P),
            slot(3, InjectionKind::Q),
            slot(4, InjectionKind::P),
            slot(4, InjectionKind::Q),
        ],
        nominal_injections: NominalInjections {
            p: vec![0.0; 5],
            q: vec![0.0; 5],
        },
        ybus_convention: YbusConvention::ConjugateCoupling,
    }
}

fn correlation(m: usize, same_bus: f64, pp: f64, qq: f64) -> Vec<Vec<f64>> {
    // Slots alternate P, Q per bus: (P, Q) pairs at indices (0,1), (2,3), ...
    let mut c = vec![vec![0.0; m]; m];
    for (i, row) in c.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let set = |c: &mut Vec<Vec<f64>>, i: usize, j: usize, v: f64| {
        c[i][j] = v;
        c[j][i] = v;
    };
    for b in 0..m / 2 {
        set(&mut c, 2 * b, 2 * b + 1, same_bus);
    }
    for a in 0..m / 2 {
        for b in (a + 1)..m / 2 {
            set(&mut c, 2 * a, 2 * b, pp);
            set(&mut c, 2 * a + 1, 2 * b + 1, qq);
        }
    }
    c
}

fn scaled_correlated(vars: &[f64], corr: &[Vec<f64>], scale: f64) -> Vec<Vec<f64>> {
    let m = vars.len();
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| scale * corr[i][j] * (vars[i] * vars[j]).sqrt())
                .collect()
        })
        .collect()
}

/// Base covariance for the 5-bus Gaussian sweep: variances equal to the
/// nominal loads, mild positive correlations (0.25 same-bus P–Q, 0.2 P–P,
/// 0.1 Q–Q). Fixed here so the sweep is reproducible end to end.
pub fn five_bus_sigma0() -> Vec<Vec<f64>> {
    scaled_correlated(&FIVE_BUS_MEAN, &correlation(6, 0.25, 0.2, 0.1), 1.0)
}

/// Second mixture covariance for the 5-bus mixture sweep: same recipe
/// around μ₂ with stronger coupling (0.3/0.2/0.1) at half scale.
pub fn five_bus_sigma2() -> Vec<Vec<f64>> {
    scaled_correlated(&FIVE_BUS_MEAN_2, &correlation(6, 0.3, 0.2, 0.1), 0.5)
}

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("unknown case {0:?}")]
    UnknownCase(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceMethod {
    Mc,
    Is,
}

/// One sweep row: covariance scale, scheduled reference method, sample count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub c: f64,
    pub method: ReferenceMethod,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ModelRef {
    TwoBus,
    FiveBus,
    #[serde(untagged)]
    File {
        file: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    /// Sign test on the analytic 2-bus boundary.
    Analytic,
    /// Per-sample power-flow solve from the nominal warm start.
    Powerflow,
}

/// Experiment: model, unscaled uncertainty, covariance-scale schedule, seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub model: ModelRef,
    pub uncertainty: UncertaintySpec,
    pub sweep: Vec<SweepPoint>,
    pub seed: u64,
    pub classifier: ClassifierKind,
    /// Default output directory for sweep artifacts; the CLI `--out` flag
    /// overrides it, and stdout is used when both are absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), CaseError> {
        if self.sweep.is_empty() {
            return Err(CaseError::Invalid("empty sweep".into()));
        }
        for w in self.sweep.windows(2) {
            if w[1].c >= w[0].c {
                return Err(CaseError::Invalid(format!(
                    "sweep scales must be strictly decreasing: {} then {}",
                    w[0].c, w[1].c
                )));
            }
        }
        for p in &self.sweep {
            if p.c <= 0.0 {
                return Err(CaseError::Invalid(format!("scale {} not positive", p.c)));
            }
            if p.samples < 1 {
                return Err(CaseError::Invalid("sample counts must be >= 1".into()));
            }
        }
        if self.classifier == ClassifierKind::Analytic && self.model != ModelRef::TwoBus {
            return Err(CaseError::Invalid(
                "analytic classifier only applies to the two_bus case".into(),
            ));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<Box<dyn PowerFlowModel>, CaseError> {
        match &self.model {
            ModelRef::TwoBus => Ok(Box::new(TwoBusModel)),
            ModelRef::FiveBus => Ok(Box::new(build_polar_ac(&build_five_bus())?)),
            ModelRef::File { file } => {
                let net = load_network(file)?;
                Ok(Box::new(build_polar_ac(&net)?))
            }
        }
    }

    pub fn build_uncertainty(&self) -> Result<UncertaintyModel, CaseError> {
        Ok(self.uncertainty.build()?)
    }

    /// Re-tags the MC/IS schedule: MC for `c >= threshold`, IS below.
    pub fn retag_with_threshold(&mut self, threshold: f64) {
        for p in &mut self.sweep {
            p.method = if p.c >= threshold {
                ReferenceMethod::Mc
            } else {
                ReferenceMethod::Is
            };
        }
    }
}

fn sweep_points(
    cs: &[f64],
    mc_from: usize,
    mc_samples: usize,
    is_samples: usize,
) -> Vec<SweepPoint> {
    cs.iter()
        .enumerate()
        .map(|(i, &c)| SweepPoint {
            c,
            method: if i < mc_from {
                ReferenceMethod::Mc
            } else {
                ReferenceMethod::Is
            },
            samples: if i < mc_from { mc_samples } else { is_samples },
        })
        .collect()
}

/// Covariance scales of the 2-bus sweeps.
pub const TWO_BUS_SCALES: [f64; 10] = [
    6.310e-1, 4.190e-1, 2.783e-1, 1.848e-1, 1.227e-1, 8.149e-2, 5.412e-2, 3.594e-2, 2.387e-2,
    1.585e-2,
];

/// Covariance scales of the 5-bus Gaussian sweep.
pub const FIVE_BUS_SCALES: [f64; 11] = [
    6.310e-1, 4.532e-1, 3.255e-1, 2.337e-1, 1.679e-1, 1.206e-1, 8.660e-2, 6.219e-2, 4.467e-2,
    3.600e-2, 2.100e-2,
];

/// Covariance scales of the 5-bus mixture sweep.
pub const FIVE_BUS_GMM_SCALES: [f64; 5] = [6.310e-1, 3.255e-1, 1.679e-1, 8.660e-2, 4.467e-2];

/// The four built-in experiments.
pub fn builtin_experiments() -> Vec<ExperimentSpec> {
    let gaussian_2bus = ExperimentSpec {
        name: "gaussian_2bus".into(),
        model: ModelRef::TwoBus,
        uncertainty: UncertaintySpec::Gaussian {
            gaussian: crate::distributions::GaussianSpec {
                mu: vec![0.5, 0.3],
                sigma: vec![vec![0.6, 0.0], vec![0.0, 1.0]],
            },
        },
        sweep: sweep_points(&TWO_BUS_SCALES, 5, 400_000, 150_000),
        seed: 45,
        classifier: ClassifierKind::Analytic,
        output: None,
    };
    let gmm_2bus = ExperimentSpec {
        name: "gmm_2bus".into(),
        model: ModelRef::TwoBus,
        uncertainty: UncertaintySpec::Mixture {
            mixture: vec![
                crate::distributions::ComponentSpec {
                    pi: 0.75,
                    mu: vec![0.45, 0.25],
                    sigma: vec![vec![0.60, 0.0], vec![0.0, 1.00]],
                },
                crate::distributions::ComponentSpec {
                    pi: 0.25,
                    mu: vec![0.82, 0.52],
                    sigma: vec![vec![0.35, 0.08], vec![0.08, 0.55]],
                },
            ],
        },
        sweep: sweep_points(&TWO_BUS_SCALES, 5, 1_000_000, 400_000),
        seed: 50,
        classifier: ClassifierKind::Analytic,
        output: None,
    };
    let gaussian_5bus = ExperimentSpec {
        name: "gaussian_5bus".into(),
        model: ModelRef::FiveBus,
        uncertainty: UncertaintySpec::Gaussian {
            gaussian: crate::distributions::GaussianSpec {
                mu: FIVE_BUS_MEAN.to_vec(),
                sigma: five_bus_sigma0(),
            },
        },
        sweep: sweep_points(&FIVE_BUS_SCALES, 6, 4_000, 3_000),
        seed: 44,
        classifier: ClassifierKind::Powerflow,
        output: None,
    };
    let gmm_5bus = ExperimentSpec {
        name: "gmm_5bus".into(),
        model: ModelRef::FiveBus,
        uncertainty: UncertaintySpec::Mixture {
            mixture: vec![
                crate::distributions::ComponentSpec {
                    pi: 0.8,
                    mu: FIVE_BUS_MEAN.to_vec(),
                    sigma: (0..6)
                        .map(|i| {
                            (0..6)
                                .map(|j| if i == j { FIVE_BUS_SIGMA_1[i] } else { 0.0 })
                                .collect()
                        })
                        .collect(),
                },
                crate::distributions::ComponentSpec {
                    pi: 0.2,
                    mu: FIVE_BUS_MEAN_2.to_vec(),
                    sigma: five_bus_sigma2(),
                },
            ],
        },
        sweep: sweep_points(&FIVE_BUS_GMM_SCALES, 2, 6_000, 4_000),
        seed: 45,
        classifier: ClassifierKind::Powerflow,
        output: None,
    };
    vec![gaussian_2bus, gmm_2bus, gaussian_5bus, gmm_5bus]
}

/// Looks up a built-in experiment by name.
pub fn builtin_experiment(name: &str) -> Result<ExperimentSpec, CaseError> {
    builtin_experiments()
        .into_iter()
        .find(|e| e.name == name)
        .ok_or_else(|| CaseError::UnknownCase(name.into()))
}

pub fn load_network(path: &str) -> Result<NetworkDescription, CaseError> {
    let text = std::fs::read_to_string(path).map_err(|source| CaseError::Io {
        path: path.into(),
        source,
    })?;
    NetworkDescription::from_json(&text).map_err(|e| match e {
        NetworkError::Parse { path: loc, message } => CaseError::Parse {
            path: format!("{path}: {loc}"),
            message,
        },
        other => CaseError::Network(other),
    })
}

pub fn load_experiment(path: &str) -> Result<ExperimentSpec, CaseError> {
    let text = std::fs::read_to_string(path).map_err(|source| CaseError::Io {
        path: path.into(),
        source,
    })?;
    let spec: ExperimentSpec = serde_json::from_str(&text).map_err(|e| CaseError::Parse {
        path: format!("{path}: line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    spec.validate()?;
    spec.build_uncertainty()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_residual_reference_points() {
        assert_eq!(
            two_bus_boundary_residual(&DVector::from_vec(vec![0.0, 1.0])),
            0.0
        );
        assert_eq!(
            two_bus_boundary_residual(&DVector::from_vec(vec![2.0, 0.0])),
            0.0
        );
        // The quoted instanton lies on the boundary within 3-digit rounding.
        let r = two_bus_boundary_residual(&DVector::from_vec(vec![0.703, 0.877]));
        assert!(r.abs() <= 5e-3, "residual {r}");
    }

    #[test]
    fn five_bus_table_stored_verbatim() {
        let net = build_five_bus();
        assert_eq!(net.ybus[1][2], [-1.841, -7.484]);
        assert_eq!(net.ybus[2][1], [-1.841, -7.484]);
        assert_eq!(net.ybus[0][2], [0.0, 0.0]);
        assert_eq!(net.ybus[0][3], [0.0, 0.0]);
        assert_eq!(net.ybus[0][0], [3.241, -13.085]);
        // symmetric
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(net.ybus[i][j], net.ybus[j][i]);
            }
        }
        // row sums finite (diagnostic only)
        for i in 0..5 {
            let (re, im) = (0..5).fold((0.0, 0.0), |acc, j| {
                (acc.0 + net.ybus[i][j][0], acc.1 + net.ybus[i][j][1])
            });
            assert!(re.is_finite() && im.is_finite());
        }
        net.validate().unwrap();
    }

    #[test]
    fn five_bus_round_trips_through_file_format() {
        let net = build_five_bus();
        let back = NetworkDescription::from_json(&net.to_json()).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn builtin_sweep_schedules_match_tables() {
        let exps = builtin_experiments();
        let g2 = &exps[0];
        assert_eq!(g2.name, "gaussian_2bus");
        let cs: Vec<f64> = g2.sweep.iter().map(|p| p.c).collect();
        assert_eq!(cs, TWO_BUS_SCALES.to_vec());
        assert!(g2.sweep[..5]
            .iter()
            .all(|p| p.method == ReferenceMethod::Mc && p.samples == 400_000));
        assert!(g2.sweep[5..]
            .iter()
            .all(|p| p.method == ReferenceMethod::Is && p.samples == 150_000));

        let gmm = &exps[1];
        match &gmm.uncertainty {
            UncertaintySpec::Mixture { mixture } => {
                assert_eq!(mixture[1].mu, vec![0.82, 0.52]);
                assert_eq!(mixture[0].pi, 0.75);
            }
            _ => panic!("gmm_2bus must be a mixture"),
        }

        let g5 = &exps[2];
        let tags: Vec<ReferenceMethod> = g5.sweep.iter().map(|p| p.method).collect();
        // MC down to c = 1.206e-1, IS from 8.660e-2 (table tags)
        assert_eq!(
            tags.iter()
                .filter(|m| matches!(m, ReferenceMethod::Mc))
                .count(),
            6
        );
        assert_eq!(g5.sweep[6].c, 8.660e-2);
        assert_eq!(g5.sweep[6].method, ReferenceMethod::Is);
        for e in &exps {
            e.validate().unwrap();
            e.build_uncertainty().unwrap();
        }
    }

    #[test]
    fn threshold_retagging() {
        let mut e = builtin_experiment("gaussian_5bus").unwrap();
        // c >= 6.3e-2 covers the seven scales down to and including 8.660e-2.
        e.retag_with_threshold(6.3e-2);
        let mc = e
            .sweep
            .iter()
            .filter(|p| p.method == ReferenceMethod::Mc)
            .count();
        assert_eq!(mc, 7);
        assert_eq!(e.sweep[6].method, ReferenceMethod::Mc);
        assert_eq!(e.sweep[7].method, ReferenceMethod::Is);
    }

    #[test]
    fn experiment_json_round_trip() {
        let e = builtin_experiment("gmm_2bus").unwrap();
        let json = serde_json::to_string_pretty(&e).unwrap();
        let back: ExperimentSpec = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(back.name, e.name);
        assert_eq!(back.sweep.len(), e.sweep.len());
    }

    #[test]
    fn invalid_experiments_rejected() {
        let mut e = builtin_experiment("gaussian_2bus").unwrap();
        e.sweep.reverse();
        assert!(matches!(e.validate(), Err(CaseError::Invalid(_))));
        let mut e2 = builtin_experiment("gaussian_5bus").unwrap();
        e2.classifier = ClassifierKind::Analytic;
        assert!(matches!(e2.validate(), Err(CaseError::Invalid(_))));
    }
}
