//! Experiment configuration: a TOML file with CLI flag overrides. Parsing
//! validates the whole document and reports every violation with its key
//! path, not just the first one.

use serde::{Deserialize, Serialize};

use igff::analytics::FieldParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Analytics,
    Simulate,
    Rpc,
    Verify,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpcSettings {
    pub truncation: usize,
    pub trees: usize,
    pub pairs_per_tree: usize,
    pub tuples_per_tree: usize,
}

impl Default for RpcSettings {
    fn default() -> Self {
        RpcSettings {
            truncation: 512,
            trees: 2000,
            pairs_per_tree: 64,
            tuples_per_tree: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub sigma: Vec<f64>,
    pub lambda: Vec<f64>,
    pub betas: Vec<f64>,
    pub ns: Vec<usize>,
    pub rho: f64,
    pub master_seed: u64,
    pub field_samples: usize,
    /// Replica draws per field sample when exact inner sums are too large.
    pub replicas: usize,
    pub threads: usize,
    pub out_dir: String,
    pub rpc: RpcSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::Analytics,
            sigma: vec![1.0],
            lambda: vec![1.0],
            betas: vec![1.0],
            ns: vec![16],
            rho: 1.0,
            master_seed: 1,
            field_samples: 32,
            replicas: 2048,
            threads: 0,
            out_dir: "out".into(),
            rpc: RpcSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl ExperimentConfig {
    pub fn field_params(&self) -> Result<FieldParams, igff::Error> {
        FieldParams::new(self.sigma.clone(), self.lambda.clone())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization")
    }

    /// Validate every module precondition touched by the config. Returns
    /// all violations.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |path: &str, message: String| {
            out.push(Violation {
                path: path.into(),
                message,
            })
        };
        if self.sigma.is_empty() || self.sigma.len() != self.lambda.len() {
            push("sigma", "sigma and lambda need equal nonzero lengths".into());
        }
        if self.sigma.iter().any(|&s| !(s > 0.0)) {
            push("sigma", "entries must be positive".into());
        }
        let mut prev = 0.0;
        let mut increasing = true;
        for &l in &self.lambda {
            if l <= prev {
                increasing = false;
            }
            prev = l;
        }
        if !increasing {
            push("lambda", "lambda not strictly increasing".into());
        } else if self.lambda.last().map(|&l| (l - 1.0).abs() > 1e-12) != Some(false) {
            push("lambda", "last scale must equal 1".into());
        }
        for (i, &b) in self.betas.iter().enumerate() {
            if !(b > 0.0) {
                push(&format!("betas[{i}]"), "must be positive".into());
            }
        }
        for (i, &n) in self.ns.iter().enumerate() {
            if !(2..=64).contains(&n) {
                push(
                    &format!("ns[{i}]"),
                    "box side must lie in 2..=64 for exact covariance".into(),
                );
            }
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            push("rho", "rho must lie in (0, 1]".into());
        }
        if self.field_samples == 0 {
            push("field_samples", "need at least one sample".into());
        }
        if self.replicas == 0 {
            push("replicas", "need at least one replica draw".into());
        }
        if self.rpc.truncation < 2 {
            push("rpc.truncation", "truncation must be at least 2".into());
        }
        if self.rpc.trees == 0 {
            push("rpc.trees", "need at least one tree".into());
        }
        out
    }
}

/// Parse and validate; collects unknown keys, type mismatches and
/// constraint violations with their paths.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, Vec<Violation>> {
    let value: toml::Value = match text.parse() {
        Ok(v) => v,
        Err(e) => {
            return Err(vec![Violation {
                path: "<document>".into(),
                message: e.to_string(),
            }])
        }
    };
    let mut violations = Vec::new();
    let mut cfg = ExperimentConfig::default();
    let Some(table) = value.as_table() else {
        return Err(vec![Violation {
            path: "<document>".into(),
            message: "top level must be a table".into(),
        }]);
    };
    for (key, val) in table {
        match key.as_str() {
            "kind" => match val.as_str() {
                Some("analytics") => cfg.kind = ExperimentKind::Analytics,
                Some("simulate") => cfg.kind = ExperimentKind::Simulate,
                Some("rpc") => cfg.kind = ExperimentKind::Rpc,
                Some("verify") => cfg.kind = ExperimentKind::Verify,
                Some(other) => violations.push(Violation {
                    path: "kind".into(),
                    message: format!(
                        "unknown kind {other:?}; expected analytics, simulate, rpc or verify"
                    ),
                }),
                None => violations.push(Violation {
                    path: "kind".into(),
                    message: "expected a string".into(),
                }),
            },
            "sigma" => read_f64_list(val, "sigma", &mut cfg.sigma, &mut violations),
            "lambda" => read_f64_list(val, "lambda", &mut cfg.lambda, &mut violations),
            "betas" => read_f64_list(val, "betas", &mut cfg.betas, &mut violations),
            "ns" => {
                let mut tmp = Vec::new();
                match val.as_array() {
                    Some(arr) => {
                        for (i, v) in arr.iter().enumerate() {
                            match v.as_integer() {
                                Some(x) if x > 0 => tmp.push(x as usize),
                                _ => violations.push(Violation {
                                    path: format!("ns[{i}]"),
                                    message: "expected a positive integer".into(),
                                }),
                            }
                        }
                        cfg.ns = tmp;
                    }
                    None => violations.push(Violation {
                        path: "ns".into(),
                        message: "expected an array of integers".into(),
                    }),
                }
            }
            "rho" => read_f64(val, "rho", &mut cfg.rho, &mut violations),
            "master_seed" => match val.as_integer() {
                Some(x) if x >= 0 => cfg.master_seed = x as u64,
                _ => violations.push(Violation {
                    path: "master_seed".into(),
                    message: "expected a nonnegative integer".into(),
                }),
            },
            "field_samples" => read_usize(val, "field_samples", &mut cfg.field_samples, &mut violations),
            "replicas" => read_usize(val, "replicas", &mut cfg.replicas, &mut violations),
            "threads" => read_usize_allow_zero(val, "threads", &mut cfg.threads, &mut violations),
            "out_dir" => match val.as_str() {
                Some(s) => cfg.out_dir = s.to_string(),
                None => violations.push(Violation {
                    path: "out_dir".into(),
                    message: "expected a string".into(),
                }),
            },
            "rpc" => match val.as_table() {
                Some(t) => {
                    for (rk, rv) in t {
                        match rk.as_str() {
                            "truncation" => read_usize(rv, "rpc.truncation", &mut cfg.rpc.truncation, &mut violations),
                            "trees" => read_usize(rv, "rpc.trees", &mut cfg.rpc.trees, &mut violations),
                            "pairs_per_tree" => read_usize(rv, "rpc.pairs_per_tree", &mut cfg.rpc.pairs_per_tree, &mut violations),
                            "tuples_per_tree" => read_usize(rv, "rpc.tuples_per_tree", &mut cfg.rpc.tuples_per_tree, &mut violations),
                            other => violations.push(Violation {
                                path: format!("rpc.{other}"),
                                message: "unknown key".into(),
                            }),
                        }
                    }
                }
                None => violations.push(Violation {
                    path: "rpc".into(),
                    message: "expected a table".into(),
                }),
            },
            other => violations.push(Violation {
                path: other.to_string(),
                message: "unknown key".into(),
            }),
        }
    }
    violations.extend(cfg.validate());
    if violations.is_empty() {
        Ok(cfg)
    } else {
        Err(violations)
    }
}

fn read_f64_list(val: &toml::Value, path: &str, dst: &mut Vec<f64>, out: &mut Vec<Violation>) {
    match val.as_array() {
        Some(arr) => {
            let mut tmp = Vec::new();
            for (i, v) in arr.iter().enumerate() {
                match v.as_float().or_else(|| v.as_integer().map(|x| x as f64)) {
                    Some(x) => tmp.push(x),
                    None => out.push(Violation {
                        path: format!("{path}[{i}]"),
                        message: "expected a number".into(),
                    }),
                }
            }
            *dst = tmp;
        }
        None => out.push(Violation {
            path: path.into(),
            message: "expected an array of numbers".into(),
        }),
    }
}

fn read_f64(val: &toml::Value, path: &str, dst: &mut f64, out: &mut Vec<Violation>) {
    match val.as_float().or_else(|| val.as_integer().map(|x| x as f64)) {
        Some(x) => *dst = x,
        None => out.push(Violation {
            path: path.into(),
            message: "expected a number".into(),
        }),
    }
}

fn read_usize(val: &toml::Value, path: &str, dst: &mut usize, out: &mut Vec<Violation>) {
    match val.as_integer() {
        Some(x) if x > 0 => *dst = x as usize,
        _ => out.push(Violation {
            path: path.into(),
            message: "expected a positive integer".into(),
        }),
    }
}

fn read_usize_allow_zero(val: &toml::Value, path: &str, dst: &mut usize, out: &mut Vec<Violation>) {
    match val.as_integer() {
        Some(x) if x >= 0 => *dst = x as usize,
        _ => out.push(Violation {
            path: path.into(),
            message: "expected a nonnegative integer".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses() {
        let cfg = parse_config(
            r#"
kind = "analytics"
sigma = [1.0]
lambda = [1.0]
betas = [1.0]
ns = [16]
"#,
        )
        .unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Analytics);
        assert_eq!(cfg.ns, vec![16]);
    }

    #[test]
    fn bad_lambda_reports_key_path() {
        let err = parse_config(
            r#"
kind = "analytics"
sigma = [1.0, 1.0, 1.0]
lambda = [0.5, 0.4, 1.0]
"#,
        )
        .unwrap_err();
        assert!(err
            .iter()
            .any(|v| v.path == "lambda" && v.message.contains("not strictly increasing")));
    }

    #[test]
    fn all_violations_are_collected() {
        let err = parse_config(
            r#"
kind = "bogus"
sigma = [-1.0]
lambda = [1.0]
betas = [0.0]
ns = [500]
rho = 3.0
unknown_key = 1
"#,
        )
        .unwrap_err();
        let paths: Vec<&str> = err.iter().map(|v| v.path.as_str()).collect();
        for want in ["kind", "sigma", "betas[0]", "ns[0]", "rho", "unknown_key"] {
            assert!(paths.contains(&want), "missing violation for {want}: {err:?}");
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = parse_config(
            r#"
kind = "simulate"
sigma = [2.0, 1.0]
lambda = [0.5, 1.0]
betas = [1.5, 2.0]
ns = [16, 32]
rho = 0.5
master_seed = 99
field_samples = 8
[rpc]
truncation = 128
trees = 10
pairs_per_tree = 32
tuples_per_tree = 16
"#,
        )
        .unwrap();
        let text = cfg.to_toml();
        let back = parse_config(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
