//! Accuracy experiments: paired FL runs with and without transfer learning
//! and under each DP setting, all on the same synthetic data and seeds.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::accountant::{self, DEFAULT_ORDERS};
use crate::client::{ClientConfig, LocalData};
use crate::data::{self, Partition, SynthSpec};
use crate::dp::DpConfig;
use crate::error::{Error, Result};
use crate::nn::{LabeledBatch, ModelParams, DEFAULT_LAYER_DIMS};
use crate::seed;
use crate::server::{self, ServerConfig, TrainingReport};
use crate::train::{self, PretrainConfig, SchedulePlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base seed. The data seed is this value; every other stream is derived
    /// from it.
    pub seed: u64,
    pub rounds: u32,
    /// Users that take part as clients; empty means every user in `data`.
    pub clients: Vec<String>,
    pub tl_enabled: bool,
    /// DP for single runs (`run-server`, `run-client`).
    pub dp: Option<DpConfig>,
    /// DP settings swept by the accuracy experiment.
    pub dp_arms: Vec<DpConfig>,
    pub data: SynthSpec,
    pub pretrain: PretrainConfig,
    pub plan: SchedulePlan,
    pub round_timeout_secs: f64,
    /// Latency configuration file; the built-in defaults when absent.
    pub latency_profile: Option<String>,
    pub out_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 10,
            clients: Vec::new(),
            tl_enabled: true,
            dp: None,
            dp_arms: DpConfig::reference_rows().to_vec(),
            data: SynthSpec::default(),
            pretrain: PretrainConfig::default(),
            plan: SchedulePlan::default(),
            round_timeout_secs: 600.0,
            latency_profile: None,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// The synthetic spec with the base seed applied.
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: seed::derive(self.seed, &[seed::tag("pretrain")]),
            ..self.pretrain.clone()
        }
    }

    pub fn client_seed(&self, client_id: &str) -> u64 {
        seed::derive(self.seed, &[seed::tag("client"), seed::tag(client_id)])
    }

    pub fn init_seed(&self) -> u64 {
        seed::derive(self.seed, &[seed::tag("init")])
    }

    pub fn server_config(&self, tl_enabled: bool, dp: Option<DpConfig>) -> ServerConfig {
        ServerConfig {
            rounds: self.rounds,
            plan: self.plan.clone(),
            dp,
            tl_enabled,
            round_timeout_secs: self.round_timeout_secs,
            ..ServerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        for dp in &self.dp_arms {
            dp.validate()?;
        }
        if self.plan.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.round_timeout_secs > 0.0) {
            return Err(Error::config("round_timeout_secs must be > 0"));
        }
        let users: Vec<&str> = self.data.users.iter().map(|u| u.user.as_str()).collect();
        for c in &self.clients {
            if !users.contains(&c.as_str()) {
                return Err(Error::config(format!("client '{c}' is not a user in the data spec")));
            }
        }
        Ok(())
    }
}

/// Generated data shared by every arm of an experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub partitions: BTreeMap<String, Partition>,
    /// Pooled test split of the participating users.
    pub eval: LabeledBatch,
    pub transfer_model: ModelParams,
    pub random_model: ModelParams,
}

impl Prepared {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.synth_spec();
        let mut partitions = data::generate(&spec)?;
        if !config.clients.is_empty() {
            partitions.retain(|user, _| config.clients.contains(user));
        }
        let eval = data::pooled_test(&partitions);
        let source = data::source_task(&spec)?;
        let transfer_model = train::pretrain_transfer_model(
            &source,
            spec.source_classes,
            spec.feature_dim,
            DEFAULT_LAYER_DIMS[3],
            &config.pretrain_config(),
        )?;
        let mut dims = DEFAULT_LAYER_DIMS;
        dims[0] = spec.feature_dim;
        let random_model = train::random_init(&dims, config.init_seed());
        Ok(Self {
            partitions,
            eval,
            transfer_model: transfer_model.quantized(),
            random_model: random_model.quantized(),
        })
    }

    pub fn initial_model(&self, tl_enabled: bool) -> &ModelParams {
        if tl_enabled {
            &self.transfer_model
        } else {
            &self.random_model
        }
    }

    /// One client per partition, named after its user.
    pub fn clients(&self, config: &ExperimentConfig, tl_enabled: bool) -> Vec<(ClientConfig, LocalData)> {
        self.partitions
            .iter()
            .map(|(user, p)| {
                (
                    ClientConfig {
                        client_id: user.clone(),
                        data_partition: user.clone(),
                        dp: None,
                        tl_enabled,
                        seed: config.client_seed(user),
                    },
                    LocalData::from_partition(p),
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub tl_enabled: bool,
    pub dp: Option<DpConfig>,
}

impl Arm {
    pub fn new(name: impl Into<String>, tl_enabled: bool, dp: Option<DpConfig>) -> Self {
        Self {
            name: name.into(),
            tl_enabled,
            dp,
        }
    }
}

/// With/without transfer learning, then one transfer-learning arm per DP
/// setting. The non-private DP baseline is the `tl` arm.
pub fn default_arms(config: &ExperimentConfig) -> Vec<Arm> {
    let mut arms = vec![Arm::new("tl", true, None), Arm::new("no_tl", false, None)];
    for dp in &config.dp_arms {
        arms.push(Arm::new(format!("dp_sigma_{}", dp.noise_multiplier), true, Some(*dp)));
    }
    arms
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: Arm,
    pub report: TrainingReport,
    /// Cumulative ε after each round (worst client); infinite without DP.
    pub epsilon: Vec<f64>,
}

impl ArmResult {
    pub fn accuracy(&self, round: u32) -> Option<f64> {
        self.report
            .rounds
            .iter()
            .find(|r| r.round == round)
            .map(|r| r.global_accuracy)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.report.rounds.last().map(|r| r.global_accuracy)
    }
}

/// Cumulative ε after each of `rounds` rounds for the client with the
/// weakest guarantee.
pub fn epsilon_by_round(
    plan: &SchedulePlan,
    rounds: u32,
    dp: Option<&DpConfig>,
    client_sizes: &[usize],
    num_layers: usize,
) -> Result<Vec<f64>> {
    let Some(dp) = dp else {
        return Ok(vec![f64::INFINITY; rounds as usize]);
    };
    (1..=rounds)
        .map(|r| {
            let mut worst: f64 = 0.0;
            for &n in client_sizes {
                let steps = plan.total_steps(r, n, num_layers, Some(dp));
                if steps == 0 {
                    continue;
                }
                let q = (plan.batch_size as f64 / n as f64).min(1.0);
                let spend = accountant::compute_epsilon(q, dp.noise_multiplier, steps, dp.delta, &DEFAULT_ORDERS)
                    .map_err(|e| Error::config(e.to_string()))?;
                worst = worst.max(spend.epsilon);
            }
            Ok(worst)
        })
        .collect()
}

/// Runs one arm: a server and one client thread per partition in-process.
pub fn run_arm(config: &ExperimentConfig, prepared: &Prepared, arm: &Arm) -> Result<ArmResult> {
    let initial = prepared.initial_model(arm.tl_enabled);
    let server_config = config.server_config(arm.tl_enabled, arm.dp);
    let clients = prepared.clients(config, arm.tl_enabled);
    let sizes: Vec<usize> = clients.iter().map(|(_, d)| d.train.len()).collect();
    let (report, _) = server::run_local(&server_config, initial, &prepared.eval, clients)?;
    let epsilon = epsilon_by_round(&config.plan, config.rounds, arm.dp.as_ref(), &sizes, initial.num_layers())?;
    Ok(ArmResult {
        arm: arm.clone(),
        report,
        epsilon,
    })
}

/// CSV with columns `arm,round,global_accuracy,epsilon`.
pub fn write_accuracy_csv<W: Write>(results: &[ArmResult], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    out.write_record(["arm", "round", "global_accuracy", "epsilon"])
        .map_err(csv_err)?;
    for res in results {
        for rec in &res.report.rounds {
            let eps = res.epsilon.get(rec.round as usize - 1).copied().unwrap_or(f64::INFINITY);
            out.write_record([
                res.arm.name.clone(),
                rec.round.to_string(),
                format!("{:.6}", rec.global_accuracy),
                format_epsilon(eps),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn format_epsilon(eps: f64) -> String {
    if eps.is_finite() {
        format!("{eps:.6}")
    } else {
        "inf".into()
    }
}
