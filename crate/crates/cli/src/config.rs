//! TOML run configuration. Frequencies are given in MHz, powers in dBm and
//! sizes in MB; everything is converted to SI when a [`Scenario`] or
//! [`SimConfig`] is built.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use fwq::convergence::ConvergenceCoeffs;
use fwq::flsim::{DataSpec, EnergySpec, ModelKind, Precision, SimConfig};
use fwq::harness::{ScenarioTemplate, StrategyKind, SweepKind, SweepSpec};
use fwq::models::{dbm_to_watts, DeviceProfile, GpuProfile, NetworkConfig, RadioProfile, RateLog};
use fwq::solver::{default_q_set, Scenario};

const MHZ: f64 = 1e6;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    /// Root seed; `--seed` overrides it.
    #[serde(default)]
    pub seed: u64,
    pub scenario: Option<ScenarioCfg>,
    pub sweep: Option<SweepCfg>,
    pub simulation: Option<SimulationCfg>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkCfg {
    pub b_max_mhz: f64,
    pub noise_dbm_per_hz: f64,
    /// Uplink payload per device and round.
    pub payload_bits: f64,
    #[serde(default)]
    pub rate_log: RateLog,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffsCfg {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub eps: f64,
    pub m_batch: u32,
    pub s_scale: f64,
}

/// GPU constants; the clock frequencies live with the device or the
/// generator.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuCfg {
    pub p_g0_w: f64,
    pub zeta_mem: f64,
    pub zeta_core: f64,
    pub v_core: f64,
    pub t0_s: f64,
    pub theta_mem: f64,
    pub theta_core: f64,
    pub c1_slope: f64,
    pub c1_intercept: f64,
    pub c2_slope: f64,
    pub c2_intercept: f64,
}

impl GpuCfg {
    fn profile(&self, f_core_mhz: f64, f_mem_mhz: f64) -> GpuProfile<f64> {
        GpuProfile {
            p_g0: self.p_g0_w,
            zeta_mem: self.zeta_mem,
            zeta_core: self.zeta_core,
            v_core: self.v_core,
            f_core: f_core_mhz * MHZ,
            f_mem: f_mem_mhz * MHZ,
            t0: self.t0_s,
            theta_mem: self.theta_mem,
            theta_core: self.theta_core,
            c1_slope: self.c1_slope,
            c1_intercept: self.c1_intercept,
            c2_slope: self.c2_slope,
            c2_intercept: self.c2_intercept,
        }
    }
}

/// Random device population, four capacity groups.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateCfg {
    pub n_devices: usize,
    #[serde(default)]
    pub heterogeneity: f64,
    pub f_core_mhz: Vec<f64>,
    pub f_mem_mhz: Vec<f64>,
    pub tx_power_dbm: Vec<f64>,
    pub path_loss: f64,
    pub min_capacity_mb: f64,
    pub model_size_mb: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceCfg {
    pub id: Option<String>,
    pub pi_weight: f64,
    pub tx_power_dbm: f64,
    pub channel_gain: f64,
    pub f_core_mhz: f64,
    pub f_mem_mhz: f64,
    pub mem_capacity_mb: f64,
    pub model_size_mb: f64,
    /// Overrides `scenario.gpu` for this device.
    pub gpu: Option<GpuCfg>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioCfg {
    pub t_max_s: f64,
    #[serde(default = "default_q_set")]
    pub q_set: Vec<u32>,
    pub network: NetworkCfg,
    pub coeffs: CoeffsCfg,
    pub gpu: Option<GpuCfg>,
    pub generate: Option<GenerateCfg>,
    #[serde(default)]
    pub devices: Vec<DeviceCfg>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCfg {
    pub kind: SweepKind,
    /// Device counts, heterogeneity levels, or total bandwidth in MHz.
    pub values: Vec<f64>,
    pub repeats: usize,
    pub strategies: Option<Vec<StrategyKind>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationCfg {
    pub n_devices: usize,
    pub h_steps: usize,
    pub rounds: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default)]
    pub l2: f64,
    pub q_per_device: Vec<Precision>,
    pub label_skew: usize,
    pub data: DataSpec,
    pub model: ModelKind,
    /// Price rounds with devices from `[scenario]` when it is present.
    #[serde(default = "yes")]
    pub energy: bool,
}

fn yes() -> bool {
    true
}

/// Parses a config, reporting schema errors with the offending field path.
pub fn parse(text: &str) -> Result<ConfigFile> {
    let de = toml::Deserializer::parse(text).context("config is not valid TOML")?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("config schema error at `{path}`: {}", e.into_inner())
    })
}

impl NetworkCfg {
    pub fn to_si(&self) -> NetworkConfig<f64> {
        NetworkConfig {
            b_max: self.b_max_mhz * MHZ,
            n0: dbm_to_watts(self.noise_dbm_per_hz),
            d_g: self.payload_bits,
            rate_log: self.rate_log,
        }
    }
}

impl CoeffsCfg {
    pub fn to_si(&self) -> ConvergenceCoeffs<f64> {
        ConvergenceCoeffs {
            a1: self.a1,
            a2: self.a2,
            a3: self.a3,
            eps: self.eps,
            m_batch: self.m_batch,
            s_scale: self.s_scale,
        }
    }
}

impl ScenarioCfg {
    /// Generator template; needs `[scenario.gpu]` and `[scenario.generate]`.
    pub fn template(&self) -> Result<ScenarioTemplate<f64>> {
        let (Some(gpu), Some(g)) = (&self.gpu, &self.generate) else {
            bail!("scenario.gpu and scenario.generate are required to generate devices");
        };
        let tpl = ScenarioTemplate {
            net: self.network.to_si(),
            coeffs: self.coeffs.to_si(),
            t_max: self.t_max_s,
            q_set: self.q_set.clone(),
            gpu: gpu.profile(g.f_core_mhz.first().copied().unwrap_or(1.0), g.f_mem_mhz.first().copied().unwrap_or(1.0)),
            f_core_choices: g.f_core_mhz.iter().map(|f| f * MHZ).collect(),
            f_mem_choices: g.f_mem_mhz.iter().map(|f| f * MHZ).collect(),
            tx_power_dbm_choices: g.tx_power_dbm.clone(),
            path_loss: g.path_loss,
            min_capacity_mb: g.min_capacity_mb,
            model_size_mb: g.model_size_mb,
        };
        tpl.validate()?;
        Ok(tpl)
    }

    fn explicit_devices(&self) -> Result<Vec<DeviceProfile<f64>>> {
        self.devices
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let gpu = d
                    .gpu
                    .as_ref()
                    .or(self.gpu.as_ref())
                    .with_context(|| format!("scenario.devices[{i}] has no gpu and scenario.gpu is missing"))?;
                Ok(DeviceProfile {
                    id: d.id.clone().unwrap_or_else(|| format!("dev{i}")),
                    pi_weight: d.pi_weight,
                    gpu: gpu.profile(d.f_core_mhz, d.f_mem_mhz),
                    radio: RadioProfile {
                        p_cm: dbm_to_watts(d.tx_power_dbm),
                        h: d.channel_gain,
                    },
                    mem_capacity: d.mem_capacity_mb,
                    model_size: d.model_size_mb,
                })
            })
            .collect()
    }

    /// Devices for `n` participants: generated, or the explicit list.
    pub fn devices(&self, n: Option<usize>, seed: u64) -> Result<Vec<DeviceProfile<f64>>> {
        match (&self.generate, self.devices.is_empty()) {
            (Some(g), true) => {
                let tpl = self.template()?;
                Ok(fwq::harness::gen_devices(&tpl, n.unwrap_or(g.n_devices), g.heterogeneity, seed)?)
            }
            (None, false) => {
                let devs = self.explicit_devices()?;
                if let Some(n) = n.filter(|&n| n != devs.len()) {
                    bail!("{n} devices requested but scenario.devices lists {}", devs.len());
                }
                Ok(devs)
            }
            (Some(_), false) => bail!("give either scenario.generate or scenario.devices, not both"),
            (None, true) => bail!("scenario needs a generate table or a devices list"),
        }
    }

    /// The SI scenario. Structural validation is left to the caller.
    pub fn scenario(&self, seed: u64) -> Result<Scenario<f64>> {
        Ok(Scenario {
            devices: self.devices(None, seed)?,
            net: self.network.to_si(),
            coeffs: self.coeffs.to_si(),
            t_max: self.t_max_s,
            q_set: self.q_set.clone(),
        })
    }
}

impl ConfigFile {
    pub fn scenario_section(&self) -> Result<&ScenarioCfg> {
        self.scenario.as_ref().context("config has no [scenario] section")
    }

    pub fn sweep_spec(&self, seed: u64, strategies: &[StrategyKind]) -> Result<SweepSpec<f64>> {
        let sc = self.scenario_section()?;
        let sw = self.sweep.as_ref().context("config has no [sweep] section")?;
        let g = sc.generate.as_ref().context("sweeps need scenario.generate")?;
        let scale = if sw.kind == SweepKind::Bandwidth { MHZ } else { 1.0 };
        let strategies = if !strategies.is_empty() {
            strategies.to_vec()
        } else {
            sw.strategies.clone().unwrap_or_else(|| StrategyKind::ALL.to_vec())
        };
        let spec = SweepSpec {
            kind: sw.kind,
            values: sw.values.iter().map(|v| v * scale).collect(),
            repeats: sw.repeats,
            base: sc.template()?,
            n_devices: g.n_devices,
            heterogeneity: g.heterogeneity,
            seed,
            strategies,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Simulator config. Relative IDX paths resolve against `base_dir`.
    pub fn sim_config(&self, seed: u64, base_dir: &Path) -> Result<SimConfig<f64>> {
        let s = self.simulation.as_ref().context("config has no [simulation] section")?;
        let data = match &s.data {
            DataSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit,
            } => {
                let p = |f: &String| base_dir.join(f).to_string_lossy().into_owned();
                DataSpec::Idx {
                    train_images: p(train_images),
                    train_labels: p(train_labels),
                    test_images: p(test_images),
                    test_labels: p(test_labels),
                    limit: *limit,
                }
            }
            d => d.clone(),
        };
        let energy = match (&self.scenario, s.energy) {
            (Some(sc), true) => Some(EnergySpec {
                devices: sc.devices(Some(s.n_devices), seed)?,
                net: sc.network.to_si(),
            }),
            _ => None,
        };
        let cfg = SimConfig {
            n_devices: s.n_devices,
            h_steps: s.h_steps,
            rounds: s.rounds,
            batch: s.batch,
            lr: s.lr,
            l2: s.l2,
            q_per_device: s.q_per_device.clone(),
            seed,
            data,
            label_skew: s.label_skew,
            model: s.model,
            energy,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEFAULT: &str = include_str!("../configs/default.toml");

    #[test]
    fn default_config_matches_reference_template() {
        let cfg = parse(DEFAULT).unwrap();
        let sc = cfg.scenario_section().unwrap();
        let tpl = ScenarioTemplate::<f64>::reference();
        for seed in [0, 7] {
            assert_eq!(sc.scenario(seed).unwrap(), tpl.scenario(10, 0.0, seed).unwrap());
        }
    }

    #[test]
    fn unit_conversions() {
        let net = NetworkCfg {
            b_max_mhz: 80.0,
            noise_dbm_per_hz: -174.0,
            payload_bits: 1e6,
            rate_log: RateLog::Ln,
        }
        .to_si();
        assert_eq!(net.b_max, 80e6);
        assert!((net.n0 - 10f64.powf(-20.4)).abs() <= 1e-12 * net.n0);
    }

    #[test]
    fn schema_errors_name_the_field() {
        let text = DEFAULT.replace("b_max_mhz = 100.0\n", "");
        let err = parse(&text).unwrap_err().to_string();
        assert!(err.contains("b_max_mhz") && err.contains("scenario.network"), "{err}");
        let text = DEFAULT.replace("t_max_s", "t_max_seconds");
        assert!(parse(&text).unwrap_err().to_string().contains("t_max_seconds"));
    }

    #[test]
    fn bandwidth_sweep_values_are_converted() {
        let cfg = parse(DEFAULT).unwrap();
        let spec = cfg.sweep_spec(3, &[]).unwrap();
        assert_eq!(spec.kind, SweepKind::Bandwidth);
        assert_eq!(spec.values, vec![80e6, 90e6, 98e6]);
        assert_eq!(spec.seed, 3);
        assert_eq!(spec.strategies, StrategyKind::ALL.to_vec());
        let only = cfg.sweep_spec(3, &[StrategyKind::Fwq]).unwrap();
        assert_eq!(only.strategies, vec![StrategyKind::Fwq]);
    }

    #[test]
    fn generate_and_devices_are_exclusive() {
        let mut cfg = parse(DEFAULT).unwrap();
        let sc = cfg.scenario.as_mut().unwrap();
        sc.generate = None;
        assert!(sc.scenario(0).is_err());
    }
}
