//! TOML run configuration.
//!
//! Every section and key is optional; missing values take the defaults below.
//! Unknown keys are rejected. The seed is not part of the file: it comes from
//! the command line so that one file can be replayed under many seeds.

use serde::{Deserialize, Serialize};

use crate::diffusion::{NetConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::experiments::target::ToyTarget;
use crate::experiments::train::{AlignConfig, IterateConfig, PretrainConfig};
use crate::flow_sde::{DriftForm, EtaTrainConfig, SdeConfig};
use crate::losses::{EvalPoint, LossConfig, Method, WeightPath};
use crate::weights::ClipConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub method: String,
    pub loss: LossSection,
    pub schedule: ScheduleSection,
    pub net: NetSection,
    pub pretrain: PretrainSection,
    pub pairs: PairsSection,
    pub align: AlignSection,
    pub iterate: IterateSection,
    pub diagnose: DiagnoseSection,
    pub sde: SdeSection,
    pub target: ToyTarget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// Defaults to the method's own value when absent.
    pub beta: Option<f64>,
    pub epsilon: f64,
    pub detach_weight: bool,
    pub mask_threshold: Option<f64>,
    pub window: Option<[usize; 2]>,
    /// `winner`, `loser` or `pair-max`.
    pub weight_path: String,
    /// `sample` or `mean`.
    pub eval_point: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    pub hidden: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairsSection {
    pub n: usize,
    pub unlike: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub diagnostics_every: usize,
    pub density_windows: Vec<[usize; 2]>,
    pub density_pairs: usize,
    pub eval_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterateSection {
    pub rounds: usize,
    pub pairs_per_round: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSection {
    pub bins: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdeSection {
    pub epsilon: f64,
    pub n_steps: usize,
    /// `printed`, `printed-beta` or `interpolant`.
    pub drift: String,
    /// `linear` or `trig`.
    pub interpolant: String,
    pub paths: usize,
    pub trace_paths: usize,
    /// `gaussian` (closed-form denoiser, N(0, I) data) or `target`
    /// (denoiser network trained on the toy target).
    pub data: String,
    pub train_steps: usize,
    pub hidden: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            method: "sdpo".into(),
            loss: LossSection::default(),
            schedule: ScheduleSection::default(),
            net: NetSection::default(),
            pretrain: PretrainSection::default(),
            pairs: PairsSection::default(),
            align: AlignSection::default(),
            iterate: IterateSection::default(),
            diagnose: DiagnoseSection::default(),
            sde: SdeSection::default(),
            target: ToyTarget::default(),
        }
    }
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            beta: None,
            epsilon: ClipConfig::default().epsilon,
            detach_weight: true,
            mask_threshold: None,
            window: None,
            weight_path: "winner".into(),
            eval_point: "sample".into(),
        }
    }
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl Default for NetSection {
    fn default() -> Self {
        let n = NetConfig::default();
        Self {
            hidden: n.hidden,
            depth: n.depth,
            time_embed_dim: n.time_embed_dim,
        }
    }
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            steps: p.steps,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
        }
    }
}

impl Default for PairsSection {
    fn default() -> Self {
        Self { n: 10_000, unlike: false }
    }
}

impl Default for AlignSection {
    fn default() -> Self {
        let a = AlignConfig::new(Method::Sdpo);
        Self {
            steps: a.steps,
            batch_size: a.batch_size,
            learning_rate: a.learning_rate,
            diagnostics_every: a.diagnostics_every,
            density_windows: a.density_windows.iter().map(|&(lo, hi)| [lo, hi]).collect(),
            density_pairs: a.density_pairs,
            eval_samples: 256,
        }
    }
}

impl Default for IterateSection {
    fn default() -> Self {
        let i = IterateConfig::default();
        Self {
            rounds: i.rounds,
            pairs_per_round: i.pairs_per_round,
            epochs: i.epochs,
        }
    }
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self { bins: 10, samples: 512 }
    }
}

impl Default for SdeSection {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            n_steps: SdeConfig::default().n_steps,
            drift: DriftForm::default().name().into(),
            interpolant: "linear".into(),
            paths: 2000,
            trace_paths: 16,
            data: "gaussian".into(),
            train_steps: EtaTrainConfig::default().steps,
            hidden: 32,
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be > 0, got {v}")))
    }
}

fn at_least(field: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be >= {min}, got {v}")))
    }
}

impl RunConfig {
    /// Parses and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().replace('\n', " ");
            let field = unknown_field(&msg).unwrap_or_else(|| "toml".into());
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Field-level checks; the error names the offending key.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        let method = self.method()?;
        self.schedule()?;
        self.loss_config(method)?.validate(self.schedule.steps)?;
        self.net_config()?.validate().map_err(|e| Error::config("net", e.to_string()))?;
        self.target.validate()?;

        positive("pretrain.learning_rate", self.pretrain.learning_rate)?;
        at_least("pretrain.batch_size", self.pretrain.batch_size, 1)?;
        at_least("pairs.n", self.pairs.n, 1)?;
        positive("align.learning_rate", self.align.learning_rate)?;
        at_least("align.batch_size", self.align.batch_size, 1)?;
        at_least("align.density_pairs", self.align.density_pairs, 1)?;
        at_least("align.eval_samples", self.align.eval_samples, 1)?;
        for w in &self.align.density_windows {
            if !(1 <= w[0] && w[0] < w[1] && w[1] <= self.schedule.steps) {
                return Err(Error::config("align.density_windows", format!("bad window [{}, {}]", w[0], w[1])));
            }
        }
        at_least("iterate.rounds", self.iterate.rounds, 1)?;
        at_least("iterate.pairs_per_round", self.iterate.pairs_per_round, 1)?;
        at_least("iterate.epochs", self.iterate.epochs, 1)?;
        at_least("diagnose.bins", self.diagnose.bins, 2)?;
        at_least("diagnose.samples", self.diagnose.samples, 1)?;
        if self.diagnose.bins > self.schedule.steps - 1 {
            return Err(Error::config("diagnose.bins", "more bins than timesteps"));
        }
        if !(self.sde.epsilon >= 0.0 && self.sde.epsilon.is_finite()) {
            return Err(Error::config("sde.epsilon", format!("must be >= 0, got {}", self.sde.epsilon)));
        }
        at_least("sde.n_steps", self.sde.n_steps, 2)?;
        at_least("sde.paths", self.sde.paths, 1)?;
        at_least("sde.hidden", self.sde.hidden, 1)?;
        self.drift()?;
        match self.sde.interpolant.as_str() {
            "linear" | "trig" => {}
            other => return Err(Error::config("sde.interpolant", format!("expected linear or trig, got `{other}`"))),
        }
        match self.sde.data.as_str() {
            "gaussian" | "target" => {}
            other => return Err(Error::config("sde.data", format!("expected gaussian or target, got `{other}`"))),
        }
        Ok(())
    }

    pub fn method(&self) -> Result<Method> {
        self.method.parse().map_err(|e: Error| Error::config("method", e.to_string()))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::linear(s.steps, s.beta_start, s.beta_end).map_err(|e| Error::config("schedule", e.to_string()))
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        Ok(NetConfig {
            data_dim: self.target.components.first().map_or(0, |c| c.mean.len()),
            hidden: self.net.hidden,
            depth: self.net.depth,
            time_embed_dim: self.net.time_embed_dim,
            n_conditions: self.target.condition_modes.len(),
            steps: self.schedule.steps,
        })
    }

    pub fn loss_config(&self, method: Method) -> Result<LossConfig> {
        let l = &self.loss;
        let mut cfg = LossConfig::for_method(method);
        if let Some(b) = l.beta {
            cfg.beta = b;
        }
        cfg.clip = ClipConfig {
            epsilon: l.epsilon,
            detach_weight: l.detach_weight,
        };
        cfg.hard_mask_threshold = l.mask_threshold;
        cfg.timestep_window = l.window.map(|w| (w[0], w[1]));
        cfg.weight_path = match l.weight_path.as_str() {
            "winner" => WeightPath::Winner,
            "loser" => WeightPath::Loser,
            "pair-max" => WeightPath::PairMax,
            other => {
                return Err(Error::config(
                    "loss.weight_path",
                    format!("expected winner, loser or pair-max, got `{other}`"),
                ))
            }
        };
        cfg.eval_point = match l.eval_point.as_str() {
            "sample" => EvalPoint::Sample,
            "mean" => EvalPoint::Mean,
            other => return Err(Error::config("loss.eval_point", format!("expected sample or mean, got `{other}`"))),
        };
        Ok(cfg)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain.steps,
            batch_size: self.pretrain.batch_size,
            learning_rate: self.pretrain.learning_rate,
        }
    }

    pub fn align_config(&self, method: Method) -> Result<AlignConfig> {
        let a = &self.align;
        Ok(AlignConfig {
            method,
            loss: self.loss_config(method)?,
            steps: a.steps,
            batch_size: a.batch_size,
            learning_rate: a.learning_rate,
            diagnostics_every: a.diagnostics_every,
            density_windows: a.density_windows.iter().map(|w| (w[0], w[1])).collect(),
            density_pairs: a.density_pairs,
        })
    }

    pub fn iterate_config(&self) -> IterateConfig {
        IterateConfig {
            rounds: self.iterate.rounds,
            pairs_per_round: self.iterate.pairs_per_round,
            epochs: self.iterate.epochs,
            eval_samples: self.align.eval_samples,
        }
    }

    pub fn drift(&self) -> Result<DriftForm> {
        self.sde.drift.parse().map_err(|e: Error| Error::config("sde.drift", e.to_string()))
    }

    pub fn sde_config(&self) -> Result<SdeConfig> {
        Ok(SdeConfig {
            n_steps: self.sde.n_steps,
            drift: self.drift()?,
            ..SdeConfig::default()
        })
    }
}

/// Pulls the key name out of serde's "unknown field `x`" messages.
fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(text: &str) -> String {
        match RunConfig::from_toml_str(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.loss.window = Some([400, 700]);
        c.loss.beta = Some(0.2);
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn method_beta_default() {
        let c = RunConfig::from_toml_str("method = \"dpo\"").unwrap();
        assert_eq!(c.loss_config(Method::Dpo).unwrap().beta, 2.0);
        assert_eq!(c.loss_config(Method::Sdpo).unwrap().beta, 0.02);
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of("[loss]\nbeta = -1.0"), "beta");
        assert_eq!(field_of("[loss]\nwindow = [700, 400]"), "window");
        assert_eq!(field_of("[loss]\nepsilon = 1.5"), "epsilon");
        assert_eq!(field_of("method = \"ppo\""), "method");
        assert_eq!(field_of("schema_version = 2"), "schema_version");
        assert_eq!(field_of("bogus = 1"), "bogus");
        assert_eq!(field_of("[align]\nlearning_rate = 0.0"), "align.learning_rate");
        assert_eq!(field_of("[sde]\ndrift = \"sideways\""), "sde.drift");
        assert_eq!(field_of("[loss]\nbeta = \"big\""), "toml");
    }
}
