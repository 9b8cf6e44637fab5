use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::client::{ClientConfig, PrivacyConfig};
use crate::data::{FilterConfig, SplitMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Venue embedding only, no time-of-week term.
    pub no_semantic_encoding: bool,
    /// Global signal replaced by zeros.
    pub no_outer_product: bool,
    /// σ forced to 0.
    pub no_dp_noise: bool,
    /// Projection is a single linear map.
    pub no_projection_mlp: bool,
    /// Projected signal never added to the hidden states.
    pub no_llm_injection: bool,
}

impl AblationConfig {
    pub const NAMES: [&'static str; 5] = [
        "no_semantic_encoding",
        "no_outer_product",
        "no_dp_noise",
        "no_projection_mlp",
        "no_llm_injection",
    ];

    pub fn is_full_model(&self) -> bool {
        *self == Self::default()
    }

    pub fn set(&mut self, name: &str) -> Result<()> {
        match name.trim() {
            "no_semantic_encoding" => self.no_semantic_encoding = true,
            "no_outer_product" => self.no_outer_product = true,
            "no_dp_noise" => self.no_dp_noise = true,
            "no_projection_mlp" => self.no_projection_mlp = true,
            "no_llm_injection" => self.no_llm_injection = true,
            "" | "none" | "full" => {}
            other => return Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
        Ok(())
    }

    /// Comma-separated flag names; empty, `none` or `full` mean no flags.
    pub fn parse_list(s: &str) -> Result<Self> {
        let mut a = Self::default();
        for name in s.split(',') {
            a.set(name)?;
        }
        Ok(a)
    }

    pub fn label(&self) -> String {
        let on: Vec<&str> = Self::NAMES
            .iter()
            .zip([
                self.no_semantic_encoding,
                self.no_outer_product,
                self.no_dp_noise,
                self.no_projection_mlp,
                self.no_llm_injection,
            ])
            .filter(|(_, f)| *f)
            .map(|(n, _)| *n)
            .collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// `synth` or a path to a check-in file.
    pub source: String,
    pub format: String,
    pub synth_users: usize,
    pub synth_venues: usize,
    pub synth_days: i64,
    pub min_user_checkins: usize,
    pub min_venue_visits: usize,
    pub max_window_days: i64,
    /// Collapse same-venue repeats within this many seconds; 0 keeps all.
    pub collapse_secs: i64,
    pub split: SplitMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub rounds: u32,
    /// 0 means every client.
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub weighted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub d_llm: usize,
    pub layers: usize,
    pub heads: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub d1: usize,
    /// 1-based injection block; 0 means the middle of the stack.
    pub lk: usize,
    pub scale: f64,
    pub adapter_lr: f64,
    pub adapter_epochs: usize,
    pub adapter_batch: usize,
}

/// Everything a run depends on. Serializes to flat `key = value` text whose
/// SHA-256 is the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub client: ClientConfig,
    pub privacy: PrivacyConfig,
    pub fed: FedConfig,
    pub llm: LlmConfig,
    pub ablation: AblationConfig,
    pub k_max: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig {
                source: "synth".into(),
                format: "canonical".into(),
                synth_users: 200,
                synth_venues: 50,
                synth_days: 120,
                min_user_checkins: 10,
                min_venue_visits: 10,
                max_window_days: 120,
                collapse_secs: 0,
                split: SplitMode::ByUser,
            },
            client: ClientConfig::default(),
            privacy: PrivacyConfig::default(),
            fed: FedConfig {
                rounds: 5,
                clients_per_round: 0,
                local_epochs: 1,
                weighted: false,
            },
            llm: LlmConfig {
                d_llm: 256,
                layers: 4,
                heads: 4,
                pretrain_epochs: 4,
                pretrain_lr: 1e-3,
                pretrain_batch: 32,
                d1: 512,
                lk: 0,
                scale: 1.0,
                adapter_lr: 1e-4,
                adapter_epochs: 10,
                adapter_batch: 64,
            },
            ablation: AblationConfig::default(),
            k_max: 20,
        }
    }
}

impl ExperimentConfig {
    /// Scaled-down shapes for the 200-user synthetic corpus that run in
    /// minutes on one core.
    pub fn reference(seed: u64) -> Self {
        let mut c = Self {
            seed,
            ..Self::default()
        };
        c.client = ClientConfig {
            d: 16,
            hidden: 32,
            heads: 4,
            layers: 1,
            lr: 1e-3,
            batch: 64,
            window: 32,
            stride: 8,
            use_time: true,
        };
        c.fed.rounds = 4;
        c.fed.clients_per_round = 40;
        c.llm = LlmConfig {
            d_llm: 64,
            layers: 4,
            heads: 4,
            pretrain_epochs: 4,
            pretrain_lr: 2e-3,
            pretrain_batch: 16,
            d1: 128,
            lk: 0,
            scale: 1.0,
            adapter_lr: 1e-3,
            adapter_epochs: 8,
            adapter_batch: 16,
        };
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.client.validate()?;
        self.privacy.validate()?;
        self.filter().validate()?;
        if self.fed.rounds == 0 || self.fed.local_epochs == 0 {
            return Err(Error::Config("rounds and local epochs must be ≥ 1".into()));
        }
        if self.llm.adapter_epochs == 0 || self.llm.adapter_batch == 0 || self.llm.pretrain_batch == 0 {
            return Err(Error::Config("adapter epochs and batch sizes must be ≥ 1".into()));
        }
        if self.llm.lk > self.llm.layers {
            return Err(Error::Config(format!(
                "lk = {} exceeds {} layers",
                self.llm.lk, self.llm.layers
            )));
        }
        if self.k_max < 20 {
            return Err(Error::Config("k_max must be ≥ 20 to report acc@20".into()));
        }
        Ok(())
    }

    pub fn filter(&self) -> FilterConfig {
        FilterConfig {
            min_user_checkins: self.data.min_user_checkins,
            min_venue_visits: self.data.min_venue_visits,
            max_window_days: self.data.max_window_days,
        }
    }

    /// The privacy settings after ablation flags.
    pub fn effective_privacy(&self) -> PrivacyConfig {
        let mut p = self.privacy;
        if self.ablation.no_dp_noise {
            p.sigma = 0.0;
        }
        p
    }

    pub fn injection_layer(&self) -> usize {
        if self.llm.lk == 0 {
            (self.llm.layers / 2).max(1)
        } else {
            self.llm.lk
        }
    }

    fn flat(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self)?, &mut out);
        Ok(out)
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        for (k, v) in self.flat()? {
            s.push_str(&k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        Ok(s)
    }

    /// Hex SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_text()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_text_over(text, Self::default())
    }

    pub fn from_text_over(text: &str, base: Self) -> Result<Self> {
        let mut value = serde_json::to_value(base)?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            set_path(&mut value, k.trim(), v.trim()).map_err(|msg| Error::Parse { line: i + 1, msg })?;
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        *self = Self::from_text_over(&format!("{key} = {value}"), self.clone())?;
        Ok(())
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text().map_err(|_| fmt::Error)?)
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::from_text(s)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> std::result::Result<(), String> {
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(m) => m.get_mut(part).ok_or_else(|| format!("unknown key {key:?}"))?,
            _ => return Err(format!("unknown key {key:?}")),
        };
    }
    *cur = match cur {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| format!("{key}: expected true/false, got {raw:?}"))?),
        Value::Number(n) if n.is_f64() => {
            let x: f64 = raw.parse().map_err(|_| format!("{key}: expected a number, got {raw:?}"))?;
            serde_json::Number::from_f64(x)
                .map(Value::Number)
                .ok_or_else(|| format!("{key}: non-finite value"))?
        }
        Value::Number(_) => {
            if let Ok(u) = raw.parse::<u64>() {
                Value::from(u)
            } else if let Ok(i) = raw.parse::<i64>() {
                Value::from(i)
            } else if let Ok(x) = raw.parse::<f64>() {
                // Float fields whose default happens to be integral.
                serde_json::Number::from_f64(x)
                    .map(Value::Number)
                    .ok_or_else(|| format!("{key}: non-finite value"))?
            } else {
                return Err(format!("{key}: expected a number, got {raw:?}"));
            }
        }
        Value::String(_) => Value::String(raw.to_string()),
        Value::Object(_) | Value::Array(_) | Value::Null => return Err(format!("{key} is not a leaf key")),
    };
    Ok(())
}
