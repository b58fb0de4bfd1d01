//! Training hyperparameters and the `key = value` config file format.
//!
//! ```text
//! # comments start with '#'
//! d = 100
//! layers = 3
//! beta = 0.05
//! dataset_profile = diginetica
//! ```
//!
//! Keys match the field names of [`TrainConfig`]; `L` and `K` are accepted as
//! aliases of `layers` and `k`.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// `N(0, init_scale²)`.
    Gaussian,
    /// `U(−init_scale, init_scale)`.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    /// Embedding size.
    pub d: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight decay applied to every parameter.
    pub l2: f64,
    /// Graph convolution layers in both encoders.
    pub layers: usize,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Pseudo-labels per session and view (positives and negatives each).
    pub k: usize,
    /// Weight of the co-training loss.
    pub beta: f64,
    /// Weight of the divergence constraint.
    pub alpha: f64,
    /// Adversarial perturbation norm; defaults from `dataset_profile`.
    pub epsilon: Option<f64>,
    pub dataset_profile: String,
    pub epochs: usize,
    pub seed: u64,
    /// Neighbours kept per session-graph row.
    pub keep_top: usize,
    /// Latest fraction of training sessions held out for checkpoint selection.
    pub val_fraction: f64,
    pub init: InitScheme,
    pub init_scale: f64,
    pub no_ssl: bool,
    pub no_divergence: bool,
    pub no_position: bool,
    pub no_attention: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 100,
            batch_size: 100,
            lr: 0.001,
            l2: 1e-5,
            layers: 3,
            tau: 0.2,
            k: 10,
            beta: 0.05,
            alpha: 0.005,
            epsilon: None,
            dataset_profile: "default".into(),
            epochs: 10,
            seed: 0,
            keep_top: 20,
            val_fraction: 0.1,
            init: InitScheme::Gaussian,
            init_scale: 0.1,
            no_ssl: false,
            no_divergence: false,
            no_position: false,
            no_attention: false,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "d",
    "batch_size",
    "lr",
    "l2",
    "layers",
    "tau",
    "k",
    "beta",
    "alpha",
    "epsilon",
    "dataset_profile",
    "epochs",
    "seed",
    "keep_top",
    "val_fraction",
    "init",
    "init_scale",
    "no_ssl",
    "no_divergence",
    "no_position",
    "no_attention",
];

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}`: cannot parse `{value}`"))
}

impl TrainConfig {
    /// Perturbation norm: explicit `epsilon`, else 0.5 for the Diginetica
    /// profile and 0.2 otherwise.
    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or_else(|| {
            if self.dataset_profile.eq_ignore_ascii_case("diginetica") {
                0.5
            } else {
                0.2
            }
        })
    }

    /// Whether the session view is needed at all.
    pub fn uses_session_view(&self) -> bool {
        !(self.no_ssl && self.no_divergence)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let value = value.trim();
        match key.trim() {
            "d" => self.d = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "l2" => self.l2 = parse(key, value)?,
            "layers" | "L" => self.layers = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "k" | "K" => self.k = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "epsilon" => {
                self.epsilon = if value.is_empty() || value == "auto" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "dataset_profile" => self.dataset_profile = value.to_string(),
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "keep_top" => self.keep_top = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "init" => {
                self.init = match value {
                    "gaussian" => InitScheme::Gaussian,
                    "uniform" => InitScheme::Uniform,
                    _ => return Err(format!("`init`: expected gaussian or uniform, got `{value}`")),
                }
            }
            "init_scale" => self.init_scale = parse(key, value)?,
            "no_ssl" => self.no_ssl = parse(key, value)?,
            "no_divergence" => self.no_divergence = parse(key, value)?,
            "no_position" => self.no_position = parse(key, value)?,
            "no_attention" => self.no_attention = parse(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Applies `key = value` lines; every bad line is reported.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut errors = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k, v) {
                        errors.push(format!("line {}: {e}", n + 1));
                    }
                }
                None => errors.push(format!("line {}: expected `key = value`", n + 1)),
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn apply_overrides<'a>(
        &mut self,
        overrides: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<()> {
        let errors: Vec<String> = overrides
            .into_iter()
            .filter_map(|(k, v)| self.set(k, v).err())
            .collect();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Checks every constraint and reports all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut e = Vec::new();
        let positive_int = [
            ("d", self.d),
            ("batch_size", self.batch_size),
            ("k", self.k),
            ("keep_top", self.keep_top),
        ];
        for (name, v) in positive_int {
            if v == 0 {
                e.push(format!("`{name}` must be positive"));
            }
        }
        let positive = [
            ("lr", self.lr),
            ("tau", self.tau),
            ("init_scale", self.init_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                e.push(format!("`{name}` must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("l2", self.l2),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("epsilon", self.epsilon()),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                e.push(format!("`{name}` must be non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            e.push(format!(
                "`val_fraction` must be in [0, 1), got {}",
                self.val_fraction
            ));
        }
        if e.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(e))
        }
    }
}

impl fmt::Display for TrainConfig {
    /// The resolved configuration in config-file syntax.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "d = {}", self.d)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "lr = {}", self.lr)?;
        writeln!(f, "l2 = {}", self.l2)?;
        writeln!(f, "layers = {}", self.layers)?;
        writeln!(f, "tau = {}", self.tau)?;
        writeln!(f, "k = {}", self.k)?;
        writeln!(f, "beta = {}", self.beta)?;
        writeln!(f, "alpha = {}", self.alpha)?;
        writeln!(f, "epsilon = {}", self.epsilon())?;
        writeln!(f, "dataset_profile = {}", self.dataset_profile)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "keep_top = {}", self.keep_top)?;
        writeln!(f, "val_fraction = {}", self.val_fraction)?;
        let init = match self.init {
            InitScheme::Gaussian => "gaussian",
            InitScheme::Uniform => "uniform",
        };
        writeln!(f, "init = {init}")?;
        writeln!(f, "init_scale = {}", self.init_scale)?;
        writeln!(f, "no_ssl = {}", self.no_ssl)?;
        writeln!(f, "no_divergence = {}", self.no_divergence)?;
        writeln!(f, "no_position = {}", self.no_position)?;
        write!(f, "no_attention = {}", self.no_attention)
    }
}

/// Ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Variant {
    /// Item view only: no session view, no co-training, no divergence.
    Base,
    /// `Base` without reversed position embeddings.
    BaseNoPosition,
    /// `Base` with mean pooling instead of soft attention.
    BaseNoAttention,
    /// Co-training without the divergence constraint.
    NoDivergence,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Base,
        Variant::BaseNoPosition,
        Variant::BaseNoAttention,
        Variant::NoDivergence,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::BaseNoPosition => "no_position",
            Variant::BaseNoAttention => "no_attention",
            Variant::NoDivergence => "no_divergence",
            Variant::Full => "full",
        }
    }

    /// Returns `config` with this variant's switches applied.
    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        c.no_ssl = false;
        c.no_divergence = false;
        c.no_position = false;
        c.no_attention = false;
        match self {
            Variant::Base => {
                c.no_ssl = true;
                c.no_divergence = true;
            }
            Variant::BaseNoPosition => {
                c.no_ssl = true;
                c.no_divergence = true;
                c.no_position = true;
            }
            Variant::BaseNoAttention => {
                c.no_ssl = true;
                c.no_divergence = true;
                c.no_attention = true;
            }
            Variant::NoDivergence => c.no_divergence = true,
            Variant::Full => {}
        }
        c
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "base" | "cotrec-base" => Ok(Variant::Base),
            "no_position" | "base-np" => Ok(Variant::BaseNoPosition),
            "no_attention" | "base-na" => Ok(Variant::BaseNoAttention),
            "no_divergence" | "cotrec-nd" => Ok(Variant::NoDivergence),
            "full" | "cotrec" => Ok(Variant::Full),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant `{other}` (expected base, no_position, no_attention, no_divergence or full)"
            ))),
        }
    }
}
