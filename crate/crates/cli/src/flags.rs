use std::path::PathBuf;

use clap::Args;
use cotrec::{Error, TrainConfig};

/// Configuration sources, lowest precedence first: defaults, the config file,
/// the per-field flags, then `--set`.
#[derive(Args, Debug, Default)]
pub struct ConfigFlags {
    /// `key = value` config file.
    #[arg(long, env = "COTREC_CONFIG")]
    pub config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Embedding size.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight decay.
    #[arg(long)]
    pub l2: Option<f64>,
    /// Graph convolution layers.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Contrastive temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Pseudo-labels per session and view.
    #[arg(long)]
    pub k: Option<usize>,
    /// Co-training loss weight.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Divergence loss weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Perturbation norm; defaults from the dataset profile.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// `diginetica` selects epsilon 0.5, anything else 0.2.
    #[arg(long)]
    pub dataset_profile: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Session-graph neighbours kept per row.
    #[arg(long)]
    pub keep_top: Option<usize>,
    /// Latest fraction of training sessions held out for model selection.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// `gaussian` or `uniform`.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub init_scale: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_ssl: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_divergence: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_position: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_attention: Option<bool>,
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

impl ConfigFlags {
    fn field_flags(&self) -> Vec<(&'static str, String)> {
        let fields = [
            ("d", opt(&self.d)),
            ("batch_size", opt(&self.batch_size)),
            ("lr", opt(&self.lr)),
            ("l2", opt(&self.l2)),
            ("layers", opt(&self.layers)),
            ("tau", opt(&self.tau)),
            ("k", opt(&self.k)),
            ("beta", opt(&self.beta)),
            ("alpha", opt(&self.alpha)),
            ("epsilon", opt(&self.epsilon)),
            ("dataset_profile", opt(&self.dataset_profile)),
            ("epochs", opt(&self.epochs)),
            ("seed", opt(&self.seed)),
            ("keep_top", opt(&self.keep_top)),
            ("val_fraction", opt(&self.val_fraction)),
            ("init", opt(&self.init)),
            ("init_scale", opt(&self.init_scale)),
            ("no_ssl", opt(&self.no_ssl)),
            ("no_divergence", opt(&self.no_divergence)),
            ("no_position", opt(&self.no_position)),
            ("no_attention", opt(&self.no_attention)),
        ];
        fields.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))).collect()
    }

    /// Builds and validates the configuration. All problems are reported at once.
    pub fn resolve(&self) -> Result<TrainConfig, Error> {
        let mut config = TrainConfig::default();
        let mut errors = Vec::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::InvalidArgument(format!("config file {}: {e}", path.display())))?;
            if let Err(Error::Config(e)) = config.apply_text(&text) {
                errors.extend(e.into_iter().map(|m| format!("{}: {m}", path.display())));
            }
        }
        let fields = self.field_flags();
        if let Err(Error::Config(e)) = config.apply_overrides(fields.iter().map(|(k, v)| (*k, v.as_str()))) {
            errors.extend(e);
        }
        let mut pairs = Vec::new();
        for o in &self.overrides {
            match o.split_once('=') {
                Some((k, v)) => pairs.push((k, v)),
                None => errors.push(format!("--set `{o}`: expected KEY=VALUE")),
            }
        }
        if let Err(Error::Config(e)) = config.apply_overrides(pairs) {
            errors.extend(e);
        }
        if let Err(Error::Config(e)) = config.validate() {
            errors.extend(e);
        }
        if errors.is_empty() {
            Ok(config)
        } else {
            Err(Error::Config(errors))
        }
    }
}
