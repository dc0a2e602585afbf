//! `key = value` config files with `#` comments. Flags override file values;
//! unknown keys are rejected. The resolved configuration is echoed into the
//! output directory for provenance.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use memgcn::data::SynthSpec;
use memgcn::error::{Error, Result};
use memgcn::training::TrainConfig;

/// Every key a config file may contain (union of train and synth settings).
const KNOWN_KEYS: &[&str] = &[
    // training
    "batch_size",
    "learning_rate",
    "gamma",
    "order",
    "f_out",
    "t",
    "d",
    "hops",
    "matching",
    "activation",
    "mask_padding",
    "epochs",
    "patience",
    "seed",
    "k_folds",
    "val_fraction",
    "h_head",
    "threads",
    "ablate_memory",
    "tie_hop_maps",
    "normalize_connectivity",
    "balanced_batches",
    "mlp_hidden",
    // synthetic cohort
    "n_roi",
    "n_case",
    "n_control",
    "conn_signal",
    "seq_signal",
    "noise_sd",
    "d_features",
];

#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    values: HashMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut values = HashMap::new();
        let Some(path) = path else {
            return Ok(FileConfig { values });
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::validation(format!(
                    "{}: line {}: expected `key = value`, got `{raw}`",
                    path.display(),
                    line_no + 1
                )));
            };
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::validation(format!(
                    "{}: line {}: unknown config key `{key}`",
                    path.display(),
                    line_no + 1
                )));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                Error::validation(format!("config key `{key}`: cannot parse `{raw}`: {e}"))
            }),
        }
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        self.get::<bool>(key)
    }

    pub fn get_usize_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|v| {
                    v.trim().parse::<usize>().map_err(|e| {
                        Error::validation(format!("config key `{key}`: bad entry `{v}`: {e}"))
                    })
                })
                .collect::<Result<Vec<usize>>>()
                .map(Some),
        }
    }
}

macro_rules! merge {
    ($target:expr, $file:expr, $flag:expr, $key:literal) => {
        if let Some(v) = $file.get($key)? {
            $target = v;
        }
        if let Some(v) = $flag {
            $target = v;
        }
    };
}

/// Flag-level overrides for [`TrainConfig`]; `None` means "not given".
#[derive(Debug, Default, Clone, clap::Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// L2-regularization weight.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Chebyshev polynomial order.
    #[arg(long)]
    pub order: Option<usize>,
    #[arg(long)]
    pub f_out: Option<usize>,
    /// Memory slots per sequence.
    #[arg(long)]
    pub t: Option<usize>,
    /// Embedding dimension (must equal f_out).
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub hops: Option<usize>,
    /// inner | bilinear
    #[arg(long)]
    pub matching: Option<memgcn::matching::MatchKind>,
    /// relu | none
    #[arg(long)]
    pub activation: Option<memgcn::model::Activation>,
    #[arg(long)]
    pub mask_padding: Option<bool>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k_folds: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub h_head: Option<usize>,
    /// Worker threads (results are identical for any value).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Freeze memory embeddings at zero (pure-GCN baseline).
    #[arg(long)]
    pub ablate_memory: Option<bool>,
    #[arg(long)]
    pub tie_hop_maps: Option<bool>,
    #[arg(long)]
    pub normalize_connectivity: Option<bool>,
    #[arg(long)]
    pub balanced_batches: Option<bool>,
}

impl TrainOverrides {
    pub fn resolve(&self, file: &FileConfig) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        merge!(c.batch_size, file, self.batch_size, "batch_size");
        merge!(c.learning_rate, file, self.learning_rate, "learning_rate");
        merge!(c.gamma, file, self.gamma, "gamma");
        merge!(c.order, file, self.order, "order");
        merge!(c.f_out, file, self.f_out, "f_out");
        merge!(c.t, file, self.t, "t");
        merge!(c.d, file, self.d, "d");
        merge!(c.hops, file, self.hops, "hops");
        merge!(c.matching, file, self.matching, "matching");
        merge!(c.activation, file, self.activation, "activation");
        merge!(c.epochs, file, self.epochs, "epochs");
        merge!(c.patience, file, self.patience, "patience");
        merge!(c.seed, file, self.seed, "seed");
        merge!(c.k_folds, file, self.k_folds, "k_folds");
        merge!(c.val_fraction, file, self.val_fraction, "val_fraction");
        merge!(c.h_head, file, self.h_head, "h_head");
        merge!(c.threads, file, self.threads, "threads");
        if let Some(v) = file.get_bool("mask_padding")? {
            c.mask_padding = v;
        }
        if let Some(v) = self.mask_padding {
            c.mask_padding = v;
        }
        if let Some(v) = file.get_bool("ablate_memory")? {
            c.ablate_memory = v;
        }
        if let Some(v) = self.ablate_memory {
            c.ablate_memory = v;
        }
        if let Some(v) = file.get_bool("tie_hop_maps")? {
            c.tie_hop_maps = v;
        }
        if let Some(v) = self.tie_hop_maps {
            c.tie_hop_maps = v;
        }
        if let Some(v) = file.get_bool("normalize_connectivity")? {
            c.normalize_connectivity = v;
        }
        if let Some(v) = self.normalize_connectivity {
            c.normalize_connectivity = v;
        }
        if let Some(v) = file.get_bool("balanced_batches")? {
            c.balanced_batches = v;
        }
        if let Some(v) = self.balanced_batches {
            c.balanced_batches = v;
        }
        if let Some(v) = file.get_usize_list("mlp_hidden")? {
            c.mlp_hidden = v;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Flag-level overrides for [`SynthSpec`].
#[derive(Debug, Default, Clone, clap::Args)]
pub struct SynthOverrides {
    #[arg(long)]
    pub n_roi: Option<usize>,
    #[arg(long)]
    pub n_case: Option<usize>,
    #[arg(long)]
    pub n_control: Option<usize>,
    #[arg(long)]
    pub conn_signal: Option<f64>,
    #[arg(long)]
    pub seq_signal: Option<f64>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    /// Memory slots per sequence.
    #[arg(long)]
    pub t: Option<usize>,
    /// Binary feature dimension.
    #[arg(long)]
    pub d_features: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SynthOverrides {
    pub fn resolve(&self, file: &FileConfig) -> Result<SynthSpec> {
        let mut s = SynthSpec {
            n_roi: 30,
            n_case: 30,
            n_control: 30,
            conn_signal: 1.0,
            seq_signal: 0.5,
            noise_sd: 0.1,
            t: 12,
            d_features: 32,
            seed: 0,
        };
        merge!(s.n_roi, file, self.n_roi, "n_roi");
        merge!(s.n_case, file, self.n_case, "n_case");
        merge!(s.n_control, file, self.n_control, "n_control");
        merge!(s.conn_signal, file, self.conn_signal, "conn_signal");
        merge!(s.seq_signal, file, self.seq_signal, "seq_signal");
        merge!(s.noise_sd, file, self.noise_sd, "noise_sd");
        merge!(s.t, file, self.t, "t");
        merge!(s.d_features, file, self.d_features, "d_features");
        merge!(s.seed, file, self.seed, "seed");
        s.validate()?;
        Ok(s)
    }
}

/// Echo the resolved settings as `key = value` lines.
pub fn write_effective_config(path: &Path, sections: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (key, value) in sections {
        text.push_str(&format!("{key} = {value}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn train_config_lines(c: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("batch_size", c.batch_size.to_string()),
        ("learning_rate", c.learning_rate.to_string()),
        ("gamma", c.gamma.to_string()),
        ("order", c.order.to_string()),
        ("f_out", c.f_out.to_string()),
        ("t", c.t.to_string()),
        ("d", c.d.to_string()),
        ("hops", c.hops.to_string()),
        (
            "matching",
            match c.matching {
                memgcn::matching::MatchKind::Inner => "inner".to_string(),
                memgcn::matching::MatchKind::Bilinear => "bilinear".to_string(),
            },
        ),
        (
            "activation",
            match c.activation {
                memgcn::model::Activation::Relu => "relu".to_string(),
                memgcn::model::Activation::None => "none".to_string(),
            },
        ),
        ("mask_padding", c.mask_padding.to_string()),
        ("epochs", c.epochs.to_string()),
        ("patience", c.patience.to_string()),
        ("seed", c.seed.to_string()),
        ("k_folds", c.k_folds.to_string()),
        ("val_fraction", c.val_fraction.to_string()),
        ("h_head", c.h_head.to_string()),
        ("threads", c.threads.to_string()),
        ("ablate_memory", c.ablate_memory.to_string()),
        ("tie_hop_maps", c.tie_hop_maps.to_string()),
        ("normalize_connectivity", c.normalize_connectivity.to_string()),
        ("balanced_batches", c.balanced_batches.to_string()),
        (
            "mlp_hidden",
            c.mlp_hidden
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        ),
    ]
}

pub fn synth_spec_lines(s: &SynthSpec) -> Vec<(&'static str, String)> {
    vec![
        ("n_roi", s.n_roi.to_string()),
        ("n_case", s.n_case.to_string()),
        ("n_control", s.n_control.to_string()),
        ("conn_signal", s.conn_signal.to_string()),
        ("seq_signal", s.seq_signal.to_string()),
        ("noise_sd", s.noise_sd.to_string()),
        ("t", s.t.to_string()),
        ("d_features", s.d_features.to_string()),
        ("seed", s.seed.to_string()),
    ]
}
