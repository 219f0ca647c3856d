//! Run configuration: one TOML file with a section per subcommand. Every key
//! has a default, so an empty file reproduces the standard protocol.

use std::path::{Path, PathBuf};

use assocmem::experiments::{Method, SweepSpec};
use assocmem::spectral::Normalization;
use assocmem::{Mode, Precision, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the seed of every section when set.
    pub master_seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    /// Overrides the training precision of every section when set.
    pub precision: Option<Precision>,
    pub sweep: SweepSpec,
    pub theory: TheoryConfig,
    pub spectrum: SpectrumConfig,
    pub hebbian: HebbianConfig,
    pub hist: HistConfig,
    pub fss: FssConfig,
    pub train: TrainCommandConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    /// Rank fractions for the capacity integral table.
    pub kappas: Vec<f64>,
    /// Loads for the q*(alpha) curve.
    pub alphas: Vec<f64>,
    /// Finite-p surrogate size.
    pub p: usize,
    /// Monte-Carlo eta samples shared across q (common random numbers).
    pub n_mc: usize,
    pub seed: u64,
    pub extrapolation: bool,
    pub extrapolation_n_mc: usize,
    /// Overlaps for the bounds table on G(t).
    pub bounds_ts: Vec<f64>,
    pub bounds_k: Vec<f64>,
    /// Also estimate G(t) by Monte Carlo next to each bound.
    pub bounds_estimate: bool,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            kappas: vec![0.25, 0.5, 1.0],
            alphas: vec![0.1, 0.2, 0.3, 0.4, 0.45],
            p: 10_000,
            n_mc: 32,
            seed: 0,
            extrapolation: true,
            extrapolation_n_mc: 256,
            bounds_ts: (1..10).map(|i| i as f64 / 10.0).collect(),
            bounds_k: vec![1.0, 2.0, 4.0],
            bounds_estimate: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumSource {
    /// Train at the given load, or at the empirical threshold of `alphas`.
    Train,
    /// Read a model written by the `train` subcommand.
    ModelFile,
    /// The identity map (a fixture).
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumConfig {
    pub source: SpectrumSource,
    pub d: usize,
    pub kappa: f64,
    /// Fixed load; when absent the last fully satisfied load of `alphas` is used.
    pub alpha: Option<f64>,
    pub alphas: Vec<f64>,
    pub mode: Mode,
    pub seed: u64,
    pub model_path: Option<PathBuf>,
    pub normalization: Normalization,
    pub curve_points: usize,
    pub train: TrainConfig,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        SpectrumConfig {
            source: SpectrumSource::Train,
            d: 150,
            kappa: 1.0,
            alpha: None,
            alphas: (10..=24).map(|i| i as f64 / 20.0).collect(),
            mode: Mode::Op,
            seed: 0,
            model_path: None,
            normalization: Normalization::TopEqualsTwo,
            curve_points: assocmem::spectral::CURVE_POINTS,
            train: TrainConfig { stop_accuracy: 1.0, ..TrainConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HebbianConfig {
    /// Instance for the empirical score statistics.
    pub d: usize,
    pub p: usize,
    /// Loads for the heuristic success probability and rate function.
    pub alphas: Vec<f64>,
    pub heuristic_p: usize,
    pub n_mc: usize,
    pub seed: u64,
}

impl Default for HebbianConfig {
    fn default() -> Self {
        HebbianConfig {
            d: 200,
            p: 2000,
            alphas: vec![0.05, 0.1, 0.125, 0.15, 0.2, 0.25, 0.3],
            heuristic_p: 10_000,
            n_mc: 4096,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistConfig {
    pub d: usize,
    pub alpha: f64,
    pub kappa: f64,
    pub mode: Mode,
    pub method: Method,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for HistConfig {
    fn default() -> Self {
        HistConfig {
            d: 150,
            alpha: 0.3,
            kappa: 1.0,
            mode: Mode::Op,
            method: Method::Trained,
            seed: 0,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FssConfig {
    /// Sweep CSV; thresholds are extracted per (mode, method, d, kappa) line.
    pub sweep_csv: Option<PathBuf>,
    /// Table with columns d, p, alpha_c_hat.
    pub thresholds_csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub d: usize,
    pub alpha: f64,
    pub kappa: f64,
    pub mode: Mode,
    /// Use the factored model even at kappa = 1.
    pub factored: bool,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for TrainCommandConfig {
    fn default() -> Self {
        TrainCommandConfig {
            d: 50,
            alpha: 0.4,
            kappa: 1.0,
            mode: Mode::Op,
            factored: false,
            seed: 0,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|msg| ConfigError::Parse { path: path.to_path_buf(), msg })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is serializable")
    }

    /// Push the global seed and precision overrides into every section.
    pub fn apply_overrides(&mut self) {
        if let Some(seed) = self.master_seed {
            self.sweep.master_seed = seed;
            self.theory.seed = seed;
            self.spectrum.seed = seed;
            self.hebbian.seed = seed;
            self.hist.seed = seed;
            self.train.seed = seed;
        }
        if let Some(prec) = self.precision {
            self.sweep.train.precision = prec;
            self.spectrum.train.precision = prec;
            self.hist.train.precision = prec;
            self.train.train.precision = prec;
        }
    }
}

/// Default keys of one section, rendered as TOML for `--help`.
pub fn section_help(section: &str) -> String {
    let value = toml::Value::try_from(RunConfig::default()).expect("serializable");
    let body = value
        .get(section)
        .map(|v| {
            let mut t = toml::map::Map::new();
            t.insert(section.to_string(), v.clone());
            toml::to_string_pretty(&toml::Value::Table(t)).expect("serializable")
        })
        .unwrap_or_default();
    let optional = match section {
        "spectrum" => "alpha = <f64>              # optional: fixed load instead of a threshold scan\n\
                       model_path = \"<path>\"      # optional: model for source = \"model_file\"\n",
        "fss" => "sweep_csv = \"<path>\"       # optional: sweep CSV to extract thresholds from\n\
                  thresholds_csv = \"<path>\"  # optional: table with columns d, p, alpha_c_hat\n",
        _ => "",
    };
    format!(
        "Config keys (defaults shown; unknown keys are errors):\n\n\
         master_seed = <u64>        # optional, overrides section seeds\n\
         output_dir = \"<path>\"      # optional\n\
         precision = \"f64\"          # optional: f64 | f32\n\n{body}\n\
         Optional keys of [{section}]:\n{optional}"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let mut c = RunConfig::default();
        c.master_seed = Some(7);
        c.precision = Some(Precision::F32);
        c.sweep.alphas = vec![0.1, 0.30000000000000004];
        c.spectrum.alpha = Some(0.55);
        let back = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse("[sweep]\nalphs = [0.5]\n").unwrap_err();
        assert!(err.contains("alphs"), "{err}");
        let err = RunConfig::parse("[sweep.train]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.contains("learning_rat"), "{err}");
    }

    #[test]
    fn help_lists_every_key() {
        let h = section_help("sweep");
        for key in ["alphas", "dims", "kappas", "modes", "methods", "seeds", "stop_after_violation", "learning_rate"] {
            assert!(h.contains(key), "missing {key}");
        }
        assert!(section_help("spectrum").contains("model_path"));
        assert!(section_help("fss").contains("thresholds_csv"));
    }
}
