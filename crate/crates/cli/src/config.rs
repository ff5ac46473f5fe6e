//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use s3rec::dataio::DEFAULT_MIN_INTERACTIONS;
use s3rec::pir::PirBackend;
use s3rec::recommender::{TrainConfig, TrainMode};
use s3rec::securemm::SensitiveMode;
use s3rec::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransportKind {
    Inproc,
    Tcp,
}

impl TransportKind {
    pub fn name(self) -> &'static str {
        match self {
            TransportKind::Inproc => "inproc",
            TransportKind::Tcp => "tcp",
        }
    }
}

impl FromStr for TransportKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inproc" => Ok(TransportKind::Inproc),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(Error::Config(format!("unknown transport '{other}' (inproc | tcp)"))),
        }
    }
}

/// Everything `train` needs. Keys map one-to-one onto fields.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub ratings: Option<PathBuf>,
    pub social: Option<PathBuf>,
    pub min_interactions: usize,
    pub folds: usize,
    pub fold: usize,
    pub ahe_bits: u32,
    /// Accept moduli outside the supported sizes (fast tests only).
    pub insecure_test_keys: bool,
    pub key_p0: Option<PathBuf>,
    pub key_pir: Option<PathBuf>,
    pub transport: TransportKind,
    pub addr: String,
    pub party: Option<usize>,
    pub connect_timeout_ms: u64,
    pub dealer_seed: u64,
    pub triples: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            ratings: None,
            social: None,
            min_interactions: DEFAULT_MIN_INTERACTIONS,
            folds: 5,
            fold: 0,
            ahe_bits: 2048,
            insecure_test_keys: false,
            key_p0: None,
            key_pir: None,
            transport: TransportKind::Inproc,
            addr: "127.0.0.1:7700".into(),
            party: None,
            connect_timeout_ms: 5000,
            dealer_seed: 0,
            triples: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("bad value '{value}' for {key}: {e}")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub const KEYS: [&'static str; 26] = [
        "ratings",
        "social",
        "min_interactions",
        "folds",
        "fold",
        "k",
        "lambda",
        "gamma",
        "theta",
        "epochs",
        "frac_bits",
        "seed",
        "mode",
        "sensitive_mode",
        "pir_backend",
        "ahe_bits",
        "insecure_test_keys",
        "key_p0",
        "key_pir",
        "transport",
        "addr",
        "party",
        "connect_timeout_ms",
        "dealer_seed",
        "triples",
        "out_dir",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "ratings" => self.ratings = opt_path(value),
            "social" => self.social = opt_path(value),
            "min_interactions" => self.min_interactions = parse(key, value)?,
            "folds" => self.folds = parse(key, value)?,
            "fold" => self.fold = parse(key, value)?,
            "k" => t.k = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "gamma" => t.gamma = parse(key, value)?,
            "theta" => t.theta = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "frac_bits" => t.frac_bits = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "mode" => t.mode = value.parse::<TrainMode>()?,
            "sensitive_mode" => t.sensitive_mode = value.parse::<SensitiveMode>()?,
            "pir_backend" => t.pir_backend = value.parse::<PirBackend>()?,
            "ahe_bits" => self.ahe_bits = parse(key, value)?,
            "insecure_test_keys" => self.insecure_test_keys = parse(key, value)?,
            "key_p0" => self.key_p0 = opt_path(value),
            "key_pir" => self.key_pir = opt_path(value),
            "transport" => self.transport = value.parse()?,
            "addr" => self.addr = value.to_string(),
            "party" => {
                self.party = if value.is_empty() { None } else { Some(parse(key, value)?) };
            }
            "connect_timeout_ms" => self.connect_timeout_ms = parse(key, value)?,
            "dealer_seed" => self.dealer_seed = parse(key, value)?,
            "triples" => self.triples = opt_path(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => {
                return Err(Error::Config(format!(
                    "unknown config key '{other}'; known keys: {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_text(&fs::read_to_string(path)?)
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) =
            kv.split_once('=').ok_or_else(|| Error::Usage(format!("override '{kv}' is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    /// The effective configuration, one entry per known key.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let t = &self.train;
        let values = [
            show_path(&self.ratings),
            show_path(&self.social),
            self.min_interactions.to_string(),
            self.folds.to_string(),
            self.fold.to_string(),
            t.k.to_string(),
            t.lambda.to_string(),
            t.gamma.to_string(),
            t.theta.to_string(),
            t.epochs.to_string(),
            t.frac_bits.to_string(),
            t.seed.to_string(),
            t.mode.to_string(),
            t.sensitive_mode.name().to_string(),
            t.pir_backend.to_string(),
            self.ahe_bits.to_string(),
            self.insecure_test_keys.to_string(),
            show_path(&self.key_p0),
            show_path(&self.key_pir),
            self.transport.name().to_string(),
            self.addr.clone(),
            self.party.map(|p| p.to_string()).unwrap_or_default(),
            self.connect_timeout_ms.to_string(),
            self.dealer_seed.to_string(),
            show_path(&self.triples),
            self.out_dir.display().to_string(),
        ];
        Self::KEYS.iter().copied().zip(values).collect()
    }

    /// `key = value` lines, sorted by key.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.entries().into_iter().map(|(k, v)| (k.to_string(), serde_json::Value::String(v))).collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.fold >= self.folds {
            return Err(Error::Config(format!("fold {} out of range for {} folds", self.fold, self.folds)));
        }
        if let Some(p) = self.party {
            if p > 1 {
                return Err(Error::Config(format!("party must be 0 or 1, got {p}")));
            }
        }
        if !self.insecure_test_keys && !s3rec::ahe::SUPPORTED_BITS.contains(&self.ahe_bits) {
            return Err(Error::Config(format!(
                "ahe_bits = {} is not a supported modulus size {:?}",
                self.ahe_bits,
                s3rec::ahe::SUPPORTED_BITS
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\nk = 4\nmode = s3rec\n\nsensitive_mode = pir\nratings = data/r.tsv\n").unwrap();
        assert_eq!(cfg.train.k, 4);
        assert_eq!(cfg.train.mode, TrainMode::S3rec);
        let mut again = RunConfig::default();
        again.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("k = 3\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let mut cfg = RunConfig::default();
        match cfg.apply_text("k = 3\njust words\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overrides_and_validation() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("fold=7").unwrap();
        assert!(cfg.validate().is_err());
        cfg.apply_override("fold=1").unwrap();
        cfg.apply_override("ahe_bits=1024").unwrap();
        assert!(cfg.validate().is_err());
        cfg.apply_override("insecure_test_keys=true").unwrap();
        cfg.validate().unwrap();
        assert!(cfg.apply_override("epochs").is_err());
    }

    #[test]
    fn every_key_is_echoed() {
        let cfg = RunConfig::default();
        let entries = cfg.entries();
        assert_eq!(entries.len(), RunConfig::KEYS.len());
        for key in RunConfig::KEYS {
            let mut c = RunConfig::default();
            c.set(key, &entries[key]).unwrap();
        }
    }
}
