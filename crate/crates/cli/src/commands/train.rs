use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::Args;
use log::{info, warn};
use serde_json::{json, Value};
use s3rec::ahe::AheKeyPair;
use s3rec::dataio::{self, FoldSplit, RatingDataset, SocialDataset};
use s3rec::mpcshare::{provision_triples, TripleStore};
use s3rec::pir::PirBackend;
use s3rec::recommender::{
    secure_triples_needed, train_plain, train_secure_inproc, train_secure_p0, train_secure_p1, EpochMetrics,
    LatentModel, Rating, RatingData, TrainMode,
};
use s3rec::securemm::{SensitiveMode, StMpcReport};
use s3rec::sparsela::SparseMatrix;
use s3rec::transport::{party_seeds, MsgType, PartySession, Phase};
use s3rec::{Error, PartyId, Result};

use crate::config::{RunConfig, TransportKind};
use crate::{comment_header, generate_key};

// Key seeds are derived from the run seed so that both parties can
// regenerate matching keys without files.
const P0_KEY_SALT: u64 = 0x6b65_7930;
const PIR_KEY_SALT: u64 = 0x6b65_7931;
// Same derivation as the in-process trainer, so tcp runs draw identical randomness.
const SESSION_SALT: u64 = 0x5eed;

#[derive(Args, Clone, Debug, Default)]
pub struct TrainArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub party: Option<usize>,
    #[arg(long)]
    pub transport: Option<String>,
    #[arg(long)]
    pub ratings: Option<PathBuf>,
    #[arg(long)]
    pub social: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl TrainArgs {
    /// Config file first, then `--set` overrides, then dedicated flags.
    pub fn effective_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        let path_str = |p: &PathBuf| p.display().to_string();
        let flags = [
            ("mode", self.mode.clone()),
            ("party", self.party.map(|p| p.to_string())),
            ("transport", self.transport.clone()),
            ("ratings", self.ratings.as_ref().map(path_str)),
            ("social", self.social.as_ref().map(path_str)),
            ("out_dir", self.out_dir.as_ref().map(path_str)),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub final_test_rmse: Option<f64>,
    pub final_social_deviation: Option<f64>,
    pub metrics_path: PathBuf,
}

pub fn run(args: &TrainArgs) -> Result<TrainOutcome> {
    let cfg = args.effective_config()?;
    fs::create_dir_all(&cfg.out_dir)?;
    match (cfg.train.mode, cfg.transport) {
        (TrainMode::Mf | TrainMode::Soreg, _) => run_plain(&cfg),
        (TrainMode::S3rec, TransportKind::Inproc) => run_inproc(&cfg),
        (TrainMode::S3rec, TransportKind::Tcp) => match cfg.party {
            Some(0) => run_tcp_p0(&cfg),
            Some(1) => run_tcp_p1(&cfg),
            _ => Err(Error::Usage("tcp transport needs --party 0 or --party 1".into())),
        },
    }
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| Error::Usage(format!("config key '{key}' (a file path) is required")))
}

fn load_ratings_only(cfg: &RunConfig) -> Result<RatingDataset> {
    let raw = dataio::parse_ratings(&fs::read_to_string(required(&cfg.ratings, "ratings")?)?)?;
    Ok(dataio::preprocess(raw, &[], cfg.min_interactions)?.0)
}

fn load_all(cfg: &RunConfig, need_social: bool) -> Result<(RatingDataset, SocialDataset)> {
    if need_social || cfg.social.is_some() {
        dataio::load(required(&cfg.ratings, "ratings")?, required(&cfg.social, "social")?, cfg.min_interactions)
    } else {
        let data = load_ratings_only(cfg)?;
        let social = SocialDataset { m: data.m, edges: Vec::new() };
        Ok((data, social))
    }
}

fn split(cfg: &RunConfig, data: &RatingDataset) -> Result<(Vec<Rating>, Vec<Rating>)> {
    if data.ratings.is_empty() {
        return Err(Error::Validation(format!(
            "no ratings survive filtering at min_interactions = {}",
            cfg.min_interactions
        )));
    }
    let folds = FoldSplit::new(data.ratings.len(), cfg.folds, cfg.train.seed)?;
    Ok(folds.split(&data.ratings, cfg.fold))
}

fn key_p0(cfg: &RunConfig) -> Result<AheKeyPair> {
    match &cfg.key_p0 {
        Some(path) => AheKeyPair::load(path),
        None => generate_key(cfg.ahe_bits, cfg.train.seed ^ P0_KEY_SALT, cfg.insecure_test_keys),
    }
}

fn key_pir(cfg: &RunConfig) -> Result<Option<AheKeyPair>> {
    if cfg.train.sensitive_mode != SensitiveMode::Pir || cfg.train.pir_backend != PirBackend::AheLinear {
        return Ok(None);
    }
    match &cfg.key_pir {
        Some(path) => AheKeyPair::load(path).map(Some),
        None => generate_key(cfg.ahe_bits, cfg.train.seed ^ PIR_KEY_SALT, cfg.insecure_test_keys).map(Some),
    }
}

/// Metrics file: a config record, one record per epoch, then a summary.
fn write_metrics(cfg: &RunConfig, metrics: &[EpochMetrics], summary: Value) -> Result<PathBuf> {
    let mut out = String::new();
    let _ = writeln!(out, "{}", json!({ "record": "config", "config": cfg.to_json() }));
    for m in metrics {
        let mut v = serde_json::to_value(m).map_err(|e| Error::Validation(e.to_string()))?;
        v.as_object_mut().expect("metrics serialize to an object").insert("record".into(), json!("epoch"));
        let _ = writeln!(out, "{v}");
    }
    let _ = writeln!(out, "{summary}");
    let path = cfg.out_dir.join("metrics.jsonl");
    fs::write(&path, out)?;
    Ok(path)
}

/// Latent factors as TSV, one user or item per line.
fn write_model(cfg: &RunConfig, model: &LatentModel, data: &RatingDataset) -> Result<()> {
    let mut out = comment_header(cfg.to_text().lines().map(str::to_string));
    for (kind, ids, mat) in [("user", &data.user_ids, &model.u), ("item", &data.item_ids, &model.v)] {
        for (col, id) in ids.iter().enumerate() {
            let _ = write!(out, "{kind}\t{id}");
            for row in 0..mat.rows() {
                let _ = write!(out, "\t{}", mat.get(row, col));
            }
            out.push('\n');
        }
    }
    fs::write(cfg.out_dir.join("model.tsv"), out)?;
    Ok(())
}

fn finish(
    cfg: &RunConfig,
    model: &LatentModel,
    data: &RatingDataset,
    metrics: Vec<EpochMetrics>,
) -> Result<TrainOutcome> {
    let last = metrics.last();
    let final_test_rmse = last.and_then(|m| m.test_rmse);
    let final_social_deviation = last.and_then(|m| m.social_deviation);
    let summary = json!({
        "record": "summary",
        "mode": cfg.train.mode.name(),
        "epochs": metrics.len(),
        "m": data.m,
        "n": data.n,
        "final_train_rmse": last.map(|m| m.train_rmse),
        "final_test_rmse": final_test_rmse,
        "final_social_deviation": final_social_deviation,
    });
    let metrics_path = write_metrics(cfg, &metrics, summary)?;
    write_model(cfg, model, data)?;
    Ok(TrainOutcome { metrics, final_test_rmse, final_social_deviation, metrics_path })
}

fn run_plain(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (data, social) = load_all(cfg, cfg.train.mode == TrainMode::Soreg)?;
    let (train, test) = split(cfg, &data)?;
    let rd = RatingData { m: data.m, n: data.n, train: &train, test: &test };
    let (model, metrics) = train_plain(rd, &social.to_sparse(), &cfg.train)?;
    if let Some(m) = metrics.last() {
        info!("{} finished: train rmse {:.4}, test rmse {:?}", cfg.train.mode, m.train_rmse, m.test_rmse);
    }
    finish(cfg, &model, &data, metrics)
}

fn run_inproc(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (data, social) = load_all(cfg, true)?;
    let (train, test) = split(cfg, &data)?;
    let rd = RatingData { m: data.m, n: data.n, train: &train, test: &test };
    let run = train_secure_inproc(rd, &social.to_sparse(), &cfg.train, key_p0(cfg)?, key_pir(cfg)?, cfg.dealer_seed)?;
    if let Some(dev) = run.metrics.last().and_then(|m| m.social_deviation) {
        info!("final-epoch social-term deviation {dev:.3e}");
        if dev >= 1e-3 {
            warn!("social-term deviation {dev:.3e} exceeds 1e-3");
        }
    }
    finish(cfg, &run.model, &data, run.metrics)
}

fn transport_context(stage: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Transport(msg) => Error::Transport(format!("{stage}: {msg}")),
        other => other,
    }
}

fn store_for(session: &mut PartySession, cfg: &RunConfig, needed: usize) -> Result<TripleStore> {
    let store = match &cfg.triples {
        Some(path) => TripleStore::load(session.party(), path)?,
        None => provision_triples(session, needed, cfg.dealer_seed, false)?,
    };
    if store.remaining() < needed {
        return Err(Error::Config(format!(
            "triple store holds {} triples but training needs {needed} = epochs*k*m",
            store.remaining()
        )));
    }
    Ok(store)
}

/// Payload of the user-list frame: item count, then newline-separated ids.
fn encode_user_list(n: usize, user_ids: &[String]) -> Vec<u8> {
    let mut out = (n as u64).to_le_bytes().to_vec();
    out.extend_from_slice(user_ids.join("\n").as_bytes());
    out
}

fn decode_user_list(payload: &[u8]) -> Result<(usize, Vec<String>)> {
    if payload.len() < 8 {
        return Err(Error::Protocol("user-list frame too short".into()));
    }
    let n = u64::from_le_bytes(payload[..8].try_into().expect("8 bytes")) as usize;
    let text = std::str::from_utf8(&payload[8..]).map_err(|_| Error::Protocol("user ids are not UTF-8".into()))?;
    let ids = if text.is_empty() { Vec::new() } else { text.split('\n').map(str::to_string).collect() };
    Ok((n, ids))
}

fn run_tcp_p0(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (seed0, _) = party_seeds(cfg.train.seed ^ SESSION_SALT);
    let timeout = Duration::from_millis(cfg.connect_timeout_ms);
    let mut session = PartySession::tcp_connect(&cfg.addr, PartyId::P0, seed0, timeout)
        .map_err(transport_context("connecting in the offline phase"))?;
    session.handshake().map_err(transport_context("handshake in the offline phase"))?;
    let data = load_ratings_only(cfg)?;
    // P1 indexes its social graph by P0's surviving users.
    session
        .send(Phase::Offline, MsgType::Control, &encode_user_list(data.n, &data.user_ids))
        .map_err(transport_context("sending the user list"))?;
    let (train, test) = split(cfg, &data)?;
    let mut store = store_for(&mut session, cfg, secure_triples_needed(&cfg.train, data.m))?;
    let rd = RatingData { m: data.m, n: data.n, train: &train, test: &test };
    let (model, metrics) = train_secure_p0(&mut session, rd, &cfg.train, key_p0(cfg)?, &mut store, None)
        .map_err(transport_context("secure training"))?;
    info!("P0 sent {} payload bytes", session.stats().total_bytes_sent());
    finish(cfg, &model, &data, metrics)
}

fn run_tcp_p1(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (_, seed1) = party_seeds(cfg.train.seed ^ SESSION_SALT);
    let mut session = PartySession::tcp_listen(&cfg.addr, PartyId::P1, seed1)
        .map_err(transport_context("listening in the offline phase"))?;
    session.handshake().map_err(transport_context("handshake in the offline phase"))?;
    let payload = session.recv_expect(MsgType::Control).map_err(transport_context("receiving the user list"))?;
    let (n, user_ids) = decode_user_list(&payload)?;
    let index: HashMap<&str, usize> = user_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let raw = dataio::parse_social(&fs::read_to_string(required(&cfg.social, "social")?)?)?;
    let edges = raw.iter().filter_map(|(a, b, w)| Some((*index.get(a.as_str())?, *index.get(b.as_str())?, *w)));
    let social: SparseMatrix<f64> = SocialDataset::from_edges(user_ids.len(), edges)?.to_sparse();
    let mut store = store_for(&mut session, cfg, secure_triples_needed(&cfg.train, user_ids.len()))?;
    let reports = train_secure_p1(&mut session, &social, n, &cfg.train, key_pir(cfg)?, &mut store)
        .map_err(transport_context("secure training"))?;
    info!("P1 sent {} payload bytes", session.stats().total_bytes_sent());
    let path = write_p1_reports(cfg, &reports)?;
    Ok(TrainOutcome { metrics: Vec::new(), final_test_rmse: None, final_social_deviation: None, metrics_path: path })
}

fn write_p1_reports(cfg: &RunConfig, reports: &[StMpcReport]) -> Result<PathBuf> {
    let mut out = String::new();
    let _ = writeln!(out, "{}", json!({ "record": "config", "config": cfg.to_json() }));
    for (epoch, r) in reports.iter().enumerate() {
        let mut v = serde_json::to_value(r).map_err(|e| Error::Validation(e.to_string()))?;
        let obj = v.as_object_mut().expect("reports serialize to an object");
        obj.insert("record".into(), json!("epoch"));
        obj.insert("epoch".into(), json!(epoch));
        let _ = writeln!(out, "{v}");
    }
    let path = cfg.out_dir.join("p1_reports.jsonl");
    fs::write(&path, out)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn user_list_round_trip() {
        let ids = vec!["u1".to_string(), "alice".to_string()];
        assert_eq!(decode_user_list(&encode_user_list(7, &ids)).unwrap(), (7, ids));
        assert_eq!(decode_user_list(&encode_user_list(3, &[])).unwrap(), (3, vec![]));
        assert!(decode_user_list(&[1, 2]).is_err());
    }

    #[test]
    fn flags_override_file_and_set() {
        let args = TrainArgs {
            overrides: vec!["mode=mf".into(), "k=3".into()],
            mode: Some("soreg".into()),
            ..Default::default()
        };
        let cfg = args.effective_config().unwrap();
        assert_eq!(cfg.train.mode, TrainMode::Soreg);
        assert_eq!(cfg.train.k, 3);
    }
}
