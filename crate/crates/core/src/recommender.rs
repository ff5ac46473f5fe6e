//! Social-regularized matrix factorization.
//!
//! The objective over observed ratings `(i, j, r)`, latent factors
//! `U` (k x m) and `V` (k x n), and social weights `s_{i,f}` is
//!
//! ```text
//! L = 1/2 sum (r - u_i.v_j)^2 + lambda/2 (|U|^2 + |V|^2)
//!     + gamma/2 sum_{i,f} s_{i,f} |u_i - u_f|^2
//! ```
//!
//! The social part of dL/dU is `gamma U (D + E) - gamma U (S + S^T)`. It is
//! written here in the two-matrix form `gamma/2 U (D~ + E~) - gamma U S~^T`
//! evaluated on the symmetrized `S~ = S + S^T` (whose row and column sums are
//! both `D + E`); that is the form the secure protocol computes.

use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::ahe::AheKeyPair;
use crate::error::{Error, Result};
use crate::mpcshare::TripleStore;
use crate::pir::PirBackend;
use crate::ring::FixedPointCodec;
use crate::securemm::{
    sensitive_setup_p0, sensitive_setup_p1, st_mpc_p0, st_mpc_p1, st_mpc_triples, PhaseBytes, SensitiveConfig,
    SensitiveMode, StMpcReport,
};
use crate::sparsela::{build_d_e, symmetrize, DenseMatrix, DiagonalMatrix, SparseMatrix};
use crate::transport::{ChannelStats, PartySession};

/// Observed rating `(user, item, value)`.
pub type Rating = (usize, usize, f64);

#[derive(Clone, Debug, PartialEq)]
pub struct LatentModel {
    pub u: DenseMatrix<f64>,
    pub v: DenseMatrix<f64>,
}

impl LatentModel {
    /// Entries i.i.d. uniform in `[0, 1/sqrt(k))`.
    pub fn init(k: usize, m: usize, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let hi = 1.0 / (k as f64).sqrt();
        let u = DenseMatrix::from_fn(k, m, |_, _| rng.gen_range(0.0..hi));
        let v = DenseMatrix::from_fn(k, n, |_, _| rng.gen_range(0.0..hi));
        LatentModel { u, v }
    }

    pub fn k(&self) -> usize {
        self.u.rows()
    }

    pub fn predict(&self, user: usize, item: usize) -> f64 {
        (0..self.k()).map(|f| self.u.get(f, user) * self.v.get(f, item)).sum()
    }

    pub fn rmse(&self, ratings: &[Rating]) -> Option<f64> {
        if ratings.is_empty() {
            return None;
        }
        let se: f64 = ratings.iter().map(|&(i, j, r)| (r - self.predict(i, j)).powi(2)).sum();
        Some((se / ratings.len() as f64).sqrt())
    }
}

fn check_shapes(ratings: &[Rating], u: &DenseMatrix<f64>, v: &DenseMatrix<f64>) -> Result<()> {
    if u.rows() != v.rows() {
        return Err(Error::shape(format!("U has k = {}, V has k = {}", u.rows(), v.rows())));
    }
    if let Some(&(i, j, _)) = ratings.iter().find(|&&(i, j, _)| i >= u.cols() || j >= v.cols()) {
        return Err(Error::shape(format!("rating ({i},{j}) outside {}x{}", u.cols(), v.cols())));
    }
    Ok(())
}

fn check_social(s: &SparseMatrix<f64>, m: usize) -> Result<()> {
    if s.rows() != m || s.cols() != m {
        return Err(Error::shape(format!("social matrix is {}x{}, expected {m}x{m}", s.rows(), s.cols())));
    }
    Ok(())
}

fn column_dist_sq(u: &DenseMatrix<f64>, a: usize, b: usize) -> f64 {
    (0..u.rows()).map(|f| (u.get(f, a) - u.get(f, b)).powi(2)).sum()
}

/// The four-term objective.
pub fn objective(
    ratings: &[Rating],
    s: &SparseMatrix<f64>,
    u: &DenseMatrix<f64>,
    v: &DenseMatrix<f64>,
    lambda: f64,
    gamma: f64,
) -> Result<f64> {
    check_shapes(ratings, u, v)?;
    check_social(s, u.cols())?;
    let model = LatentModel { u: u.clone(), v: v.clone() };
    let fit: f64 = ratings.iter().map(|&(i, j, r)| (r - model.predict(i, j)).powi(2)).sum::<f64>() / 2.0;
    let reg = lambda / 2.0 * (u.frobenius_sq() + v.frobenius_sq());
    let social: f64 = s.iter().map(|(i, f, w)| w * column_dist_sq(u, i, f)).sum::<f64>() * gamma / 2.0;
    Ok(fit + reg + social)
}

/// Objective without the social term; all P0 can evaluate on its own.
pub fn rating_objective(ratings: &[Rating], u: &DenseMatrix<f64>, v: &DenseMatrix<f64>, lambda: f64) -> Result<f64> {
    objective(ratings, &SparseMatrix::empty(u.cols(), u.cols()), u, v, lambda, 0.0)
}

/// Residuals `r - u_i.v_j` on the observed entries.
fn residuals(ratings: &[Rating], u: &DenseMatrix<f64>, v: &DenseMatrix<f64>) -> Vec<f64> {
    let k = u.rows();
    ratings
        .iter()
        .map(|&(i, j, r)| r - (0..k).map(|f| u.get(f, i) * v.get(f, j)).sum::<f64>())
        .collect()
}

/// Rating part of dL/dU: `-V ((R - U^T V)^T o I) + lambda U`.
pub fn grad_u_rating(ratings: &[Rating], u: &DenseMatrix<f64>, v: &DenseMatrix<f64>, lambda: f64) -> Result<DenseMatrix<f64>> {
    check_shapes(ratings, u, v)?;
    let mut g = u.scale(lambda);
    for (&(i, j, _), e) in ratings.iter().zip(residuals(ratings, u, v)) {
        for f in 0..u.rows() {
            g.set(f, i, g.get(f, i) - e * v.get(f, j));
        }
    }
    Ok(g)
}

/// dL/dV: `-U ((R - U^T V) o I) + lambda V`.
pub fn grad_v(ratings: &[Rating], u: &DenseMatrix<f64>, v: &DenseMatrix<f64>, lambda: f64) -> Result<DenseMatrix<f64>> {
    check_shapes(ratings, u, v)?;
    let mut g = v.scale(lambda);
    for (&(i, j, _), e) in ratings.iter().zip(residuals(ratings, u, v)) {
        for f in 0..u.rows() {
            g.set(f, j, g.get(f, j) - e * u.get(f, i));
        }
    }
    Ok(g)
}

/// `gamma/2 U (D^T + E^T) - gamma U S^T` for the given `D`, `E`, `S`.
pub fn social_term(
    gamma: f64,
    u: &DenseMatrix<f64>,
    d: &DiagonalMatrix,
    e: &DiagonalMatrix,
    s: &SparseMatrix<f64>,
) -> Result<DenseMatrix<f64>> {
    check_social(s, u.cols())?;
    let mut out = DenseMatrix::zeros(u.rows(), u.cols());
    let de = d.add(e)?;
    for b in 0..u.cols() {
        for f in 0..u.rows() {
            out.set(f, b, gamma / 2.0 * u.get(f, b) * de.diag()[b]);
        }
    }
    // (U S^T)_{f,b} = sum_c u_{f,c} s_{b,c}
    for (b, c, w) in s.iter() {
        for f in 0..u.rows() {
            out.set(f, b, out.get(f, b) - gamma * u.get(f, c) * w);
        }
    }
    Ok(out)
}

/// Social part of dL/dU for social matrix `s`, via the symmetrized form.
pub fn social_gradient(gamma: f64, u: &DenseMatrix<f64>, s: &SparseMatrix<f64>) -> Result<DenseMatrix<f64>> {
    let sym = symmetrize(s)?;
    let (d, e) = build_d_e(&sym)?;
    social_term(gamma, u, &d, &e, &sym)
}

/// dL/dU with its two parts kept apart.
#[derive(Clone, Debug, PartialEq)]
pub struct GradU {
    pub rating: DenseMatrix<f64>,
    pub social: DenseMatrix<f64>,
}

impl GradU {
    pub fn total(&self) -> DenseMatrix<f64> {
        self.rating.zip_with(&self.social, |a, b| a + b).expect("parts share a shape")
    }
}

pub fn grad_u(
    ratings: &[Rating],
    s: &SparseMatrix<f64>,
    u: &DenseMatrix<f64>,
    v: &DenseMatrix<f64>,
    lambda: f64,
    gamma: f64,
) -> Result<GradU> {
    Ok(GradU { rating: grad_u_rating(ratings, u, v, lambda)?, social: social_gradient(gamma, u, s)? })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainMode {
    Mf,
    Soreg,
    S3rec,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Mf => "mf",
            TrainMode::Soreg => "soreg",
            TrainMode::S3rec => "s3rec",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mf" => Ok(TrainMode::Mf),
            "soreg" => Ok(TrainMode::Soreg),
            "s3rec" => Ok(TrainMode::S3rec),
            other => Err(Error::Config(format!("unknown mode '{other}' (mf | soreg | s3rec)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub theta: f64,
    pub epochs: usize,
    pub frac_bits: u32,
    pub seed: u64,
    pub mode: TrainMode,
    pub sensitive_mode: SensitiveMode,
    pub pir_backend: PirBackend,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 10,
            lambda: 0.1,
            gamma: 0.1,
            theta: 1e-3,
            epochs: 10,
            frac_bits: FixedPointCodec::DEFAULT_FRAC_BITS,
            seed: 0,
            mode: TrainMode::Soreg,
            sensitive_mode: SensitiveMode::FullTransfer,
            pir_backend: PirBackend::Plain,
        }
    }
}

impl TrainConfig {
    /// Checks the configuration against an item count `n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.theta)));
        }
        if self.lambda < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("lambda and gamma must be non-negative".into()));
        }
        FixedPointCodec::new(self.frac_bits)?;
        if self.mode == TrainMode::S3rec && self.epochs >= n {
            return Err(Error::Config(format!(
                "s3rec requires epochs T < n (T = {}, n = {n})",
                self.epochs
            )));
        }
        Ok(())
    }

    pub fn sensitive_config(&self) -> SensitiveConfig {
        match self.sensitive_mode {
            SensitiveMode::FullTransfer => SensitiveConfig::full_transfer(),
            SensitiveMode::Pir => SensitiveConfig::pir(self.pir_backend),
        }
    }

    fn social_weight(&self) -> f64 {
        if self.mode == TrainMode::Mf {
            0.0
        } else {
            self.gamma
        }
    }
}

/// Per-epoch record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Full objective when the social matrix is available to the reporter,
    /// otherwise the rating-only objective.
    pub objective: f64,
    pub objective_includes_social: bool,
    pub train_rmse: f64,
    pub test_rmse: Option<f64>,
    /// Max-abs deviation of the securely computed social term from the
    /// plaintext one (audited runs only).
    pub social_deviation: Option<f64>,
    pub bytes_sent: PhaseBytes,
    pub bytes_received: u64,
}

/// Training data as seen by the rating holder.
#[derive(Clone, Copy, Debug)]
pub struct RatingData<'a> {
    pub m: usize,
    pub n: usize,
    pub train: &'a [Rating],
    pub test: &'a [Rating],
}

fn step(model: &mut LatentModel, grad_u: &DenseMatrix<f64>, grad_v: &DenseMatrix<f64>, theta: f64) {
    model.u = model.u.zip_with(grad_u, |p, g| p - theta * g).expect("gradient shape");
    model.v = model.v.zip_with(grad_v, |p, g| p - theta * g).expect("gradient shape");
}

fn finite_or_diverged(epoch: usize, objective: f64) -> Result<f64> {
    if objective.is_finite() {
        Ok(objective)
    } else {
        Err(Error::Diverged { epoch, objective })
    }
}

/// Full-batch gradient descent in plaintext (`mf` or `soreg`).
pub fn train_plain(data: RatingData<'_>, social: &SparseMatrix<f64>, config: &TrainConfig) -> Result<(LatentModel, Vec<EpochMetrics>)> {
    if config.mode == TrainMode::S3rec {
        return Err(Error::Config("train_plain runs mf or soreg; use train_secure for s3rec".into()));
    }
    config.validate(data.n)?;
    check_social(social, data.m)?;
    let gamma = config.social_weight();
    let mut model = LatentModel::init(config.k, data.m, data.n, config.seed);
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let gu = grad_u_rating(data.train, &model.u, &model.v, config.lambda)?;
        let gu = if gamma == 0.0 { gu } else { gu.zip_with(&social_gradient(gamma, &model.u, social)?, |a, b| a + b)? };
        let gv = grad_v(data.train, &model.u, &model.v, config.lambda)?;
        step(&mut model, &gu, &gv, config.theta);
        let obj = finite_or_diverged(epoch, objective(data.train, social, &model.u, &model.v, config.lambda, gamma)?)?;
        metrics.push(EpochMetrics {
            epoch,
            objective: obj,
            objective_includes_social: true,
            train_rmse: model.rmse(data.train).unwrap_or(0.0),
            test_rmse: model.rmse(data.test),
            ..Default::default()
        });
        debug!("{} epoch {epoch}: objective {obj:.6}", config.mode);
    }
    Ok((model, metrics))
}

/// Plaintext social matrix handed to P0 for diagnostics only (in-process
/// runs); never used to update the model.
#[derive(Clone, Copy, Debug)]
pub struct SecureAudit<'a> {
    pub social: &'a SparseMatrix<f64>,
}

/// P0's side of the secure trainer. `store` must hold
/// `epochs * st_mpc_triples(k, m)` triples when `gamma > 0`.
pub fn train_secure_p0(
    session: &mut PartySession,
    data: RatingData<'_>,
    config: &TrainConfig,
    key: AheKeyPair,
    store: &mut TripleStore,
    audit: Option<SecureAudit<'_>>,
) -> Result<(LatentModel, Vec<EpochMetrics>)> {
    config.validate(data.n)?;
    let codec = FixedPointCodec::new(config.frac_bits)?;
    let gamma = config.gamma;
    let mut model = LatentModel::init(config.k, data.m, data.n, config.seed);
    let sensitive = if gamma > 0.0 { Some(sensitive_setup_p0(session, key, config.sensitive_config())?) } else { None };
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let before = session.stats().clone();
        let mut gu = grad_u_rating(data.train, &model.u, &model.v, config.lambda)?;
        let mut deviation = None;
        if let Some(ctx) = &sensitive {
            let (term, _) = st_mpc_p0(session, ctx, store, &codec, gamma, &model.u)?;
            if let Some(a) = audit {
                deviation = Some(term.max_abs_diff(&social_gradient(gamma, &model.u, a.social)?));
            }
            gu = gu.zip_with(&term, |a, b| a + b)?;
        }
        let gv = grad_v(data.train, &model.u, &model.v, config.lambda)?;
        step(&mut model, &gu, &gv, config.theta);
        let obj = match audit {
            Some(a) => objective(data.train, a.social, &model.u, &model.v, config.lambda, gamma)?,
            None => rating_objective(data.train, &model.u, &model.v, config.lambda)?,
        };
        let obj = finite_or_diverged(epoch, obj)?;
        let delta = session.stats().since(&before);
        metrics.push(EpochMetrics {
            epoch,
            objective: obj,
            objective_includes_social: audit.is_some(),
            train_rmse: model.rmse(data.train).unwrap_or(0.0),
            test_rmse: model.rmse(data.test),
            social_deviation: deviation,
            bytes_sent: PhaseBytes::measured(&delta),
            bytes_received: delta.bytes_received(),
        });
        info!("s3rec epoch {epoch}: objective {obj:.6}, social deviation {deviation:?}");
    }
    Ok((model, metrics))
}

/// P1's side of the secure trainer: runs the social-term protocol once per
/// epoch on `S + S^T`, then stops after `epochs` rounds.
pub fn train_secure_p1(
    session: &mut PartySession,
    social: &SparseMatrix<f64>,
    n: usize,
    config: &TrainConfig,
    pir_key: Option<AheKeyPair>,
    store: &mut TripleStore,
) -> Result<Vec<StMpcReport>> {
    config.validate(n)?;
    if config.gamma == 0.0 {
        return Ok(Vec::new());
    }
    let codec = FixedPointCodec::new(config.frac_bits)?;
    let sym = symmetrize(social)?;
    let (d, e) = build_d_e(&sym)?;
    let ctx = sensitive_setup_p1(session, config.sensitive_config(), pir_key)?;
    (0..config.epochs)
        .map(|_| st_mpc_p1(session, &ctx, store, &codec, config.k, &d, &e, &sym))
        .collect()
}

/// Triples the secure trainer consumes over all epochs.
pub fn secure_triples_needed(config: &TrainConfig, m: usize) -> usize {
    if config.gamma == 0.0 {
        0
    } else {
        config.epochs * st_mpc_triples(config.k, m)
    }
}

/// Result of an in-process secure run.
#[derive(Clone, Debug)]
pub struct SecureRun {
    pub model: LatentModel,
    pub metrics: Vec<EpochMetrics>,
    pub p1_reports: Vec<StMpcReport>,
    pub p0_stats: ChannelStats,
    pub p1_stats: ChannelStats,
}

/// Both parties of the secure trainer over an in-process channel, with the
/// social-term audit enabled.
pub fn train_secure_inproc(
    data: RatingData<'_>,
    social: &SparseMatrix<f64>,
    config: &TrainConfig,
    key: AheKeyPair,
    pir_key: Option<AheKeyPair>,
    dealer_seed: u64,
) -> Result<SecureRun> {
    config.validate(data.n)?;
    check_social(social, data.m)?;
    let (mut st0, mut st1) = crate::mpcshare::dealer_generate(secure_triples_needed(config, data.m), dealer_seed);
    let (r0, r1) = crate::transport::run_inproc(
        config.seed ^ 0x5eed,
        |s| {
            train_secure_p0(s, data, config, key, &mut st0, Some(SecureAudit { social }))
                .map(|(model, metrics)| (model, metrics, s.stats().clone()))
        },
        |s| train_secure_p1(s, social, data.n, config, pir_key, &mut st1).map(|reports| (reports, s.stats().clone())),
    );
    let (model, metrics, p0_stats) = r0?;
    let (p1_reports, p1_stats) = r1?;
    Ok(SecureRun { model, metrics, p1_reports, p0_stats, p1_stats })
}
