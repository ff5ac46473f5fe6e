//! Protocol benchmark: runs each secure product in-process, measures the
//! payload bytes per party and phase, and checks them against the
//! closed-form predictions. A mismatch is an error, not a report line.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use s3rec::ahe::AheKeyPair;
use s3rec::dataio::{sample_social, synth, FoldSplit, SocialDataset, SynthConfig};
use s3rec::mpcshare::provision_triples;
use s3rec::pir::PirBackend;
use s3rec::recommender::{train_plain, train_secure_inproc, RatingData, TrainConfig, TrainMode};
use s3rec::ring::RingElement;
use s3rec::securemm::{
    matmul_dense_p0, matmul_dense_p1, matmul_insensitive_p0, matmul_insensitive_p1, matmul_sensitive_p0,
    matmul_sensitive_p1, predict_dense, predict_insensitive, predict_sensitive, predict_sensitive_setup,
    reconstruct_matrix, sensitive_setup_p0, sensitive_setup_p1, PhaseBytes, SensitiveConfig, SensitiveMode,
    SharedMatrix,
};
use s3rec::sparsela::{matmul_oracle_ring, DenseMatrix, SparseMatrix};
use s3rec::transport::{run_inproc, ChannelStats, PartySession};
use s3rec::{Error, Result};

use crate::generate_key;

const TRIPLE_BYTES: u64 = 24;
const PIR_KEY_SALT: u64 = 0x70_6972;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    /// Dense vs insensitive vs sensitive (both modes) on one instance.
    Protocols,
    /// Social graph subsampled at each rate in `--rates`.
    Sparsity,
    /// Latent dimension swept over `--k-grid`.
    K,
    /// Plaintext and secure training, with test RMSE.
    Train,
    All,
}

#[derive(Args, Clone, Debug)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value_t = Grid::All)]
    pub grid: Grid,
    #[arg(long, default_value_t = 40)]
    pub m: usize,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, value_delimiter = ',', default_value = "10,15,20")]
    pub k_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.4,0.6,0.8", value_parser = super::gen_data::parse_rate)]
    pub rates: Vec<f64>,
    /// Social density of the synthetic graph.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 2048)]
    pub ahe_bits: u32,
    #[arg(long)]
    pub insecure_test_keys: bool,
    #[arg(long, default_value = "plain")]
    pub pir_backend: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Epochs for the plaintext training rows.
    #[arg(long, default_value_t = 300)]
    pub train_epochs: usize,
    /// Epochs for the secure training row (0 skips it).
    #[arg(long, default_value_t = 2)]
    pub secure_epochs: usize,
    #[arg(long, default_value = "bench.csv")]
    pub out: PathBuf,
}

/// One CSV row. Byte columns sum both parties.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub grid: &'static str,
    pub protocol: String,
    pub k: usize,
    pub m: usize,
    pub t: usize,
    pub mode: String,
    pub measured: [PhaseBytes; 2],
    pub predicted: [PhaseBytes; 2],
    pub wall_ms: f64,
    pub rmse: Option<f64>,
    /// Ciphertexts sent towards P1 (sensitive rows).
    pub ciphertexts_to_p1: u64,
}

impl BenchRow {
    pub fn measured_online(&self) -> u64 {
        self.measured.iter().map(PhaseBytes::online).sum()
    }

    pub fn predicted_online(&self) -> u64 {
        self.predicted.iter().map(PhaseBytes::online).sum()
    }

    pub fn offline(&self) -> u64 {
        self.measured.iter().map(|p| p.offline).sum()
    }

    pub fn compute(&self, party: usize) -> u64 {
        self.measured[party].compute
    }

    pub fn matches(&self) -> bool {
        self.measured == self.predicted
    }
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// R^2 of insensitive+sensitive online bytes against t over the sparsity grid.
    pub sparsity_r2: Option<f64>,
    pub csv_path: PathBuf,
}

pub const CSV_HEADER: &str = "protocol,k,m,t,mode,measured_bytes,predicted_bytes,offline_bytes,wall_ms,rmse";

fn add(a: PhaseBytes, b: PhaseBytes) -> PhaseBytes {
    PhaseBytes {
        offline: a.offline + b.offline,
        input: a.input + b.input,
        compute: a.compute + b.compute,
        output: a.output + b.output,
    }
}

fn with_offline(mut p: PhaseBytes, offline: u64) -> PhaseBytes {
    p.offline += offline;
    p
}

/// Random `k x m` ring matrix.
pub fn random_x(k: usize, m: usize, rng: &mut ChaCha20Rng) -> DenseMatrix<RingElement> {
    DenseMatrix::from_fn(k, m, |_, _| RingElement::random(rng))
}

/// Social graph as a ring matrix with small random nonzero weights.
pub fn ring_social(s: &SocialDataset, rng: &mut ChaCha20Rng) -> Result<SparseMatrix<RingElement>> {
    let loc: Vec<(usize, usize)> = s.edges.iter().map(|&(a, b, _)| (a, b)).collect();
    let val = loc.iter().map(|_| RingElement::new(rng.gen_range(1..1000))).collect();
    SparseMatrix::new(s.m, s.m, loc, val)
}

struct Measured {
    z: [SharedMatrix; 2],
    stats: [ChannelStats; 2],
    wall_ms: f64,
}

fn both<A, B>(a: Result<A>, b: Result<B>) -> Result<(A, B)> {
    Ok((a?, b?))
}

fn measure(
    seed: u64,
    f0: impl FnOnce(&mut PartySession) -> Result<SharedMatrix> + Send,
    f1: impl FnOnce(&mut PartySession) -> Result<SharedMatrix> + Send,
) -> Result<Measured> {
    let start = Instant::now();
    let (r0, r1) = run_inproc(
        seed,
        |s| f0(s).map(|z| (z, s.stats().clone())),
        |s| f1(s).map(|z| (z, s.stats().clone())),
    );
    let ((z0, st0), (z1, st1)) = both(r0, r1)?;
    Ok(Measured { z: [z0, z1], stats: [st0, st1], wall_ms: start.elapsed().as_secs_f64() * 1e3 })
}

fn check_product(name: &str, m: &Measured, x: &DenseMatrix<RingElement>, y: &DenseMatrix<RingElement>) -> Result<()> {
    let z = reconstruct_matrix(&m.z[0], &m.z[1])?;
    if z != matmul_oracle_ring(x, y)? {
        return Err(Error::Validation(format!("{name}: reconstructed product differs from the plaintext oracle")));
    }
    Ok(())
}

fn measured_bytes(m: &Measured) -> [PhaseBytes; 2] {
    [PhaseBytes::measured(&m.stats[0]), PhaseBytes::measured(&m.stats[1])]
}

/// Dense product `x * y` with triples shipped by the emulated dealer.
pub fn bench_dense(grid: &'static str, x: &DenseMatrix<RingElement>, y: &DenseMatrix<RingElement>, seed: u64) -> Result<BenchRow> {
    let (k, m) = x.shape();
    let n = y.cols();
    let count = k * m * n;
    let res = measure(
        seed,
        |s| {
            let mut store = provision_triples(s, count, seed, true)?;
            matmul_dense_p0(s, x, n, 0, &mut store).map(|r| r.0)
        },
        |s| {
            let mut store = provision_triples(s, count, seed, true)?;
            matmul_dense_p1(s, y, k, 0, &mut store).map(|r| r.0)
        },
    )?;
    check_product("dense", &res, x, y)?;
    let offline = TRIPLE_BYTES * count as u64;
    let [p0, p1] = predict_dense(k, m, n);
    Ok(BenchRow {
        grid,
        protocol: "dense".into(),
        k,
        m,
        t: m * n,
        mode: "-".into(),
        measured: measured_bytes(&res),
        predicted: [with_offline(p0, offline), with_offline(p1, offline)],
        wall_ms: res.wall_ms,
        rmse: None,
        ciphertexts_to_p1: 0,
    })
}

pub fn bench_insensitive(grid: &'static str, x: &DenseMatrix<RingElement>, y: &SparseMatrix<RingElement>, seed: u64) -> Result<BenchRow> {
    let (k, m) = x.shape();
    let t = y.nnz();
    let count = k * t;
    let pattern = y.pattern();
    let res = measure(
        seed,
        |s| {
            let mut store = provision_triples(s, count, seed, true)?;
            matmul_insensitive_p0(s, x, &pattern, 0, &mut store).map(|r| r.0)
        },
        |s| {
            let mut store = provision_triples(s, count, seed, true)?;
            matmul_insensitive_p1(s, y, k, 0, &mut store).map(|r| r.0)
        },
    )?;
    check_product("insensitive", &res, x, &y.to_dense())?;
    let offline = TRIPLE_BYTES * count as u64;
    let [p0, p1] = predict_insensitive(k, t);
    Ok(BenchRow {
        grid,
        protocol: "insensitive".into(),
        k,
        m,
        t,
        mode: "-".into(),
        measured: measured_bytes(&res),
        predicted: [with_offline(p0, offline), with_offline(p1, offline)],
        wall_ms: res.wall_ms,
        rmse: None,
        ciphertexts_to_p1: 0,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn bench_sensitive(
    grid: &'static str,
    x: &DenseMatrix<RingElement>,
    y: &SparseMatrix<RingElement>,
    config: SensitiveConfig,
    key: &AheKeyPair,
    pir_key: Option<&AheKeyPair>,
    seed: u64,
) -> Result<BenchRow> {
    let (k, m) = x.shape();
    let n = y.cols();
    let pir_key = if config.mode == SensitiveMode::Pir && config.pir.backend == PirBackend::AheLinear {
        Some(pir_key.ok_or_else(|| Error::Usage("ahe-linear PIR needs a second key".into()))?)
    } else {
        None
    };
    let res = measure(
        seed,
        |s| {
            let ctx = sensitive_setup_p0(s, key.clone(), config)?;
            matmul_sensitive_p0(s, &ctx, x, n, 0).map(|r| r.0)
        },
        |s| {
            let ctx = sensitive_setup_p1(s, config, pir_key.cloned())?;
            matmul_sensitive_p1(s, &ctx, y, k, 0).map(|r| r.0)
        },
    )?;
    check_product(&config.protocol_name(), &res, x, &y.to_dense())?;
    let pk = key.public();
    let pir_pk = pir_key.map(AheKeyPair::public);
    let queries = y.distinct_rows().len();
    let [s0, s1] = predict_sensitive_setup(pk, pir_pk);
    let [p0, p1] = predict_sensitive(&config, pk, pir_pk, (k, m, n), queries);
    let ciphertexts_to_p1 = match config.mode {
        SensitiveMode::FullTransfer => (k * m) as u64,
        SensitiveMode::Pir => (k * queries) as u64,
    };
    Ok(BenchRow {
        grid,
        protocol: "sensitive".into(),
        k,
        m,
        t: y.nnz(),
        mode: match config.mode {
            SensitiveMode::FullTransfer => "full-transfer".into(),
            SensitiveMode::Pir => format!("pir-{}", config.pir.backend),
        },
        measured: measured_bytes(&res),
        predicted: [add(p0, s0), add(p1, s1)],
        wall_ms: res.wall_ms,
        rmse: None,
        ciphertexts_to_p1,
    })
}

/// Least-squares R^2 of `ys` against `xs`. A constant `ys` counts as a
/// perfect fit.
pub fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    if sxx == 0.0 {
        return 0.0;
    }
    sxy * sxy / (sxx * syy)
}

struct Ctx {
    key: AheKeyPair,
    pir_key: Option<AheKeyPair>,
    backend: PirBackend,
}

impl Ctx {
    fn configs(&self) -> [SensitiveConfig; 2] {
        [SensitiveConfig::pir(self.backend), SensitiveConfig::full_transfer()]
    }
}

fn social_instance(args: &BenchArgs) -> Result<SocialDataset> {
    let cfg = SynthConfig { m: args.m, n: args.m, alpha_social: args.alpha, seed: args.seed, ..SynthConfig::default() };
    Ok(synth(&cfg)?.1)
}

fn grid_protocols(args: &BenchArgs, ctx: &Ctx, rows: &mut Vec<BenchRow>) -> Result<()> {
    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
    let s = social_instance(args)?;
    let y = ring_social(&s, &mut rng)?;
    let x = random_x(args.k, args.m, &mut rng);
    rows.push(bench_dense("protocols", &x, &y.to_dense(), args.seed)?);
    rows.push(bench_insensitive("protocols", &x, &y, args.seed)?);
    for config in ctx.configs() {
        rows.push(bench_sensitive("protocols", &x, &y, config, &ctx.key, ctx.pir_key.as_ref(), args.seed)?);
    }
    Ok(())
}

fn grid_sparsity(args: &BenchArgs, ctx: &Ctx, rows: &mut Vec<BenchRow>) -> Result<f64> {
    let base = social_instance(args)?;
    let mut rng = ChaCha20Rng::seed_from_u64(args.seed ^ 1);
    let x = random_x(args.k, args.m, &mut rng);
    let (mut ts, mut totals) = (Vec::new(), Vec::new());
    for &rate in &args.rates {
        let sample = sample_social(&base, rate, args.seed)?;
        let y = ring_social(&sample, &mut rng)?;
        rows.push(bench_dense("sparsity", &x, &y.to_dense(), args.seed)?);
        let ins = bench_insensitive("sparsity", &x, &y, args.seed)?;
        let sen = bench_sensitive("sparsity", &x, &y, ctx.configs()[0], &ctx.key, ctx.pir_key.as_ref(), args.seed)?;
        ts.push(y.nnz() as f64);
        totals.push((ins.measured_online() + sen.measured_online()) as f64);
        rows.push(ins);
        rows.push(sen);
    }
    Ok(r_squared(&ts, &totals))
}

fn grid_k(args: &BenchArgs, ctx: &Ctx, rows: &mut Vec<BenchRow>) -> Result<()> {
    let s = social_instance(args)?;
    let mut rng = ChaCha20Rng::seed_from_u64(args.seed ^ 2);
    let y = ring_social(&s, &mut rng)?;
    for &k in &args.k_grid {
        let x = random_x(k, args.m, &mut rng);
        rows.push(bench_dense("k", &x, &y.to_dense(), args.seed)?);
        rows.push(bench_insensitive("k", &x, &y, args.seed)?);
        rows.push(bench_sensitive("k", &x, &y, SensitiveConfig::full_transfer(), &ctx.key, None, args.seed)?);
    }
    Ok(())
}

/// Plaintext mf and soreg at `train_epochs`, and a short secure run whose
/// bytes are checked per epoch against the formulas.
fn grid_train(args: &BenchArgs, ctx: &Ctx, rows: &mut Vec<BenchRow>) -> Result<()> {
    let synth_cfg = SynthConfig { m: args.m, n: args.m + args.m / 2, alpha_social: args.alpha, seed: args.seed, ..SynthConfig::default() };
    let (data, social) = synth(&synth_cfg)?;
    let folds = FoldSplit::new(data.ratings.len(), FoldSplit::DEFAULT_FOLDS, args.seed)?;
    let (train, test) = folds.split(&data.ratings, 0);
    let rd = RatingData { m: data.m, n: data.n, train: &train, test: &test };
    let s = social.to_sparse();
    let k = args.k;
    for mode in [TrainMode::Mf, TrainMode::Soreg] {
        let cfg = TrainConfig { k, epochs: args.train_epochs, seed: args.seed, mode, ..TrainConfig::default() };
        let start = Instant::now();
        let (_, metrics) = train_plain(rd, &s, &cfg)?;
        rows.push(BenchRow {
            grid: "train",
            protocol: format!("train-{mode}"),
            k,
            m: data.m,
            t: s.nnz(),
            mode: format!("epochs={}", args.train_epochs),
            measured: Default::default(),
            predicted: Default::default(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            rmse: metrics.last().and_then(|m| m.test_rmse),
            ciphertexts_to_p1: 0,
        });
    }
    if args.secure_epochs == 0 {
        return Ok(());
    }
    let epochs = args.secure_epochs;
    let cfg = TrainConfig {
        k,
        epochs,
        seed: args.seed,
        mode: TrainMode::S3rec,
        sensitive_mode: SensitiveMode::FullTransfer,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let run = train_secure_inproc(rd, &s, &cfg, ctx.key.clone(), None, args.seed)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let m = data.m;
    // Per epoch: insensitive product on the diagonal, sensitive product on
    // S^T, and P1 opening its k x m share to P0.
    let pk = ctx.key.public();
    let [i0, i1] = predict_insensitive(k, m);
    let [s0, s1] = predict_sensitive(&SensitiveConfig::full_transfer(), pk, None, (k, m, m), 0);
    let open = PhaseBytes { output: 8 * (k * m) as u64, ..Default::default() };
    let per_epoch = [add(i0, s0), add(add(i1, s1), open)];
    let [setup0, setup1] = predict_sensitive_setup(pk, None);
    let scale = |p: PhaseBytes, e: u64| PhaseBytes {
        offline: p.offline * e,
        input: p.input * e,
        compute: p.compute * e,
        output: p.output * e,
    };
    let epochs_u = epochs as u64;
    rows.push(BenchRow {
        grid: "train",
        protocol: "train-s3rec".into(),
        k,
        m,
        t: s.nnz(),
        mode: format!("full-transfer epochs={epochs}"),
        measured: [PhaseBytes::measured(&run.p0_stats), PhaseBytes::measured(&run.p1_stats)],
        predicted: [add(scale(per_epoch[0], epochs_u), setup0), add(scale(per_epoch[1], epochs_u), setup1)],
        wall_ms,
        rmse: run.metrics.last().and_then(|m| m.test_rmse),
        ciphertexts_to_p1: (k * m * epochs) as u64,
    });
    Ok(())
}

fn csv(rows: &[BenchRow], header_lines: &[String]) -> String {
    let mut out = String::new();
    for l in header_lines {
        let _ = writeln!(out, "# {l}");
    }
    let _ = writeln!(out, "{CSV_HEADER}");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.3},{}",
            r.protocol,
            r.k,
            r.m,
            r.t,
            r.mode,
            r.measured_online(),
            r.predicted_online(),
            r.offline(),
            r.wall_ms,
            r.rmse.map(|v| format!("{v:.6}")).unwrap_or_default()
        );
    }
    out
}

/// Human-readable table.
pub fn render_table(rows: &[BenchRow]) -> String {
    let mut out = format!(
        "{:<10} {:<14} {:>4} {:>5} {:>6} {:<26} {:>14} {:>14} {:>12} {:>10} {:>8}\n",
        "grid", "protocol", "k", "m", "t", "mode", "measured", "predicted", "offline", "wall_ms", "rmse"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} {:<14} {:>4} {:>5} {:>6} {:<26} {:>14} {:>14} {:>12} {:>10.1} {:>8}",
            r.grid,
            r.protocol,
            r.k,
            r.m,
            r.t,
            r.mode,
            r.measured_online(),
            r.predicted_online(),
            r.offline(),
            r.wall_ms,
            r.rmse.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    out
}

fn header_lines(args: &BenchArgs) -> Vec<String> {
    vec![
        "generator = s3rec bench".into(),
        format!("grid = {:?}", args.grid).to_lowercase(),
        format!("m = {}", args.m),
        format!("k = {}", args.k),
        format!("k_grid = {:?}", args.k_grid),
        format!("rates = {:?}", args.rates),
        format!("alpha = {}", args.alpha),
        format!("ahe_bits = {}", args.ahe_bits),
        format!("pir_backend = {}", args.pir_backend),
        format!("seed = {}", args.seed),
        format!("train_epochs = {}", args.train_epochs),
        format!("secure_epochs = {}", args.secure_epochs),
    ]
}

pub fn run(args: &BenchArgs) -> Result<BenchReport> {
    let backend: PirBackend = args.pir_backend.parse()?;
    let key = generate_key(args.ahe_bits, args.seed, args.insecure_test_keys)?;
    let pir_key = match backend {
        PirBackend::AheLinear => Some(generate_key(args.ahe_bits, args.seed ^ PIR_KEY_SALT, args.insecure_test_keys)?),
        PirBackend::Plain => None,
    };
    let ctx = Ctx { key, pir_key, backend };
    let mut rows = Vec::new();
    let mut sparsity_r2 = None;
    let all = args.grid == Grid::All;
    if all || args.grid == Grid::Protocols {
        grid_protocols(args, &ctx, &mut rows)?;
    }
    if all || args.grid == Grid::Sparsity {
        sparsity_r2 = Some(grid_sparsity(args, &ctx, &mut rows)?);
    }
    if all || args.grid == Grid::K {
        grid_k(args, &ctx, &mut rows)?;
    }
    if all || args.grid == Grid::Train {
        grid_train(args, &ctx, &mut rows)?;
    }

    let mut header = header_lines(args);
    if let Some(r2) = sparsity_r2 {
        header.push(format!("sparsity_r2 = {r2:.6}"));
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&args.out, csv(&rows, &header))?;
    println!("{}", render_table(&rows));
    if let Some(r2) = sparsity_r2 {
        println!("sparsity grid: R^2 of sparse-protocol bytes against t = {r2:.6}");
    }
    info!("wrote {} rows to {}", rows.len(), args.out.display());

    let mismatches: Vec<String> = rows
        .iter()
        .filter(|r| !r.matches())
        .map(|r| format!("{} {} k={} t={}: measured {:?} vs predicted {:?}", r.protocol, r.mode, r.k, r.t, r.measured, r.predicted))
        .collect();
    if !mismatches.is_empty() {
        return Err(Error::Validation(format!(
            "measured bytes differ from the closed-form prediction:\n  {}",
            mismatches.join("\n  ")
        )));
    }
    Ok(BenchReport { rows, sparsity_r2, csv_path: args.out.clone() })
}
