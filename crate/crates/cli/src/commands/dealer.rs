use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use log::info;
use s3rec::mpcshare::{dealer_generate, verify_triples, TripleStore};
use s3rec::securemm::st_mpc_triples;
use s3rec::{Error, PartyId, Result};

use crate::{comment_header, generate_key};

/// Bytes of one triple share on disk and on the wire.
pub const TRIPLE_BYTES: u64 = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SizingProtocol {
    /// `Z = X Y` with `X` k x m and `Y` m x m, fully dense.
    Dense,
    /// Sparse `Y` with public support of size `t`.
    Insensitive,
    /// Needs no triples.
    Sensitive,
    /// One evaluation of the social term.
    StMpc,
    /// Secure training over `epochs` epochs.
    Train,
}

impl fmt::Display for SizingProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

/// Triple requirement for a protocol and the formula that produced it.
pub fn required_triples(
    protocol: SizingProtocol,
    k: usize,
    m: usize,
    t: Option<usize>,
    epochs: usize,
) -> Result<(usize, String)> {
    Ok(match protocol {
        SizingProtocol::Dense => (k * m * m, format!("k*m^2 with k={k}, m={m}")),
        SizingProtocol::Insensitive => {
            let t = t.ok_or_else(|| Error::Usage("insensitive sizing needs --t".into()))?;
            (k * t, format!("k*t with k={k}, t={t}"))
        }
        SizingProtocol::Sensitive => (0, "0 (the sensitive protocol uses no triples)".into()),
        SizingProtocol::StMpc => (st_mpc_triples(k, m), format!("k*m with k={k}, m={m}")),
        SizingProtocol::Train => {
            (epochs * st_mpc_triples(k, m), format!("epochs*k*m with epochs={epochs}, k={k}, m={m}"))
        }
    })
}

#[derive(Args, Clone, Debug)]
pub struct DealerArgs {
    /// Number of triples. Defaults to the requirement of `--protocol`.
    #[arg(long)]
    pub count: Option<usize>,
    /// Size the store for this protocol; with `--count`, checks it suffices.
    #[arg(long, value_enum)]
    pub protocol: Option<SizingProtocol>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write P0's Paillier key pair of this size.
    #[arg(long)]
    pub ahe_bits: Option<u32>,
    #[arg(long)]
    pub insecure_test_keys: bool,
    #[arg(long, default_value = "triples")]
    pub out_dir: PathBuf,
    /// Verify the stores already in `--out-dir` instead of generating.
    #[arg(long)]
    pub check: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DealerOutput {
    pub count: usize,
    pub offline_bytes_per_party: u64,
}

pub fn store_paths(dir: &Path) -> [PathBuf; 2] {
    [dir.join("triples_p0.bin"), dir.join("triples_p1.bin")]
}

/// Loads both stores from `dir` and checks that they reconstruct to valid
/// triples. Returns the triple count.
pub fn check_dir(dir: &Path) -> Result<usize> {
    let [p0, p1] = store_paths(dir);
    let s0 = TripleStore::load(PartyId::P0, &p0)?;
    let s1 = TripleStore::load(PartyId::P1, &p1)?;
    if !verify_triples(&s0, &s1) {
        return Err(Error::Validation(format!("triple stores in {} are inconsistent", dir.display())));
    }
    Ok(s0.remaining())
}

fn resolve_count(args: &DealerArgs) -> Result<usize> {
    let Some(protocol) = args.protocol else {
        return args.count.ok_or_else(|| Error::Usage("dealer needs --count or --protocol".into()));
    };
    let m = args.m.ok_or_else(|| Error::Usage(format!("sizing for {protocol} needs --m")))?;
    let (needed, formula) = required_triples(protocol, args.k, m, args.t, args.epochs)?;
    match args.count {
        Some(count) if count < needed => Err(Error::Config(format!(
            "{count} triples are not enough: {protocol} requires {needed} = {formula}"
        ))),
        Some(count) => Ok(count),
        None => Ok(needed),
    }
}

pub fn run(args: &DealerArgs) -> Result<DealerOutput> {
    if args.check {
        let count = check_dir(&args.out_dir)?;
        info!("{count} consistent triples in {}", args.out_dir.display());
        return Ok(DealerOutput { count, offline_bytes_per_party: TRIPLE_BYTES * count as u64 });
    }
    let count = resolve_count(args)?;
    let (s0, s1) = dealer_generate(count, args.seed);
    fs::create_dir_all(&args.out_dir)?;
    let [p0, p1] = store_paths(&args.out_dir);
    s0.save(&p0)?;
    s1.save(&p1)?;
    if let Some(bits) = args.ahe_bits {
        let key = generate_key(bits, args.seed, args.insecure_test_keys)?;
        key.save(&args.out_dir.join("p0.key"), &args.out_dir.join("p0.pub"))?;
    }
    let offline = TRIPLE_BYTES * count as u64;
    let mut lines = vec![
        "generator = s3rec dealer".to_string(),
        format!("count = {count}"),
        format!("seed = {}", args.seed),
        format!("k = {}", args.k),
    ];
    if let Some(p) = args.protocol {
        lines.push(format!("protocol = {p}"));
    }
    if let Some(m) = args.m {
        lines.push(format!("m = {m}"));
    }
    if let Some(t) = args.t {
        lines.push(format!("t = {t}"));
    }
    lines.push(format!("epochs = {}", args.epochs));
    if let Some(bits) = args.ahe_bits {
        lines.push(format!("ahe_bits = {bits}"));
    }
    let summary = format!("{}offline_bytes_per_party = {offline}\n", comment_header(lines));
    fs::write(args.out_dir.join("dealer.txt"), summary)?;
    info!("wrote {count} triples per party ({offline} offline bytes each) to {}", args.out_dir.display());
    Ok(DealerOutput { count, offline_bytes_per_party: offline })
}
