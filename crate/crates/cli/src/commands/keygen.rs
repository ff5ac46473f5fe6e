use std::fs;
use std::path::PathBuf;

use clap::Args;
use log::info;
use s3rec::Result;

use crate::generate_key;

#[derive(Args, Clone, Debug)]
pub struct KeygenArgs {
    #[arg(long, default_value_t = 2048)]
    pub bits: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// File stem: writes `<name>.key` (secret) and `<name>.pub`.
    #[arg(long, default_value = "p0")]
    pub name: String,
    #[arg(long, default_value = "keys")]
    pub out_dir: PathBuf,
    /// Allow moduli other than 2048/3072 bits. Only for tests.
    #[arg(long)]
    pub insecure_test_keys: bool,
}

pub fn run(args: &KeygenArgs) -> Result<(PathBuf, PathBuf)> {
    let key = generate_key(args.bits, args.seed, args.insecure_test_keys)?;
    fs::create_dir_all(&args.out_dir)?;
    let secret = args.out_dir.join(format!("{}.key", args.name));
    let public = args.out_dir.join(format!("{}.pub", args.name));
    key.save(&secret, &public)?;
    info!("{}-bit key, fingerprint {:016x}", key.public().bits(), key.public().fingerprint());
    Ok((secret, public))
}
