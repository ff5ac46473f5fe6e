use std::fs;
use std::path::PathBuf;

use clap::Args;
use log::info;
use s3rec::dataio::{ratings_to_tsv, sample_social, social_to_tsv, synth, SynthConfig};
use s3rec::Result;

#[derive(Args, Clone, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 20)]
    pub m: usize,
    #[arg(long, default_value_t = 30)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub k_true: usize,
    /// Social density: the graph gets round(alpha * m^2) directed edges.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.3)]
    pub noise_sd: f64,
    #[arg(long, default_value_t = 0.3)]
    pub rating_density: f64,
    #[arg(long, default_value_t = 0.8)]
    pub blend: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write a subsample of the social graph kept at this rate.
    #[arg(long, value_parser = parse_rate)]
    pub sample_rate: Option<f64>,
    #[arg(long, default_value = "data")]
    pub out_dir: PathBuf,
}

/// Accepts rates in (0, 1].
pub fn parse_rate(s: &str) -> std::result::Result<f64, String> {
    let rate: f64 = s.parse().map_err(|e| format!("'{s}' is not a number: {e}"))?;
    if rate > 0.0 && rate <= 1.0 {
        Ok(rate)
    } else {
        Err(format!("sampling rate must lie in (0, 1], got {rate}"))
    }
}

#[derive(Clone, Debug)]
pub struct GenDataOutput {
    pub ratings: PathBuf,
    pub social: PathBuf,
    pub sampled: Option<PathBuf>,
}

impl GenDataArgs {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            m: self.m,
            n: self.n,
            k_true: self.k_true,
            alpha_social: self.alpha,
            noise_sd: self.noise_sd,
            rating_density: self.rating_density,
            blend: self.blend,
            seed: self.seed,
        }
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec![
            "generator = s3rec gen-data".to_string(),
            format!("m = {}", self.m),
            format!("n = {}", self.n),
            format!("k_true = {}", self.k_true),
            format!("alpha = {}", self.alpha),
            format!("noise_sd = {}", self.noise_sd),
            format!("rating_density = {}", self.rating_density),
            format!("blend = {}", self.blend),
            format!("seed = {}", self.seed),
        ];
        if let Some(rate) = self.sample_rate {
            h.push(format!("sample_rate = {rate}"));
        }
        h
    }
}

pub fn run(args: &GenDataArgs) -> Result<GenDataOutput> {
    let (ratings, social) = synth(&args.synth_config())?;
    fs::create_dir_all(&args.out_dir)?;
    let header = args.header();
    let out = GenDataOutput {
        ratings: args.out_dir.join("ratings.tsv"),
        social: args.out_dir.join("social.tsv"),
        sampled: args.sample_rate.map(|rate| args.out_dir.join(format!("social_sampled_{rate}.tsv"))),
    };
    fs::write(&out.ratings, ratings_to_tsv(&ratings, &header))?;
    fs::write(&out.social, social_to_tsv(&social, &ratings.user_ids, &header))?;
    if let (Some(rate), Some(path)) = (args.sample_rate, &out.sampled) {
        let sampled = sample_social(&social, rate, args.seed)?;
        fs::write(path, social_to_tsv(&sampled, &ratings.user_ids, &header))?;
        info!("sampled social graph keeps {} of {} edges", sampled.nnz(), social.nnz());
    }
    info!(
        "wrote {} ratings over {} users x {} items and {} social edges to {}",
        ratings.ratings.len(),
        ratings.m,
        ratings.n,
        social.nnz(),
        args.out_dir.display()
    );
    Ok(out)
}
