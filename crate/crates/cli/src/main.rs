use std::process::ExitCode;

use clap::{Parser, Subcommand};
use s3rec::Error;
use s3rec_cli::commands::{bench, dealer, gen_data, keygen, train};

#[derive(Parser, Debug)]
#[command(name = "s3rec", version, about = "Two-party secure social recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic rating matrix and correlated social graph.
    GenData(gen_data::GenDataArgs),
    /// Write per-party multiplication-triple stores (and optionally keys).
    Dealer(dealer::DealerArgs),
    /// Generate a Paillier key pair.
    Keygen(keygen::KeygenArgs),
    /// Train mf, soreg or s3rec and write metrics and the model.
    Train(train::TrainArgs),
    /// Measure protocol traffic and check it against the closed-form costs.
    Bench(bench::BenchArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        Error::Transport(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data::run(a).map(|out| {
            println!("ratings = {}", out.ratings.display());
            println!("social = {}", out.social.display());
            if let Some(p) = out.sampled {
                println!("social_sampled = {}", p.display());
            }
        }),
        Command::Dealer(a) => dealer::run(a).map(|out| {
            println!("triples = {}", out.count);
            println!("offline_bytes_per_party = {}", out.offline_bytes_per_party);
        }),
        Command::Keygen(a) => keygen::run(a).map(|(secret, public)| {
            println!("secret_key = {}", secret.display());
            println!("public_key = {}", public.display());
        }),
        Command::Train(a) => train::run(a).map(|out| {
            println!("metrics = {}", out.metrics_path.display());
            if let Some(r) = out.final_test_rmse {
                println!("final_test_rmse = {r:.6}");
            }
            if let Some(d) = out.final_social_deviation {
                println!("final_social_deviation = {d:.3e}");
            }
        }),
        Command::Bench(a) => bench::run(a).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
