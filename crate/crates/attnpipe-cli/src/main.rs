//! Command-line front end: run experiments, render diagrams, print stage
//! allocations and micro-benchmark the attention operator.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use attnpipe::attention::{self, AttentionMode, AttentionProblem};
use attnpipe::encoder_graph::{allocate_stages_with, build_encoder_graph, enumerate_replication};
use attnpipe::gantt;
use attnpipe::pipeline::PipelineTrace;
use attnpipe::workload::{self, load_config};

#[derive(Parser)]
#[command(
    name = "attnpipe",
    about = "Quantized top-k sparse attention and length-aware pipeline scheduling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write reports, traces and diagrams.
    Run {
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a trace file as an SVG timing diagram.
    Gantt { trace: PathBuf, out: PathBuf },
    /// Print the stage allocation for a config.
    Allocate {
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Micro-benchmark sparse against dense attention on random tensors.
    BenchAttention {
        #[arg(long, default_value_t = 177)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 30)]
        k: usize,
        #[arg(long, default_value_t = 4)]
        bits: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run { config, seed, out } => {
            let mut cfg =
                load_config(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(out) = out {
                cfg.output.dir = out;
            }
            let report = workload::run_and_write(&cfg)?;
            print!("{}", report.to_text());
            println!("files written to {}", cfg.output.dir.display());
        }
        Command::Gantt { trace, out } => {
            let text = std::fs::read_to_string(&trace)
                .with_context(|| format!("reading {}", trace.display()))?;
            let trace = PipelineTrace::from_text(&text)?;
            gantt::emit_gantt(&trace, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Allocate { config, seed } => {
            let mut cfg =
                load_config(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let lengths = workload::generate_workload(&cfg.workload, cfg.seed)?;
            let mean = lengths.iter().sum::<u64>() as f64 / lengths.len() as f64;
            let s_avg = cfg.s_avg.unwrap_or_else(|| (mean.round() as u64).max(1));
            let (layers, hidden, heads) = cfg.model.dims();
            let graph = build_encoder_graph(layers, hidden, heads, cfg.k)?;
            let mut alloc = allocate_stages_with(&graph, s_avg, &cfg.budget, &cfg.schedule)?;
            alloc.replication =
                enumerate_replication(&graph, &alloc, s_avg, &cfg.budget, &cfg.schedule);
            print!("{}", alloc.to_text(&graph));
        }
        Command::BenchAttention {
            n,
            d,
            k,
            bits,
            seed,
        } => {
            bench_attention(n, d, k, bits, seed)?;
        }
    }
    Ok(())
}

fn bench_attention(n: usize, d: usize, k: usize, bits: u8, seed: u64) -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let mut mat = || Array2::from_shape_fn((n, d), |_| normal.sample(&mut rng));
    let problem = AttentionProblem::new(mat(), mat(), mat())?;

    let t0 = Instant::now();
    let dense = attention::dense_attention(&problem)?;
    let dense_time = t0.elapsed();

    let t1 = Instant::now();
    let sparse = attention::sparse_attention(&problem, k, bits)?;
    let sparse_time = t1.elapsed();

    let scale = dense.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let err = (&dense - &sparse.z)
        .iter()
        .fold(0.0f64, |m, &x| m.max(x.abs()));

    let dense_counts = attention::count_ops(n, d, k, bits, AttentionMode::Dense);
    let sparse_counts = sparse.op_counts;
    println!("attention benchmark: n={n} d={d} k={k} bits={bits} seed={seed}");
    println!(
        "dense : {:>12} exact MACs, {:>10} exps, {:?}",
        dense_counts.exact_macs, dense_counts.exp_evals, dense_time
    );
    println!(
        "sparse: {:>12} exact MACs, {:>10} exps, {:>12} low-bit MACs, {:?}",
        sparse_counts.exact_macs, sparse_counts.exp_evals, sparse_counts.lowbit_macs, sparse_time
    );
    println!(
        "exact-MAC reduction: {:.2}%",
        100.0 * (1.0 - sparse_counts.exact_macs as f64 / dense_counts.exact_macs as f64)
    );
    println!("max abs error vs dense: {:.3e} (scale {:.3e})", err, scale);
    Ok(())
}
