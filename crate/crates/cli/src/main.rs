use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use termatlas::commands::{
    cmd_forward, cmd_report, cmd_reverse, cmd_synth, cmd_validate, ForwardOptions, ReverseOptions, SynthOptions,
};
use termatlas::cv::CvScheme;
use termatlas::error::Error;
use termatlas::pipeline::{ForwardConfig, Method, ReverseConfig};
use termatlas::synth::SynthConfig;

#[derive(Parser)]
#[command(name = "termatlas", version, about = "Forward and reverse inference atlases from labelled activation maps")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted term effects.
    Synth(SynthArgs),
    /// Check a corpus and print per-term study span and map counts.
    Validate {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Mass-univariate GLM: one t-map and significance mask per term.
    Forward(ForwardArgs),
    /// Nested cross-validated term decoding plus the reverse inference atlas.
    Reverse(ReverseArgs),
    /// Static report (tables, histograms, images) for a reverse run directory.
    Report {
        /// Run directory written by `reverse`.
        run: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of studies; anything but 19 uses 10 subjects x 10 conditions per study.
    #[arg(long)]
    studies: Option<usize>,
    /// JSON generator settings; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    effect: Option<f64>,
    #[arg(long)]
    study_effect: Option<f64>,
    #[arg(long)]
    lab_effect: Option<f64>,
    #[arg(long)]
    labs: Option<usize>,
}

#[derive(Args)]
struct ForwardArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Comma-separated terms left out of the design.
    #[arg(long, value_delimiter = ',')]
    exclude: Vec<String>,
    /// Share of voxels in each outline mask.
    #[arg(long, default_value_t = 0.05)]
    outline_fraction: f64,
    /// Accepted for symmetry with `reverse`; the forward analysis is not random.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReverseArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON run settings; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated: logistic-weighted, logistic, naive-bayes, knn.
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
    /// leave-one-study-out (loso) or leave-one-laboratory-out (lolo).
    #[arg(long)]
    cv: Option<CvScheme>,
    /// Comma-separated values, or lo:hi:n for n log-spaced values.
    #[arg(long)]
    lambda_grid: Option<String>,
    #[arg(long)]
    parcel_ratio: Option<f64>,
    #[arg(long)]
    select_frac: Option<f64>,
    /// Label permutations for chance levels: 0 to skip, otherwise at least 100.
    #[arg(long)]
    permutations: Option<usize>,
    /// Smoothing of reverse-atlas maps, in voxels.
    #[arg(long, default_value_t = 2.0)]
    sigma_map: f64,
    #[arg(long, default_value_t = 0.05)]
    outline_fraction: f64,
    #[arg(long)]
    seed: Option<u64>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let lo: f64 = parts[0].trim().parse().context("lambda grid lower bound")?;
        let hi: f64 = parts[1].trim().parse().context("lambda grid upper bound")?;
        let n: usize = parts[2].trim().parse().context("lambda grid size")?;
        if !(lo > 0.0 && hi >= lo && n >= 1) {
            bail!("lambda grid `{s}`: need 0 < lo <= hi and n >= 1");
        }
        if n == 1 {
            return Ok(vec![lo]);
        }
        let (a, b) = (lo.log10(), hi.log10());
        return Ok((0..n).map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)).collect());
    }
    s.split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("lambda value `{v}`")))
        .collect()
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut config = match (&args.config, args.studies) {
        (Some(path), _) => read_json::<SynthConfig>(path)?,
        (None, Some(n)) => SynthConfig::with_studies(n),
        (None, None) => SynthConfig::default(),
    };
    if let (Some(_), Some(n)) = (&args.config, args.studies) {
        if n != config.n_studies() {
            bail!("--studies {n} conflicts with the {} studies of --config", config.n_studies());
        }
    }
    if let Some(v) = args.noise {
        config.noise_sigma = v;
    }
    if let Some(v) = args.effect {
        config.effect_amplitude = v;
    }
    if let Some(v) = args.study_effect {
        config.study_effect_amplitude = v;
    }
    if let Some(v) = args.lab_effect {
        config.lab_effect_amplitude = v;
    }
    if let Some(v) = args.labs {
        config.n_laboratories = v;
    }
    let s = cmd_synth(&SynthOptions {
        out: args.out,
        seed: args.seed,
        config,
    })?;
    println!("manifest: {}", s.manifest.display());
    println!(
        "{} studies, {} laboratories, {} maps, {} voxels",
        s.n_studies, s.n_laboratories, s.n_maps, s.n_voxels
    );
    for (term, n) in &s.term_counts {
        println!("  {term:<28} {n:>5}");
    }
    Ok(())
}

fn validate(corpus: PathBuf) -> Result<()> {
    let v = cmd_validate(&corpus)?;
    println!("{} studies, {} maps, {} voxels", v.n_studies, v.n_maps, v.n_voxels);
    println!("{:<28} {:<22} {:>7} {:>5}  usable", "term", "category", "studies", "maps");
    for (span, (_, n)) in v.spans.iter().zip(&v.frequencies) {
        println!(
            "{:<28} {:<22} {:>7} {:>5}  {}",
            span.term,
            span.category,
            span.n_studies,
            n,
            if span.usable { "yes" } else { "no" }
        );
    }
    Ok(())
}

fn forward(args: ForwardArgs) -> Result<()> {
    let config = ForwardConfig {
        excluded: args.exclude,
        alpha: args.alpha,
        outline_fraction: args.outline_fraction,
        ..ForwardConfig::default()
    };
    let rows = cmd_forward(&ForwardOptions {
        corpus: args.corpus,
        out: args.out.clone(),
        config,
    })?;
    println!("{:<28} {:>8} {:>12} {:>8}", "term", "max t", "significant", "dof");
    for r in &rows {
        println!("{:<28} {:>8.2} {:>12} {:>8}", r.term, r.max_t, r.n_significant, r.dof);
    }
    println!("wrote {}", args.out.join("forward").display());
    Ok(())
}

fn reverse(args: ReverseArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => read_json::<ReverseConfig>(path)?,
        None => ReverseConfig::default(),
    };
    if !args.method.is_empty() {
        config.methods = args.method;
    }
    if let Some(cv) = args.cv {
        config.cv = cv;
    }
    if let Some(g) = &args.lambda_grid {
        config.lambda_grid = parse_grid(g)?;
    }
    if let Some(v) = args.parcel_ratio {
        config.parcel_ratio = v;
    }
    if let Some(v) = args.select_frac {
        config.select_frac = v;
    }
    if let Some(v) = args.permutations {
        config.n_permutations = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if (1..100).contains(&config.n_permutations) {
        return Err(Error::InvalidArgument(format!(
            "chance levels need at least 100 permutations (or 0 to skip), got {}",
            config.n_permutations
        ))
        .into());
    }
    let run = cmd_reverse(&ReverseOptions {
        corpus: args.corpus,
        out: args.out.clone(),
        config,
        sigma_map: args.sigma_map,
        outline_fraction: args.outline_fraction,
    })?;
    println!(
        "{:<18} {:<28} {:>7} {:>9} {:>9} {:>9} {:>9}",
        "method", "term", "support", "precision", "chance", "recall", "chance"
    );
    for m in &run.metrics {
        println!(
            "{:<18} {:<28} {:>7} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
            m.method.as_str(),
            m.term,
            m.support_test,
            m.precision,
            m.precision_chance,
            m.recall,
            m.recall_chance
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn report(run: PathBuf) -> Result<()> {
    let r = cmd_report(&run)?;
    println!(
        "{} metric rows reproduced from {} predictions",
        r.n_metrics, r.n_predictions
    );
    for h in &r.diagnostics.histograms {
        println!("median distance {:<14} {:.3} ({} pairs)", h.group, h.median, h.n_pairs);
    }
    println!("wrote {}", r.dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Validate { corpus } => validate(corpus),
        Command::Forward(a) => forward(a),
        Command::Reverse(a) => reverse(a),
        Command::Report { run } => report(run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let pool = match cli.jobs {
        Some(0) => {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = match err.downcast_ref::<Error>() {
                Some(e @ Error::Collinear { groups }) => {
                    for g in groups {
                        eprintln!("  linearly dependent: {}", g.join(", "));
                    }
                    eprintln!("  drop one term of each group with --exclude");
                    e.exit_code()
                }
                Some(e) => e.exit_code(),
                None => 2,
            };
            ExitCode::from(code as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::parse_grid;

    #[test]
    fn log_grid_hits_both_ends() {
        let g = parse_grid("1e-2:1e3:6").unwrap();
        assert_eq!(g.len(), 6);
        for (v, want) in g.iter().zip([1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3]) {
            assert!((v / want - 1.0).abs() < 1e-12, "{v} vs {want}");
        }
        assert_eq!(parse_grid("4:4:1").unwrap(), vec![4.0]);
    }

    #[test]
    fn list_grid_and_rejects() {
        assert_eq!(parse_grid("0.5, 2").unwrap(), vec![0.5, 2.0]);
        assert!(parse_grid("1:0.5:3").is_err());
        assert!(parse_grid("0:1:3").is_err());
        assert!(parse_grid("a,b").is_err());
    }
}
