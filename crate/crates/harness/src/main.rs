use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use crn_harness::config::{parse_mix, ConfigFile, ModeArg};
use crn_harness::{run, Experiment, ExperimentConfig, FileSpec, Format};

#[derive(Parser)]
#[command(
    name = "crn-sim",
    version,
    about = "Cognitive radio channel allocation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo allocation attempts per DN
    Attempts(Common),
    /// Reservation Markov chain sweep over 1/T and n
    Markov(Common),
    /// File transfer overhead and jitter
    Transfer(Common),
    /// Success rates against the contiguous baselines over a node sweep
    Success(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Args)]
struct Common {
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    channels: Option<u32>,
    #[arg(long)]
    primary: Option<u32>,
    /// Free channel count injected in place of the topology model
    #[arg(long)]
    free: Option<u32>,
    #[arg(long)]
    dn: Option<u32>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    range: Option<f64>,
    #[arg(long)]
    trials: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Traffic mix as `DN:proportion,...`
    #[arg(long)]
    mix: Option<String>,
    /// File size in bits, for `transfer`
    #[arg(long)]
    bits: Option<f64>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat key-value config; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Fdm,
    Ofdm,
}

fn build(experiment: Experiment, a: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut file = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<ConfigFile>(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => ConfigFile::default(),
    };
    if let Some(e) = file.experiment {
        anyhow::ensure!(
            e == experiment,
            "config file is for {e:?}, subcommand is {experiment:?}"
        );
    }
    if let Some(m) = a.mode {
        file.mode = Some(match m {
            Mode::Fdm => ModeArg::Fdm,
            Mode::Ofdm => ModeArg::Ofdm,
        });
    }
    let mut cfg = ExperimentConfig::new(experiment, file.mode.unwrap_or(ModeArg::Fdm).into());
    file.apply(&mut cfg)?;
    macro_rules! flag {
        ($v:expr => $dst:expr) => {
            if let Some(v) = $v {
                $dst = v;
            }
        };
    }
    flag!(a.channels => cfg.channels);
    flag!(a.primary => cfg.pi);
    flag!(a.nodes => cfg.nodes);
    flag!(a.range => cfg.range);
    flag!(a.trials => cfg.trials);
    flag!(a.seed => cfg.seed);
    if a.free.is_some() {
        cfg.free_override = a.free;
    }
    if a.dn.is_some() {
        cfg.dn = a.dn;
    }
    if let Some(mix) = &a.mix {
        cfg.traffic_mix = parse_mix(mix)?;
    }
    if let Some(bits) = a.bits {
        let dn = cfg.dn.or(cfg.file_spec.map(|f| f.dn)).unwrap_or(8);
        cfg.file_spec = Some(FileSpec {
            size_bits: bits,
            dn,
        });
    } else if let (Some(fs), Some(dn)) = (cfg.file_spec.as_mut(), a.dn) {
        fs.dn = dn;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let (experiment, args) = match &cli.command {
        Command::Attempts(a) => (Experiment::Attempts, a),
        Command::Markov(a) => (Experiment::Markov, a),
        Command::Transfer(a) => (Experiment::Transfer, a),
        Command::Success(a) => (Experiment::Success, a),
    };
    let cfg = build(experiment, args)?;
    let report = run(&cfg)?;
    let format = match args.format {
        FormatArg::Csv => Format::Csv,
        FormatArg::Json => Format::Json,
    };
    match &args.out {
        Some(path) => report.write(path, format)?,
        None => print!("{}", report.render(format)?),
    }
    Ok(())
}
