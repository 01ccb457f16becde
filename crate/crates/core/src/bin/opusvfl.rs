use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use opus_vfl::config::{BackdoorConfig, ExperimentConfig, Mode};
use opus_vfl::error::{Error, Result};
use opus_vfl::experiment::{run_experiment, RunOutput};
use opus_vfl::log::{read_csv, render_report};

#[derive(Parser)]
#[command(
    name = "opusvfl",
    version,
    about = "Vertical federated learning simulator with DP activations and token incentives"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(Common),
    /// Run one experiment per value of a config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted config key, e.g. `privacy.epsilon` or `incentive.budget`.
        #[arg(long)]
        param: String,
        /// Comma-separated TOML values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Matched opus and vanilla backdoor runs over poisoning fractions.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Poisoning fractions; defaults to `attack.pd_list` or 0.1,0.5.
        #[arg(long, value_delimiter = ',')]
        pd: Vec<f64>,
        /// Seeds; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Render a run CSV as a plain-text summary.
    Report {
        /// Path to a `run.csv`.
        log: PathBuf,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["opus", "vanilla"])]
    mode: Option<String>,
    /// Treat out-of-bound design parameters as errors.
    #[arg(long)]
    strict: bool,
    /// Output directory.
    #[arg(long, env = "OPUSVFL_OUT", default_value = "out")]
    out: PathBuf,
}

fn load_table(common: &Common) -> Result<toml::Table> {
    match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        }
        None => Ok(toml::Table::new()),
    }
}

fn set_key(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Config(format!("bad key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p} in {key:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn finish(table: toml::Table, common: &Common) -> Result<ExperimentConfig> {
    let text = toml::to_string(&table).map_err(|e| Error::Serde(e.to_string()))?;
    let mut cfg = ExperimentConfig::from_toml_str(&text)?;
    if let Some(seed) = common.seed {
        cfg.training.seed = seed;
    }
    if let Some(mode) = &common.mode {
        cfg.training.mode = mode.parse()?;
    }
    for w in cfg.validate(common.strict)? {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("run.csv");
    fs::write(&csv, out.csv()).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&out.summary).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
}

fn describe(out: &RunOutput) -> String {
    let s = &out.summary;
    let dropped = s.dropouts.len();
    format!(
        "rounds {} | test acc {:.4} | train acc {:.4} | dropouts {dropped} | status {:?}",
        s.rounds_completed, s.final_test_accuracy, s.final_train_accuracy, s.status
    )
}

fn run(common: &Common) -> Result<()> {
    let cfg = finish(load_table(common)?, common)?;
    let out = run_experiment(&cfg)?;
    write_run(&common.out, &out)?;
    println!("{}", describe(&out));
    for c in &out.summary.clients {
        println!(
            "client {:>2}: tokens {:>10.3}  mean I {:>9.3}  eps {:.4}  snr {}",
            c.client,
            c.total_tokens,
            c.mean_importance,
            c.final_epsilon,
            c.snr_db.map(|v| format!("{v:.2} dB")).unwrap_or_else(|| "n/a".into())
        );
    }
    println!("wrote {}", common.out.display());
    Ok(())
}

fn sweep(common: &Common, param: &str, values: &[String]) -> Result<()> {
    let base = load_table(common)?;
    let mut table = String::from("value,final_test_accuracy,final_train_accuracy,dropouts,rounds,status\n");
    for v in values {
        let mut t = base.clone();
        set_key(&mut t, param, v)?;
        let cfg = finish(t, common)?;
        let out = run_experiment(&cfg)?;
        write_run(&common.out.join(format!("{param}={v}")), &out)?;
        let s = &out.summary;
        let status = serde_json::to_string(&s.status).unwrap_or_default().replace(',', ";");
        let _ = writeln!(
            table,
            "{v},{:.6},{:.6},{},{},{status}",
            s.final_test_accuracy,
            s.final_train_accuracy,
            s.dropouts.len(),
            s.rounds_completed
        );
        println!("{param} = {v}: {}", describe(&out));
    }
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    let path = common.out.join("sweep.csv");
    fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn attack(common: &Common, pd: &[f64], seeds: &[u64]) -> Result<()> {
    let base = finish(load_table(common)?, common)?;
    let pds = if !pd.is_empty() {
        pd.to_vec()
    } else if !base.attack.pd_list.is_empty() {
        base.attack.pd_list.clone()
    } else {
        vec![0.1, 0.5]
    };
    let seeds = if seeds.is_empty() {
        vec![base.training.seed]
    } else {
        seeds.to_vec()
    };
    let mut table = String::from("mode,seed,pd,asr,clean_accuracy,label_inference_proxy,feature_inference_proxy_mse\n");
    for &p in &pds {
        for &seed in &seeds {
            for mode in [Mode::Opus, Mode::Vanilla] {
                let mut cfg = base.clone();
                cfg.training.seed = seed;
                cfg.training.mode = mode;
                let mut b = cfg.attack.backdoor.clone().unwrap_or_else(BackdoorConfig::default);
                b.poison_fraction = p;
                cfg.attack.backdoor = Some(b);
                cfg.validate(common.strict)?;
                let out = run_experiment(&cfg)?;
                write_run(&common.out.join(format!("{mode}-pd{p}-seed{seed}")), &out)?;
                let r = out.summary.attack.clone().expect("backdoor configured");
                let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
                let _ = writeln!(
                    table,
                    "{mode},{seed},{p},{},{:.6},{},{}",
                    opt(r.asr),
                    r.clean_accuracy,
                    opt(r.label_inference_proxy_accuracy),
                    opt(r.feature_inference_proxy.map(|f| f.mse))
                );
                println!(
                    "{mode:>7} seed {seed} pd {p}: ASR {} clean acc {:.4}",
                    opt(r.asr),
                    r.clean_accuracy
                );
            }
        }
    }
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    let path = common.out.join("attack.csv");
    fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(common) => run(common),
        Command::Sweep { common, param, values } => sweep(common, param, values),
        Command::Attack { common, pd, seeds } => attack(common, pd, seeds),
        Command::Report { log } => read_csv(log).map(|rows| print!("{}", render_report(&rows))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
