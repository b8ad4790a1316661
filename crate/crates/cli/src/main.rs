use std::fs::File;
use std::io::{self, BufWriter};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};
use hybridps::kvstore::StoreMode;
use hybridps::launcher::config::{RunConfig, TransportKind, KEYS};
use hybridps::launcher::{
    bench_allreduce, child_main, compare_modes, launch, write_bench, write_summary, ChildSpec, LaunchError,
    ProcessSpawner, Spawner,
};
use hybridps::trainer::write_metrics;

const DEFAULT_SIZES: &str = "4MiB,16MiB,64MiB";

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key=value configuration file; flags override it"),
    );
    KEYS.iter().fold(cmd, |cmd, key| {
        cmd.arg(
            Arg::new(*key)
                .long(key.replace('_', "-"))
                .alias(*key)
                .value_name("VALUE"),
        )
    })
}

fn cli() -> Command {
    Command::new("hybridps")
        .about("Parameter-server training with ring collectives inside client groups")
        .subcommand_required(true)
        .subcommand(config_args(Command::new("train").about("Run one training job")))
        .subcommand(
            config_args(Command::new("bench").about("Time allreduce variants in pure-mpi mode")).arg(
                Arg::new("sizes")
                    .long("sizes")
                    .value_name("LIST")
                    .default_value(DEFAULT_SIZES)
                    .help("comma-separated message sizes, e.g. 4MiB,16MiB or plain bytes"),
            ),
        )
        .subcommand(config_args(
            Command::new("compare").about("Run all six parallelization modes; --out names a directory"),
        ))
}

fn load_config(m: &ArgMatches, overrides: &[(&str, &str)]) -> Result<RunConfig, LaunchError> {
    let mut text = match m.get_one::<String>("config") {
        Some(path) => std::fs::read_to_string(path)?,
        None => String::new(),
    };
    let mut put = |k: &str, v: &str| -> Result<(), LaunchError> {
        if v.contains('\n') {
            return Err(LaunchError::Config(format!("--{k} must be a single line")));
        }
        text.push_str(&format!("\n{k}={v}"));
        Ok(())
    };
    for (k, v) in overrides {
        put(k, v)?;
    }
    for key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            put(key, v)?;
        }
    }
    Ok(RunConfig::parse(&text)?)
}

fn parse_size(s: &str) -> Result<u64, LaunchError> {
    let s = s.trim();
    let (num, mult) = [("GiB", 1u64 << 30), ("MiB", 1 << 20), ("KiB", 1 << 10)]
        .iter()
        .find_map(|(suf, m)| s.strip_suffix(suf).map(|n| (n, *m)))
        .unwrap_or((s, 1));
    num.trim()
        .parse::<u64>()
        .map(|n| n * mult)
        .map_err(|_| LaunchError::Config(format!("bad size '{s}'")))
}

fn spawner(cfg: &RunConfig) -> Result<Option<ProcessSpawner>, LaunchError> {
    Ok(match cfg.transport {
        TransportKind::Tcp => Some(ProcessSpawner::current_exe()?),
        TransportKind::Inproc => None,
    })
}

fn run(m: &ArgMatches) -> Result<(), LaunchError> {
    match m.subcommand() {
        Some(("train", m)) => {
            let cfg = load_config(m, &[])?;
            let out = launch(&cfg)?;
            if cfg.out.is_none() {
                write_metrics(io::stdout().lock(), &out.metrics)?;
            }
        }
        Some(("bench", m)) => {
            let cfg = load_config(
                m,
                &[("mode", StoreMode::PureMpi.name()), ("servers", "0"), ("clients", "1")],
            )?;
            let sizes = m
                .get_one::<String>("sizes")
                .map(String::as_str)
                .unwrap_or(DEFAULT_SIZES)
                .split(',')
                .map(parse_size)
                .collect::<Result<Vec<_>, _>>()?;
            let rows = bench_allreduce(&cfg, &sizes)?;
            match &cfg.out {
                Some(p) => write_bench(BufWriter::new(File::create(p)?), &rows)?,
                None => write_bench(io::stdout().lock(), &rows)?,
            }
        }
        Some(("compare", m)) => {
            let cfg = load_config(m, &[])?;
            let sp = spawner(&cfg)?;
            let report = compare_modes(&cfg, sp.as_ref().map(|s| s as &dyn Spawner))?;
            match &cfg.out {
                None => write_summary(io::stdout().lock(), &report.summary)?,
                Some(dir) => log::info!("wrote {}", dir.join("summary.csv").display()),
            }
        }
        _ => unreachable!("subcommand is required"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // launched by a parent as a server or worker
    if let Some(spec) = ChildSpec::from_env() {
        return ExitCode::from(child_main(spec) as u8);
    }
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hybridps: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
