use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use fedsim_cli::{
    config_keys, parse_config, run_experiment, run_sweep, Axis, CliError, RunOptions, RunStatus,
};

fn command() -> Command {
    let keys = config_keys();
    let with_common = |cmd: Command| {
        let cmd = cmd
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("PATH")
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("flat `key = value` config file"),
            )
            .arg(
                Arg::new("out")
                    .long("out")
                    .value_name("DIR")
                    .default_value("out")
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("output directory"),
            );
        keys.iter().fold(cmd, |cmd, key| {
            cmd.arg(
                Arg::new(key.clone())
                    .long(key.clone())
                    .alias(key.replace('_', "-"))
                    .value_name("VALUE")
                    .help_heading("Config overrides")
                    .action(ArgAction::Set),
            )
        })
    };
    Command::new("fedsim")
        .about("Deterministic federated-optimization simulator")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_common(Command::new("run").about("Run one experiment")))
        .subcommand(
            with_common(Command::new("sweep").about("Run one experiment per value of an axis")).arg(
                Arg::new("axis")
                    .long("axis")
                    .required(true)
                    .value_name("KEY=V1,V2,...")
                    .help("key and values to sweep; `k1+k2=a+b,c+d` varies keys jointly"),
            ),
        )
        .subcommand(with_common(
            Command::new("heatmap").about("Run a self-attention experiment and write the averaged attention matrix"),
        ))
}

fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    config_keys()
        .into_iter()
        .filter_map(|k| m.get_one::<String>(&k).map(|v| (k, v.clone())))
        .collect()
}

fn main() -> ExitCode {
    let matches = command().get_matches();
    let (name, m) = matches.subcommand().expect("subcommand required");
    let config = m.get_one::<PathBuf>("config").map(PathBuf::as_path);
    let out = m.get_one::<PathBuf>("out").expect("has default");
    let flags = overrides(m);

    let result: Result<(), CliError> = match name {
        "run" | "heatmap" => parse_config(config, &flags).and_then(|cfg| {
            let opts = RunOptions {
                heatmap: name == "heatmap",
                ..Default::default()
            };
            let s = run_experiment(&cfg, out, opts)?;
            if let Some(a) = s.summary_accuracy {
                println!("summary_accuracy {a:.4}");
            }
            if let Some(r) = s.matching_rate {
                println!("matching_rate {r:.4}");
            }
            println!("wrote {}", out.display());
            Ok(())
        }),
        "sweep" => Axis::parse(m.get_one::<String>("axis").expect("required")).and_then(|axis| {
            let cells = run_sweep(config, &flags, &axis, out, RunOptions::default())?;
            let mut failed = 0;
            for c in &cells {
                match (&c.summary, &c.error) {
                    (Some(s), None) if s.status == RunStatus::Ok => println!(
                        "{} ok {}",
                        c.value,
                        s.summary_accuracy.map(|a| format!("{a:.4}")).unwrap_or_default()
                    ),
                    (_, e) => {
                        failed += 1;
                        println!("{} failed {}", c.value, e.as_deref().unwrap_or(""));
                    }
                }
            }
            println!("wrote {}", out.display());
            match failed {
                0 => Ok(()),
                _ => Err(CliError::Run(fedsim::Error::InvalidArgument {
                    name: "sweep",
                    reason: format!("{failed} of {} cells failed", cells.len()),
                })),
            }
        }),
        _ => unreachable!("all subcommands handled"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
