//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde_json::{Map, Value};

use crate::commands::{self, SubSpec, SUBCOMMANDS};
use crate::config;
use crate::error::CliError;

fn sub_command(spec: &SubSpec) -> Command {
    let defaults = serde_json::to_string_pretty(&(spec.defaults)()).unwrap_or_default();
    let mut cmd = Command::new(spec.name)
        .about(spec.about)
        .after_help(format!(
            "Every config key can be given in the --config JSON file, as a flag (key kebab-cased) or via --set key=value. \
             Flags override the file, --set overrides flags. Flag values are read as JSON, then as a comma list, then as text.\n\n\
             Defaults:\n{defaults}"
        ))
        .arg(Arg::new("config").long("config").value_name("FILE").help("JSON config file"))
        .arg(
            Arg::new("set")
                .long("set")
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .help("set any key, dotted for nested keys (e.g. model.k_vpd=8)"),
        );
    for pk in spec.paths {
        let mut arg = Arg::new(pk.key).long(pk.key).value_name("PATH").help(pk.help);
        if pk.multi {
            arg = arg.action(ArgAction::Append);
        }
        cmd = cmd.arg(arg);
    }
    for f in spec.flags {
        cmd = cmd.arg(Arg::new(f.key).long(f.long).value_name("VALUE").allow_hyphen_values(true).help(f.help));
    }
    cmd
}

pub fn command() -> Command {
    let mut cmd = Command::new("sapflux")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Ensemble forecasts of tree sap flux and water-use")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for spec in SUBCOMMANDS {
        cmd = cmd.subcommand(sub_command(spec));
    }
    cmd.subcommand(
        Command::new("rerun")
            .about("Repeat a run from its manifest after checking input digests")
            .arg(Arg::new("manifest").long("manifest").value_name("FILE").required(true).help("manifest.json of the run"))
            .arg(Arg::new("out").long("out").value_name("DIR").help("output directory (default: the recorded one)")),
    )
}

/// Merge config file, named flags and `--set` into one map.
fn merged_config(spec: &SubSpec, m: &ArgMatches) -> Result<Map<String, Value>, CliError> {
    let mut map = match m.get_one::<String>("config") {
        Some(path) => {
            let path = PathBuf::from(path);
            let mut map = config::load_file(&path)?;
            let dir = path.parent().map(|p| p.to_path_buf()).unwrap_or_default();
            config::rebase_paths(&mut map, spec.paths, &dir);
            map
        }
        None => Map::new(),
    };
    for pk in spec.paths {
        if pk.multi {
            if let Some(vals) = m.get_many::<String>(pk.key) {
                map.insert(pk.key.into(), Value::Array(vals.map(|v| Value::String(v.clone())).collect()));
            }
        } else if let Some(v) = m.get_one::<String>(pk.key) {
            map.insert(pk.key.into(), Value::String(v.clone()));
        }
    }
    for f in spec.flags {
        if let Some(raw) = m.get_one::<String>(f.key) {
            let v = match config::parse_raw(raw) {
                Value::Array(a) => Value::Array(a),
                v if f.list => Value::Array(vec![v]),
                v => v,
            };
            config::set_path(&mut map, f.key, v)?;
        }
    }
    if let Some(sets) = m.get_many::<String>("set") {
        for s in sets {
            let (k, v) = config::split_assignment(s)?;
            config::set_path(&mut map, &k, v)?;
        }
    }
    Ok(map)
}

fn dispatch(m: &ArgMatches) -> Result<(), CliError> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let manifest = if name == "rerun" {
        let path = PathBuf::from(sub.get_one::<String>("manifest").unwrap());
        let out = sub.get_one::<String>("out").map(PathBuf::from);
        commands::rerun(&path, out.as_deref())?
    } else {
        let spec = commands::spec(name).expect("registered subcommand");
        commands::execute(name, merged_config(spec, sub)?)?
    };
    let out = manifest.config.get("out").and_then(Value::as_str).unwrap_or(".");
    println!("{name}: wrote {} files to {out}", manifest.outputs.len() + 1);
    Ok(())
}

/// Parse arguments, run, and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(&matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
