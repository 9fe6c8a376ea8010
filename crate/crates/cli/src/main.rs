//! `maskeval`: detection scoring, preprocessing, splitting, verification, identification and
//! checkpoint routing over masked-face datasets.

mod commands;
mod config;
mod error;

use std::collections::BTreeMap;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};

use crate::config::{parse_config, Param, RunConfig, REQUIRED};
use crate::error::CliError;

struct CommandDef {
    name: &'static str,
    about: &'static str,
    table: &'static [Param],
}

const COMMANDS: &[CommandDef] = &[
    CommandDef {
        name: "detect-eval",
        about: "Score detections against ground truth: AP per class and mAP over IoU thresholds",
        table: config::DETECT_EVAL,
    },
    CommandDef {
        name: "preprocess",
        about: "Rescale, mask, occlude or hybridize manifest images, with a provenance log",
        table: config::PREPROCESS,
    },
    CommandDef {
        name: "split",
        about: "Subject-disjoint hold-out or k-fold split plans",
        table: config::SPLIT,
    },
    CommandDef {
        name: "verify",
        about: "1:1 verification accuracy over the unmasked/masked pair conditions",
        table: config::VERIFY,
    },
    CommandDef {
        name: "identify",
        about: "1:N identification accuracy across visual, thermal and hybrid domains",
        table: config::IDENTIFY,
    },
    CommandDef {
        name: "checkpoint",
        about: "Route one visual/thermal probe through the checkpoint flow and identify it",
        table: config::CHECKPOINT,
    },
    CommandDef {
        name: "report",
        about: "Condition matrix and degradation deltas from fold results or the reference tables",
        table: config::REPORT,
    },
    CommandDef {
        name: "grad-check",
        about: "Compare analytic loss gradients with central finite differences",
        table: config::GRAD_CHECK,
    },
    CommandDef {
        name: "synth",
        about: "Write a procedurally generated face corpus and its manifest",
        table: config::SYNTH,
    },
];

fn cli() -> Command {
    let mut root = Command::new("maskeval")
        .version(maskeval_core::VERSION)
        .about("Measurement toolkit for masked-face biometrics")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("flat key=value file; flags override its values"),
        );
    for def in COMMANDS {
        let mut sub = Command::new(def.name).about(def.about);
        for p in def.table {
            let help = if p.default == REQUIRED {
                format!("{} [required]", p.help)
            } else {
                format!("{} [default: {}]", p.help, p.default)
            };
            sub = sub.arg(Arg::new(p.key).long(p.key).value_name("VALUE").help(help));
        }
        root = root.subcommand(sub);
    }
    root
}

fn resolve(def: &CommandDef, m: &ArgMatches) -> Result<RunConfig, CliError> {
    let file = match m.get_one::<String>("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{path}: {e}")))?;
            parse_config(&text, path)?
        }
        None => BTreeMap::new(),
    };
    let flags = def
        .table
        .iter()
        .filter_map(|p| m.get_one::<String>(p.key).map(|v| (p.key.to_string(), v.clone())))
        .collect();
    RunConfig::resolve(def.name, def.table, &file, &flags)
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let def = COMMANDS.iter().find(|s| s.name == name).expect("registered command");
    let result = resolve(def, sub).and_then(|rc| commands::run(&rc));
    match result {
        Ok(()) => ExitCode::from(error::exit::OK as u8),
        Err(e) => {
            eprintln!("maskeval: {} error: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_tree_is_consistent() {
        cli().debug_assert();
        for def in COMMANDS {
            assert!(cli().find_subcommand(def.name).is_some());
        }
    }
}
