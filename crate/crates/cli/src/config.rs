//! Config files: `key = value` lines, global keys before any section and one
//! `[subcommand]` section per subcommand. Keys are long flag names. Flags
//! given on the command line win over config values.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{Context, Result};
use clap::{ArgAction, CommandFactory};
use ini::Ini;

use crate::{Cli, Invalid};

const GLOBAL_VALUE_FLAGS: [&str; 3] = ["--seed", "--out-dir", "--config"];

/// Position of the subcommand token in `argv`.
fn subcommand_index(argv: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let tok = argv[i].to_string_lossy();
        if GLOBAL_VALUE_FLAGS.contains(&tok.as_ref()) {
            i += 2;
        } else if tok.starts_with('-') {
            i += 1;
        } else {
            return Some(i);
        }
    }
    None
}

fn on_command_line(argv: &[OsString], long: &str) -> bool {
    let flag = format!("--{long}");
    let prefix = format!("--{long}=");
    argv.iter().any(|a| {
        let a = a.to_string_lossy();
        a == flag || a.starts_with(&prefix)
    })
}

/// Converts one section into flags, rejecting unknown keys.
fn section_flags(
    cmd: &clap::Command,
    section: &str,
    props: &ini::Properties,
    argv: &[OsString],
) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (key, value) in props.iter() {
        let arg = cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(key) && key != "help" && key != "config")
            .ok_or_else(|| Invalid(format!("unknown config key {key:?} in [{section}]")))?;
        if on_command_line(argv, key) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => match value {
                "true" => out.push(format!("--{key}").into()),
                "false" => {}
                other => {
                    return Err(Invalid(format!("{key} expects true or false, got {other:?}")).into())
                }
            },
            _ => out.push(format!("--{key}={value}").into()),
        }
    }
    Ok(out)
}

/// Rebuilds `argv` with config values inserted where the command line is silent.
pub fn merge(path: &Path, argv: &[OsString]) -> Result<Vec<OsString>> {
    let ini = Ini::load_from_file(path)
        .map_err(|e| Invalid(format!("cannot read config {}: {e}", path.display())))
        .context("loading config")?;
    let root = Cli::command();
    let sub_at = subcommand_index(argv).ok_or_else(|| Invalid("no subcommand given".into()))?;
    let active = argv[sub_at].to_string_lossy().into_owned();
    let mut global = Vec::new();
    let mut local = Vec::new();
    for (section, props) in ini.iter() {
        match section {
            None => global = section_flags(&root, "global", props, argv)?,
            Some(name) => {
                let cmd = root
                    .find_subcommand(name)
                    .ok_or_else(|| Invalid(format!("unknown config section [{name}]")))?;
                let flags = section_flags(cmd, name, props, argv)?;
                if name == active {
                    local = flags;
                }
            }
        }
    }
    let mut merged = Vec::with_capacity(argv.len() + global.len() + local.len());
    merged.push(argv[0].clone());
    merged.extend(global);
    merged.extend_from_slice(&argv[1..=sub_at]);
    merged.extend(local);
    merged.extend_from_slice(&argv[sub_at + 1..]);
    Ok(merged)
}
