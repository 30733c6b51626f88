use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use crate::args::Command;
use crate::Failure;

/// Flags of the top-level parser that take a value.
const VALUED_GLOBALS: [&str; 3] = ["--config", "--jobs", "--seed"];

/// Splice `key = value` lines from a `--config` file into the argument list
/// right after the subcommand, so flags given on the command line win.
/// A `command` key supplies the subcommand when none is given.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>, Failure> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut command = None;
    let mut extra = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
        let (k, v) = (k.trim().replace('_', "-"), v.trim());
        match (k.as_str(), v) {
            ("command", _) => command = Some(v.to_string()),
            ("config", _) => return Err(Failure::Usage("config files cannot include other config files".into())),
            (_, "true") => extra.push(format!("--{k}").into()),
            (_, "false") => {}
            _ => {
                extra.push(format!("--{k}").into());
                extra.push(v.into());
            }
        }
    }

    let mut out = args;
    let at = match subcommand_index(&out) {
        Some(i) => i + 1,
        None => {
            let c = command.ok_or_else(|| Failure::Usage("no command given".into()))?;
            out.insert(1, c.into());
            2
        }
    };
    out.splice(at..at, extra);
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn subcommand_index(args: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy();
        if VALUED_GLOBALS.contains(&s.as_ref()) {
            i += 2;
            continue;
        }
        if Command::NAMES.contains(&s.as_ref()) {
            return Some(i);
        }
        i += 1;
    }
    None
}
