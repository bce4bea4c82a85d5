//! Key-value configuration files.
//!
//! One `key = value` pair per line, `#` starts a comment. Keys are long flag
//! names without the leading dashes; `_` and `-` are interchangeable. File
//! values are placed before the command-line flags, so explicit flags win.

use std::ffi::OsString;

use tmc::io::read_text;
use tmc::{Error, Result};

/// Flag/value pairs from a config file.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            });
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("invalid key `{}`", key),
            });
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

/// Splice the contents of `--config FILE` in front of the subcommand's flags.
pub fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    for (i, a) in args.iter().enumerate().skip(2) {
        let Some(s) = a.to_str() else { continue };
        if s == "--config" {
            path = args.get(i + 1).cloned();
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(p.into());
        }
    }
    let Some(path) = path else { return Ok(args) };
    let pairs = parse_config(&read_text(&path)?)?;
    let mut out: Vec<OsString> = args[..2].to_vec();
    for (k, v) in pairs {
        out.push(format!("--{k}").into());
        out.push(v.into());
    }
    out.extend_from_slice(&args[2..]);
    Ok(out)
}
