//! `key = value` config files, spliced into the argument list so that every
//! key is validated exactly like the matching `--key` flag.
//!
//! ```text
//! # prune.conf
//! granularity = 64
//! schedule = 0.2,0.3,0.4,0.5
//! ```
//!
//! Config entries are inserted right after the subcommand, ahead of the
//! user's own flags, so flags given on the command line win.

use std::ffi::OsString;
use std::fs;

use anyhow::{bail, Context, Result};

/// Parse config text into `(key, value)` pairs.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected key = value, got {raw:?}", no + 1);
        };
        let key = key.trim();
        if key.is_empty() || key.starts_with('-') || key == "config" {
            bail!("config line {}: invalid key {key:?}", no + 1);
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Turn pairs into flags; `true`/`false` values toggle switches.
fn to_flags(pairs: Vec<(String, String)>) -> Vec<OsString> {
    let mut out = Vec::new();
    for (key, value) in pairs {
        match value.as_str() {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                out.push(format!("--{key}").into());
                out.push(value.into());
            }
        }
    }
    out
}

/// Remove `--config PATH` / `--config=PATH` from `args` and splice the file's
/// entries in after the subcommand name.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut path = None;
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let s = arg.to_string_lossy();
        if s == "--config" {
            let Some(p) = iter.next() else {
                bail!("--config needs a file path");
            };
            path = Some(p);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(p.into());
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.to_string_lossy()))?;
    let flags = to_flags(parse(&text)?);
    // First non-flag argument after the program name is the subcommand.
    let Some(sub) = rest.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')) else {
        bail!("--config given without a subcommand");
    };
    let at = sub + 2;
    let tail = rest.split_off(at);
    rest.extend(flags);
    rest.extend(tail);
    Ok(rest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let pairs = parse("# c\n\ngranularity = 64\n schedule=0.2,0.5 \n").unwrap();
        assert_eq!(
            pairs,
            vec![
                ("granularity".into(), "64".into()),
                ("schedule".into(), "0.2,0.5".into())
            ]
        );
        assert!(parse("novalue\n").is_err());
        assert!(parse("--g = 3\n").is_err());
    }

    #[test]
    fn switches() {
        let flags = to_flags(vec![("global".into(), "true".into()), ("quiet".into(), "false".into())]);
        assert_eq!(flags, vec![OsString::from("--global")]);
    }
}
