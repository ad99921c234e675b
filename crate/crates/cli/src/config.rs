//! Flat `key=value` configuration: a file, then `--set` overrides, then the
//! explicit `--seed` flag.

use std::fs;
use std::path::Path;

use nlunet::train::TrainConfig;
use nlunet::{Error, Result};

/// Splits `key=value`, tolerating spaces around `=`.
pub fn split_pair(s: &str) -> Result<(&str, &str)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got {s:?}")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("empty key in {s:?}")));
    }
    Ok((k, v.trim()))
}

/// Parses a config file body. Blank lines and `#` comments are skipped.
pub fn apply_text(cfg: &mut TrainConfig, text: &str, origin: &str) -> Result<()> {
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = split_pair(line).map_err(|e| Error::Config(format!("{origin}:{}: {e}", n + 1)))?;
        cfg.set(k, v).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{origin}:{}: {m}", n + 1)),
            other => other,
        })?;
    }
    Ok(())
}

pub fn effective(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        apply_text(&mut cfg, &text, &path.display().to_string())?;
    }
    for o in overrides {
        let (k, v) = split_pair(o)?;
        cfg.set(k, v)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// The form written to a run directory; it parses back to the same config.
pub fn render(cfg: &TrainConfig) -> String {
    cfg.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendered_config_parses_back() {
        let mut cfg = TrainConfig::default();
        cfg.set("base_width", "8").unwrap();
        cfg.set("model", "3").unwrap();
        let mut back = TrainConfig::default();
        apply_text(&mut back, &render(&cfg), "echo").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_spacing() {
        let mut cfg = TrainConfig::default();
        apply_text(&mut cfg, "# run\n\n steps = 7  # short\nlr=0.01\n", "f").unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.adam.lr, 0.01);
    }

    #[test]
    fn unknown_key_names_line() {
        let mut cfg = TrainConfig::default();
        let err = apply_text(&mut cfg, "steps=1\nbogus=2\n", "f.cfg").unwrap_err();
        assert!(
            matches!(&err, Error::Config(m) if m.contains("f.cfg:2") && m.contains("bogus")),
            "{err}"
        );
    }

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "steps=5\nseed=3\n").unwrap();
        let cfg = effective(Some(&path), &["steps=9".into()], Some(11)).unwrap();
        assert_eq!((cfg.steps, cfg.seed), (9, 11));
        let cfg = effective(Some(&path), &[], None).unwrap();
        assert_eq!((cfg.steps, cfg.seed), (5, 3));
    }
}
