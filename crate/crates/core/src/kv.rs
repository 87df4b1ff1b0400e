//! `key = value` text files: one pair per line, `#` starts a comment.

use std::path::Path;

use crate::error::{MsbError, Result};

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| MsbError::config(format!("line {}: expected 'key = value'", no + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(MsbError::config(format!("line {}: empty key", no + 1)));
        }
        pairs.push((key.to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

pub fn read(path: &Path) -> Result<Vec<(String, String)>> {
    parse(&std::fs::read_to_string(path)?)
}

pub(crate) fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| MsbError::config(format!("{key}: cannot parse '{value}'")))
}

pub(crate) fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| number(key, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let pairs = parse("# header\nn = 10\n\nrho=0.5 # inline\n").unwrap();
        assert_eq!(pairs, vec![("n".into(), "10".into()), ("rho".into(), "0.5".into())]);
        assert!(parse("no equals sign").is_err());
        assert!(parse(" = 3").is_err());
    }

    #[test]
    fn lists() {
        assert_eq!(list::<usize>("sizes", "1, 2,3").unwrap(), vec![1, 2, 3]);
        assert!(list::<usize>("sizes", "1,x").is_err());
    }
}
