//! Plain-text `key = value` files: one pair per line, `#` starts a comment,
//! blank lines are ignored.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
            line,
            message: format!("expected `key = value`, got `{content}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(Error::Config {
                line,
                message: "empty key".into(),
            });
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config {
                line,
                message: format!("duplicate key `{key}` (first set on line {})", prev.line),
            });
        }
        out.push(Entry {
            line,
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(out)
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("`{key}` has invalid value `{value}`")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::invalid(format!("`{key}` expects a boolean, got `{value}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let e = parse("# header\nalpha = 0.2\n\n  seed=3  # trailing\n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].line, e[0].key.as_str(), e[0].value.as_str()), (2, "alpha", "0.2"));
        assert_eq!((e[1].line, e[1].key.as_str(), e[1].value.as_str()), (4, "seed", "3"));
    }

    #[test]
    fn rejects_garbage_and_duplicates() {
        assert!(matches!(parse("alpha 0.2"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(parse("a = 1\na = 2"), Err(Error::Config { line: 2, .. })));
        assert!(parse("= 4").is_err());
    }
}
