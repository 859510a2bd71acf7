//! Tab-separated `key=value` line codec shared by the dataset, snapshot and
//! spec file formats.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl ParseError {
    pub(crate) fn new(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

/// Splits `line` into tab-separated `key=value` fields and checks that the
/// keys appear exactly in the order given. Returns the values.
pub(crate) fn fields<'a>(
    line: &'a str,
    keys: &[&str],
    lineno: usize,
) -> Result<Vec<&'a str>, ParseError> {
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != keys.len() {
        return Err(ParseError::new(
            lineno,
            format!("expected {} fields, found {}", keys.len(), parts.len()),
        ));
    }
    parts
        .iter()
        .zip(keys)
        .map(|(part, key)| match part.split_once('=') {
            Some((k, v)) if k == *key => Ok(v),
            _ => Err(ParseError::new(
                lineno,
                format!("expected field `{key}=…`, found {part:?}"),
            )),
        })
        .collect()
}

/// Value of the leading `kind=` field, if present.
pub(crate) fn kind_of(line: &str) -> Option<&str> {
    line.split('\t').next()?.strip_prefix("kind=")
}

/// Iterates non-blank lines with 1-based line numbers.
pub(crate) fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

pub(crate) fn parse_num<T: std::str::FromStr>(
    value: &str,
    what: &str,
    lineno: usize,
) -> Result<T, ParseError> {
    value
        .parse()
        .map_err(|_| ParseError::new(lineno, format!("invalid {what}: {value:?}")))
}

pub(crate) fn parse_id<T>(value: &str, lineno: usize) -> Result<T, ParseError>
where
    T: std::str::FromStr<Err = crate::InvalidId>,
{
    value
        .parse()
        .map_err(|e: crate::InvalidId| ParseError::new(lineno, e.to_string()))
}
