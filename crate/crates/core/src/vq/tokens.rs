//! Token files: `VTOK1 N=<count> K=<codebook size>` then the ids on one line.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub fn tokens_to_text(ids: &[usize], k: usize) -> String {
    let body: Vec<String> = ids.iter().map(usize::to_string).collect();
    format!("VTOK1 N={} K={k}\n{}\n", ids.len(), body.join(" "))
}

pub fn tokens_from_text(text: &str) -> Result<(Vec<usize>, usize)> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let err = |line: usize, msg: String| Error::Parse { line, msg };
    let mut toks = header.split_whitespace();
    if toks.next() != Some("VTOK1") {
        return Err(err(1, "expected VTOK1 header".into()));
    }
    let mut field = |key: &str| -> Result<usize> {
        toks.next()
            .and_then(|t| t.strip_prefix(key))
            .and_then(|t| t.strip_prefix('='))
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| err(1, format!("expected {key}=<int>")))
    };
    let n = field("N")?;
    let k = field("K")?;
    let mut ids = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        for tok in line.split_whitespace() {
            let id: usize = tok
                .parse()
                .map_err(|_| err(i + 2, format!("not a token id: {tok:?}")))?;
            if id >= k {
                return Err(err(i + 2, format!("token {id} outside codebook of {k}")));
            }
            ids.push(id);
        }
    }
    if ids.len() != n {
        return Err(err(
            2,
            format!("header declares {n} tokens, found {}", ids.len()),
        ));
    }
    Ok((ids, k))
}

pub fn write_tokens(path: &Path, ids: &[usize], k: usize) -> Result<()> {
    write_atomic(path, tokens_to_text(ids, k).as_bytes())
}

pub fn read_tokens(path: &Path) -> Result<(Vec<usize>, usize)> {
    tokens_from_text(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let ids = vec![0, 511, 7, 7, 3];
        let text = tokens_to_text(&ids, 512);
        assert!(text.starts_with("VTOK1 N=5 K=512\n"));
        assert_eq!(tokens_from_text(&text).unwrap(), (ids, 512));
    }

    #[test]
    fn out_of_range_and_count_mismatch() {
        assert!(tokens_from_text("VTOK1 N=1 K=4\n4\n").is_err());
        assert!(tokens_from_text("VTOK1 N=2 K=4\n1\n").is_err());
        assert!(tokens_from_text("VTOK2 N=0 K=4\n").is_err());
    }
}
