//! Text serialization of averaged attention maps.
//!
//! Grid: first line `L`, then `L` lines of `L` space-separated reals.
//! Legend: one `item_behavior` label per line in position order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{DatasetHeader, Sequence, Vocab};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_attention_grid(grid: &Tensor) -> String {
    let n = grid.rows();
    assert_eq!(grid.cols(), n);
    let mut s = format!("{n}\n");
    for r in 0..n {
        let row: Vec<String> = grid.row(r).iter().map(|x| x.to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

pub fn parse_attention_grid(text: &str) -> Result<Tensor> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or(Error::EmptyDataset)?;
    let n: usize = first.trim().parse().map_err(|_| Error::Parse {
        line: 1,
        msg: "expected the grid size".into(),
    })?;
    let mut data = Vec::with_capacity(n * n);
    for (idx, line) in lines.take(n) {
        let row: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let row = row.map_err(|_| Error::Parse {
            line: idx + 1,
            msg: "malformed grid value".into(),
        })?;
        if row.len() != n {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected {n} values, found {}", row.len()),
            });
        }
        data.extend(row);
    }
    if data.len() != n * n {
        return Err(Error::Parse {
            line: n + 1,
            msg: "grid is truncated".into(),
        });
    }
    Ok(Tensor::matrix(n, n, data))
}

fn token_label(token: u32, vocab: &Vocab, name: impl Fn(u32) -> String) -> String {
    if token == vocab.pad_token() {
        "pad".into()
    } else if token == vocab.mask_token() {
        "mask".into()
    } else {
        name(token)
    }
}

/// Labels such as `31_fav` for every position of `seq`.
pub fn attention_legend(seq: &Sequence, header: &DatasetHeader) -> Vec<String> {
    let vocab = header.vocab();
    (0..seq.len())
        .map(|p| {
            if seq.is_pad(p) {
                return "pad_pad".into();
            }
            let item = token_label(seq.items[p], &vocab, |t| t.to_string());
            let beh = token_label(seq.behaviors[p], &vocab, |t| header.behavior_name(t as usize));
            format!("{item}_{beh}")
        })
        .collect()
}

/// Writes `grid` to `path` and the legend to `path` + `.legend`.
pub fn write_attention_dump(path: &Path, grid: &Tensor, legend: &[String]) -> Result<()> {
    fs::write(path, write_attention_grid(grid)).map_err(|e| Error::io(path, e))?;
    let mut lp = path.as_os_str().to_owned();
    lp.push(".legend");
    let lp = std::path::PathBuf::from(lp);
    let text: String = legend.iter().map(|l| format!("{l}\n")).collect();
    fs::write(&lp, text).map_err(|e| Error::io(&lp, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_round_trip_is_exact() {
        let g = Tensor::matrix(2, 2, vec![0.1, 0.9, 1.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(parse_attention_grid(&write_attention_grid(&g)).unwrap(), g);
    }

    #[test]
    fn legend_uses_behavior_names() {
        let header = DatasetHeader {
            num_users: 1,
            num_items: 40,
            num_behaviors: 2,
            behavior_names: vec!["click".into(), "fav".into()],
        };
        let vocab = header.vocab();
        let seq = Sequence::from_pairs(0, &[(31, 1), (4, 0)], 3, &vocab);
        assert_eq!(attention_legend(&seq, &header), vec!["pad_pad", "31_fav", "4_click"]);
    }

    #[test]
    fn short_grid_is_rejected() {
        assert!(parse_attention_grid("2\n0 1\n").is_err());
    }
}
