//! Point-set CSV: header `x0,x1,...`, one point per row, '.'-decimal,
//! LF line endings. Values print in Rust's shortest-roundtrip form, so
//! writing the same samples always yields byte-identical files.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_points_csv(path: &Path, points: &Tensor) -> Result<()> {
    if points.shape().len() != 2 {
        return Err(Error::InvalidShape(format!(
            "points CSV expects (n, d), got {:?}",
            points.shape()
        )));
    }
    let d = points.shape()[1];
    let mut out = String::new();
    for k in 0..d {
        if k > 0 {
            out.push(',');
        }
        out.push_str(&format!("x{k}"));
    }
    out.push('\n');
    for row in points.rows() {
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    Ok(())
}

pub fn read_points_csv(path: &Path) -> Result<Tensor> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |line: usize, reason: String| Error::Parse {
        context: format!("{}:{}", path.display(), line),
        reason,
    };
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".to_string()))?
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    for (k, c) in cols.iter().enumerate() {
        if *c != format!("x{k}") {
            return Err(parse_err(1, format!("expected header column x{k}, got '{c}'")));
        }
    }
    let d = cols.len();
    let mut data = Vec::new();
    let mut n = 0usize;
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d {
            return Err(parse_err(i + 2, format!("expected {d} fields, got {}", fields.len())));
        }
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(i + 2, format!("'{f}' is not a number")))?;
            data.push(v);
        }
        n += 1;
    }
    Tensor::new(vec![n, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use crate::targets::{sample_target, TargetName};

    #[test]
    fn roundtrip_is_exact_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pts.csv");
        let set = sample_target(TargetName::Pinwheel, 100, &mut RngState::seed_from_u64(5)).unwrap();
        write_points_csv(&path, &set.points).unwrap();
        let back = read_points_csv(&path).unwrap();
        assert_eq!(back, set.points);

        let first = std::fs::read(&path).unwrap();
        write_points_csv(&path, &set.points).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
        assert!(first.starts_with(b"x0,x1\n"));
        assert!(!first.contains(&b'\r'));
    }

    #[test]
    fn header_and_field_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(read_points_csv(&path).is_err());
        std::fs::write(&path, "x0,x1\n1,2\n3\n").unwrap();
        assert!(read_points_csv(&path).is_err());
        std::fs::write(&path, "x0,x1\n1,zzz\n").unwrap();
        assert!(read_points_csv(&path).is_err());
    }
}
