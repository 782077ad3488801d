//! Flat parameter layout, shape manifest and checkpoint files.

use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use std::io::{BufRead, Write};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered blocks of the flat vector. Blocks before `main_len` belong to the
/// predictive network; the rest are auxiliary heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub blocks: Vec<ParamBlock>,
    pub main_len: usize,
    pub total_len: usize,
}

impl ParamLayout {
    pub fn from_tensors<'a>(main: &[(String, &'a Tensor2)], aux: &[(String, &'a Tensor2)]) -> Self {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (name, t) in main.iter().chain(aux) {
            blocks.push(ParamBlock { name: name.clone(), rows: t.rows(), cols: t.cols(), offset });
            offset += t.rows() * t.cols();
        }
        let main_len = main.iter().map(|(_, t)| t.rows() * t.cols()).sum();
        Self { blocks, main_len, total_len: offset }
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// One `name rows cols offset` line per block after a size header.
    pub fn write_manifest(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "params {} main {}", self.total_len, self.main_len)?;
        for b in &self.blocks {
            writeln!(w, "{} {} {} {}", b.name, b.rows, b.cols, b.offset)?;
        }
        Ok(())
    }

    pub fn manifest_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_manifest(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("manifest is ASCII")
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

/// Manifest followed by a `values` line and one value per line.
pub fn write_checkpoint(layout: &ParamLayout, params: &[f64], mut w: impl Write) -> Result<()> {
    if params.len() != layout.total_len {
        return Err(Error::shape("write_checkpoint", format!("{} values", params.len()), format!("layout of {}", layout.total_len)));
    }
    layout.write_manifest(&mut w)?;
    writeln!(w, "values")?;
    for v in params {
        writeln!(w, "{v}")?;
    }
    Ok(())
}

pub fn read_checkpoint(r: impl BufRead) -> Result<(ParamLayout, Vec<f64>)> {
    let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
    let header = lines.first().ok_or_else(|| parse_err(1, "empty checkpoint"))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 4 || h[0] != "params" || h[2] != "main" {
        return Err(parse_err(1, "expected 'params <n> main <m>'"));
    }
    let total_len: usize = h[1].parse().map_err(|_| parse_err(1, "bad parameter count"))?;
    let main_len: usize = h[3].parse().map_err(|_| parse_err(1, "bad main count"))?;
    let mut blocks = Vec::new();
    let mut idx = 1;
    while idx < lines.len() && lines[idx] != "values" {
        let f: Vec<&str> = lines[idx].split_whitespace().collect();
        let num = |s: &str| s.parse::<usize>().map_err(|_| parse_err(idx + 1, format!("bad number '{s}'")));
        if f.len() != 4 {
            return Err(parse_err(idx + 1, "expected 'name rows cols offset'"));
        }
        blocks.push(ParamBlock { name: f[0].to_string(), rows: num(f[1])?, cols: num(f[2])?, offset: num(f[3])? });
        idx += 1;
    }
    if idx == lines.len() {
        return Err(parse_err(idx, "missing 'values' section"));
    }
    let values: Vec<f64> = lines[idx + 1..]
        .iter()
        .enumerate()
        .map(|(k, s)| s.parse().map_err(|_| parse_err(idx + 2 + k, format!("bad value '{s}'"))))
        .collect::<Result<_>>()?;
    if values.len() != total_len {
        return Err(Error::shape("read_checkpoint", format!("{} values", values.len()), format!("header count {total_len}")));
    }
    Ok((ParamLayout { blocks, main_len, total_len }, values))
}
