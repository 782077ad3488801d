//! Line-delimited cohort files.
//!
//! The first line is `#cohort v1 ` followed by the generator configuration as
//! JSON. Each following line is one patient with tab-separated fields:
//! `id site group confounder outcome rarity true_risk prs missing [ecg] [mri]
//! [ehr] [genotype]`. Floats use the shortest representation that parses
//! back to the same bits.

use super::{Cohort, GeneratorConfig, PatientRecord};
use crate::error::{Error, Result};
use std::fmt::Display;
use std::io::{BufRead, Write};
use std::str::FromStr;

const HEADER: &str = "#cohort v1 ";

fn bracket<T: Display>(v: &[T]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(","))
}

pub fn write_cohort(cohort: &Cohort, mut w: impl Write) -> Result<()> {
    writeln!(w, "{HEADER}{}", serde_json::to_string(&cohort.config)?)?;
    for r in &cohort.records {
        let missing: String = r.missing.iter().map(|&m| if m { '1' } else { '0' }).collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.id,
            r.site,
            r.group,
            r.confounder,
            r.outcome,
            r.rarity,
            r.true_risk,
            r.prs,
            missing,
            bracket(&r.x_ecg),
            bracket(&r.x_mri),
            bracket(&r.x_ehr),
            bracket(&r.genotype),
        )?;
    }
    Ok(())
}

fn field<T: FromStr>(s: &str, line: usize, name: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse { line, message: format!("bad {name} '{s}'") })
}

fn list<T: FromStr>(s: &str, line: usize, name: &str) -> Result<Vec<T>> {
    let inner = s
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| Error::Parse { line, message: format!("{name} must be bracketed") })?;
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner.split(',').map(|x| field(x, line, name)).collect()
}

pub fn read_cohort(r: impl BufRead) -> Result<Cohort> {
    let mut lines = r.lines();
    let first = lines.next().ok_or(Error::Parse { line: 1, message: "empty cohort file".into() })??;
    let json = first
        .strip_prefix(HEADER)
        .ok_or(Error::Parse { line: 1, message: "missing cohort header".into() })?;
    let config: GeneratorConfig = serde_json::from_str(json)?;
    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let ln = idx + 2;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 13 {
            return Err(Error::Parse { line: ln, message: format!("expected 13 fields, found {}", f.len()) });
        }
        let missing_str = f[8].as_bytes();
        if missing_str.len() != 4 || missing_str.iter().any(|b| *b != b'0' && *b != b'1') {
            return Err(Error::Parse { line: ln, message: format!("bad missing flags '{}'", f[8]) });
        }
        let mut missing = [false; 4];
        for (m, b) in missing.iter_mut().zip(missing_str) {
            *m = *b == b'1';
        }
        records.push(PatientRecord {
            id: field(f[0], ln, "id")?,
            site: field(f[1], ln, "site")?,
            group: field(f[2], ln, "group")?,
            confounder: field(f[3], ln, "confounder")?,
            outcome: field(f[4], ln, "outcome")?,
            rarity: field(f[5], ln, "rarity")?,
            true_risk: field(f[6], ln, "true_risk")?,
            prs: field(f[7], ln, "prs")?,
            missing,
            x_ecg: list(f[9], ln, "ecg")?,
            x_mri: list(f[10], ln, "mri")?,
            x_ehr: list(f[11], ln, "ehr")?,
            genotype: list(f[12], ln, "genotype")?,
        });
    }
    Ok(Cohort { config, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcohort::{drop_modality, generate_cohort};

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = generate_cohort(&GeneratorConfig { n_patients: 64, seed: 9, ..Default::default() }).unwrap();
        c.records = drop_modality(&c.records, "ehr").unwrap();
        let mut buf = Vec::new();
        write_cohort(&c, &mut buf).unwrap();
        let back = read_cohort(buf.as_slice()).unwrap();
        assert_eq!(back, c);
        for (a, b) in back.records.iter().zip(&c.records) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.x_ecg), bits(&b.x_ecg));
            assert_eq!(a.true_risk.to_bits(), b.true_risk.to_bits());
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{HEADER}{}\n1\t2\n", serde_json::to_string(&GeneratorConfig::default()).unwrap());
        match read_cohort(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
