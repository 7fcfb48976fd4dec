//! Weekly case-count CSV loader.
//!
//! Schema: header `region,year,epiweek,cases`, UTF-8, one row per
//! (region, epi week).

use std::collections::HashSet;
use std::path::Path;

use crate::epiweek::EpiWeek;
use crate::error::{Error, Result};
use crate::ingestion::CaseRecord;

pub fn load_cases(path: &Path) -> Result<Vec<CaseRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::CaseParse { row: 0, reason: format!("{}: {e}", path.display()) })?;

    let headers = reader.headers()?.clone();
    let expected = ["region", "year", "epiweek", "cases"];
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::CaseParse {
            row: 0,
            reason: format!("header must be `region,year,epiweek,cases`, got `{}`", got.join(",")),
        });
    }

    let mut out = Vec::new();
    let mut seen: HashSet<(String, EpiWeek)> = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != 4 {
            return Err(Error::CaseParse { row, reason: format!("expected 4 fields, got {}", record.len()) });
        }
        let region = record[0].to_string();
        if region.is_empty() {
            return Err(Error::CaseParse { row, reason: "empty region".to_string() });
        }
        let year: i32 = record[1]
            .parse()
            .map_err(|_| Error::CaseParse { row, reason: format!("malformed year `{}`", &record[1]) })?;
        let week: u32 = record[2]
            .parse()
            .map_err(|_| Error::CaseParse { row, reason: format!("malformed epiweek `{}`", &record[2]) })?;
        let epiweek = EpiWeek::new(year, week)
            .map_err(|e| Error::CaseParse { row, reason: e.to_string() })?;
        let cases: i64 = record[3]
            .parse()
            .map_err(|_| Error::CaseParse { row, reason: format!("malformed cases `{}`", &record[3]) })?;
        if cases < 0 {
            return Err(Error::CaseParse { row, reason: format!("negative case count {cases}") });
        }
        if !seen.insert((region.clone(), epiweek)) {
            return Err(Error::CaseParse {
                row,
                reason: format!("duplicate record for ({region}, {epiweek})"),
            });
        }
        out.push(CaseRecord { region, epiweek, cases: cases as u32 });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_rows_directly() {
        let f = write_csv("region,year,epiweek,cases\nIbague,2016,5,210\n");
        let records = load_cases(f.path()).unwrap();
        assert_eq!(
            records,
            vec![CaseRecord {
                region: "Ibague".into(),
                epiweek: EpiWeek::new(2016, 5).unwrap(),
                cases: 210
            }]
        );
    }

    #[test]
    fn rejects_negative_counts_with_row_number() {
        let f = write_csv("region,year,epiweek,cases\nCali,2017,1,5\nCali,2017,2,-3\n");
        match load_cases(f.path()) {
            Err(Error::CaseParse { row, reason }) => {
                assert_eq!(row, 2);
                assert!(reason.contains("negative"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicates() {
        let f = write_csv("region,year,epiweek,cases\nCali,2017,1,5\nCali,2017,1,6\n");
        match load_cases(f.path()) {
            Err(Error::CaseParse { row, reason }) => {
                assert_eq!(row, 2);
                assert!(reason.contains("duplicate"));
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_malformed_weeks_and_headers() {
        let f = write_csv("region,year,epiweek,cases\nCali,2017,60,5\n");
        assert!(matches!(load_cases(f.path()), Err(Error::CaseParse { row: 1, .. })));
        let f = write_csv("region,week,cases\nCali,1,5\n");
        assert!(matches!(load_cases(f.path()), Err(Error::CaseParse { row: 0, .. })));
    }
}
