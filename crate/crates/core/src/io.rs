//! CSV ingestion for unit records and area covariates.
//!
//! Row numbers in error messages count data rows from 1; the header is not
//! counted.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::direct::{AreaId, UnitRecord};
use crate::error::{Error, Result};
use crate::pipeline::AreaTable;

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Validation(format!("missing column `{name}`")))
}

pub fn ingest_units(path: &Path) -> Result<Vec<UnitRecord>> {
    read_units(File::open(path)?)
}

/// Reads `area_id,weight,y` records.
pub fn read_units<R: Read>(r: R) -> Result<Vec<UnitRecord>> {
    let mut rdr = reader(r);
    let headers = rdr.headers()?.clone();
    let (ia, iw, iy) = (
        column(&headers, "area_id")?,
        column(&headers, "weight")?,
        column(&headers, "y")?,
    );
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Row {
            row,
            message: e.to_string(),
        })?;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let area = field(ia);
        if area.is_empty() {
            return Err(Error::Row {
                row,
                message: "empty area_id".into(),
            });
        }
        let weight: f64 = field(iw).parse().map_err(|_| Error::Row {
            row,
            message: format!("column `weight`: not a number: `{}`", field(iw)),
        })?;
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::Row {
                row,
                message: format!("column `weight`: weight must be positive, got {weight}"),
            });
        }
        let y = match field(iy).parse::<f64>() {
            Ok(0.0) => false,
            Ok(1.0) => true,
            _ => {
                return Err(Error::Row {
                    row,
                    message: format!("outcome must be 0 or 1 (column `y`, got `{}`)", field(iy)),
                })
            }
        };
        out.push(UnitRecord::new(area, weight, y)?);
    }
    if out.is_empty() {
        return Err(Error::Empty("unit file has no records"));
    }
    Ok(out)
}

pub fn ingest_areas(path: &Path) -> Result<AreaTable> {
    read_areas(File::open(path)?)
}

/// Reads `area_id,x1,x2,...`. Every column after `area_id` must be numeric.
pub fn read_areas<R: Read>(r: R) -> Result<AreaTable> {
    let mut rdr = reader(r);
    let headers = rdr.headers()?.clone();
    let ia = column(&headers, "area_id")?;
    let cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != ia)
        .map(|(j, h)| (j, h.to_owned()))
        .collect();
    let mut table = AreaTable::new(cols.iter().map(|(_, h)| h.clone()).collect());
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Row {
            row,
            message: e.to_string(),
        })?;
        let id = rec.get(ia).unwrap_or("");
        if id.is_empty() {
            return Err(Error::Row {
                row,
                message: "empty area_id".into(),
            });
        }
        let values = cols
            .iter()
            .map(|(j, name)| {
                let raw = rec.get(*j).unwrap_or("");
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Row {
                        row,
                        message: format!("column `{name}`: not a number: `{raw}`"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        table
            .insert(AreaId::from(id), values)
            .map_err(|e| Error::Row {
                row,
                message: e.to_string(),
            })?;
    }
    if table.is_empty() {
        return Err(Error::Empty("area file has no records"));
    }
    Ok(table)
}
