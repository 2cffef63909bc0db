//! Line-oriented JSON city files: one header object, then one object per parcel.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::citygen::CityGenSpec;
use crate::domain::{
    dynf, geo, CityInstance, Demographics, ObjectiveBounds, Parcel, ParcelId, RegBits, DYN_DIM,
    GEO_DIM, REG_DIM,
};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    name: String,
    seed: u64,
    spec: Option<CityGenSpec>,
    districts: u32,
    budget_total: f64,
    portfolio_capacity: usize,
    objective_bounds: ObjectiveBounds,
    parcel_count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: u32,
    district_id: u32,
    geo: BTreeMap<String, f64>,
    reg: String,
    #[serde(rename = "dyn")]
    dyn_features: BTreeMap<String, f64>,
    minority_tract: bool,
    low_income_tract: bool,
}

fn schema(line: usize, field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        line,
        field: field.into(),
        message: message.into(),
    }
}

fn to_record(p: &Parcel) -> Record {
    Record {
        id: p.id.0,
        district_id: p.district_id,
        geo: p.geo.iter().enumerate().map(|(i, v)| (geo::name(i), *v)).collect(),
        reg: p.reg.to_bit_string(),
        dyn_features: p
            .dyn_features
            .iter()
            .enumerate()
            .map(|(i, v)| (dynf::name(i), *v))
            .collect(),
        minority_tract: p.demographics.minority_tract,
        low_income_tract: p.demographics.low_income_tract,
    }
}

fn named_columns(
    line: usize,
    group: &str,
    mut map: BTreeMap<String, f64>,
    dim: usize,
    name: fn(usize) -> String,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim {
        let key = name(i);
        let v = map
            .remove(&key)
            .ok_or_else(|| schema(line, format!("{group}.{key}"), "missing"))?;
        out.push(v);
    }
    if let Some(extra) = map.keys().next() {
        return Err(schema(line, format!("{group}.{extra}"), "unknown column"));
    }
    Ok(out)
}

fn from_record(line: usize, r: Record) -> Result<Parcel> {
    if r.reg.chars().count() != REG_DIM {
        return Err(schema(
            line,
            "reg",
            format!("expected {REG_DIM} bits, found {}", r.reg.chars().count()),
        ));
    }
    let reg = RegBits::from_bit_string(&r.reg).map_err(|m| schema(line, "reg", m))?;
    Ok(Parcel {
        id: ParcelId(r.id),
        district_id: r.district_id,
        geo: named_columns(line, "geo", r.geo, GEO_DIM, geo::name)?,
        reg,
        dyn_features: named_columns(line, "dyn", r.dyn_features, DYN_DIM, dynf::name)?,
        demographics: Demographics {
            minority_tract: r.minority_tract,
            low_income_tract: r.low_income_tract,
        },
    })
}

pub fn write_city_to<W: Write>(city: &CityInstance, mut w: W) -> Result<()> {
    let header = Header {
        schema_version: SCHEMA_VERSION,
        name: city.name.clone(),
        seed: city.seed,
        spec: city.spec.clone(),
        districts: city.districts,
        budget_total: city.budget_total,
        portfolio_capacity: city.portfolio_capacity,
        objective_bounds: city.objective_bounds,
        parcel_count: city.n(),
    };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for p in &city.parcels {
        serde_json::to_writer(&mut w, &to_record(p)).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_city(city: &CityInstance, path: &Path) -> Result<()> {
    write_city_to(city, BufWriter::new(File::create(path)?))
}

fn parse_err(line: usize, e: serde_json::Error) -> Error {
    // serde reports "missing field `x`" / "unknown field `x`"; surface the field.
    let msg = e.to_string();
    let field = msg.split('`').nth(1).map(str::to_string);
    match (e.classify(), field) {
        (serde_json::error::Category::Data, Some(f)) => schema(line, f, msg),
        _ => Error::Parse { line, message: msg },
    }
}

pub fn read_city_from<R: BufRead>(r: R) -> Result<CityInstance> {
    let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (hl, header_line) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let header: Header = serde_json::from_str(&header_line?).map_err(|e| parse_err(hl, e))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(schema(
            hl,
            "schema_version",
            format!("unsupported version {}", header.schema_version),
        ));
    }
    let mut parcels = Vec::with_capacity(header.parcel_count);
    for (ln, text) in lines {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&text).map_err(|e| parse_err(ln, e))?;
        parcels.push(from_record(ln, rec)?);
    }
    if parcels.len() != header.parcel_count {
        return Err(Error::Parse {
            line: header.parcel_count + 1,
            message: format!(
                "truncated file: header declares {} parcels, found {}",
                header.parcel_count,
                parcels.len()
            ),
        });
    }
    let city = CityInstance {
        name: header.name,
        parcels,
        districts: header.districts,
        budget_total: header.budget_total,
        portfolio_capacity: header.portfolio_capacity,
        objective_bounds: header.objective_bounds,
        seed: header.seed,
        spec: header.spec,
    };
    city.validate()?;
    Ok(city)
}

pub fn read_city(path: &Path) -> Result<CityInstance> {
    read_city_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::citygen::generate_city;

    fn bytes(city: &CityInstance) -> Vec<u8> {
        let mut buf = Vec::new();
        write_city_to(city, &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_exact() {
        let city = generate_city(&CityGenSpec::desk(120, 7)).unwrap();
        let buf = bytes(&city);
        let back = read_city_from(&buf[..]).unwrap();
        assert_eq!(back, city);
        assert_eq!(bytes(&back), buf);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let city = generate_city(&CityGenSpec::desk(20, 1)).unwrap();
        let buf = bytes(&city);
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(matches!(read_city_from(cut.as_bytes()), Err(Error::Parse { .. })));
        // a line cut mid-record
        let half = &text[..text.len() / 2];
        assert!(matches!(read_city_from(half.as_bytes()), Err(Error::Parse { .. })));
    }

    #[test]
    fn short_reg_vector_names_the_field() {
        let city = generate_city(&CityGenSpec::desk(20, 1)).unwrap();
        let text = String::from_utf8(bytes(&city)).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let bits = city.parcels[2].reg.to_bit_string();
        lines[3] = lines[3].replace(&bits, &bits[..126]);
        match read_city_from(lines.join("\n").as_bytes()) {
            Err(Error::Schema { line, field, .. }) => {
                assert_eq!(line, 4);
                assert_eq!(field, "reg");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn missing_geo_column_names_the_field() {
        let city = generate_city(&CityGenSpec::desk(20, 1)).unwrap();
        let text = String::from_utf8(bytes(&city)).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[1] = lines[1].replacen("\"walk_score\"", "\"walkscore\"", 1);
        match read_city_from(lines.join("\n").as_bytes()) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "geo.walk_score"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }
}
