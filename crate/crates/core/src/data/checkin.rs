//! Check-in records and the three supported input layouts.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckIn {
    pub user_id: String,
    /// UTC seconds.
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
    pub venue_id: String,
    /// Venue category, kept opaque.
    pub category: Option<String>,
}

impl CheckIn {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(format!("latitude {} out of range", self.lat));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(format!("longitude {} out of range", self.lon));
        }
        if self.timestamp <= 0 {
            return Err(format!("timestamp {} not positive", self.timestamp));
        }
        if self.user_id.is_empty() || self.venue_id.is_empty() {
            return Err("empty user or venue id".into());
        }
        Ok(())
    }

    /// Canonical tab-separated record: `user ts lat lon venue [category]`.
    pub fn to_record(&self) -> String {
        let mut s = format!(
            "{}\t{}\t{}\t{}\t{}",
            self.user_id, self.timestamp, self.lat, self.lon, self.venue_id
        );
        if let Some(c) = &self.category {
            s.push('\t');
            s.push_str(c);
        }
        s
    }

    pub fn from_record(line: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = line.split('\t').collect();
        if !(5..=6).contains(&f.len()) {
            return Err(format!("expected 5 or 6 fields, got {}", f.len()));
        }
        let c = CheckIn {
            user_id: f[0].to_string(),
            timestamp: num(f[1], "timestamp")?,
            lat: num(f[2], "latitude")?,
            lon: num(f[3], "longitude")?,
            venue_id: f[4].to_string(),
            category: f.get(5).map(|s| s.to_string()),
        };
        c.validate()?;
        Ok(c)
    }
}

fn num<T: FromStr>(s: &str, what: &str) -> std::result::Result<T, String> {
    s.trim()
        .parse()
        .map_err(|_| format!("bad {what} {s:?}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    /// `user, ISO-8601 time, lat, lon, venue` (SNAP Brightkite / Gowalla).
    BrightkiteGowallaTsv,
    /// `userid,placeid,datetime,lat,lon,city,category`.
    WeeplaceCsv,
    /// `user, venue, category id, category, lat, lon, tz offset, UTC time`.
    FoursquareTsv,
    /// The canonical record file this crate writes.
    Canonical,
}

impl FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brightkite_gowalla_tsv" | "brightkite" | "gowalla" => Ok(Self::BrightkiteGowallaTsv),
            "weeplace_csv" | "weeplace" => Ok(Self::WeeplaceCsv),
            "foursquare_tsv" | "foursquare" => Ok(Self::FoursquareTsv),
            "canonical" => Ok(Self::Canonical),
            other => Err(Error::Config(format!("unknown format {other:?}"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::BrightkiteGowallaTsv => "brightkite_gowalla_tsv",
            Self::WeeplaceCsv => "weeplace_csv",
            Self::FoursquareTsv => "foursquare_tsv",
            Self::Canonical => "canonical",
        })
    }
}

fn iso_seconds(s: &str) -> std::result::Result<i64, String> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.timestamp());
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .map(|dt| dt.and_utc().timestamp())
        .map_err(|_| format!("bad timestamp {s:?}"))
}

fn parse_fields(line: &str, format: Format) -> std::result::Result<CheckIn, String> {
    let c = match format {
        Format::Canonical => return CheckIn::from_record(line),
        Format::BrightkiteGowallaTsv => {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(format!("expected 5 tab-separated fields, got {}", f.len()));
            }
            CheckIn {
                user_id: f[0].trim().to_string(),
                timestamp: iso_seconds(f[1])?,
                lat: num(f[2], "latitude")?,
                lon: num(f[3], "longitude")?,
                venue_id: f[4].trim().to_string(),
                category: None,
            }
        }
        Format::WeeplaceCsv => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(false)
                .from_reader(line.as_bytes());
            let rec = rdr
                .records()
                .next()
                .ok_or("no csv record")?
                .map_err(|e| e.to_string())?;
            if rec.len() != 7 {
                return Err(format!("expected 7 csv fields, got {}", rec.len()));
            }
            CheckIn {
                user_id: rec[0].trim().to_string(),
                timestamp: iso_seconds(&rec[2])?,
                lat: num(&rec[3], "latitude")?,
                lon: num(&rec[4], "longitude")?,
                venue_id: rec[1].trim().to_string(),
                category: Some(rec[6].trim().to_string()),
            }
        }
        Format::FoursquareTsv => {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 8 {
                return Err(format!("expected 8 tab-separated fields, got {}", f.len()));
            }
            let ts = DateTime::parse_from_str(f[7].trim(), "%a %b %d %H:%M:%S %z %Y")
                .map_err(|_| format!("bad timestamp {:?}", f[7]))?
                .timestamp();
            CheckIn {
                user_id: f[0].trim().to_string(),
                timestamp: ts,
                lat: num(f[4], "latitude")?,
                lon: num(f[5], "longitude")?,
                venue_id: f[1].trim().to_string(),
                category: Some(f[3].trim().to_string()),
            }
        }
    };
    c.validate()?;
    Ok(c)
}

/// Parses one line. `line_no` is 1-based and only used in errors.
pub fn parse_checkin_line(line: &str, format: Format, line_no: usize) -> Result<CheckIn> {
    let line = line.trim_end_matches(['\r', '\n']);
    if line.trim().is_empty() {
        return Err(Error::Parse {
            line: line_no,
            msg: "empty line".into(),
        });
    }
    parse_fields(line, format).map_err(|msg| Error::Parse { line: line_no, msg })
}

/// Line-oriented parser. Lenient mode skips and counts malformed lines;
/// strict mode fails on the first one.
#[derive(Debug, Clone)]
pub struct Parser {
    pub format: Format,
    pub strict: bool,
    pub skipped: usize,
    pub skip_header: bool,
}

impl Parser {
    pub fn new(format: Format, strict: bool) -> Self {
        Self {
            format,
            strict,
            skipped: 0,
            skip_header: format == Format::WeeplaceCsv,
        }
    }

    pub fn parse_str(&mut self, text: &str) -> Result<Vec<CheckIn>> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 && self.skip_header && line.to_ascii_lowercase().starts_with("userid") {
                continue;
            }
            match parse_checkin_line(line, self.format, i + 1) {
                Ok(c) => out.push(c),
                Err(e) if self.strict => return Err(e),
                Err(_) => self.skipped += 1,
            }
        }
        Ok(out)
    }

    pub fn parse_file(&mut self, path: &std::path::Path) -> Result<Vec<CheckIn>> {
        self.parse_str(&std::fs::read_to_string(path)?)
    }
}

pub fn write_records(checkins: impl IntoIterator<Item = impl std::borrow::Borrow<CheckIn>>) -> String {
    let mut s = String::new();
    for c in checkins {
        s.push_str(&c.borrow().to_record());
        s.push('\n');
    }
    s
}
