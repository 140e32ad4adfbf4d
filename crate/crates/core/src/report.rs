//! Report serialization: pretty JSON with every float written to 17
//! significant digits, plus the `meta` block recording config and input
//! digests.

use std::io;
use std::path::Path;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Pretty-printing formatter that writes floats as `d.dddddddddddddddde±x`.
struct Sig17Formatter<'a> {
    inner: PrettyFormatter<'a>,
}

macro_rules! delegate {
    ($($name:ident($($arg:ident: $ty:ty),*)),* $(,)?) => {
        $(
            fn $name<W: ?Sized + io::Write>(&mut self, writer: &mut W $(, $arg: $ty)*) -> io::Result<()> {
                self.inner.$name(writer $(, $arg)*)
            }
        )*
    };
}

impl Formatter for Sig17Formatter<'_> {
    delegate!(
        begin_array(),
        end_array(),
        begin_array_value(first: bool),
        end_array_value(),
        begin_object(),
        end_object(),
        begin_object_key(first: bool),
        end_object_key(),
        begin_object_value(),
        end_object_value(),
    );

    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{}", format_sig17(value))
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

/// 17 significant digits, enough to round-trip any f64.
pub fn format_sig17(value: f64) -> String {
    format!("{value:.16e}")
}

pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(
        &mut buf,
        Sig17Formatter {
            inner: PrettyFormatter::with_indent(b"  "),
        },
    );
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = to_json_string(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Serialize)]
pub struct InputDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

/// Provenance block attached to every report.
#[derive(Clone, Debug, Serialize)]
pub struct Meta {
    pub artifact_version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Meta {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Meta {
            artifact_version: ARTIFACT_VERSION.to_string(),
            command: command.to_string(),
            config,
            inputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// Records the SHA-256 of a file (and of its `.ids` sidecar for DVEM
    /// inputs).
    pub fn add_input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.push(InputDigest {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: file_digest(path)?,
        });
        if path.extension().is_some_and(|e| e == "dvem") {
            let ids = crate::datamodel::ids_path(path);
            self.inputs.push(InputDigest {
                role: format!("{role}.ids"),
                path: ids.display().to_string(),
                sha256: file_digest(&ids)?,
            });
        }
        Ok(())
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Map key for a percentage: `20` for 20.0, `12.5` for 12.5.
pub fn percent_key(p: f64) -> String {
    if p.fract() == 0.0 {
        format!("{}", p as i64)
    } else {
        format!("{p}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_with_17_digits() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.907755278982137, 0.0, 1e300] {
            let s = format_sig17(v);
            let digits: String = s.split('e').next().unwrap().chars().filter(char::is_ascii_digit).collect();
            assert_eq!(digits.len(), 17, "{s}");
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn json_is_valid_and_exact() {
        #[derive(Serialize)]
        struct R {
            x: f64,
            v: Vec<f64>,
            n: usize,
        }
        let r = R {
            x: 0.1 + 0.2,
            v: vec![1.0, f64::NAN],
            n: 3,
        };
        let s = to_json_string(&r).unwrap();
        let back: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["x"].as_f64().unwrap(), 0.1 + 0.2);
        assert!(back["v"][1].is_null());
        assert_eq!(back["n"], 3);
    }

    #[test]
    fn percent_keys() {
        assert_eq!(percent_key(20.0), "20");
        assert_eq!(percent_key(100.0), "100");
        assert_eq!(percent_key(12.5), "12.5");
    }
}
