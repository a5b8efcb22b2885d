//! Scaling data points bundled with the crate.

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use super::{Result, ScalingError, ScalingPoint};

/// Columns: `condition,hours,accuracy,run_id`. Three runs per data size
/// (1.301, 13.01, 130.1 and 1301 hours); linear-probe rows have one run at
/// the largest size.
pub const FIXTURE_CSV: &str = include_str!("../../data/scaling_points.csv");
pub const FIXTURE_SHA256: &str = "b9510f8bba6b14260a4e0b9e11b19fb6f720d0df3f1c161d7d2ad671a190d256";

pub fn verify_fixture(bytes: &[u8]) -> Result<()> {
    let actual = hex::encode(Sha256::digest(bytes));
    if actual != FIXTURE_SHA256 {
        return Err(ScalingError::Checksum {
            expected: FIXTURE_SHA256.to_string(),
            actual,
        });
    }
    Ok(())
}

/// Verified and parsed fixture.
pub fn bundled_points() -> Result<Vec<ScalingPoint>> {
    verify_fixture(FIXTURE_CSV.as_bytes())?;
    parse_points(FIXTURE_CSV.as_bytes())
}

pub fn parse_points<R: Read>(reader: R) -> Result<Vec<ScalingPoint>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let p: ScalingPoint = row?;
        p.validate()?;
        out.push(p);
    }
    Ok(out)
}

pub fn write_points<W: Write>(writer: W, points: &[ScalingPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
