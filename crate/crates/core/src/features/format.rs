//! `DSAF` feature files and `DSAN` normalization-stats files.
//!
//! ```text
//! DSAF: "DSAF" u32 version=1, u32 rows, u32 cols, rows*cols f32 LE (row-major)
//! DSAN: "DSAN" u32 version=1, u32 dims, dims f32 mean, dims f32 std, u64 frame_count
//! ```

use std::path::Path;

use super::norm::STD_FLOOR;
use super::{FeatureMatrix, NormStats};
use crate::codec::{put_f32s, put_u32, put_u64, read_file, write_atomic, ByteReader};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"DSAF";
pub const STATS_MAGIC: &[u8; 4] = b"DSAN";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_matrix(values: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + values.data().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, values.rows() as u32);
    put_u32(&mut out, values.cols() as u32);
    put_f32s(&mut out, values.data());
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    let mut r = ByteReader::new(bytes, "DSAF");
    r.magic(FEATURE_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!("DSAF: unsupported version {version}")));
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let data = r.f32_vec(rows.checked_mul(cols).ok_or_else(|| Error::format("DSAF: size overflow"))?)?;
    r.finish()?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("DSAF: non-finite value"));
    }
    Matrix::from_vec(rows, cols, data)
}

/// The `normalized` flag is not part of the file; callers decide.
pub fn decode_features(bytes: &[u8], normalized: bool) -> Result<FeatureMatrix> {
    FeatureMatrix::new(decode_matrix(bytes)?, normalized)
}

pub fn write_features(path: &Path, features: &FeatureMatrix) -> Result<()> {
    write_atomic(path, &encode_matrix(features.values()))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    decode_features(&read_file(path)?, false)
}

pub fn encode_norm_stats(stats: &NormStats) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + stats.dims() * 8);
    out.extend_from_slice(STATS_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, stats.dims() as u32);
    put_f32s(&mut out, &stats.mean);
    put_f32s(&mut out, &stats.std);
    put_u64(&mut out, stats.frame_count);
    out
}

pub fn decode_norm_stats(bytes: &[u8]) -> Result<NormStats> {
    let mut r = ByteReader::new(bytes, "DSAN");
    r.magic(STATS_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!("DSAN: unsupported version {version}")));
    }
    let dims = r.u32()? as usize;
    let mean = r.f32_vec(dims)?;
    let raw_std = r.f32_vec(dims)?;
    let frame_count = r.u64()?;
    r.finish()?;
    if mean.iter().chain(&raw_std).any(|v| !v.is_finite()) {
        return Err(Error::format("DSAN: non-finite value"));
    }
    // the f32 image of the floor sits just below it
    let floor32 = STD_FLOOR as f32 as f64;
    let clamped = raw_std.iter().map(|&s| s <= floor32).collect();
    let std = raw_std.iter().map(|&s| s.max(STD_FLOOR)).collect();
    Ok(NormStats {
        mean,
        std,
        frame_count,
        clamped,
    })
}

pub fn write_norm_stats(path: &Path, stats: &NormStats) -> Result<()> {
    write_atomic(path, &encode_norm_stats(stats))
}

pub fn read_norm_stats(path: &Path) -> Result<NormStats> {
    decode_norm_stats(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_layout() {
        let m = Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        let bytes = encode_matrix(&m);
        assert_eq!(&bytes[..4], b"DSAF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), -2.0);
        assert_eq!(bytes.len(), 16 + 16);
        assert_eq!(decode_matrix(&bytes).unwrap(), m);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_matrix(&Matrix::filled(3, 2, 1.0));
        assert!(matches!(decode_matrix(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_matrix(&bad), Err(Error::Format(_))));
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(decode_matrix(&version), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode_matrix(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn stats_keep_clamp_flag() {
        let stats = NormStats {
            mean: vec![1.0, 2.0],
            std: vec![STD_FLOOR, 0.5],
            frame_count: 12,
            clamped: vec![true, false],
        };
        let bytes = encode_norm_stats(&stats);
        assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 8 + 8);
        let back = decode_norm_stats(&bytes).unwrap();
        assert_eq!(back.clamped, vec![true, false]);
        assert!(back.std.iter().all(|&s| s >= STD_FLOOR));
        assert_eq!(back.frame_count, 12);
        assert_eq!(encode_norm_stats(&back), bytes);
    }
}
