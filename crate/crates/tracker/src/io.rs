//! Trajectory text files and the velodyne point-cloud binary reader.

use crate::geometry::OrientedBox3D;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Malformed { path: String, line: usize, msg: String },
    #[error("{path}: length {len} bytes is not a whole number of 16-byte point records")]
    BadBinLength { path: String, len: u64 },
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// One trajectory line: a frame id and the box occupied at that frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub frame: u64,
    pub boxed: OrientedBox3D,
}

fn file_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::File { path: path.display().to_string(), source }
}

/// Formats one entry exactly as the readers expect:
/// `frame_id cx cy cz l w h yaw` with six decimal places.
pub fn format_trajectory_line(e: &TrajectoryEntry) -> String {
    let b = &e.boxed;
    format!(
        "{} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
        e.frame, b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw
    )
}

pub fn write_trajectory(path: &Path, entries: &[TrajectoryEntry]) -> Result<(), IoError> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format_trajectory_line(e));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| file_err(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| file_err(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryEntry>, IoError> {
    let f = std::fs::File::open(path).map_err(|e| file_err(path, e))?;
    let mut entries = Vec::new();
    for (idx, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| file_err(path, e))?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(parse_trajectory_line(&line).map_err(|msg| IoError::Malformed {
            path: path.display().to_string(),
            line: lineno,
            msg,
        })?);
    }
    Ok(entries)
}

pub fn parse_trajectory_line(line: &str) -> Result<TrajectoryEntry, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 8 {
        return Err(format!("expected 8 fields (frame cx cy cz l w h yaw), got {}", fields.len()));
    }
    let frame: u64 = fields[0].parse().map_err(|_| format!("bad frame id {:?}", fields[0]))?;
    let mut v = [0.0f64; 7];
    for (i, field) in fields[1..].iter().enumerate() {
        v[i] = field
            .parse::<f64>()
            .map_err(|_| format!("bad float {:?} in field {}", field, i + 2))?;
        if !v[i].is_finite() {
            return Err(format!("non-finite value in field {}", i + 2));
        }
    }
    let boxed = OrientedBox3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6])
        .map_err(|e| e.to_string())?;
    Ok(TrajectoryEntry { frame, boxed })
}

/// Reads a velodyne scan: little-endian f32 records (x, y, z, intensity).
pub fn read_kitti_bin(path: &Path) -> Result<Vec<[f32; 4]>, IoError> {
    let meta = std::fs::metadata(path).map_err(|e| file_err(path, e))?;
    if meta.len() % 16 != 0 {
        return Err(IoError::BadBinLength { path: path.display().to_string(), len: meta.len() });
    }
    let mut bytes = Vec::with_capacity(meta.len() as usize);
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| file_err(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(IoError::BadBinLength { path: path.display().to_string(), len: bytes.len() as u64 });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for rec in bytes.chunks_exact(16) {
        let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]);
        points.push([f(0), f(4), f(8), f(12)]);
    }
    Ok(points)
}

pub fn write_kitti_bin(path: &Path, points: &[[f32; 4]]) -> Result<(), IoError> {
    let mut bytes = Vec::with_capacity(points.len() * 16);
    for p in points {
        for v in p {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| file_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_entries() -> Vec<TrajectoryEntry> {
        vec![
            TrajectoryEntry {
                frame: 0,
                boxed: OrientedBox3D::new([1.25, -0.5, 0.125], [4.0, 2.0, 1.5], 0.5).unwrap(),
            },
            TrajectoryEntry {
                frame: 1,
                boxed: OrientedBox3D::new([2.0, 0.0, 0.25], [4.0, 2.0, 1.5], -1.0).unwrap(),
            },
        ]
    }

    #[test]
    fn trajectory_bytes_round_trip_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        write_trajectory(&path, &sample_entries()).unwrap();
        let first = std::fs::read(&path).unwrap();
        let parsed = read_trajectory(&path).unwrap();
        write_trajectory(&path, &parsed).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second, "parse→format must reproduce the same bytes");
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].frame, 0);
    }

    #[test]
    fn line_format_is_fixed_width_decimal() {
        let line = format_trajectory_line(&sample_entries()[0]);
        assert_eq!(line, "0 1.250000 -0.500000 0.125000 4.000000 2.000000 1.500000 0.500000");
        let back = parse_trajectory_line(&line).unwrap();
        assert_eq!(back.frame, 0);
        assert!((back.boxed.center[0] - 1.25).abs() < 1e-9);
    }

    #[test]
    fn malformed_lines_name_their_line_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "0 1 2 3 4 5 6 0.1\nnot a line\n").unwrap();
        let err = read_trajectory(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");

        std::fs::write(&path, "0 1 2 3 4 5 6\n").unwrap();
        let err = read_trajectory(&path).unwrap_err();
        assert!(err.to_string().contains("8 fields"), "{err}");

        std::fs::write(&path, "0 1 2 3 0 5 6 0.1\n").unwrap();
        let err = read_trajectory(&path).unwrap_err();
        assert!(err.to_string().contains("positive"), "{err}");
    }

    #[test]
    fn kitti_bin_round_trips_and_rejects_bad_length() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("scan.bin");
        let pts = vec![[1.0f32, 2.0, 3.0, 0.5], [-0.25, 0.0, 7.5, 1.0]];
        write_kitti_bin(&path, &pts).unwrap();
        assert_eq!(read_kitti_bin(&path).unwrap(), pts);

        std::fs::write(&path, vec![0u8; 17]).unwrap();
        let err = read_kitti_bin(&path).unwrap_err();
        assert!(matches!(err, IoError::BadBinLength { len: 17, .. }), "{err}");
    }
}
