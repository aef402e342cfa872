//! Raw 32-bit float planes with a two-line text header.
//!
//! Residuals, references, and heatmaps need lossless persistence; this
//! format stores the samples as little-endian f32 exactly as held in
//! memory, so a write/read cycle is bit-identical.

use crate::error::{Error, Result};
use crate::plane::Plane;
use std::fs;
use std::path::Path;

const MAGIC: &str = "fplane 1";

pub fn write_float_plane(path: &Path, plane: &Plane) -> Result<()> {
    let mut bytes =
        format!("{MAGIC}\n{} {}\n", plane.width(), plane.height()).into_bytes();
    bytes.reserve(plane.len() * 4);
    for &v in plane.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    super::write_atomic(path, &bytes)
}

pub fn read_float_plane(path: &Path) -> Result<Plane> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let mut pos = 0usize;
    let mut line = |line_no: usize| -> Result<&str> {
        let start = pos;
        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(Error::format(path, line_no, "truncated header".to_string()));
        }
        let s = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::format(path, line_no, "header is not utf8".to_string()))?;
        pos += 1;
        Ok(s)
    };
    let magic = line(1)?;
    if magic != MAGIC {
        return Err(Error::format(
            path,
            1,
            format!("expected \"{MAGIC}\", found \"{magic}\""),
        ));
    }
    let dims = line(2)?;
    let mut it = dims.split_ascii_whitespace();
    let parse = |tok: Option<&str>| -> Result<usize> {
        tok.and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::format(path, 2, format!("bad dimensions line \"{dims}\"")))
    };
    let width = parse(it.next())?;
    let height = parse(it.next())?;
    if it.next().is_some() {
        return Err(Error::format(path, 2, format!("bad dimensions line \"{dims}\"")));
    }

    let n = width * height;
    let raster = &bytes[pos..];
    if raster.len() != n * 4 {
        return Err(Error::format(
            path,
            2,
            format!("expected {} raster bytes for {width}x{height}, found {}", n * 4, raster.len()),
        ));
    }
    let data = raster
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect::<Vec<f32>>();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("sample in {}", path.display())));
    }
    Plane::from_vec(width, height, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.fplane");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = crate::nn::Tensor::randn(&[1, 1, 6, 4], 3.0, &mut rng);
        let mut plane = Plane::from_tensor(&t).unwrap();
        // Include values that would not survive any decimal text round trip.
        plane.data_mut()[0] = f32::MIN_POSITIVE / 8.0;
        plane.data_mut()[1] = -0.1;
        write_float_plane(&path, &plane).unwrap();
        let back = read_float_plane(&path).unwrap();
        for (a, b) in plane.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "{a} vs {b}");
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(&path, b"fplane 2\n2 2\n0123456789abcdef").unwrap();
        let err = read_float_plane(&path).unwrap_err();
        assert!(err.to_string().contains("fplane 1"), "{err}");
    }

    #[test]
    fn short_raster_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short");
        std::fs::write(&path, b"fplane 1\n3 3\n0000").unwrap();
        let err = read_float_plane(&path).unwrap_err();
        assert!(err.to_string().contains("36 raster bytes"), "{err}");
    }

    #[test]
    fn non_finite_samples_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan");
        let mut bytes = b"fplane 1\n1 1\n".to_vec();
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(read_float_plane(&path).is_err());
    }
}
