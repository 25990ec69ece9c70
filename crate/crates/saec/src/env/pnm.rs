//! Binary portable-pixmap I/O: P5 (grayscale) and P6 (RGB), maxval up to 255.
//!
//! This is the single raster codec of the project — fixtures, ingested
//! datasets, and emitted sample grids all use it. Written files always use
//! maxval 255; readers accept any maxval in `1..=255` and `#` comments in the
//! header. Pixel values map affinely between bytes and the `[-1, 1]` tensor
//! convention, so a write/read round trip is exact up to `1/255`.

use std::fs;
use std::path::Path;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::EnvError;

/// Write `image` (`[c, h, w]` in `[-1, 1]`, `c` of 1 or 3) as binary PGM/PPM.
pub fn write_pnm<S: Scalar>(path: &Path, image: &Tensor<S>) -> Result<(), EnvError> {
    if image.rank() != 3 {
        return Err(EnvError::Invalid {
            op: "write_pnm",
            msg: format!("want a [c, h, w] image, got shape {:?}", image.shape()),
        });
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(EnvError::Invalid {
                op: "write_pnm",
                msg: format!("want 1 or 3 channels, got {c}"),
            })
        }
    };
    let mut bytes = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    bytes.reserve(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push(quantize(data[(ch * h + y) * w + x].to_f64_c()));
            }
        }
    }
    fs::write(path, bytes).map_err(|e| EnvError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Read a binary PGM/PPM into a `[c, h, w]` tensor in `[-1, 1]`.
pub fn read_pnm<S: Scalar>(path: &Path) -> Result<Tensor<S>, EnvError> {
    let bytes = fs::read(path).map_err(|e| EnvError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    decode_pnm(&bytes).map_err(|msg| EnvError::BadImage {
        path: path.display().to_string(),
        msg,
    })
}

/// Decode an in-memory PNM byte stream.
pub fn decode_pnm<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.token()?;
    let c = match magic {
        "P5" => 1usize,
        "P6" => 3usize,
        other => return Err(format!("unsupported magic `{other}` (want P5 or P6)")),
    };
    let w = cur.int("width")?;
    let h = cur.int("height")?;
    let maxval = cur.int("maxval")?;
    if w == 0 || h == 0 {
        return Err(format!("degenerate dimensions {w}x{h}"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(format!("unsupported maxval {maxval} (want 1..=255)"));
    }
    // Exactly one whitespace byte separates the header from the raster data.
    match cur.bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err("missing whitespace after maxval".into()),
    }
    let n = w * h * c;
    let payload = &cur.bytes[cur.pos.min(cur.bytes.len())..];
    if payload.len() < n {
        return Err(format!(
            "truncated raster data: want {n} bytes, got {}",
            payload.len()
        ));
    }
    // Interleaved rows -> planar [c, h, w].
    let scale = 2.0 / maxval as f64;
    let mut data = vec![S::zero(); n];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = payload[(y * w + x) * c + ch] as f64 * scale - 1.0;
                data[(ch * h + y) * w + x] = S::from_f64_c(v);
            }
        }
    }
    Tensor::constant(&[c, h, w], data).map_err(|e| e.to_string())
}

/// `[-1, 1]` to a byte, rounding to nearest and saturating.
fn quantize(v: f64) -> u8 {
    (((v + 1.0) * 0.5 * 255.0).round()).clamp(0.0, 255.0) as u8
}

/// Header scanner: whitespace-separated tokens with `#` line comments.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_filler(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&b) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&str, String> {
        self.skip_filler();
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() || b == b'#' {
                break;
            }
            self.pos += 1;
        }
        if self.pos == start {
            return Err("unexpected end of header".into());
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| "non-ASCII header".into())
    }

    fn int(&mut self, what: &str) -> Result<usize, String> {
        let tok = self.token()?;
        tok.parse::<usize>()
            .map_err(|_| format!("bad {what} `{tok}`"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_path(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("saec-pnm-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_exact_to_one_quantization_step() {
        for (c, name) in [(1usize, "rt.pgm"), (3usize, "rt.ppm")] {
            let n = c * 6 * 5;
            let img = Tensor::constant(
                &[c, 6, 5],
                (0..n).map(|i| (i as f64 / n as f64) * 2.0 - 1.0).collect(),
            )
            .unwrap();
            let path = temp_path(name);
            write_pnm(&path, &img).unwrap();
            let back: Tensor<f64> = read_pnm(&path).unwrap();
            assert_eq!(back.shape(), img.shape());
            for (&a, &b) in img.data().iter().zip(back.data().iter()) {
                assert!((a - b).abs() <= 2.0 / 255.0 + 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn solid_gray_fixture_decodes_to_the_expected_constant() {
        // Hand-built 2x2 P5 file, every byte 128: expected value
        // 128/255 * 2 - 1, i.e. the mid-gray fill within 1/255.
        let bytes = b"P5\n2 2\n255\n\x80\x80\x80\x80";
        let img: Tensor<f64> = decode_pnm(bytes).unwrap();
        assert_eq!(img.shape(), &[1, 2, 2]);
        let want = 128.0 / 255.0 * 2.0 - 1.0;
        for &v in img.data().iter() {
            assert_eq!(v, want);
            assert!(v.abs() <= 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn header_comments_and_odd_maxval_are_handled() {
        let bytes = b"P5 # magic\n# a comment line\n 2 # width\n1\n128\n\x00\x80";
        let img: Tensor<f64> = decode_pnm(bytes).unwrap();
        assert_eq!(img.shape(), &[1, 1, 2]);
        assert_eq!(img.to_vec(), vec![-1.0, 1.0]); // bytes 0 and 128 of maxval 128
    }

    #[test]
    fn p6_interleaving_lands_in_planar_channels() {
        let bytes = b"P6\n2 1\n255\n\xff\x00\x00\x00\x00\xff";
        let img: Tensor<f64> = decode_pnm(bytes).unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        // red plane then green then blue
        assert_eq!(img.to_vec(), vec![1.0, -1.0, -1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(decode_pnm::<f64>(b"P4\n2 2\n255\n....").is_err()); // wrong magic
        assert!(decode_pnm::<f64>(b"P5\n2 2\n255\n\x00\x00").is_err()); // truncated
        assert!(decode_pnm::<f64>(b"P5\n2 2\n70000\n").is_err()); // 2-byte samples
        assert!(decode_pnm::<f64>(b"P5\n2 two\n255\n\x00\x00\x00\x00").is_err());
        assert!(decode_pnm::<f64>(b"P5\n0 2\n255\n").is_err()); // degenerate
    }

    #[test]
    fn write_rejects_unsupported_channel_counts() {
        let img = Tensor::<f64>::zeros(&[2, 4, 4]);
        let err = write_pnm(&temp_path("bad.pnm"), &img).unwrap_err();
        assert!(matches!(
            err,
            EnvError::Invalid {
                op: "write_pnm",
                ..
            }
        ));
    }
}
