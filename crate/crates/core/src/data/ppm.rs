//! Binary PPM (P6, maxval 255) images as `[3, H, W]` tensors in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, PpmError, Result};
use crate::tensor::{Element, Tensor};

fn skip_space_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> std::result::Result<u32, PpmError> {
    *pos = skip_space_and_comments(bytes, *pos);
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(PpmError::MalformedHeader(format!("missing {what}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PpmError::MalformedHeader(format!("{what} out of range")))
}

pub fn decode<T: Element>(bytes: &[u8]) -> std::result::Result<Tensor<T>, PpmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(PpmError::BadMagic);
    }
    let mut pos = 2;
    if pos >= bytes.len() || !(bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
        return Err(PpmError::MalformedHeader("no separator after magic".into()));
    }
    let w = header_number(bytes, &mut pos, "width")? as usize;
    let h = header_number(bytes, &mut pos, "height")? as usize;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if w == 0 || h == 0 {
        return Err(PpmError::MalformedHeader(format!("zero extent {w}x{h}")));
    }
    if maxval != 255 {
        return Err(PpmError::UnsupportedMaxval(maxval));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(PpmError::MalformedHeader("no whitespace after maxval".into()));
    }
    pos += 1;
    let expected = w.checked_mul(h).and_then(|n| n.checked_mul(3)).ok_or_else(|| PpmError::MalformedHeader("extent overflow".into()))?;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(PpmError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let mut data = vec![T::zero(); expected];
    let plane = w * h;
    for (i, px) in payload[..expected].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::from_f64_lossy(px[c] as f64 / 255.0);
        }
    }
    Ok(Tensor::new(vec![3, h, w], data).expect("extents match payload"))
}

/// Quantize to 8 bits with rounding and clamping.
pub fn encode<T: Element>(img: &Tensor<T>) -> std::result::Result<Vec<u8>, PpmError> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(PpmError::MalformedHeader(format!("image tensor must be [3, H, W], got {s:?}")));
    }
    if s[0] != 3 {
        return Err(PpmError::Channels(s[0]));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = w * h;
    let d = img.data();
    out.reserve(plane * 3);
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + i].as_f64()));
        }
    }
    Ok(out)
}

pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v };
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_image<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

pub fn save_image<T: Element>(img: &Tensor<T>, path: &Path) -> Result<()> {
    let bytes = encode(img)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn white_pixel() {
        let t = decode::<f32>(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn header_comments_and_layout() {
        let t = decode::<f64>(b"P6 # c\n2 # w\n1\n255 \x00\x33\xff\x10\x20\x30").unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data()[1], 16.0 / 255.0);
        assert_eq!(t.data()[2], 0x33 as f64 / 255.0);
    }

    #[test]
    fn structured_errors() {
        assert_eq!(decode::<f32>(b"P3\n1 1\n255\n"), Err(PpmError::BadMagic));
        assert_eq!(decode::<f32>(b"P6\n1 1\n65535\n\0\0\0\0\0\0"), Err(PpmError::UnsupportedMaxval(65535)));
        assert_eq!(decode::<f32>(b"P6\n2 1\n255\n\0\0\0"), Err(PpmError::Truncated { expected: 6, found: 3 }));
        assert!(matches!(decode::<f32>(b"P6\nx 1\n255\n"), Err(PpmError::MalformedHeader(_))));
        assert!(matches!(decode::<f32>(b"P6"), Err(PpmError::MalformedHeader(_))));
        assert!(matches!(decode::<f32>(b""), Err(PpmError::BadMagic)));
        assert_eq!(encode(&Tensor::<f32>::zeros(&[1, 2, 2])), Err(PpmError::Channels(1)));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/img.ppm");
        let t = Tensor::<f32>::from_f64(vec![3, 1, 2], &[0.0, 1.0, 2.0 / 255.0, 0.5, 1.0, 0.25]).unwrap();
        save_image(&t, &path).unwrap();
        let back: Tensor<f32> = load_image(&path).unwrap();
        assert_eq!(encode(&back).unwrap(), encode(&t).unwrap());
    }

    proptest! {
        #[test]
        fn quantized_round_trip_is_exact(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<u8> = (0..3 * h * w).map(|_| rng.gen()).collect();
            let mut file = format!("P6\n{w} {h}\n255\n").into_bytes();
            file.extend_from_slice(&raw);
            let t32: Tensor<f32> = decode(&file).unwrap();
            prop_assert_eq!(&encode(&t32).unwrap(), &file);
            let t64: Tensor<f64> = decode(&file).unwrap();
            prop_assert_eq!(&encode(&t64).unwrap(), &file);
            let again: Tensor<f32> = decode(&encode(&t32).unwrap()).unwrap();
            prop_assert_eq!(again, t32);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode::<f32>(&bytes);
            let mut prefixed = b"P6\n".to_vec();
            prefixed.extend_from_slice(&bytes);
            let _ = decode::<f32>(&prefixed);
        }
    }
}
