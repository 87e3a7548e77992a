//! Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only.

use std::path::Path;

use genconv::{Shape, Tensor3};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
}

/// Parses a P5/P6 file into a `(channels, height, width)` tensor holding the
/// stored sample values. Files with `maxval < 255` are not rescaled.
pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor3, String> {
    let (header, offset) = parse_header(bytes)?;
    let n = header.channels * header.width * header.height;
    let payload = bytes
        .get(offset..offset + n)
        .ok_or_else(|| format!("truncated payload: expected {n} bytes, found {}", bytes.len() - offset))?;
    if let Some(v) = payload.iter().find(|&&v| u32::from(v) > header.maxval) {
        return Err(format!("sample {v} exceeds maxval {}", header.maxval));
    }
    let shape = Shape::new(header.channels, header.height, header.width);
    // Interleaved RGB on disk, channel-major in memory.
    Ok(Tensor3::from_fn(shape, |c, y, x| {
        f64::from(payload[(y * header.width + x) * header.channels + c])
    }))
}

pub fn parse_header(bytes: &[u8]) -> std::result::Result<(Header, usize), String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some(m) if m.first() == Some(&b'P') => {
            return Err(format!("unsupported format {}", String::from_utf8_lossy(m)))
        }
        _ => return Err("missing P5/P6 magic number".into()),
    };
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        // Whitespace and comments are allowed between header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format!("malformed header: expected {name}"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        fields[i] = text.parse().map_err(|_| format!("malformed header: {name} out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("malformed header: missing separator before payload".into());
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err("malformed header: zero image extent".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported depth: maxval {maxval} (only 8-bit samples)"));
    }
    let header = Header {
        channels,
        width: width as usize,
        height: height as usize,
        maxval,
    };
    Ok((header, pos + 1))
}

/// Rounds half away from zero and clamps to `[0, 255]`.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    v.round().clamp(0.0, 255.0) as u8
}

/// P5 for one channel, P6 for three.
pub fn encode(image: &Tensor3) -> std::result::Result<Vec<u8>, String> {
    let s = image.shape();
    let magic = match s.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(format!("cannot write {c}-channel image")),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.width, s.height).into_bytes();
    out.reserve(s.len());
    for y in 0..s.height {
        for x in 0..s.width {
            for c in 0..s.channels {
                out.push(quantize(image.get(c, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<Tensor3> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|reason| CliError::Image {
        path: path.to_path_buf(),
        reason,
    })
}

/// Writes values already in display range; see [`quantize`].
pub fn save_image(image: &Tensor3, path: &Path) -> Result<()> {
    let bytes = encode(image).map_err(|reason| CliError::Image {
        path: path.to_path_buf(),
        reason,
    })?;
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Nearest-neighbour resize; source pixel for target `y` is
/// `floor((y + 0.5) · h_in / h_out)`.
pub fn resize_nearest(image: &Tensor3, height: usize, width: usize) -> Tensor3 {
    let s = image.shape();
    if s.height == height && s.width == width {
        return image.clone();
    }
    let src = |o: usize, n_in: usize, n_out: usize| ((2 * o + 1) * n_in / (2 * n_out)).min(n_in - 1);
    Tensor3::from_fn(Shape::new(s.channels, height, width), |c, y, x| {
        image.get(c, src(y, s.height, height), src(x, s.width, width))
    })
}

/// Luma with Rec. 601 weights; single-channel input is returned as is.
pub fn to_gray(image: &Tensor3) -> Tensor3 {
    let s = image.shape();
    if s.channels == 1 {
        return image.clone();
    }
    Tensor3::from_fn(Shape::new(1, s.height, s.width), |_, y, x| {
        0.299 * image.get(0, y, x) + 0.587 * image.get(1, y, x) + 0.114 * image.get(2, y, x)
    })
}

/// Replicates a gray channel into RGB; three-channel input is returned as is.
pub fn to_rgb(image: &Tensor3) -> Tensor3 {
    let s = image.shape();
    if s.channels == 3 {
        return image.clone();
    }
    Tensor3::from_fn(Shape::new(3, s.height, s.width), |_, y, x| image.get(0, y, x))
}
