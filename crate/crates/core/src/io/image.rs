use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PNG_MAGIC: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// File extensions treated as images when indexing directories.
pub const IMAGE_EXTENSIONS: [&str; 2] = ["png", "ppm"];

pub fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

/// Byte to `[−1, 1]`.
pub fn byte_to_unit(b: u8) -> f32 {
    (2.0 * b as f64 / 255.0 - 1.0) as f32
}

/// Inverse of [`byte_to_unit`], rounding half up and clamping.
pub fn unit_to_byte(v: f32) -> u8 {
    let x = (v as f64 + 1.0) * 255.0 / 2.0;
    if x.is_nan() {
        return 0;
    }
    (x + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn from_rgb_bytes(width: usize, height: usize, rgb: &[u8]) -> Result<Tensor<f32>> {
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = byte_to_unit(px[ch]);
        }
    }
    Tensor::new(&[1, 3, height, width], data)
}

fn to_rgb_bytes(img: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    let (n, c, h, w) = img.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape(format!("saving expects a 1×3×H×W image, got {:?}", img.shape())));
    }
    let plane = h * w;
    let d = img.data();
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            out.push(unit_to_byte(d[ch * plane + i]));
        }
    }
    Ok((w, h, out))
}

/// Decode a PNG or binary PPM into a `1×3×H×W` tensor in [−1, 1].
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|f| BufReader::new(f).read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&PNG_MAGIC) {
        decode_png(path, &bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(path, &bytes)
    } else {
        Err(Error::UnsupportedFormat { path: path.to_path_buf() })
    }
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<Tensor<f32>> {
    let fail = |msg: String| Error::Decode { path: path.to_path_buf(), msg };
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| fail(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| fail(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let raw = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => raw.to_vec(),
        png::ColorType::Rgba => raw.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => raw.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => raw.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(fail("palette was not expanded".into())),
    };
    if rgb.len() != 3 * w * h {
        return Err(fail(format!("{} bytes for a {w}×{h} image", rgb.len())));
    }
    from_rgb_bytes(w, h, &rgb)
}

fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<Tensor<f32>> {
    let fail = |msg: &str| Error::Decode { path: path.to_path_buf(), msg: msg.to_string() };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail("malformed PPM header"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(fail("only 8-bit PPM (maxval 255) is supported"));
    }
    if w == 0 || h == 0 {
        return Err(fail("empty PPM image"));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(fail("malformed PPM header"));
    }
    pos += 1;
    let need = 3 * w * h;
    let pixels = bytes.get(pos..pos + need).ok_or_else(|| fail("truncated PPM pixel data"))?;
    from_rgb_bytes(w, h, pixels)
}

/// Encode by extension: `.png` or `.ppm`.
pub fn save_image(img: &Tensor<f32>, path: &Path) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
    let (w, h, rgb) = to_rgb_bytes(img)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    match ext.as_deref() {
        Some("png") => {
            let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::Decode { path: path.to_path_buf(), msg: e.to_string() })?;
            writer
                .write_image_data(&rgb)
                .map_err(|e| Error::Decode { path: path.to_path_buf(), msg: e.to_string() })?;
        }
        Some("ppm") => {
            write!(out, "P6\n{w} {h}\n255\n").map_err(|e| Error::io(path, e))?;
            out.write_all(&rgb).map_err(|e| Error::io(path, e))?;
        }
        _ => return Err(Error::UnsupportedFormat { path: path.to_path_buf() }),
    }
    out.flush().map_err(|e| Error::io(path, e))
}
