//! Raster and flow file formats.
//!
//! Scans are read through `image` (PNG, TIFF; 8 or 16 bit). Resolution comes
//! from the PNG `pHYs` chunk or the TIFF `XResolution` tag. Derived rasters are
//! written with pinned encoder settings so identical inputs give identical
//! bytes: PNG previews, 32-bit float TIFFs for scalar fields and `.flo` files
//! for flow.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, FlowField, ScalarGrid};
use crate::preprocess::RgbImage;

const INCH_M: f64 = 0.0254;
const FLO_MAGIC: &[u8; 4] = b"DFLO";
/// Middlebury tag `202021.25` ("PIEH"), accepted on read.
const MIDDLEBURY_MAGIC: &[u8; 4] = b"PIEH";

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn sniff(path: &Path) -> Result<[u8; 4]> {
    let mut magic = [0u8; 4];
    open(path)?
        .read_exact(&mut magic)
        .map_err(|e| Error::io(path, e))?;
    Ok(magic)
}

/// Resolution stored in the file, in dots per inch.
pub fn read_dpi(path: &Path) -> Result<Option<f64>> {
    let magic = sniff(path)?;
    if magic == [0x89, b'P', b'N', b'G'] {
        let reader = png::Decoder::new(BufReader::new(open(path)?))
            .read_info()
            .map_err(|e| Error::decode(path, e))?;
        Ok(reader.info().pixel_dims.and_then(|d| match d.unit {
            png::Unit::Meter if d.xppu > 0 => Some(d.xppu as f64 * INCH_M),
            _ => None,
        }))
    } else if &magic[..2] == b"II" || &magic[..2] == b"MM" {
        use tiff::decoder::ifd::Value;
        use tiff::tags::Tag;
        let mut dec = tiff::decoder::Decoder::new(BufReader::new(open(path)?))
            .map_err(|e| Error::decode(path, e))?;
        let res = match dec.find_tag(Tag::XResolution).map_err(|e| Error::decode(path, e))? {
            Some(Value::Rational(n, d)) if d != 0 => n as f64 / d as f64,
            Some(Value::Double(v)) => v,
            Some(Value::Float(v)) => v as f64,
            _ => return Ok(None),
        };
        let unit = dec
            .find_tag_unsigned::<u16>(Tag::ResolutionUnit)
            .map_err(|e| Error::decode(path, e))?
            .unwrap_or(2);
        Ok(match unit {
            2 => Some(res),
            3 => Some(res * 2.54),
            _ => None,
        })
    } else {
        Ok(None)
    }
}

/// Reads a colour or grey scan as RGB in `[0, 1]`. `dpi_override` wins over
/// file metadata; one of the two must be present.
pub fn read_rgb(path: &Path, dpi_override: Option<f64>) -> Result<RgbImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::decode(path, e))?
        .to_rgb32f();
    let dpi = match dpi_override {
        Some(d) => d,
        None => read_dpi(path)?.ok_or_else(|| {
            Error::decode(path, "no resolution metadata; set dpi for this scan in the config")
        })?,
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img
        .pixels()
        .map(|p| [p.0[0] as f64, p.0[1] as f64, p.0[2] as f64])
        .collect();
    RgbImage::new(w, h, pixels, dpi).map_err(|e| e.context(path.display().to_string()))
}

fn png_encoder<W: Write>(w: W, width: usize, height: usize, dpi: Option<f64>) -> png::Encoder<'static, W> {
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_compression(png::Compression::Balanced);
    enc.set_filter(png::Filter::Sub);
    if let Some(dpi) = dpi {
        let ppm = (dpi / INCH_M).round() as u32;
        enc.set_pixel_dims(Some(png::PixelDimensions {
            xppu: ppm,
            yppu: ppm,
            unit: png::Unit::Meter,
        }));
    }
    enc
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    dpi: Option<f64>,
    data: &[u8],
) -> Result<()> {
    let mut enc = png_encoder(create(path)?, width, height, dpi);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| Error::decode(path, e))?;
    writer.write_image_data(data).map_err(|e| Error::decode(path, e))?;
    writer.finish().map_err(|e| Error::decode(path, e))
}

fn normalise(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// 8-bit grey PNG mapping `[lo, hi]` to `[0, 255]`.
pub fn write_gray_png(path: &Path, g: &ScalarGrid, lo: f64, hi: f64) -> Result<()> {
    let data: Vec<u8> = g
        .data()
        .iter()
        .map(|&v| (normalise(v, lo, hi) * 255.0).round() as u8)
        .collect();
    write_png(path, g.width(), g.height(), png::ColorType::Grayscale, png::BitDepth::Eight, g.dpi(), &data)
}

/// 16-bit grey PNG mapping `[lo, hi]` to `[0, 65535]`.
pub fn write_gray16_png(path: &Path, g: &ScalarGrid, lo: f64, hi: f64) -> Result<()> {
    let data: Vec<u8> = g
        .data()
        .iter()
        .flat_map(|&v| ((normalise(v, lo, hi) * 65535.0).round() as u16).to_be_bytes())
        .collect();
    write_png(path, g.width(), g.height(), png::ColorType::Grayscale, png::BitDepth::Sixteen, g.dpi(), &data)
}

/// 8-bit RGB PNG from interleaved bytes.
pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::InvalidParameter(format!(
            "rgb buffer of {} bytes does not match {width}x{height}",
            rgb.len()
        )));
    }
    write_png(path, width, height, png::ColorType::Rgb, png::BitDepth::Eight, None, rgb)
}

/// Reads a grey PNG and maps codes back through `value = offset + scale * code`.
pub fn read_gray_png(path: &Path, offset: f64, scale: f64) -> Result<ScalarGrid> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::decode(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        image::DynamicImage::ImageLuma8(g) => g.pixels().map(|p| offset + scale * p.0[0] as f64).collect(),
        other => other
            .to_luma16()
            .pixels()
            .map(|p| offset + scale * p.0[0] as f64)
            .collect(),
    };
    let dpi = read_dpi(path)?;
    ScalarGrid::from_vec(w, h, data).map(|g| g.with_dpi(dpi))
}

/// Mask as 0 / 255 PNG.
pub fn write_mask_png(path: &Path, m: &BinaryMask) -> Result<()> {
    let data: Vec<u8> = m.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_png(path, m.width(), m.height(), png::ColorType::Grayscale, png::BitDepth::Eight, None, &data)
}

/// Reads a mask; any grey value above 127 is inside.
pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::decode(path, e))?
        .to_luma8();
    let bits = img.pixels().map(|p| p.0[0] > 127).collect();
    BinaryMask::from_vec(img.width() as usize, img.height() as usize, bits)
}

/// Single-channel 32-bit float TIFF.
pub fn write_f32_tiff(path: &Path, g: &ScalarGrid) -> Result<()> {
    use tiff::encoder::{colortype::Gray32Float, Rational, TiffEncoder};
    use tiff::tags::ResolutionUnit;
    let mut out = create(path)?;
    {
        let mut enc = TiffEncoder::new(&mut out).map_err(|e| Error::decode(path, e))?;
        let mut img = enc
            .new_image::<Gray32Float>(g.width() as u32, g.height() as u32)
            .map_err(|e| Error::decode(path, e))?;
        if let Some(dpi) = g.dpi() {
            img.resolution(
                ResolutionUnit::Inch,
                Rational {
                    n: (dpi * 1000.0).round() as u32,
                    d: 1000,
                },
            );
        }
        let data: Vec<f32> = g.data().iter().map(|&v| v as f32).collect();
        img.write_data(&data).map_err(|e| Error::decode(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a single-channel float TIFF written by [`write_f32_tiff`].
pub fn read_f32_tiff(path: &Path) -> Result<ScalarGrid> {
    use tiff::decoder::{Decoder, DecodingResult};
    let mut dec = Decoder::new(BufReader::new(open(path)?)).map_err(|e| Error::decode(path, e))?;
    let (w, h) = dec.dimensions().map_err(|e| Error::decode(path, e))?;
    let data: Vec<f64> = match dec.read_image().map_err(|e| Error::decode(path, e))? {
        DecodingResult::F32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F64(v) => v,
        _ => return Err(Error::decode(path, "expected a floating-point TIFF")),
    };
    let dpi = read_dpi(path)?;
    ScalarGrid::from_vec(w as usize, h as usize, data)
        .map(|g| g.with_dpi(dpi))
        .map_err(|e| e.context(path.display().to_string()))
}

/// Flow raster: magic `DFLO`, little-endian `i32` width and height, then
/// interleaved little-endian `f32` pairs `(vx, vy)` row by row. Apart from the
/// magic this is the Middlebury `.flo` layout.
pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let mut out = create(path)?;
    let mut buf = Vec::with_capacity(12 + flow.vx.data().len() * 8);
    buf.extend_from_slice(FLO_MAGIC);
    buf.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    buf.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for (vx, vy) in flow.vx.data().iter().zip(flow.vy.data()) {
        buf.extend_from_slice(&(*vx as f32).to_le_bytes());
        buf.extend_from_slice(&(*vy as f32).to_le_bytes());
    }
    out.write_all(&buf).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::decode(path, "truncated flow file"));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let magic = word(0);
    if &magic != FLO_MAGIC && &magic != MIDDLEBURY_MAGIC {
        return Err(Error::decode(path, "not a .flo file"));
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w <= 0 || h <= 0 {
        return Err(Error::decode(path, format!("bad flow dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 12 + w * h * 8 {
        return Err(Error::decode(path, "flow file size does not match its header"));
    }
    let mut vx = Vec::with_capacity(w * h);
    let mut vy = Vec::with_capacity(w * h);
    for k in 0..w * h {
        vx.push(f32::from_le_bytes(word(12 + 8 * k)) as f64);
        vy.push(f32::from_le_bytes(word(16 + 8 * k)) as f64);
    }
    FlowField::new(ScalarGrid::from_vec(w, h, vx)?, ScalarGrid::from_vec(w, h, vy)?)
        .map_err(|e| e.context(path.display().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flo_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.flo");
        let f = FlowField::from_fn(7, 5, |x, y| (x as f64 * 0.25 - 1.0, y as f64 * -0.5));
        write_flo(&p, &f).unwrap();
        let g = read_flo(&p).unwrap();
        assert_eq!(f, g);
        assert_eq!(&std::fs::read(&p).unwrap()[..4], b"DFLO");
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 12 + 7 * 5 * 8);
        std::fs::write(&p, b"nope nope nope").unwrap();
        assert!(read_flo(&p).is_err());
    }

    #[test]
    fn float_tiff_round_trip_keeps_dpi() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tif");
        let g = ScalarGrid::from_fn(9, 4, |x, y| x as f64 * 0.5 - y as f64).with_dpi(Some(150.0));
        write_f32_tiff(&p, &g).unwrap();
        let r = read_f32_tiff(&p).unwrap();
        assert_eq!(r.data(), g.data());
        assert_eq!(r.dpi(), Some(150.0));
    }

    #[test]
    fn png_dpi_and_mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let g = ScalarGrid::from_fn(6, 6, |x, _| x as f64 / 5.0).with_dpi(Some(300.0));
        write_gray_png(&p, &g, 0.0, 1.0).unwrap();
        let dpi = read_dpi(&p).unwrap().unwrap();
        assert!((dpi - 300.0).abs() < 0.05);
        let rgb = read_rgb(&p, None).unwrap();
        assert_eq!(rgb.get(5, 0), [1.0, 1.0, 1.0]);
        assert_eq!(rgb.get(0, 0), [0.0, 0.0, 0.0]);

        let m = BinaryMask::from_fn(5, 3, |x, y| (x + y) % 2 == 0);
        let mp = dir.path().join("m.png");
        write_mask_png(&mp, &m).unwrap();
        assert_eq!(read_mask_png(&mp).unwrap(), m);
    }

    #[test]
    fn png_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let g = ScalarGrid::from_fn(33, 17, |x, y| ((x * y) % 7) as f64 / 7.0);
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        write_gray16_png(&a, &g, 0.0, 1.0).unwrap();
        write_gray16_png(&b, &g, 0.0, 1.0).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(b).unwrap());
        let back = read_gray_png(&a, 0.0, 1.0 / 65535.0).unwrap();
        for (u, v) in back.data().iter().zip(g.data()) {
            assert!((u - v).abs() <= 0.5 / 65535.0 + 1e-15);
        }
    }

    #[test]
    fn missing_dpi_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nodpi.png");
        write_gray_png(&p, &ScalarGrid::zeros(3, 3), 0.0, 1.0).unwrap();
        let err = read_rgb(&p, None).unwrap_err();
        assert!(err.to_string().contains("nodpi.png"));
        assert_eq!(read_rgb(&p, Some(600.0)).unwrap().dpi, 600.0);
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_rgb(Path::new("/nonexistent/scan.png"), Some(1.0)).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/scan.png"));
    }
}
