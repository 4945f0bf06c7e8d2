//! On-disk formats: 16-bit grayscale PNG frames with a JSON sidecar, paletted
//! 8-bit PNG label maps, CSV boundary traces and RGB PNG overlays.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::types::{BoundaryTrace, Frame, FrameMeta, Grid, LabelMap, NUM_CLASSES};

const U16_MAX: f32 = 65535.0;

/// Display palette for stored label maps (class 0, 1, 2).
const MASK_PALETTE: [u8; 9] = [0, 0, 0, 0, 200, 255, 255, 80, 40];

/// Sidecar path for a frame file: same stem, `.json` extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn encode_err(path: &Path, e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_owned(),
            message: other.to_string(),
        },
    }
}

fn decode_err(path: &Path, e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_owned(),
            message: other.to_string(),
        },
    }
}

struct RawImage {
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    bytes: Vec<u8>,
}

fn read_png(path: &Path) -> Result<RawImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Image {
        path: path.to_owned(),
        message: "image too large".into(),
    })?;
    let mut bytes = vec![0; size];
    let info = reader
        .next_frame(&mut bytes)
        .map_err(|e| decode_err(path, e))?;
    bytes.truncate(info.buffer_size());
    Ok(RawImage {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        bytes,
    })
}

/// Writes pixels quantised to 16-bit grayscale plus the metadata sidecar.
pub fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    let pixels = frame.pixels();
    let mut data = Vec::with_capacity(pixels.as_slice().len() * 2);
    for &v in pixels.as_slice() {
        let q = (v.clamp(0.0, 1.0) * U16_MAX).round() as u16;
        data.extend_from_slice(&q.to_be_bytes());
    }
    let w = create(path)?;
    let mut encoder = png::Encoder::new(w, pixels.width() as u32, pixels.height() as u32);
    encoder.set_color(ColorType::Grayscale);
    encoder.set_depth(BitDepth::Sixteen);
    let mut writer = encoder.write_header().map_err(|e| encode_err(path, e))?;
    writer
        .write_image_data(&data)
        .map_err(|e| encode_err(path, e))?;
    writer.finish().map_err(|e| encode_err(path, e))?;

    let sidecar = sidecar_path(path);
    let json = serde_json::to_string_pretty(&frame.meta())
        .map_err(|e| Error::json(sidecar.display().to_string(), e))?;
    std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
}

/// Reads a grayscale PNG (8 or 16 bit) and its sidecar. A missing sidecar,
/// or missing keys in it, fall back to the default metadata.
pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = read_png(path)?;
    if img.color != ColorType::Grayscale {
        return Err(Error::Image {
            path: path.to_owned(),
            message: format!("expected grayscale, found {:?}", img.color),
        });
    }
    let values: Vec<f32> = match img.depth {
        BitDepth::Sixteen => img
            .bytes
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / U16_MAX)
            .collect(),
        BitDepth::Eight => img.bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        other => {
            return Err(Error::Image {
                path: path.to_owned(),
                message: format!("unsupported bit depth {other:?}"),
            })
        }
    };
    let grid = Grid::from_vec(img.height, img.width, values)?;

    let sidecar = sidecar_path(path);
    let meta = if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        serde_json::from_str::<FrameMeta>(&text)
            .map_err(|e| Error::json(sidecar.display().to_string(), e))?
    } else {
        FrameMeta::default()
    };
    Frame::new(grid, meta)
}

/// Writes a label map as an 8-bit paletted PNG whose indices are class ids.
pub fn save_label_map(labels: &LabelMap, path: &Path) -> Result<()> {
    let w = create(path)?;
    let mut encoder = png::Encoder::new(w, labels.width() as u32, labels.height() as u32);
    encoder.set_color(ColorType::Indexed);
    encoder.set_depth(BitDepth::Eight);
    encoder.set_palette(&MASK_PALETTE[..]);
    let mut writer = encoder.write_header().map_err(|e| encode_err(path, e))?;
    writer
        .write_image_data(labels.grid().as_slice())
        .map_err(|e| encode_err(path, e))?;
    writer.finish().map_err(|e| encode_err(path, e))
}

/// Reads an 8-bit paletted or grayscale PNG of class ids.
pub fn load_label_map(path: &Path) -> Result<LabelMap> {
    let img = read_png(path)?;
    if img.depth != BitDepth::Eight
        || !matches!(img.color, ColorType::Indexed | ColorType::Grayscale)
    {
        return Err(Error::Image {
            path: path.to_owned(),
            message: format!(
                "expected 8-bit indexed or grayscale mask, found {:?}/{:?}",
                img.color, img.depth
            ),
        });
    }
    let grid = Grid::from_vec(img.height, img.width, img.bytes)?;
    LabelMap::new(grid, NUM_CLASSES as u8)
}

/// Writes a trace as `column,epi_row_px,dm_row_px`; missing rows are empty cells.
pub fn save_trace(trace: &BoundaryTrace, path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv {
        context: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["column", "epi_row_px", "dm_row_px"])
        .map_err(csv_err)?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (col, (e, d)) in trace.epi_row_px().iter().zip(trace.dm_row_px()).enumerate() {
        w.write_record([col.to_string(), cell(*e), cell(*d)])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a trace CSV. `height` bounds the row values.
pub fn load_trace(path: &Path, pixel_pitch_um: f64, height: usize) -> Result<BoundaryTrace> {
    let ctx = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader.headers().map_err(|e| Error::Csv {
        context: ctx.clone(),
        message: e.to_string(),
    })?;
    if headers != vec!["column", "epi_row_px", "dm_row_px"] {
        return Err(Error::Csv {
            context: ctx,
            message: format!("unexpected header {headers:?}"),
        });
    }
    let parse = |s: &str, line: usize| -> Result<Option<f64>> {
        if s.trim().is_empty() {
            return Ok(None);
        }
        s.trim().parse::<f64>().map(Some).map_err(|e| Error::Csv {
            context: ctx.clone(),
            message: format!("line {line}: {e}"),
        })
    };
    let mut epi = Vec::new();
    let mut dm = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv {
            context: ctx.clone(),
            message: e.to_string(),
        })?;
        let col: usize = rec[0].trim().parse().map_err(|_| Error::Csv {
            context: ctx.clone(),
            message: format!("line {}: bad column index {:?}", i + 2, &rec[0]),
        })?;
        if col != i {
            return Err(Error::Csv {
                context: ctx.clone(),
                message: format!("line {}: expected column {i}, found {col}", i + 2),
            });
        }
        epi.push(parse(&rec[1], i + 2)?);
        dm.push(parse(&rec[2], i + 2)?);
    }
    BoundaryTrace::new(epi, dm, pixel_pitch_um, height)
}

/// Writes an interleaved RGB8 buffer as PNG.
pub fn save_rgb_png(width: usize, height: usize, rgb: &[u8], path: &Path) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Dimension(format!(
            "rgb buffer of {} bytes for {width}x{height}",
            rgb.len()
        )));
    }
    let w = create(path)?;
    let mut encoder = png::Encoder::new(w, width as u32, height as u32);
    encoder.set_color(ColorType::Rgb);
    encoder.set_depth(BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| encode_err(path, e))?;
    writer.write_image_data(rgb).map_err(|e| encode_err(path, e))?;
    writer.finish().map_err(|e| encode_err(path, e))
}

/// Reads an RGB8 PNG written by [`save_rgb_png`].
pub fn load_rgb_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = read_png(path)?;
    if img.color != ColorType::Rgb || img.depth != BitDepth::Eight {
        return Err(Error::Image {
            path: path.to_owned(),
            message: "expected 8-bit RGB".into(),
        });
    }
    Ok((img.width, img.height, img.bytes))
}
