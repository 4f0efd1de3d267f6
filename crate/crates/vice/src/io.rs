//! PNG and binary PPM images, label maps, checkpoint and metrics files.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;
use vice_core::imaging::ImageTensor;
use vice_core::training::{self, TrainState};

use crate::error::{Result, ViceError};

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| ViceError::io(path, e))
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ViceError::io(dir, e))?;
    }
    File::create(path).map_err(|e| ViceError::io(path, e))
}

/// Decoded 8-bit or 16-bit PNG, samples widened to `u16`.
struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<u16>,
}

fn decode_png(path: &Path) -> Result<Decoded> {
    let mut decoder = png::Decoder::new(BufReader::new(open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|source| ViceError::PngDecode { path: path.into(), source })?;
    let size = reader.output_buffer_size().ok_or_else(|| ViceError::data(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|source| ViceError::PngDecode { path: path.into(), source })?;
    let channels = info.color_type.samples();
    let (width, height) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let samples = match info.bit_depth {
        png::BitDepth::Sixteen => bytes.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect(),
        png::BitDepth::Eight => bytes.iter().map(|&b| b as u16).collect(),
        d => return Err(ViceError::data(path, format!("unsupported bit depth {d:?}"))),
    };
    Ok(Decoded { width, height, channels, samples })
}

fn sixteen_to_eight(v: u16) -> u8 {
    ((v as u32 * 255 + 32767) / 65535) as u8
}

/// Reads an RGB(A) or gray PNG as an unnormalized `[0, 1]` image.
pub fn read_png_image(path: &Path) -> Result<ImageTensor> {
    let d = decode_png(path)?;
    let wide = d.samples.iter().any(|&v| v > 255);
    let to8 = |v: u16| if wide { sixteen_to_eight(v) } else { v as u8 };
    let mut rgb = Vec::with_capacity(d.width * d.height * 3);
    for px in d.samples.chunks(d.channels) {
        match d.channels {
            1 | 2 => rgb.extend([to8(px[0]); 3]),
            3 | 4 => rgb.extend(px[..3].iter().map(|&v| to8(v))),
            c => return Err(ViceError::data(path, format!("unsupported channel count {c}"))),
        }
    }
    ImageTensor::from_rgb8(d.height, d.width, &rgb).map_err(|e| ViceError::data(path, e.to_string()))
}

pub fn write_png_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(ViceError::data(path, format!("{} bytes for a {width}×{height} RGB image", rgb.len())));
    }
    let w = BufWriter::new(create(path)?);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let err = |source| ViceError::PngEncode { path: path.into(), source };
    let mut writer = enc.write_header().map_err(err)?;
    writer.write_image_data(rgb).map_err(err)?;
    writer.finish().map_err(err)
}

pub fn write_png_image(path: &Path, img: &ImageTensor) -> Result<()> {
    write_png_rgb(path, img.width(), img.height(), &img.to_rgb8())
}

/// Class-id map stored as a gray PNG: 8-bit when every id fits, else 16-bit.
pub fn write_label_png(path: &Path, width: usize, height: usize, labels: &[u32]) -> Result<()> {
    if labels.len() != width * height {
        return Err(ViceError::data(path, "label count does not match image size"));
    }
    let max = labels.iter().copied().max().unwrap_or(0);
    if max > u16::MAX as u32 {
        return Err(ViceError::data(path, format!("label {max} does not fit 16 bits")));
    }
    let w = BufWriter::new(create(path)?);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    let data: Vec<u8> = if max <= 255 {
        enc.set_depth(png::BitDepth::Eight);
        labels.iter().map(|&l| l as u8).collect()
    } else {
        enc.set_depth(png::BitDepth::Sixteen);
        labels.iter().flat_map(|&l| (l as u16).to_be_bytes()).collect()
    };
    let err = |source| ViceError::PngEncode { path: path.into(), source };
    let mut writer = enc.write_header().map_err(err)?;
    writer.write_image_data(&data).map_err(err)?;
    writer.finish().map_err(err)
}

/// Reads a gray label PNG, returning `(height, width, ids)`.
pub fn read_label_png(path: &Path) -> Result<(usize, usize, Vec<u32>)> {
    let d = decode_png(path)?;
    if d.channels != 1 {
        return Err(ViceError::data(path, format!("label maps must be single-channel, found {} channels", d.channels)));
    }
    Ok((d.height, d.width, d.samples.into_iter().map(u32::from).collect()))
}

/// Binary `P6` with maxval 255.
pub fn write_ppm(path: &Path, img: &ImageTensor) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    write!(w, "P6\n{} {}\n255\n", img.width(), img.height()).map_err(|e| ViceError::io(path, e))?;
    w.write_all(&img.to_rgb8()).map_err(|e| ViceError::io(path, e))?;
    w.flush().map_err(|e| ViceError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    let mut r = BufReader::new(open(path)?);
    let mut header = Vec::new();
    // Magic, width, height, maxval; comments start with '#'.
    while header.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(|e| ViceError::io(path, e))? == 0 {
            return Err(ViceError::data(path, "truncated PPM header"));
        }
        let content = line.split('#').next().unwrap_or("");
        header.extend(content.split_whitespace().map(str::to_owned));
    }
    if header[0] != "P6" {
        return Err(ViceError::data(path, format!("expected P6 magic, found {}", header[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| ViceError::data(path, format!("bad PPM header field {s:?}")));
    let (w, h, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
    if maxval != 255 {
        return Err(ViceError::data(path, format!("only maxval 255 is supported, found {maxval}")));
    }
    let mut rgb = vec![0u8; w * h * 3];
    r.read_exact(&mut rgb).map_err(|e| ViceError::data(path, format!("truncated PPM pixel data: {e}")))?;
    ImageTensor::from_rgb8(h, w, &rgb).map_err(|e| ViceError::data(path, e.to_string()))
}

/// Reads `.ppm` or PNG by extension.
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ppm") => read_ppm(path),
        _ => read_png_image(path),
    }
}

/// Writes via a sibling temp file and a rename so a crash never leaves a
/// half-written checkpoint behind.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = training::encode_checkpoint(state);
    let tmp = path.with_extension("tmp");
    {
        let mut f = create(&tmp)?;
        f.write_all(&bytes).map_err(|e| ViceError::io(&tmp, e))?;
        f.sync_all().map_err(|e| ViceError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| ViceError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| ViceError::io(path, e))?;
    training::decode_checkpoint(&bytes).map_err(|e| ViceError::data(path, e.to_string()))
}

/// Appends one JSON object per line.
pub struct JsonLines {
    path: std::path::PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        let file = if append {
            fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| ViceError::io(path, e))?
        } else {
            create(path)?
        };
        Ok(Self { path: path.into(), out: BufWriter::new(file) })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| ViceError::data(&self.path, e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| ViceError::io(&self.path, e))?;
        self.out.flush().map_err(|e| ViceError::io(&self.path, e))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| ViceError::data(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| ViceError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes()).map_err(|e| ViceError::io(path, e))
}
