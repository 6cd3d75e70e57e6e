//! Raw raster files: f32 (or u8 mask) data little-endian with a text
//! sidecar `<file>.hdr` carrying height, width and channel count.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::field::Raster;

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".hdr");
    PathBuf::from(name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RasterHeader {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

fn write_header(path: &Path, h: &RasterHeader) -> Result<()> {
    let mut w = BufWriter::new(File::create(sidecar(path))?);
    writeln!(w, "height: {}", h.height)?;
    writeln!(w, "width: {}", h.width)?;
    writeln!(w, "channels: {}", h.channels)?;
    w.flush()?;
    Ok(())
}

fn read_header(path: &Path) -> Result<RasterHeader> {
    let hdr_path = sidecar(path);
    let file_name = hdr_path.display().to_string();
    let text = std::fs::read_to_string(&hdr_path).map_err(|_| Error::MissingInput(file_name.clone()))?;
    let mut height = None;
    let mut width = None;
    let mut channels = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once(':').ok_or_else(|| Error::Parse {
            file: file_name.clone(),
            offset: i as u64,
            message: format!("expected `key: value`, got `{line}`"),
        })?;
        let v: usize = value.trim().parse().map_err(|_| Error::Parse {
            file: file_name.clone(),
            offset: i as u64,
            message: format!("bad integer `{}`", value.trim()),
        })?;
        match key.trim() {
            "height" => height = Some(v),
            "width" => width = Some(v),
            "channels" => channels = Some(v),
            other => {
                return Err(Error::Parse {
                    file: file_name,
                    offset: i as u64,
                    message: format!("unknown header key `{other}`"),
                })
            }
        }
    }
    match (height, width, channels) {
        (Some(height), Some(width), Some(channels)) => Ok(RasterHeader {
            height,
            width,
            channels,
        }),
        _ => Err(Error::Parse {
            file: file_name,
            offset: 0,
            message: "header must define height, width and channels".into(),
        }),
    }
}

/// Write interleaved f32 raster data (pixel-major, channel-minor).
pub fn write_raster_f32(path: &Path, header: RasterHeader, data: &[f32]) -> Result<()> {
    if data.len() != header.height * header.width * header.channels {
        return Err(Error::InvalidArgument(format!(
            "raster data length {} does not match {}x{}x{}",
            data.len(),
            header.height,
            header.width,
            header.channels
        )));
    }
    write_header(path, &header)?;
    let mut w = BufWriter::new(File::create(path)?);
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_raster_f32(path: &Path) -> Result<(RasterHeader, Vec<f32>)> {
    let header = read_header(path)?;
    let file_name = path.display().to_string();
    let mut file = File::open(path).map_err(|_| Error::MissingInput(file_name.clone()))?;
    let expect = header.height * header.width * header.channels;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    if buf.len() != expect * 4 {
        return Err(Error::Parse {
            file: file_name,
            offset: buf.len() as u64,
            message: format!("expected {} bytes of f32 data, found {}", expect * 4, buf.len()),
        });
    }
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, data))
}

pub fn write_mask_u8(path: &Path, height: usize, width: usize, data: &[u8]) -> Result<()> {
    if data.len() != height * width {
        return Err(Error::InvalidArgument(format!(
            "mask length {} does not match {height}x{width}",
            data.len()
        )));
    }
    write_header(
        path,
        &RasterHeader {
            height,
            width,
            channels: 1,
        },
    )?;
    std::fs::write(path, data)?;
    Ok(())
}

pub fn read_mask_u8(path: &Path) -> Result<Raster<bool>> {
    let header = read_header(path)?;
    let file_name = path.display().to_string();
    let buf = std::fs::read(path).map_err(|_| Error::MissingInput(file_name.clone()))?;
    if buf.len() != header.height * header.width {
        return Err(Error::Parse {
            file: file_name,
            offset: buf.len() as u64,
            message: format!(
                "expected {} mask bytes, found {}",
                header.height * header.width,
                buf.len()
            ),
        });
    }
    let mut out = Raster::filled(header.height, header.width, false);
    for (i, v) in buf.iter().enumerate() {
        out.as_mut_slice()[i] = *v != 0;
    }
    Ok(out)
}

/// Two-channel raster as a planar flow field (NDC displacement per frame).
pub fn read_flow(path: &Path) -> Result<Raster<Vector2<f64>>> {
    let (h, data) = read_raster_f32(path)?;
    if h.channels != 2 {
        return Err(Error::Parse {
            file: path.display().to_string(),
            offset: 0,
            message: format!("flow raster needs 2 channels, found {}", h.channels),
        });
    }
    let mut out = Raster::filled(h.height, h.width, Vector2::zeros());
    for i in 0..h.height * h.width {
        out.as_mut_slice()[i] = Vector2::new(data[2 * i] as f64, data[2 * i + 1] as f64);
    }
    Ok(out)
}

pub fn write_flow(path: &Path, flow: &Raster<Vector2<f64>>) -> Result<()> {
    let mut data = Vec::with_capacity(flow.len() * 2);
    for v in flow.iter() {
        data.push(v.x as f32);
        data.push(v.y as f32);
    }
    write_raster_f32(
        path,
        RasterHeader {
            height: flow.height(),
            width: flow.width(),
            channels: 2,
        },
        &data,
    )
}

pub fn read_scalar(path: &Path) -> Result<Raster<f64>> {
    let (h, data) = read_raster_f32(path)?;
    if h.channels != 1 {
        return Err(Error::Parse {
            file: path.display().to_string(),
            offset: 0,
            message: format!("scalar raster needs 1 channel, found {}", h.channels),
        });
    }
    let mut out = Raster::filled(h.height, h.width, 0.0);
    for i in 0..h.height * h.width {
        out.as_mut_slice()[i] = data[i] as f64;
    }
    Ok(out)
}

pub fn write_scalar(path: &Path, raster: &Raster<f64>) -> Result<()> {
    let data: Vec<f32> = raster.iter().map(|&v| v as f32).collect();
    write_raster_f32(
        path,
        RasterHeader {
            height: raster.height(),
            width: raster.width(),
            channels: 1,
        },
        &data,
    )
}

/// Three-channel raster as a 3-vector field.
pub fn write_vec3(path: &Path, raster: &Raster<Vector3<f64>>) -> Result<()> {
    let mut data = Vec::with_capacity(raster.len() * 3);
    for v in raster.iter() {
        data.extend([v.x as f32, v.y as f32, v.z as f32]);
    }
    write_raster_f32(
        path,
        RasterHeader {
            height: raster.height(),
            width: raster.width(),
            channels: 3,
        },
        &data,
    )
}
