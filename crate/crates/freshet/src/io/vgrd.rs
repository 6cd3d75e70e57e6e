//! VGRD binary grid-field format.
//!
//! Layout: magic `VGRD`, version u32, dims 3xu32, dx f32, origin 3xf32,
//! channel count u32, then f32 little-endian data in x-fastest order,
//! channel-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};

pub const VGRD_MAGIC: [u8; 4] = *b"VGRD";
pub const VGRD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct VgrdFile {
    pub dims: [usize; 3],
    pub dx: f32,
    pub origin: [f32; 3],
    pub channels: Vec<Vec<f32>>,
}

impl VgrdFile {
    pub fn cell_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn from_velocity(v: &VectorField, dx: f64, origin: Vector3<f64>) -> Self {
        let n = v.len();
        let mut channels = vec![Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
        for vec in v.iter() {
            channels[0].push(vec.x as f32);
            channels[1].push(vec.y as f32);
            channels[2].push(vec.z as f32);
        }
        Self {
            dims: v.dims(),
            dx: dx as f32,
            origin: [origin.x as f32, origin.y as f32, origin.z as f32],
            channels,
        }
    }

    pub fn from_scalar(s: &ScalarField, dx: f64, origin: Vector3<f64>) -> Self {
        Self {
            dims: s.dims(),
            dx: dx as f32,
            origin: [origin.x as f32, origin.y as f32, origin.z as f32],
            channels: vec![s.iter().map(|&v| v as f32).collect()],
        }
    }

    pub fn to_velocity(&self) -> Result<VectorField> {
        if self.channels.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "velocity VGRD needs 3 channels, found {}",
                self.channels.len()
            )));
        }
        let mut out = VectorField::zeros_vec(self.dims);
        for idx in 0..self.cell_count() {
            out[idx] = Vector3::new(
                self.channels[0][idx] as f64,
                self.channels[1][idx] as f64,
                self.channels[2][idx] as f64,
            );
        }
        Ok(out)
    }
}

pub fn write_vgrd(path: &Path, file: &VgrdFile) -> Result<()> {
    let n = file.cell_count();
    for (c, data) in file.channels.iter().enumerate() {
        if data.len() != n {
            return Err(Error::InvalidArgument(format!(
                "channel {c} has {} values for {n} cells",
                data.len()
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&VGRD_MAGIC)?;
    w.write_all(&VGRD_VERSION.to_le_bytes())?;
    for d in file.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&file.dx.to_le_bytes())?;
    for o in file.origin {
        w.write_all(&o.to_le_bytes())?;
    }
    w.write_all(&(file.channels.len() as u32).to_le_bytes())?;
    for channel in &file.channels {
        for v in channel {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_vgrd(path: &Path) -> Result<VgrdFile> {
    let file_name = path.display().to_string();
    let mut r = BufReader::new(File::open(path).map_err(|_| Error::MissingInput(file_name.clone()))?);
    let mut offset = 0u64;
    let mut take = |buf: &mut [u8], r: &mut BufReader<File>| -> Result<()> {
        r.read_exact(buf).map_err(|e| Error::Parse {
            file: file_name.clone(),
            offset,
            message: e.to_string(),
        })?;
        offset += buf.len() as u64;
        Ok(())
    };

    let mut magic = [0u8; 4];
    take(&mut magic, &mut r)?;
    if magic != VGRD_MAGIC {
        return Err(Error::Parse {
            file: file_name,
            offset: 0,
            message: format!("bad magic {magic:?}, expected VGRD"),
        });
    }
    let mut u32buf = [0u8; 4];
    take(&mut u32buf, &mut r)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VGRD_VERSION {
        return Err(Error::Parse {
            file: file_name,
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        take(&mut u32buf, &mut r)?;
        *d = u32::from_le_bytes(u32buf) as usize;
    }
    take(&mut u32buf, &mut r)?;
    let dx = f32::from_le_bytes(u32buf);
    let mut origin = [0f32; 3];
    for o in &mut origin {
        take(&mut u32buf, &mut r)?;
        *o = f32::from_le_bytes(u32buf);
    }
    take(&mut u32buf, &mut r)?;
    let n_channels = u32::from_le_bytes(u32buf) as usize;
    let n = dims[0] * dims[1] * dims[2];
    let mut channels = Vec::with_capacity(n_channels);
    for _ in 0..n_channels {
        let mut data = vec![0f32; n];
        for v in &mut data {
            take(&mut u32buf, &mut r)?;
            *v = f32::from_le_bytes(u32buf);
        }
        channels.push(data);
    }
    Ok(VgrdFile {
        dims,
        dx,
        origin,
        channels,
    })
}
