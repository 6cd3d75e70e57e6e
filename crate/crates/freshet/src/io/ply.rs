//! PLY reader/writer for Gaussian-splat point clouds.
//!
//! Vertices carry x, y, z, opacity, scale_0..2, rot_0..3 (quaternion
//! w, x, y, z) and f_dc_0..2; trajectory files add vx, vy, vz and mass.
//! Scales are linear standard deviations in meters; the covariance is
//! R diag(scale^2) R^T. Binary little-endian and ascii formats are
//! supported and round-trip byte-exactly through this writer.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::cloud::GaussianCloud;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    BinaryLittleEndian,
    Ascii,
}

/// A parsed PLY vertex table: float properties by name, row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyCloud {
    pub format: PlyFormat,
    pub properties: Vec<String>,
    pub values: Vec<f32>,
}

impl PlyCloud {
    pub fn len(&self) -> usize {
        if self.properties.is_empty() {
            0
        } else {
            self.values.len() / self.properties.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, name: &str) -> Option<Vec<f32>> {
        let p = self.properties.iter().position(|n| n == name)?;
        let stride = self.properties.len();
        Some(self.values.iter().skip(p).step_by(stride).copied().collect())
    }

    fn require(&self, name: &str, file: &str) -> Result<Vec<f32>> {
        self.column(name).ok_or_else(|| Error::Parse {
            file: file.to_string(),
            offset: 0,
            message: format!("missing vertex property `{name}`"),
        })
    }
}

pub fn read_ply(path: &Path) -> Result<PlyCloud> {
    let file_name = path.display().to_string();
    let file = File::open(path).map_err(|_| Error::MissingInput(file_name.clone()))?;
    let mut reader = BufReader::new(file);

    let mut offset = 0u64;
    let mut line = String::new();
    let mut read_line = |reader: &mut BufReader<File>| -> Result<String> {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            return Err(Error::Parse {
                file: file_name.clone(),
                offset,
                message: "unexpected end of header".into(),
            });
        }
        offset += n as u64;
        Ok(line.trim_end().to_string())
    };

    let magic = read_line(&mut reader)?;
    if magic != "ply" {
        return Err(Error::Parse {
            file: file_name,
            offset: 0,
            message: format!("not a PLY file (first line `{magic}`)"),
        });
    }

    let mut format = None;
    let mut count = 0usize;
    let mut properties = Vec::new();
    let mut in_vertex_element = false;
    loop {
        let l = read_line(&mut reader)?;
        let words: Vec<&str> = l.split_whitespace().collect();
        match words.as_slice() {
            ["format", "binary_little_endian", "1.0"] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", "ascii", "1.0"] => format = Some(PlyFormat::Ascii),
            ["format", other, ..] => {
                return Err(Error::Parse {
                    file: file_name,
                    offset,
                    message: format!("unsupported PLY format `{other}`"),
                })
            }
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                in_vertex_element = true;
                count = n.parse().map_err(|_| Error::Parse {
                    file: file_name.clone(),
                    offset,
                    message: format!("bad vertex count `{n}`"),
                })?;
            }
            ["element", ..] => in_vertex_element = false,
            ["property", "float", name] if in_vertex_element => properties.push((*name).to_string()),
            ["property", ty, ..] if in_vertex_element => {
                return Err(Error::Parse {
                    file: file_name,
                    offset,
                    message: format!("unsupported vertex property type `{ty}` (only float)"),
                })
            }
            ["property", ..] => {}
            ["end_header"] => break,
            _ => {
                return Err(Error::Parse {
                    file: file_name,
                    offset,
                    message: format!("unrecognized header line `{l}`"),
                })
            }
        }
    }
    let format = format.ok_or_else(|| Error::Parse {
        file: file_name.clone(),
        offset,
        message: "missing format line".into(),
    })?;

    let n_values = count * properties.len();
    let mut values = Vec::with_capacity(n_values);
    match format {
        PlyFormat::BinaryLittleEndian => {
            let mut buf = vec![0u8; n_values * 4];
            reader.read_exact(&mut buf).map_err(|e| Error::Parse {
                file: file_name.clone(),
                offset,
                message: format!("short vertex payload: {e}"),
            })?;
            for chunk in buf.chunks_exact(4) {
                values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
        }
        PlyFormat::Ascii => {
            let mut text = String::new();
            reader.read_to_string(&mut text)?;
            for tok in text.split_whitespace().take(n_values) {
                values.push(tok.parse::<f32>().map_err(|_| Error::Parse {
                    file: file_name.clone(),
                    offset,
                    message: format!("bad float `{tok}`"),
                })?);
            }
            if values.len() != n_values {
                return Err(Error::Parse {
                    file: file_name,
                    offset,
                    message: format!("expected {n_values} values, found {}", values.len()),
                });
            }
        }
    }

    Ok(PlyCloud {
        format,
        properties,
        values,
    })
}

pub fn write_ply(path: &Path, cloud: &PlyCloud) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    match cloud.format {
        PlyFormat::BinaryLittleEndian => writeln!(w, "format binary_little_endian 1.0")?,
        PlyFormat::Ascii => writeln!(w, "format ascii 1.0")?,
    }
    writeln!(w, "element vertex {}", cloud.len())?;
    for p in &cloud.properties {
        writeln!(w, "property float {p}")?;
    }
    writeln!(w, "end_header")?;
    match cloud.format {
        PlyFormat::BinaryLittleEndian => {
            for v in &cloud.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        PlyFormat::Ascii => {
            let stride = cloud.properties.len();
            for row in cloud.values.chunks(stride) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub const SPLAT_PROPERTIES: [&str; 14] = [
    "x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0",
    "f_dc_1", "f_dc_2",
];
pub const DYNAMIC_PROPERTIES: [&str; 4] = ["vx", "vy", "vz", "mass"];

/// Optional per-point dynamics stored alongside splat attributes in
/// trajectory files.
#[derive(Debug, Clone, Default)]
pub struct CloudDynamics {
    pub velocities: Vec<Vector3<f64>>,
    pub masses: Vec<f64>,
}

pub fn ply_to_gaussian_cloud(ply: &PlyCloud, origin: &str) -> Result<(GaussianCloud, Option<CloudDynamics>)> {
    let cols: Vec<Vec<f32>> = SPLAT_PROPERTIES
        .iter()
        .map(|p| ply.require(p, origin))
        .collect::<Result<_>>()?;
    let mut cloud = GaussianCloud::default();
    for i in 0..ply.len() {
        let scale = [cols[4][i], cols[5][i], cols[6][i]];
        let rot = [cols[7][i], cols[8][i], cols[9][i], cols[10][i]];
        cloud.push(
            Vector3::new(cols[0][i] as f64, cols[1][i] as f64, cols[2][i] as f64),
            cols[3][i] as f64,
            covariance_from_scale_rot(scale, rot),
            [cols[11][i], cols[12][i], cols[13][i]],
            scale,
            rot,
        );
    }
    let dynamics = if DYNAMIC_PROPERTIES.iter().all(|p| ply.column(p).is_some()) {
        let vx = ply.column("vx").unwrap();
        let vy = ply.column("vy").unwrap();
        let vz = ply.column("vz").unwrap();
        let mass = ply.column("mass").unwrap();
        Some(CloudDynamics {
            velocities: (0..ply.len())
                .map(|i| Vector3::new(vx[i] as f64, vy[i] as f64, vz[i] as f64))
                .collect(),
            masses: mass.iter().map(|&m| m as f64).collect(),
        })
    } else {
        None
    };
    Ok((cloud, dynamics))
}

pub fn gaussian_cloud_to_ply(cloud: &GaussianCloud, dynamics: Option<&CloudDynamics>, format: PlyFormat) -> PlyCloud {
    let mut properties: Vec<String> = SPLAT_PROPERTIES.iter().map(|s| s.to_string()).collect();
    if dynamics.is_some() {
        properties.extend(DYNAMIC_PROPERTIES.iter().map(|s| s.to_string()));
    }
    let mut values = Vec::with_capacity(cloud.len() * properties.len());
    for i in 0..cloud.len() {
        values.extend([
            cloud.positions[i].x as f32,
            cloud.positions[i].y as f32,
            cloud.positions[i].z as f32,
            cloud.opacities[i] as f32,
        ]);
        values.extend(cloud.scales[i]);
        values.extend(cloud.rotations[i]);
        values.extend(cloud.colors[i]);
        if let Some(d) = dynamics {
            values.extend([
                d.velocities[i].x as f32,
                d.velocities[i].y as f32,
                d.velocities[i].z as f32,
                d.masses[i] as f32,
            ]);
        }
    }
    PlyCloud {
        format,
        properties,
        values,
    }
}

pub fn covariance_from_scale_rot(scale: [f32; 3], rot: [f32; 4]) -> Matrix3<f64> {
    let q = Quaternion::new(rot[0] as f64, rot[1] as f64, rot[2] as f64, rot[3] as f64);
    let r = UnitQuaternion::from_quaternion(q).to_rotation_matrix();
    let s2 = Matrix3::from_diagonal(&Vector3::new(
        (scale[0] as f64) * (scale[0] as f64),
        (scale[1] as f64) * (scale[1] as f64),
        (scale[2] as f64) * (scale[2] as f64),
    ));
    r * s2 * r.transpose()
}

/// Decompose a symmetric positive-definite covariance back into splat
/// scale (standard deviations) and quaternion.
pub fn scale_rot_from_covariance(cov: &Matrix3<f64>) -> ([f32; 3], [f32; 4]) {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut basis = eig.eigenvectors;
    if basis.determinant() < 0.0 {
        basis.set_column(0, &(-basis.column(0)));
    }
    let rot = nalgebra::Rotation3::from_matrix_unchecked(basis);
    let q = UnitQuaternion::from_rotation_matrix(&rot);
    let scale = [
        eig.eigenvalues[0].max(0.0).sqrt() as f32,
        eig.eigenvalues[1].max(0.0).sqrt() as f32,
        eig.eigenvalues[2].max(0.0).sqrt() as f32,
    ];
    ([scale[0], scale[1], scale[2]], [q.w as f32, q.i as f32, q.j as f32, q.k as f32])
}
