//! Layout, curve and log files.

use crate::density::DesignField;
use crate::error::{Error, Result};
use crate::fe::Mesh;
use crate::frc::{FrcSample, SnCurveSample};
use image::{GrayImage, ImageFormat, Luma};
use serde::Serialize;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

/// Element table: index, grid position, centroid in μm and every density stage.
pub fn write_layout_csv(path: &Path, mesh: &Mesh, field: &DesignField) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["element", "ix", "iy", "x_um", "y_um", "mu", "mu_tilde", "mu_bar", "mu_hat"]).map_err(csv_err)?;
    for e in 0..mesh.n_elements() {
        let [cx, cy] = mesh.centroid(e);
        let h = mesh.element_size;
        w.write_record(&[
            e.to_string(),
            (e / mesh.ny).to_string(),
            (e % mesh.ny).to_string(),
            (cx * h).to_string(),
            (cy * h).to_string(),
            field.mu[e].to_string(),
            field.mu_tilde[e].to_string(),
            field.mu_bar[e].to_string(),
            field.mu_hat[e].to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the design column `mu` of a layout CSV, or a single-column file.
pub fn read_density_csv(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    let col = headers.iter().position(|h| h == "mu").unwrap_or(0);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let v: f64 = rec
            .get(col)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::invalid(format!("{}: row {} has no numeric density", path.display(), i + 2)))?;
        out.push(v);
    }
    Ok(out)
}

/// 8-bit greyscale image of `values` (0 white, 1 black) with the beam's
/// top edge on the first row.
pub fn write_pgm(path: &Path, mesh: &Mesh, values: &[f64]) -> Result<()> {
    if values.len() != mesh.n_elements() {
        return Err(Error::Dimension { expected: mesh.n_elements(), got: values.len() });
    }
    let mut img = GrayImage::new(mesh.nx as u32, mesh.ny as u32);
    for e in 0..mesh.n_elements() {
        let (ix, iy) = (e / mesh.ny, e % mesh.ny);
        let g = (255.0 * (1.0 - values[e].clamp(0.0, 1.0))).round() as u8;
        img.put_pixel(ix as u32, (mesh.ny - 1 - iy) as u32, Luma([g]));
    }
    img.save_with_format(path, ImageFormat::Pnm).map_err(|e| Error::invalid(format!("PGM write: {e}")))
}

/// Inverse of [`write_pgm`], exact to 1/510.
pub fn read_pgm(path: &Path, mesh: &Mesh) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|e| Error::invalid(format!("PGM read: {e}")))?.to_luma8();
    if img.width() as usize != mesh.nx || img.height() as usize != mesh.ny {
        return Err(Error::invalid(format!(
            "image is {}×{}, mesh is {}×{}",
            img.width(),
            img.height(),
            mesh.nx,
            mesh.ny
        )));
    }
    Ok((0..mesh.n_elements())
        .map(|e| {
            let (ix, iy) = (e / mesh.ny, e % mesh.ny);
            1.0 - img.get_pixel(ix as u32, (mesh.ny - 1 - iy) as u32)[0] as f64 / 255.0
        })
        .collect())
}

/// Reads a density file by extension (`.pgm` or CSV).
pub fn read_density(path: &Path, mesh: &Mesh) -> Result<Vec<f64>> {
    let mu = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_pgm(path, mesh)?,
        _ => read_density_csv(path)?,
    };
    if mu.len() != mesh.n_elements() {
        return Err(Error::invalid(format!(
            "{} holds {} densities, the mesh has {} elements",
            path.display(),
            mu.len(),
            mesh.n_elements()
        )));
    }
    Ok(mu)
}

/// FRC samples with ε, stability and the physical amplitude at each output.
pub fn write_frc_csv(path: &Path, curves: &[(f64, Vec<FrcSample>)], n_outputs: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut head = vec!["eps".to_string(), "omega_rad_per_ms".into(), "omega_khz".into(), "rho".into(), "theta".into(), "stable".into()];
    head.extend((0..n_outputs).map(|k| format!("amp_out{k}")));
    w.write_record(&head).map_err(csv_err)?;
    for (eps, samples) in curves {
        for s in samples {
            let mut row = vec![
                eps.to_string(),
                s.omega.to_string(),
                (s.omega / (2.0 * std::f64::consts::PI)).to_string(),
                s.rho.to_string(),
                s.theta.to_string(),
                s.stable.to_string(),
            ];
            row.extend((0..n_outputs).map(|k| s.physical_amp.get(k).map_or(String::new(), |v| v.to_string())));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_sn_csv(path: &Path, samples: &[SnCurveSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["eps", "branch", "omega_rad_per_ms", "omega_khz", "rho"]).map_err(csv_err)?;
    for s in samples {
        w.write_record(&[
            s.eps.to_string(),
            s.branch.to_string(),
            s.omega.to_string(),
            (s.omega / (2.0 * std::f64::consts::PI)).to_string(),
            s.rho.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Generic CSV table from a header and rows of displayable cells.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, value).map_err(|e| Error::invalid(format!("json: {e}")))
}

/// Appends one JSON object per line and flushes after each.
pub struct JsonLines {
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(append).write(true).truncate(!append).open(path)?;
        Ok(JsonLines { out: BufWriter::new(f) })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value).map_err(|e| Error::invalid(format!("json: {e}")))?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}
