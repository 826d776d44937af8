//! Raster and point-set file formats.
//!
//! * images: 8- or 16-bit PNG, gray or RGB(A); alpha is dropped on read
//! * instance maps: 16-bit single-channel PNG, value = instance id
//! * activation and probability maps: 16-bit single-channel PNG, value x 65535
//! * tri-state masks: 8-bit PNG with palette `0 -> 0`, `1 -> 255`, `-1 -> 128`
//! * point sets: CSV with header `row,col`

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use ndarray::{Array2, Array3};

use crate::raster::{InstanceMap, Point, PointSet, RasterImage, TriState, TriStateMask};
use crate::{Error, Result};

pub const TRISTATE_BACKGROUND: u8 = 0;
pub const TRISTATE_IGNORE: u8 = 128;
pub const TRISTATE_FOREGROUND: u8 = 255;

pub fn read_image(path: &Path) -> Result<RasterImage> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = match img {
        DynamicImage::ImageLuma8(g) => Array3::from_shape_fn((h, w, 1), |(r, c, _)| {
            g.get_pixel(c as u32, r as u32)[0] as f32 / 255.0
        }),
        DynamicImage::ImageLuma16(g) => Array3::from_shape_fn((h, w, 1), |(r, c, _)| {
            g.get_pixel(c as u32, r as u32)[0] as f32 / 65535.0
        }),
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            let rgb = img.to_rgb16();
            Array3::from_shape_fn((h, w, 3), |(r, c, ch)| {
                rgb.get_pixel(c as u32, r as u32)[ch] as f32 / 65535.0
            })
        }
        other => {
            let rgb = other.to_rgb8();
            Array3::from_shape_fn((h, w, 3), |(r, c, ch)| {
                rgb.get_pixel(c as u32, r as u32)[ch] as f32 / 255.0
            })
        }
    };
    RasterImage::new(pixels)
}

fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn quantize16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes an 8-bit gray or RGB PNG.
pub fn write_image(path: &Path, image: &RasterImage) -> Result<()> {
    let (h, w) = image.dims();
    let px = image.pixels();
    if image.channels() == 1 {
        GrayImage::from_fn(w as u32, h as u32, |c, r| {
            Luma([quantize8(px[[r as usize, c as usize, 0]])])
        })
        .save(path)?;
    } else {
        RgbImage::from_fn(w as u32, h as u32, |c, r| {
            let (r, c) = (r as usize, c as usize);
            image::Rgb([
                quantize8(px[[r, c, 0]]),
                quantize8(px[[r, c, 1]]),
                quantize8(px[[r, c, 2]]),
            ])
        })
        .save(path)?;
    }
    Ok(())
}

fn read_gray16_raw(path: &Path) -> Result<Array2<u16>> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32)[0]
    }))
}

fn write_gray16_raw(path: &Path, values: &Array2<u16>) -> Result<()> {
    let (h, w) = values.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |c, r| {
        Luma([values[[r as usize, c as usize]]])
    });
    buf.save(path)?;
    Ok(())
}

/// Writes a `[0, 1]` scalar map as 16-bit gray (value x 65535).
pub fn write_map16(path: &Path, values: &Array2<f32>) -> Result<()> {
    write_gray16_raw(path, &values.mapv(quantize16))
}

pub fn read_map16(path: &Path) -> Result<Array2<f32>> {
    Ok(read_gray16_raw(path)?.mapv(|v| v as f32 / 65535.0))
}

pub fn write_instance_map(path: &Path, map: &InstanceMap) -> Result<()> {
    if map.count() > u16::MAX as usize {
        return Err(Error::InvalidInput(format!(
            "{} instances do not fit a 16-bit raster",
            map.count()
        )));
    }
    write_gray16_raw(path, &map.labels().mapv(|l| l as u16))
}

/// Reads a 16-bit instance raster. Ids are compacted to `1..=n`.
pub fn read_instance_map(path: &Path) -> Result<InstanceMap> {
    let raw = read_gray16_raw(path)?.mapv(u32::from);
    Ok(InstanceMap::relabeled(&raw))
}

pub fn write_tristate(path: &Path, mask: &TriStateMask) -> Result<()> {
    let (h, w) = mask.dims();
    GrayImage::from_fn(w as u32, h as u32, |c, r| {
        Luma([match mask.labels[[r as usize, c as usize]] {
            TriState::Background => TRISTATE_BACKGROUND,
            TriState::Ignore => TRISTATE_IGNORE,
            TriState::Foreground => TRISTATE_FOREGROUND,
        }])
    })
    .save(path)?;
    Ok(())
}

pub fn read_tristate(path: &Path) -> Result<TriStateMask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let mut labels = Array2::from_elem((h as usize, w as usize), TriState::Ignore);
    for (c, r, px) in img.enumerate_pixels() {
        labels[[r as usize, c as usize]] = match px[0] {
            TRISTATE_BACKGROUND => TriState::Background,
            TRISTATE_IGNORE => TriState::Ignore,
            TRISTATE_FOREGROUND => TriState::Foreground,
            v => {
                return Err(Error::InvalidInput(format!(
                    "{}: value {v} at ({r}, {c}) is not a tri-state palette entry",
                    path.display()
                )))
            }
        };
    }
    Ok(TriStateMask::new(labels))
}

/// Binary mask as 8-bit PNG (0 / 255).
pub fn write_binary(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    GrayImage::from_fn(w as u32, h as u32, |c, r| {
        Luma([if mask[[r as usize, c as usize]] {
            255
        } else {
            0
        }])
    })
    .save(path)?;
    Ok(())
}

pub fn read_binary(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32)[0] >= 128
    }))
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct PointRow {
    row: i64,
    col: i64,
}

pub fn write_points(path: &Path, points: &PointSet) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    for p in points.points() {
        wtr.serialize(PointRow {
            row: p.row as i64,
            col: p.col as i64,
        })?;
    }
    // An empty set still gets its header.
    if points.is_empty() {
        wtr.write_record(["row", "col"])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a `row,col` CSV and validates every point against `dims`. Errors
/// name the offending data row (1-based, header excluded).
pub fn read_points(path: &Path, dims: (usize, usize)) -> Result<PointSet> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["row", "col"] {
        return Err(Error::InvalidInput(format!(
            "{}: expected header `row,col`, found `{}`",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut points = Vec::new();
    for (i, rec) in rdr.deserialize::<PointRow>().enumerate() {
        let rec = rec?;
        let line = i + 1;
        if rec.row < 0 || rec.col < 0 || rec.row as usize >= dims.0 || rec.col as usize >= dims.1 {
            return Err(Error::InvalidInput(format!(
                "{}: row {line}: point ({}, {}) is outside the {}x{} image",
                path.display(),
                rec.row,
                rec.col,
                dims.0,
                dims.1
            )));
        }
        points.push(Point::new(rec.row as usize, rec.col as usize));
    }
    PointSet::new(points, dims).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}
