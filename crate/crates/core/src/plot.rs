//! PNG rendering of square-ish matrices as heatmaps. No axis labels; the CSV
//! twin written next to each image carries the names.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};

const CELL: u32 = 48;
const BORDER: u32 = 2;

// Anchor colors of a dark-blue → teal → yellow ramp.
const RAMP: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

/// Maps `x` in `[0, 1]` to a ramp color; NaN renders gray.
pub fn ramp_color(x: f64) -> Rgb<u8> {
    if x.is_nan() {
        return Rgb([128, 128, 128]);
    }
    let x = x.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let c = |ch: usize| (RAMP[i][ch] + f * (RAMP[i + 1][ch] - RAMP[i][ch])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Value range used for color normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scale {
    /// Stretch between the matrix min and max.
    Auto,
    Fixed(f64, f64),
}

pub fn render_heatmap(m: &Array2<f64>, scale: Scale) -> Result<RgbImage> {
    let (rows, cols) = m.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::Input("cannot plot an empty matrix".into()));
    }
    let (lo, hi) = match scale {
        Scale::Fixed(lo, hi) => (lo, hi),
        Scale::Auto => m
            .iter()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            }),
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let w = cols as u32 * CELL + 2 * BORDER;
    let h = rows as u32 * CELL + 2 * BORDER;
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    for ((r, c), &v) in m.indexed_iter() {
        let color = ramp_color((v - lo) / span);
        let (x0, y0) = (BORDER + c as u32 * CELL, BORDER + r as u32 * CELL);
        // 1px white gutter between cells
        for y in y0 + 1..y0 + CELL {
            for x in x0 + 1..x0 + CELL {
                img.put_pixel(x, y, color);
            }
        }
    }
    Ok(img)
}

pub fn save_heatmap(m: &Array2<f64>, scale: Scale, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    render_heatmap(m, scale)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Input(format!("writing {}: {e}", path.display())))
}

/// Reads a matrix CSV with a header row of names and an optional leading name column.
pub fn matrix_from_csv(text: &str) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.first().is_some_and(|c| c.parse::<f64>().is_err()) {
            cells.remove(0);
        }
        let row = cells
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if s.is_empty() {
                    Ok(f64::NAN)
                } else {
                    s.parse::<f64>().map_err(|e| Error::Parse {
                        row: r + 1,
                        col: c + 1,
                        detail: e.to_string(),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    if rows.is_empty() || width == 0 {
        return Err(Error::Input("matrix CSV has no data rows".into()));
    }
    let mut m = Array2::from_elem((rows.len(), width), f64::NAN);
    for (r, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            m[[r, c]] = v;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp_color(0.0), Rgb([68, 1, 84]));
        assert_eq!(ramp_color(1.0), Rgb([253, 231, 37]));
        assert_eq!(ramp_color(7.0), ramp_color(1.0));
        assert_eq!(ramp_color(f64::NAN), Rgb([128, 128, 128]));
    }

    #[test]
    fn image_size_follows_matrix_shape() {
        let m = Array2::<f64>::eye(3);
        let img = render_heatmap(&m, Scale::Auto).unwrap();
        assert_eq!(img.dimensions(), (3 * CELL + 4, 3 * CELL + 4));
        // diagonal cell is the top of the ramp, off-diagonal the bottom
        assert_eq!(
            *img.get_pixel(BORDER + CELL / 2, BORDER + CELL / 2),
            ramp_color(1.0)
        );
        assert_eq!(
            *img.get_pixel(BORDER + CELL + CELL / 2, BORDER + CELL / 2),
            ramp_color(0.0)
        );
    }

    #[test]
    fn csv_with_names_parses() {
        let m = matrix_from_csv("task,a,b\na,1,0.5\nb,0.25,\n").unwrap();
        assert_eq!(m[[0, 1]], 0.5);
        assert!(m[[1, 1]].is_nan());
        let err = matrix_from_csv("a,b\n1,x\n").unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, col: 2, .. }), "{err}");
    }

    #[test]
    fn png_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plots/h.png");
        save_heatmap(&Array2::<f64>::eye(2), Scale::Fixed(0.0, 1.0), &p).unwrap();
        assert!(std::fs::metadata(&p).unwrap().len() > 0);
    }
}
