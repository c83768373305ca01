//! Adaptive tiling: pick the grid whose aspect ratio is closest to the
//! image's, stretch the image onto that grid, cut it into square tiles and
//! append a whole-image thumbnail when there is more than one tile.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major HWC image with float samples nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::dim(
                "image",
                format!("{height}x{width}x{channels} has an empty dimension"),
            ));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::dim(
                "image",
                format!(
                    "{height}x{width}x{channels} needs {} samples, got {}",
                    height * width * channels,
                    pixels.len()
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    pixels.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Copies out the `h×w` window with top-left corner `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::dim(
                "crop",
                format!(
                    "{h}x{w} at ({y0},{x0}) exceeds {}x{}",
                    self.height, self.width
                ),
            ));
        }
        let c = self.channels;
        let mut pixels = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            pixels.extend_from_slice(&self.pixels[start..start + w * c]);
        }
        Self::new(h, w, c, pixels)
    }

    /// Reads a binary (P6) 8-bit portable pixmap, mapping samples to `v/255`.
    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |detail: &str| Error::Format {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        let mut fields = Vec::new();
        while fields.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
                return Err(bad("truncated header"));
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_string));
        }
        if fields[0] != "P6" {
            return Err(bad("not a binary P6 pixmap"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit pixmaps (maxval 255) are supported"));
        }
        let mut bytes = vec![0u8; width * height * 3];
        r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::new(
            height,
            width,
            3,
            bytes.into_iter().map(|b| f64::from(b) / 255.0).collect(),
        )
    }

    /// Writes a P6 pixmap; samples are clamped to `[0,1]` and rounded.
    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if self.channels != 3 {
            return Err(Error::Contract(format!(
                "PPM needs 3 channels, image has {}",
                self.channels
            )));
        }
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileGrid {
    pub cols: usize,
    pub rows: usize,
}

impl TileGrid {
    pub fn count(self) -> usize {
        self.cols * self.rows
    }

    pub fn transposed(self) -> Self {
        Self {
            cols: self.rows,
            rows: self.cols,
        }
    }
}

/// The tiles of one image plus its optional thumbnail.
#[derive(Clone, Debug, PartialEq)]
pub struct TileSet {
    pub tiles: Vec<ImageBuffer>,
    pub grid: TileGrid,
    pub thumbnail: Option<ImageBuffer>,
    /// `(height, width)` of the source image.
    pub source_dims: (usize, usize),
}

impl TileSet {
    /// Tiles followed by the thumbnail: the order every downstream stage uses.
    pub fn patches(&self) -> impl Iterator<Item = &ImageBuffer> {
        self.tiles.iter().chain(self.thumbnail.as_ref())
    }

    pub fn patch_count(&self) -> usize {
        self.tiles.len() + usize::from(self.thumbnail.is_some())
    }

    pub fn tile_size(&self) -> usize {
        self.tiles[0].height()
    }

    /// Stitches the tiles back into the resized image they were cut from.
    pub fn reassemble(&self) -> Result<ImageBuffer> {
        let t = self.tile_size();
        let c = self.tiles[0].channels();
        let (h, w) = (self.grid.rows * t, self.grid.cols * t);
        let mut out = ImageBuffer::filled(h, w, c, 0.0)?;
        for (i, tile) in self.tiles.iter().enumerate() {
            let (ty, tx) = (i / self.grid.cols, i % self.grid.cols);
            for y in 0..t {
                let dst = ((ty * t + y) * w + tx * t) * c;
                let src = y * t * c;
                out.pixels[dst..dst + t * c].copy_from_slice(&tile.pixels[src..src + t * c]);
            }
        }
        Ok(out)
    }
}

/// Every grid with at most `max_tiles` tiles, ordered by tile count and then
/// by column count.
pub fn candidate_grids(max_tiles: usize) -> Vec<TileGrid> {
    let mut grids: Vec<TileGrid> = (1..=max_tiles)
        .flat_map(|cols| (1..=max_tiles / cols).map(move |rows| TileGrid { cols, rows }))
        .collect();
    grids.sort_by_key(|g| (g.count(), g.cols));
    grids
}

// Log-ratio distances closer than this are treated as ties.
const TIE_EPS: f64 = 1e-12;

/// The candidate grid whose aspect ratio is closest to `width/height` in log
/// space. Grids sharing one aspect ratio (1×1, 2×2, …) count as one
/// candidate represented by the smallest; ties between different ratios go
/// to the grid with more tiles, then the wider one.
pub fn select_grid(width: usize, height: usize, max_tiles: usize) -> TileGrid {
    let image = (width as f64).ln() - (height as f64).ln();
    let mut best: Option<(f64, TileGrid)> = None;
    for g in candidate_grids(max_tiles.max(1)) {
        let d = (image - ((g.cols as f64).ln() - (g.rows as f64).ln())).abs();
        let better = match best {
            None => true,
            Some((bd, bg)) => {
                let same_ratio = g.cols * bg.rows == bg.cols * g.rows;
                d < bd - TIE_EPS
                    || (d <= bd + TIE_EPS
                        && !same_ratio
                        && (g.count(), g.cols) > (bg.count(), bg.cols))
            }
        };
        if better {
            best = Some((d, g));
        }
    }
    best.expect("at least the 1x1 grid").1
}

/// Bilinear resampling with half-pixel centres: output pixel `x` samples the
/// source at `(x + 0.5)·in/out − 0.5`, clamped to the image.
pub fn resize_bilinear(img: &ImageBuffer, out_w: usize, out_h: usize) -> Result<ImageBuffer> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::dim("resize_bilinear", format!("target {out_w}x{out_h}")));
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let xs = taps(img.width, out_w);
    let ys = taps(img.height, out_h);
    let c = img.channels;
    let mut pixels = Vec::with_capacity(out_w * out_h * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bot = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                pixels.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    ImageBuffer::new(out_h, out_w, c, pixels)
}

/// Cuts an image into tiles on the grid chosen by [`select_grid`].
pub fn segment(
    img: &ImageBuffer,
    tile_size: usize,
    max_tiles: usize,
    thumbnail: bool,
) -> Result<TileSet> {
    if tile_size < 2 {
        return Err(Error::Contract(format!("tile size {tile_size} is below 2")));
    }
    if max_tiles == 0 {
        return Err(Error::Contract("max_tiles must be at least 1".into()));
    }
    let grid = select_grid(img.width, img.height, max_tiles);
    let resized = resize_bilinear(img, grid.cols * tile_size, grid.rows * tile_size)?;
    let mut tiles = Vec::with_capacity(grid.count());
    for ty in 0..grid.rows {
        for tx in 0..grid.cols {
            tiles.push(resized.crop(ty * tile_size, tx * tile_size, tile_size, tile_size)?);
        }
    }
    let thumbnail = if thumbnail && grid.count() > 1 {
        Some(resize_bilinear(img, tile_size, tile_size)?)
    } else {
        None
    };
    Ok(TileSet {
        tiles,
        grid,
        thumbnail,
        source_dims: (img.height, img.width),
    })
}

/// Per-channel `(x − mean) / std` over every patch. The input is untouched.
pub fn normalize(tileset: &TileSet, mean: &[f64], std: &[f64]) -> Result<TileSet> {
    let c = tileset.tiles[0].channels();
    if mean.len() != c || std.len() != c {
        return Err(Error::dim(
            "normalize",
            format!("{c} channels with {} means and {} stds", mean.len(), std.len()),
        ));
    }
    if std.iter().any(|&s| s == 0.0) {
        return Err(Error::Contract("normalization std contains zero".into()));
    }
    let norm = |img: &ImageBuffer| {
        let mut out = img.clone();
        for (i, v) in out.pixels.iter_mut().enumerate() {
            let ch = i % c;
            *v = (*v - mean[ch]) / std[ch];
        }
        out
    };
    Ok(TileSet {
        tiles: tileset.tiles.iter().map(norm).collect(),
        grid: tileset.grid,
        thumbnail: tileset.thumbnail.as_ref().map(norm),
        source_dims: tileset.source_dims,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_grid_when_one_tile_allowed() {
        assert_eq!(candidate_grids(1), vec![TileGrid { cols: 1, rows: 1 }]);
    }

    #[test]
    fn checkerboard_downscale_averages() {
        let img = ImageBuffer::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = resize_bilinear(&img, 1, 1).unwrap();
        assert_eq!(out.pixels(), &[0.5]);
    }

    #[test]
    fn identity_resize_is_bit_exact() {
        let img = ImageBuffer::from_fn(5, 7, 3, |y, x, c| ((y * 31 + x * 7 + c) % 11) as f64 / 11.0)
            .unwrap();
        assert_eq!(resize_bilinear(&img, 7, 5).unwrap(), img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = ImageBuffer::filled(9, 13, 3, 0.37).unwrap();
        let out = resize_bilinear(&img, 4, 21).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn square_image_gets_single_tile_without_thumbnail() {
        let img = ImageBuffer::filled(448, 448, 3, 0.5).unwrap();
        let ts = segment(&img, 448, 6, true).unwrap();
        assert_eq!(ts.grid, TileGrid { cols: 1, rows: 1 });
        assert_eq!(ts.patch_count(), 1);
        assert!(ts.thumbnail.is_none());
    }

    #[test]
    fn normalize_arithmetic() {
        let img = ImageBuffer::filled(4, 4, 3, 0.5).unwrap();
        let ts = segment(&img, 4, 1, false).unwrap();
        let out = normalize(&ts, &[0.5; 3], &[0.25; 3]).unwrap();
        assert!(out.tiles[0].pixels().iter().all(|&v| v == 0.0));
        let same = normalize(&ts, &[0.0; 3], &[1.0; 3]).unwrap();
        assert_eq!(same, ts);
        assert!(matches!(
            normalize(&ts, &[0.0; 3], &[1.0, 0.0, 1.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let img = ImageBuffer::from_fn(3, 4, 3, |y, x, c| ((y * 4 + x) * 3 + c) as f64 / 255.0)
            .unwrap();
        img.write_ppm(&path).unwrap();
        let back = ImageBuffer::read_ppm(&path).unwrap();
        assert_eq!(back, img);
    }
}
