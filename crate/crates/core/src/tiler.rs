//! Fixed-grid tiling and the lesion / background partition of a sample.

use serde::{Deserialize, Serialize};

use crate::dataset::{ImageShape, Label, LesionBox, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Grid { rows, cols }
    }

    pub fn tile_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Shape of one tile for an image of `shape`, or an error when the grid
    /// does not divide the image evenly.
    pub fn tile_shape(&self, shape: ImageShape) -> Result<ImageShape> {
        if self.tile_count() < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid {}x{} must have at least 2 tiles",
                self.rows, self.cols
            )));
        }
        if shape.height % self.rows != 0 || shape.width % self.cols != 0 {
            return Err(Error::IndivisibleGrid {
                rows: self.rows,
                cols: self.cols,
                height: shape.height,
                width: shape.width,
            });
        }
        Ok(ImageShape::new(
            shape.height / self.rows,
            shape.width / self.cols,
            shape.channels,
        ))
    }

    /// Pixel rectangle `(x, y, w, h)` of tile `index` (row-major).
    pub fn tile_rect(&self, index: usize, tile: ImageShape) -> (u32, u32, u32, u32) {
        let (r, c) = (index / self.cols, index % self.cols);
        (
            (c * tile.width) as u32,
            (r * tile.height) as u32,
            tile.width as u32,
            tile.height as u32,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub parent_id: String,
    pub index: usize,
    pub shape: ImageShape,
    /// Same interleaved layout as [`Sample::pixels`].
    pub pixels: Vec<f64>,
    pub contains_lesion: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileSet {
    pub parent_id: String,
    pub tiles: Vec<Tile>,
    /// Background-only tile indices.
    pub r_minus: Vec<usize>,
    /// Lesion-bearing tile indices.
    pub r_plus: Vec<usize>,
}

/// Tiles whose pixel rectangle meets any box with positive area.
pub fn lesion_tiles(boxes: &[LesionBox], grid: Grid, tile: ImageShape) -> Vec<usize> {
    (0..grid.tile_count())
        .filter(|&i| {
            let (x, y, w, h) = grid.tile_rect(i, tile);
            boxes.iter().any(|b| b.overlaps(x, y, w, h))
        })
        .collect()
}

/// Cut `sample` into `grid.rows * grid.cols` tiles, enumerated row-major.
pub fn split(sample: &Sample, grid: Grid) -> Result<TileSet> {
    let tile_shape = grid.tile_shape(sample.shape)?;
    let plus = if sample.label == Label::Negative {
        Vec::new()
    } else {
        lesion_tiles(&sample.lesion_boxes, grid, tile_shape)
    };
    let c = sample.shape.channels;
    let row_stride = sample.shape.width * c;
    let mut tiles = Vec::with_capacity(grid.tile_count());
    for index in 0..grid.tile_count() {
        let (x0, y0, _, _) = grid.tile_rect(index, tile_shape);
        let (x0, y0) = (x0 as usize, y0 as usize);
        let mut pixels = Vec::with_capacity(tile_shape.len());
        for y in y0..y0 + tile_shape.height {
            let start = y * row_stride + x0 * c;
            pixels.extend_from_slice(&sample.pixels[start..start + tile_shape.width * c]);
        }
        tiles.push(Tile {
            parent_id: sample.id.clone(),
            index,
            shape: tile_shape,
            pixels,
            contains_lesion: plus.contains(&index),
        });
    }
    let r_minus = (0..grid.tile_count()).filter(|i| !plus.contains(i)).collect();
    Ok(TileSet {
        parent_id: sample.id.clone(),
        tiles,
        r_minus,
        r_plus: plus,
    })
}

impl TileSet {
    /// Tiles at the background indices, order preserved. May be empty.
    pub fn background_tiles(&self) -> Vec<&Tile> {
        self.r_minus.iter().map(|&i| &self.tiles[i]).collect()
    }

    pub fn all_tiles(&self) -> Vec<&Tile> {
        self.tiles.iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(label: Label, boxes: Vec<LesionBox>) -> Sample {
        let shape = ImageShape::new(80, 80, 1);
        let pixels = (0..shape.len()).map(|i| (i % 97) as f64 / 96.0).collect();
        Sample::new("s", shape, pixels, label, boxes).unwrap()
    }

    #[test]
    fn four_by_four_gives_sixteen_20px_tiles() {
        let ts = split(&sample(Label::Negative, vec![]), Grid::new(4, 4)).unwrap();
        assert_eq!(ts.tiles.len(), 16);
        assert!(ts.tiles.iter().all(|t| t.shape == ImageShape::new(20, 20, 1)));
        assert!(ts.r_plus.is_empty());
        assert_eq!(ts.r_minus, (0..16).collect::<Vec<_>>());
        assert_eq!(ts.background_tiles().len(), 16);
    }

    #[test]
    fn tile_pixels_come_from_the_right_window() {
        let s = sample(Label::Negative, vec![]);
        let ts = split(&s, Grid::new(4, 4)).unwrap();
        // tile 5 = row 1, col 1 -> origin (20, 20)
        let t = &ts.tiles[5];
        assert_eq!(t.pixels[0], s.pixels[20 * 80 + 20]);
        assert_eq!(t.pixels[21], s.pixels[21 * 80 + 21]);
    }

    #[test]
    fn box_covering_exactly_tile_five() {
        let s = sample(Label::Positive, vec![LesionBox::new(20, 20, 20, 20)]);
        let ts = split(&s, Grid::new(4, 4)).unwrap();
        // brute-force oracle: explicit per-pixel coverage test
        let oracle: Vec<usize> = (0..16)
            .filter(|&i| {
                let (tx, ty) = ((i % 4) * 20, (i / 4) * 20);
                (ty..ty + 20).any(|y| (tx..tx + 20).any(|x| (20..40).contains(&x) && (20..40).contains(&y)))
            })
            .collect();
        assert_eq!(oracle, vec![5]);
        assert_eq!(ts.r_plus, oracle);
        let bg = ts.background_tiles();
        assert_eq!(bg.len(), 15);
        assert!(bg.iter().all(|t| t.index != 5));
        assert!(ts.tiles[5].contains_lesion);
    }

    #[test]
    fn all_lesion_tiles_leave_no_background() {
        let s = sample(Label::Positive, vec![LesionBox::new(0, 0, 80, 80)]);
        let ts = split(&s, Grid::new(4, 4)).unwrap();
        assert_eq!(ts.r_plus.len(), 16);
        assert!(ts.background_tiles().is_empty());
    }

    #[test]
    fn indivisible_grid_is_rejected() {
        let s = sample(Label::Negative, vec![]);
        assert!(matches!(
            split(&s, Grid::new(3, 4)),
            Err(Error::IndivisibleGrid { .. })
        ));
        assert!(split(&s, Grid::new(1, 1)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn partition_matches_pixel_brute_force(
            boxes in prop::collection::vec((0u32..80, 0u32..80, 0u32..30, 0u32..30), 0..3)
        ) {
            let boxes: Vec<LesionBox> = boxes.into_iter().map(|(x, y, w, h)| LesionBox::new(x, y, w, h)).collect();
            let s = sample(Label::Positive, boxes);
            let ts = split(&s, Grid::new(4, 4)).unwrap();
            let mut covered = vec![false; 80 * 80];
            for b in &s.lesion_boxes {
                for y in b.y..b.y + b.h {
                    for x in b.x..b.x + b.w {
                        covered[(y * 80 + x) as usize] = true;
                    }
                }
            }
            let oracle: Vec<usize> = (0..16)
                .filter(|&i| {
                    let (tx, ty) = ((i % 4) * 20, (i / 4) * 20);
                    (ty..ty + 20).any(|y| (tx..tx + 20).any(|x| covered[y * 80 + x]))
                })
                .collect();
            prop_assert_eq!(&ts.r_plus, &oracle);
            let mut all: Vec<usize> = ts.r_plus.iter().chain(&ts.r_minus).copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..16).collect::<Vec<_>>());
        }
    }
}
