use crate::{Error, Result};

/// Row-major 2D raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("grid", &[height, width], &[data.len()]));
        }
        Ok(Grid { height, width, data })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: T) {
        self.data[row * self.width + col] = v;
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Sub-rectangle starting at (row, col).
    pub fn crop(&self, rect: &Rect) -> Result<Grid<T>> {
        rect.check_inside(self.height, self.width)?;
        let mut data = Vec::with_capacity(rect.height * rect.width);
        for r in rect.row..rect.row + rect.height {
            data.extend_from_slice(&self.data[r * self.width + rect.col..r * self.width + rect.col + rect.width]);
        }
        Ok(Grid {
            height: rect.height,
            width: rect.width,
            data,
        })
    }

    pub fn same_size<U>(&self, other: &Grid<U>) -> bool {
        self.height == other.height && self.width == other.width
    }
}

pub type Rgb = [f64; 3];

/// Flatten an RGB/normal grid into interleaved channels.
pub fn flatten3(g: &Grid<Rgb>) -> Vec<f64> {
    g.data.iter().flat_map(|p| p.iter().copied()).collect()
}

pub fn unflatten3(height: usize, width: usize, data: &[f64]) -> Result<Grid<Rgb>> {
    if data.len() != height * width * 3 {
        return Err(Error::shape("unflatten3", &[height, width, 3], &[data.len()]));
    }
    Ok(Grid {
        height,
        width,
        data: data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn full(height: usize, width: usize) -> Self {
        Rect {
            row: 0,
            col: 0,
            height,
            width,
        }
    }

    pub fn check_inside(&self, height: usize, width: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.row + self.height > height || self.col + self.width > width {
            return Err(Error::invalid(format!(
                "crop {self:?} outside {height}x{width} image"
            )));
        }
        Ok(())
    }
}
