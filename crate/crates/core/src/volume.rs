//! 8-bit voxel volumes and the axis-aligned slices used for line detection.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::ScaleVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("invalid dimensions {0:?}")]
    InvalidDims([usize; 3]),
    #[error("payload holds {got} voxels, dimensions require {expected}")]
    PayloadLength { expected: usize, got: usize },
    #[error("slice index {index} outside axis of length {len}")]
    SliceOutOfBounds { index: i64, len: usize },
}

/// Voxel grid stored x-fastest: index = x + nx·(y + ny·z).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    scale: ScaleVector,
    data: Vec<u8>,
}

impl Volume {
    pub fn new(dims: [usize; 3], scale: ScaleVector, data: Vec<u8>) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::InvalidDims(dims));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(VolumeError::PayloadLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Self { dims, scale, data })
    }

    pub fn filled(dims: [usize; 3], scale: ScaleVector, value: u8) -> Result<Self, VolumeError> {
        Self::new(dims, scale, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn scale(&self) -> &ScaleVector {
        &self.scale
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: u8) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// True when `p` lies inside the voxel-center bounding box `[0, n-1]³`.
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= -1e-9 && p[i] <= (self.dims[i] - 1) as f64 + 1e-9)
    }

    /// Metric center `dims/2 ⊙ scale`, mm.
    pub fn metric_center(&self) -> Vector3<f64> {
        let d = Vector3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64);
        self.scale.to_metric(&(d * 0.5))
    }

    fn axis_index(&self, axis: usize, pos: f64) -> Result<usize, VolumeError> {
        let i = pos.round() as i64;
        if i < 0 || i >= self.dims[axis] as i64 {
            return Err(VolumeError::SliceOutOfBounds {
                index: i,
                len: self.dims[axis],
            });
        }
        Ok(i as usize)
    }

    /// Nearest-voxel slice in the plane of constant `kind`-fixed coordinate
    /// passing through `through` (voxel coordinates).
    pub fn slice(&self, kind: SliceKind, through: &Vector3<f64>) -> Result<Slice2D, VolumeError> {
        let [nx, ny, nz] = self.dims;
        let s = self.scale.as_vector();
        match kind {
            SliceKind::Xy => {
                let z = self.axis_index(2, through.z)?;
                let mut pixels = Vec::with_capacity(nx * ny);
                pixels.extend_from_slice(&self.data[nx * ny * z..nx * ny * (z + 1)]);
                Ok(Slice2D {
                    width: nx,
                    height: ny,
                    pixels,
                    kind,
                    fixed: z,
                    scale: [s.x, s.y],
                })
            }
            SliceKind::Zy => {
                let x = self.axis_index(0, through.x)?;
                let mut pixels = Vec::with_capacity(nz * ny);
                for y in 0..ny {
                    for z in 0..nz {
                        pixels.push(self.get(x, y, z));
                    }
                }
                Ok(Slice2D {
                    width: nz,
                    height: ny,
                    pixels,
                    kind,
                    fixed: x,
                    scale: [s.z, s.y],
                })
            }
        }
    }
}

/// Which volume axes a slice spans. Pixel `(u, v)` is voxel `(u, v, fixed)`
/// for [`SliceKind::Xy`] and `(fixed, v, u)` for [`SliceKind::Zy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SliceKind {
    Xy,
    Zy,
}

impl SliceKind {
    pub fn label(&self) -> &'static str {
        match self {
            SliceKind::Xy => "xy",
            SliceKind::Zy => "zy",
        }
    }

    pub fn parse(s: &str) -> Option<SliceKind> {
        match s {
            "xy" => Some(SliceKind::Xy),
            "zy" => Some(SliceKind::Zy),
            _ => None,
        }
    }

    /// Voxel coordinates of slice point `(u, v)`.
    pub fn lift(&self, u: f64, v: f64, fixed: f64) -> Vector3<f64> {
        match self {
            SliceKind::Xy => Vector3::new(u, v, fixed),
            SliceKind::Zy => Vector3::new(fixed, v, u),
        }
    }

    /// Slice coordinates `(u, v)` of a voxel position (fixed axis dropped).
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        match self {
            SliceKind::Xy => (p.x, p.y),
            SliceKind::Zy => (p.z, p.y),
        }
    }

    /// Index of the volume axis held constant.
    pub fn fixed_axis(&self) -> usize {
        match self {
            SliceKind::Xy => 2,
            SliceKind::Zy => 0,
        }
    }
}

/// 2-D 8-bit image, row-major with `u` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub kind: SliceKind,
    /// Voxel index along the fixed axis.
    pub fixed: usize,
    /// mm per pixel along `u` and `v`.
    pub scale: [f64; 2],
}

impl Slice2D {
    /// Standalone image (kind `Xy`, fixed index 0, unit scale).
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, VolumeError> {
        if width < 2 || height < 2 {
            return Err(VolumeError::InvalidDims([width, height, 1]));
        }
        if pixels.len() != width * height {
            return Err(VolumeError::PayloadLength {
                expected: width * height,
                got: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
            kind: SliceKind::Xy,
            fixed: 0,
            scale: [1.0, 1.0],
        })
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> u8 {
        self.pixels[u + self.width * v]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: u8) {
        self.pixels[u + self.width * v] = value;
    }
}
