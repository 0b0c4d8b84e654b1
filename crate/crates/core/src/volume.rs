//! Dense 4-axis volumes (H, W, D, C) with voxel spacing, and integer label
//! volumes.
//!
//! Storage is row-major with the channel axis varying fastest, so the
//! channel vector of one voxel is contiguous.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Shape3 = [usize; 3];
pub type Spacing = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Volume4<T> {
    data: Vec<T>,
    shape: [usize; 4],
    spacing: Spacing,
}

fn check_spacing(spacing: Spacing) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::arg(format!(
            "spacing must be finite and positive, got {spacing:?}"
        )))
    }
}

impl<T: Scalar> Volume4<T> {
    pub fn new(data: Vec<T>, shape: [usize; 4], spacing: Spacing) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero extent")));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::dim(format!(
                "buffer holds {} values, shape {shape:?} needs {expected}",
                data.len()
            )));
        }
        check_spacing(spacing)?;
        Ok(Volume4 {
            data,
            shape,
            spacing,
        })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: [usize; 4], value: T) -> Self {
        assert!(shape.iter().all(|&n| n > 0), "zero extent in {shape:?}");
        Volume4 {
            data: vec![value; shape.iter().product()],
            shape,
            spacing: [1.0; 3],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut v = Self::zeros(shape);
        let [h, w, d, c] = shape;
        let mut idx = 0;
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    for ch in 0..c {
                        v.data[idx] = f(i, j, k, ch);
                        idx += 1;
                    }
                }
            }
        }
        v
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    /// Copies spacing from another volume without revalidating it.
    pub(crate) fn spacing_from(mut self, other: Spacing) -> Self {
        self.spacing = other;
        self
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn spatial(&self) -> Shape3 {
        [self.shape[0], self.shape[1], self.shape[2]]
    }

    pub fn channels(&self) -> usize {
        self.shape[3]
    }

    pub fn voxels(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize, c: usize) -> usize {
        ((i * self.shape[1] + j) * self.shape[2] + k) * self.shape[3] + c
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, c: usize) -> T {
        self.data[self.offset(i, j, k, c)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, c: usize, v: T) {
        let o = self.offset(i, j, k, c);
        self.data[o] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Volume4 {
            data: self.data.iter().map(|&v| f(v)).collect(),
            shape: self.shape,
            spacing: self.spacing,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in comparison");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Scalar>(&self) -> Volume4<U> {
        Volume4 {
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            shape: self.shape,
            spacing: self.spacing,
        }
    }

    /// Channels `[start, start + count)` as a new volume.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Self> {
        let c = self.channels();
        if count == 0 || start + count > c {
            return Err(Error::dim(format!(
                "channel range {start}..{} outside 0..{c}",
                start + count
            )));
        }
        let mut data = Vec::with_capacity(self.voxels() * count);
        for voxel in self.data.chunks_exact(c) {
            data.extend_from_slice(&voxel[start..start + count]);
        }
        Ok(Volume4 {
            data,
            shape: [self.shape[0], self.shape[1], self.shape[2], count],
            spacing: self.spacing,
        })
    }

    /// Sub-volume `[lo, lo + size)` per spatial axis, all channels.
    pub fn crop(&self, lo: Shape3, size: Shape3) -> Result<Self> {
        for a in 0..3 {
            if size[a] == 0 || lo[a] + size[a] > self.shape[a] {
                return Err(Error::dim(format!(
                    "crop {lo:?}+{size:?} exceeds spatial shape {:?}",
                    self.spatial()
                )));
            }
        }
        let c = self.channels();
        let mut data = Vec::with_capacity(size.iter().product::<usize>() * c);
        for i in lo[0]..lo[0] + size[0] {
            for j in lo[1]..lo[1] + size[1] {
                let start = self.offset(i, j, lo[2], 0);
                data.extend_from_slice(&self.data[start..start + size[2] * c]);
            }
        }
        Ok(Volume4 {
            data,
            shape: [size[0], size[1], size[2], c],
            spacing: self.spacing,
        })
    }

    /// Places `self` at offset `lo` inside a zero volume of spatial size `size`.
    pub fn embed(&self, lo: Shape3, size: Shape3) -> Result<Self> {
        let s = self.spatial();
        if (0..3).any(|a| lo[a] + s[a] > size[a]) {
            return Err(Error::dim(format!(
                "cannot embed {s:?} at {lo:?} inside {size:?}"
            )));
        }
        let c = self.channels();
        let mut out = Self::zeros([size[0], size[1], size[2], c]).spacing_from(self.spacing);
        for i in 0..s[0] {
            for j in 0..s[1] {
                let src = self.offset(i, j, 0, 0);
                let dst = out.offset(lo[0] + i, lo[1] + j, lo[2], 0);
                out.data[dst..dst + s[2] * c].copy_from_slice(&self.data[src..src + s[2] * c]);
            }
        }
        Ok(out)
    }

    /// Pads the high end of each spatial axis by edge replication.
    pub fn pad_edge(&self, extra: Shape3) -> Self {
        if extra == [0, 0, 0] {
            return self.clone();
        }
        let s = self.spatial();
        let c = self.channels();
        let shape = [s[0] + extra[0], s[1] + extra[1], s[2] + extra[2], c];
        let mut out = Self::zeros(shape).spacing_from(self.spacing);
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    let src = self.offset(i.min(s[0] - 1), j.min(s[1] - 1), k.min(s[2] - 1), 0);
                    let dst = out.offset(i, j, k, 0);
                    out.data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
                }
            }
        }
        out
    }

    /// Reverses the order of voxels along one spatial axis.
    pub fn flip(&self, axis: usize) -> Self {
        let s = self.spatial();
        let c = self.channels();
        let mut out = self.clone();
        for i in 0..s[0] {
            for j in 0..s[1] {
                for k in 0..s[2] {
                    let mut src = [i, j, k];
                    src[axis] = s[axis] - 1 - src[axis];
                    let from = self.offset(src[0], src[1], src[2], 0);
                    let to = self.offset(i, j, k, 0);
                    out.data[to..to + c].copy_from_slice(&self.data[from..from + c]);
                }
            }
        }
        out
    }
}

/// Concatenates volumes along the channel axis; part `j` becomes the `j`-th
/// contiguous channel block.
pub fn concat_channels<T: Scalar>(parts: &[&Volume4<T>]) -> Result<Volume4<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::arg("concat_channels needs at least one part"))?;
    for (idx, p) in parts.iter().enumerate().skip(1) {
        if p.spatial() != first.spatial() {
            return Err(Error::dim(format!(
                "part {idx} has spatial shape {:?}, expected {:?}",
                p.spatial(),
                first.spatial()
            )));
        }
        if p.spacing != first.spacing {
            return Err(Error::dim(format!(
                "part {idx} has spacing {:?}, expected {:?}",
                p.spacing, first.spacing
            )));
        }
    }
    let total: usize = parts.iter().map(|p| p.channels()).sum();
    let mut data = Vec::with_capacity(first.voxels() * total);
    for v in 0..first.voxels() {
        for p in parts {
            let c = p.channels();
            data.extend_from_slice(&p.data[v * c..(v + 1) * c]);
        }
    }
    let s = first.spatial();
    Ok(Volume4 {
        data,
        shape: [s[0], s[1], s[2], total],
        spacing: first.spacing,
    })
}

/// Axis-aligned box in voxel coordinates of the source volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub offset: Shape3,
    pub size: Shape3,
}

/// Tight bounding box of voxels with any nonzero channel.
pub fn nonzero_bbox<T: Scalar>(v: &Volume4<T>) -> Result<BoundingBox> {
    let s = v.spatial();
    let c = v.channels();
    let mut lo = s;
    let mut hi = [0usize; 3];
    let mut any = false;
    for (idx, voxel) in v.data.chunks_exact(c).enumerate() {
        if voxel.iter().all(|x| x.is_zero()) {
            continue;
        }
        any = true;
        let pos = [idx / (s[1] * s[2]), (idx / s[2]) % s[1], idx % s[2]];
        for a in 0..3 {
            lo[a] = lo[a].min(pos[a]);
            hi[a] = hi[a].max(pos[a]);
        }
    }
    if !any {
        return Err(Error::Empty("volume has no nonzero voxel".into()));
    }
    Ok(BoundingBox {
        offset: lo,
        size: [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1],
    })
}

pub fn crop_to_nonzero<T: Scalar>(v: &Volume4<T>) -> Result<(Volume4<T>, BoundingBox)> {
    let bbox = nonzero_bbox(v)?;
    Ok((v.crop(bbox.offset, bbox.size)?, bbox))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Trilinear,
    Nearest,
}

fn resampled_extent(n: usize, from: f64, to: f64) -> usize {
    ((n as f64 * from / to).round() as usize).max(1)
}

/// Continuous source index of output voxel `o`, aligning voxel centers.
fn source_coord(o: usize, from: f64, to: f64) -> f64 {
    (o as f64 + 0.5) * to / from - 0.5
}

/// Nearest source index per output index along one axis.
fn nearest_map(n_in: usize, n_out: usize, from: f64, to: f64) -> Vec<usize> {
    (0..n_out)
        .map(|o| {
            let x = source_coord(o, from, to);
            ((x + 0.5).floor().max(0.0) as usize).min(n_in - 1)
        })
        .collect()
}

/// Lower index and weight of the upper neighbour per output index.
fn linear_map(n_in: usize, n_out: usize, from: f64, to: f64) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let x = source_coord(o, from, to).clamp(0.0, (n_in - 1) as f64);
            let lo = (x.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

pub fn resample<T: Scalar>(v: &Volume4<T>, target: Spacing, mode: Interp) -> Result<Volume4<T>> {
    check_spacing(target)?;
    let s = v.spatial();
    let from = v.spacing;
    let out_s: Shape3 = std::array::from_fn(|a| resampled_extent(s[a], from[a], target[a]));
    let c = v.channels();
    let mut out = Volume4::zeros([out_s[0], out_s[1], out_s[2], c]).spacing_from(target);
    match mode {
        Interp::Nearest => {
            let maps: [Vec<usize>; 3] =
                std::array::from_fn(|a| nearest_map(s[a], out_s[a], from[a], target[a]));
            for i in 0..out_s[0] {
                for j in 0..out_s[1] {
                    for k in 0..out_s[2] {
                        let src = v.offset(maps[0][i], maps[1][j], maps[2][k], 0);
                        let dst = out.offset(i, j, k, 0);
                        out.data[dst..dst + c].copy_from_slice(&v.data[src..src + c]);
                    }
                }
            }
        }
        Interp::Trilinear => {
            let maps: [Vec<(usize, usize, f64)>; 3] =
                std::array::from_fn(|a| linear_map(s[a], out_s[a], from[a], target[a]));
            for i in 0..out_s[0] {
                let (i0, i1, fi) = maps[0][i];
                for j in 0..out_s[1] {
                    let (j0, j1, fj) = maps[1][j];
                    for k in 0..out_s[2] {
                        let (k0, k1, fk) = maps[2][k];
                        for ch in 0..c {
                            let at = |a, b, d| v.get(a, b, d, ch).as_f64();
                            let c00 = at(i0, j0, k0) * (1.0 - fk) + at(i0, j0, k1) * fk;
                            let c01 = at(i0, j1, k0) * (1.0 - fk) + at(i0, j1, k1) * fk;
                            let c10 = at(i1, j0, k0) * (1.0 - fk) + at(i1, j0, k1) * fk;
                            let c11 = at(i1, j1, k0) * (1.0 - fk) + at(i1, j1, k1) * fk;
                            let c0 = c00 * (1.0 - fj) + c01 * fj;
                            let c1 = c10 * (1.0 - fj) + c11 * fj;
                            out.set(i, j, k, ch, T::lit(c0 * (1.0 - fi) + c1 * fi));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Integer class labels over a 3D grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    data: Vec<u32>,
    shape: Shape3,
    num_classes: u32,
}

impl LabelVolume {
    pub fn new(data: Vec<u32>, shape: Shape3, num_classes: u32) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::arg("num_classes must be positive"));
        }
        if shape.contains(&0) || data.len() != shape.iter().product::<usize>() {
            return Err(Error::dim(format!(
                "label buffer of {} values does not fit shape {shape:?}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v >= num_classes) {
            return Err(Error::arg(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(LabelVolume {
            data,
            shape,
            num_classes,
        })
    }

    pub fn zeros(shape: Shape3, num_classes: u32) -> Self {
        LabelVolume::new(vec![0; shape.iter().product()], shape, num_classes)
            .expect("zero labels are valid")
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u32 {
        self.data[self.offset(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: u32) {
        assert!(v < self.num_classes, "label {v} outside class range");
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    pub fn count(&self, class: u32) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    pub fn crop(&self, lo: Shape3, size: Shape3) -> Result<Self> {
        if (0..3).any(|a| size[a] == 0 || lo[a] + size[a] > self.shape[a]) {
            return Err(Error::dim(format!(
                "crop {lo:?}+{size:?} exceeds label shape {:?}",
                self.shape
            )));
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for i in lo[0]..lo[0] + size[0] {
            for j in lo[1]..lo[1] + size[1] {
                let start = self.offset(i, j, lo[2]);
                data.extend_from_slice(&self.data[start..start + size[2]]);
            }
        }
        Ok(LabelVolume {
            data,
            shape: size,
            num_classes: self.num_classes,
        })
    }

    pub fn embed(&self, lo: Shape3, size: Shape3) -> Result<Self> {
        let s = self.shape;
        if (0..3).any(|a| lo[a] + s[a] > size[a]) {
            return Err(Error::dim(format!(
                "cannot embed {s:?} at {lo:?} inside {size:?}"
            )));
        }
        let mut out = LabelVolume::zeros(size, self.num_classes);
        for i in 0..s[0] {
            for j in 0..s[1] {
                let src = self.offset(i, j, 0);
                let dst = out.offset(lo[0] + i, lo[1] + j, lo[2]);
                out.data[dst..dst + s[2]].copy_from_slice(&self.data[src..src + s[2]]);
            }
        }
        Ok(out)
    }

    pub fn flip(&self, axis: usize) -> Self {
        let s = self.shape;
        let mut out = self.clone();
        for i in 0..s[0] {
            for j in 0..s[1] {
                for k in 0..s[2] {
                    let mut src = [i, j, k];
                    src[axis] = s[axis] - 1 - src[axis];
                    out.data[self.offset(i, j, k)] = self.get(src[0], src[1], src[2]);
                }
            }
        }
        out
    }

    /// Nearest-neighbour resampling from `from` spacing to `to` spacing.
    pub fn resample(&self, from: Spacing, to: Spacing) -> Result<Self> {
        check_spacing(from)?;
        check_spacing(to)?;
        let s = self.shape;
        let out_s: Shape3 = std::array::from_fn(|a| resampled_extent(s[a], from[a], to[a]));
        let maps: [Vec<usize>; 3] =
            std::array::from_fn(|a| nearest_map(s[a], out_s[a], from[a], to[a]));
        let mut data = Vec::with_capacity(out_s.iter().product());
        for i in 0..out_s[0] {
            for j in 0..out_s[1] {
                for k in 0..out_s[2] {
                    data.push(self.get(maps[0][i], maps[1][j], maps[2][k]));
                }
            }
        }
        Ok(LabelVolume {
            data,
            shape: out_s,
            num_classes: self.num_classes,
        })
    }

    /// Nearest-neighbour label for a grid reduced by integer `factors`:
    /// output voxel `o` takes the source voxel at `o * factor`.
    pub fn downsample(&self, factors: Shape3) -> Result<Self> {
        if (0..3).any(|a| factors[a] == 0 || !self.shape[a].is_multiple_of(factors[a])) {
            return Err(Error::dim(format!(
                "label shape {:?} not divisible by {factors:?}",
                self.shape
            )));
        }
        let out_s: Shape3 = std::array::from_fn(|a| self.shape[a] / factors[a]);
        let mut data = Vec::with_capacity(out_s.iter().product());
        for i in 0..out_s[0] {
            for j in 0..out_s[1] {
                for k in 0..out_s[2] {
                    data.push(self.get(i * factors[0], j * factors[1], k * factors[2]));
                }
            }
        }
        Ok(LabelVolume {
            data,
            shape: out_s,
            num_classes: self.num_classes,
        })
    }

    /// One-hot expansion into a `num_classes`-channel volume.
    pub fn one_hot<T: Scalar>(&self) -> Volume4<T> {
        let c = self.num_classes as usize;
        let mut out = Volume4::zeros([self.shape[0], self.shape[1], self.shape[2], c]);
        for (v, &label) in self.data.iter().enumerate() {
            out.data[v * c + label as usize] = T::one();
        }
        out
    }

    /// Binary mask of one class as a single-channel volume.
    pub fn mask(&self, class: u32) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }
}

/// Per-voxel argmax over channels.
pub fn argmax_channels<T: Scalar>(v: &Volume4<T>) -> LabelVolume {
    let c = v.channels();
    let data = v
        .data
        .chunks_exact(c)
        .map(|voxel| {
            let mut best = 0;
            for (idx, &x) in voxel.iter().enumerate() {
                if x > voxel[best] {
                    best = idx;
                }
            }
            best as u32
        })
        .collect();
    LabelVolume {
        data,
        shape: v.spatial(),
        num_classes: c as u32,
    }
}
