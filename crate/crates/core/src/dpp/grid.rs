//! Tensor state grids, multilinear interpolation and value fields.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{LabError, Result};
use crate::sde_sim::TimeGrid;
use crate::FORMAT_HEADER;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub nodes: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, nodes: usize) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(LabError::invalid(format!("axis bounds must be finite with min < max, got [{min}, {max}]")));
        }
        if nodes < 2 {
            return Err(LabError::invalid("an axis needs at least 2 nodes"));
        }
        Ok(Axis { min, max, nodes })
    }

    /// Axis with spacing `h` covering `[min, max]`; `max` is rounded to the grid.
    pub fn with_spacing(min: f64, max: f64, h: f64) -> Result<Self> {
        let cells = ((max - min) / h).round() as usize;
        Axis::new(min, min + cells as f64 * h, cells + 1)
    }

    pub fn h(&self) -> f64 {
        (self.max - self.min) / (self.nodes - 1) as f64
    }

    pub fn coord(&self, j: usize) -> f64 {
        if j + 1 == self.nodes {
            self.max
        } else {
            self.min + j as f64 * self.h()
        }
    }
}

/// What a grid lookup does outside the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryPolicy {
    /// Use the value at the nearest boundary point.
    Clamp,
    /// Extend the edge cell linearly. Not monotone: weights can be negative.
    LinearExtrapolate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateGrid {
    axes: Vec<Axis>,
    policy: BoundaryPolicy,
    strides: Vec<usize>,
}

/// Interpolation stencil: `(node, weight)` pairs and whether the point was
/// outside the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    pub entries: Vec<(usize, f64)>,
    pub outside: bool,
}

impl StateGrid {
    pub fn new(axes: Vec<Axis>, policy: BoundaryPolicy) -> Result<Self> {
        if axes.is_empty() {
            return Err(LabError::invalid("state grid needs at least one axis"));
        }
        // row-major, last axis fastest
        let mut strides = vec![1; axes.len()];
        for i in (0..axes.len() - 1).rev() {
            strides[i] = strides[i + 1] * axes[i + 1].nodes;
        }
        Ok(StateGrid { axes, policy, strides })
    }

    pub fn uniform(dim: usize, min: f64, max: f64, nodes: usize) -> Result<Self> {
        let axis = Axis::new(min, max, nodes)?;
        StateGrid::new(vec![axis; dim], BoundaryPolicy::Clamp)
    }

    pub fn with_policy(mut self, policy: BoundaryPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.nodes).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn policy(&self) -> BoundaryPolicy {
        self.policy
    }

    pub fn h(&self, i: usize) -> f64 {
        self.axes[i].h()
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        self.strides
            .iter()
            .map(|&s| {
                let j = idx / s;
                idx %= s;
                j
            })
            .collect()
    }

    pub fn flat(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(j, s)| j * s).sum()
    }

    pub fn coords(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx).iter().zip(&self.axes).map(|(&j, a)| a.coord(j)).collect()
    }

    /// Neighbour of `idx` shifted by `offset[i]` nodes along each axis, with
    /// indices clamped to the grid; the flag reports whether clamping happened.
    pub fn shifted(&self, idx: usize, offset: &[isize]) -> (usize, bool) {
        let mut multi = self.multi_index(idx);
        let mut clamped = false;
        for ((j, o), a) in multi.iter_mut().zip(offset).zip(&self.axes) {
            let target = *j as isize + o;
            let c = target.clamp(0, a.nodes as isize - 1);
            clamped |= c != target;
            *j = c as usize;
        }
        (self.flat(&multi), clamped)
    }

    pub fn stencil(&self, x: &[f64]) -> Stencil {
        let n = self.dim();
        let mut base = Vec::with_capacity(n);
        let mut frac = Vec::with_capacity(n);
        let mut outside = false;
        for (xi, a) in x.iter().zip(&self.axes) {
            let h = a.h();
            let mut s = (xi - a.min) / h;
            let top = (a.nodes - 1) as f64;
            if s < -1e-9 || s > top + 1e-9 {
                outside = true;
            }
            if self.policy == BoundaryPolicy::Clamp {
                s = s.clamp(0.0, top);
            }
            let j = (s.floor().max(0.0) as usize).min(a.nodes - 2);
            let mut f = s - j as f64;
            // snap roundoff so that on-node points hit the node exactly
            if f.abs() < 1e-9 {
                f = 0.0;
            } else if (f - 1.0).abs() < 1e-9 {
                f = 1.0;
            }
            base.push(j);
            frac.push(f);
        }
        let mut entries = Vec::with_capacity(1 << n);
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut multi = base.clone();
            for i in 0..n {
                if (corner >> i) & 1 == 1 {
                    w *= frac[i];
                    multi[i] += 1;
                } else {
                    w *= 1.0 - frac[i];
                }
            }
            if w != 0.0 {
                entries.push((self.flat(&multi), w));
            }
        }
        Stencil { entries, outside }
    }

    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        self.stencil(x).entries.iter().map(|&(i, w)| w * values[i]).sum()
    }

    pub fn nearest(&self, x: &[f64]) -> usize {
        let multi: Vec<usize> = x
            .iter()
            .zip(&self.axes)
            .map(|(xi, a)| (((xi - a.min) / a.h()).round().max(0.0) as usize).min(a.nodes - 1))
            .collect();
        self.flat(&multi)
    }

    /// Nodes at distance at least `margin` from every face of the box.
    pub fn interior(&self, margin: f64) -> Vec<bool> {
        (0..self.len())
            .map(|idx| {
                self.coords(idx)
                    .iter()
                    .zip(&self.axes)
                    .all(|(x, a)| x - a.min >= margin - 1e-12 && a.max - x >= margin - 1e-12)
            })
            .collect()
    }

    /// Nodes with at least one full neighbour layer around them.
    pub fn strict_interior(&self) -> Vec<bool> {
        (0..self.len())
            .map(|idx| {
                self.multi_index(idx).iter().zip(&self.axes).all(|(&j, a)| j > 0 && j + 1 < a.nodes)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Lower,
    Upper,
}

impl Tag {
    pub fn as_str(&self) -> &'static str {
        match self {
            Tag::Lower => "lower",
            Tag::Upper => "upper",
        }
    }
}

/// Optimizers recorded while building a field. For a lower field `outer` is
/// the maximizing `u` index and `responses[k][node][i]` the minimizing `v`
/// against `u_i`; for an upper field the roles swap.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub outer: Vec<Vec<usize>>,
    pub responses: Vec<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    pub tag: Tag,
    pub tgrid: TimeGrid,
    pub sgrid: StateGrid,
    /// `values[k][node]`, `k = 0..=N`.
    pub values: Vec<Vec<f64>>,
    pub policy: Option<Policy>,
    /// Lookups that fell outside the state grid.
    pub boundary_hits: usize,
}

const MAGIC: &[u8; 4] = b"VFLD";
const VERSION: u32 = 1;

impl ValueField {
    pub fn at(&self, step: usize, x: &[f64]) -> f64 {
        self.sgrid.interpolate(&self.values[step], x)
    }

    /// Rows `step, t, x…, value`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{FORMAT_HEADER}")?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec!["step".to_string(), "t".into()];
        header.extend((0..self.sgrid.dim()).map(|i| format!("x{i}")));
        header.push(format!("{}_value", self.tag.as_str()));
        w.write_record(&header)?;
        for (k, slice) in self.values.iter().enumerate() {
            let t = self.tgrid.t(k).to_string();
            for (idx, v) in slice.iter().enumerate() {
                let mut row = vec![k.to_string(), t.clone()];
                row.extend(self.sgrid.coords(idx).iter().map(|x| x.to_string()));
                row.push(v.to_string());
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Binary table: 16-byte header (`VFLD`, version, dimension count, tag),
    /// then per axis `min, max, nodes`, then `steps, t0, t1` and the values
    /// slice by slice, all little-endian.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.sgrid.dim() as u32).to_le_bytes());
        let tag: u32 = match self.tag {
            Tag::Lower => 0,
            Tag::Upper => 1,
        };
        buf.extend_from_slice(&tag.to_le_bytes());
        for a in self.sgrid.axes() {
            buf.extend_from_slice(&a.min.to_le_bytes());
            buf.extend_from_slice(&a.max.to_le_bytes());
            buf.extend_from_slice(&(a.nodes as u64).to_le_bytes());
        }
        buf.extend_from_slice(&(self.tgrid.steps as u64).to_le_bytes());
        buf.extend_from_slice(&self.tgrid.t0.to_le_bytes());
        buf.extend_from_slice(&self.tgrid.t1.to_le_bytes());
        for v in self.values.iter().flatten() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    /// Reads a table written by [`ValueField::write_binary`]. The policy and
    /// boundary diagnostics are not stored.
    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(LabError::invalid("not a value field table (bad magic)"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(LabError::invalid(format!("unsupported value field version {version}")));
        }
        let dims = cur.u32()? as usize;
        let tag = match cur.u32()? {
            0 => Tag::Lower,
            1 => Tag::Upper,
            other => return Err(LabError::invalid(format!("unknown tag {other}"))),
        };
        let mut axes = Vec::with_capacity(dims);
        for _ in 0..dims {
            let (min, max, nodes) = (cur.f64()?, cur.f64()?, cur.u64()? as usize);
            axes.push(Axis::new(min, max, nodes)?);
        }
        let sgrid = StateGrid::new(axes, BoundaryPolicy::Clamp)?;
        let steps = cur.u64()? as usize;
        let tgrid = TimeGrid::new(cur.f64()?, cur.f64()?, steps)?;
        let len = sgrid.len();
        let mut values = Vec::with_capacity(steps + 1);
        for _ in 0..=steps {
            values.push((0..len).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?);
        }
        if cur.pos != bytes.len() {
            return Err(LabError::invalid("trailing bytes after value field table"));
        }
        Ok(ValueField { tag, tgrid, sgrid, values, policy: None, boundary_hits: 0 })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let out = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| LabError::invalid("value field table is truncated"))?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
