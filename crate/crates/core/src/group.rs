//! The p4 group (integer translations composed with 90° rotations) and its
//! action `[L_g f](x) = f(g⁻¹x)` on planar images and group feature maps.
//!
//! Conventions:
//! - Points are `(row, col)` offsets from the geometric centre of the grid.
//!   Even-sized grids have a half-integer centre; internally coordinates are
//!   doubled so everything stays integral.
//! - `R(1)` maps `(p, q)` to `(-q, p)`. On an array this is a
//!   counter-clockwise quarter turn: `out[i][j] = in[j][W-1-i]`.
//! - A group feature map has trailing axes `(rotation=4, row, col)`; acting
//!   by `g` moves spatial content by `g` and cyclically shifts the rotation
//!   axis by `g.r`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How values outside the spatial grid are treated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    /// Out-of-grid reads are zero.
    #[default]
    ZeroPad,
    /// The grid is a torus.
    Circular,
}

/// A p4 element: rotation by `r` quarter turns (counter-clockwise) followed by
/// the integer translation `t = (rows, cols)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct P4Element {
    pub r: u8,
    pub t: (i64, i64),
}

/// Applies the quarter-turn rotation `R(r)` to an integer vector.
pub fn rotate_vec(r: u8, (p, q): (i64, i64)) -> (i64, i64) {
    match r % 4 {
        0 => (p, q),
        1 => (-q, p),
        2 => (-p, -q),
        _ => (q, -p),
    }
}

impl P4Element {
    pub const IDENTITY: P4Element = P4Element { r: 0, t: (0, 0) };

    pub fn new(r: u8, t: (i64, i64)) -> Self {
        Self { r: r % 4, t }
    }

    pub fn rotation(r: u8) -> Self {
        Self::new(r, (0, 0))
    }

    pub fn translation(rows: i64, cols: i64) -> Self {
        Self::new(0, (rows, cols))
    }

    /// Group product `self · other`.
    pub fn compose(&self, other: &P4Element) -> P4Element {
        let (du, dv) = rotate_vec(self.r, other.t);
        P4Element::new((self.r + other.r) % 4, (self.t.0 + du, self.t.1 + dv))
    }

    pub fn inverse(&self) -> P4Element {
        let r = (4 - self.r % 4) % 4;
        let (u, v) = rotate_vec(r, self.t);
        P4Element::new(r, (-u, -v))
    }

    /// Action on a point in (un-doubled) offset coordinates.
    pub fn apply(&self, x: (i64, i64)) -> (i64, i64) {
        let (u, v) = rotate_vec(self.r, x);
        (u + self.t.0, v + self.t.1)
    }

    /// All 4 rotations combined with each listed translation.
    pub fn all_with_translations(ts: &[(i64, i64)]) -> Vec<P4Element> {
        ts.iter()
            .flat_map(|&t| (0..4).map(move |r| P4Element::new(r, t)))
            .collect()
    }
}

/// For every output position of an `h × w` grid, the input position read by
/// `L_g` (or `None` when it falls off a zero-padded grid).
pub(crate) fn spatial_source_map(g: &P4Element, h: usize, w: usize, boundary: Boundary) -> Result<Vec<Option<usize>>> {
    if g.r % 2 == 1 && h != w {
        return Err(Error::shape(
            "act",
            format!("odd quarter turns need a square grid, got {h}x{w}"),
        ));
    }
    let inv = g.inverse();
    let (hi, wi) = (h as i64, w as i64);
    let mut map = Vec::with_capacity(h * w);
    for i in 0..hi {
        for j in 0..wi {
            // Doubled centred coordinates of the output point.
            let p = 2 * i - (hi - 1);
            let q = 2 * j - (wi - 1);
            let (rp, rq) = rotate_vec(inv.r, (p, q));
            let (sp, sq) = (rp + 2 * inv.t.0, rq + 2 * inv.t.1);
            let (si, sj) = ((sp + hi - 1) / 2, (sq + wi - 1) / 2);
            let src = match boundary {
                Boundary::Circular => Some((si.rem_euclid(hi) * wi + sj.rem_euclid(wi)) as usize),
                Boundary::ZeroPad => ((0..hi).contains(&si) && (0..wi).contains(&sj)).then(|| (si * wi + sj) as usize),
            };
            map.push(src);
        }
    }
    Ok(map)
}

fn trailing_dims(t: &Tensor, n: usize, op: &'static str) -> Result<(usize, Vec<usize>)> {
    if t.rank() < n {
        return Err(Error::shape(op, format!("rank {} below {n}", t.rank())));
    }
    let split = t.rank() - n;
    let outer = t.shape()[..split].iter().product();
    Ok((outer, t.shape()[split..].to_vec()))
}

/// `L_g` on a planar field with trailing axes `(row, col)`.
pub fn act_planar(g: &P4Element, f: &Tensor, boundary: Boundary) -> Result<Tensor> {
    let (outer, dims) = trailing_dims(f, 2, "act_planar")?;
    let (h, w) = (dims[0], dims[1]);
    let map = spatial_source_map(g, h, w, boundary)?;
    let plane = h * w;
    let mut out = vec![0.0; f.numel()];
    for o in 0..outer {
        let src = &f.data()[o * plane..(o + 1) * plane];
        let dst = &mut out[o * plane..(o + 1) * plane];
        for (d, m) in dst.iter_mut().zip(&map) {
            if let Some(s) = *m {
                *d = src[s];
            }
        }
    }
    Ok(Tensor::from_parts(f.shape().to_vec(), out))
}

/// `L_g` on a group field with trailing axes `(rotation=4, row, col)`:
/// `out(.., r, x) = f(.., r - g.r mod 4, R(-g.r)(x - g.t))`.
pub fn act_group(g: &P4Element, f: &Tensor, boundary: Boundary) -> Result<Tensor> {
    let (outer, dims) = trailing_dims(f, 3, "act_group")?;
    if dims[0] != 4 {
        return Err(Error::shape(
            "act_group",
            format!("rotation axis must have extent 4, got {}", dims[0]),
        ));
    }
    let (h, w) = (dims[1], dims[2]);
    let map = spatial_source_map(g, h, w, boundary)?;
    let plane = h * w;
    let mut out = vec![0.0; f.numel()];
    for o in 0..outer {
        for r in 0..4usize {
            let src_r = (r + 4 - g.r as usize % 4) % 4;
            let src = &f.data()[(o * 4 + src_r) * plane..(o * 4 + src_r + 1) * plane];
            let dst = &mut out[(o * 4 + r) * plane..(o * 4 + r + 1) * plane];
            for (d, m) in dst.iter_mut().zip(&map) {
                if let Some(s) = *m {
                    *d = src[s];
                }
            }
        }
    }
    Ok(Tensor::from_parts(f.shape().to_vec(), out))
}

/// A function on p4 restricted to a finite grid: axes `(channel, rotation, row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupFeatureMap {
    values: Tensor,
    boundary: Boundary,
}

impl GroupFeatureMap {
    pub fn new(values: Tensor, boundary: Boundary) -> Result<Self> {
        if values.rank() != 4 || values.shape()[1] != 4 {
            return Err(Error::shape(
                "GroupFeatureMap",
                format!("expected (channel, 4, row, col), got {:?}", values.shape()),
            ));
        }
        Ok(Self { values, boundary })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[3]
    }
}

/// The representation `L_g` applied to a group feature map.
pub fn act(g: &P4Element, f: &GroupFeatureMap) -> Result<GroupFeatureMap> {
    Ok(GroupFeatureMap {
        values: act_group(g, &f.values, f.boundary)?,
        boundary: f.boundary,
    })
}

fn square_kernel(shape: &[usize]) -> Result<usize> {
    let (kh, kw) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if kh != kw {
        return Err(Error::NonSquareKernel { kh, kw });
    }
    Ok(kh)
}

/// Rotates a group filter bank `(out, in, rotation=4, k, k)` by `r` quarter
/// turns: every spatial slice turns by `r` and the rotation axis shifts
/// cyclically by `r`, i.e. the filter is acted on by the pure rotation `r`.
pub fn rotate_filter(filter: &Tensor, r: u8) -> Result<Tensor> {
    if filter.rank() != 5 || filter.shape()[2] != 4 {
        return Err(Error::shape(
            "rotate_filter",
            format!("expected (out, in, 4, k, k), got {:?}", filter.shape()),
        ));
    }
    square_kernel(filter.shape())?;
    act_group(&P4Element::rotation(r), filter, Boundary::ZeroPad)
}

/// Spatial-only rotation of a planar filter bank `(out, in, k, k)`.
pub fn rotate_filter_spatial(filter: &Tensor, r: u8) -> Result<Tensor> {
    if filter.rank() < 2 {
        return Err(Error::shape("rotate_filter_spatial", "rank below 2"));
    }
    square_kernel(filter.shape())?;
    act_planar(&P4Element::rotation(r), filter, Boundary::ZeroPad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(r: u8, t: (i64, i64)) -> P4Element {
        P4Element::new(r, t)
    }

    #[test]
    fn compose_examples() {
        assert_eq!(e(0, (0, 0)).compose(&e(2, (1, 3))), e(2, (1, 3)));
        assert_eq!(e(1, (1, 0)).compose(&e(1, (1, 0))), e(2, (1, 1)));
        let a = e(1, (1, 0));
        assert_eq!(a.compose(&a.inverse()), P4Element::IDENTITY);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(P4Element::IDENTITY.inverse(), P4Element::IDENTITY);
        assert_eq!(e(1, (1, 0)).inverse(), e(3, (0, 1)));
    }

    #[test]
    fn single_entry_relocates_under_quarter_turn() {
        // 5x5 grid, centre (2, 2); offset (0, 1) is row 2, col 3.
        let mut f = Tensor::zeros(&[1, 4, 5, 5]);
        f.set(&[0, 0, 2, 3], 1.0);
        let map = GroupFeatureMap::new(f, Boundary::Circular).unwrap();
        let moved = act(&P4Element::rotation(1), &map).unwrap();
        // R(90°)(0, 1) = (-1, 0): row 1, col 2, rotation slot 1.
        assert_eq!(moved.values().get(&[0, 1, 1, 2]), 1.0);
        assert_eq!(moved.values().sum(), 1.0);
    }

    #[test]
    fn quarter_turn_matches_index_map_on_even_grid() {
        let f = Tensor::new(vec![4, 4], (0..16).map(f64::from).collect()).unwrap();
        let g = act_planar(&P4Element::rotation(1), &f, Boundary::ZeroPad).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(g.get(&[i, j]), f.get(&[j, 3 - i]));
            }
        }
    }

    #[test]
    fn rotate_filter_slice_example() {
        let mut w = Tensor::zeros(&[1, 1, 4, 3, 3]);
        for (k, v) in (1..=9).enumerate() {
            w.set(&[0, 0, 0, k / 3, k % 3], v as f64);
        }
        let r = rotate_filter(&w, 1).unwrap();
        // Slice 0 moved to rotation slot 1 and turned a quarter.
        let expect = [3.0, 6.0, 9.0, 2.0, 5.0, 8.0, 1.0, 4.0, 7.0];
        for (k, v) in expect.iter().enumerate() {
            assert_eq!(r.get(&[0, 0, 1, k / 3, k % 3]), *v);
        }
        assert_eq!(rotate_filter(&w, 0).unwrap(), w);
        let back = rotate_filter(&rotate_filter(&w, 1).unwrap(), 3).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn rotate_filter_rejects_non_square() {
        let w = Tensor::zeros(&[1, 1, 4, 3, 2]);
        assert!(matches!(
            rotate_filter(&w, 1),
            Err(Error::NonSquareKernel { kh: 3, kw: 2 })
        ));
    }

    #[test]
    fn zero_pad_translation_drops_values() {
        let f = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = act_planar(&P4Element::translation(0, 1), &f, Boundary::ZeroPad).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 2.0]);
        let c = act_planar(&P4Element::translation(0, 1), &f, Boundary::Circular).unwrap();
        assert_eq!(c.data(), &[3.0, 1.0, 2.0]);
    }
}
