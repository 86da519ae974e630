//! Interpolation of perforated positions as a sparse linear map from the
//! `N` exact values to all of Ω.
//!
//! Each output position lists up to three `(exact index, weight)` pairs.
//! Densifying applies the map; the backward pass applies its transpose, so
//! derivatives of positions sharing a value are summed automatically.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lowering::PatchSource;
use crate::masks::{NeighborMap, PerforationMask};
use crate::tensor::{Matrix, Pos, Real, Tensor3};

use super::delaunay::Triangulation;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Interpolation {
    /// Copy the value of `ℓ(x, y)`.
    #[default]
    Nearest,
    /// Perforated positions become 0.
    Zero,
    /// Barycentric weights inside the Delaunay triangulation of `I`,
    /// nearest neighbor outside its hull.
    Barycentric,
}

impl Interpolation {
    pub const ALL: [Interpolation; 3] = [
        Interpolation::Nearest,
        Interpolation::Zero,
        Interpolation::Barycentric,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Interpolation::Nearest => "nearest",
            Interpolation::Zero => "zero",
            Interpolation::Barycentric => "bary",
        }
    }
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Interpolation::Nearest),
            "zero" => Ok(Interpolation::Zero),
            "bary" | "barycentric" => Ok(Interpolation::Barycentric),
            other => Err(Error::format(
                "interpolation",
                format!("unknown strategy `{other}`"),
            )),
        }
    }
}

/// CSR-encoded interpolation operator, rows are Ω in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpMap {
    xp: usize,
    yp: usize,
    n: usize,
    strategy: Interpolation,
    offsets: Vec<u32>,
    src: Vec<u32>,
    weight: Vec<f64>,
    positions: Vec<Pos>,
    pointwise: bool,
    copy_or_zero: bool,
    fallback: bool,
}

impl InterpMap {
    pub fn build(mask: &PerforationMask, neighbors: &NeighborMap, strategy: Interpolation) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::EmptyMask);
        }
        if neighbors.dims() != mask.dims() {
            return Err(Error::shape("neighbor map and mask dimensions differ"));
        }
        let (xp, yp) = mask.dims();
        let n = mask.len();
        let mut slot = vec![u32::MAX; xp * yp];
        for (k, p) in mask.positions().iter().enumerate() {
            slot[p.flat(yp)] = k as u32;
        }
        let mut map = InterpMap {
            xp,
            yp,
            n,
            strategy,
            offsets: Vec::with_capacity(xp * yp + 1),
            src: Vec::with_capacity(xp * yp),
            weight: Vec::with_capacity(xp * yp),
            positions: mask.positions().to_vec(),
            pointwise: false,
            copy_or_zero: false,
            fallback: false,
        };
        map.offsets.push(0);

        let tri = match strategy {
            Interpolation::Barycentric => {
                let t = Triangulation::build(mask.positions(), xp, yp);
                if t.is_degenerate() {
                    map.fallback = true;
                    None
                } else {
                    Some(t)
                }
            }
            _ => None,
        };

        for flat in 0..xp * yp {
            if slot[flat] != u32::MAX {
                map.push(slot[flat], 1.0);
            } else {
                match strategy {
                    Interpolation::Nearest => map.push(neighbors.index_flat(flat) as u32, 1.0),
                    Interpolation::Zero => {}
                    Interpolation::Barycentric => {
                        let p = Pos::from_flat(flat, yp);
                        match tri.as_ref().and_then(|t| t.containing(p.x, p.y).map(|ti| (t, ti))) {
                            Some((t, ti)) => {
                                for (v, w) in t.barycentric(ti, p.x, p.y) {
                                    if w > 0.0 {
                                        map.push(v, w);
                                    }
                                }
                            }
                            None => map.push(neighbors.index_flat(flat) as u32, 1.0),
                        }
                    }
                }
            }
            map.offsets.push(map.src.len() as u32);
        }
        let row = |f: usize| (map.offsets[f] as usize, map.offsets[f + 1] as usize);
        map.pointwise = (0..xp * yp).all(|f| {
            let (a, b) = row(f);
            b - a == 1 && map.weight[a] == 1.0
        });
        map.copy_or_zero = (0..xp * yp).all(|f| {
            let (a, b) = row(f);
            b == a || (b - a == 1 && map.weight[a] == 1.0)
        });
        Ok(map)
    }

    fn push(&mut self, src: u32, w: f64) {
        self.src.push(src);
        self.weight.push(w);
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.xp, self.yp)
    }

    /// Number of exact positions feeding the map.
    pub fn exact_count(&self) -> usize {
        self.n
    }

    pub fn strategy(&self) -> Interpolation {
        self.strategy
    }

    /// True when every position copies exactly one exact value, so
    /// elementwise operations commute with interpolation.
    pub fn is_pointwise_copy(&self) -> bool {
        self.pointwise
    }

    /// True when every position copies one exact value or is zero, so
    /// positive-homogeneous elementwise maps such as ReLU commute with it.
    pub fn is_copy_or_zero(&self) -> bool {
        self.copy_or_zero
    }

    /// The exact positions, in the order of the compact rows.
    pub fn exact_positions(&self) -> &[Pos] {
        &self.positions
    }

    /// Set when barycentric interpolation fell back to nearest neighbor
    /// because the exact positions admit no triangle.
    pub fn fell_back(&self) -> bool {
        self.fallback
    }

    /// `(exact index, weight)` pairs of 0-based row-major position `flat`.
    pub fn entries(&self, flat: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[flat] as usize, self.offsets[flat + 1] as usize);
        self.src[a..b]
            .iter()
            .zip(&self.weight[a..b])
            .map(|(&s, &w)| (s as usize, w))
    }

    #[inline]
    fn write_flat<T: Real>(&self, compact: &Matrix<T>, flat: usize, out: &mut [T]) {
        let (a, b) = (self.offsets[flat] as usize, self.offsets[flat + 1] as usize);
        if b - a == 1 && self.weight[a] == 1.0 {
            out.copy_from_slice(compact.row(self.src[a] as usize));
            return;
        }
        out.fill(T::zero());
        for k in a..b {
            let w = T::from_f64_lossy(self.weight[k]);
            for (o, &v) in out.iter_mut().zip(compact.row(self.src[k] as usize)) {
                *o += w * v;
            }
        }
    }

    /// `V̂` from the compact `N × T` exact values.
    pub fn apply<T: Real>(&self, compact: &Matrix<T>) -> Result<Tensor3<T>> {
        self.check(compact.rows())?;
        let t = compact.cols();
        let mut out = Tensor3::zeros(self.xp, self.yp, t);
        for (flat, px) in out.as_mut_slice().chunks_exact_mut(t.max(1)).enumerate() {
            self.write_flat(compact, flat, px);
        }
        Ok(out)
    }

    /// Transpose of [`apply`](Self::apply): folds a gradient on `V̂` onto
    /// the exact values.
    pub fn adjoint<T: Real>(&self, dense: &Tensor3<T>) -> Result<Matrix<T>> {
        let (x, y, t) = dense.dims();
        if (x, y) != (self.xp, self.yp) {
            return Err(Error::shape(format!(
                "gradient is {x}x{y}, interpolation map is {}x{}",
                self.xp, self.yp
            )));
        }
        let mut out = Matrix::zeros(self.n, t);
        for flat in 0..x * y {
            let g = &dense.as_slice()[flat * t..(flat + 1) * t];
            for (s, w) in self.entries(flat) {
                let w = T::from_f64_lossy(w);
                for (o, &gv) in out.row_mut(s).iter_mut().zip(g) {
                    *o += w * gv;
                }
            }
        }
        Ok(out)
    }

    fn check(&self, rows: usize) -> Result<()> {
        if rows != self.n {
            return Err(Error::shape(format!(
                "compact output has {rows} rows, mask has {} positions",
                self.n
            )));
        }
        Ok(())
    }
}

/// A perforated output kept as `N × T` exact values plus the map that
/// reconstructs every position on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct CompactActivation<T = f32> {
    pub values: Matrix<T>,
    pub map: std::sync::Arc<InterpMap>,
}

impl<T: Real> CompactActivation<T> {
    pub fn new(values: Matrix<T>, map: std::sync::Arc<InterpMap>) -> Result<Self> {
        map.check(values.rows())?;
        Ok(CompactActivation { values, map })
    }

    pub fn densify(&self) -> Tensor3<T> {
        self.map.apply(&self.values).expect("validated at construction")
    }

    /// Bytes held by the exact values.
    pub fn bytes(&self) -> usize {
        self.values.rows() * self.values.cols() * T::BYTES
    }
}

impl<T: Real> PatchSource<T> for CompactActivation<T> {
    fn dims(&self) -> (usize, usize, usize) {
        (self.map.xp, self.map.yp, self.values.cols())
    }

    #[inline]
    fn write_pixel(&self, x: usize, y: usize, out: &mut [T]) {
        self.map.write_flat(&self.values, x * self.map.yp + y, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{neighbor_map, uniform_mask, MaskKind, TieBreak};
    use crate::tensor::SpatialIndexSet;

    fn build(mask: &PerforationMask, s: Interpolation) -> InterpMap {
        let nm = neighbor_map(mask, TieBreak::LowestIndex).unwrap();
        InterpMap::build(mask, &nm, s).unwrap()
    }

    #[test]
    fn zero_strategy_keeps_exact_and_zeroes_rest() {
        let mask = uniform_mask(6, 5, 9, 1).unwrap();
        let map = build(&mask, Interpolation::Zero);
        let vals = Matrix::from_vec(9, 2, (0..18).map(|i| i as f32 + 1.0).collect()).unwrap();
        let dense = map.apply(&vals).unwrap();
        let member = mask.set().membership();
        for x in 0..6 {
            for y in 0..5 {
                let px = dense.pixel(x, y);
                if member[x * 5 + y] {
                    let k = mask.positions().iter().position(|p| *p == Pos::new(x + 1, y + 1)).unwrap();
                    assert_eq!(px, vals.row(k));
                } else {
                    assert!(px.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn barycentric_reproduces_affine_field() {
        let mask = uniform_mask(12, 11, 30, 4).unwrap();
        let map = build(&mask, Interpolation::Barycentric);
        assert!(!map.fell_back());
        let f = |p: Pos| 0.75 * p.x as f64 - 1.5 * p.y as f64 + 2.0;
        let vals = Matrix::from_vec(30, 1, mask.positions().iter().map(|&p| f(p)).collect()).unwrap();
        let dense = map.apply(&vals).unwrap();
        let tri = Triangulation::build(mask.positions(), 12, 11);
        let mut interior = 0;
        for x in 1..=12 {
            for y in 1..=11 {
                if tri.in_hull(x, y) {
                    interior += 1;
                    assert!((dense.get(x - 1, y - 1, 0) - f(Pos::new(x, y))).abs() <= 1e-9);
                }
            }
        }
        assert!(interior > 30);
    }

    #[test]
    fn collinear_mask_falls_back_to_nearest() {
        let set = SpatialIndexSet::new(5, 5, vec![Pos::new(1, 1), Pos::new(3, 3), Pos::new(5, 5)]).unwrap();
        let mask = PerforationMask::from_set(set, MaskKind::Custom, 0);
        let bary = build(&mask, Interpolation::Barycentric);
        assert!(bary.fell_back());
        let nearest = build(&mask, Interpolation::Nearest);
        let vals = Matrix::from_vec(3, 1, vec![1.0f64, 2.0, 3.0]).unwrap();
        assert_eq!(bary.apply(&vals).unwrap(), nearest.apply(&vals).unwrap());
    }

    #[test]
    fn adjoint_matches_apply() {
        for s in Interpolation::ALL {
            let mask = uniform_mask(7, 8, 15, 2).unwrap();
            let map = build(&mask, s);
            let vals = Matrix::from_vec(15, 3, (0..45).map(|i| ((i * 37) % 11) as f64 - 5.0).collect()).unwrap();
            let g = Tensor3::from_fn(7, 8, 3, |x, y, c| ((x * 5 + y * 3 + c * 7) % 13) as f64 - 6.0);
            let lhs: f64 = map.apply(&vals).unwrap().as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
            let back = map.adjoint(&g).unwrap();
            let rhs: f64 = vals.as_slice().iter().zip(back.as_slice()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{s}");
        }
    }

    #[test]
    fn nearest_is_pointwise_zero_is_not() {
        let mask = uniform_mask(4, 4, 5, 3).unwrap();
        assert!(build(&mask, Interpolation::Nearest).is_pointwise_copy());
        assert!(!build(&mask, Interpolation::Zero).is_pointwise_copy());
        assert!(build(&mask, Interpolation::Zero).is_copy_or_zero());
        assert!(build(&PerforationMask::full(4, 4), Interpolation::Zero).is_pointwise_copy());
    }
}
