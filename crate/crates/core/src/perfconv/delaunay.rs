//! Bowyer–Watson Delaunay triangulation of integer grid points.
//!
//! Mask positions are small integers, so orientation and in-circle tests are
//! evaluated exactly in `i128`. The enclosing super-triangle uses vertices
//! at distance `2^27`, large enough that its finite extent cannot change
//! the hull of grids up to a few hundred positions per side.

use std::collections::HashMap;

use crate::tensor::Pos;

const SUPER: i64 = 1 << 27;
const NONE: u32 = u32::MAX;

type Pt = (i64, i64);

#[inline]
fn orient(a: Pt, b: Pt, c: Pt) -> i128 {
    let (abx, aby) = ((b.0 - a.0) as i128, (b.1 - a.1) as i128);
    let (acx, acy) = ((c.0 - a.0) as i128, (c.1 - a.1) as i128);
    abx * acy - aby * acx
}

/// Positive when `d` lies strictly inside the circumcircle of the
/// counter-clockwise triangle `abc`.
#[inline]
fn incircle(a: Pt, b: Pt, c: Pt, d: Pt) -> i128 {
    let (adx, ady) = ((a.0 - d.0) as i128, (a.1 - d.1) as i128);
    let (bdx, bdy) = ((b.0 - d.0) as i128, (b.1 - d.1) as i128);
    let (cdx, cdy) = ((c.0 - d.0) as i128, (c.1 - d.1) as i128);
    let ad = adx * adx + ady * ady;
    let bd = bdx * bdx + bdy * bdy;
    let cd = cdx * cdx + cdy * cdy;
    ad * (bdx * cdy - cdx * bdy) + bd * (cdx * ady - adx * cdy) + cd * (adx * bdy - bdx * ady)
}

/// Delaunay triangulation of the exact positions, with every output
/// position located in at most one triangle.
#[derive(Clone, Debug)]
pub struct Triangulation {
    vertices: Vec<Pos>,
    triangles: Vec<[u32; 3]>,
    xp: usize,
    yp: usize,
    cover: Vec<u32>,
}

impl Triangulation {
    /// Triangulates `vertices` (inserted in the given order) and locates
    /// every position of the `xp × yp` grid.
    pub fn build(vertices: &[Pos], xp: usize, yp: usize) -> Self {
        let triangles = bowyer_watson(vertices);
        let mut tri = Triangulation {
            vertices: vertices.to_vec(),
            triangles,
            xp,
            yp,
            cover: vec![NONE; xp * yp],
        };
        tri.locate_all();
        tri
    }

    pub fn vertices(&self) -> &[Pos] {
        &self.vertices
    }

    /// Counter-clockwise vertex index triples.
    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    /// True when no triangle exists (fewer than three points, or all
    /// collinear).
    pub fn is_degenerate(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Triangle covering 1-based `(x, y)`, or `None` outside the hull.
    pub fn containing(&self, x: usize, y: usize) -> Option<usize> {
        match self.cover[Pos::new(x, y).flat(self.yp)] {
            NONE => None,
            t => Some(t as usize),
        }
    }

    /// Whether 1-based `(x, y)` lies in the convex hull of the vertices.
    pub fn in_hull(&self, x: usize, y: usize) -> bool {
        self.containing(x, y).is_some()
    }

    fn pt(&self, v: u32) -> Pt {
        let p = self.vertices[v as usize];
        (p.x as i64, p.y as i64)
    }

    /// Barycentric weights of 1-based `(x, y)` in triangle `t`, clamped to
    /// `[0, 1]` and renormalized.
    pub fn barycentric(&self, t: usize, x: usize, y: usize) -> [(u32, f64); 3] {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.pt(a), self.pt(b), self.pt(c));
        let q = (x as i64, y as i64);
        let area = orient(pa, pb, pc) as f64;
        let mut w = [
            orient(pb, pc, q) as f64 / area,
            orient(pc, pa, q) as f64 / area,
            orient(pa, pb, q) as f64 / area,
        ];
        for v in w.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        let sum: f64 = w.iter().sum();
        [(a, w[0] / sum), (b, w[1] / sum), (c, w[2] / sum)]
    }

    /// Empty-circumcircle check against every vertex; used by tests.
    pub fn is_delaunay(&self) -> bool {
        self.triangles.iter().all(|&[a, b, c]| {
            let (pa, pb, pc) = (self.pt(a), self.pt(b), self.pt(c));
            (0..self.vertices.len() as u32)
                .filter(|v| ![a, b, c].contains(v))
                .all(|v| incircle(pa, pb, pc, self.pt(v)) <= 0)
        })
    }

    fn locate_all(&mut self) {
        for (ti, &[a, b, c]) in self.triangles.iter().enumerate() {
            let (pa, pb, pc) = (self.pt(a), self.pt(b), self.pt(c));
            let xmin = pa.0.min(pb.0).min(pc.0).max(1) as usize;
            let xmax = (pa.0.max(pb.0).max(pc.0) as usize).min(self.xp);
            let ymin = pa.1.min(pb.1).min(pc.1).max(1) as usize;
            let ymax = (pa.1.max(pb.1).max(pc.1) as usize).min(self.yp);
            for x in xmin..=xmax {
                for y in ymin..=ymax {
                    let slot = &mut self.cover[(x - 1) * self.yp + (y - 1)];
                    if *slot != NONE {
                        continue;
                    }
                    let q = (x as i64, y as i64);
                    if orient(pa, pb, q) >= 0 && orient(pb, pc, q) >= 0 && orient(pc, pa, q) >= 0 {
                        *slot = ti as u32;
                    }
                }
            }
        }
    }
}

fn bowyer_watson(vertices: &[Pos]) -> Vec<[u32; 3]> {
    let n = vertices.len();
    if n < 3 {
        return Vec::new();
    }
    let mut pts: Vec<Pt> = vertices.iter().map(|p| (p.x as i64, p.y as i64)).collect();
    let s0 = n as u32;
    pts.push((-SUPER, -SUPER));
    pts.push((3 * SUPER, -SUPER));
    pts.push((-SUPER, 3 * SUPER));

    let mut tris: Vec<[u32; 3]> = vec![[s0, s0 + 1, s0 + 2]];
    let mut edges: HashMap<(u32, u32), u32> = HashMap::new();
    let mut bad: Vec<usize> = Vec::new();

    for p in 0..n as u32 {
        let pp = pts[p as usize];
        bad.clear();
        for (i, t) in tris.iter().enumerate() {
            let [a, b, c] = *t;
            if incircle(pts[a as usize], pts[b as usize], pts[c as usize], pp) > 0 {
                bad.push(i);
            }
        }
        edges.clear();
        for &i in &bad {
            let [a, b, c] = tris[i];
            for e in [(a, b), (b, c), (c, a)] {
                *edges.entry(e).or_insert(0) += 1;
            }
        }
        let mut boundary: Vec<(u32, u32)> = Vec::new();
        for &i in &bad {
            let [a, b, c] = tris[i];
            for (u, v) in [(a, b), (b, c), (c, a)] {
                if !edges.contains_key(&(v, u)) {
                    boundary.push((u, v));
                }
            }
        }
        // remove in descending index order so swap_remove never moves a bad one
        for &i in bad.iter().rev() {
            tris.swap_remove(i);
        }
        for (u, v) in boundary {
            if orient(pts[u as usize], pts[v as usize], pp) > 0 {
                tris.push([u, v, p]);
            }
        }
    }
    tris.retain(|t| t.iter().all(|&v| v < s0));
    tris
}
