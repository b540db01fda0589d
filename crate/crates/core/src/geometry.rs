//! Road-frame geometry for target road resources.
//!
//! Coordinates are `(s, y)`: `s` meters along the road, `y` meters laterally
//! from the right road edge, so lane `k` spans `y ∈ [k·w, (k+1)·w]`.
//! Intersections are judged by positive area: regions that only share an edge
//! or a corner do not overlap.

use serde::{Deserialize, Serialize};

use crate::codec::{SubManeuver, TrrLocation};

pub type Point = (f64, f64);

/// Areas at or below this are treated as touching, not overlapping.
pub const AREA_EPSILON: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Region {
    Rect { s0: f64, s1: f64, y0: f64, y1: f64 },
    Polygon(Vec<Point>),
}

impl Region {
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match self {
            Region::Rect { s0, s1, y0, y1 } => (*s0, *s1, *y0, *y1),
            Region::Polygon(points) => points.iter().fold(
                (
                    f64::INFINITY,
                    f64::NEG_INFINITY,
                    f64::INFINITY,
                    f64::NEG_INFINITY,
                ),
                |(a, b, c, d), &(s, y)| (a.min(s), b.max(s), c.min(y), d.max(y)),
            ),
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        match self {
            Region::Rect { s0, s1, y0, y1 } => p.0 >= *s0 && p.0 <= *s1 && p.1 >= *y0 && p.1 <= *y1,
            Region::Polygon(points) => point_in_polygon(points, p),
        }
    }

    fn as_points(&self) -> Vec<Point> {
        match self {
            Region::Rect { s0, s1, y0, y1 } => vec![(*s0, *y0), (*s1, *y0), (*s1, *y1), (*s0, *y1)],
            Region::Polygon(points) => points.clone(),
        }
    }
}

/// Lane geometry needed to place lane-relative TRRs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadFrame {
    pub lane_width: f64,
    /// Absolute lane that a lane offset of zero refers to.
    pub base_lane: i32,
}

impl Default for RoadFrame {
    fn default() -> Self {
        RoadFrame {
            lane_width: 3.5,
            base_lane: 0,
        }
    }
}

/// A region reserved over a closed time interval in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub region: Region,
    pub t0: u64,
    pub t1: u64,
}

impl Footprint {
    pub fn overlaps(&self, other: &Footprint) -> bool {
        self.t0.max(other.t0) <= self.t1.min(other.t1)
            && regions_overlap(&self.region, &other.region)
    }
}

/// Space-time footprint of a sub-maneuver. Lane segments cover the lane, widened
/// when the executant is wider than the lane, and are stretched by half the
/// executant length at both ends. `None` for an empty time interval.
pub fn footprint(sub: &SubManeuver, frame: &RoadFrame) -> Option<Footprint> {
    if sub.start_time > sub.end_time {
        return None;
    }
    let region = match &sub.trr.location {
        TrrLocation::LaneSegment {
            lane_offset,
            start_s,
            end_s,
        } => {
            let lane = frame.base_lane + *lane_offset as i32;
            let center = (lane as f64 + 0.5) * frame.lane_width;
            let half_width = frame.lane_width.max(sub.executant_width) / 2.0;
            let half_length = sub.executant_length.max(0.0) / 2.0;
            Region::Rect {
                s0: start_s.min(*end_s) - half_length,
                s1: start_s.max(*end_s) + half_length,
                y0: center - half_width,
                y1: center + half_width,
            }
        }
        TrrLocation::GeoRegion { polygon } => Region::Polygon(polygon.clone()),
    };
    Some(Footprint {
        region,
        t0: sub.start_time,
        t1: sub.end_time,
    })
}

pub fn regions_overlap(a: &Region, b: &Region) -> bool {
    let (as0, as1, ay0, ay1) = a.bounds();
    let (bs0, bs1, by0, by1) = b.bounds();
    if as0.max(bs0) >= as1.min(bs1) || ay0.max(by0) >= ay1.min(by1) {
        return false;
    }
    intersection_area(a, b) > AREA_EPSILON
}

pub fn intersection_area(a: &Region, b: &Region) -> f64 {
    if let (
        Region::Rect {
            s0: a0,
            s1: a1,
            y0: ay0,
            y1: ay1,
        },
        Region::Rect {
            s0: b0,
            s1: b1,
            y0: by0,
            y1: by1,
        },
    ) = (a, b)
    {
        let ds = (a1.min(*b1) - a0.max(*b0)).max(0.0);
        let dy = (ay1.min(*by1) - ay0.max(*by0)).max(0.0);
        return ds * dy;
    }
    let ta = triangulate(&a.as_points());
    let tb = triangulate(&b.as_points());
    let mut area = 0.0;
    for t in &ta {
        for u in &tb {
            area += clip_area(t, u);
        }
    }
    area
}

pub fn signed_area(points: &[Point]) -> f64 {
    let n = points.len();
    (0..n)
        .map(|i| {
            let (x0, y0) = points[i];
            let (x1, y1) = points[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum::<f64>()
        / 2.0
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Even-odd point-in-polygon test; boundary points may go either way.
pub fn point_in_polygon(points: &[Point], p: Point) -> bool {
    let n = points.len();
    let mut inside = false;
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (xi, yi) = points[i];
        let (xj, yj) = points[j];
        if (yi > p.1) != (yj > p.1) && p.0 < (xj - xi) * (p.1 - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// True when no two non-adjacent edges cross and the polygon has area.
pub fn is_simple(points: &[Point]) -> bool {
    let n = points.len();
    if n < 3 || signed_area(points).abs() <= AREA_EPSILON {
        return false;
    }
    for i in 0..n {
        let (a, b) = (points[i], points[(i + 1) % n]);
        for j in i + 1..n {
            if j == i || (j + 1) % n == i || j == (i + 1) % n {
                continue;
            }
            let (c, d) = (points[j], points[(j + 1) % n]);
            if segments_cross(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Ear-clipping triangulation of a simple polygon. Degenerate input yields
/// whatever ears could be found.
pub fn triangulate(points: &[Point]) -> Vec<[Point; 3]> {
    let mut poly: Vec<Point> = Vec::with_capacity(points.len());
    for &p in points {
        if poly.last() != Some(&p) {
            poly.push(p);
        }
    }
    while poly.len() > 1 && poly.first() == poly.last() {
        poly.pop();
    }
    if signed_area(&poly) < 0.0 {
        poly.reverse();
    }
    let mut out = Vec::with_capacity(poly.len().saturating_sub(2));
    while poly.len() > 3 {
        let n = poly.len();
        let ear = (0..n).find(|&i| {
            let (a, b, c) = (poly[(i + n - 1) % n], poly[i], poly[(i + 1) % n]);
            if cross(a, b, c) <= 0.0 {
                return false;
            }
            !poly.iter().enumerate().any(|(k, &p)| {
                k != i
                    && k != (i + n - 1) % n
                    && k != (i + 1) % n
                    && cross(a, b, p) >= 0.0
                    && cross(b, c, p) >= 0.0
                    && cross(c, a, p) >= 0.0
            })
        });
        match ear {
            Some(i) => {
                out.push([poly[(i + n - 1) % n], poly[i], poly[(i + 1) % n]]);
                poly.remove(i);
            }
            None => {
                // drop one collinear vertex if any; otherwise the input is not simple
                match (0..n).find(|&i| {
                    cross(poly[(i + n - 1) % n], poly[i], poly[(i + 1) % n]).abs() <= 1e-12
                }) {
                    Some(i) => {
                        poly.remove(i);
                    }
                    None => break,
                }
            }
        }
    }
    if poly.len() == 3 && cross(poly[0], poly[1], poly[2]) > 0.0 {
        out.push([poly[0], poly[1], poly[2]]);
    }
    out
}

/// Area of the intersection of two counter-clockwise triangles
/// (Sutherland–Hodgman against a convex clip).
fn clip_area(subject: &[Point; 3], clip: &[Point; 3]) -> f64 {
    let mut output: Vec<Point> = subject.to_vec();
    for i in 0..3 {
        let (a, b) = (clip[i], clip[(i + 1) % 3]);
        let input = std::mem::take(&mut output);
        if input.is_empty() {
            break;
        }
        let m = input.len();
        for k in 0..m {
            let cur = input[k];
            let prev = input[(k + m - 1) % m];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    if output.len() < 3 {
        0.0
    } else {
        signed_area(&output).abs()
    }
}

fn line_intersection(p: Point, q: Point, a: Point, b: Point) -> Point {
    let d1 = cross(a, b, p);
    let d2 = cross(a, b, q);
    let t = d1 / (d1 - d2);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect_poly(s0: f64, s1: f64, y0: f64, y1: f64) -> Region {
        Region::Polygon(vec![(s0, y0), (s1, y0), (s1, y1), (s0, y1)])
    }

    #[test]
    fn rect_fast_path_matches_polygon_path() {
        let a = Region::Rect {
            s0: 0.0,
            s1: 10.0,
            y0: 0.0,
            y1: 3.5,
        };
        let b = Region::Rect {
            s0: 5.0,
            s1: 20.0,
            y0: 1.0,
            y1: 5.0,
        };
        let exact = 5.0 * 2.5;
        assert!((intersection_area(&a, &b) - exact).abs() < 1e-9);
        let pa = rect_poly(0.0, 10.0, 0.0, 3.5);
        let pb = rect_poly(5.0, 20.0, 1.0, 5.0);
        assert!((intersection_area(&pa, &pb) - exact).abs() < 1e-9);
    }

    #[test]
    fn touching_edges_do_not_overlap() {
        let a = Region::Rect {
            s0: 0.0,
            s1: 10.0,
            y0: 0.0,
            y1: 3.5,
        };
        let b = Region::Rect {
            s0: 0.0,
            s1: 10.0,
            y0: 3.5,
            y1: 7.0,
        };
        assert!(!regions_overlap(&a, &b));
        assert!(!regions_overlap(
            &rect_poly(0.0, 10.0, 0.0, 3.5),
            &rect_poly(10.0, 20.0, 0.0, 3.5)
        ));
    }

    #[test]
    fn identical_polygons_overlap_fully() {
        let p = rect_poly(0.0, 4.0, 0.0, 2.0);
        assert!((intersection_area(&p, &p) - 8.0).abs() < 1e-9);
    }

    #[test]
    fn nested_polygon() {
        let outer = rect_poly(0.0, 10.0, 0.0, 10.0);
        let inner = Region::Polygon(vec![(4.0, 4.0), (6.0, 4.0), (5.0, 6.0)]);
        assert!((intersection_area(&outer, &inner) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn concave_polygon_notch_is_excluded() {
        // U shape: the notch [4,6]x[2,10] is outside
        let u = Region::Polygon(vec![
            (0.0, 0.0),
            (10.0, 0.0),
            (10.0, 10.0),
            (6.0, 10.0),
            (6.0, 2.0),
            (4.0, 2.0),
            (4.0, 10.0),
            (0.0, 10.0),
        ]);
        let in_notch = rect_poly(4.5, 5.5, 3.0, 9.0);
        assert!(!regions_overlap(&u, &in_notch));
        let across = rect_poly(3.0, 7.0, 5.0, 6.0);
        assert!((intersection_area(&u, &across) - 2.0).abs() < 1e-9);
        assert!(is_simple(&u.as_points()));
    }

    #[test]
    fn bowtie_is_not_simple() {
        assert!(!is_simple(&[
            (0.0, 0.0),
            (2.0, 2.0),
            (2.0, 0.0),
            (0.0, 2.0)
        ]));
        assert!(is_simple(&[(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)]));
    }

    #[test]
    fn triangulation_preserves_area() {
        let star: Vec<Point> = (0..10)
            .map(|i| {
                let r = if i % 2 == 0 { 5.0 } else { 2.0 };
                let a = i as f64 * std::f64::consts::PI / 5.0;
                (r * a.cos(), r * a.sin())
            })
            .collect();
        let tri_area: f64 = triangulate(&star)
            .iter()
            .map(|t| signed_area(t).abs())
            .sum();
        assert!((tri_area - signed_area(&star).abs()).abs() < 1e-9);
    }
}
