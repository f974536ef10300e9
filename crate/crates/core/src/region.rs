//! Axis-aligned covariate boxes with half-open intervals `[lower, upper)`.

use serde::{Deserialize, Serialize};

/// An axis-aligned box in covariate space.
///
/// Every interval is half-open, `lower <= x < upper`. Bounds may be infinite,
/// so the root box `(-inf, +inf)^D` covers every finite point and the cells of
/// a split always partition their parent.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Region {
    pub fn unbounded(dims: usize) -> Self {
        Region {
            lower: vec![f64::NEG_INFINITY; dims],
            upper: vec![f64::INFINITY; dims],
        }
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn is_valid(&self) -> bool {
        self.lower.len() == self.upper.len()
            && self
                .lower
                .iter()
                .zip(&self.upper)
                .all(|(l, u)| !l.is_nan() && !u.is_nan() && l < u)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dims()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&v, (&l, &u))| l <= v && v < u)
    }

    /// Projects `x` into the box, per dimension.
    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&v, (&l, &u))| {
                if v < l {
                    l
                } else if v >= u {
                    u.next_down()
                } else {
                    v
                }
            })
            .collect()
    }

    /// Cuts the box along `dim` at the given increasing thresholds, returning
    /// `thresholds.len() + 1` adjacent cells.
    pub fn split(&self, dim: usize, thresholds: &[f64]) -> Vec<Region> {
        let mut cells = Vec::with_capacity(thresholds.len() + 1);
        let mut lo = self.lower[dim];
        for &t in thresholds.iter().chain(std::iter::once(&self.upper[dim])) {
            let mut cell = self.clone();
            cell.lower[dim] = lo;
            cell.upper[dim] = t;
            cells.push(cell);
            lo = t;
        }
        cells
    }
}

/// JSON form: infinite bounds are written as `null`.
#[derive(Serialize, Deserialize)]
struct RegionRepr {
    lower: Vec<Option<f64>>,
    upper: Vec<Option<f64>>,
}

impl Serialize for Region {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let finite = |v: &f64| v.is_finite().then_some(*v);
        RegionRepr {
            lower: self.lower.iter().map(finite).collect(),
            upper: self.upper.iter().map(finite).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Region {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = RegionRepr::deserialize(d)?;
        Ok(Region {
            lower: repr
                .lower
                .into_iter()
                .map(|v| v.unwrap_or(f64::NEG_INFINITY))
                .collect(),
            upper: repr
                .upper
                .into_iter()
                .map(|v| v.unwrap_or(f64::INFINITY))
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_partitions_the_axis() {
        let r = Region::unbounded(2);
        let cells = r.split(1, &[0.0, 1.0]);
        assert_eq!(cells.len(), 3);
        for x in [-5.0, 0.0, 0.5, 1.0, 7.0] {
            let hits = cells.iter().filter(|c| c.contains(&[3.0, x])).count();
            assert_eq!(hits, 1, "x = {x}");
        }
        assert!(cells[1].contains(&[0.0, 0.0]));
        assert!(cells[2].contains(&[0.0, 1.0]));
    }

    #[test]
    fn clamp_respects_half_open_upper_bound() {
        let r = Region {
            lower: vec![0.0],
            upper: vec![1.0],
        };
        let c = r.clamp(&[2.0]);
        assert!(r.contains(&c));
        assert_eq!(r.clamp(&[-1.0]), vec![0.0]);
    }

    #[test]
    fn json_uses_null_for_infinite_bounds() {
        let r = Region {
            lower: vec![f64::NEG_INFINITY, 0.25],
            upper: vec![1.5, f64::INFINITY],
        };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"lower":[null,0.25],"upper":[1.5,null]}"#);
        let back: Region = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }
}
