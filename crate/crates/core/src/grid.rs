use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// H×W matrix of image codes, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Grid {
    h: usize,
    w: usize,
    codes: Vec<u16>,
}

impl Grid {
    pub fn new(h: usize, w: usize, codes: Vec<u16>) -> Option<Self> {
        (h > 0 && w > 0 && codes.len() == h * w).then_some(Self { h, w, codes })
    }

    pub fn filled(h: usize, w: usize, code: u16) -> Self {
        Self {
            h,
            w,
            codes: vec![code; h * w],
        }
    }

    pub fn from_rows(rows: &[Vec<u16>]) -> Option<Self> {
        let h = rows.len();
        let w = rows.first()?.len();
        if rows.iter().any(|r| r.len() != w) {
            return None;
        }
        Self::new(h, w, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn get(&self, r: usize, c: usize) -> u16 {
        self.codes[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, code: u16) {
        self.codes[r * self.w + c] = code;
    }

    pub fn rows(&self) -> Vec<Vec<u16>> {
        self.codes.chunks(self.w).map(|r| r.to_vec()).collect()
    }

    /// Horizontal mirror.
    pub fn flipped(&self) -> Grid {
        let mut out = self.clone();
        for r in 0..self.h {
            for c in 0..self.w {
                out.set(r, c, self.get(r, self.w - 1 - c));
            }
        }
        out
    }

    /// Copy of the `kh×kw` block whose top-left corner is `(r, c)`.
    pub fn window(&self, r: usize, c: usize, kh: usize, kw: usize) -> Grid {
        let mut codes = Vec::with_capacity(kh * kw);
        for i in r..r + kh {
            codes.extend_from_slice(&self.codes[i * self.w + c..i * self.w + c + kw]);
        }
        Grid { h: kh, w: kw, codes }
    }

    /// Overwrites the block at `(r, c)` with `patch`. Panics if it does not fit.
    pub fn paste(&mut self, r: usize, c: usize, patch: &Grid) {
        assert!(r + patch.h <= self.h && c + patch.w <= self.w, "patch out of bounds");
        for i in 0..patch.h {
            for j in 0..patch.w {
                self.set(r + i, c + j, patch.get(i, j));
            }
        }
    }

    /// Most frequent code; ties go to the smaller code.
    pub fn dominant_code(&self) -> u16 {
        let mut counts = std::collections::BTreeMap::new();
        for &c in &self.codes {
            *counts.entry(c).or_insert(0usize) += 1;
        }
        let best = counts.values().copied().max().unwrap_or(0);
        counts
            .into_iter()
            .find(|&(_, n)| n == best)
            .map(|(c, _)| c)
            .unwrap_or(0)
    }
}

impl Serialize for Grid {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Grid {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<u16>>::deserialize(d)?;
        Grid::from_rows(&rows).ok_or_else(|| serde::de::Error::custom("ragged or empty grid"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_and_window() {
        let g = Grid::from_rows(&[vec![1, 2, 3], vec![4, 5, 6]]).unwrap();
        assert_eq!(g.flipped().rows(), vec![vec![3, 2, 1], vec![6, 5, 4]]);
        assert_eq!(g.window(0, 1, 2, 2).codes(), &[2, 3, 5, 6]);
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(json, "[[1,2,3],[4,5,6]]");
        assert_eq!(serde_json::from_str::<Grid>(&json).unwrap(), g);
        assert!(serde_json::from_str::<Grid>("[[1],[2,3]]").is_err());
    }

    #[test]
    fn dominant_prefers_lower_on_tie() {
        let g = Grid::from_rows(&[vec![7, 7, 3, 3]]).unwrap();
        assert_eq!(g.dominant_code(), 3);
    }
}
